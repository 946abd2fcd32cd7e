#include "worldlens/common.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <mutex>
#include <thread>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace worldlens {

// The numeric kernels churn through ~0.5 MB temporaries; with glibc defaults
// those cross the mmap threshold and every alloc/free becomes an mmap/munmap
// cycle with page-fault cost. Keep large blocks on the heap instead.
namespace {
struct MallocTuning {
    MallocTuning() {
#if defined(__GLIBC__)
        mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
        mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
    }
};
const MallocTuning malloc_tuning;
}  // namespace

std::string hash_hex(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

unsigned worker_count() {
    static unsigned n = [] {
        if (const char* env = std::getenv("WORLDLENS_THREADS")) {
            long v = std::strtol(env, nullptr, 10);
            if (v > 0) return static_cast<unsigned>(v);
        }
        unsigned hw = std::thread::hardware_concurrency();
        return hw == 0 ? 1u : hw;
    }();
    return n;
}

void parallel_for(size_t n_chunks, const std::function<void(size_t)>& fn) {
    if (n_chunks == 0) return;
    unsigned n_threads = std::min<size_t>(worker_count(), n_chunks);
    if (n_threads <= 1) {
        for (size_t i = 0; i < n_chunks; ++i) fn(i);
        return;
    }
    std::atomic<size_t> next{0};
    std::exception_ptr first_error;
    std::mutex err_mutex;
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= n_chunks) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(err_mutex);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> threads;
    threads.reserve(n_threads);
    for (unsigned t = 0; t < n_threads; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace worldlens
