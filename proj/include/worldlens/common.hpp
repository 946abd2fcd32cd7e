#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace worldlens {

// Error taxonomy. The CLI maps these onto exit codes (see tools/).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error { using Error::Error; };          // bad configuration / unknown variant
struct ShapeError : Error { using Error::Error; };           // dimension mismatch
struct DataError : Error { using Error::Error; };            // invalid values / corrupt files
struct FitError : Error { using Error::Error; };             // estimator could not be fitted
struct TrainError : Error { using Error::Error; };           // training diverged
struct UsageError : Error { using Error::Error; };           // API misuse (mismatched keys, bad slot)
struct MissingArtifactError : Error { using Error::Error; }; // required pipeline input absent
struct ProvenanceError : Error { using Error::Error; };      // artifact hash mismatch
struct NumericalError : Error { using Error::Error; };       // singular system, undefined metric

// splitmix64 mixer (Vigna, public domain). Used to derive independent
// sub-seeds from one master seed; also the documented re-serve schedule.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 1));
}

// Deterministic RNG. std::mt19937_64 output is fixed by the standard;
// the distributions below are hand-rolled so results are identical
// across standard libraries.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    // uniform double in [0, 1)
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        if (n == 0) throw UsageError("uniform_int: n must be positive");
        // rejection sampling to avoid modulo bias
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do { x = next_u64(); } while (x >= limit);
        return x % n;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do { u1 = uniform(); } while (u1 <= 0.0);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates shuffle
    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    std::vector<size_t> permutation(size_t n) {
        std::vector<size_t> p(n);
        for (size_t i = 0; i < n; ++i) p[i] = i;
        shuffle(p);
        return p;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// FNV-1a 64-bit, used for artifact provenance hashes.
inline uint64_t fnv1a64(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::string hash_hex(uint64_t h);

// Runs fn(chunk_index) for chunk_index in [0, n_chunks). Chunks are handed to a
// small thread pool; callers that need determinism must write results into
// per-chunk slots (reductions happen after join, in chunk order).
void parallel_for(size_t n_chunks, const std::function<void(size_t)>& fn);

// Global worker count (defaults to hardware_concurrency, overridable via the
// WORLDLENS_THREADS environment variable).
unsigned worker_count();

}  // namespace worldlens
