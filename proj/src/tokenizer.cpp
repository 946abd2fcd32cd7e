#include "worldlens/tokenizer.hpp"

#include <cstring>
#include <limits>
#include <set>

#include <nlohmann/json.hpp>

#include "worldlens/array_file.hpp"

namespace worldlens::tok {

using json = nlohmann::json;

Eigen::MatrixXf extract_patches(const env::Frame& frame) {
    if (frame.width % kPatch != 0 || frame.height % kPatch != 0)
        throw ShapeError("frame dims " + std::to_string(frame.width) + "x" +
                         std::to_string(frame.height) + " not divisible by patch size " +
                         std::to_string(kPatch));
    int grid_w = frame.width / kPatch;
    int grid_h = frame.height / kPatch;
    Eigen::MatrixXf out(grid_w * grid_h, kPatchDim);
    for (int pr = 0; pr < grid_h; ++pr) {
        for (int pc = 0; pc < grid_w; ++pc) {
            int p = pr * grid_w + pc;
            for (int r = 0; r < kPatch; ++r)
                for (int c = 0; c < kPatch; ++c)
                    out(p, r * kPatch + c) = frame.at(pr * kPatch + r, pc * kPatch + c);
        }
    }
    return out;
}

namespace {

int nearest_entry(const Eigen::MatrixXf& entries, const Eigen::VectorXf& patch) {
    int best = 0;
    float best_d = std::numeric_limits<float>::max();
    for (int k = 0; k < entries.rows(); ++k) {
        float d = (entries.row(k).transpose() - patch).squaredNorm();
        if (d < best_d) {  // strict: ties keep the lowest id
            best_d = d;
            best = k;
        }
    }
    return best;
}

struct PatchLess {
    bool operator()(const Eigen::VectorXf& a, const Eigen::VectorXf& b) const {
        return std::lexicographical_compare(a.data(), a.data() + a.size(),
                                            b.data(), b.data() + b.size());
    }
};

}  // namespace

Codebook fit_codebook(const std::vector<env::Frame>& frames, int K, uint64_t seed,
                      int max_iters) {
    if (K <= 0) throw ConfigError("codebook size K must be positive");
    if (frames.empty()) throw FitError("cannot fit codebook on an empty corpus");

    // gather all patches
    std::vector<Eigen::VectorXf> patches;
    for (const auto& f : frames) {
        Eigen::MatrixXf p = extract_patches(f);
        for (int i = 0; i < p.rows(); ++i) patches.push_back(p.row(i).transpose());
    }
    const size_t n = patches.size();

    std::set<Eigen::VectorXf, PatchLess> distinct(patches.begin(), patches.end());
    if (static_cast<int>(distinct.size()) < K)
        throw FitError("codebook fit needs at least K=" + std::to_string(K) +
                       " distinct patches, corpus has " + std::to_string(distinct.size()) +
                       " (short by " + std::to_string(K - static_cast<int>(distinct.size())) + ")");

    Rng rng(seed);
    Eigen::MatrixXf centers(K, kPatchDim);

    // k-means++ seeding
    std::vector<float> min_d2(n, std::numeric_limits<float>::max());
    centers.row(0) = patches[rng.uniform_int(n)];
    for (int k = 1; k < K; ++k) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            float d = (patches[i] - centers.row(k - 1).transpose()).squaredNorm();
            if (d < min_d2[i]) min_d2[i] = d;
            total += min_d2[i];
        }
        size_t pick = 0;
        if (total > 0) {
            double target = rng.uniform() * total;
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += min_d2[i];
                if (acc >= target) { pick = i; break; }
            }
        } else {
            pick = rng.uniform_int(n);
        }
        centers.row(k) = patches[pick];
    }

    // Lloyd iterations
    std::vector<int> assign(n, -1);
    for (int iter = 0; iter < max_iters; ++iter) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            int a = nearest_entry(centers, patches[i]);
            if (a != assign[i]) { assign[i] = a; changed = true; }
        }
        if (!changed && iter > 0) break;

        Eigen::MatrixXf sums = Eigen::MatrixXf::Zero(K, kPatchDim);
        std::vector<int> counts(K, 0);
        for (size_t i = 0; i < n; ++i) {
            sums.row(assign[i]) += patches[i];
            counts[assign[i]] += 1;
        }
        for (int k = 0; k < K; ++k) {
            if (counts[k] > 0) {
                centers.row(k) = sums.row(k) / static_cast<float>(counts[k]);
            } else {
                // re-seed an empty cluster from the farthest point
                size_t far = 0;
                float far_d = -1.0f;
                for (size_t i = 0; i < n; ++i) {
                    float d = (patches[i] - centers.row(assign[i]).transpose()).squaredNorm();
                    if (d > far_d) { far_d = d; far = i; }
                }
                centers.row(k) = patches[far];
                assign[far] = k;
            }
        }
    }

    // post-fit deduplication: replace exact duplicates with distinct patches
    // that are farthest from their current center
    auto is_dup = [&centers](int k) {
        for (int j = 0; j < k; ++j)
            if (centers.row(j) == centers.row(k)) return true;
        return false;
    };
    for (int k = 0; k < K; ++k) {
        if (!is_dup(k)) continue;
        size_t best_i = n;
        float best_d = -1.0f;
        for (size_t i = 0; i < n; ++i) {
            bool taken = false;
            for (int j = 0; j < K; ++j)
                if (centers.row(j).transpose() == patches[i]) { taken = true; break; }
            if (taken) continue;
            float d = (patches[i] - centers.row(nearest_entry(centers, patches[i])).transpose()).squaredNorm();
            if (d > best_d) { best_d = d; best_i = i; }
        }
        if (best_i < n) centers.row(k) = patches[best_i];
    }

    Codebook cb;
    cb.K = K;
    cb.patch_dim = kPatchDim;
    cb.fit_seed = seed;
    cb.entries = centers;
    return cb;
}

TokenGrid encode(const env::Frame& frame, const Codebook& cb) {
    Eigen::MatrixXf patches = extract_patches(frame);
    if (patches.rows() != kTokensPerFrame)
        throw ShapeError("encode expects a " + std::to_string(kGrid * kPatch) + "x" +
                         std::to_string(kGrid * kPatch) + " frame");
    if (patches.cols() != cb.entries.cols())
        throw ShapeError("patch dim does not match codebook entry dim");
    TokenGrid g;
    for (int p = 0; p < kTokensPerFrame; ++p)
        g.ids[p] = static_cast<uint16_t>(nearest_entry(cb.entries, patches.row(p).transpose()));
    return g;
}

env::Frame decode(const TokenGrid& grid, const Codebook& cb) {
    env::Frame f;
    f.width = kGrid * kPatch;
    f.height = kGrid * kPatch;
    f.pixels.assign(static_cast<size_t>(f.width) * f.height, 0.0f);
    for (int p = 0; p < kTokensPerFrame; ++p) {
        if (grid.ids[p] >= cb.K)
            throw DataError("token id " + std::to_string(grid.ids[p]) +
                            " out of range for codebook K=" + std::to_string(cb.K));
        int pr = p / kGrid, pc = p % kGrid;
        for (int r = 0; r < kPatch; ++r)
            for (int c = 0; c < kPatch; ++c)
                f.at(pr * kPatch + r, pc * kPatch + c) = cb.entries(grid.ids[p], r * kPatch + c);
    }
    return f;
}

uint64_t Codebook::content_hash() const {
    uint64_t h = fnv1a64(&K, sizeof(K));
    h = fnv1a64(&patch_dim, sizeof(patch_dim), h);
    h = fnv1a64(entries.data(), sizeof(float) * entries.size(), h);
    return h;
}

void Codebook::save(const std::string& path) const {
    ArrayFile f;
    json meta;
    meta["kind"] = "codebook";
    meta["K"] = K;
    meta["patch_dim"] = patch_dim;
    meta["fit_seed"] = fit_seed;
    meta["version"] = 1;
    f.set_meta(meta);
    // arrays are stored row-major (C order)
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = entries;
    f.add_f32("entries", {K, patch_dim}, rm.data());
    f.save(path);
}

Codebook Codebook::load(const std::string& path) {
    ArrayFile f = ArrayFile::load(path);
    json meta = f.meta();
    if (meta.value("kind", "") != "codebook") throw DataError("not a codebook file: " + path);
    Codebook cb;
    cb.K = meta.at("K").get<int>();
    cb.patch_dim = meta.at("patch_dim").get<int>();
    cb.fit_seed = meta.at("fit_seed").get<uint64_t>();
    auto entries = f.f32("entries");
    cb.entries = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        entries.data(), cb.K, cb.patch_dim);
    return cb;
}

}  // namespace worldlens::tok
