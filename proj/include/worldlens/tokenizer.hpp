#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "worldlens/env.hpp"

namespace worldlens::tok {

constexpr int kGrid = 4;                       // 4x4 token grid
constexpr int kPatch = 8;                      // 8x8 pixel patches
constexpr int kPatchDim = kPatch * kPatch;     // 64
constexpr int kTokensPerFrame = kGrid * kGrid; // 16

// Token position p (row-major) covers patch (p / kGrid, p % kGrid), i.e.
// pixel rows [8*(p/4), 8*(p/4)+7] and columns [8*(p%4), 8*(p%4)+7].

struct TokenGrid {
    std::array<uint16_t, kTokensPerFrame> ids{};

    uint16_t at(int row, int col) const { return ids[row * kGrid + col]; }
};

struct Codebook {
    int K = 0;
    int patch_dim = kPatchDim;
    uint64_t fit_seed = 0;
    Eigen::MatrixXf entries;  // K x patch_dim, values in [0, 1]

    uint64_t content_hash() const;
    void save(const std::string& path) const;
    static Codebook load(const std::string& path);
};

// Flattens the frame into its 16 patches (row-major patch order, row-major
// pixels inside each patch). Throws ShapeError if dims are not divisible
// by the patch size.
Eigen::MatrixXf extract_patches(const env::Frame& frame);

// K-means over all patches of the corpus. Deterministic given seed
// (k-means++ init, Lloyd iterations, lowest-id tie break, empty clusters
// re-seeded from the farthest point). Throws FitError when the corpus has
// fewer than K distinct patches.
Codebook fit_codebook(const std::vector<env::Frame>& frames, int K, uint64_t seed,
                      int max_iters = 100);

// Nearest codebook entry per patch (squared Euclidean, ties to lowest id).
TokenGrid encode(const env::Frame& frame, const Codebook& cb);

// Tiles codebook entries back into a frame. Throws DataError on out-of-range ids.
env::Frame decode(const TokenGrid& grid, const Codebook& cb);

}  // namespace worldlens::tok
