#pragma once

#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "worldlens/common.hpp"
#include "worldlens/extraction.hpp"

namespace worldlens::probing {

// Ridge probe fitted on standardized features and centered targets; weights
// also expressed in the raw activation basis so directions can be applied to
// real hidden states.
struct LinearProbe {
    double alpha = 1.0;
    Eigen::VectorXd w_std;           // standardized basis
    Eigen::VectorXd w_raw;           // raw basis: y = x . w_raw + b_raw
    double b_raw = 0.0;
    Eigen::VectorXd x_mean, x_std;   // standardization stats (std 0 kept as 1)
    double y_mean = 0.0;

    Eigen::VectorXd predict(const Eigen::MatrixXd& X_raw) const;
};

// Closed-form ridge: (X'X + alpha I) w = X'y on standardized X, centered y.
// Verifies the normal-equation residual to 1e-6 relative; alpha=0 on a
// degenerate X therefore raises NumericalError.
LinearProbe fit_ridge(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, double alpha);

struct MLPConfig {
    int hidden = 128;
    int epochs = 200;
    int batch = 256;
    double lr = 1e-3;
    double val_frac = 0.1;
    int patience = 20;
    uint64_t seed = 0;
};

// D -> hidden -> 1 regressor, ReLU, Adam, early stopping on a held-out split
// with best-epoch weight restore. Deterministic per seed.
struct MLPProbe {
    MLPConfig cfg;
    Eigen::MatrixXf w1;  // D x hidden
    Eigen::RowVectorXf b1;
    Eigen::VectorXf w2;  // hidden
    float b2 = 0;
    Eigen::VectorXd x_mean, x_std;
    double y_mean = 0.0, y_std = 1.0;

    Eigen::VectorXd predict(const Eigen::MatrixXd& X_raw) const;
};

MLPProbe fit_mlp(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, const MLPConfig& cfg);

// 1 - SS_res/SS_tot; undefined (error) for constant y_true.
double r2_score(const Eigen::VectorXd& y_true, const Eigen::VectorXd& y_pred);

struct CvResult {
    double mean = 0.0;
    double stddev = 0.0;                // population std over folds
    std::vector<double> fold_r2;
};

// Fold split: indices are shuffled once by Rng(seed) (Fisher-Yates), then
// fold i is the contiguous slice [floor(i*N/k), floor((i+1)*N/k)) of the
// shuffled order. Fit on the k-1 other folds, score on the held-out fold.
std::vector<std::vector<int>> cv_folds(int n, int k, uint64_t seed);

CvResult cross_val_r2(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                      const std::string& probe_kind, int k, uint64_t seed,
                      double alpha = 1.0, const MLPConfig& mlp = {});

struct ProbeResult {
    std::string layer;
    std::string property;
    std::string kind;  // "linear" | "mlp"
    double r2_mean = 0.0;
    double r2_std = 0.0;
    std::vector<double> fold_r2;
    std::optional<LinearProbe> probe;  // full-data refit, linear cells only
    std::string error;                 // non-empty when the cell failed

    bool ok() const { return error.empty(); }
};

// selectivity gap: R2(MLP) - R2(linear) for the same (layer, property)
double selectivity_gap(const ProbeResult& linear_result, const ProbeResult& mlp_result);

// unit probe direction in the raw activation basis
Eigen::VectorXd probe_direction(const LinearProbe& probe);

struct SweepConfig {
    double alpha = 1.0;
    int folds = 5;
    uint64_t seed = 0;
    MLPConfig mlp;
};

// Full (layer x property x kind) grid over one dataset. Fold split is shared
// across cells; per-cell fit errors are captured, not thrown.
std::vector<ProbeResult> probe_sweep(const extraction::ActivationDataset& dataset,
                                     const std::vector<std::string>& properties,
                                     const std::vector<std::string>& layers,
                                     const std::vector<std::string>& kinds,
                                     const SweepConfig& cfg);

// argmax of linear r2_mean per property; ties go to the earliest layer in
// the dataset's layer order
std::string best_layer(const std::vector<ProbeResult>& results, const std::string& property,
                       const std::vector<std::string>& layer_order);

nlohmann::json results_to_json(const std::vector<ProbeResult>& results);
std::string results_to_csv(const std::vector<ProbeResult>& results);
std::vector<ProbeResult> results_from_csv(const std::string& csv);

}  // namespace worldlens::probing
