#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "worldlens/extraction.hpp"
#include "worldlens/model.hpp"
#include "worldlens/probing.hpp"

namespace worldlens::intervention {

// h' = h + alpha * w_hat, where w_hat is the unit probe direction in the
// concatenated (16 x d_model) basis; row t of the result is the patched
// hidden state of final-frame token t.
Eigen::MatrixXf patch_hidden(const Eigen::MatrixXf& h, const Eigen::VectorXd& w_hat, double alpha);

// KL(p || q) in nats; q floored at `floor` before the log. Inputs must be
// distributions on the same support (entries >= 0, sums within 1e-6 of 1).
double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q, double floor = 1e-12);

// fraction of rows whose argmax differs
double token_change_rate(const Eigen::MatrixXf& logits_before, const Eigen::MatrixXf& logits_after);

struct InterventionConfig {
    std::string layer = "layer2";  // patched hidden layer (must match the probe's)
    std::string property;
    std::vector<double> alphas = {-40, -20, -10, -5, -2, -1, 0, 1, 2, 5, 10, 20, 40};
    int n_contexts = 200;
    uint64_t seed = 0;
    double policy_eps = 0.3;
    int episode_len = env::kEpisodeLen;

    nlohmann::json to_json() const;
    static InterventionConfig from_json(const nlohmann::json& j);
};

struct InterventionResult {
    double alpha = 0.0;        // in sigma_layer units
    double alpha_raw = 0.0;    // actual shift magnitude (alpha * sigma_layer)
    double kl_mean = 0.0;
    double kl_std = 0.0;
    double change_rate = 0.0;
    std::vector<double> per_context_kl;
};

struct CorrelationStat {
    double pearson_r = 0.0;            // over (|alpha|, kl_mean) pairs
    double spearman_rho = 0.0;         // monotonicity check
    std::vector<std::pair<double, double>> pairs;
};

struct SweepOutput {
    std::vector<InterventionResult> results;
    CorrelationStat correlation;
    double sigma_layer = 0.0;
    std::string layer;
    std::string property;
};

// Mean per-token hidden-state norm of the layer divided by sqrt(d_model);
// the alpha grid is expressed in multiples of this scale.
double layer_sigma(const extraction::ActivationDataset& dataset, const std::string& layer,
                   int d_model);

// Contexts are sampled from held-out episodes seeded by cfg.seed. For each
// context the unpatched greedy next-frame prediction is the baseline; each
// alpha adds alpha*sigma*w_hat to the 16 final-frame hidden states at the
// chosen layer and KL(baseline || patched) is averaged over the 16 predicted
// positions.
SweepOutput run_sweep(const wm::Transformer& model, const extraction::ActivationDataset& dataset,
                      const probing::LinearProbe& probe, const std::string& probe_layer,
                      env::Variant variant, const tok::Codebook& cb,
                      const InterventionConfig& cfg);

std::string results_to_csv(const SweepOutput& out);

}  // namespace worldlens::intervention
