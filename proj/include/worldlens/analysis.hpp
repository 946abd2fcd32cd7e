#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "worldlens/model.hpp"
#include "worldlens/rollout.hpp"

namespace worldlens::analysis {

// Shannon entropy in nats of a probability vector (0 ln 0 := 0). The row
// must sum to 1 within 1e-5 and have non-negative entries.
double attention_entropy(const Eigen::VectorXd& row);

double spearman(const std::vector<double>& xs, const std::vector<double>& ys);
double pearson(const std::vector<double>& xs, const std::vector<double>& ys);

// A sampled analysis context: a full model context plus the ground-truth
// state of its final frame.
struct ContextSample {
    std::vector<uint16_t> ids;
    env::GameState state;
};

// Draws contexts from a fresh (held-out) episode stream. With stratify=true
// the contexts are balanced across the 16 grid cells of the ball position
// (round-robin over non-empty cells).
std::vector<ContextSample> sample_contexts(env::Variant variant, const tok::Codebook& cb,
                                           const wm::ModelConfig& model_cfg, int n,
                                           uint64_t master_seed, double policy_eps,
                                           int episode_len, bool stratify);

// Attention statistics for one head: entropy and the spatial selectivity
// map, both computed over final-frame query positions against the previous
// frame's 17-token window. The entropy uses the window-renormalized
// distribution over all 17 slots (H_max = ln 17); the selectivity map is the
// mean attention mass over the window's 16 spatial keys, renormalized to sum
// to 1 (uniform map = 1/16 per cell).
struct AttentionStats {
    // unaligned fixed-size matrix: these structs travel through standard
    // containers and algorithm temp buffers
    using Map4 = Eigen::Matrix<double, 4, 4, Eigen::DontAlign>;

    int layer = 0;
    int head = 0;
    double mean_entropy = 0.0;
    Map4 selectivity;  // 4x4, mean mass per key position
    int64_t n_samples = 0;

    double selectivity_score() const;  // max entry - 1/16
};

std::vector<AttentionStats> head_statistics(const wm::Transformer& model,
                                            const std::vector<ContextSample>& contexts);

// Heads ranked by selectivity score, descending; ties broken by (layer, head).
// k larger than the head count is clamped (with a warning on stderr).
std::vector<AttentionStats> top_selective_heads(const std::vector<AttentionStats>& stats, int k);

// Token frequency and frequency-weighted mean embedding over all spatial
// tokens of a corpus; the "mean" ablation baseline.
struct TokenStats {
    Eigen::VectorXd freq;          // K, sums to 1
    Eigen::VectorXf mean_embedding;  // d_model
    int64_t n_tokens = 0;
};

TokenStats compute_token_stats(const wm::TokenCorpus& corpus, const wm::Transformer& model);

// One prepared ablation: modified token ids and/or an embedding override.
struct AblatedContext {
    std::vector<uint16_t> ids;
    std::optional<wm::EmbedOverride> embed_override;
    int position = 0;              // spatial slot in the final context frame
    std::string baseline;
    uint16_t original_id = 0;
    uint16_t replacement_id = 0;   // random baseline only
};

// position is the within-frame spatial slot (0..15); slot 16 is the action
// token and cannot be ablated. Baselines: "zero" (zero embedding), "mean"
// (corpus-mean embedding), "random" (uniformly resampled codebook id).
AblatedContext ablate_token(const std::vector<uint16_t>& context, int position,
                            const std::string& baseline, const TokenStats& stats,
                            const wm::ModelConfig& cfg, uint64_t seed);

struct AblationResult {
    int position = 0;
    std::string baseline;
    double kl_mean = 0.0;          // KL at the ablated position's prediction
    double kl_std = 0.0;
    double kl_mean_allpos = 0.0;   // alternative: averaged over all 16 positions
    double change_rate = 0.0;
    std::vector<double> per_context_kl;
};

struct ConsistencyStat {
    double rho_zero_mean = 0.0;
    double rho_zero_random = 0.0;
    double rho_mean_random = 0.0;
    double ball_distance_r = 0.0;  // pearson(per-position KL, ball distance)
    std::vector<double> position_kl;        // 16, mean over baselines
    std::vector<double> position_distance;  // 16, mean px distance to ball
};

struct AblationOutput {
    std::vector<AblationResult> results;  // 16 positions x 3 baselines
    ConsistencyStat consistency;
};

AblationOutput ablation_sweep(const wm::Transformer& model,
                              const std::vector<ContextSample>& contexts,
                              const TokenStats& stats, uint64_t seed);

std::string attention_to_csv(const std::vector<AttentionStats>& stats);
nlohmann::json attention_to_json(const std::vector<AttentionStats>& stats);
std::string ablation_to_csv(const AblationOutput& out);
nlohmann::json ablation_to_json(const AblationOutput& out);

}  // namespace worldlens::analysis
