#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "worldlens/common.hpp"
#include "worldlens/tokenizer.hpp"

namespace worldlens::wm {

// Sequence layout: each frame contributes 17 tokens — its 16 spatial tokens
// in row-major grid order (slots 0..15) followed by one action token
// (slot 16). A context of context_frames frames is
//   [z0_0..z0_15, a0, z1_0..z1_15, a1, ...]
// so global position p belongs to frame p/17 at slot p%17. The model is
// trained on windows of context_frames+1 frames (the final frame without its
// action token, 84 tokens by default) and predicts each next spatial token.
// Action ids live in the same vocabulary as frame tokens: action a maps to
// token id K + a.

struct ModelConfig {
    int n_layers = 4;
    int n_heads = 4;
    int d_model = 64;
    int d_ff = 256;
    int context_frames = 4;
    int codebook_size = 64;  // K
    int n_actions = 3;
    uint64_t seed = 0;

    int vocab() const { return codebook_size + n_actions; }
    int tokens_per_frame() const { return tok::kTokensPerFrame + 1; }        // 17
    int context_len() const { return context_frames * tokens_per_frame(); }  // 68
    int max_seq() const { return context_len() + tok::kTokensPerFrame; }     // 84
    int n_hidden_layers() const { return n_layers + 1; }  // embedding output + blocks
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& j);
};

inline int slot_of(int pos) { return pos % (tok::kTokensPerFrame + 1); }
inline int frame_of(int pos) { return pos / (tok::kTokensPerFrame + 1); }
inline bool is_action_slot(int pos) { return slot_of(pos) == tok::kTokensPerFrame; }

// Hidden states and attention maps from one traced forward pass.
// hidden[0] is the embedding output; hidden[l] (l >= 1) is the residual
// stream after block l. attention[l][h] is row-stochastic and strictly
// lower-triangular-plus-diagonal (causal).
struct TraceRecord {
    std::vector<Eigen::MatrixXf> hidden;                   // n_layers+1 of seq x d_model
    std::vector<std::vector<Eigen::MatrixXf>> attention;   // [layer][head], seq x seq
    Eigen::MatrixXf logits;                                // seq x vocab
};

// Additive patch applied to the residual stream after hidden layer `layer`
// (0 = embedding output). delta row i is added to sequence position
// positions[i].
struct PatchSpec {
    int layer = 0;
    std::vector<int> positions;
    Eigen::MatrixXf delta;  // positions.size() x d_model
};

// Replaces the token embedding at one position before positions are added
// (positional embedding is kept). zero=true replaces with the zero vector.
struct EmbedOverride {
    int position = 0;
    bool zero = true;
    Eigen::VectorXf value;
};

struct EvalOptions {
    std::optional<PatchSpec> patch;
    std::optional<EmbedOverride> embed_override;
};

struct NextFramePrediction {
    Eigen::MatrixXf dists;               // 16 x vocab, softmax per row
    Eigen::MatrixXf logits;              // 16 x vocab
    std::array<uint16_t, 16> grid{};     // per-position argmax
};

// One tokenized episode: frames[t] is the token grid of frame t,
// actions[t] the action taken after it (frames.size() == actions.size()+1).
struct TokenizedEpisode {
    uint64_t env_seed = 0;
    int episode_index = 0;
    std::vector<tok::TokenGrid> frames;
    std::vector<uint8_t> actions;
};

struct TokenCorpus {
    std::string variant;
    int codebook_size = 0;
    int n_actions = 3;
    uint64_t codebook_hash = 0;
    std::vector<TokenizedEpisode> episodes;

    size_t n_frames() const;
};

// Builds the 84-token training window starting at frame `start` (needs
// frames start..start+context_frames and actions start..start+context_frames-1).
std::vector<uint16_t> build_window(const TokenizedEpisode& ep, int start, const ModelConfig& cfg);
// Builds the 68-token context ending at frame `last` (inclusive).
std::vector<uint16_t> build_context(const TokenizedEpisode& ep, int last, const ModelConfig& cfg);

struct TrainConfig {
    int steps = 20000;
    int batch_size = 64;
    int n_chunks = 8;         // gradient accumulation slots (fixed for determinism)
    double lr = 3e-4;
    int warmup_steps = 100;
    double grad_clip = 1.0;
    double val_frac = 0.05;
    int eval_every = 500;
    uint64_t seed = 0;

    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainStats {
    int steps = 0;
    double final_train_loss = 0.0;
    double val_loss = 0.0;
    double val_accuracy = 0.0;
    double chance_accuracy = 0.0;
    std::vector<std::pair<int, double>> loss_history;  // (step, smoothed train loss)
};

class Transformer {
public:
    Transformer(const ModelConfig& cfg, uint64_t init_seed);
    Transformer(const Transformer&);
    Transformer& operator=(const Transformer&);
    Transformer(Transformer&&) noexcept;
    Transformer& operator=(Transformer&&) noexcept;
    ~Transformer();

    const ModelConfig& config() const;
    uint64_t weights_hash() const;
    int64_t n_params() const;

    Eigen::MatrixXf forward_logits(std::span<const uint16_t> ids,
                                   const EvalOptions& opts = {}) const;
    TraceRecord forward_with_trace(std::span<const uint16_t> ids,
                                   bool want_attention = true,
                                   const EvalOptions& opts = {}) const;

    // Greedy autoregressive decode of the next frame's 16 tokens.
    NextFramePrediction predict_next_frame(std::span<const uint16_t> context,
                                           const EvalOptions& opts = {}) const;
    // Same 16 distributions, but conditioned on the given next-frame tokens
    // (one 84-token forward). Used so perturbed and baseline predictions are
    // compared under identical conditioning.
    NextFramePrediction eval_next_frame_forced(std::span<const uint16_t> context,
                                               const std::array<uint16_t, 16>& forced,
                                               const EvalOptions& opts = {}) const;

    TrainStats train(const TokenCorpus& corpus, const TrainConfig& tc);

    // Mean next-token accuracy/loss over spatial-token targets of sampled
    // windows. Used for the chance-level and regression checks.
    struct EvalResult { double loss; double accuracy; int64_t n_targets; };
    EvalResult evaluate(const TokenCorpus& corpus, int n_windows, uint64_t seed) const;

    Eigen::VectorXf token_embedding(int token_id) const;

    void save(const std::string& path, const nlohmann::json& extra_meta) const;
    static Transformer load(const std::string& path);
    nlohmann::json saved_meta() const;  // meta captured at load time (empty for fresh models)

    struct Impl;
    const Impl& impl() const { return *impl_; }

private:
    explicit Transformer(std::unique_ptr<Impl> impl);
    std::unique_ptr<Impl> impl_;
};

Transformer make_random_model(const ModelConfig& cfg, uint64_t seed);

// Double-precision finite-difference check of the training gradient on a
// small model; returns the max relative error over n_probes parameters.
double gradient_check(const ModelConfig& cfg, uint64_t seed, int n_probes);

}  // namespace worldlens::wm
