#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "worldlens/env.hpp"
#include "worldlens/model.hpp"
#include "worldlens/rollout.hpp"
#include "worldlens/tokenizer.hpp"

namespace worldlens::extraction {

struct ExtractionConfig {
    int n_frames = 10000;
    double policy_eps = 0.3;
    uint64_t policy_seed = 0;          // master seed of the episode stream
    int episode_len = env::kEpisodeLen;
    std::string aggregation = "concat";  // "concat" (16 x d_model) or "mean" (d_model)

    nlohmann::json to_json() const;
    static ExtractionConfig from_json(const nlohmann::json& j);
};

struct FrameMeta {
    uint64_t env_seed = 0;
    int episode_index = 0;
    int step = 0;  // frame index within the episode
};

// Per-layer activation matrices row-aligned with ground-truth properties.
// Layer order (network data-flow): tok_patch, tok_quant (tokenizer
// representations), then layer0 (embedding output) .. layerL (block outputs).
struct ActivationDataset {
    std::string variant;
    std::vector<std::string> layer_names;
    std::map<std::string, Eigen::MatrixXf> layers;  // each N x D_layer
    std::vector<std::string> property_names;
    Eigen::MatrixXd properties;  // N x P, raw units
    Eigen::VectorXd prop_mean, prop_std;
    std::vector<FrameMeta> meta;
    nlohmann::json provenance;  // hashes, seeds, control kind, aggregation

    int n() const { return static_cast<int>(properties.rows()); }
    const Eigen::MatrixXf& layer(const std::string& name) const;
    int property_index(const std::string& name) const;
    // z-scored property column (the probing target)
    Eigen::VectorXd normalized_property(const std::string& name) const;

    void save(const std::string& path) const;  // writes <path> and <path>.manifest.json
    static ActivationDataset load(const std::string& path);
    uint64_t content_hash() const;
};

// Rolls out episodes with the scripted policy, runs traced forwards of the
// model and stores every hidden layer's representation of the final context
// frame plus that frame's ground-truth properties.
ActivationDataset collect(const wm::Transformer& model, const tok::Codebook& cb,
                          env::Variant variant, const ExtractionConfig& cfg);

// Controls ("raw pixels, random model, shuffled labels").
ActivationDataset make_control_raw_pixels(env::Variant variant, const ExtractionConfig& cfg,
                                          int context_frames);
ActivationDataset make_control_random_model(const wm::ModelConfig& model_cfg, uint64_t model_seed,
                                            const tok::Codebook& cb, env::Variant variant,
                                            const ExtractionConfig& cfg);
ActivationDataset make_control_shuffled_labels(const ActivationDataset& base, uint64_t shuffle_seed);

}  // namespace worldlens::extraction
