#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "worldlens/extraction.hpp"
#include "worldlens/intervention.hpp"
#include "worldlens/model.hpp"
#include "worldlens/probing.hpp"

namespace worldlens::pipeline {

// Full pipeline configuration with every default materialized; a run's
// config is echoed verbatim into <out_dir>/config.json.
struct PipelineConfig {
    std::string run_id = "run";
    std::string variant = "bricks";
    std::string profile = "paper-analog";  // or "smoke"
    std::string out_dir;                   // default: out/<run_id>

    struct Seeds {
        uint64_t env = 1, tokenizer = 2, model = 3, policy = 4, probe = 5,
                 intervention = 6, ablation = 7;
    } seeds;

    struct Sim {
        int n_episodes = 400;
        int episode_len = env::kEpisodeLen;
        double policy_eps = 0.3;
        bool store_frames = false;
    } sim;

    struct Tokenizer {
        int K = 64;
        int fit_episodes = 16;  // episodes whose frames feed the k-means fit
    } tokenizer;

    wm::ModelConfig model;
    wm::TrainConfig train;
    extraction::ExtractionConfig extraction;

    struct Probing {
        double alpha = 1.0;
        int folds = 5;
        probing::MLPConfig mlp;
        std::string mlp_layers = "best";  // "best" = MLP only at best layers, or "all"
    } probing;

    intervention::InterventionConfig intervention;

    struct Analysis {
        int attention_contexts = 200;
        int ablation_contexts = 200;
    } analysis;

    static PipelineConfig defaults(const std::string& profile);
    static PipelineConfig from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;

    std::string resolved_out_dir() const;
    env::Variant variant_enum() const { return env::variant_from_string(variant); }
};

// Stage names in dependency order.
const std::vector<std::string>& stage_names();

// Runs one stage (or "all"); writes artifacts under the config's out dir and
// updates <out_dir>/manifest.json. Missing prerequisite artifacts raise
// MissingArtifactError; input-hash mismatches raise ProvenanceError.
void run_stage(const std::string& stage, const PipelineConfig& cfg);

// Applies "key=value" overrides of the form seeds.env=9, train.steps=100.
void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value);

}  // namespace worldlens::pipeline
