#include "worldlens/extraction.hpp"

#include <cmath>

#include "worldlens/array_file.hpp"

namespace worldlens::extraction {

using json = nlohmann::json;

json ExtractionConfig::to_json() const {
    return json{{"n_frames", n_frames},
                {"policy_eps", policy_eps},
                {"policy_seed", policy_seed},
                {"episode_len", episode_len},
                {"aggregation", aggregation}};
}

ExtractionConfig ExtractionConfig::from_json(const json& j) {
    ExtractionConfig c;
    c.n_frames = j.value("n_frames", c.n_frames);
    c.policy_eps = j.value("policy_eps", c.policy_eps);
    c.policy_seed = j.value("policy_seed", c.policy_seed);
    c.episode_len = j.value("episode_len", c.episode_len);
    c.aggregation = j.value("aggregation", c.aggregation);
    return c;
}

const Eigen::MatrixXf& ActivationDataset::layer(const std::string& name) const {
    auto it = layers.find(name);
    if (it == layers.end()) throw UsageError("dataset has no layer named '" + name + "'");
    return it->second;
}

int ActivationDataset::property_index(const std::string& name) const {
    for (size_t i = 0; i < property_names.size(); ++i)
        if (property_names[i] == name) return static_cast<int>(i);
    throw UsageError("dataset has no property named '" + name + "'");
}

Eigen::VectorXd ActivationDataset::normalized_property(const std::string& name) const {
    int j = property_index(name);
    double sd = prop_std[j] > 0 ? prop_std[j] : 1.0;
    return (properties.col(j).array() - prop_mean[j]) / sd;
}

namespace {

// rows with a full context: frame t has context [t-ctx+1, t] and needs
// action a_t, so t in [ctx-1, episode_len-1]
int rows_per_episode(int episode_len, int context_frames) {
    return episode_len - context_frames + 1;
}

void finalize_stats(ActivationDataset& ds) {
    const int n = ds.n();
    const int p = static_cast<int>(ds.property_names.size());
    ds.prop_mean.resize(p);
    ds.prop_std.resize(p);
    for (int j = 0; j < p; ++j) {
        double m = ds.properties.col(j).mean();
        double var = (ds.properties.col(j).array() - m).square().sum() / n;
        ds.prop_mean[j] = m;
        ds.prop_std[j] = std::sqrt(var);
    }
}

struct RowSink {
    ActivationDataset* ds;
    int context_frames;

    void fill(const wm::Transformer* model, const tok::Codebook* cb, env::Variant variant,
              const ExtractionConfig& cfg, bool raw_pixels_only) {
        ActivationDataset& out = *ds;
        const int rows_ep = rows_per_episode(cfg.episode_len, context_frames);
        const int n_episodes = (cfg.n_frames + rows_ep - 1) / rows_ep;
        const bool mean_pool = cfg.aggregation == "mean";
        if (!raw_pixels_only && cfg.aggregation != "concat" && cfg.aggregation != "mean")
            throw ConfigError("unknown aggregation '" + cfg.aggregation + "'");

        const int d_model = model ? model->config().d_model : 0;
        const int d_layer = mean_pool ? d_model : tok::kTokensPerFrame * d_model;
        const int d_tokrep = mean_pool ? tok::kPatchDim : tok::kTokensPerFrame * tok::kPatchDim;

        out.property_names = env::property_names(variant);
        const int P = static_cast<int>(out.property_names.size());
        const int N = cfg.n_frames;

        if (raw_pixels_only) {
            out.layer_names = {"raw_pixels"};
            out.layers["raw_pixels"].resize(N, env::kFrameW * env::kFrameH);
        } else {
            out.layer_names = {"tok_patch", "tok_quant"};
            out.layers["tok_patch"].resize(N, d_tokrep);
            out.layers["tok_quant"].resize(N, d_tokrep);
            for (int l = 0; l <= model->config().n_layers; ++l) {
                std::string name = "layer" + std::to_string(l);
                out.layer_names.push_back(name);
                out.layers[name].resize(N, d_layer);
            }
        }
        out.properties.resize(N, P);
        out.meta.resize(N);

        int64_t skipped = 0;
        std::vector<int64_t> skipped_per_ep(n_episodes, 0);
        parallel_for(n_episodes, [&](size_t e) {
            rollout::Episode ep = rollout::run_indexed_episode(
                variant, cfg.policy_seed, static_cast<int>(e), cfg.episode_len, cfg.policy_eps);
            wm::TokenizedEpisode te;
            if (!raw_pixels_only) te = rollout::tokenize_episode(ep, *cb);
            // frames without a full context, plus the terminal frame (no action)
            skipped_per_ep[e] = context_frames;

            int row0 = static_cast<int>(e) * rows_ep;
            for (int t = context_frames - 1; t < cfg.episode_len; ++t) {
                int row = row0 + (t - (context_frames - 1));
                if (row >= N) break;
                const env::GameState& st = ep.states[t];

                env::PropertyVector pv = env::ground_truth(st);
                for (int j = 0; j < P; ++j) out.properties(row, j) = pv.values[j];
                out.meta[row] = FrameMeta{ep.env_seed, ep.episode_index, t};

                if (raw_pixels_only) {
                    env::Frame fr = env::render(st);
                    auto& M = out.layers.at("raw_pixels");
                    for (size_t i = 0; i < fr.pixels.size(); ++i)
                        M(row, static_cast<int>(i)) = fr.pixels[i];
                    continue;
                }

                // tokenizer representations of the probed frame
                env::Frame fr = env::render(st);
                Eigen::MatrixXf patches = tok::extract_patches(fr);  // 16 x 64
                const tok::TokenGrid& grid = te.frames[t];
                Eigen::MatrixXf quant(tok::kTokensPerFrame, tok::kPatchDim);
                for (int p2 = 0; p2 < tok::kTokensPerFrame; ++p2)
                    quant.row(p2) = cb->entries.row(grid.ids[p2]);

                auto write_rep = [&](const std::string& name, const Eigen::MatrixXf& rep) {
                    auto& M = out.layers.at(name);
                    if (mean_pool) {
                        M.row(row) = rep.colwise().mean();
                    } else {
                        for (int p2 = 0; p2 < rep.rows(); ++p2)
                            M.block(row, p2 * rep.cols(), 1, rep.cols()) = rep.row(p2);
                    }
                };
                write_rep("tok_patch", patches);
                write_rep("tok_quant", quant);

                std::vector<uint16_t> ctx = wm::build_context(te, t, model->config());
                wm::TraceRecord tr = model->forward_with_trace(ctx, /*want_attention=*/false);
                int first = (context_frames - 1) * (tok::kTokensPerFrame + 1);
                for (int l = 0; l < static_cast<int>(tr.hidden.size()); ++l) {
                    Eigen::MatrixXf rep = tr.hidden[l].middleRows(first, tok::kTokensPerFrame);
                    write_rep("layer" + std::to_string(l), rep);
                }
            }
        });
        for (auto s : skipped_per_ep) skipped += s;

        out.variant = env::variant_name(variant);
        finalize_stats(out);
        out.provenance["n_frames"] = N;
        out.provenance["skipped_frames"] = skipped;
        out.provenance["policy_seed"] = cfg.policy_seed;
        out.provenance["policy_eps"] = cfg.policy_eps;
        out.provenance["episode_len"] = cfg.episode_len;
        out.provenance["aggregation"] = cfg.aggregation;
        out.provenance["context_frames"] = context_frames;
    }
};

}  // namespace

ActivationDataset collect(const wm::Transformer& model, const tok::Codebook& cb,
                          env::Variant variant, const ExtractionConfig& cfg) {
    // frozen-model + tokenizer provenance check
    json meta = model.saved_meta();
    if (meta.contains("extra") && meta["extra"].contains("codebook_hash")) {
        uint64_t expect = meta["extra"]["codebook_hash"].get<uint64_t>();
        if (expect != cb.content_hash())
            throw ProvenanceError("model was trained with codebook " +
                                  hash_hex(expect) + " but extraction got " +
                                  hash_hex(cb.content_hash()));
    }
    uint64_t hash_before = model.weights_hash();

    ActivationDataset ds;
    RowSink sink{&ds, model.config().context_frames};
    sink.fill(&model, &cb, variant, cfg, /*raw_pixels_only=*/false);

    if (model.weights_hash() != hash_before)
        throw ProvenanceError("model weights changed during collection");
    ds.provenance["model_hash"] = hash_hex(hash_before);
    ds.provenance["codebook_hash"] = hash_hex(cb.content_hash());
    ds.provenance["control"] = "none";
    return ds;
}

ActivationDataset make_control_raw_pixels(env::Variant variant, const ExtractionConfig& cfg,
                                          int context_frames) {
    ActivationDataset ds;
    RowSink sink{&ds, context_frames};
    sink.fill(nullptr, nullptr, variant, cfg, /*raw_pixels_only=*/true);
    ds.provenance["control"] = "raw_pixels";
    return ds;
}

ActivationDataset make_control_random_model(const wm::ModelConfig& model_cfg, uint64_t model_seed,
                                            const tok::Codebook& cb, env::Variant variant,
                                            const ExtractionConfig& cfg) {
    wm::Transformer random = wm::make_random_model(model_cfg, model_seed);
    ActivationDataset ds;
    RowSink sink{&ds, model_cfg.context_frames};
    sink.fill(&random, &cb, variant, cfg, /*raw_pixels_only=*/false);
    // the tokenizer layers are identical to the base dataset's; the random
    // control covers the model's own representations
    ds.layers.erase("tok_patch");
    ds.layers.erase("tok_quant");
    ds.layer_names.erase(ds.layer_names.begin(), ds.layer_names.begin() + 2);
    ds.provenance["control"] = "random_model";
    ds.provenance["model_hash"] = hash_hex(random.weights_hash());
    ds.provenance["codebook_hash"] = hash_hex(cb.content_hash());
    ds.provenance["random_model_seed"] = model_seed;
    return ds;
}

ActivationDataset make_control_shuffled_labels(const ActivationDataset& base, uint64_t shuffle_seed) {
    ActivationDataset ds = base;
    Rng rng(shuffle_seed);
    std::vector<size_t> perm = rng.permutation(static_cast<size_t>(base.n()));
    for (int i = 0; i < base.n(); ++i)
        ds.properties.row(i) = base.properties.row(static_cast<int>(perm[i]));
    // activations and normalization stats untouched; permutation recorded
    ds.provenance["control"] = "shuffled_labels";
    ds.provenance["shuffle_seed"] = shuffle_seed;
    return ds;
}

void ActivationDataset::save(const std::string& path) const {
    ArrayFile f;
    json meta_j;
    meta_j["kind"] = "activation_dataset";
    meta_j["version"] = 1;
    meta_j["variant"] = variant;
    meta_j["layer_names"] = layer_names;
    meta_j["property_names"] = property_names;
    meta_j["provenance"] = provenance;
    f.set_meta(meta_j);

    using RowMajorF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using RowMajorD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    for (const auto& name : layer_names) {
        RowMajorF rm = layer(name);
        f.add_f32("layer/" + name, {rm.rows(), rm.cols()}, rm.data());
    }
    RowMajorD props = properties;
    f.add_f64("properties", {props.rows(), props.cols()}, props.data());
    f.add_f64("prop_mean", {prop_mean.size()}, prop_mean.data());
    f.add_f64("prop_std", {prop_std.size()}, prop_std.data());

    std::vector<int64_t> seeds(meta.size());
    std::vector<int32_t> eps(meta.size()), steps(meta.size());
    for (size_t i = 0; i < meta.size(); ++i) {
        seeds[i] = static_cast<int64_t>(meta[i].env_seed);
        eps[i] = meta[i].episode_index;
        steps[i] = meta[i].step;
    }
    f.add_i64("meta/env_seed", {static_cast<int64_t>(meta.size())}, seeds.data());
    f.add_i32("meta/episode", {static_cast<int64_t>(meta.size())}, eps.data());
    f.add_i32("meta/step", {static_cast<int64_t>(meta.size())}, steps.data());
    f.save(path);

    json manifest = meta_j;
    manifest["n"] = n();
    manifest["content_hash"] = hash_hex(f.content_hash());
    write_text_file(path + ".manifest.json", manifest.dump(2) + "\n");
}

ActivationDataset ActivationDataset::load(const std::string& path) {
    ArrayFile f = ArrayFile::load(path);
    json meta_j = f.meta();
    if (meta_j.value("kind", "") != "activation_dataset")
        throw DataError("not an activation dataset: " + path);
    ActivationDataset ds;
    ds.variant = meta_j.at("variant").get<std::string>();
    ds.layer_names = meta_j.at("layer_names").get<std::vector<std::string>>();
    ds.property_names = meta_j.at("property_names").get<std::vector<std::string>>();
    ds.provenance = meta_j.at("provenance");

    for (const auto& name : ds.layer_names) {
        auto shape = f.shape("layer/" + name);
        auto data = f.f32("layer/" + name);
        ds.layers[name] = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic,
                                                         Eigen::RowMajor>>(
            data.data(), shape[0], shape[1]);
    }
    auto pshape = f.shape("properties");
    auto pdata = f.f64("properties");
    ds.properties = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>(pdata.data(), pshape[0], pshape[1]);
    auto pm = f.f64("prop_mean");
    auto ps = f.f64("prop_std");
    ds.prop_mean = Eigen::Map<const Eigen::VectorXd>(pm.data(), static_cast<int64_t>(pm.size()));
    ds.prop_std = Eigen::Map<const Eigen::VectorXd>(ps.data(), static_cast<int64_t>(ps.size()));

    auto seeds = f.i64("meta/env_seed");
    auto eps = f.i32("meta/episode");
    auto steps = f.i32("meta/step");
    ds.meta.resize(seeds.size());
    for (size_t i = 0; i < seeds.size(); ++i)
        ds.meta[i] = FrameMeta{static_cast<uint64_t>(seeds[i]), eps[i], steps[i]};
    return ds;
}

uint64_t ActivationDataset::content_hash() const {
    uint64_t h = fnv1a64(variant.data(), variant.size());
    for (const auto& name : layer_names) {
        const auto& M = layer(name);
        h = fnv1a64(name.data(), name.size(), h);
        h = fnv1a64(M.data(), sizeof(float) * M.size(), h);
    }
    h = fnv1a64(properties.data(), sizeof(double) * properties.size(), h);
    return h;
}

}  // namespace worldlens::extraction
