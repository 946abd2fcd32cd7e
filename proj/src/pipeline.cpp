#include "worldlens/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>

#include "worldlens/analysis.hpp"
#include "worldlens/array_file.hpp"
#include "worldlens/report.hpp"
#include "worldlens/rollout.hpp"

namespace worldlens::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Paths {
    std::string root, artifacts, episodes_dir, episodes_manifest, codebook, model, ds_trained,
        ds_random, ds_raw, tables, figures;

    explicit Paths(const std::string& out) {
        root = out;
        artifacts = out + "/artifacts";
        episodes_dir = artifacts + "/episodes";
        episodes_manifest = episodes_dir + "/episodes_manifest.json";
        codebook = artifacts + "/codebook.bin";
        model = artifacts + "/model.bin";
        ds_trained = artifacts + "/dataset_trained.bin";
        ds_random = artifacts + "/dataset_random_model.bin";
        ds_raw = artifacts + "/dataset_raw_pixels.bin";
        tables = out + "/tables";
        figures = out + "/figures";
    }
};

uint64_t file_hash(const std::string& path) {
    std::string bytes = read_text_file(path);
    return fnv1a64(bytes.data(), bytes.size());
}

json load_manifest(const Paths& p) {
    if (!file_exists(p.root + "/manifest.json")) return json{{"version", 1}, {"stages", json::object()}};
    return json::parse(read_text_file(p.root + "/manifest.json"));
}

void save_manifest(const Paths& p, const json& m) {
    write_text_file(p.root + "/manifest.json", m.dump(2) + "\n");
}

// Verifies that `path` exists and, if the producing stage recorded an output
// hash, that the artifact still matches it.
uint64_t require_artifact(const json& manifest, const std::string& producer,
                          const std::string& key, const std::string& path) {
    if (!file_exists(path))
        throw MissingArtifactError("missing artifact '" + key + "' (" + path +
                                   "); run the '" + producer + "' stage first");
    uint64_t h = file_hash(path);
    const auto& stages = manifest.at("stages");
    if (stages.contains(producer) && stages[producer].contains("outputs") &&
        stages[producer]["outputs"].contains(key)) {
        std::string recorded = stages[producer]["outputs"][key].get<std::string>();
        if (recorded != hash_hex(h))
            throw ProvenanceError("artifact '" + key + "' is stale: manifest records " + recorded +
                                  " but file hashes to " + hash_hex(h) +
                                  "; re-run '" + producer + "'");
    }
    return h;
}

struct StageTimer {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void record_stage(const Paths& p, const std::string& stage, double duration,
                  const json& inputs, const json& outputs, const json& extra = json::object()) {
    json m = load_manifest(p);
    json rec;
    rec["duration_s"] = duration;
    rec["inputs"] = inputs;
    rec["outputs"] = outputs;
    if (!extra.empty()) rec["info"] = extra;
    m["stages"][stage] = rec;
    save_manifest(p, m);
}

std::string episode_path(const Paths& p, int index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "/ep_%05d.bin", index);
    return p.episodes_dir + buf;
}

std::vector<rollout::Episode> load_episodes(const Paths& p, int count) {
    std::vector<rollout::Episode> eps(count);
    parallel_for(count, [&](size_t i) {
        eps[i] = rollout::load_episode(episode_path(p, static_cast<int>(i)));
    });
    return eps;
}

wm::TokenCorpus episodes_to_corpus(const std::vector<rollout::Episode>& eps,
                                   const tok::Codebook& cb, const std::string& variant) {
    wm::TokenCorpus corpus;
    corpus.variant = variant;
    corpus.codebook_size = cb.K;
    corpus.n_actions = 3;
    corpus.codebook_hash = cb.content_hash();
    corpus.episodes.resize(eps.size());
    parallel_for(eps.size(), [&](size_t i) {
        corpus.episodes[i] = rollout::tokenize_episode(eps[i], cb);
    });
    return corpus;
}

std::vector<std::string> position_properties(const std::string& variant) {
    std::vector<std::string> out;
    for (const auto& p : env::property_names(env::variant_from_string(variant)))
        if (p != "score") out.push_back(p);
    return out;
}

// ---- stages ----------------------------------------------------------------

void stage_simulate(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    fs::create_directories(p.episodes_dir);
    const int n = cfg.sim.n_episodes;
    parallel_for(n, [&](size_t i) {
        rollout::Episode ep = rollout::run_indexed_episode(
            cfg.variant_enum(), cfg.seeds.env, static_cast<int>(i), cfg.sim.episode_len,
            cfg.sim.policy_eps);
        rollout::save_episode(ep, episode_path(p, static_cast<int>(i)), cfg.sim.store_frames);
    });
    uint64_t combined = 0xcbf29ce484222325ull;
    for (int i = 0; i < n; ++i) {
        uint64_t h = file_hash(episode_path(p, i));
        combined = fnv1a64(&h, sizeof(h), combined);
    }
    json em;
    em["n_episodes"] = n;
    em["episode_len"] = cfg.sim.episode_len;
    em["policy_eps"] = cfg.sim.policy_eps;
    em["master_seed"] = cfg.seeds.env;
    em["variant"] = cfg.variant;
    em["store_frames"] = cfg.sim.store_frames;
    em["combined_hash"] = hash_hex(combined);
    write_text_file(p.episodes_manifest, em.dump(2) + "\n");
    record_stage(p, "simulate", timer.seconds(), json::object(),
                 json{{"episodes", hash_hex(combined)}},
                 json{{"n_episodes", n}});
}

json episodes_info(const json& manifest, const Paths& p) {
    if (!file_exists(p.episodes_manifest))
        throw MissingArtifactError("missing artifact 'episodes' (" + p.episodes_manifest +
                                   "); run the 'simulate' stage first");
    json em = json::parse(read_text_file(p.episodes_manifest));
    const auto& stages = manifest.at("stages");
    if (stages.contains("simulate") && stages["simulate"]["outputs"].contains("episodes")) {
        if (stages["simulate"]["outputs"]["episodes"].get<std::string>() !=
            em.at("combined_hash").get<std::string>())
            throw ProvenanceError("episode corpus is stale; re-run 'simulate'");
    }
    return em;
}

void stage_fit_tokenizer(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    json em = episodes_info(manifest, p);
    int n_fit = std::min(cfg.tokenizer.fit_episodes, em.at("n_episodes").get<int>());
    std::vector<rollout::Episode> eps = load_episodes(p, n_fit);
    std::vector<env::Frame> frames;
    for (const auto& ep : eps) {
        auto fr = rollout::render_episode(ep);
        frames.insert(frames.end(), fr.begin(), fr.end());
    }
    tok::Codebook cb = tok::fit_codebook(frames, cfg.tokenizer.K, cfg.seeds.tokenizer);
    cb.save(p.codebook);
    record_stage(p, "fit-tokenizer", timer.seconds(),
                 json{{"episodes", em.at("combined_hash")}},
                 json{{"codebook", hash_hex(file_hash(p.codebook))}},
                 json{{"K", cb.K}, {"fit_frames", frames.size()}});
}

void stage_train(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    json em = episodes_info(manifest, p);
    uint64_t cb_hash = require_artifact(manifest, "fit-tokenizer", "codebook", p.codebook);
    tok::Codebook cb = tok::Codebook::load(p.codebook);

    std::vector<rollout::Episode> eps = load_episodes(p, em.at("n_episodes").get<int>());
    wm::TokenCorpus corpus = episodes_to_corpus(eps, cb, cfg.variant);

    wm::ModelConfig mc = cfg.model;
    mc.codebook_size = cb.K;
    mc.seed = cfg.seeds.model;
    wm::TrainConfig tc = cfg.train;
    tc.seed = cfg.seeds.model;

    wm::Transformer model(mc, mc.seed);
    wm::Transformer untrained = model;
    auto untrained_eval = untrained.evaluate(corpus, 64, derive_seed(tc.seed, 0xbace));
    wm::TrainStats stats = model.train(corpus, tc);

    json extra;
    extra["codebook_hash"] = cb.content_hash();
    extra["variant"] = cfg.variant;
    extra["train_stats"] = json{{"steps", stats.steps},
                                {"final_train_loss", stats.final_train_loss},
                                {"val_loss", stats.val_loss},
                                {"val_accuracy", stats.val_accuracy},
                                {"chance_accuracy", stats.chance_accuracy},
                                {"untrained_accuracy", untrained_eval.accuracy}};
    model.save(p.model, extra);
    record_stage(p, "train", timer.seconds(),
                 json{{"episodes", em.at("combined_hash")}, {"codebook", hash_hex(cb_hash)}},
                 json{{"model", hash_hex(file_hash(p.model))}}, extra["train_stats"]);
}

void stage_extract(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    uint64_t cb_hash = require_artifact(manifest, "fit-tokenizer", "codebook", p.codebook);
    uint64_t model_hash = require_artifact(manifest, "train", "model", p.model);
    tok::Codebook cb = tok::Codebook::load(p.codebook);
    wm::Transformer model = wm::Transformer::load(p.model);

    extraction::ExtractionConfig ec = cfg.extraction;
    ec.policy_seed = cfg.seeds.policy;

    extraction::ActivationDataset trained = extraction::collect(model, cb, cfg.variant_enum(), ec);
    trained.save(p.ds_trained);

    extraction::ActivationDataset random = extraction::make_control_random_model(
        model.config(), derive_seed(cfg.seeds.model, 0xc0ffee), cb, cfg.variant_enum(), ec);
    random.save(p.ds_random);

    extraction::ActivationDataset raw =
        extraction::make_control_raw_pixels(cfg.variant_enum(), ec, model.config().context_frames);
    raw.save(p.ds_raw);

    record_stage(p, "extract", timer.seconds(),
                 json{{"codebook", hash_hex(cb_hash)}, {"model", hash_hex(model_hash)}},
                 json{{"dataset_trained", hash_hex(file_hash(p.ds_trained))},
                      {"dataset_random_model", hash_hex(file_hash(p.ds_random))},
                      {"dataset_raw_pixels", hash_hex(file_hash(p.ds_raw))}},
                 json{{"n_frames", trained.n()}});
}

void stage_probe(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    uint64_t h_tr = require_artifact(manifest, "extract", "dataset_trained", p.ds_trained);
    uint64_t h_rn = require_artifact(manifest, "extract", "dataset_random_model", p.ds_random);
    uint64_t h_rw = require_artifact(manifest, "extract", "dataset_raw_pixels", p.ds_raw);

    extraction::ActivationDataset trained = extraction::ActivationDataset::load(p.ds_trained);
    extraction::ActivationDataset random = extraction::ActivationDataset::load(p.ds_random);
    extraction::ActivationDataset raw = extraction::ActivationDataset::load(p.ds_raw);

    const std::vector<std::string> props = trained.property_names;
    probing::SweepConfig sc;
    sc.alpha = cfg.probing.alpha;
    sc.folds = cfg.probing.folds;
    sc.seed = cfg.seeds.probe;
    sc.mlp = cfg.probing.mlp;

    auto trained_results = probing::probe_sweep(trained, props, trained.layer_names, {"linear"}, sc);

    // MLP probes at the per-property best layers (or everywhere)
    std::vector<std::string> mlp_layers;
    if (cfg.probing.mlp_layers == "all") {
        mlp_layers = trained.layer_names;
    } else {
        std::set<std::string> uniq;
        for (const auto& prop : props)
            uniq.insert(probing::best_layer(trained_results, prop, trained.layer_names));
        mlp_layers.assign(uniq.begin(), uniq.end());
    }
    auto mlp_results = probing::probe_sweep(trained, props, mlp_layers, {"mlp"}, sc);
    trained_results.insert(trained_results.end(), mlp_results.begin(), mlp_results.end());

    uint64_t shuffle_seed = derive_seed(cfg.seeds.probe, 0x5417);
    extraction::ActivationDataset shuffled =
        extraction::make_control_shuffled_labels(trained, shuffle_seed);
    auto shuffled_results = probing::probe_sweep(shuffled, props, shuffled.layer_names, {"linear"}, sc);
    auto random_results = probing::probe_sweep(random, props, random.layer_names, {"linear"}, sc);
    auto raw_results = probing::probe_sweep(raw, props, raw.layer_names, {"linear"}, sc);

    fs::create_directories(p.tables);
    write_text_file(p.tables + "/probe_trained.csv", probing::results_to_csv(trained_results));
    write_text_file(p.tables + "/probe_shuffled_labels.csv", probing::results_to_csv(shuffled_results));
    write_text_file(p.tables + "/probe_random_model.csv", probing::results_to_csv(random_results));
    write_text_file(p.tables + "/probe_raw_pixels.csv", probing::results_to_csv(raw_results));

    json summary;
    summary["variant"] = cfg.variant;
    summary["properties"] = props;
    summary["trained_layer_order"] = trained.layer_names;
    summary["random_layer_order"] = random.layer_names;
    summary["shuffle_seed"] = shuffle_seed;
    for (const auto& prop : props) {
        summary["best_layer"][prop] = probing::best_layer(trained_results, prop, trained.layer_names);
        double tm = 0, rm = 0;
        int tn = 0, rn = 0;
        for (const auto& r : trained_results)
            if (r.kind == "linear" && r.property == prop && r.ok() && r.layer.rfind("layer", 0) == 0) {
                tm += r.r2_mean;
                ++tn;
            }
        for (const auto& r : random_results)
            if (r.kind == "linear" && r.property == prop && r.ok()) {
                rm += r.r2_mean;
                ++rn;
            }
        summary["mean_over_model_layers"]["trained"][prop] = tn ? tm / tn : 0.0;
        summary["mean_over_model_layers"]["random_model"][prop] = rn ? rm / rn : 0.0;
    }
    write_text_file(p.tables + "/probe_summary.json", summary.dump(2) + "\n");

    record_stage(p, "probe", timer.seconds(),
                 json{{"dataset_trained", hash_hex(h_tr)},
                      {"dataset_random_model", hash_hex(h_rn)},
                      {"dataset_raw_pixels", hash_hex(h_rw)}},
                 json{{"probe_trained", hash_hex(file_hash(p.tables + "/probe_trained.csv"))}});
}

void stage_intervene(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    uint64_t h_tr = require_artifact(manifest, "extract", "dataset_trained", p.ds_trained);
    uint64_t model_hash = require_artifact(manifest, "train", "model", p.model);
    require_artifact(manifest, "fit-tokenizer", "codebook", p.codebook);

    extraction::ActivationDataset trained = extraction::ActivationDataset::load(p.ds_trained);
    wm::Transformer model = wm::Transformer::load(p.model);
    tok::Codebook cb = tok::Codebook::load(p.codebook);

    fs::create_directories(p.tables);
    json summary;
    summary["layer"] = cfg.intervention.layer;
    for (const auto& prop : position_properties(cfg.variant)) {
        intervention::InterventionConfig ic = cfg.intervention;
        ic.property = prop;
        ic.seed = cfg.seeds.intervention;
        ic.policy_eps = cfg.sim.policy_eps;
        ic.episode_len = cfg.sim.episode_len;

        Eigen::MatrixXd X = trained.layer(ic.layer).cast<double>();
        Eigen::VectorXd y = trained.normalized_property(prop);
        probing::LinearProbe probe = probing::fit_ridge(X, y, cfg.probing.alpha);

        intervention::SweepOutput out = intervention::run_sweep(
            model, trained, probe, ic.layer, cfg.variant_enum(), cb, ic);
        write_text_file(p.tables + "/intervention_" + prop + ".csv",
                        intervention::results_to_csv(out));

        double alpha0_kl = -1, alpha0_rate = -1;
        for (const auto& r : out.results)
            if (r.alpha == 0.0) {
                alpha0_kl = r.kl_mean;
                alpha0_rate = r.change_rate;
            }
        summary["properties"][prop] = json{{"pearson_r", out.correlation.pearson_r},
                                           {"spearman_rho", out.correlation.spearman_rho},
                                           {"sigma_layer", out.sigma_layer},
                                           {"alpha0_kl", alpha0_kl},
                                           {"alpha0_change_rate", alpha0_rate}};
    }
    write_text_file(p.tables + "/intervention_summary.json", summary.dump(2) + "\n");
    record_stage(p, "intervene", timer.seconds(),
                 json{{"dataset_trained", hash_hex(h_tr)}, {"model", hash_hex(model_hash)}},
                 json{{"intervention_summary",
                       hash_hex(file_hash(p.tables + "/intervention_summary.json"))}});
}

void stage_attention(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    uint64_t model_hash = require_artifact(manifest, "train", "model", p.model);
    require_artifact(manifest, "fit-tokenizer", "codebook", p.codebook);
    wm::Transformer model = wm::Transformer::load(p.model);
    tok::Codebook cb = tok::Codebook::load(p.codebook);

    auto contexts = analysis::sample_contexts(
        cfg.variant_enum(), cb, model.config(), cfg.analysis.attention_contexts,
        derive_seed(cfg.seeds.ablation, 0xa77e), cfg.sim.policy_eps, cfg.sim.episode_len,
        /*stratify=*/false);
    auto stats = analysis::head_statistics(model, contexts);
    auto top = analysis::top_selective_heads(stats, std::min<int>(4, static_cast<int>(stats.size())));

    fs::create_directories(p.tables);
    write_text_file(p.tables + "/attention_heads.csv", analysis::attention_to_csv(stats));
    json maps;
    maps["heads"] = analysis::attention_to_json(stats);
    json top_j = json::array();
    for (const auto& s : top)
        top_j.push_back(json{{"layer", s.layer}, {"head", s.head},
                             {"selectivity_score", s.selectivity_score()}});
    maps["top_selective"] = top_j;
    maps["h_max"] = std::log(17.0);
    write_text_file(p.tables + "/attention_maps.json", maps.dump(2) + "\n");
    record_stage(p, "attention", timer.seconds(), json{{"model", hash_hex(model_hash)}},
                 json{{"attention_heads", hash_hex(file_hash(p.tables + "/attention_heads.csv"))}});
}

void stage_ablate(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    json manifest = load_manifest(p);
    uint64_t model_hash = require_artifact(manifest, "train", "model", p.model);
    require_artifact(manifest, "fit-tokenizer", "codebook", p.codebook);
    wm::Transformer model = wm::Transformer::load(p.model);
    tok::Codebook cb = tok::Codebook::load(p.codebook);

    // token frequencies over the extraction episode stream
    int rows_ep = cfg.sim.episode_len - model.config().context_frames + 1;
    int n_eps = std::max(1, (cfg.extraction.n_frames + rows_ep - 1) / rows_ep);
    wm::TokenCorpus stats_corpus = rollout::build_corpus(
        cfg.variant_enum(), cfg.seeds.policy, n_eps, cfg.sim.episode_len,
        cfg.extraction.policy_eps, cb);
    analysis::TokenStats tstats = analysis::compute_token_stats(stats_corpus, model);

    auto contexts = analysis::sample_contexts(
        cfg.variant_enum(), cb, model.config(), cfg.analysis.ablation_contexts,
        derive_seed(cfg.seeds.ablation, 0xab1a), cfg.sim.policy_eps, cfg.sim.episode_len,
        /*stratify=*/true);
    analysis::AblationOutput out =
        analysis::ablation_sweep(model, contexts, tstats, derive_seed(cfg.seeds.ablation, 0x5eed));

    fs::create_directories(p.tables);
    write_text_file(p.tables + "/ablation.csv", analysis::ablation_to_csv(out));
    json summary = analysis::ablation_to_json(out);
    summary["n_contexts"] = contexts.size();
    write_text_file(p.tables + "/ablation_summary.json", summary.dump(2) + "\n");
    record_stage(p, "ablate", timer.seconds(), json{{"model", hash_hex(model_hash)}},
                 json{{"ablation", hash_hex(file_hash(p.tables + "/ablation.csv"))}});
}

json evaluate_checks(const PipelineConfig& cfg, const Paths& p);

void stage_report(const PipelineConfig& cfg, const Paths& p) {
    StageTimer timer;
    auto need = [&](const std::string& rel) {
        std::string path = p.tables + "/" + rel;
        if (!file_exists(path))
            throw MissingArtifactError("missing table '" + rel + "'; run the producing stage first");
        return path;
    };
    json summary = json::parse(read_text_file(need("probe_summary.json")));

    report::TableInputs ti;
    ti.properties = summary.at("properties").get<std::vector<std::string>>();
    ti.trained_layer_order = summary.at("trained_layer_order").get<std::vector<std::string>>();
    ti.random_layer_order = summary.at("random_layer_order").get<std::vector<std::string>>();
    ti.trained = probing::results_from_csv(read_text_file(need("probe_trained.csv")));
    ti.random_model = probing::results_from_csv(read_text_file(need("probe_random_model.csv")));
    ti.shuffled = probing::results_from_csv(read_text_file(need("probe_shuffled_labels.csv")));
    ti.raw_pixels = probing::results_from_csv(read_text_file(need("probe_raw_pixels.csv")));
    report::SummaryTable table = report::emit_table(ti);
    write_text_file(p.tables + "/table1.csv", table.csv);
    write_text_file(p.tables + "/table1.txt", table.text);

    fs::create_directories(p.figures);
    write_text_file(p.figures + "/fig_probe_r2.svg",
                    report::fig_probe_r2(ti.trained, ti.trained_layer_order, ti.properties));

    // intervention figure from stored CSVs
    need("attention_maps.json");
    json isummary = json::parse(read_text_file(need("intervention_summary.json")));
    std::vector<intervention::SweepOutput> sweeps;
    for (const auto& prop : position_properties(cfg.variant)) {
        std::string path = p.tables + "/intervention_" + prop + ".csv";
        if (!file_exists(path)) continue;
        intervention::SweepOutput sw;
        sw.property = prop;
        sw.layer = isummary.value("layer", "layer2");
        sw.correlation.pearson_r = isummary["properties"][prop]["pearson_r"].get<double>();
        std::istringstream is(read_text_file(path));
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            intervention::InterventionResult r;
            std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf", &r.alpha, &r.alpha_raw, &r.kl_mean,
                        &r.kl_std, &r.change_rate);
            sw.results.push_back(r);
        }
        sweeps.push_back(std::move(sw));
    }
    write_text_file(p.figures + "/fig_intervention.svg", report::fig_intervention(sweeps));

    json asummary = json::parse(read_text_file(need("ablation_summary.json")));
    analysis::AblationOutput ao;
    for (const auto& r : asummary.at("results")) {
        analysis::AblationResult ar;
        ar.position = r.at("position").get<int>();
        ar.baseline = r.at("baseline").get<std::string>();
        ar.kl_mean = r.at("kl_mean").get<double>();
        ar.kl_std = r.at("kl_std").get<double>();
        ar.change_rate = r.at("change_rate").get<double>();
        ao.results.push_back(ar);
    }
    write_text_file(p.figures + "/fig_ablation.svg", report::fig_ablation(ao));

    json checks = evaluate_checks(cfg, p);
    write_text_file(p.tables + "/acceptance_summary.json", checks.dump(2) + "\n");

    record_stage(p, "report", timer.seconds(), json::object(),
                 json{{"table1", hash_hex(file_hash(p.tables + "/table1.csv"))},
                      {"acceptance_summary",
                       hash_hex(file_hash(p.tables + "/acceptance_summary.json"))}},
                 json{{"all_invariants_pass", checks.value("all_invariants_pass", false)}});
}

// Evaluates the run's invariant checks and paper-analog findings from the
// stored tables; used both by the report stage and the acceptance suite.
json evaluate_checks(const PipelineConfig& cfg, const Paths& p) {
    json out;
    out["profile"] = cfg.profile;
    out["variant"] = cfg.variant;
    json inv = json::object();
    json findings = json::object();

    json psummary = json::parse(read_text_file(p.tables + "/probe_summary.json"));
    auto trained = probing::results_from_csv(read_text_file(p.tables + "/probe_trained.csv"));
    auto shuffled = probing::results_from_csv(read_text_file(p.tables + "/probe_shuffled_labels.csv"));
    auto props = psummary.at("properties").get<std::vector<std::string>>();
    auto layer_order = psummary.at("trained_layer_order").get<std::vector<std::string>>();

    // probing findings
    {
        json jp;
        bool pass = true;
        for (const auto& prop : position_properties(cfg.variant)) {
            std::string bl = probing::best_layer(trained, prop, layer_order);
            double r2 = 0;
            for (const auto& r : trained)
                if (r.kind == "linear" && r.layer == bl && r.property == prop) r2 = r.r2_mean;
            double threshold = (prop == "ball_x" || prop == "ball_y") ? 0.7 : 0.95;
            jp[prop] = json{{"best_layer", bl}, {"r2", r2}, {"threshold", threshold}};
            if (r2 < threshold) pass = false;
        }
        findings["trained_best_layer_r2"] = json{{"pass", pass}, {"values", jp}};
    }
    {
        double worst = -2;
        for (const auto& r : shuffled)
            if (r.kind == "linear" && r.ok()) worst = std::max(worst, r.r2_mean);
        findings["shuffled_labels_r2_max"] = json{{"pass", worst <= 0.05}, {"value", worst}};
    }
    {
        bool pass = true;
        json jp;
        for (const auto& prop : position_properties(cfg.variant)) {
            double t = psummary["mean_over_model_layers"]["trained"][prop].get<double>();
            double r = psummary["mean_over_model_layers"]["random_model"][prop].get<double>();
            jp[prop] = json{{"trained_mean", t}, {"random_mean", r}};
            if (!(r < t)) pass = false;
        }
        findings["random_model_below_trained"] = json{{"pass", pass}, {"values", jp}};
    }
    {
        bool pass = true;
        json jp;
        for (const auto& prop : props) {
            std::string bl = probing::best_layer(trained, prop, layer_order);
            double lin = 0, mlp = 0;
            bool have_mlp = false;
            for (const auto& r : trained) {
                if (r.layer != bl || r.property != prop || !r.ok()) continue;
                if (r.kind == "linear") lin = r.r2_mean;
                if (r.kind == "mlp") {
                    mlp = r.r2_mean;
                    have_mlp = true;
                }
            }
            double gap = have_mlp ? mlp - lin : 0.0;
            jp[prop] = gap;
            if (!have_mlp || std::abs(gap) > 0.15) pass = false;
        }
        findings["selectivity_gap"] = json{{"pass", pass}, {"values", jp}};
    }

    json isummary = json::parse(read_text_file(p.tables + "/intervention_summary.json"));
    {
        bool exact = true, corr = true, mono = true;
        json jp;
        for (const auto& prop : position_properties(cfg.variant)) {
            const auto& s = isummary["properties"][prop];
            double r = s["pearson_r"].get<double>();
            double rho = s["spearman_rho"].get<double>();
            jp[prop] = json{{"pearson_r", r}, {"spearman_rho", rho}};
            if (s["alpha0_kl"].get<double>() != 0.0 || s["alpha0_change_rate"].get<double>() != 0.0)
                exact = false;
            if (r < 0.9) corr = false;
            if (rho < 0.8) mono = false;
        }
        inv["intervention_alpha0_exact"] = json{{"pass", exact}};
        findings["intervention_correlation"] = json{{"pass", corr && mono}, {"values", jp}};
    }

    auto heads = json::parse(read_text_file(p.tables + "/attention_maps.json"));
    {
        bool bounds = true, spec = false;
        double hmax = std::log(17.0) + 1e-6;
        double best_ratio = 0;
        for (const auto& h : heads.at("heads")) {
            double e = h.at("mean_entropy").get<double>();
            if (e < 0 || e > hmax) bounds = false;
            double mn = 1e9, mx = 0;
            for (const auto& row : h.at("selectivity_map"))
                for (const auto& v : row) {
                    mn = std::min(mn, v.get<double>());
                    mx = std::max(mx, v.get<double>());
                }
            double ratio = mn > 0 ? mx / mn : (mx > 0 ? 1e9 : 0);
            best_ratio = std::max(best_ratio, ratio);
            if (ratio >= 2.0) spec = true;
        }
        inv["attention_entropy_bounds"] = json{{"pass", bounds}};
        findings["attention_specialization"] =
            json{{"pass", spec}, {"max_ratio", best_ratio}};
    }

    json asummary = json::parse(read_text_file(p.tables + "/ablation_summary.json"));
    {
        double r1 = asummary.at("rho_zero_mean").get<double>();
        double r2 = asummary.at("rho_zero_random").get<double>();
        double r3 = asummary.at("rho_mean_random").get<double>();
        findings["ablation_rank_consistency"] =
            json{{"pass", r1 >= 0.7 && r2 >= 0.7 && r3 >= 0.7},
                 {"rho_zero_mean", r1}, {"rho_zero_random", r2}, {"rho_mean_random", r3}};
        auto pos_kl = asummary.at("position_kl").get<std::vector<double>>();
        std::vector<int> order(16);
        for (int i = 0; i < 16; ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return pos_kl[a] > pos_kl[b]; });
        int rank0 = 0;
        for (int i = 0; i < 16; ++i)
            if (order[i] == 0) rank0 = i + 1;
        findings["score_token_rank"] = json{{"rank", rank0},
                                            {"pass", cfg.variant != "bricks" || rank0 <= 3},
                                            {"applicable", cfg.variant == "bricks"}};
        findings["ball_distance_r"] = asummary.at("ball_distance_r");
    }

    bool all_inv = true;
    for (const auto& [k, v] : inv.items())
        if (!v.value("pass", false)) all_inv = false;
    out["invariants"] = inv;
    out["findings"] = findings;
    out["all_invariants_pass"] = all_inv;
    return out;
}

}  // namespace

const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names = {"simulate", "fit-tokenizer", "train",
                                                   "extract", "probe", "intervene",
                                                   "attention", "ablate", "report"};
    return names;
}

std::string PipelineConfig::resolved_out_dir() const {
    return out_dir.empty() ? "out/" + run_id : out_dir;
}

PipelineConfig PipelineConfig::defaults(const std::string& profile) {
    PipelineConfig c;
    if (profile == "paper-analog" || profile.empty()) {
        c.profile = "paper-analog";
    } else if (profile == "smoke") {
        c.profile = "smoke";
        c.sim.n_episodes = 60;
        c.tokenizer.fit_episodes = 8;
        c.train.steps = 2000;
        c.train.eval_every = 250;
        c.extraction.n_frames = 1000;
        c.intervention.n_contexts = 64;
        c.analysis.attention_contexts = 64;
        c.analysis.ablation_contexts = 64;
    } else {
        throw ConfigError("unknown profile '" + profile + "' (expected 'smoke' or 'paper-analog')");
    }
    return c;
}

nlohmann::json PipelineConfig::to_json() const {
    json j;
    j["run_id"] = run_id;
    j["variant"] = variant;
    j["profile"] = profile;
    j["out_dir"] = out_dir;
    j["seeds"] = json{{"env", seeds.env},     {"tokenizer", seeds.tokenizer},
                      {"model", seeds.model}, {"policy", seeds.policy},
                      {"probe", seeds.probe}, {"intervention", seeds.intervention},
                      {"ablation", seeds.ablation}};
    j["sim"] = json{{"n_episodes", sim.n_episodes},
                    {"episode_len", sim.episode_len},
                    {"policy_eps", sim.policy_eps},
                    {"store_frames", sim.store_frames}};
    j["tokenizer"] = json{{"K", tokenizer.K}, {"fit_episodes", tokenizer.fit_episodes}};
    j["model"] = model.to_json();
    j["train"] = train.to_json();
    j["extraction"] = extraction.to_json();
    j["probing"] = json{{"alpha", probing.alpha},
                        {"folds", probing.folds},
                        {"mlp_layers", probing.mlp_layers},
                        {"mlp", json{{"hidden", probing.mlp.hidden},
                                     {"epochs", probing.mlp.epochs},
                                     {"batch", probing.mlp.batch},
                                     {"lr", probing.mlp.lr},
                                     {"val_frac", probing.mlp.val_frac},
                                     {"patience", probing.mlp.patience}}}};
    j["intervention"] = intervention.to_json();
    j["analysis"] = json{{"attention_contexts", analysis.attention_contexts},
                         {"ablation_contexts", analysis.ablation_contexts}};
    return j;
}

PipelineConfig PipelineConfig::from_json(const nlohmann::json& in) {
    std::string profile = in.value("profile", "paper-analog");
    PipelineConfig base = defaults(profile);
    json j = base.to_json();
    j.merge_patch(in);

    PipelineConfig c;
    c.run_id = j.at("run_id").get<std::string>();
    c.variant = j.at("variant").get<std::string>();
    c.profile = j.at("profile").get<std::string>();
    c.out_dir = j.at("out_dir").get<std::string>();
    const auto& s = j.at("seeds");
    c.seeds = {s.at("env").get<uint64_t>(),          s.at("tokenizer").get<uint64_t>(),
               s.at("model").get<uint64_t>(),        s.at("policy").get<uint64_t>(),
               s.at("probe").get<uint64_t>(),        s.at("intervention").get<uint64_t>(),
               s.at("ablation").get<uint64_t>()};
    const auto& sim = j.at("sim");
    c.sim.n_episodes = sim.at("n_episodes").get<int>();
    c.sim.episode_len = sim.at("episode_len").get<int>();
    c.sim.policy_eps = sim.at("policy_eps").get<double>();
    c.sim.store_frames = sim.at("store_frames").get<bool>();
    c.tokenizer.K = j.at("tokenizer").at("K").get<int>();
    c.tokenizer.fit_episodes = j.at("tokenizer").at("fit_episodes").get<int>();
    c.model = wm::ModelConfig::from_json(j.at("model"));
    c.train = wm::TrainConfig::from_json(j.at("train"));
    c.extraction = extraction::ExtractionConfig::from_json(j.at("extraction"));
    const auto& pr = j.at("probing");
    c.probing.alpha = pr.at("alpha").get<double>();
    c.probing.folds = pr.at("folds").get<int>();
    c.probing.mlp_layers = pr.at("mlp_layers").get<std::string>();
    const auto& mlp = pr.at("mlp");
    c.probing.mlp.hidden = mlp.at("hidden").get<int>();
    c.probing.mlp.epochs = mlp.at("epochs").get<int>();
    c.probing.mlp.batch = mlp.at("batch").get<int>();
    c.probing.mlp.lr = mlp.at("lr").get<double>();
    c.probing.mlp.val_frac = mlp.at("val_frac").get<double>();
    c.probing.mlp.patience = mlp.at("patience").get<int>();
    c.intervention = intervention::InterventionConfig::from_json(j.at("intervention"));
    const auto& an = j.at("analysis");
    c.analysis.attention_contexts = an.at("attention_contexts").get<int>();
    c.analysis.ablation_contexts = an.at("ablation_contexts").get<int>();
    env::variant_from_string(c.variant);  // validate
    c.model.validate();
    return c;
}

void apply_override(PipelineConfig& cfg, const std::string& key, const std::string& value) {
    json j = cfg.to_json();
    std::string pointer = "/" + key;
    for (auto& ch : pointer)
        if (ch == '.') ch = '/';
    json v;
    try {
        v = json::parse(value);  // numbers, bools
    } catch (const json::exception&) {
        v = value;  // plain string
    }
    try {
        j.at(json::json_pointer(pointer));  // must already exist
        j[json::json_pointer(pointer)] = v;
    } catch (const json::exception&) {
        throw ConfigError("unknown config key '" + key + "'");
    }
    cfg = PipelineConfig::from_json(j);
}

void run_stage(const std::string& stage, const PipelineConfig& cfg) {
    Paths p(cfg.resolved_out_dir());
    fs::create_directories(p.root);
    write_text_file(p.root + "/config.json", cfg.to_json().dump(2) + "\n");

    if (stage == "all") {
        for (const auto& s : stage_names()) run_stage(s, cfg);
        return;
    }
    if (stage == "simulate") stage_simulate(cfg, p);
    else if (stage == "fit-tokenizer") stage_fit_tokenizer(cfg, p);
    else if (stage == "train") stage_train(cfg, p);
    else if (stage == "extract") stage_extract(cfg, p);
    else if (stage == "probe") stage_probe(cfg, p);
    else if (stage == "intervene") stage_intervene(cfg, p);
    else if (stage == "attention") stage_attention(cfg, p);
    else if (stage == "ablate") stage_ablate(cfg, p);
    else if (stage == "report") stage_report(cfg, p);
    else throw ConfigError("unknown stage '" + stage + "'");
}

}  // namespace worldlens::pipeline
