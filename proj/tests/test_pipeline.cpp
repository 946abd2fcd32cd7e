#include <doctest.h>

#include <cstdlib>
#include <filesystem>

#include <nlohmann/json.hpp>

#include "worldlens/array_file.hpp"
#include "worldlens/pipeline.hpp"
#include "worldlens/report.hpp"

using namespace worldlens;
using namespace worldlens::pipeline;
using json = nlohmann::json;

namespace {

PipelineConfig micro_config(const std::string& out_dir, const std::string& variant = "bricks") {
    PipelineConfig cfg = PipelineConfig::defaults("smoke");
    cfg.run_id = "micro";
    cfg.out_dir = out_dir;
    cfg.variant = variant;
    cfg.sim.n_episodes = 6;
    cfg.sim.episode_len = 48;
    cfg.tokenizer.K = 24;
    cfg.tokenizer.fit_episodes = 2;
    cfg.model.n_layers = 2;
    cfg.model.n_heads = 2;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.model.codebook_size = 24;
    cfg.train.steps = 40;
    cfg.train.batch_size = 8;
    cfg.train.n_chunks = 2;
    cfg.train.eval_every = 20;
    cfg.extraction.n_frames = 60;
    cfg.extraction.episode_len = 48;
    cfg.probing.mlp.epochs = 10;
    cfg.probing.mlp.patience = 5;
    cfg.intervention.n_contexts = 5;
    cfg.intervention.alphas = {-2, 0, 2};
    cfg.intervention.episode_len = 48;
    // mid layer of the 2-block micro model (patching the final block's
    // output cannot reach the predicted positions)
    cfg.intervention.layer = "layer1";
    cfg.analysis.attention_contexts = 6;
    cfg.analysis.ablation_contexts = 6;
    return cfg;
}

}  // namespace

TEST_CASE("config defaults round-trip through json with full echo") {
    PipelineConfig cfg = PipelineConfig::defaults("smoke");
    json j = cfg.to_json();
    CHECK(j["train"]["steps"] == 2000);
    CHECK(j["extraction"]["n_frames"] == 1000);
    PipelineConfig back = PipelineConfig::from_json(j);
    CHECK(back.to_json() == j);

    PipelineConfig paper = PipelineConfig::defaults("paper-analog");
    CHECK(paper.train.steps == 20000);
    CHECK(paper.extraction.n_frames == 10000);
    CHECK(paper.intervention.n_contexts == 200);

    CHECK_THROWS_AS(PipelineConfig::defaults("nope"), ConfigError);
    CHECK_THROWS_AS(PipelineConfig::from_json(json{{"variant", "pong"}}), ConfigError);
}

TEST_CASE("overrides change nested keys and reject unknown ones") {
    PipelineConfig cfg = PipelineConfig::defaults("smoke");
    apply_override(cfg, "seeds.env", "99");
    CHECK(cfg.seeds.env == 99);
    apply_override(cfg, "train.steps", "123");
    CHECK(cfg.train.steps == 123);
    apply_override(cfg, "variant", "rally");
    CHECK(cfg.variant == "rally");
    CHECK_THROWS_AS(apply_override(cfg, "no.such.key", "1"), ConfigError);
}

TEST_CASE("micro pipeline runs end to end and is reproducible") {
    std::filesystem::remove_all("test_tmp/runA");
    std::filesystem::remove_all("test_tmp/runB");
    PipelineConfig a = micro_config("test_tmp/runA");
    run_stage("all", a);

    // artifacts and tables exist
    for (const char* rel : {"config.json", "manifest.json", "artifacts/codebook.bin",
                            "artifacts/model.bin", "artifacts/dataset_trained.bin",
                            "artifacts/dataset_random_model.bin", "artifacts/dataset_raw_pixels.bin",
                            "tables/probe_trained.csv", "tables/probe_summary.json",
                            "tables/intervention_summary.json", "tables/attention_heads.csv",
                            "tables/ablation.csv", "tables/table1.csv", "tables/table1.txt",
                            "tables/acceptance_summary.json", "figures/fig_probe_r2.svg",
                            "figures/fig_intervention.svg", "figures/fig_ablation.svg"})
        CHECK_MESSAGE(file_exists(std::string("test_tmp/runA/") + rel), rel);

    json manifest = json::parse(read_text_file("test_tmp/runA/manifest.json"));
    for (const auto& stage : stage_names()) CHECK(manifest["stages"].contains(stage));
    CHECK(manifest["stages"]["train"]["info"]["val_accuracy"].is_number());

    // the echoed config records exactly what ran
    json cfg_echo = json::parse(read_text_file("test_tmp/runA/config.json"));
    CHECK(cfg_echo == a.to_json());

    // invariant checks hold even at micro scale
    json checks = json::parse(read_text_file("test_tmp/runA/tables/acceptance_summary.json"));
    CHECK(checks["all_invariants_pass"] == true);

    // a second identical run produces identical CSVs
    PipelineConfig b = micro_config("test_tmp/runB");
    run_stage("all", b);
    for (const char* rel : {"tables/probe_trained.csv", "tables/probe_random_model.csv",
                            "tables/probe_shuffled_labels.csv", "tables/probe_raw_pixels.csv",
                            "tables/attention_heads.csv", "tables/ablation.csv",
                            "tables/table1.csv", "figures/fig_probe_r2.svg",
                            "figures/fig_ablation.svg"})
        CHECK_MESSAGE(read_text_file(std::string("test_tmp/runA/") + rel) ==
                      read_text_file(std::string("test_tmp/runB/") + rel), rel);
    json ia = json::parse(read_text_file("test_tmp/runA/tables/intervention_summary.json"));
    json ib = json::parse(read_text_file("test_tmp/runB/tables/intervention_summary.json"));
    CHECK(ia == ib);

    // alpha=0 rows are exactly zero
    for (auto& [prop, vals] : ia["properties"].items()) {
        CHECK(vals["alpha0_kl"] == 0.0);
        CHECK(vals["alpha0_change_rate"] == 0.0);
    }
}

TEST_CASE("missing artifacts and stale inputs are reported") {
    std::filesystem::remove_all("test_tmp/runC");
    PipelineConfig cfg = micro_config("test_tmp/runC");
    CHECK_THROWS_AS(run_stage("probe", cfg), MissingArtifactError);
    CHECK_THROWS_AS(run_stage("train", cfg), MissingArtifactError);

    run_stage("simulate", cfg);
    run_stage("fit-tokenizer", cfg);
    // tamper with the codebook: train must refuse the stale artifact
    tok::Codebook cb = tok::Codebook::load("test_tmp/runC/artifacts/codebook.bin");
    cb.fit_seed += 1;
    cb.save("test_tmp/runC/artifacts/codebook.bin");
    CHECK_THROWS_AS(run_stage("train", cfg), ProvenanceError);

    CHECK_THROWS_AS(run_stage("nope", cfg), ConfigError);
}

TEST_CASE("summary table assembles rows with best-layer semantics and gaps") {
    report::TableInputs ti;
    ti.properties = {"ball_x", "score"};
    ti.trained_layer_order = {"layer0", "layer1"};
    ti.random_layer_order = {"layer0"};
    auto mk = [](const std::string& layer, const std::string& prop, const std::string& kind,
                 double mean, double dev) {
        probing::ProbeResult r;
        r.layer = layer;
        r.property = prop;
        r.kind = kind;
        r.r2_mean = mean;
        r.r2_std = dev;
        return r;
    };
    ti.trained = {mk("layer0", "ball_x", "linear", 0.80, 0.01),
                  mk("layer1", "ball_x", "linear", 0.85, 0.02),
                  mk("layer1", "ball_x", "mlp", 0.91, 0.01),
                  mk("layer0", "score", "linear", 0.99, 0.001),
                  mk("layer1", "score", "linear", 0.97, 0.002),
                  mk("layer0", "score", "mlp", 0.98, 0.001)};
    ti.random_model = {mk("layer0", "ball_x", "linear", -1.2, 0.1),
                       mk("layer0", "score", "linear", -1.1, 0.1)};
    ti.shuffled = {mk("layer0", "ball_x", "linear", -0.5, 0.1),
                   mk("layer1", "ball_x", "linear", -0.4, 0.1)};
    ti.raw_pixels = {mk("raw_pixels", "ball_x", "linear", -1.3, 0.2),
                     mk("raw_pixels", "score", "linear", 0.9998, 0.0001)};

    report::SummaryTable t = report::emit_table(ti);
    CHECK(t.values["trained_linear"]["ball_x"]["layer"] == "layer1");
    CHECK(t.values["trained_linear"]["ball_x"]["mean"] == 0.85);
    CHECK(t.values["trained_mlp"]["ball_x"]["mean"] == 0.91);
    // delta row is mlp - linear at the linear-best layer
    CHECK(t.values["delta"]["ball_x"]["mean"] == doctest::Approx(0.06));
    CHECK(t.values["delta"]["score"]["mean"] == doctest::Approx(-0.01));
    // all control rows present
    for (const char* row : {"random_model", "shuffled_labels", "raw_pixels"})
        CHECK(!t.values[row]["ball_x"].is_null());
    // shuffled control picks its best layer too
    CHECK(t.values["shuffled_labels"]["ball_x"]["mean"] == -0.4);
    // missing cells are explicit gaps
    CHECK(t.values["shuffled_labels"]["score"].is_null());
    CHECK(t.text.find("n/a") != std::string::npos);

    // regeneration is deterministic
    report::SummaryTable t2 = report::emit_table(ti);
    CHECK(t2.csv == t.csv);
    CHECK(t2.text == t.text);
}

TEST_CASE("figures render deterministically and include negative ranges") {
    std::vector<report::Series> series(1);
    series[0].label = "ball_x";
    series[0].x = {0, 1, 2};
    series[0].y = {-1.3, 0.5, 0.9};
    series[0].band = {0.1, 0.05, 0.02};
    std::string svg1 = report::svg_line_plot("t", "layer", "R^2", series, {"a", "b", "c"});
    std::string svg2 = report::svg_line_plot("t", "layer", "R^2", series, {"a", "b", "c"});
    CHECK(svg1 == svg2);
    CHECK(svg1.find("stroke-dasharray") != std::string::npos);  // zero line present
    CHECK(svg1.find(">-1") != std::string::npos);               // negative tick rendered

    analysis::AblationOutput ao;
    for (int p = 0; p < 16; ++p)
        for (const char* b : {"zero", "mean", "random"}) {
            analysis::AblationResult r;
            r.position = p;
            r.baseline = b;
            r.kl_mean = 0.01 * p;
            ao.results.push_back(r);
        }
    std::string heat = report::fig_ablation(ao);
    CHECK(heat == report::fig_ablation(ao));
    CHECK(heat.find("zero") != std::string::npos);
    CHECK(heat.find("random") != std::string::npos);
}

TEST_CASE("cli exit codes map the error taxonomy") {
    if (!file_exists("./worldlens")) return;  // only when run from the build tree
    std::filesystem::remove_all("test_tmp/cli");
    int rc = std::system("./worldlens probe --profile smoke --out test_tmp/cli >/dev/null 2>&1");
    CHECK(WEXITSTATUS(rc) == 3);  // missing artifact
    rc = std::system("./worldlens all --profile nope --out test_tmp/cli >/dev/null 2>&1");
    CHECK(WEXITSTATUS(rc) == 2);  // config error
    rc = std::system("./worldlens simulate --profile smoke --out test_tmp/cli "
                     "--seed-override bogus.key=1 >/dev/null 2>&1");
    CHECK(WEXITSTATUS(rc) == 2);
    // a tiny simulate run through the CLI succeeds
    rc = std::system("./worldlens simulate --profile smoke --out test_tmp/cli "
                     "--seed-override sim.n_episodes=2 --seed-override sim.episode_len=16 "
                     ">/dev/null 2>&1");
    CHECK(WEXITSTATUS(rc) == 0);
    CHECK(file_exists("test_tmp/cli/artifacts/episodes/ep_00001.bin"));
}
