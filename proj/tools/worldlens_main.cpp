// worldlens — train a small token world model on a synthetic game and run
// the probing / intervention / attention / ablation pipeline over it.
//
// usage: worldlens <stage> [--config cfg.json] [--profile smoke|paper-analog]
//                  [--out dir] [--variant bricks|rally] [--seed-override k=v]...
//
// exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical failure

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "worldlens/array_file.hpp"
#include "worldlens/pipeline.hpp"

using namespace worldlens;

int main(int argc, char** argv) {
    CLI::App app{"worldlens: token world-model interpretability workbench"};
    app.require_subcommand(1);

    std::string config_path, profile, out_dir, variant, run_id;
    std::vector<std::string> overrides;

    std::vector<std::string> stages = pipeline::stage_names();
    stages.push_back("all");
    std::vector<CLI::App*> subs;
    for (const auto& name : stages) {
        CLI::App* sub = app.add_subcommand(name, "run the '" + name + "' stage");
        sub->add_option("--config", config_path, "pipeline config JSON");
        sub->add_option("--profile", profile, "built-in profile (smoke | paper-analog)");
        sub->add_option("--out", out_dir, "output run directory");
        sub->add_option("--variant", variant, "environment variant (bricks | rally)");
        sub->add_option("--run-id", run_id, "run identifier (default out dir: out/<run-id>)");
        sub->add_option("--seed-override", overrides,
                        "config override key=value (e.g. seeds.env=9, train.steps=100)");
        subs.push_back(sub);
    }

    CLI11_PARSE(app, argc, argv);
    std::string stage = app.get_subcommands().front()->get_name();

    try {
        pipeline::PipelineConfig cfg;
        if (!config_path.empty()) {
            nlohmann::json j = nlohmann::json::parse(read_text_file(config_path));
            if (!profile.empty()) j["profile"] = profile;
            cfg = pipeline::PipelineConfig::from_json(j);
        } else {
            cfg = pipeline::PipelineConfig::defaults(profile.empty() ? "paper-analog" : profile);
        }
        if (!variant.empty()) pipeline::apply_override(cfg, "variant", variant);
        if (!run_id.empty()) pipeline::apply_override(cfg, "run_id", run_id);
        if (!out_dir.empty()) cfg.out_dir = out_dir;
        for (const auto& ov : overrides) {
            auto eq = ov.find('=');
            if (eq == std::string::npos)
                throw ConfigError("override must be key=value, got '" + ov + "'");
            pipeline::apply_override(cfg, ov.substr(0, eq), ov.substr(eq + 1));
        }
        pipeline::run_stage(stage, cfg);
        std::cout << "stage '" << stage << "' done -> " << cfg.resolved_out_dir() << "\n";
        return 0;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const MissingArtifactError& e) {
        std::cerr << "missing artifact: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    }
}
