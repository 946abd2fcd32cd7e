#include "worldlens/intervention.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include <nlohmann/json.hpp>

#include "worldlens/analysis.hpp"

namespace worldlens::intervention {

using json = nlohmann::json;

Eigen::MatrixXf patch_hidden(const Eigen::MatrixXf& h, const Eigen::VectorXd& w_hat, double alpha) {
    if (h.rows() * h.cols() != w_hat.size())
        throw ShapeError("patch direction size " + std::to_string(w_hat.size()) +
                         " does not match hidden block " + std::to_string(h.rows()) + "x" +
                         std::to_string(h.cols()));
    double norm = w_hat.norm();
    if (std::abs(norm - 1.0) > 1e-3)
        throw UsageError("patch direction must be unit-norm (got " + std::to_string(norm) + ")");
    Eigen::MatrixXf out = h;
    const int d = static_cast<int>(h.cols());
    for (int t = 0; t < h.rows(); ++t)
        out.row(t) += (alpha * w_hat.segment(static_cast<int64_t>(t) * d, d).transpose()).cast<float>();
    return out;
}

double kl_divergence(const Eigen::VectorXd& p, const Eigen::VectorXd& q, double floor) {
    if (p.size() != q.size()) throw ShapeError("kl_divergence: support size mismatch");
    if (p.size() == 0) throw ShapeError("kl_divergence: empty distributions");
    double ps = 0, qs = 0;
    for (int i = 0; i < p.size(); ++i) {
        if (p[i] < 0 || q[i] < 0)
            throw DataError("kl_divergence: negative probability entry");
        ps += p[i];
        qs += q[i];
    }
    if (std::abs(ps - 1.0) > 1e-6 || std::abs(qs - 1.0) > 1e-6)
        throw DataError("kl_divergence: inputs are not normalized (sums " +
                        std::to_string(ps) + ", " + std::to_string(qs) + ")");
    double kl = 0.0;
    for (int i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        kl += p[i] * std::log(p[i] / std::max(q[i], floor));
    }
    return kl;
}

double token_change_rate(const Eigen::MatrixXf& logits_before, const Eigen::MatrixXf& logits_after) {
    if (logits_before.rows() != logits_after.rows() ||
        logits_before.cols() != logits_after.cols())
        throw ShapeError("token_change_rate: logits shape mismatch");
    if (logits_before.rows() == 0) throw ShapeError("token_change_rate: empty logits");
    int changed = 0;
    for (int i = 0; i < logits_before.rows(); ++i) {
        Eigen::Index a = 0, b = 0;
        logits_before.row(i).maxCoeff(&a);
        logits_after.row(i).maxCoeff(&b);
        if (a != b) ++changed;
    }
    return static_cast<double>(changed) / static_cast<double>(logits_before.rows());
}

json InterventionConfig::to_json() const {
    return json{{"layer", layer},     {"property", property}, {"alphas", alphas},
                {"n_contexts", n_contexts}, {"seed", seed},
                {"policy_eps", policy_eps}, {"episode_len", episode_len}};
}

InterventionConfig InterventionConfig::from_json(const json& j) {
    InterventionConfig c;
    c.layer = j.value("layer", c.layer);
    c.property = j.value("property", c.property);
    c.alphas = j.value("alphas", c.alphas);
    c.n_contexts = j.value("n_contexts", c.n_contexts);
    c.seed = j.value("seed", c.seed);
    c.policy_eps = j.value("policy_eps", c.policy_eps);
    c.episode_len = j.value("episode_len", c.episode_len);
    return c;
}

double layer_sigma(const extraction::ActivationDataset& dataset, const std::string& layer,
                   int d_model) {
    const Eigen::MatrixXf& M = dataset.layer(layer);
    if (M.cols() % d_model != 0)
        throw ShapeError("layer width is not a multiple of d_model");
    const int tokens = static_cast<int>(M.cols()) / d_model;
    double acc = 0.0;
    for (int i = 0; i < M.rows(); ++i)
        for (int t = 0; t < tokens; ++t)
            acc += M.row(i).segment(t * d_model, d_model).norm();
    return acc / (static_cast<double>(M.rows()) * tokens) / std::sqrt(d_model);
}

SweepOutput run_sweep(const wm::Transformer& model, const extraction::ActivationDataset& dataset,
                      const probing::LinearProbe& probe, const std::string& probe_layer,
                      env::Variant variant, const tok::Codebook& cb,
                      const InterventionConfig& cfg) {
    if (probe_layer != cfg.layer)
        throw UsageError("probe direction is from layer '" + probe_layer +
                         "' but the patch targets '" + cfg.layer + "'");
    if (cfg.layer.rfind("layer", 0) != 0)
        throw UsageError("only model hidden layers (layerN) can be patched, got '" + cfg.layer + "'");
    bool has_zero = false;
    for (double a : cfg.alphas)
        if (a == 0.0) has_zero = true;
    if (!has_zero) throw ConfigError("intervention alpha grid must contain 0 (anchor point)");

    const wm::ModelConfig& mc = model.config();
    int layer_index = std::stoi(cfg.layer.substr(5));
    if (layer_index < 0 || layer_index > mc.n_layers)
        throw ConfigError("patch layer index out of range");

    Eigen::VectorXd w_hat = probing::probe_direction(probe);
    if (w_hat.size() != static_cast<int64_t>(tok::kTokensPerFrame) * mc.d_model)
        throw ShapeError("probe direction width does not match concatenated token states");

    double sigma = layer_sigma(dataset, cfg.layer, mc.d_model);
    std::vector<analysis::ContextSample> contexts = analysis::sample_contexts(
        variant, cb, mc, cfg.n_contexts, derive_seed(cfg.seed, 0x17e1d), cfg.policy_eps,
        cfg.episode_len, /*stratify=*/false);

    const int first = (mc.context_frames - 1) * mc.tokens_per_frame();
    std::vector<int> positions(tok::kTokensPerFrame);
    for (int t = 0; t < tok::kTokensPerFrame; ++t) positions[t] = first + t;

    const size_t n_alpha = cfg.alphas.size();
    std::vector<std::vector<double>> kl(contexts.size(), std::vector<double>(n_alpha, 0.0));
    std::vector<std::vector<double>> rate(contexts.size(), std::vector<double>(n_alpha, 0.0));

    parallel_for(contexts.size(), [&](size_t ci) {
        const auto& cs = contexts[ci];
        wm::NextFramePrediction base = model.predict_next_frame(cs.ids);
        wm::NextFramePrediction base_forced = model.eval_next_frame_forced(cs.ids, base.grid);

        for (size_t ai = 0; ai < n_alpha; ++ai) {
            double alpha_raw = cfg.alphas[ai] * sigma;
            wm::PatchSpec patch;
            patch.layer = layer_index;
            patch.positions = positions;
            patch.delta.resize(tok::kTokensPerFrame, mc.d_model);
            for (int t = 0; t < tok::kTokensPerFrame; ++t)
                patch.delta.row(t) =
                    (alpha_raw * w_hat.segment(static_cast<int64_t>(t) * mc.d_model, mc.d_model)
                                     .transpose())
                        .cast<float>();
            wm::EvalOptions opts;
            opts.patch = patch;
            wm::NextFramePrediction mod = model.eval_next_frame_forced(cs.ids, base.grid, opts);
            double k = 0.0;
            for (int j = 0; j < 16; ++j)
                k += kl_divergence(base_forced.dists.row(j).transpose().cast<double>(),
                                   mod.dists.row(j).transpose().cast<double>());
            kl[ci][ai] = std::max(0.0, k / 16.0);  // clamp float quantization noise
            rate[ci][ai] = token_change_rate(base_forced.logits, mod.logits);
        }
    });

    SweepOutput out;
    out.sigma_layer = sigma;
    out.layer = cfg.layer;
    out.property = cfg.property;
    for (size_t ai = 0; ai < n_alpha; ++ai) {
        InterventionResult r;
        r.alpha = cfg.alphas[ai];
        r.alpha_raw = cfg.alphas[ai] * sigma;
        double mean = 0, rt = 0;
        for (size_t ci = 0; ci < contexts.size(); ++ci) {
            r.per_context_kl.push_back(kl[ci][ai]);
            mean += kl[ci][ai];
            rt += rate[ci][ai];
        }
        mean /= static_cast<double>(contexts.size());
        rt /= static_cast<double>(contexts.size());
        double var = 0;
        for (double v : r.per_context_kl) var += (v - mean) * (v - mean);
        r.kl_mean = mean;
        r.kl_std = std::sqrt(var / static_cast<double>(contexts.size()));
        r.change_rate = rt;
        out.results.push_back(std::move(r));
    }

    std::vector<double> abs_alpha, kl_means;
    for (const auto& r : out.results) {
        abs_alpha.push_back(std::abs(r.alpha));
        kl_means.push_back(r.kl_mean);
        out.correlation.pairs.emplace_back(std::abs(r.alpha), r.kl_mean);
    }
    out.correlation.pearson_r = analysis::pearson(abs_alpha, kl_means);
    out.correlation.spearman_rho = analysis::spearman(abs_alpha, kl_means);
    return out;
}

std::string results_to_csv(const SweepOutput& out) {
    std::ostringstream os;
    os << "alpha,alpha_raw,kl_mean,kl_std,change_rate\n";
    char buf[64];
    for (const auto& r : out.results) {
        std::snprintf(buf, sizeof(buf), "%.9g", r.alpha);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.alpha_raw);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.kl_mean);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.kl_std);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.change_rate);
        os << buf << '\n';
    }
    return os.str();
}

}  // namespace worldlens::intervention
