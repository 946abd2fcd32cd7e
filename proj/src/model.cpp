#include "worldlens/model.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "model_core.hpp"
#include "worldlens/array_file.hpp"

namespace worldlens::wm {

using json = nlohmann::json;
using detail::MatX;
using detail::VecX;

void ModelConfig::validate() const {
    if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
    if (n_layers < 1 || n_heads < 1 || d_model < 2 || d_ff < 1)
        throw ConfigError("model dimensions must be positive");
    if (context_frames < 1) throw ConfigError("context_frames must be >= 1");
    if (codebook_size < 1 || n_actions < 1) throw ConfigError("vocabulary must be non-empty");
}

json ModelConfig::to_json() const {
    return json{{"n_layers", n_layers},   {"n_heads", n_heads},
                {"d_model", d_model},     {"d_ff", d_ff},
                {"context_frames", context_frames},
                {"codebook_size", codebook_size},
                {"n_actions", n_actions}, {"seed", seed}};
}

ModelConfig ModelConfig::from_json(const json& j) {
    ModelConfig c;
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.d_model = j.value("d_model", c.d_model);
    c.d_ff = j.value("d_ff", c.d_ff);
    c.context_frames = j.value("context_frames", c.context_frames);
    c.codebook_size = j.value("codebook_size", c.codebook_size);
    c.n_actions = j.value("n_actions", c.n_actions);
    c.seed = j.value("seed", c.seed);
    return c;
}

json TrainConfig::to_json() const {
    return json{{"steps", steps},       {"batch_size", batch_size},
                {"n_chunks", n_chunks}, {"lr", lr},
                {"warmup_steps", warmup_steps},
                {"grad_clip", grad_clip},
                {"val_frac", val_frac}, {"eval_every", eval_every},
                {"seed", seed}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.steps = j.value("steps", c.steps);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.n_chunks = j.value("n_chunks", c.n_chunks);
    c.lr = j.value("lr", c.lr);
    c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.val_frac = j.value("val_frac", c.val_frac);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.seed = j.value("seed", c.seed);
    return c;
}

size_t TokenCorpus::n_frames() const {
    size_t n = 0;
    for (const auto& ep : episodes) n += ep.frames.size();
    return n;
}

std::vector<uint16_t> build_window(const TokenizedEpisode& ep, int start, const ModelConfig& cfg) {
    const int F = cfg.context_frames + 1;
    if (start < 0 || start + F > static_cast<int>(ep.frames.size()) ||
        start + cfg.context_frames > static_cast<int>(ep.actions.size()) + 0)
        throw ShapeError("window start " + std::to_string(start) + " out of episode range");
    std::vector<uint16_t> ids;
    ids.reserve(cfg.max_seq());
    for (int i = 0; i < F; ++i) {
        const auto& g = ep.frames[start + i];
        ids.insert(ids.end(), g.ids.begin(), g.ids.end());
        if (i < F - 1)
            ids.push_back(static_cast<uint16_t>(cfg.codebook_size + ep.actions[start + i]));
    }
    return ids;
}

std::vector<uint16_t> build_context(const TokenizedEpisode& ep, int last, const ModelConfig& cfg) {
    const int F = cfg.context_frames;
    int start = last - F + 1;
    if (start < 0 || last >= static_cast<int>(ep.frames.size()) ||
        last >= static_cast<int>(ep.actions.size()) + 1)
        throw ShapeError("context end frame out of episode range");
    std::vector<uint16_t> ids;
    ids.reserve(cfg.context_len());
    for (int i = 0; i < F; ++i) {
        const auto& g = ep.frames[start + i];
        ids.insert(ids.end(), g.ids.begin(), g.ids.end());
        if (start + i >= static_cast<int>(ep.actions.size()))
            throw ShapeError("missing action for context frame");
        ids.push_back(static_cast<uint16_t>(cfg.codebook_size + ep.actions[start + i]));
    }
    return ids;
}

namespace {

std::vector<int> window_targets(const std::vector<uint16_t>& ids, int codebook_size) {
    std::vector<int> t(ids.size(), -1);
    for (size_t i = 0; i + 1 < ids.size(); ++i)
        if (ids[i + 1] < codebook_size) t[i] = ids[i + 1];
    return t;
}

Eigen::MatrixXf softmax_rows(const Eigen::MatrixXf& logits) {
    Eigen::MatrixXf out(logits.rows(), logits.cols());
    for (int i = 0; i < logits.rows(); ++i) {
        float m = logits.row(i).maxCoeff();
        Eigen::Array<float, 1, Eigen::Dynamic> e = (logits.row(i).array() - m).exp();
        out.row(i) = (e / e.sum()).matrix();
    }
    return out;
}

}  // namespace

struct Transformer::Impl {
    detail::NetT<float> net;
    json meta = json::object();

    Impl(const ModelConfig& cfg, uint64_t seed) : net(cfg, seed) {}
};

Transformer::Transformer(const ModelConfig& cfg, uint64_t init_seed)
    : impl_(std::make_unique<Impl>(cfg, init_seed)) {}
Transformer::Transformer(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}
Transformer::Transformer(const Transformer& o) : impl_(std::make_unique<Impl>(*o.impl_)) {}
Transformer& Transformer::operator=(const Transformer& o) {
    impl_ = std::make_unique<Impl>(*o.impl_);
    return *this;
}
Transformer::Transformer(Transformer&&) noexcept = default;
Transformer& Transformer::operator=(Transformer&&) noexcept = default;
Transformer::~Transformer() = default;

const ModelConfig& Transformer::config() const { return impl_->net.cfg; }

uint64_t Transformer::weights_hash() const {
    const auto& p = impl_->net.params;
    return fnv1a64(p.data(), sizeof(float) * p.size());
}

int64_t Transformer::n_params() const { return impl_->net.layout.total; }

nlohmann::json Transformer::saved_meta() const { return impl_->meta; }

Eigen::MatrixXf Transformer::forward_logits(std::span<const uint16_t> ids,
                                            const EvalOptions& opts) const {
    return impl_->net.forward_single(ids, opts, nullptr, nullptr);
}

TraceRecord Transformer::forward_with_trace(std::span<const uint16_t> ids, bool want_attention,
                                            const EvalOptions& opts) const {
    TraceRecord tr;
    std::vector<std::vector<Eigen::MatrixXf>> attn;
    tr.logits = impl_->net.forward_single(ids, opts, &tr.hidden, want_attention ? &attn : nullptr);
    if (want_attention) tr.attention = std::move(attn);
    return tr;
}

Eigen::VectorXf Transformer::token_embedding(int token_id) const {
    if (token_id < 0 || token_id >= impl_->net.cfg.vocab())
        throw DataError("token id out of vocabulary");
    return impl_->net.p("tok_emb").row(token_id).transpose();
}

NextFramePrediction Transformer::predict_next_frame(std::span<const uint16_t> context,
                                                    const EvalOptions& opts) const {
    const ModelConfig& cfg = impl_->net.cfg;
    if (static_cast<int>(context.size()) != cfg.context_len())
        throw ShapeError("context must have exactly " + std::to_string(cfg.context_len()) +
                         " tokens, got " + std::to_string(context.size()));
    std::vector<uint16_t> ids(context.begin(), context.end());
    NextFramePrediction out;
    out.dists.resize(tok::kTokensPerFrame, cfg.vocab());
    out.logits.resize(tok::kTokensPerFrame, cfg.vocab());
    for (int j = 0; j < tok::kTokensPerFrame; ++j) {
        Eigen::MatrixXf logits = impl_->net.forward_single(ids, opts, nullptr, nullptr);
        Eigen::RowVectorXf last = logits.row(logits.rows() - 1);
        out.logits.row(j) = last;
        float m = last.maxCoeff();
        Eigen::Array<float, 1, Eigen::Dynamic> e = (last.array() - m).exp();
        out.dists.row(j) = (e / e.sum()).matrix();
        Eigen::Index argmax = 0;
        last.maxCoeff(&argmax);
        out.grid[j] = static_cast<uint16_t>(argmax);
        ids.push_back(out.grid[j]);
    }
    return out;
}

NextFramePrediction Transformer::eval_next_frame_forced(std::span<const uint16_t> context,
                                                        const std::array<uint16_t, 16>& forced,
                                                        const EvalOptions& opts) const {
    const ModelConfig& cfg = impl_->net.cfg;
    if (static_cast<int>(context.size()) != cfg.context_len())
        throw ShapeError("context must have exactly " + std::to_string(cfg.context_len()) +
                         " tokens, got " + std::to_string(context.size()));
    std::vector<uint16_t> ids(context.begin(), context.end());
    ids.insert(ids.end(), forced.begin(), forced.end());
    Eigen::MatrixXf logits = impl_->net.forward_single(ids, opts, nullptr, nullptr);
    NextFramePrediction out;
    out.logits.resize(tok::kTokensPerFrame, cfg.vocab());
    for (int j = 0; j < tok::kTokensPerFrame; ++j)
        out.logits.row(j) = logits.row(cfg.context_len() - 1 + j);
    out.dists = softmax_rows(out.logits);
    for (int j = 0; j < tok::kTokensPerFrame; ++j) {
        Eigen::Index argmax = 0;
        out.dists.row(j).maxCoeff(&argmax);
        out.grid[j] = static_cast<uint16_t>(argmax);
    }
    return out;
}

namespace {

struct WindowSampler {
    const TokenCorpus* corpus;
    const ModelConfig* cfg;
    std::vector<size_t> episode_ids;

    std::pair<size_t, int> sample(Rng& rng) const {
        size_t ep = episode_ids[rng.uniform_int(episode_ids.size())];
        const auto& e = corpus->episodes[ep];
        int n_starts = static_cast<int>(e.frames.size()) - cfg->context_frames - 1 + 1;
        if (n_starts < 1)
            throw ShapeError("episode too short for a training window");
        int start = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n_starts)));
        return {ep, start};
    }
};

}  // namespace

TrainStats Transformer::train(const TokenCorpus& corpus, const TrainConfig& tc) {
    detail::NetT<float>& net = impl_->net;
    const ModelConfig& cfg = net.cfg;
    if (corpus.codebook_size != cfg.codebook_size || corpus.n_actions != cfg.n_actions)
        throw ConfigError("corpus vocabulary does not match model config");
    if (corpus.episodes.empty()) throw ConfigError("empty training corpus");
    for (const auto& ep : corpus.episodes)
        if (static_cast<int>(ep.frames.size()) < cfg.context_frames + 2)
            throw ConfigError("episode shorter than context_frames+1 frames");

    // episode split: last ceil(val_frac * n) episodes are validation
    size_t n_eps = corpus.episodes.size();
    size_t n_val = std::min(n_eps - 1, static_cast<size_t>(std::ceil(tc.val_frac * n_eps)));
    WindowSampler train_sampler{&corpus, &cfg, {}};
    WindowSampler val_sampler{&corpus, &cfg, {}};
    for (size_t i = 0; i < n_eps - n_val; ++i) train_sampler.episode_ids.push_back(i);
    for (size_t i = n_eps - n_val; i < n_eps; ++i) val_sampler.episode_ids.push_back(i);
    if (val_sampler.episode_ids.empty()) val_sampler = train_sampler;

    const int B = tc.batch_size;
    const int n_chunks = std::max(1, std::min(tc.n_chunks, B));

    VecX<float> m = VecX<float>::Zero(net.layout.total);
    VecX<float> v = VecX<float>::Zero(net.layout.total);
    std::vector<VecX<float>> chunk_grads(n_chunks);
    std::vector<detail::NetT<float>::BatchResult> chunk_res(n_chunks);

    Rng data_rng(derive_seed(tc.seed, 0x7261696e));
    VecX<float> last_good = net.params;
    int last_good_step = 0;

    constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    TrainStats stats;
    double ema_loss = 0.0;
    bool ema_init = false;

    auto eval_windows = [&](const WindowSampler& sampler, int n, uint64_t seed) {
        Rng rng(seed);
        std::vector<std::vector<uint16_t>> seqs;
        std::vector<std::vector<int>> targets;
        for (int i = 0; i < n; ++i) {
            auto [ep, start] = sampler.sample(rng);
            seqs.push_back(build_window(corpus.episodes[ep], start, cfg));
            targets.push_back(window_targets(seqs.back(), cfg.codebook_size));
        }
        auto r = net.loss_and_grad(seqs, targets, nullptr);
        double loss = r.n_targets ? r.loss_sum / static_cast<double>(r.n_targets) : 0.0;
        double acc = r.n_targets ? static_cast<double>(r.n_correct) / static_cast<double>(r.n_targets) : 0.0;
        return std::make_pair(loss, acc);
    };

    for (int step = 0; step < tc.steps; ++step) {
        // sample the whole batch up front so data order is independent of
        // threading
        std::vector<std::vector<uint16_t>> seqs(B);
        std::vector<std::vector<int>> targets(B);
        for (int i = 0; i < B; ++i) {
            auto [ep, start] = train_sampler.sample(data_rng);
            seqs[i] = build_window(corpus.episodes[ep], start, cfg);
            targets[i] = window_targets(seqs[i], cfg.codebook_size);
        }

        parallel_for(n_chunks, [&](size_t c) {
            int lo = static_cast<int>(c) * B / n_chunks;
            int hi = static_cast<int>(c + 1) * B / n_chunks;
            std::vector<std::vector<uint16_t>> cs(seqs.begin() + lo, seqs.begin() + hi);
            std::vector<std::vector<int>> ct(targets.begin() + lo, targets.begin() + hi);
            chunk_grads[c].setZero(net.layout.total);
            chunk_res[c] = net.loss_and_grad(cs, ct, &chunk_grads[c]);
        });

        double loss_sum = 0.0;
        int64_t n_targets = 0;
        VecX<float>& grad = chunk_grads[0];
        for (int c = 1; c < n_chunks; ++c) grad += chunk_grads[c];
        for (int c = 0; c < n_chunks; ++c) {
            loss_sum += chunk_res[c].loss_sum;
            n_targets += chunk_res[c].n_targets;
        }
        if (n_targets == 0) throw TrainError("batch produced no target positions");
        double loss = loss_sum / static_cast<double>(n_targets);
        if (!std::isfinite(loss)) {
            net.params = last_good;
            throw TrainError("training loss became non-finite at step " + std::to_string(step) +
                             "; weights restored to step " + std::to_string(last_good_step));
        }
        grad /= static_cast<float>(n_targets);

        double gnorm = std::sqrt(static_cast<double>(grad.squaredNorm()));
        if (tc.grad_clip > 0 && gnorm > tc.grad_clip)
            grad *= static_cast<float>(tc.grad_clip / gnorm);

        double warm = tc.warmup_steps > 0 ? std::min(1.0, (step + 1) / static_cast<double>(tc.warmup_steps)) : 1.0;
        double cosine = 0.5 * (1.0 + std::cos(M_PI * step / std::max(1, tc.steps)));
        double lr_t = tc.lr * std::min(warm, cosine);

        double bc1 = 1.0 - std::pow(beta1, step + 1);
        double bc2 = 1.0 - std::pow(beta2, step + 1);
        float* mp = m.data();
        float* vp = v.data();
        float* gp = grad.data();
        float* pp = net.params.data();
        const float lr_f = static_cast<float>(lr_t);
        const float bc1_f = static_cast<float>(bc1);
        const float bc2_f = static_cast<float>(bc2);
        for (int64_t i = 0; i < net.layout.total; ++i) {
            mp[i] = static_cast<float>(beta1) * mp[i] + static_cast<float>(1.0 - beta1) * gp[i];
            vp[i] = static_cast<float>(beta2) * vp[i] + static_cast<float>(1.0 - beta2) * gp[i] * gp[i];
            float mhat = mp[i] / bc1_f;
            float vhat = vp[i] / bc2_f;
            pp[i] -= lr_f * mhat / (std::sqrt(vhat) + static_cast<float>(adam_eps));
        }

        ema_loss = ema_init ? 0.98 * ema_loss + 0.02 * loss : loss;
        ema_init = true;
        if ((step + 1) % std::max(1, tc.eval_every) == 0 || step + 1 == tc.steps) {
            stats.loss_history.emplace_back(step + 1, ema_loss);
            last_good = net.params;
            last_good_step = step + 1;
        }
        stats.final_train_loss = loss;
    }
    stats.steps = tc.steps;

    auto [val_loss, val_acc] = eval_windows(val_sampler, std::min(256, tc.batch_size * 4),
                                            derive_seed(tc.seed, 0x76616c));
    stats.val_loss = val_loss;
    stats.val_accuracy = val_acc;
    stats.chance_accuracy = 1.0 / cfg.vocab();
    return stats;
}

Transformer::EvalResult Transformer::evaluate(const TokenCorpus& corpus, int n_windows,
                                              uint64_t seed) const {
    const ModelConfig& cfg = impl_->net.cfg;
    WindowSampler sampler{&corpus, &cfg, {}};
    for (size_t i = 0; i < corpus.episodes.size(); ++i) sampler.episode_ids.push_back(i);
    Rng rng(seed);
    std::vector<std::vector<uint16_t>> seqs;
    std::vector<std::vector<int>> targets;
    for (int i = 0; i < n_windows; ++i) {
        auto [ep, start] = sampler.sample(rng);
        seqs.push_back(build_window(corpus.episodes[ep], start, cfg));
        targets.push_back(window_targets(seqs.back(), cfg.codebook_size));
    }
    auto r = impl_->net.loss_and_grad(seqs, targets, nullptr);
    EvalResult out;
    out.n_targets = r.n_targets;
    out.loss = r.n_targets ? r.loss_sum / static_cast<double>(r.n_targets) : 0.0;
    out.accuracy = r.n_targets ? static_cast<double>(r.n_correct) / static_cast<double>(r.n_targets) : 0.0;
    return out;
}

void Transformer::save(const std::string& path, const json& extra_meta) const {
    const detail::NetT<float>& net = impl_->net;
    ArrayFile f;
    json meta;
    meta["kind"] = "checkpoint";
    meta["version"] = 1;
    meta["config"] = net.cfg.to_json();
    meta["extra"] = extra_meta;
    f.set_meta(meta);
    for (const auto& s : net.layout.slices) {
        // row-major copy for portability
        Eigen::Map<const MatX<float>> w(net.params.data() + s.offset, s.rows, s.cols);
        Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = w;
        f.add_f32(s.name, {s.rows, s.cols}, rm.data());
    }
    f.save(path);
}

Transformer Transformer::load(const std::string& path) {
    ArrayFile f = ArrayFile::load(path);
    json meta = f.meta();
    if (meta.value("kind", "") != "checkpoint")
        throw DataError("not a checkpoint file: " + path);
    ModelConfig cfg = ModelConfig::from_json(meta.at("config"));
    auto impl = std::make_unique<Impl>(cfg, 0);
    detail::NetT<float>& net = impl->net;
    for (const auto& s : net.layout.slices) {
        auto data = f.f32(s.name);
        if (static_cast<int64_t>(data.size()) != s.size())
            throw DataError("checkpoint slice " + s.name + " has wrong size");
        Eigen::Map<MatX<float>> w(net.params.data() + s.offset, s.rows, s.cols);
        w = Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
            data.data(), s.rows, s.cols);
    }
    impl->meta = meta;
    return Transformer(std::move(impl));
}

Transformer make_random_model(const ModelConfig& cfg, uint64_t seed) {
    return Transformer(cfg, seed);
}

double gradient_check(const ModelConfig& cfg, uint64_t seed, int n_probes) {
    detail::NetT<double> net(cfg, seed);
    Rng rng(derive_seed(seed, 0x67726164));

    const int B = 2, T = std::min(cfg.max_seq(), 24);
    std::vector<std::vector<uint16_t>> seqs(B, std::vector<uint16_t>(T));
    std::vector<std::vector<int>> targets(B);
    for (int b = 0; b < B; ++b) {
        for (int t = 0; t < T; ++t)
            seqs[b][t] = static_cast<uint16_t>(rng.uniform_int(cfg.vocab()));
        targets[b] = window_targets(seqs[b], cfg.codebook_size);
    }

    VecX<double> grad = VecX<double>::Zero(net.layout.total);
    auto base = net.loss_and_grad(seqs, targets, &grad);
    if (base.n_targets == 0) throw UsageError("gradient check produced no targets");
    double scale = 1.0 / static_cast<double>(base.n_targets);
    grad *= scale;

    // probe parameters with non-negligible analytic gradient
    std::vector<int64_t> candidates;
    for (int64_t i = 0; i < net.layout.total; ++i)
        if (std::abs(grad[i]) > 1e-8) candidates.push_back(i);
    if (candidates.empty()) throw UsageError("gradient check: all gradients negligible");

    double max_rel = 0.0;
    for (int k = 0; k < n_probes; ++k) {
        int64_t i = candidates[rng.uniform_int(candidates.size())];
        double orig = net.params[i];
        double h = 1e-5 * std::max(1.0, std::abs(orig));
        net.params[i] = orig + h;
        double lp = net.loss_and_grad(seqs, targets, nullptr).loss_sum * scale;
        net.params[i] = orig - h;
        double lm = net.loss_and_grad(seqs, targets, nullptr).loss_sum * scale;
        net.params[i] = orig;
        double numeric = (lp - lm) / (2 * h);
        double denom = std::max({std::abs(numeric), std::abs(grad[i]), 1e-10});
        max_rel = std::max(max_rel, std::abs(numeric - grad[i]) / denom);
    }
    return max_rel;
}

}  // namespace worldlens::wm
