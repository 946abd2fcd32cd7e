#pragma once

// Templated transformer core. Included only by model.cpp; instantiated with
// float for the production model and double for the finite-difference
// gradient check. Activations are row-major (token rows are contiguous);
// parameters live in one flat vector with column-major named slices.

#include <cmath>
#include <cstring>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "worldlens/model.hpp"

namespace worldlens::wm::detail {

template <typename S>
using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <typename S>
using MatR = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

enum class Init { zeros, normal, ones };

struct Slice {
    std::string name;
    int64_t offset = 0;
    int rows = 0, cols = 0;
    Init init = Init::zeros;
    int64_t size() const { return static_cast<int64_t>(rows) * cols; }
};

struct ParamLayout {
    std::vector<Slice> slices;
    std::map<std::string, size_t> index;
    int64_t total = 0;

    void add(const std::string& name, int rows, int cols, Init init) {
        Slice s{name, total, rows, cols, init};
        index[name] = slices.size();
        slices.push_back(s);
        total += s.size();
    }
    const Slice& at(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw UsageError("no parameter slice named " + name);
        return slices[it->second];
    }

    static ParamLayout build(const ModelConfig& cfg) {
        ParamLayout L;
        const int d = cfg.d_model;
        L.add("tok_emb", cfg.vocab(), d, Init::normal);
        L.add("pos_emb", cfg.max_seq(), d, Init::normal);
        for (int b = 0; b < cfg.n_layers; ++b) {
            std::string p = "b" + std::to_string(b) + ".";
            L.add(p + "ln1.g", 1, d, Init::ones);
            L.add(p + "ln1.b", 1, d, Init::zeros);
            L.add(p + "attn.w_qkv", d, 3 * d, Init::normal);
            L.add(p + "attn.b_qkv", 1, 3 * d, Init::zeros);
            L.add(p + "attn.w_o", d, d, Init::normal);
            L.add(p + "attn.b_o", 1, d, Init::zeros);
            L.add(p + "ln2.g", 1, d, Init::ones);
            L.add(p + "ln2.b", 1, d, Init::zeros);
            L.add(p + "mlp.w1", d, cfg.d_ff, Init::normal);
            L.add(p + "mlp.b1", 1, cfg.d_ff, Init::zeros);
            L.add(p + "mlp.w2", cfg.d_ff, d, Init::normal);
            L.add(p + "mlp.b2", 1, d, Init::zeros);
        }
        L.add("lnf.g", 1, d, Init::ones);
        L.add("lnf.b", 1, d, Init::zeros);
        L.add("head.w", d, cfg.vocab(), Init::normal);
        L.add("head.b", 1, cfg.vocab(), Init::zeros);
        return L;
    }
};

constexpr double kLnEps = 1e-5;
constexpr double kInitStd = 0.02;

template <typename S>
struct LnCache {
    MatR<S> xhat;
    VecX<S> inv_std;
};

// y = g * (x - mu) / sqrt(var + eps) + b, rowwise
template <typename S>
MatR<S> layer_norm(const MatR<S>& X, Eigen::Map<const MatX<S>> g, Eigen::Map<const MatX<S>> b,
                   LnCache<S>* cache) {
    VecX<S> mu = X.rowwise().mean();
    MatR<S> xhat = X.colwise() - mu;
    VecX<S> inv = (xhat.array().square().rowwise().mean() + static_cast<S>(kLnEps)).rsqrt().matrix();
    xhat = (xhat.array().colwise() * inv.array()).matrix();
    MatR<S> y = ((xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array()).matrix();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = std::move(inv);
    }
    return y;
}

// returns dX; accumulates dg, db
template <typename S>
MatR<S> layer_norm_backward(const MatR<S>& dY, const LnCache<S>& cache,
                            Eigen::Map<const MatX<S>> g,
                            Eigen::Map<MatX<S>> dg, Eigen::Map<MatX<S>> db) {
    dg.row(0) += (dY.array() * cache.xhat.array()).colwise().sum().matrix();
    db.row(0) += dY.colwise().sum();
    MatR<S> dxhat = (dY.array().rowwise() * g.row(0).array()).matrix();
    VecX<S> m1 = dxhat.rowwise().mean();
    VecX<S> m2 = (dxhat.array() * cache.xhat.array()).rowwise().mean().matrix();
    MatR<S> dX = ((dxhat.colwise() - m1).array() -
                  (cache.xhat.array().colwise() * m2.array())).matrix();
    dX = (dX.array().colwise() * cache.inv_std.array()).matrix();
    return dX;
}

// Causal row softmax (strictly above-diagonal entries are exactly zero:
// masked scores are -inf, exp(-inf) == +0). scores is clobbered; both
// matrices are T x T row-major and fully vectorized per row.
template <typename S>
void causal_softmax_rows(MatR<S>& scores, MatR<S>& probs) {
    const int T = static_cast<int>(scores.rows());
    probs.resize(T, T);
    const S ninf = -std::numeric_limits<S>::infinity();
    for (int i = 0; i < T; ++i) {
        S* srow = scores.data() + static_cast<int64_t>(i) * T;
        S* prow = probs.data() + static_cast<int64_t>(i) * T;
        std::fill(srow + i + 1, srow + T, ninf);
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> sa(srow, T);
        Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> pa(prow, T);
        S m = sa.head(i + 1).maxCoeff();
        pa = (sa - m).exp();
        pa *= S(1) / pa.sum();
    }
}

template <typename S>
struct BlockCache {
    LnCache<S> ln1;
    MatR<S> ln1_out;
    MatR<S> qkv;
    std::vector<MatR<S>> probs;  // per (seq, head)
    MatR<S> z;
    LnCache<S> ln2;
    MatR<S> ln2_out;
    MatR<S> relu_out;
};

template <typename S>
struct NetT {
    ModelConfig cfg;
    ParamLayout layout;
    VecX<S> params;

    NetT(const ModelConfig& c, uint64_t seed) : cfg(c), layout(ParamLayout::build(c)) {
        cfg.validate();
        params.resize(layout.total);
        Rng rng(seed);
        for (const Slice& s : layout.slices) {
            S* ptr = params.data() + s.offset;
            switch (s.init) {
                case Init::zeros:
                    for (int64_t i = 0; i < s.size(); ++i) ptr[i] = S(0);
                    break;
                case Init::ones:
                    for (int64_t i = 0; i < s.size(); ++i) ptr[i] = S(1);
                    break;
                case Init::normal:
                    for (int64_t i = 0; i < s.size(); ++i)
                        ptr[i] = static_cast<S>(rng.normal() * kInitStd);
                    break;
            }
        }
    }

    Eigen::Map<const MatX<S>> p(const std::string& name) const {
        const Slice& s = layout.at(name);
        return Eigen::Map<const MatX<S>>(params.data() + s.offset, s.rows, s.cols);
    }
    static Eigen::Map<MatX<S>> view(VecX<S>& v, const Slice& s) {
        return Eigen::Map<MatX<S>>(v.data() + s.offset, s.rows, s.cols);
    }
    Eigen::Map<MatX<S>> g(VecX<S>& grad, const std::string& name) const {
        return view(grad, layout.at(name));
    }

    void check_ids(std::span<const uint16_t> ids) const {
        if (static_cast<int>(ids.size()) > cfg.max_seq())
            throw ShapeError("sequence length " + std::to_string(ids.size()) +
                             " exceeds model maximum " + std::to_string(cfg.max_seq()));
        if (ids.empty()) throw ShapeError("empty token sequence");
        for (uint16_t id : ids)
            if (id >= cfg.vocab())
                throw DataError("token id " + std::to_string(id) + " out of vocabulary " +
                                std::to_string(cfg.vocab()));
    }

    // Single-sequence forward with optional trace / patch / embedding override.
    MatR<S> forward_single(std::span<const uint16_t> ids, const EvalOptions& opts,
                           std::vector<Eigen::MatrixXf>* hidden_out,
                           std::vector<std::vector<Eigen::MatrixXf>>* attn_out) const {
        check_ids(ids);
        const int T = static_cast<int>(ids.size());
        const int d = cfg.d_model, H = cfg.n_heads, dh = d / H;
        const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

        auto tokE = p("tok_emb");
        auto posE = p("pos_emb");

        if (opts.patch) {
            const auto& ps = *opts.patch;
            if (ps.layer < 0 || ps.layer > cfg.n_layers)
                throw ShapeError("patch layer " + std::to_string(ps.layer) + " out of range");
            if (static_cast<int>(ps.positions.size()) != ps.delta.rows() || ps.delta.cols() != d)
                throw ShapeError("patch delta shape does not match positions/d_model");
            for (int pos : ps.positions)
                if (pos < 0 || pos >= T) throw ShapeError("patch position out of range");
        }
        if (opts.embed_override) {
            const auto& ov = *opts.embed_override;
            if (ov.position < 0 || ov.position >= T)
                throw ShapeError("embedding override position out of range");
            if (!ov.zero && ov.value.size() != d)
                throw ShapeError("embedding override vector has wrong width");
        }

        MatR<S> X(T, d);
        for (int t = 0; t < T; ++t)
            X.row(t) = tokE.row(ids[t]) + posE.row(t);
        if (opts.embed_override) {
            const auto& ov = *opts.embed_override;
            if (ov.zero) X.row(ov.position) = posE.row(ov.position);
            else X.row(ov.position) = ov.value.transpose().template cast<S>() + posE.row(ov.position);
        }
        auto apply_patch = [&](int layer) {
            if (!opts.patch || opts.patch->layer != layer) return;
            const auto& ps = *opts.patch;
            for (size_t i = 0; i < ps.positions.size(); ++i)
                X.row(ps.positions[i]) += ps.delta.row(static_cast<int>(i)).template cast<S>();
        };
        apply_patch(0);
        if (hidden_out) hidden_out->push_back(X.template cast<float>());
        if (attn_out) attn_out->assign(cfg.n_layers, {});

        MatR<S> scores(T, T), probs(T, T), Z(T, d);
        for (int b = 0; b < cfg.n_layers; ++b) {
            std::string pre = "b" + std::to_string(b) + ".";
            MatR<S> A = layer_norm<S>(X, p(pre + "ln1.g"), p(pre + "ln1.b"), nullptr);
            MatR<S> QKV(T, 3 * d);
            QKV.noalias() = A * p(pre + "attn.w_qkv");
            QKV.rowwise() += p(pre + "attn.b_qkv").row(0);

            for (int h = 0; h < H; ++h) {
                auto Q = QKV.block(0, h * dh, T, dh);
                auto K = QKV.block(0, d + h * dh, T, dh);
                auto V = QKV.block(0, 2 * d + h * dh, T, dh);
                scores.noalias() = Q * K.transpose();
                scores *= inv_sqrt_dh;
                causal_softmax_rows(scores, probs);
                if (attn_out) (*attn_out)[b].push_back(probs.template cast<float>());
                Z.block(0, h * dh, T, dh).noalias() = probs * V;
            }
            MatR<S> attn(T, d);
            attn.noalias() = Z * p(pre + "attn.w_o");
            attn.rowwise() += p(pre + "attn.b_o").row(0);
            X += attn;

            MatR<S> Bn = layer_norm<S>(X, p(pre + "ln2.g"), p(pre + "ln2.b"), nullptr);
            MatR<S> Hm(T, cfg.d_ff);
            Hm.noalias() = Bn * p(pre + "mlp.w1");
            Hm.rowwise() += p(pre + "mlp.b1").row(0);
            Hm = Hm.cwiseMax(S(0));
            MatR<S> M(T, d);
            M.noalias() = Hm * p(pre + "mlp.w2");
            M.rowwise() += p(pre + "mlp.b2").row(0);
            X += M;

            apply_patch(b + 1);
            if (hidden_out) hidden_out->push_back(X.template cast<float>());
        }

        MatR<S> Xf = layer_norm<S>(X, p("lnf.g"), p("lnf.b"), nullptr);
        MatR<S> logits(T, cfg.vocab());
        logits.noalias() = Xf * p("head.w");
        logits.rowwise() += p("head.b").row(0);
        return logits;
    }

    struct BatchResult {
        double loss_sum = 0.0;
        int64_t n_targets = 0;
        int64_t n_correct = 0;
    };

    // Batched forward (+ backward when grad != nullptr) over same-length
    // sequences. targets[i][t] == -1 means position t contributes no loss.
    // Gradients are accumulated unscaled (sum over target positions).
    BatchResult loss_and_grad(const std::vector<std::vector<uint16_t>>& seqs,
                              const std::vector<std::vector<int>>& targets,
                              VecX<S>* grad) const {
        const int B = static_cast<int>(seqs.size());
        if (B == 0) return {};
        const int T = static_cast<int>(seqs[0].size());
        const int R = B * T;
        const int d = cfg.d_model, H = cfg.n_heads, dh = d / H, V = cfg.vocab();
        const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));

        for (const auto& s : seqs) {
            if (static_cast<int>(s.size()) != T) throw ShapeError("ragged batch");
            check_ids(s);
        }

        auto tokE = p("tok_emb");
        auto posE = p("pos_emb");

        MatR<S> X(R, d);
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t)
                X.row(b * T + t) = tokE.row(seqs[b][t]) + posE.row(t);

        std::vector<BlockCache<S>> caches(grad ? cfg.n_layers : 0);
        MatR<S> scores(T, T), probs(T, T);
        for (int l = 0; l < cfg.n_layers; ++l) {
            std::string pre = "b" + std::to_string(l) + ".";
            BlockCache<S>* C = grad ? &caches[l] : nullptr;
            MatR<S> A = layer_norm<S>(X, p(pre + "ln1.g"), p(pre + "ln1.b"), C ? &C->ln1 : nullptr);
            MatR<S> QKV(R, 3 * d);
            QKV.noalias() = A * p(pre + "attn.w_qkv");
            QKV.rowwise() += p(pre + "attn.b_qkv").row(0);
            if (C) C->ln1_out = std::move(A);

            MatR<S> Z(R, d);
            if (C) C->probs.resize(static_cast<size_t>(B) * H);
            for (int b = 0; b < B; ++b) {
                for (int h = 0; h < H; ++h) {
                    auto Q = QKV.block(b * T, h * dh, T, dh);
                    auto K = QKV.block(b * T, d + h * dh, T, dh);
                    auto Vv = QKV.block(b * T, 2 * d + h * dh, T, dh);
                    scores.noalias() = Q * K.transpose();
                    scores *= inv_sqrt_dh;
                    MatR<S>& pdst = C ? C->probs[static_cast<size_t>(b) * H + h] : probs;
                    causal_softmax_rows(scores, pdst);
                    Z.block(b * T, h * dh, T, dh).noalias() = pdst * Vv;
                }
            }
            MatR<S> attn(R, d);
            attn.noalias() = Z * p(pre + "attn.w_o");
            attn.rowwise() += p(pre + "attn.b_o").row(0);
            X += attn;
            if (C) C->qkv = std::move(QKV);
            if (C) C->z = std::move(Z);

            MatR<S> Bn = layer_norm<S>(X, p(pre + "ln2.g"), p(pre + "ln2.b"), C ? &C->ln2 : nullptr);
            MatR<S> Hm(R, cfg.d_ff);
            Hm.noalias() = Bn * p(pre + "mlp.w1");
            Hm.rowwise() += p(pre + "mlp.b1").row(0);
            Hm = Hm.cwiseMax(S(0));
            MatR<S> M(R, d);
            M.noalias() = Hm * p(pre + "mlp.w2");
            M.rowwise() += p(pre + "mlp.b2").row(0);
            X += M;
            if (C) {
                C->ln2_out = std::move(Bn);
                C->relu_out = std::move(Hm);
            }
        }

        LnCache<S> lnf_cache;
        MatR<S> Xf = layer_norm<S>(X, p("lnf.g"), p("lnf.b"), grad ? &lnf_cache : nullptr);
        MatR<S> logits(R, V);
        logits.noalias() = Xf * p("head.w");
        logits.rowwise() += p("head.b").row(0);

        BatchResult res;
        MatR<S> dlogits;
        if (grad) dlogits.setZero(R, V);
        for (int b = 0; b < B; ++b) {
            for (int t = 0; t < T; ++t) {
                int y = targets[b][t];
                if (y < 0) continue;
                int r = b * T + t;
                const S* row = logits.data() + static_cast<int64_t>(r) * V;
                Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> la(row, V);
                S m = la.maxCoeff();
                S sum;
                if (grad) {
                    S* drow = dlogits.data() + static_cast<int64_t>(r) * V;
                    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> da(drow, V);
                    da = (la - m).exp();
                    sum = da.sum();
                    da /= sum;
                    da[y] -= S(1);
                } else {
                    sum = (la - m).exp().sum();
                }
                S logp = row[y] - m - std::log(sum);
                res.loss_sum -= static_cast<double>(logp);
                res.n_targets += 1;
                Eigen::Index argmax = 0;
                la.maxCoeff(&argmax);
                if (static_cast<int>(argmax) == y) res.n_correct += 1;
            }
        }
        if (!grad) return res;

        VecX<S>& G = *grad;
        if (G.size() != layout.total) G.setZero(layout.total);

        g(G, "head.b").row(0) += dlogits.colwise().sum();
        g(G, "head.w") += Xf.transpose() * dlogits;
        MatR<S> dXf = dlogits * p("head.w").transpose();
        MatR<S> dX = layer_norm_backward<S>(dXf, lnf_cache, p("lnf.g"), g(G, "lnf.g"),
                                            g(G, "lnf.b"));

        MatR<S> dP(T, T), dS(T, T);
        VecX<S> rowdot(T);
        for (int l = cfg.n_layers - 1; l >= 0; --l) {
            std::string pre = "b" + std::to_string(l) + ".";
            BlockCache<S>& C = caches[l];

            // MLP backward; residual flows through both branches
            g(G, pre + "mlp.b2").row(0) += dX.colwise().sum();
            g(G, pre + "mlp.w2") += C.relu_out.transpose() * dX;
            MatR<S> dH = dX * p(pre + "mlp.w2").transpose();
            dH = (C.relu_out.array() > S(0)).select(dH, S(0));
            g(G, pre + "mlp.b1").row(0) += dH.colwise().sum();
            g(G, pre + "mlp.w1") += C.ln2_out.transpose() * dH;
            MatR<S> dBn = dH * p(pre + "mlp.w1").transpose();
            dX += layer_norm_backward<S>(dBn, C.ln2, p(pre + "ln2.g"), g(G, pre + "ln2.g"),
                                         g(G, pre + "ln2.b"));

            // attention backward
            g(G, pre + "attn.b_o").row(0) += dX.colwise().sum();
            g(G, pre + "attn.w_o") += C.z.transpose() * dX;
            MatR<S> dZ = dX * p(pre + "attn.w_o").transpose();

            MatR<S> dQKV(R, 3 * d);  // every block is overwritten below
            for (int b = 0; b < B; ++b) {
                for (int h = 0; h < H; ++h) {
                    const MatR<S>& P = C.probs[static_cast<size_t>(b) * H + h];
                    auto dZ_h = dZ.block(b * T, h * dh, T, dh);
                    auto K = C.qkv.block(b * T, d + h * dh, T, dh);
                    auto Q = C.qkv.block(b * T, h * dh, T, dh);
                    auto Vv = C.qkv.block(b * T, 2 * d + h * dh, T, dh);

                    dP.noalias() = dZ_h * Vv.transpose();
                    dQKV.block(b * T, 2 * d + h * dh, T, dh).noalias() = P.transpose() * dZ_h;
                    rowdot = (dP.array() * P.array()).rowwise().sum().matrix();
                    dS = (P.array() * (dP.colwise() - rowdot).array()).matrix();
                    dS *= inv_sqrt_dh;
                    dQKV.block(b * T, h * dh, T, dh).noalias() = dS * K;
                    dQKV.block(b * T, d + h * dh, T, dh).noalias() = dS.transpose() * Q;
                }
            }
            g(G, pre + "attn.b_qkv").row(0) += dQKV.colwise().sum();
            g(G, pre + "attn.w_qkv") += C.ln1_out.transpose() * dQKV;
            MatR<S> dA = dQKV * p(pre + "attn.w_qkv").transpose();
            dX += layer_norm_backward<S>(dA, C.ln1, p(pre + "ln1.g"), g(G, pre + "ln1.g"),
                                         g(G, pre + "ln1.b"));
        }

        auto dTok = g(G, "tok_emb");
        auto dPos = g(G, "pos_emb");
        for (int b = 0; b < B; ++b)
            for (int t = 0; t < T; ++t) {
                dTok.row(seqs[b][t]) += dX.row(b * T + t);
                dPos.row(t) += dX.row(b * T + t);
            }
        return res;
    }
};

}  // namespace worldlens::wm::detail
