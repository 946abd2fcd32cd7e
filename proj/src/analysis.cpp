#include "worldlens/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

#include "worldlens/intervention.hpp"

namespace worldlens::analysis {

using json = nlohmann::json;

double attention_entropy(const Eigen::VectorXd& row) {
    double sum = 0.0;
    for (int i = 0; i < row.size(); ++i) {
        if (row[i] < -1e-12)
            throw DataError("attention entropy: negative probability " + std::to_string(row[i]));
        sum += row[i];
    }
    if (std::abs(sum - 1.0) > 1e-5)
        throw DataError("attention entropy: row sums to " + std::to_string(sum) + ", not 1");
    double h = 0.0;
    for (int i = 0; i < row.size(); ++i)
        if (row[i] > 0.0) h -= row[i] * std::log(row[i]);
    return h;
}

namespace {

std::vector<double> ranks_with_ties(const std::vector<double>& xs) {
    const size_t n = xs.size();
    std::vector<size_t> order(n);
    for (size_t i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return xs[a] < xs[b]; });
    std::vector<double> ranks(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && xs[order[j + 1]] == xs[order[i]]) ++j;
        double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double pearson(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("pearson: length mismatch");
    const size_t n = xs.size();
    if (n < 2) throw UsageError("pearson needs at least 2 samples");
    double mx = 0, my = 0;
    for (size_t i = 0; i < n; ++i) {
        mx += xs[i];
        my += ys[i];
    }
    mx /= n;
    my /= n;
    double sxx = 0, syy = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    if (sxx <= 0 || syy <= 0)
        throw NumericalError("pearson undefined: zero variance input");
    return sxy / std::sqrt(sxx * syy);
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size()) throw ShapeError("spearman: length mismatch");
    if (xs.size() < 2) throw UsageError("spearman needs at least 2 samples");
    return pearson(ranks_with_ties(xs), ranks_with_ties(ys));
}

std::vector<ContextSample> sample_contexts(env::Variant variant, const tok::Codebook& cb,
                                           const wm::ModelConfig& model_cfg, int n,
                                           uint64_t master_seed, double policy_eps,
                                           int episode_len, bool stratify) {
    const int ctx = model_cfg.context_frames;
    const int per_ep = 16;
    const int n_eps = std::max(1, (n + per_ep - 1) / per_ep);

    std::vector<rollout::Episode> episodes(n_eps);
    std::vector<wm::TokenizedEpisode> tokenized(n_eps);
    parallel_for(n_eps, [&](size_t i) {
        episodes[i] = rollout::run_indexed_episode(variant, master_seed, static_cast<int>(i),
                                                   episode_len, policy_eps);
        tokenized[i] = rollout::tokenize_episode(episodes[i], cb);
    });

    struct Candidate {
        int ep, t, cell;
    };
    std::vector<Candidate> pool;
    for (int e = 0; e < n_eps; ++e) {
        for (int t = ctx - 1; t < episode_len; ++t) {
            const auto& st = episodes[e].states[t];
            int r = std::clamp(static_cast<int>((st.ball_y + 1.0f) / tok::kPatch), 0, tok::kGrid - 1);
            int c = std::clamp(static_cast<int>((st.ball_x + 1.0f) / tok::kPatch), 0, tok::kGrid - 1);
            pool.push_back({e, t, r * tok::kGrid + c});
        }
    }

    Rng rng(derive_seed(master_seed, 0xc712a));
    std::vector<Candidate> chosen;
    if (pool.empty()) throw UsageError("no contexts available");
    if (!stratify) {
        for (int i = 0; i < n; ++i) chosen.push_back(pool[rng.uniform_int(pool.size())]);
    } else {
        std::map<int, std::vector<Candidate>> buckets;
        for (const auto& cand : pool) buckets[cand.cell].push_back(cand);
        while (static_cast<int>(chosen.size()) < n) {
            bool any = false;
            for (auto& [cell, cands] : buckets) {
                if (cands.empty()) continue;
                any = true;
                size_t pick = rng.uniform_int(cands.size());
                chosen.push_back(cands[pick]);
                cands.erase(cands.begin() + static_cast<long>(pick));
                if (static_cast<int>(chosen.size()) >= n) break;
            }
            if (!any) break;  // fewer candidates than requested
        }
    }

    std::vector<ContextSample> out;
    out.reserve(chosen.size());
    for (const auto& cand : chosen) {
        ContextSample cs;
        cs.ids = wm::build_context(tokenized[cand.ep], cand.t, model_cfg);
        cs.state = episodes[cand.ep].states[cand.t];
        out.push_back(std::move(cs));
    }
    return out;
}

double AttentionStats::selectivity_score() const {
    return selectivity.maxCoeff() - 1.0 / 16.0;
}

std::vector<AttentionStats> head_statistics(const wm::Transformer& model,
                                            const std::vector<ContextSample>& contexts) {
    const wm::ModelConfig& cfg = model.config();
    if (contexts.empty()) throw UsageError("head_statistics needs at least one context");
    if (cfg.context_frames < 2)
        throw UsageError("head_statistics needs context_frames >= 2 for the key window");

    const int tpf = cfg.tokens_per_frame();
    const int q0 = (cfg.context_frames - 1) * tpf;  // final-frame queries
    const int k0 = (cfg.context_frames - 2) * tpf;  // previous-frame keys
    const int L = cfg.n_layers, H = cfg.n_heads;

    std::vector<AttentionStats> stats(static_cast<size_t>(L) * H);
    for (int l = 0; l < L; ++l)
        for (int h = 0; h < H; ++h) {
            auto& s = stats[static_cast<size_t>(l) * H + h];
            s.layer = l;
            s.head = h;
            s.selectivity.setZero();
        }

    std::vector<std::vector<AttentionStats>> partial(contexts.size());
    parallel_for(contexts.size(), [&](size_t ci) {
        auto& local = partial[ci];
        local = stats;  // zeroed copies
        wm::TraceRecord tr = model.forward_with_trace(contexts[ci].ids, /*want_attention=*/true);
        for (int l = 0; l < L; ++l) {
            for (int h = 0; h < H; ++h) {
                auto& st = local[static_cast<size_t>(l) * H + h];
                const Eigen::MatrixXf& P = tr.attention[l][h];
                for (int q = q0; q < q0 + tpf; ++q) {
                    Eigen::VectorXd window =
                        P.row(q).segment(k0, tpf).transpose().cast<double>();
                    double wsum = window.sum();
                    if (wsum <= 0) continue;
                    Eigen::VectorXd wn = window / wsum;
                    double ent = 0.0;
                    for (int i = 0; i < wn.size(); ++i)
                        if (wn[i] > 0) ent -= wn[i] * std::log(wn[i]);
                    st.mean_entropy += ent;

                    double spatial_sum = window.head(16).sum();
                    if (spatial_sum > 0) {
                        Eigen::VectorXd sp = window.head(16) / spatial_sum;
                        for (int p = 0; p < 16; ++p)
                            st.selectivity(p / tok::kGrid, p % tok::kGrid) += sp[p];
                    }
                    st.n_samples += 1;
                }
            }
        }
    });

    for (const auto& local : partial)
        for (size_t i = 0; i < stats.size(); ++i) {
            stats[i].mean_entropy += local[i].mean_entropy;
            stats[i].selectivity += local[i].selectivity;
            stats[i].n_samples += local[i].n_samples;
        }
    for (auto& s : stats) {
        if (s.n_samples > 0) {
            s.mean_entropy /= static_cast<double>(s.n_samples);
            s.selectivity /= static_cast<double>(s.n_samples);
        }
    }
    return stats;
}

std::vector<AttentionStats> top_selective_heads(const std::vector<AttentionStats>& stats, int k) {
    if (stats.empty()) throw UsageError("top_selective_heads: empty stats");
    if (k > static_cast<int>(stats.size())) {
        std::cerr << "warning: requested " << k << " heads, only " << stats.size()
                  << " available; clamping\n";
        k = static_cast<int>(stats.size());
    }
    std::vector<size_t> order(stats.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&stats](size_t ia, size_t ib) {
        const AttentionStats& a = stats[ia];
        const AttentionStats& b = stats[ib];
        double sa = a.selectivity_score(), sb = b.selectivity_score();
        if (sa != sb) return sa > sb;
        if (a.layer != b.layer) return a.layer < b.layer;
        return a.head < b.head;
    });
    std::vector<AttentionStats> sorted;
    sorted.reserve(k);
    for (int i = 0; i < k; ++i) sorted.push_back(stats[order[i]]);
    return sorted;
}

TokenStats compute_token_stats(const wm::TokenCorpus& corpus, const wm::Transformer& model) {
    const int K = corpus.codebook_size;
    TokenStats ts;
    ts.freq = Eigen::VectorXd::Zero(K);
    for (const auto& ep : corpus.episodes)
        for (const auto& g : ep.frames)
            for (uint16_t id : g.ids) {
                if (id >= K) throw DataError("corpus token id out of codebook range");
                ts.freq[id] += 1.0;
                ts.n_tokens += 1;
            }
    if (ts.n_tokens == 0) throw UsageError("empty corpus for token stats");
    ts.freq /= static_cast<double>(ts.n_tokens);
    ts.mean_embedding = Eigen::VectorXf::Zero(model.config().d_model);
    for (int k = 0; k < K; ++k)
        ts.mean_embedding += static_cast<float>(ts.freq[k]) * model.token_embedding(k);
    return ts;
}

AblatedContext ablate_token(const std::vector<uint16_t>& context, int position,
                            const std::string& baseline, const TokenStats& stats,
                            const wm::ModelConfig& cfg, uint64_t seed) {
    if (position == 16)
        throw UsageError("cannot ablate the action slot");
    if (position < 0 || position >= 16)
        throw UsageError("ablation position must be a spatial slot in [0, 16)");
    if (static_cast<int>(context.size()) != cfg.context_len())
        throw ShapeError("ablation context has wrong length");

    int global = (cfg.context_frames - 1) * cfg.tokens_per_frame() + position;
    AblatedContext out;
    out.ids = context;
    out.position = position;
    out.baseline = baseline;
    out.original_id = context[static_cast<size_t>(global)];

    if (baseline == "zero") {
        out.embed_override = wm::EmbedOverride{global, /*zero=*/true, {}};
    } else if (baseline == "mean") {
        out.embed_override = wm::EmbedOverride{global, /*zero=*/false, stats.mean_embedding};
    } else if (baseline == "random") {
        Rng rng(seed);
        out.replacement_id = static_cast<uint16_t>(rng.uniform_int(cfg.codebook_size));
        out.ids[static_cast<size_t>(global)] = out.replacement_id;
    } else {
        throw ConfigError("unknown ablation baseline '" + baseline + "'");
    }
    return out;
}

AblationOutput ablation_sweep(const wm::Transformer& model,
                              const std::vector<ContextSample>& contexts,
                              const TokenStats& stats, uint64_t seed) {
    const wm::ModelConfig& cfg = model.config();
    const std::vector<std::string> baselines = {"zero", "mean", "random"};
    const int n_ctx = static_cast<int>(contexts.size());
    if (n_ctx == 0) throw UsageError("ablation sweep needs contexts");

    // per-context, per-(position, baseline) KL and change rate
    std::vector<std::vector<double>> kl(contexts.size(), std::vector<double>(48, 0.0));
    std::vector<std::vector<double>> kl_all(contexts.size(), std::vector<double>(48, 0.0));
    std::vector<std::vector<double>> rate(contexts.size(), std::vector<double>(48, 0.0));
    std::vector<double> dist(contexts.size() * 16, 0.0);

    parallel_for(contexts.size(), [&](size_t ci) {
        const auto& cs = contexts[ci];
        wm::NextFramePrediction base = model.predict_next_frame(cs.ids);
        wm::NextFramePrediction base_forced = model.eval_next_frame_forced(cs.ids, base.grid);

        double ball_cx = cs.state.ball_x + env::kBallSize / 2.0;
        double ball_cy = cs.state.ball_y + env::kBallSize / 2.0;

        for (int p = 0; p < 16; ++p) {
            double px = (p % tok::kGrid) * tok::kPatch + tok::kPatch / 2.0;
            double py = (p / tok::kGrid) * tok::kPatch + tok::kPatch / 2.0;
            dist[ci * 16 + p] = std::hypot(px - ball_cx, py - ball_cy);

            for (size_t bi = 0; bi < baselines.size(); ++bi) {
                AblatedContext ab = ablate_token(cs.ids, p, baselines[bi], stats, cfg,
                                                 derive_seed(seed, ci * 16 + p));
                wm::EvalOptions opts;
                if (ab.embed_override) opts.embed_override = ab.embed_override;
                wm::NextFramePrediction mod =
                    model.eval_next_frame_forced(ab.ids, base.grid, opts);
                double k = 0.0;
                for (int j = 0; j < 16; ++j)
                    k += intervention::kl_divergence(base_forced.dists.row(j).transpose().cast<double>(),
                                                     mod.dists.row(j).transpose().cast<double>());
                // primary measurement: disruption of the ablated position's
                // own next-frame prediction; the all-position mean is kept
                // as the alternative aggregation. Float-precision inputs can
                // give -1e-8 on near-identical distributions; KL is
                // non-negative, so clamp the quantization noise.
                kl[ci][p * 3 + bi] = std::max(0.0, intervention::kl_divergence(
                    base_forced.dists.row(p).transpose().cast<double>(),
                    mod.dists.row(p).transpose().cast<double>()));
                kl_all[ci][p * 3 + bi] = std::max(0.0, k / 16.0);
                rate[ci][p * 3 + bi] =
                    intervention::token_change_rate(base_forced.logits, mod.logits);
            }
        }
    });

    AblationOutput out;
    for (int p = 0; p < 16; ++p) {
        for (size_t bi = 0; bi < baselines.size(); ++bi) {
            AblationResult r;
            r.position = p;
            r.baseline = baselines[bi];
            for (size_t ci = 0; ci < contexts.size(); ++ci)
                r.per_context_kl.push_back(kl[ci][p * 3 + bi]);
            double mean = 0, rt = 0, all = 0;
            for (size_t ci = 0; ci < contexts.size(); ++ci) {
                mean += r.per_context_kl[ci];
                rt += rate[ci][p * 3 + bi];
                all += kl_all[ci][p * 3 + bi];
            }
            mean /= n_ctx;
            rt /= n_ctx;
            r.kl_mean_allpos = all / n_ctx;
            double var = 0;
            for (double v : r.per_context_kl) var += (v - mean) * (v - mean);
            r.kl_mean = mean;
            r.kl_std = std::sqrt(var / n_ctx);
            r.change_rate = rt;
            out.results.push_back(std::move(r));
        }
    }

    auto kl_of = [&](const std::string& baseline) {
        std::vector<double> v(16, 0.0);
        for (const auto& r : out.results)
            if (r.baseline == baseline) v[r.position] = r.kl_mean;
        return v;
    };
    std::vector<double> kz = kl_of("zero"), km = kl_of("mean"), kr = kl_of("random");

    ConsistencyStat cst;
    cst.rho_zero_mean = spearman(kz, km);
    cst.rho_zero_random = spearman(kz, kr);
    cst.rho_mean_random = spearman(km, kr);
    cst.position_kl.resize(16);
    cst.position_distance.resize(16);
    for (int p = 0; p < 16; ++p) {
        cst.position_kl[p] = (kz[p] + km[p] + kr[p]) / 3.0;
        double d = 0;
        for (size_t ci = 0; ci < contexts.size(); ++ci) d += dist[ci * 16 + p];
        cst.position_distance[p] = d / n_ctx;
    }
    cst.ball_distance_r = pearson(cst.position_kl, cst.position_distance);
    out.consistency = cst;
    return out;
}

std::string attention_to_csv(const std::vector<AttentionStats>& stats) {
    std::ostringstream os;
    os << "layer,head,mean_entropy,selectivity_score,n_samples\n";
    char buf[64];
    for (const auto& s : stats) {
        os << s.layer << ',' << s.head << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", s.mean_entropy);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", s.selectivity_score());
        os << buf << ',' << s.n_samples << '\n';
    }
    return os.str();
}

json attention_to_json(const std::vector<AttentionStats>& stats) {
    json out = json::array();
    for (const auto& s : stats) {
        json j;
        j["layer"] = s.layer;
        j["head"] = s.head;
        j["mean_entropy"] = s.mean_entropy;
        j["selectivity_score"] = s.selectivity_score();
        j["n_samples"] = s.n_samples;
        json map = json::array();
        for (int r = 0; r < 4; ++r) {
            json row = json::array();
            for (int c = 0; c < 4; ++c) row.push_back(s.selectivity(r, c));
            map.push_back(row);
        }
        j["selectivity_map"] = map;
        out.push_back(j);
    }
    return out;
}

std::string ablation_to_csv(const AblationOutput& out) {
    std::ostringstream os;
    os << "position,baseline,kl_mean,kl_std,kl_mean_allpos,change_rate\n";
    char buf[64];
    for (const auto& r : out.results) {
        os << r.position << ',' << r.baseline << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.kl_mean);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.kl_std);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.kl_mean_allpos);
        os << buf << ',';
        std::snprintf(buf, sizeof(buf), "%.9g", r.change_rate);
        os << buf << '\n';
    }
    return os.str();
}

json ablation_to_json(const AblationOutput& out) {
    json j;
    j["rho_zero_mean"] = out.consistency.rho_zero_mean;
    j["rho_zero_random"] = out.consistency.rho_zero_random;
    j["rho_mean_random"] = out.consistency.rho_mean_random;
    j["ball_distance_r"] = out.consistency.ball_distance_r;
    j["position_kl"] = out.consistency.position_kl;
    j["position_distance"] = out.consistency.position_distance;
    json res = json::array();
    for (const auto& r : out.results) {
        res.push_back(json{{"position", r.position},
                           {"baseline", r.baseline},
                           {"kl_mean", r.kl_mean},
                           {"kl_std", r.kl_std},
                           {"kl_mean_allpos", r.kl_mean_allpos},
                           {"change_rate", r.change_rate}});
    }
    j["results"] = res;
    return j;
}

}  // namespace worldlens::analysis
