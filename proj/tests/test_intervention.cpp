#include <doctest.h>

#include <cmath>

#include "worldlens/intervention.hpp"

using namespace worldlens;
using namespace worldlens::intervention;

namespace {

struct Rig {
    tok::Codebook cb;
    wm::ModelConfig mc;
    wm::Transformer model;
    extraction::ActivationDataset ds;

    Rig() : cb(make_codebook()), mc(make_config()), model(mc, 21), ds(make_dataset()) {}

    static tok::Codebook make_codebook() {
        std::vector<env::Frame> frames;
        auto ep = rollout::run_indexed_episode(env::Variant::bricks, 60, 0, 64, 0.3);
        auto fr = rollout::render_episode(ep);
        frames.insert(frames.end(), fr.begin(), fr.end());
        return tok::fit_codebook(frames, 16, 3);
    }
    static wm::ModelConfig make_config() {
        wm::ModelConfig mc;
        mc.n_layers = 2;
        mc.n_heads = 2;
        mc.d_model = 32;
        mc.d_ff = 64;
        mc.codebook_size = 16;
        return mc;
    }
    extraction::ActivationDataset make_dataset() {
        extraction::ExtractionConfig ec;
        ec.n_frames = 30;
        ec.episode_len = 20;
        ec.policy_seed = 61;
        return extraction::collect(model, cb, env::Variant::bricks, ec);
    }
};

const Rig& rig() {
    static Rig r;
    return r;
}

}  // namespace

TEST_CASE("kl divergence worked examples") {
    Eigen::VectorXd p(2), q(2);
    p << 0.5, 0.5;
    q << 0.25, 0.75;
    double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    CHECK(kl_divergence(p, q) == doctest::Approx(expected).epsilon(1e-12));
    CHECK(kl_divergence(p, q) == doctest::Approx(0.1438).epsilon(1e-3));

    Eigen::VectorXd h(2), u(2);
    h << 1.0, 0.0;
    u << 0.5, 0.5;
    CHECK(kl_divergence(h, u) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(kl_divergence(p, p) == 0.0);  // exact
}

TEST_CASE("kl divergence is non-negative on random distribution pairs") {
    Rng rng(40);
    for (int i = 0; i < 1000; ++i) {
        int n = 2 + static_cast<int>(rng.uniform_int(30));
        Eigen::VectorXd p(n), q(n);
        for (int j = 0; j < n; ++j) {
            p[j] = rng.uniform() + 1e-6;
            q[j] = rng.uniform() + 1e-6;
        }
        p /= p.sum();
        q /= q.sum();
        CHECK(kl_divergence(p, q) >= 0.0);
    }
}

TEST_CASE("kl divergence rejects invalid inputs") {
    Eigen::VectorXd p(2), q(3), neg(2), unnorm(2);
    p << 0.5, 0.5;
    q << 0.2, 0.3, 0.5;
    neg << 1.5, -0.5;
    unnorm << 0.7, 0.7;
    CHECK_THROWS_AS(kl_divergence(p, q), ShapeError);
    CHECK_THROWS_AS(kl_divergence(neg, p), DataError);
    CHECK_THROWS_AS(kl_divergence(p, unnorm), DataError);
    CHECK_THROWS_AS(kl_divergence(unnorm, p), DataError);
}

TEST_CASE("token change rate counts argmax flips") {
    Eigen::MatrixXf a(4, 3);
    a << 1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 0, 0;
    CHECK(token_change_rate(a, a) == 0.0);
    Eigen::MatrixXf b = a;
    b.row(0) << 0, 5, 0;
    b.row(2) << 9, 0, 0;
    CHECK(token_change_rate(a, b) == doctest::Approx(0.5));
    Eigen::MatrixXf flipped(4, 3);
    flipped << 0, 9, 0, 0, 0, 9, 9, 0, 0, 0, 9, 0;
    CHECK(token_change_rate(a, flipped) == 1.0);
    CHECK_THROWS_AS(token_change_rate(a, a.topRows(2)), ShapeError);
}

TEST_CASE("patch_hidden shifts along a unit direction") {
    Rng rng(9);
    Eigen::MatrixXf h(4, 3);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) h(i, j) = static_cast<float>(rng.normal());
    Eigen::VectorXd w(12);
    for (int i = 0; i < 12; ++i) w[i] = rng.normal();
    w /= w.norm();

    Eigen::MatrixXf same = patch_hidden(h, w, 0.0);
    CHECK(same == h);  // bitwise

    double alpha = 2.5;
    Eigen::MatrixXf moved = patch_hidden(h, w, alpha);
    double dist = std::sqrt(static_cast<double>((moved - h).squaredNorm()));
    CHECK(dist == doctest::Approx(alpha).epsilon(1e-5));

    Eigen::MatrixXf back = patch_hidden(moved, w, -alpha);
    CHECK((back - h).cwiseAbs().maxCoeff() < 1e-6f);

    Eigen::VectorXd wrong(6);
    wrong.setOnes();
    CHECK_THROWS_AS(patch_hidden(h, wrong, 1.0), ShapeError);
    Eigen::VectorXd not_unit = w * 2.0;
    CHECK_THROWS_AS(patch_hidden(h, not_unit, 1.0), UsageError);
}

TEST_CASE("layer sigma is the mean per-token norm over sqrt(d)") {
    extraction::ActivationDataset ds;
    ds.layer_names = {"layer0"};
    Eigen::MatrixXf M(1, 4);  // one row, two 2-wide token states
    M << 3, 4, 0, 5;
    ds.layers["layer0"] = M;
    double expected = (5.0 + 5.0) / 2.0 / std::sqrt(2.0);
    CHECK(layer_sigma(ds, "layer0", 2) == doctest::Approx(expected).epsilon(1e-12));
    CHECK_THROWS_AS(layer_sigma(ds, "layer0", 3), ShapeError);
}

TEST_CASE("intervention sweep anchors at alpha zero and validates inputs") {
    const Rig& r = rig();
    Eigen::MatrixXd X = r.ds.layer("layer1").cast<double>();
    Eigen::VectorXd y = r.ds.normalized_property("ball_x");
    probing::LinearProbe probe = probing::fit_ridge(X, y, 1.0);

    InterventionConfig ic;
    ic.layer = "layer1";
    ic.property = "ball_x";
    ic.alphas = {-2, 0, 2};
    ic.n_contexts = 4;
    ic.seed = 5;
    ic.episode_len = 20;

    SweepOutput out = run_sweep(r.model, r.ds, probe, "layer1", env::Variant::bricks, r.cb, ic);
    REQUIRE(out.results.size() == 3);
    CHECK(out.sigma_layer > 0);
    bool saw_zero = false;
    for (const auto& res : out.results) {
        CHECK(res.kl_mean >= 0.0);
        CHECK(res.change_rate >= 0.0);
        CHECK(res.change_rate <= 1.0);
        CHECK(res.per_context_kl.size() == 4);
        if (res.alpha == 0.0) {
            saw_zero = true;
            CHECK(res.kl_mean == 0.0);      // exact
            CHECK(res.change_rate == 0.0);  // exact
            for (double v : res.per_context_kl) CHECK(v == 0.0);
        } else {
            CHECK(res.kl_mean > 0.0);
        }
    }
    CHECK(saw_zero);
    CHECK(out.correlation.pairs.size() == 3);
    CHECK(out.correlation.pearson_r >= -1.0);
    CHECK(out.correlation.pearson_r <= 1.0);

    // csv has one row per alpha
    std::string csv = results_to_csv(out);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

    SUBCASE("probe/patch layer mismatch is a usage error") {
        CHECK_THROWS_AS(run_sweep(r.model, r.ds, probe, "layer2", env::Variant::bricks, r.cb, ic),
                        UsageError);
    }
    SUBCASE("tokenizer layers cannot be patched") {
        InterventionConfig bad = ic;
        bad.layer = "tok_patch";
        CHECK_THROWS_AS(run_sweep(r.model, r.ds, probe, "tok_patch", env::Variant::bricks, r.cb, bad),
                        UsageError);
    }
    SUBCASE("alpha grid must contain the zero anchor") {
        InterventionConfig bad = ic;
        bad.alphas = {-1, 1};
        CHECK_THROWS_AS(run_sweep(r.model, r.ds, probe, "layer1", env::Variant::bricks, r.cb, bad),
                        ConfigError);
    }
}

TEST_CASE("sweep results are deterministic") {
    const Rig& r = rig();
    Eigen::MatrixXd X = r.ds.layer("layer1").cast<double>();
    Eigen::VectorXd y = r.ds.normalized_property("ball_y");
    probing::LinearProbe probe = probing::fit_ridge(X, y, 1.0);
    InterventionConfig ic;
    ic.layer = "layer1";
    ic.alphas = {0, 1};
    ic.n_contexts = 3;
    ic.seed = 8;
    ic.episode_len = 20;
    SweepOutput a = run_sweep(r.model, r.ds, probe, "layer1", env::Variant::bricks, r.cb, ic);
    SweepOutput b = run_sweep(r.model, r.ds, probe, "layer1", env::Variant::bricks, r.cb, ic);
    CHECK(results_to_csv(a) == results_to_csv(b));
}
