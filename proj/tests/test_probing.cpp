#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include <Eigen/Dense>

#include "worldlens/probing.hpp"

using namespace worldlens;
using namespace worldlens::probing;

namespace {

Eigen::MatrixXd random_matrix(int n, int d, uint64_t seed) {
    Rng rng(seed);
    Eigen::MatrixXd X(n, d);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) X(i, j) = rng.normal();
    return X;
}

// standardized-basis ridge objective
double ridge_loss(const Eigen::MatrixXd& Xs, const Eigen::VectorXd& yc,
                  const Eigen::VectorXd& w, double alpha) {
    return (Xs * w - yc).squaredNorm() + alpha * w.squaredNorm();
}

}  // namespace

TEST_CASE("ridge recovers a noiseless line") {
    Eigen::MatrixXd X = random_matrix(60, 1, 1);
    Eigen::VectorXd y = 2.0 * X.col(0);
    LinearProbe p = fit_ridge(X, y, 1e-9);
    CHECK(p.w_raw[0] == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(std::abs(p.b_raw) < 1e-6);
    Eigen::VectorXd pred = p.predict(X);
    CHECK((pred - y).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("constant target gives zero weights and the constant bias") {
    Eigen::MatrixXd X = random_matrix(30, 3, 2);
    Eigen::VectorXd y = Eigen::VectorXd::Constant(30, 4.25);
    LinearProbe p = fit_ridge(X, y, 1.0);
    CHECK(p.w_raw.cwiseAbs().maxCoeff() < 1e-12);
    CHECK(p.b_raw == doctest::Approx(4.25));
}

TEST_CASE("6x2 ridge matches a hand-assembled normal-equations solve") {
    Eigen::MatrixXd X(6, 2);
    X << 1.0, 2.0, 2.0, 1.0, 3.0, 4.0, 4.0, 3.0, 5.0, 7.0, 6.0, 5.0;
    Eigen::VectorXd y(6);
    y << 1.5, 0.5, 3.0, 2.0, 5.5, 4.0;
    double alpha = 1.0;
    LinearProbe p = fit_ridge(X, y, alpha);

    // independent oracle: explicit standardization and 2x2 Cramer solve
    int n = 6;
    Eigen::VectorXd mean(2), sd(2);
    for (int j = 0; j < 2; ++j) {
        mean[j] = X.col(j).mean();
        sd[j] = std::sqrt((X.col(j).array() - mean[j]).square().sum() / n);
    }
    Eigen::MatrixXd Xs(6, 2);
    for (int j = 0; j < 2; ++j) Xs.col(j) = (X.col(j).array() - mean[j]) / sd[j];
    Eigen::VectorXd yc = y.array() - y.mean();
    double a11 = Xs.col(0).dot(Xs.col(0)) + alpha;
    double a12 = Xs.col(0).dot(Xs.col(1));
    double a22 = Xs.col(1).dot(Xs.col(1)) + alpha;
    double b1 = Xs.col(0).dot(yc), b2 = Xs.col(1).dot(yc);
    double det = a11 * a22 - a12 * a12;
    double w1 = (b1 * a22 - b2 * a12) / det;
    double w2 = (a11 * b2 - a12 * b1) / det;

    CHECK(p.w_std[0] == doctest::Approx(w1).epsilon(1e-9));
    CHECK(p.w_std[1] == doctest::Approx(w2).epsilon(1e-9));
    CHECK(p.w_raw[0] == doctest::Approx(w1 / sd[0]).epsilon(1e-9));
    CHECK(p.b_raw == doctest::Approx(y.mean() - w1 / sd[0] * mean[0] - w2 / sd[1] * mean[1])
                         .epsilon(1e-9));
}

TEST_CASE("degenerate features with alpha=0 raise a singularity error") {
    Eigen::MatrixXd X = Eigen::MatrixXd::Zero(10, 3);
    Eigen::VectorXd y = random_matrix(10, 1, 3).col(0);
    CHECK_THROWS_AS(fit_ridge(X, y, 0.0), NumericalError);
    CHECK_NOTHROW(fit_ridge(X, y, 1.0));
    CHECK_THROWS_AS(fit_ridge(X, y, -1.0), ConfigError);
    CHECK_THROWS_AS(fit_ridge(X.topRows(1), y.head(1), 1.0), UsageError);
}

TEST_CASE("fitted ridge beats random perturbations of its weights") {
    Eigen::MatrixXd X = random_matrix(50, 8, 4);
    Eigen::VectorXd y = X * Eigen::VectorXd::LinSpaced(8, -1, 1) + 0.1 * random_matrix(50, 1, 5).col(0);
    double alpha = 1.0;
    LinearProbe p = fit_ridge(X, y, alpha);

    // rebuild the standardized problem to evaluate the objective
    Eigen::MatrixXd Xs(X.rows(), X.cols());
    for (int j = 0; j < X.cols(); ++j)
        Xs.col(j) = (X.col(j).array() - p.x_mean[j]) / p.x_std[j];
    Eigen::VectorXd yc = y.array() - p.y_mean;
    double base = ridge_loss(Xs, yc, p.w_std, alpha);
    Rng rng(6);
    for (int k = 0; k < 100; ++k) {
        Eigen::VectorXd delta(8);
        for (int j = 0; j < 8; ++j) delta[j] = rng.normal();
        delta *= 1e-3 / delta.norm();
        CHECK(base <= ridge_loss(Xs, yc, p.w_std + delta, alpha) + 1e-12);
    }
}

TEST_CASE("regularization shrinks the weight norm monotonically") {
    Eigen::MatrixXd X = random_matrix(40, 5, 7);
    Eigen::VectorXd y = X * Eigen::VectorXd::Ones(5) + 0.2 * random_matrix(40, 1, 8).col(0);
    double prev = std::numeric_limits<double>::infinity();
    for (double alpha : {0.01, 1.0, 100.0}) {
        double norm = fit_ridge(X, y, alpha).w_std.norm();
        CHECK(norm <= prev + 1e-12);
        prev = norm;
    }
}

TEST_CASE("r2_score worked examples") {
    Eigen::VectorXd y(4), pred(4);
    y << 0, 1, 2, 3;
    pred << 0, 0, 0, 0;
    CHECK(r2_score(y, y) == 1.0);
    Eigen::VectorXd mean_pred = Eigen::VectorXd::Constant(4, y.mean());
    CHECK(r2_score(y, mean_pred) == 0.0);
    CHECK(r2_score(y, pred) == doctest::Approx(-1.8).epsilon(1e-9));

    Eigen::VectorXd c = Eigen::VectorXd::Constant(4, 2.0);
    CHECK_THROWS_AS(r2_score(c, pred), NumericalError);
    CHECK_THROWS_AS(r2_score(y, pred.head(3)), ShapeError);
    CHECK_THROWS_AS(r2_score(y.head(1), pred.head(1)), UsageError);
}

TEST_CASE("cv fold split is a partition and replays the documented procedure") {
    auto folds = cv_folds(203, 5, 99);
    REQUIRE(folds.size() == 5);
    std::set<int> seen;
    for (const auto& f : folds)
        for (int i : f) {
            CHECK(!seen.count(i));
            seen.insert(i);
        }
    CHECK(seen.size() == 203);
    CHECK(*seen.rbegin() == 202);

    // independent replay: Fisher-Yates with mt19937_64 and rejection
    // sampling, then contiguous slices
    std::mt19937_64 eng(99);
    auto uniform_int = [&eng](uint64_t n) {
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do { x = eng(); } while (x >= limit);
        return x % n;
    };
    std::vector<int> perm(203);
    for (int i = 0; i < 203; ++i) perm[i] = i;
    for (size_t i = perm.size(); i > 1; --i)
        std::swap(perm[i - 1], perm[uniform_int(i)]);
    for (int f = 0; f < 5; ++f) {
        int lo = f * 203 / 5, hi = (f + 1) * 203 / 5;
        std::vector<int> expect(perm.begin() + lo, perm.begin() + hi);
        CHECK(folds[f] == expect);
    }

    CHECK_THROWS_AS(cv_folds(3, 5, 0), ConfigError);
}

TEST_CASE("cross-validated r2 is 1 on noiseless linear data") {
    Eigen::MatrixXd X = random_matrix(100, 3, 10);
    Eigen::VectorXd y = X * Eigen::Vector3d(1.0, -2.0, 0.5);
    y.array() += 3.0;
    CvResult cv = cross_val_r2(X, y, "linear", 5, 42, 1e-9);
    CHECK(cv.fold_r2.size() == 5);
    CHECK(cv.mean == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(cv.stddev <= 1e-6);
}

TEST_CASE("cross-validated r2 collapses for shuffled labels") {
    Eigen::MatrixXd X = random_matrix(200, 4, 11);
    Eigen::VectorXd y = X.col(0) * 2.0;
    Rng rng(12);
    auto perm = rng.permutation(200);
    Eigen::VectorXd shuffled(200);
    for (int i = 0; i < 200; ++i) shuffled[i] = y[static_cast<int>(perm[i])];
    CvResult cv = cross_val_r2(X, shuffled, "linear", 5, 13, 1.0);
    CHECK(cv.mean <= 0.05);
}

TEST_CASE("mlp probe learns a line and is deterministic") {
    Eigen::MatrixXd X = random_matrix(300, 1, 14);
    Eigen::VectorXd y = 2.0 * X.col(0);
    MLPConfig mc;
    mc.hidden = 32;
    mc.epochs = 60;
    mc.batch = 64;
    mc.seed = 5;
    MLPProbe p1 = fit_mlp(X.topRows(250), y.head(250), mc);
    Eigen::VectorXd pred = p1.predict(X.bottomRows(50));
    CHECK(r2_score(y.tail(50), pred) >= 0.99);

    MLPProbe p2 = fit_mlp(X.topRows(250), y.head(250), mc);
    CHECK(p1.predict(X.bottomRows(50)) == p2.predict(X.bottomRows(50)));
}

TEST_CASE("mlp beats linear on a nonlinear target by at least 0.3") {
    // y = sin(2x) on [-3, 3]: the best line explains little of the variance
    Rng rng(21);
    int n = 2000;
    Eigen::MatrixXd X(n, 1);
    Eigen::VectorXd y(n);
    for (int i = 0; i < n; ++i) {
        X(i, 0) = -3.0 + 6.0 * rng.uniform();
        y[i] = std::sin(2.0 * X(i, 0));
    }
    // closed-form linear R^2 on the sample: squared correlation
    double mx = X.col(0).mean(), my = y.mean();
    double sxy = ((X.col(0).array() - mx) * (y.array() - my)).sum();
    double sxx = (X.col(0).array() - mx).square().sum();
    double syy = (y.array() - my).square().sum();
    double linear_r2_closed_form = (sxy * sxy) / (sxx * syy);
    CHECK(linear_r2_closed_form < 0.3);

    CvResult lin = cross_val_r2(X, y, "linear", 5, 3, 1e-6);
    CHECK(lin.mean == doctest::Approx(linear_r2_closed_form).epsilon(0.05));

    MLPConfig mc;
    mc.hidden = 64;
    mc.epochs = 120;
    mc.seed = 9;
    CvResult mlp = cross_val_r2(X, y, "mlp", 5, 3, 1e-6, mc);
    CHECK(mlp.mean - lin.mean >= 0.3);
}

TEST_CASE("selectivity gap is pure subtraction") {
    ProbeResult lin, mlp;
    lin.layer = mlp.layer = "layer2";
    lin.property = mlp.property = "ball_x";
    lin.kind = "linear";
    mlp.kind = "mlp";
    lin.r2_mean = 0.85;
    mlp.r2_mean = 0.91;
    CHECK(selectivity_gap(lin, mlp) == doctest::Approx(0.06));
    mlp.r2_mean = 0.9987;
    lin.r2_mean = 0.9994;
    CHECK(selectivity_gap(lin, mlp) == doctest::Approx(-0.0007));
    CHECK(selectivity_gap(lin, lin) == 0.0);

    ProbeResult other = mlp;
    other.property = "ball_y";
    CHECK_THROWS_AS(selectivity_gap(lin, other), UsageError);
}

TEST_CASE("probe direction is the unit raw-basis weight vector") {
    LinearProbe p;
    p.w_raw = Eigen::Vector2d(3.0, 4.0);
    Eigen::VectorXd w = probe_direction(p);
    CHECK(w[0] == doctest::Approx(0.6).epsilon(1e-12));
    CHECK(w[1] == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(std::abs(w.norm() - 1.0) < 1e-9);

    LinearProbe zero;
    zero.w_raw = Eigen::VectorXd::Zero(3);
    CHECK_THROWS_AS(probe_direction(zero), NumericalError);
}

TEST_CASE("raw-basis weights match an independently unstandardized refit") {
    Eigen::MatrixXd X = random_matrix(80, 4, 30);
    // give the columns distinct scales and offsets
    for (int j = 0; j < 4; ++j) X.col(j) = X.col(j) * (j + 1.0) + Eigen::VectorXd::Constant(80, j * 5.0);
    Eigen::VectorXd y = X * Eigen::Vector4d(0.5, -1.0, 2.0, 0.0);
    y.array() += 7.0;
    LinearProbe p = fit_ridge(X, y, 1.0);

    // oracle: explicit standardization, explicit 4x4 solve via full pivoting,
    // explicit unstandardization
    int n = 80;
    Eigen::VectorXd mean(4), sd(4);
    Eigen::MatrixXd Xs(n, 4);
    for (int j = 0; j < 4; ++j) {
        mean[j] = X.col(j).mean();
        sd[j] = std::sqrt((X.col(j).array() - mean[j]).square().sum() / n);
        Xs.col(j) = (X.col(j).array() - mean[j]) / sd[j];
    }
    Eigen::VectorXd yc = y.array() - y.mean();
    Eigen::MatrixXd A = Xs.transpose() * Xs + Eigen::MatrixXd::Identity(4, 4);
    Eigen::VectorXd ws = A.fullPivLu().solve(Xs.transpose() * yc);
    Eigen::VectorXd w_raw = (ws.array() / sd.array()).matrix();
    double b_raw = y.mean() - w_raw.dot(mean);

    CHECK((p.w_raw - w_raw).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(p.b_raw == doctest::Approx(b_raw).epsilon(1e-9));
}

TEST_CASE("probe sweep fills the grid and captures per-cell failures") {
    // synthetic dataset: layerA linearly encodes prop ball_x, layerB is noise
    extraction::ActivationDataset ds;
    ds.variant = "bricks";
    int n = 60;
    Eigen::MatrixXd XA = random_matrix(n, 6, 40);
    ds.layer_names = {"layerA", "layerB"};
    ds.layers["layerA"] = XA.cast<float>();
    ds.layers["layerB"] = random_matrix(n, 6, 41).cast<float>();
    ds.property_names = {"ball_x", "flat"};
    ds.properties.resize(n, 2);
    ds.properties.col(0) = XA * Eigen::VectorXd::LinSpaced(6, 1, 2);
    ds.properties.col(1).setConstant(3.0);  // degenerate target
    ds.prop_mean.resize(2);
    ds.prop_std.resize(2);
    for (int j = 0; j < 2; ++j) {
        ds.prop_mean[j] = ds.properties.col(j).mean();
        ds.prop_std[j] = std::sqrt((ds.properties.col(j).array() - ds.prop_mean[j]).square().sum() / n);
    }

    SweepConfig sc;
    sc.folds = 5;
    sc.seed = 77;
    auto results = probe_sweep(ds, ds.property_names, ds.layer_names, {"linear"}, sc);
    REQUIRE(results.size() == 4);
    int ok = 0, failed = 0;
    for (const auto& r : results) {
        if (r.property == "flat") {
            CHECK(!r.ok());  // constant target: undefined metric, captured
            ++failed;
        } else {
            CHECK(r.ok());
            CHECK(r.fold_r2.size() == 5);
            if (r.layer == "layerA") CHECK(r.r2_mean > 0.99);
            if (r.layer == "layerB") CHECK(r.r2_mean < 0.3);
            CHECK(r.probe.has_value());
            ++ok;
        }
    }
    CHECK(ok == 2);
    CHECK(failed == 2);

    CHECK(best_layer(results, "ball_x", ds.layer_names) == "layerA");
    CHECK_THROWS_AS(best_layer(results, "flat", ds.layer_names), UsageError);

    // csv round trip preserves the grid
    auto back = results_from_csv(results_to_csv(results));
    REQUIRE(back.size() == results.size());
    for (size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].layer == results[i].layer);
        CHECK(back[i].r2_mean == doctest::Approx(results[i].r2_mean).epsilon(1e-9));
        CHECK(back[i].fold_r2.size() == results[i].fold_r2.size());
        CHECK(back[i].ok() == results[i].ok());
    }
}

TEST_CASE("best layer ties resolve to the earliest layer") {
    ProbeResult a, b;
    a.layer = "layer0";
    b.layer = "layer1";
    a.property = b.property = "p";
    a.kind = b.kind = "linear";
    a.r2_mean = b.r2_mean = 0.5;
    CHECK(best_layer({a, b}, "p", {"layer0", "layer1"}) == "layer0");
}
