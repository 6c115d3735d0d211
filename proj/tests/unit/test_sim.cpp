#include <gtest/gtest.h>

#include <pbmeta/simlab.hpp>

using namespace pbmeta;
using namespace pbmeta::sim;

namespace {

SimDesign small_design(Overlap o) {
    SimDesign d;
    d.overlap = o;
    d.calibration_draws = 200000;
    d.seed = 17;
    return d;
}

} // namespace

TEST(Simlab, NoSelectionOnCovariates) {
    SimDesign d = small_design(Overlap::FULL);
    d.beta.setZero();
    d.target_study_n = d.total_n / 2;
    EXPECT_NEAR(calibrate_beta0(d), 0.0, 1e-10);
    EXPECT_NEAR(truth_quadrature(d, 0.0), d.theta_10 - d.theta_00, 1e-10);
    EXPECT_NEAR(truth_quadrature(d, 0.0), -1.0, 1e-10);
}

TEST(Simlab, InterceptHitsTargetSelectionRate) {
    SimDesign d = small_design(Overlap::FULL);
    d.target_study_n = 5000;
    const double b0 = calibrate_beta0(d);
    // Brute-force selection rate from our own draws.
    auto L = MatrixXd(d.covariance().llt().matrixL());
    Philox rng(99);
    double acc = 0.0;
    const int N = 400000;
    VectorXd e(3);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < 3; ++j) e[j] = rng.normal();
        acc += expit(b0 + d.beta.dot(L * e));
    }
    EXPECT_NEAR(acc / N, 0.5, 0.003);
}

TEST(Simlab, BalancedTrialShares) {
    SimDesign d = small_design(Overlap::FULL);
    d.total_n = 200000;
    d.target_study_n = 100000;
    d = calibrate_intercepts(d);
    for (double s : d.calibration->trial_shares) EXPECT_NEAR(s, 1.0 / 3, 0.01);
    auto draw = generate_dataset(d, 0);
    for (const auto& c : draw.data.study_counts()) EXPECT_NEAR(static_cast<double>(c.n) / draw.data.n(), 1.0 / 3, 0.01);
}

TEST(Simlab, QuadratureTruthMatchesBruteForce) {
    for (auto o : {Overlap::FULL, Overlap::PARTIAL}) {
        auto d = calibrate_intercepts(small_design(o));
        const double mc = truth_oracle(d, 2000000, 1);
        EXPECT_NEAR(mc, d.calibration->population_tau, 0.02) << to_string(o);
    }
}

TEST(Simlab, PartialTruthDiffersFromFull) {
    auto full = calibrate_intercepts(small_design(Overlap::FULL));
    auto part = calibrate_intercepts(small_design(Overlap::PARTIAL));
    EXPECT_GT(std::abs(full.calibration->population_tau - part.calibration->population_tau), 0.05);
}

TEST(Simlab, DrawsAreReproducible) {
    auto d = calibrate_intercepts(small_design(Overlap::PARTIAL));
    auto a = generate_dataset(d, 3), b = generate_dataset(d, 3), c = generate_dataset(d, 4);
    EXPECT_EQ(a.data.x, b.data.x);
    EXPECT_EQ(a.data.y, b.data.y);
    EXPECT_EQ(a.true_tau, b.true_tau);
    EXPECT_NE(a.true_tau, c.true_tau);
}

TEST(Simlab, UncalibratedDesignIsRejected) {
    try {
        generate_dataset(small_design(Overlap::FULL), 0);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::CalibrationMissing);
    }
}

TEST(Simlab, SingleReplicationMetrics) {
    auto m = summarize(MethodTag::ID_BOUNDED, {0.3}, {1.0}, {1}, 0);
    EXPECT_EQ(m.bias, 0.3);
    EXPECT_EQ(m.rmse, 0.3);
    EXPECT_EQ(m.sd, 0.0);
    EXPECT_TRUE(m.sd_undefined);
}

TEST(Simlab, RmseDecomposition) {
    auto m = summarize(MethodTag::ID_BOUNDED, {0.1, -0.4, 0.7, 0.2, 0.0}, {}, {}, 0);
    const double R = 5;
    EXPECT_NEAR(m.rmse * m.rmse, m.bias * m.bias + m.sd * m.sd * (R - 1) / R, 1e-14);
}

TEST(Simlab, ReplicationsIndependentOfThreads) {
    auto d = calibrate_intercepts(small_design(Overlap::PARTIAL));
    auto a = run_replications(d, default_sim_methods(), 6, 1);
    auto b = run_replications(d, default_sim_methods(), 6, 3);
    for (size_t k = 0; k < a.metrics.size(); ++k) {
        EXPECT_EQ(a.metrics[k].bias, b.metrics[k].bias);
        EXPECT_EQ(a.metrics[k].sd, b.metrics[k].sd);
    }
    std::ostringstream x, y;
    write_metrics_csv(x, {a});
    write_metrics_csv(y, {b});
    EXPECT_EQ(x.str(), y.str());
}

TEST(Simlab, BoundedEstimateNearTruthOnLargeDraw) {
    auto d = small_design(Overlap::PARTIAL);
    d.target_study_n = 5000;
    d = calibrate_intercepts(d);
    auto s = generate_dataset(d, 0);
    auto spec = build_basis_spec(identity_terms(3), 3);
    auto f = estimate_id(s.data, spec, s.profile, true);
    ASSERT_TRUE(f.report.ci_lower);
    const double se = (*f.report.ci_upper - *f.report.ci_lower) / (2 * 1.959963984540054);
    EXPECT_LT(std::abs(f.report.tau_hat - s.true_tau), 3 * se);
}
