#include <gtest/gtest.h>

#include <pbmeta/diagnostics.hpp>
#include <pbmeta/estimators.hpp>
#include <pbmeta/oracle.hpp>
#include <pbmeta/rng.hpp>

#include <sstream>

using namespace pbmeta;

namespace {

// Three donors at x = 0, 1, 2 asked to average 0.25.
BalanceProblem three_point(bool nonneg) {
    BalanceProblem p;
    p.B.resize(3, 2);
    p.B << 1, 0, 1, 1, 1, 2;
    p.b_star = Eigen::Vector2d(1.0, 0.25);
    p.delta = VectorXd::Zero(2);
    p.nonneg = nonneg;
    return p;
}

// Minimum-norm solution restricted to each support; the best nonnegative one is
// the bounded optimum. Independent of the library oracle.
VectorXd enumerate_support(const BalanceProblem& p) {
    const int n = p.n();
    double best = std::numeric_limits<double>::infinity();
    VectorXd arg;
    for (int mask = 1; mask < (1 << n); ++mask) {
        std::vector<int> S;
        for (int i = 0; i < n; ++i)
            if (mask >> i & 1) S.push_back(i);
        MatrixXd A(p.K(), S.size());
        for (size_t a = 0; a < S.size(); ++a) A.col(a) = p.B.row(S[a]).transpose();
        VectorXd ws = A.completeOrthogonalDecomposition().solve(p.b_star);
        if ((A * ws - p.b_star).norm() > 1e-12 || (ws.array() < -1e-14).any()) continue;
        if (ws.squaredNorm() < best) {
            best = ws.squaredNorm();
            arg = VectorXd::Zero(n);
            for (size_t a = 0; a < S.size(); ++a) arg[S[a]] = ws[a];
        }
    }
    return arg;
}

IdDataset small_id() {
    std::vector<IndividualRecord> r = {
        {1, 1, {0.0}, 10}, {1, 1, {1.0}, 20}, {1, 1, {2.0}, 30}, {1, 0, {0.0}, 4}, {1, 0, {0.5}, 6}};
    return validate_id_dataset(r, {"x"}).data;
}

IdDataset random_id(Philox& g, int n, int p, int m) {
    std::vector<IndividualRecord> rr;
    for (int i = 0; i < n; ++i) {
        IndividualRecord q;
        q.study_id = 1 + i % m;
        q.treatment = (i / m) % 2;
        for (int j = 0; j < p; ++j) q.covariates.push_back(g.normal() + 0.3 * q.study_id);
        q.outcome = 1.0 + g.normal() + q.covariates[0] * (1.0 + q.treatment);
        rr.push_back(q);
    }
    std::vector<std::string> nm;
    for (int j = 0; j < p; ++j) nm.push_back("x" + std::to_string(j + 1));
    return validate_id_dataset(rr, nm).data;
}

} // namespace

TEST(Philox, KnownAnswers) {
    auto b = Philox::bijection({0, 0, 0, 0}, {0, 0});
    EXPECT_EQ(b, (Philox::block{0x6627e8d5, 0xe169c58d, 0xbc57ac4c, 0x9b00dbd8}));
    b = Philox::bijection({0xffffffff, 0xffffffff, 0xffffffff, 0xffffffff}, {0xffffffff, 0xffffffff});
    EXPECT_EQ(b, (Philox::block{0x408f276d, 0x41c83b0e, 0xa20bc7c6, 0x6d5451fd}));
    b = Philox::bijection({0x243f6a88, 0x85a308d3, 0x13198a2e, 0x03707344}, {0xa4093822, 0x299f31d0});
    EXPECT_EQ(b, (Philox::block{0xd16cfe09, 0x94fdcceb, 0x5001e420, 0x24126ea1}));
}

TEST(Philox, StreamsAreReproducibleAndDistinct) {
    Philox a(42, 3, 1), b(42, 3, 1), c(42, 4, 1);
    for (int i = 0; i < 10; ++i) {
        const auto x = a();
        EXPECT_EQ(x, b());
        EXPECT_NE(x, c());
    }
}

TEST(Ingest, MinimalDataset) {
    std::vector<IndividualRecord> r = {{7, 0, {1.0}, 1}, {7, 1, {2.0}, 2}, {3, 0, {3.0}, 3}, {3, 1, {4.0}, 4}};
    auto d = validate_id_dataset(r, {"x"}).data;
    EXPECT_EQ(d.m(), 2);
    EXPECT_EQ(d.n(), 4);
    EXPECT_EQ(d.study_labels[0], "7");
    EXPECT_EQ(d.study[2], 1);
}

TEST(Ingest, RejectsBadRows) {
    std::istringstream bad_z("study_id,z,y,x\na,0,1,0\na,2,1,0\n");
    try {
        validate_id_dataset(csv::parse(bad_z));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonBinaryTreatment);
    }
    std::istringstream bad_v("study_id,tau_hat,sigma2_hat,n\na,1,0,10\n");
    try {
        validate_ad_dataset(csv::parse(bad_v));
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonPositiveVariance);
    }
}

TEST(Ingest, AdWithTargetRow) {
    std::istringstream in("study_id,tau_hat,sigma2_hat,n,age\na,1,1,10,0\nb,2,1,10,1\nc,3,1,10,2\nT,0,1,50,0.25\n");
    auto ing = validate_ad_dataset(csv::parse(in), ScaleMode::Sigma2, "T");
    EXPECT_EQ(ing.data.m(), 3);
    ASSERT_TRUE(ing.target);
    EXPECT_EQ(ing.target->basis_targets[1], 0.25);
    EXPECT_EQ(*ing.target->n_star, 50);
}

TEST(Ingest, CsvRoundTripIsBitExact) {
    Philox g(9);
    auto d = random_id(g, 40, 3, 3);
    std::ostringstream out;
    write_id_csv(out, d);
    std::istringstream in(out.str());
    auto e = validate_id_dataset(csv::parse(in)).data;
    EXPECT_EQ(d.x, e.x);
    EXPECT_EQ(d.y, e.y);
    EXPECT_EQ(d.z, e.z);
    EXPECT_EQ(d.study_labels, e.study_labels);
    std::ostringstream again;
    write_id_csv(again, e);
    EXPECT_EQ(out.str(), again.str());
}

TEST(Profile, FromMeans) {
    auto t = target_profile_from_means(VectorXd::Zero(3), VectorXd::Zero(3), 100);
    ASSERT_EQ(t.K(), 4);
    EXPECT_EQ(t.basis_targets[0], 1.0);
    EXPECT_EQ(t.tolerances[0], 0.0);
}

TEST(Basis, SpecSizesAndEvaluation) {
    EXPECT_EQ(build_basis_spec(identity_terms(3), 3).K(), 4);
    auto sq = identity_terms(2);
    auto s2 = square_terms(2);
    sq.insert(sq.end(), s2.begin(), s2.end());
    EXPECT_EQ(build_basis_spec(sq, 2).K(), 5);
    auto spec = build_basis_spec({Term{Term::IDENTITY, 0, -1}, Term{Term::SQUARE, 0, -1}}, 1);
    MatrixXd x(1, 1);
    x << 2.0;
    auto row = evaluate_raw(x, spec);
    EXPECT_EQ(row(0, 0), 1.0);
    EXPECT_EQ(row(0, 1), 2.0);
    EXPECT_EQ(row(0, 2), 4.0);
}

TEST(Basis, WithinStudyAugmentation) {
    std::vector<IndividualRecord> r = {{1, 0, {0.0}, 0}, {1, 0, {1.0}, 0}, {2, 0, {2.0}, 0}, {2, 0, {3.0}, 0}};
    auto d = validate_id_dataset(r, {"x"}).data;
    auto spec = build_basis_spec(identity_terms(1), 1, {1}, false);
    auto B = evaluate_basis(d, spec);
    auto tp = target_profile_from_means(VectorXd::Constant(1, 1.5), VectorXd::Zero(1));
    auto [A, ta] = augment_within_study(B, d, tp);
    EXPECT_EQ(A.K(), B.K() + 2);
    EXPECT_EQ(ta.basis_targets[2], 0.0);
    EXPECT_EQ(ta.basis_targets[3], 0.0);
    EXPECT_DOUBLE_EQ(A.values(0, 2), -1.5);
    EXPECT_EQ(A.values(2, 2), 0.0);

    auto none = build_basis_spec(identity_terms(1), 1, {}, false);
    auto Bn = evaluate_basis(d, none);
    EXPECT_EQ(augment_within_study(Bn, d, tp).first.K(), Bn.K());
}

TEST(Solver, UniformBySymmetry) {
    BalanceProblem p;
    p.B = MatrixXd::Ones(4, 1);
    p.b_star = VectorXd::Ones(1);
    p.delta = VectorXd::Zero(1);
    auto s = solve_balancing_weights(p);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(s.weights[i], 0.25, 1e-12);
}

TEST(Solver, UnboundedMatchesClosedForm) {
    auto p = three_point(false);
    VectorXd kkt = p.B * (p.B.transpose() * p.B).ldlt().solve(p.b_star);
    auto s = solve_balancing_weights(p);
    EXPECT_NEAR((s.weights - kkt).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_NEAR(s.weights[0], 0.70833, 5e-6);
    EXPECT_NEAR(s.weights[1], 0.33333, 5e-6);
    EXPECT_NEAR(s.weights[2], -0.04167, 5e-6);
}

TEST(Solver, BoundedMatchesEnumeration) {
    auto p = three_point(true);
    VectorXd ref = enumerate_support(p);
    auto s = solve_balancing_weights(p);
    EXPECT_NEAR((s.weights - ref).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_EQ(s.weights[2], 0.0);
    EXPECT_EQ(s.retained, (std::vector<int>{0, 1}));
    auto o = solve_qp_oracle(p);
    EXPECT_NEAR((o.weights - ref).cwiseAbs().maxCoeff(), 0.0, 1e-12);
}

TEST(Solver, ToleranceBandLowersObjective) {
    auto p = three_point(true);
    const double tight = solve_balancing_weights(p).weights.squaredNorm();
    p.delta[1] = 0.5;
    auto s = solve_balancing_weights(p);
    EXPECT_LE(std::abs(p.B.col(1).dot(s.weights) - 0.25), 0.5 + 1e-9);
    EXPECT_LT(s.weights.squaredNorm(), tight - 1e-6);
    EXPECT_NEAR((s.weights - solve_qp_oracle(p).weights).cwiseAbs().maxCoeff(), 0.0, 1e-8);
}

TEST(Solver, InfeasibleTargetOutsideHull) {
    auto p = three_point(true);
    p.b_star[1] = 5.0;
    try {
        solve_or_throw(p);
        FAIL();
    } catch (const InfeasibleError& e) {
        EXPECT_EQ(e.code(), ErrorCode::Infeasible);
        EXPECT_FALSE(e.certificate().violated.empty());
    }
}

TEST(Solver, GradientAtOrigin) {
    auto p = three_point(false);
    auto [f, g] = dual_objective(VectorXd::Zero(2), p);
    // rho'(0) = 0 for the squared L2 dispersion, so every weight is zero.
    EXPECT_EQ(f, 0.0);
    EXPECT_EQ(g, p.b_star);
}

TEST(Estimators, HandWorkedContrast) {
    auto d = small_id();
    auto spec = build_basis_spec(identity_terms(1), 1, {}, false);
    auto tp = target_profile_from_means(VectorXd::Constant(1, 0.25), VectorXd::Zero(1), 5);
    auto f = estimate_id(d, spec, tp, true);
    EXPECT_NEAR(f.report.tau_hat, 7.5, 1e-9);
    VectorXd expect(5);
    expect << 0.75, 0.25, 0.0, 0.5, 0.5;
    EXPECT_NEAR((f.weights.unit_weights - expect).cwiseAbs().maxCoeff(), 0.0, 1e-10);
    EXPECT_NEAR(kish_ess(f.weights.treated.solution.weights), 1.6, 1e-9);
}

TEST(Estimators, ConstantOutcomeGivesZero) {
    auto d = small_id();
    d.y.setConstant(3.0);
    auto spec = build_basis_spec(identity_terms(1), 1, {}, false);
    auto tp = target_profile_from_means(VectorXd::Constant(1, 0.25), VectorXd::Zero(1), 5);
    EXPECT_NEAR(estimate_id(d, spec, tp, true).report.tau_hat, 0.0, 1e-9);
}

TEST(Estimators, NoCovariatesIsDifferenceInMeans) {
    std::vector<IndividualRecord> r = {{1, 1, {}, 3}, {1, 1, {}, 5}, {1, 0, {}, 1}, {2, 0, {}, 2}, {2, 0, {}, 6}};
    auto d = validate_id_dataset(r, {}).data;
    auto spec = build_basis_spec(identity_terms(0), 0);
    TargetProfile tp;
    tp.basis_targets = VectorXd::Ones(1);
    tp.tolerances = VectorXd::Zero(1);
    EXPECT_NEAR(estimate_id(d, spec, tp, true).report.tau_hat, 4.0 - 3.0, 1e-12);
}

TEST(Estimators, OneStageOlsEqualsRegression) {
    Philox g(5);
    auto d = random_id(g, 30, 2, 2);
    auto e = EffectPartition::all_common(2);
    auto o = estimate_one_stage_ols(d, e);
    // Interacted ANCOVA: 1, Z, X, XZ, coefficient on Z, with X centred at the origin target.
    MatrixXd D(d.n(), 6);
    for (int i = 0; i < d.n(); ++i)
        D.row(i) << 1, d.z[i], d.x(i, 0), d.x(i, 1), d.x(i, 0) * d.z[i], d.x(i, 1) * d.z[i];
    VectorXd beta = D.colPivHouseholderQr().solve(d.y);
    EXPECT_NEAR(o.report.tau_hat, beta[1], 1e-8);
}

TEST(Estimators, OlsImpliedWeightsCanReverseSign) {
    std::vector<IndividualRecord> r;
    for (int i = 0; i < 12; ++i) r.push_back({1, i % 2, {static_cast<double>(i / 2)}, static_cast<double>(i)});
    r.push_back({1, 1, {30.0}, 1.0});
    auto d = validate_id_dataset(r, {"x"}).data;
    auto o = estimate_one_stage_ols(d, EffectPartition::all_common(1));
    auto rep = sign_reversal_report(o.unit_weights, d.z);
    EXPECT_FALSE(rep.entries.empty());
    EXPECT_GT(rep.negative_mass, 0.0);
}

TEST(Estimators, GFormulaEqualsUnboundedWeights) {
    Philox g(11);
    auto d = random_id(g, 80, 2, 2);
    MatrixXd tx(50, 2);
    for (int i = 0; i < 50; ++i) tx.row(i) << g.normal() + 0.5, g.normal();
    auto spec = build_basis_spec(identity_terms(2), 2);
    auto gf = g_formula(d, tx, spec);
    auto tp = target_profile_from_means(tx.colwise().mean().transpose(), VectorXd::Zero(2), 50);
    EXPECT_NEAR(gf.tau_hat, estimate_id(d, spec, tp, false).report.tau_hat, 1e-8);
}

TEST(Estimators, AdOracleInstance) {
    StudyLevelEstimates st;
    for (int i = 0; i < 3; ++i) {
        StudyEstimate e;
        e.label = "s" + std::to_string(i);
        e.tau_hat = 1.0 + i;
        e.basis_means = Eigen::Vector2d(1.0, i);
        e.scale_c = 1.0;
        st.studies.push_back(e);
    }
    auto tp = target_profile_from_means(VectorXd::Constant(1, 0.25), VectorXd::Zero(1));
    auto f = estimate_ad(st, tp, true);
    EXPECT_NEAR(f.solution.weights[0], 0.75, 1e-9);
    EXPECT_NEAR(f.solution.weights[1], 0.25, 1e-9);
    EXPECT_EQ(f.solution.weights[2], 0.0);
    EXPECT_NEAR(f.report.tau_hat, 0.75 * 1.0 + 0.25 * 2.0, 1e-9);
}

TEST(Estimators, EqualMeansGiveUniformStudyWeights) {
    StudyLevelEstimates st;
    for (int i = 0; i < 4; ++i) {
        StudyEstimate e;
        e.tau_hat = i;
        e.basis_means = Eigen::Vector2d(1.0, 0.3);
        st.studies.push_back(e);
    }
    auto tp = target_profile_from_means(VectorXd::Constant(1, 0.3), VectorXd::Zero(1));
    auto f = estimate_ad(st, tp, true);
    for (int i = 0; i < 4; ++i) EXPECT_NEAR(f.solution.weights[i], 0.25, 1e-9);
}

TEST(Estimators, InverseVarianceSpecialCase) {
    BalanceProblem p;
    p.B = MatrixXd::Ones(2, 1);
    p.b_star = VectorXd::Ones(1);
    p.delta = VectorXd::Zero(1);
    p.nonneg = false;
    p.scale = Eigen::Vector2d(1.0, 2.0);
    auto w = solve_balancing_weights(p).weights;
    EXPECT_NEAR(w.dot(Eigen::Vector2d(1.0, 3.0)), 5.0 / 3.0, 1e-12);
}

TEST(Estimators, SingleStudyTwoStageReduces) {
    Philox g(3);
    auto d = random_id(g, 60, 2, 1);
    auto spec = build_basis_spec(identity_terms(2), 2);
    auto tp = target_profile_from_means(d.x.colwise().mean().transpose(), VectorXd::Zero(2), 60);
    TwoStageInput in{d, std::nullopt, tp, spec};
    auto two = estimate_two_stage(in, true);
    EXPECT_NEAR(two.stage2.solution.weights[0], 1.0, 1e-12);
    EXPECT_NEAR(two.stage2.report.tau_hat, two.studies.studies[0].tau_hat, 1e-12);
}

TEST(Inference, HeuristicVarianceArithmetic) {
    auto d = small_id();
    VectorXd w(5);
    w << 0.75, 0.25, 0.0, 0.5, 0.5;
    auto v = heuristic_variance_id(d, w, 7.5, EffectPartition::all_common(1));
    // n s^2 sum w^2 with the residual variance pinned to 2.
    EXPECT_NEAR(v.v_heuristic / v.residual_s2 * 2.0, 11.25, 1e-12);
    // Residual variance from an independent fit of Y - 7.5 Z on (1, X, XZ), df = n - 3 - 1.
    MatrixXd D(5, 3);
    VectorXd y(5);
    for (int i = 0; i < 5; ++i) {
        D.row(i) << 1, d.x(i, 0), d.x(i, 0) * d.z[i];
        y[i] = d.y[i] - 7.5 * d.z[i];
    }
    VectorXd b = D.colPivHouseholderQr().solve(y);
    EXPECT_NEAR(v.residual_s2, (y - D * b).squaredNorm() / 1.0, 1e-9);
}

TEST(Inference, ConstantOutcomeGivesDegenerateInterval) {
    auto d = small_id();
    d.y.setConstant(2.0);
    auto spec = build_basis_spec(identity_terms(1), 1, {}, false);
    auto tp = target_profile_from_means(VectorXd::Constant(1, 0.25), VectorXd::Zero(1), 5);
    auto f = estimate_id(d, spec, tp, true);
    ASSERT_TRUE(f.report.ci_lower);
    EXPECT_NEAR(*f.report.ci_lower, 0.0, 1e-9);
    EXPECT_NEAR(*f.report.ci_upper, 0.0, 1e-9);
}

TEST(Inference, BootstrapIsSeedDeterministic) {
    Philox g(21);
    auto d = random_id(g, 60, 1, 2);
    auto est = [](const IdDataset& s) { return s.y.mean(); };
    auto a = bootstrap_ci(est, d, 200, 0.9, 77, 1);
    auto b = bootstrap_ci(est, d, 200, 0.9, 77, 2);
    EXPECT_EQ(a.lower, b.lower);
    EXPECT_EQ(a.upper, b.upper);
}

TEST(Diagnostics, EffectiveSampleSize) {
    EXPECT_NEAR(effective_sample_size(VectorXd::Constant(8, 0.125)), 8.0, 1e-12);
    EXPECT_NEAR(effective_sample_size(Eigen::Vector3d(0.75, 0.25, 0.0)), 1.6, 1e-12);
    EXPECT_NEAR(effective_sample_size(Eigen::Vector3d(1.0, 0.0, 0.0)), 1.0, 1e-12);
}

TEST(Diagnostics, SignReversal) {
    auto w = solve_balancing_weights(three_point(false)).weights;
    auto rep = sign_reversal_report(w);
    ASSERT_EQ(rep.entries.size(), 1u);
    EXPECT_EQ(rep.entries[0].row, 2);
    EXPECT_NEAR(rep.negative_mass, 0.04167, 5e-6);
    EXPECT_TRUE(sign_reversal_report(solve_balancing_weights(three_point(true)).weights).entries.empty());
}

TEST(Diagnostics, BalanceWithinTolerance) {
    Philox g(4);
    auto d = random_id(g, 200, 2, 2);
    auto spec = build_basis_spec(identity_terms(2), 2);
    // Standardized basis: a tolerance of 0.1 is a tenth of a pooled sd.
    auto tp = target_profile_from_means(Eigen::Vector2d(0.2, 0.4), VectorXd::Constant(2, 0.1), 100);
    auto w = solve_id_weights(d, spec, tp, true);
    auto b = build_diagnostics(d, w, tp);
    for (const auto& row : b.asmd) {
        EXPECT_LE(row.treated, 0.1 + 1e-6);
        EXPECT_LE(row.control, 0.1 + 1e-6);
    }
}

TEST(Diagnostics, SupportSummaryRefusesNegativeWeights) {
    auto w = solve_balancing_weights(three_point(false)).weights;
    try {
        support_detection_summary(w, {true, true, false});
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NotApplicable);
    }
    auto s = support_detection_summary(solve_balancing_weights(three_point(true)).weights, {true, true, false});
    EXPECT_EQ(s.tpr, 1.0);
    EXPECT_EQ(s.tnr, 1.0);
}
