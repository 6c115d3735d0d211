#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "basis.hpp"
#include "errors.hpp"
#include "inference.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "solver.hpp"

namespace pbmeta {

struct FitSettings {
    Dispersion dispersion = Dispersion::SQUARED_L2;
    SolverSettings solver;
    std::optional<EffectPartition> partition; // default: every covariate common
    std::vector<double> within_tolerance;     // override for the within-study rows
    double level = 0.95;
    int threads = 1;
};

inline double kish_ess(const VectorXd& w) {
    const double s = w.squaredNorm();
    if (!(s > 0)) fail(ErrorCode::ZeroWeights, "all weights are zero");
    return 1.0 / s;
}

// ---------------------------------------------------------------------------
// Unit-level weights

struct GroupFit {
    std::vector<int> rows;    // dataset rows of this group
    std::vector<int> columns; // basis columns that entered the solve
    WeightSolution solution;
    VectorXd lambda;          // dual variables expanded to all basis columns
};

struct IdWeights {
    BasisMatrix basis;     // solver coordinates, possibly augmented
    TargetProfile profile; // solver coordinates, matching `basis`
    GroupFit treated, control;
    VectorXd unit_weights; // each unit's weight within its own group
    bool bounded = true;

    const GroupFit& group(int z) const { return z ? treated : control; }
};

// Balance problem for one set of rows. Within-study columns that vanish on these
// rows and target zero carry no information and are left out.
inline BalanceProblem make_group_problem(const BasisMatrix& B, const TargetProfile& tp, const std::vector<int>& rows,
                                         bool nonneg, Dispersion disp, std::vector<int>& columns) {
    columns.clear();
    for (int k : B.constrained) {
        bool any = false;
        for (int r : rows)
            if (B.values(r, k) != 0.0) {
                any = true;
                break;
            }
        if (any || tp.basis_targets[k] != 0.0 || k < B.base_K) columns.push_back(k);
    }
    BalanceProblem p;
    p.B.resize(rows.size(), columns.size());
    for (size_t a = 0; a < rows.size(); ++a)
        for (size_t c = 0; c < columns.size(); ++c) p.B(a, c) = B.values(rows[a], columns[c]);
    p.b_star.resize(columns.size());
    p.delta.resize(columns.size());
    for (size_t c = 0; c < columns.size(); ++c) {
        p.b_star[c] = tp.basis_targets[columns[c]];
        p.delta[c] = tp.tolerances[columns[c]];
    }
    p.dispersion = disp;
    p.nonneg = nonneg;
    return p;
}

// Rewrites a certificate from problem columns to named basis columns, with
// targets and closest values mapped back to the caller's scale.
inline void relabel_certificate(InfeasibilityCertificate& c, const BasisMatrix& B, const std::vector<int>& columns,
                                const std::string& group) {
    c.group = group;
    c.names.clear();
    for (size_t q = 0; q < columns.size(); ++q) {
        const int k = columns[q];
        c.names.push_back(k < static_cast<int>(B.names.size()) ? B.names[k] : "b" + std::to_string(k + 1));
        if (k < B.base_K && q < c.target.size()) {
            c.target[q] = c.target[q] * B.scale[k] + B.center[k];
            if (q < c.closest.size()) c.closest[q] = c.closest[q] * B.scale[k] + B.center[k];
        }
    }
}

inline GroupFit solve_group(const BasisMatrix& B, const TargetProfile& tp, const std::vector<int>& rows, bool bounded,
                            const FitSettings& s, const std::string& label) {
    GroupFit g;
    g.rows = rows;
    auto prob = make_group_problem(B, tp, rows, bounded, s.dispersion, g.columns);
    try {
        g.solution = solve_or_throw(prob, s.solver);
    } catch (InfeasibleError& e) {
        auto cert = e.certificate();
        relabel_certificate(cert, B, g.columns, label);
        throw InfeasibleError(label + " group: " + e.message(), cert);
    }
    g.lambda = VectorXd::Zero(B.K());
    for (size_t c = 0; c < g.columns.size(); ++c) g.lambda[g.columns[c]] = g.solution.lambda[c];
    return g;
}

inline IdWeights solve_id_weights(const IdDataset& d, const BasisSpec& spec, const TargetProfile& profile, bool bounded,
                                  const FitSettings& s = {}) {
    check_profile(profile);
    IdWeights out;
    out.bounded = bounded;
    auto rows1 = d.rows_where(1), rows0 = d.rows_where(0);
    if (rows1.empty() || rows0.empty()) fail(ErrorCode::EmptyStudy, "both treatment groups need at least one unit");
    BasisMatrix B = evaluate_basis(d, spec);
    TargetProfile tp = transform_profile(profile, B);
    if (!spec.within.empty()) std::tie(B, tp) = augment_within_study(B, d, tp, s.within_tolerance);
    out.treated = solve_group(B, tp, rows1, bounded, s, "treated");
    out.control = solve_group(B, tp, rows0, bounded, s, "control");
    out.basis = std::move(B);
    out.profile = std::move(tp);
    out.unit_weights = VectorXd::Zero(d.n());
    for (const GroupFit* g : {&out.treated, &out.control})
        for (size_t a = 0; a < g->rows.size(); ++a) out.unit_weights[g->rows[a]] = g->solution.weights[a];
    return out;
}

inline double weighted_contrast(const IdDataset& d, const IdWeights& w) {
    double t = 0.0;
    for (const GroupFit* g : {&w.treated, &w.control}) {
        const double sign = g == &w.treated ? 1.0 : -1.0;
        for (size_t a = 0; a < g->rows.size(); ++a) t += sign * g->solution.weights[a] * d.y[g->rows[a]];
    }
    return t;
}

inline std::string fmt_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

struct IdFit {
    EstimateReport report;
    IdWeights weights;
    VarianceReport variance;
};

inline IdFit estimate_id(const IdDataset& d, const BasisSpec& spec, const TargetProfile& profile, bool bounded,
                         const FitSettings& s = {}) {
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "estimation needs an outcome for every unit");
    IdFit f;
    f.weights = solve_id_weights(d, spec, profile, bounded, s);
    auto& r = f.report;
    r.method_tag = bounded ? MethodTag::ID_BOUNDED : MethodTag::ID_UNBOUNDED;
    r.tau_hat = weighted_contrast(d, f.weights);
    r.level = s.level;
    auto part = s.partition.value_or(EffectPartition::all_common(d.p()));
    auto& v = f.variance;
    try {
        auto h = heuristic_variance_id(d, f.weights.unit_weights, r.tau_hat, part);
        v.v_heuristic = h.v_heuristic;
        v.residual_s2 = h.residual_s2;
        r.variance_heuristic = h.v_heuristic;
    } catch (const Error& e) {
        r.notes.push_back(std::string("heuristic variance unavailable: ") + e.what());
    }
    if (profile.n_star) {
        try {
            const int K0 = f.weights.basis.base_K;
            auto pv = plugin_variance_id(d, f.weights.unit_weights, f.weights.basis.values.leftCols(K0),
                                         f.weights.profile.basis_targets.head(K0), profile.n_star);
            v.v_plugin = pv.v_plugin;
            v.s2_treated = pv.s2_treated;
            v.s2_control = pv.s2_control;
            v.psd_clipped = pv.psd_clipped;
            r.variance_plugin = pv.v_plugin;
            if (pv.psd_clipped) r.notes.push_back("S_B had negative eigenvalues; clipped to the PSD cone");
        } catch (const Error& e) {
            r.notes.push_back(std::string("plug-in variance unavailable: ") + e.what());
        }
    } else {
        r.notes.push_back("plug-in variance needs n_star in the profile");
    }
    v.ess_treated = kish_ess(f.weights.treated.solution.weights);
    v.ess_control = kish_ess(f.weights.control.solution.weights);
    const double n = d.n();
    std::optional<double> V = r.variance_plugin ? r.variance_plugin : r.variance_heuristic;
    if (V) {
        auto [lo, hi] = normal_ci(r.tau_hat, *V, n, s.level);
        r.ci_lower = lo;
        r.ci_upper = hi;
        r.ci_method = std::string("normal: tau_hat +/- z*sqrt(") + (r.variance_plugin ? "V_plugin" : "V_heuristic") +
                      "/n), n=" + std::to_string(d.n());
        v.ci_lower = lo;
        v.ci_upper = hi;
        v.level = s.level;
        v.scaling = r.ci_method;
    }
    return f;
}

// ---------------------------------------------------------------------------
// One-stage OLS as a weighting estimator

// Constraint rows for group z: normalization, X_C, and 1{G=i} X_F per study,
// all targeting the origin.
inline WeightSolution ols_implied_weights(const IdDataset& d, const EffectPartition& e, int z,
                                          const SolverSettings& cfg = {}) {
    check_partition(e, d.p());
    MatrixXd D = pooled_design(d, e, true);
    if (linalg::numerical_rank(D) < D.cols())
        fail(ErrorCode::RankDeficient, "pooled design (" + std::to_string(D.cols()) + " columns) is rank deficient");
    auto rows = d.rows_where(z);
    const int m = d.m();
    const int K = 1 + static_cast<int>(e.common.size()) + m * static_cast<int>(e.fixed.size());
    BalanceProblem p;
    p.B = MatrixXd::Zero(rows.size(), K);
    for (size_t a = 0; a < rows.size(); ++a) {
        const int r = rows[a];
        int c = 0;
        p.B(a, c++) = 1.0;
        for (int j : e.common) p.B(a, c++) = d.x(r, j);
        for (int i = 0; i < m; ++i)
            for (int j : e.fixed) p.B(a, c++) = d.study[r] == i ? d.x(r, j) : 0.0;
    }
    p.b_star = VectorXd::Zero(K);
    p.b_star[0] = 1.0;
    p.delta = VectorXd::Zero(K);
    p.nonneg = false;
    return solve_or_throw(p, cfg);
}

struct OlsFit {
    EstimateReport report;
    WeightSolution treated, control;
    VectorXd unit_weights;
};

inline OlsFit estimate_one_stage_ols(const IdDataset& d, const EffectPartition& e, const FitSettings& s = {}) {
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "estimation needs an outcome for every unit");
    OlsFit f;
    f.treated = ols_implied_weights(d, e, 1, s.solver);
    f.control = ols_implied_weights(d, e, 0, s.solver);
    f.unit_weights = VectorXd::Zero(d.n());
    double tau = 0.0;
    for (int z : {1, 0}) {
        const auto rows = d.rows_where(z);
        const auto& w = z ? f.treated.weights : f.control.weights;
        for (size_t a = 0; a < rows.size(); ++a) {
            f.unit_weights[rows[a]] = w[a];
            tau += (z ? 1.0 : -1.0) * w[a] * d.y[rows[a]];
        }
    }
    auto& r = f.report;
    r.method_tag = MethodTag::ONE_STAGE_OLS;
    r.tau_hat = tau;
    r.level = s.level;
    auto h = heuristic_variance_id(d, f.unit_weights, tau, e);
    r.variance_heuristic = h.v_heuristic;
    auto [lo, hi] = normal_ci(tau, h.v_heuristic, d.n(), s.level);
    r.ci_lower = lo;
    r.ci_upper = hi;
    r.ci_method = "normal: tau_hat +/- z*sqrt(V_heuristic/n), n=" + std::to_string(d.n());
    return f;
}

// ---------------------------------------------------------------------------
// Study-level estimation

enum class StudySource { ID_DERIVED, AD_SUPPLIED };

struct StudyEstimate {
    std::string label;
    double tau_hat = 0.0;
    double sigma2_hat = 1.0;
    VectorXd basis_means; // leading 1
    int n_i = 1;
    double scale_c = 1.0;
    StudySource source = StudySource::AD_SUPPLIED;
};

struct StudyLevelEstimates {
    std::vector<StudyEstimate> studies;
    std::vector<std::string> basis_names;

    int m() const { return static_cast<int>(studies.size()); }
};

inline StudyLevelEstimates from_ad(const AdDataset& ad) {
    StudyLevelEstimates s;
    s.basis_names = ad.basis_names;
    for (const auto& r : ad.rows)
        s.studies.push_back({r.label, r.tau_hat, r.sigma2_hat, r.basis_means, r.n_i, r.scale_c, StudySource::AD_SUPPLIED});
    return s;
}

struct AdFit {
    EstimateReport report;
    WeightSolution solution;
    std::vector<std::string> labels;
    std::optional<VarianceReport> variance;
};

inline AdFit estimate_ad(const StudyLevelEstimates& rows, const TargetProfile& profile, bool bounded,
                         const FitSettings& s = {}, bool standardize = true) {
    check_profile(profile);
    const int m = rows.m();
    if (m == 0) fail(ErrorCode::EmptyStudy, "no studies");
    const int K = static_cast<int>(rows.studies[0].basis_means.size());
    if (profile.K() != K)
        fail(ErrorCode::DimensionMismatch, "profile has " + std::to_string(profile.K()) + " entries, studies carry " +
                                               std::to_string(K) + " basis means");
    MatrixXd Braw(m, K);
    VectorXd tau(m), c(m);
    AdFit f;
    for (int i = 0; i < m; ++i) {
        const auto& st = rows.studies[i];
        if (st.basis_means.size() != K) fail(ErrorCode::DimensionMismatch, "study " + st.label + " basis length differs");
        if (!(st.sigma2_hat > 0)) fail(ErrorCode::NonPositiveVariance, "study " + st.label);
        Braw.row(i) = st.basis_means.transpose();
        tau[i] = st.tau_hat;
        c[i] = st.scale_c;
        f.labels.push_back(st.label);
    }
    BasisMatrix B;
    B.values = Braw;
    B.base_K = K;
    B.center = VectorXd::Zero(K);
    B.scale = VectorXd::Ones(K);
    B.names.push_back("(constant)");
    for (int k = 1; k < K; ++k)
        B.names.push_back(k - 1 < static_cast<int>(rows.basis_names.size()) ? rows.basis_names[k - 1]
                                                                              : "b" + std::to_string(k));
    for (int k = 0; k < K; ++k) B.constrained.push_back(k);
    if (standardize && m > 1) {
        for (int k = 1; k < K; ++k) {
            const double mu = Braw.col(k).mean();
            const double sd = std::sqrt((Braw.col(k).array() - mu).square().sum() / (m - 1));
            B.center[k] = mu;
            B.scale[k] = sd > 1e-12 * (1.0 + std::abs(mu)) ? sd : 1.0;
            B.values.col(k) = (Braw.col(k).array() - mu) / B.scale[k];
        }
    }
    TargetProfile tp = transform_profile(profile, B);
    std::vector<int> all(m);
    for (int i = 0; i < m; ++i) all[i] = i;
    std::vector<int> cols;
    auto prob = make_group_problem(B, tp, all, bounded, s.dispersion, cols);
    prob.scale = c;
    try {
        f.solution = solve_or_throw(prob, s.solver);
    } catch (InfeasibleError& e) {
        auto cert = e.certificate();
        relabel_certificate(cert, B, cols, "studies");
        throw InfeasibleError(std::string("study-level weights: ") + e.message(), cert);
    }
    auto& r = f.report;
    r.method_tag = bounded ? MethodTag::AD_BOUNDED : MethodTag::AD_UNBOUNDED;
    r.tau_hat = f.solution.weights.dot(tau);
    r.level = s.level;
    try {
        auto v = heuristic_variance_ad(tau, Braw, c, f.solution.weights, r.tau_hat);
        r.variance_heuristic = v.v_heuristic;
        auto [lo, hi] = normal_ci(r.tau_hat, v.v_heuristic, m, s.level);
        r.ci_lower = lo;
        r.ci_upper = hi;
        r.ci_method = "normal: tau_hat +/- z*sqrt(V_heuristic_AD/m), m=" + std::to_string(m);
        v.ci_lower = lo;
        v.ci_upper = hi;
        v.level = s.level;
        v.scaling = r.ci_method;
        f.variance = v;
    } catch (const Error& e) {
        r.notes.push_back(std::string("AD heuristic variance unavailable: ") + e.what());
    }
    return f;
}

// Stage I for a single ID study: reuse the global basis, minus columns that are
// constant inside the study.
inline StudyEstimate stage_one(const IdDataset& study, const BasisSpec& spec, const TargetProfile& profile,
                               bool bounded, const FitSettings& s, const std::string& label) {
    MatrixXd raw = evaluate_raw(study.x, spec);
    std::vector<Term> terms{Term{}};
    std::vector<int> keep{0};
    for (int k = 1; k < spec.K(); ++k) {
        const double mu = raw.col(k).mean();
        if ((raw.col(k).array() - mu).abs().maxCoeff() > 1e-12 * (1.0 + std::abs(mu))) {
            terms.push_back(spec.terms[k]);
            keep.push_back(k);
        }
    }
    BasisSpec sub = build_basis_spec(terms, study.p(), {}, spec.standardize);
    TargetProfile tp;
    tp.basis_targets.resize(keep.size());
    tp.tolerances.resize(keep.size());
    for (size_t q = 0; q < keep.size(); ++q) {
        tp.basis_targets[q] = profile.basis_targets[keep[q]];
        tp.tolerances[q] = profile.tolerances[keep[q]];
    }
    std::vector<int> cov;
    for (int j = 0; j < study.p(); ++j)
        if ((study.x.col(j).array() - study.x.col(j).mean()).abs().maxCoeff() > 0) cov.push_back(j);
    FitSettings ss = s;
    ss.partition = EffectPartition{{}, cov};
    IdFit fit;
    try {
        fit = estimate_id(study, sub, tp, bounded, ss);
    } catch (InfeasibleError& e) {
        auto cert = e.certificate();
        cert.group = label + "/" + cert.group;
        throw InfeasibleError("study " + label + ": " + e.message(), cert);
    } catch (const Error& e) {
        throw Error(e.code(), "study " + label + ": " + e.message());
    }
    StudyEstimate st;
    st.label = label;
    st.source = StudySource::ID_DERIVED;
    st.tau_hat = fit.report.tau_hat;
    if (!fit.report.variance_heuristic)
        fail(ErrorCode::DegenerateRegression, "study " + label + ": no heuristic variance");
    st.sigma2_hat = *fit.report.variance_heuristic / study.n();
    if (!(st.sigma2_hat > 0)) fail(ErrorCode::NonPositiveVariance, "study " + label + ": zero residual variance");
    st.basis_means = raw.colwise().mean().transpose();
    st.n_i = study.n();
    return st;
}

struct TwoStageInput {
    std::optional<IdDataset> id;
    std::optional<AdDataset> ad;
    TargetProfile profile;
    BasisSpec spec;
};

struct TwoStageFit {
    AdFit stage2;
    StudyLevelEstimates studies;
};

inline TwoStageFit estimate_two_stage(const TwoStageInput& in, bool bounded, const FitSettings& s = {},
                                      ScaleMode scale = ScaleMode::Sigma2) {
    TwoStageFit out;
    if (in.id) {
        const auto& d = *in.id;
        if (in.profile.K() != in.spec.K())
            fail(ErrorCode::DimensionMismatch, "profile length differs from the basis");
        std::vector<StudyEstimate> est(d.m());
        parallel_for(d.m(), s.threads, [&](int i) {
            est[i] = stage_one(d.subset(d.rows_of_study(i)), in.spec, in.profile, bounded, s, d.study_labels[i]);
            est[i].scale_c = scale == ScaleMode::Sigma2 ? est[i].sigma2_hat : 1.0 / est[i].n_i;
        });
        out.studies.studies = std::move(est);
        for (int k = 1; k < in.spec.K(); ++k) out.studies.basis_names.push_back(in.spec.terms[k].name(d.covariate_names));
    }
    if (in.ad) {
        auto extra = from_ad(*in.ad);
        if (in.id) {
            if (in.ad->K() != in.spec.K())
                fail(ErrorCode::DimensionMismatch, "AD basis means do not match the ID basis");
            for (const auto& st : extra.studies)
                for (const auto& other : out.studies.studies)
                    if (st.label == other.label) fail(ErrorCode::DuplicateStudyId, "study '" + st.label + "' is in both inputs");
        } else {
            out.studies.basis_names = extra.basis_names;
        }
        for (auto& st : extra.studies) out.studies.studies.push_back(std::move(st));
    }
    if (out.studies.m() == 0) fail(ErrorCode::EmptyStudy, "two-stage input has no studies");
    out.stage2 = estimate_ad(out.studies, in.profile, bounded, s, in.spec.standardize);
    if (in.id) out.stage2.report.method_tag = MethodTag::TWO_STAGE;
    return out;
}

struct ClassicalFit {
    EstimateReport report;
    VectorXd weights;
    double sigma_tau2 = 0.0;
};

// Random-effects pooling with the DerSimonian-Laird heterogeneity estimate,
// solved as the intercept-only, unbounded, zero-tolerance balance problem with
// c_i = sigma_i^2 + sigma_tau^2.
inline ClassicalFit estimate_classical_two_stage(const StudyLevelEstimates& rows, const FitSettings& s = {}) {
    const int m = rows.m();
    if (m < 2) fail(ErrorCode::DimensionMismatch, "classical pooling needs at least two studies");
    VectorXd tau(m), v(m);
    for (int i = 0; i < m; ++i) {
        tau[i] = rows.studies[i].tau_hat;
        v[i] = rows.studies[i].sigma2_hat;
        if (!(v[i] > 0)) fail(ErrorCode::NonPositiveVariance, "study " + rows.studies[i].label);
    }
    VectorXd iv = v.cwiseInverse();
    const double fe = iv.dot(tau) / iv.sum();
    const double Q = (iv.array() * (tau.array() - fe).square()).sum();
    const double denom = iv.sum() - iv.squaredNorm() / iv.sum();
    ClassicalFit f;
    f.sigma_tau2 = denom > 0 ? std::max(0.0, (Q - (m - 1)) / denom) : 0.0;
    BalanceProblem p;
    p.B = MatrixXd::Ones(m, 1);
    p.b_star = VectorXd::Ones(1);
    p.delta = VectorXd::Zero(1);
    p.nonneg = false;
    p.scale = v.array() + f.sigma_tau2;
    f.weights = solve_or_throw(p, s.solver).weights;
    auto& r = f.report;
    r.method_tag = MethodTag::CLASSICAL_TWO_STAGE;
    r.tau_hat = f.weights.dot(tau);
    r.level = s.level;
    const double var = 1.0 / p.scale.cwiseInverse().sum();
    r.variance_heuristic = var;
    auto [lo, hi] = normal_ci(r.tau_hat, var, 1.0, s.level);
    r.ci_lower = lo;
    r.ci_upper = hi;
    r.ci_method = "normal: tau_hat +/- z*sqrt(1/sum(1/c_i)), c_i = sigma_i^2 + sigma_tau^2 (DerSimonian-Laird)";
    r.notes.push_back("sigma_tau^2 = " + fmt_num(f.sigma_tau2));
    return f;
}

// ---------------------------------------------------------------------------
// Comparison estimators

inline VectorXd group_ols(const IdDataset& d, const MatrixXd& B, int z) {
    auto rows = d.rows_where(z);
    MatrixXd X(rows.size(), B.cols());
    VectorXd y(rows.size());
    for (size_t a = 0; a < rows.size(); ++a) {
        X.row(a) = B.row(rows[a]);
        y[a] = d.y[rows[a]];
    }
    return linalg::least_squares(X, y, z ? "treated outcome model" : "control outcome model").coef;
}

inline EstimateReport g_formula(const IdDataset& d, const MatrixXd& target_x, const BasisSpec& spec) {
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "estimation needs outcomes");
    if (target_x.cols() != d.p() || target_x.rows() == 0)
        fail(ErrorCode::DimensionMismatch, "target covariates must have p columns");
    MatrixXd B = evaluate_raw(d.x, spec);
    VectorXd b1 = group_ols(d, B, 1), b0 = group_ols(d, B, 0);
    VectorXd bt = evaluate_raw(target_x, spec).colwise().mean().transpose();
    EstimateReport r;
    r.method_tag = MethodTag::G_FORMULA;
    r.tau_hat = bt.dot(b1 - b0);
    return r;
}

struct ModelWeights {
    VectorXd w; // per study unit, Hajek-normalized within arm
};

// (1 - pi)/(pi e) for treated and (1 - pi)/(pi (1 - e)) for controls, where pi is
// the selection probability and e the propensity, both logistic-linear in X.
inline ModelWeights transport_weights(const IdDataset& d, const MatrixXd& target_x) {
    if (target_x.cols() != d.p() || target_x.rows() == 0)
        fail(ErrorCode::DimensionMismatch, "target covariates must have p columns");
    const int n = d.n(), nt = static_cast<int>(target_x.rows()), p = d.p();
    MatrixXd Xs(n + nt, p + 1);
    VectorXd s(n + nt);
    Xs.col(0).setOnes();
    Xs.block(0, 1, n, p) = d.x;
    Xs.block(n, 1, nt, p) = target_x;
    s.head(n).setOnes();
    s.tail(nt).setZero();
    auto sel = linalg::logistic_regression(Xs, s);
    MatrixXd Xz(n, p + 1);
    Xz.col(0).setOnes();
    Xz.rightCols(p) = d.x;
    auto prop = linalg::logistic_regression(Xz, d.z.cast<double>());
    ModelWeights mw;
    mw.w.resize(n);
    double sum[2] = {0, 0};
    for (int i = 0; i < n; ++i) {
        const double pi = sel.prob[i], e = prop.prob[i];
        mw.w[i] = (1.0 - pi) / (pi * (d.z[i] ? e : 1.0 - e));
        sum[d.z[i]] += mw.w[i];
    }
    for (int i = 0; i < n; ++i) mw.w[i] /= sum[d.z[i]];
    return mw;
}

inline EstimateReport ipw_estimator(const IdDataset& d, const MatrixXd& target_x) {
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "estimation needs outcomes");
    auto mw = transport_weights(d, target_x);
    EstimateReport r;
    r.method_tag = MethodTag::IPW;
    for (int i = 0; i < d.n(); ++i) r.tau_hat += (d.z[i] ? 1.0 : -1.0) * mw.w[i] * d.y[i];
    return r;
}

inline EstimateReport augmented_estimator(const IdDataset& d, const MatrixXd& target_x, const BasisSpec& spec) {
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "estimation needs outcomes");
    MatrixXd B = evaluate_raw(d.x, spec);
    VectorXd b1 = group_ols(d, B, 1), b0 = group_ols(d, B, 0);
    VectorXd bt = evaluate_raw(target_x, spec).colwise().mean().transpose();
    auto mw = transport_weights(d, target_x);
    double tau = bt.dot(b1 - b0);
    for (int i = 0; i < d.n(); ++i) {
        const double fit = B.row(i).dot(d.z[i] ? b1 : b0);
        tau += (d.z[i] ? 1.0 : -1.0) * mw.w[i] * (d.y[i] - fit);
    }
    EstimateReport r;
    r.method_tag = MethodTag::AUGMENTED;
    r.tau_hat = tau;
    return r;
}

} // namespace pbmeta
