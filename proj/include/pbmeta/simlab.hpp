#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include "csv.hpp"
#include "errors.hpp"
#include "estimators.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace pbmeta::sim {

enum class Overlap { FULL, PARTIAL };

inline const char* to_string(Overlap o) { return o == Overlap::FULL ? "full" : "partial"; }

inline double expit(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

struct Calibration {
    double beta0 = 0.0;
    double zeta0 = 0.0, zeta0_tilde = 0.0;
    std::vector<double> trial_shares; // achieved on the calibration draws
    double population_tau = 0.0;
};

struct SimDesign {
    int total_n = 10000;
    Overlap overlap = Overlap::FULL;
    double omega = 0.9;
    bool balanced_trials = true;
    bool z_varies = true;
    double rho = 0.5;
    VectorXd beta = VectorXd::Constant(3, std::log(2.0));
    VectorXd zeta = VectorXd::Constant(3, std::log(1.5));
    VectorXd zeta_tilde = VectorXd::Constant(3, std::log(0.75));
    double theta_00 = 1.5, theta_10 = 0.5;
    VectorXd theta_0 = VectorXd::Constant(3, 1.0);
    VectorXd theta_1 = VectorXd::Constant(3, -1.0);
    int target_study_n = 1000;
    uint64_t seed = 1;
    int calibration_draws = 1000000;
    std::optional<Calibration> calibration;

    int p() const { return static_cast<int>(beta.size()); }

    MatrixXd covariance() const {
        MatrixXd S = MatrixXd::Constant(p(), p(), rho);
        S.diagonal().setOnes();
        return S;
    }

    std::vector<double> trial_targets() const {
        return balanced_trials ? std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}
                               : std::vector<double>{4.0 / 7, 2.0 / 7, 1.0 / 7};
    }

    std::vector<double> treat_prob() const {
        return z_varies ? std::vector<double>{0.5, 1.0 / 3, 2.0 / 3} : std::vector<double>{0.5, 0.5, 0.5};
    }

    // V is the set where expit(beta'x) <= omega.
    bool in_support(double u) const { return overlap == Overlap::FULL || expit(u) <= omega; }

    double selection_prob(double u, double beta0) const { return in_support(u) ? expit(beta0 + u) : 1.0; }
};

inline void check_design(const SimDesign& d) {
    const int p = d.p();
    if (p == 0 || d.zeta.size() != p || d.zeta_tilde.size() != p || d.theta_0.size() != p || d.theta_1.size() != p)
        fail(ErrorCode::DimensionMismatch, "design coefficient vectors must share one length");
    if (d.total_n <= d.target_study_n || d.target_study_n <= 0)
        fail(ErrorCode::DimensionMismatch, "need 0 < n < total_n");
    if (!(d.omega > 0 && d.omega < 1)) fail(ErrorCode::DimensionMismatch, "omega must lie in (0,1)");
    if (!(d.rho > -1.0 / (p > 1 ? p - 1 : 1) && d.rho < 1)) fail(ErrorCode::DimensionMismatch, "rho out of range");
}

namespace detail {

// u = beta'X is normal with variance beta' Sigma beta; every population
// quantity below depends on X only through u and E[X | u] = Sigma beta u / s2.
inline double u_sd(const SimDesign& d) {
    const MatrixXd S = d.covariance();
    return std::sqrt(std::max(0.0, d.beta.dot(S * d.beta)));
}

template <class F>
double normal_expectation(F&& f, double sd, std::optional<double> cut = std::nullopt) {
    if (sd == 0.0) return f(0.0);
    auto g = [&](double u) { return f(u) * std::exp(-0.5 * u * u / (sd * sd)) / (sd * 2.5066282746310002); };
    using GK = boost::math::quadrature::gauss_kronrod<double, 61>;
    const double L = 14.0 * sd;
    if (!cut || *cut <= -L || *cut >= L) return GK::integrate(g, -L, L, 20, 1e-13);
    return GK::integrate(g, -L, *cut, 20, 1e-13) + GK::integrate(g, *cut, L, 20, 1e-13);
}

inline std::optional<double> support_cut(const SimDesign& d) {
    if (d.overlap == Overlap::FULL) return std::nullopt;
    return logit(d.omega);
}

inline Eigen::LLT<MatrixXd> cholesky(const SimDesign& d) { return Eigen::LLT<MatrixXd>(d.covariance()); }

} // namespace detail

// Intercept of the (untruncated) selection model giving E[#S=1] = n.
inline double calibrate_beta0(const SimDesign& d) {
    const double sd = detail::u_sd(d);
    const double share = static_cast<double>(d.target_study_n) / d.total_n;
    auto F = [&](double b0) { return detail::normal_expectation([&](double u) { return expit(b0 + u); }, sd) - share; };
    double lo = -40, hi = 40;
    if (F(lo) > 0 || F(hi) < 0) fail(ErrorCode::RootFindFailure, "selection intercept is not bracketed");
    boost::uintmax_t it = 200;
    auto r = boost::math::tools::toms748_solve(F, lo, hi, boost::math::tools::eps_tolerance<double>(50), it);
    if (it >= 200) fail(ErrorCode::RootFindFailure, "selection intercept did not converge");
    return 0.5 * (r.first + r.second);
}

// Population effect in the target (S=0) population by quadrature.
inline double truth_quadrature(const SimDesign& d, double beta0) {
    const double sd = detail::u_sd(d);
    const auto cut = detail::support_cut(d);
    auto wt = [&](double u) { return 1.0 - d.selection_prob(u, beta0); };
    const double mass = detail::normal_expectation(wt, sd, cut);
    if (!(mass > 0)) fail(ErrorCode::RootFindFailure, "target population is empty");
    const double Eu = detail::normal_expectation([&](double u) { return u * wt(u); }, sd, cut) / mass;
    double slope = 0.0;
    if (sd > 0) slope = (d.theta_1 - d.theta_0).dot(d.covariance() * d.beta) / (sd * sd);
    // Units outside V are never in the target, so the branch term of the
    // partial design does not enter.
    return d.theta_10 - d.theta_00 + slope * Eu;
}

// Trial intercepts by damped Newton on Monte Carlo trial shares among the
// selected units (selection probabilities used as importance weights).
inline std::pair<double, double> calibrate_trials(const SimDesign& d, double beta0, std::vector<double>* shares) {
    const int M = d.calibration_draws, p = d.p();
    auto L = detail::cholesky(d);
    VectorXd a(M), b(M), ws(M);
    Philox rng(d.seed, 0xCA11u, 0u);
    VectorXd e(p);
    for (int i = 0; i < M; ++i) {
        for (int j = 0; j < p; ++j) e[j] = rng.normal();
        VectorXd x = L.matrixL() * e;
        a[i] = d.zeta.dot(x);
        b[i] = d.zeta_tilde.dot(x);
        ws[i] = d.selection_prob(d.beta.dot(x), beta0);
    }
    ws /= ws.sum();
    const auto t = d.trial_targets();
    auto eval = [&](double z0, double z1, Eigen::Vector2d& F, Eigen::Matrix2d& J) {
        F.setZero();
        J.setZero();
        for (int i = 0; i < M; ++i) {
            const double e2 = std::exp(z0 + a[i]), e3 = std::exp(z1 + b[i]), den = 1.0 + e2 + e3;
            const double p2 = e2 / den, p3 = e3 / den, w = ws[i];
            F[0] += w * p2;
            F[1] += w * p3;
            J(0, 0) += w * p2 * (1 - p2);
            J(1, 1) += w * p3 * (1 - p3);
            J(0, 1) -= w * p2 * p3;
        }
        J(1, 0) = J(0, 1);
        F[0] -= t[1];
        F[1] -= t[2];
    };
    double z0 = std::log(t[1] / t[0]), z1 = std::log(t[2] / t[0]);
    Eigen::Vector2d F, Fn;
    Eigen::Matrix2d J, Jn;
    eval(z0, z1, F, J);
    for (int it = 0; it < 100 && F.lpNorm<Eigen::Infinity>() > 1e-12; ++it) {
        Eigen::Vector2d step = J.ldlt().solve(-F);
        double s = 1.0;
        for (int h = 0; h < 40; ++h, s *= 0.5) {
            eval(z0 + s * step[0], z1 + s * step[1], Fn, Jn);
            if (Fn.norm() < F.norm()) break;
        }
        if (!(Fn.norm() < F.norm())) break;
        z0 += s * step[0];
        z1 += s * step[1];
        F = Fn;
        J = Jn;
    }
    if (!(F.lpNorm<Eigen::Infinity>() <= 1e-8)) fail(ErrorCode::RootFindFailure, "trial intercepts did not converge");
    if (shares) *shares = {1.0 - t[1] - F[0] - t[2] - F[1], t[1] + F[0], t[2] + F[1]};
    return {z0, z1};
}

inline SimDesign calibrate_intercepts(SimDesign d) {
    check_design(d);
    Calibration c;
    c.beta0 = calibrate_beta0(d);
    std::tie(c.zeta0, c.zeta0_tilde) = calibrate_trials(d, c.beta0, &c.trial_shares);
    c.population_tau = truth_quadrature(d, c.beta0);
    d.calibration = c;
    return d;
}

struct SimDraw {
    IdDataset data;
    MatrixXd target_x;
    std::vector<bool> in_support; // per study unit
    double true_tau = 0.0;        // mean of Y(1) - Y(0) over the target sample
    double population_tau = 0.0;
    TargetProfile profile;        // identity basis means of the target sample
};

inline SimDraw generate_dataset(const SimDesign& d, uint32_t rep) {
    if (!d.calibration) fail(ErrorCode::CalibrationMissing, "run calibrate_intercepts first");
    const auto& c = *d.calibration;
    const int N = d.total_n, p = d.p();
    auto L = detail::cholesky(d);
    const auto pz = d.treat_prob();
    const double shift = std::log(1.0 / d.omega - 1.0);
    Philox rng(d.seed, rep, 0x51u);
    std::vector<IndividualRecord> recs;
    std::vector<VectorXd> tx;
    SimDraw out;
    double tsum = 0.0;
    VectorXd e(p);
    for (int i = 0; i < N; ++i) {
        for (int j = 0; j < p; ++j) e[j] = rng.normal();
        VectorXd x = L.matrixL() * e;
        const double u = d.beta.dot(x);
        const bool inV = d.in_support(u);
        const bool S = rng.bernoulli(d.selection_prob(u, c.beta0));
        double y1 = d.theta_10 + d.theta_1.dot(x) + rng.normal();
        double y0 = d.theta_00 + d.theta_0.dot(x) + rng.normal();
        if (!inV) {
            y1 += 0.5 * (u + shift);
            y0 -= 0.5 * (u + shift);
        }
        if (!S) {
            tx.push_back(x);
            tsum += y1 - y0;
            continue;
        }
        const double e2 = std::exp(c.zeta0 + d.zeta.dot(x)), e3 = std::exp(c.zeta0_tilde + d.zeta_tilde.dot(x));
        const double r = rng.uniform() * (1.0 + e2 + e3);
        const int g = r < 1.0 ? 0 : (r < 1.0 + e2 ? 1 : 2);
        const int z = rng.bernoulli(pz[g]) ? 1 : 0;
        IndividualRecord rec;
        rec.study_id = g + 1;
        rec.treatment = z;
        rec.covariates.assign(x.data(), x.data() + p);
        rec.outcome = z ? y1 : y0;
        recs.push_back(std::move(rec));
        out.in_support.push_back(inV);
    }
    if (recs.empty() || tx.empty()) fail(ErrorCode::EmptyStudy, "simulated study or target sample is empty");
    std::vector<std::string> names;
    for (int j = 0; j < p; ++j) names.push_back("X" + std::to_string(j + 1));
    out.data = validate_id_dataset(recs, names).data;
    // Labels follow trial numbers rather than order of appearance.
    for (auto& lab : out.data.study_labels) lab = "trial" + lab;
    out.target_x.resize(static_cast<Eigen::Index>(tx.size()), p);
    for (size_t i = 0; i < tx.size(); ++i) out.target_x.row(i) = tx[i].transpose();
    out.true_tau = tsum / tx.size();
    out.population_tau = c.population_tau;
    out.profile = target_profile_from_means(out.target_x.colwise().mean().transpose(), VectorXd::Zero(p),
                                            static_cast<int>(tx.size()));
    return out;
}

// Brute-force population effect: average Y(1) - Y(0) over simulated target
// units. Draws are split into fixed chunks so the sum order is fixed.
inline double truth_oracle(const SimDesign& d, long long draws = 10000000, int threads = 0) {
    if (!d.calibration) fail(ErrorCode::CalibrationMissing, "run calibrate_intercepts first");
    const int p = d.p();
    const long long chunk = 100000;
    const int chunks = static_cast<int>((draws + chunk - 1) / chunk);
    std::vector<double> sum(chunks, 0.0);
    std::vector<long long> cnt(chunks, 0);
    auto L = detail::cholesky(d);
    const double shift = std::log(1.0 / d.omega - 1.0), b0 = d.calibration->beta0;
    parallel_for(chunks, threads, [&](int k) {
        Philox rng(d.seed, static_cast<uint32_t>(k), 0x7207u);
        VectorXd e(p);
        const long long todo = std::min(chunk, draws - k * chunk);
        for (long long i = 0; i < todo; ++i) {
            for (int j = 0; j < p; ++j) e[j] = rng.normal();
            VectorXd x = L.matrixL() * e;
            const double u = d.beta.dot(x);
            const bool S = rng.bernoulli(d.selection_prob(u, b0));
            const double e1 = rng.normal(), e0 = rng.normal();
            if (S) continue;
            double diff = d.theta_10 - d.theta_00 + (d.theta_1 - d.theta_0).dot(x) + e1 - e0;
            if (!d.in_support(u)) diff += u + shift;
            sum[k] += diff;
            ++cnt[k];
        }
    });
    double s = 0.0;
    long long n = 0;
    for (int k = 0; k < chunks; ++k) {
        s += sum[k];
        n += cnt[k];
    }
    if (n == 0) fail(ErrorCode::EmptyStudy, "no target draws");
    return s / n;
}

// ---------------------------------------------------------------------------
// Replication harness

struct EstimatorOutcome {
    double estimate = std::nan("");
    double ci_lower = std::nan(""), ci_upper = std::nan("");
};

struct SimMetrics {
    MethodTag method = MethodTag::ID_BOUNDED;
    int replications = 0; // successful
    int failures = 0;
    double bias = std::nan("");
    double sd = std::nan("");
    double rmse = std::nan("");
    double mc_se = std::nan(""); // sd / sqrt(R)
    double ci_length = std::nan("");
    double coverage = std::nan("");
    bool sd_undefined = false;
};

// What each replication's error is measured against.
enum class TruthKind { POPULATION, TARGET_SAMPLE };

struct SimResult {
    SimDesign design;
    std::vector<MethodTag> methods;
    std::vector<std::vector<EstimatorOutcome>> raw; // [rep][method]
    std::vector<double> truth;                      // per rep
    std::vector<SimMetrics> metrics;
    TruthKind truth_kind = TruthKind::TARGET_SAMPLE;
};

inline std::vector<MethodTag> default_sim_methods() {
    return {MethodTag::ID_BOUNDED, MethodTag::ID_UNBOUNDED, MethodTag::G_FORMULA, MethodTag::IPW,
            MethodTag::AUGMENTED};
}

inline EstimatorOutcome run_estimator(MethodTag m, const SimDraw& s, const BasisSpec& spec, const FitSettings& fs) {
    EstimatorOutcome o;
    EstimateReport r;
    switch (m) {
    case MethodTag::ID_BOUNDED:
    case MethodTag::ID_UNBOUNDED: r = estimate_id(s.data, spec, s.profile, m == MethodTag::ID_BOUNDED, fs).report; break;
    case MethodTag::G_FORMULA: r = g_formula(s.data, s.target_x, spec); break;
    case MethodTag::IPW: r = ipw_estimator(s.data, s.target_x); break;
    case MethodTag::AUGMENTED: r = augmented_estimator(s.data, s.target_x, spec); break;
    default: fail(ErrorCode::NotApplicable, std::string("estimator ") + to_string(m) + " is not part of the simulation");
    }
    o.estimate = r.tau_hat;
    if (r.ci_lower && r.ci_upper) {
        o.ci_lower = *r.ci_lower;
        o.ci_upper = *r.ci_upper;
    }
    return o;
}

inline SimMetrics summarize(MethodTag m, const std::vector<double>& err, const std::vector<double>& len,
                            const std::vector<int>& cover, int failures) {
    SimMetrics s;
    s.method = m;
    s.failures = failures;
    const int R = static_cast<int>(err.size());
    s.replications = R;
    if (R == 0) return s;
    double sum = 0.0, sq = 0.0;
    for (double e : err) sum += e;
    s.bias = sum / R;
    for (double e : err) sq += (e - s.bias) * (e - s.bias);
    if (R > 1) {
        s.sd = std::sqrt(sq / (R - 1));
    } else {
        s.sd = 0.0;
        s.sd_undefined = true;
    }
    double ms = 0.0;
    for (double e : err) ms += e * e;
    s.rmse = std::sqrt(ms / R);
    s.mc_se = s.sd / std::sqrt(static_cast<double>(R));
    if (!len.empty()) {
        double l = 0.0, c = 0.0;
        for (size_t i = 0; i < len.size(); ++i) {
            l += len[i];
            c += cover[i];
        }
        s.ci_length = l / len.size();
        s.coverage = c / len.size();
    }
    return s;
}

// Replicate r draws from stream (seed, r). Results are stored per replicate and
// summed in index order, so thread count never changes the output.
inline SimResult run_replications(const SimDesign& design, const std::vector<MethodTag>& methods, int R,
                                  int threads = 0, TruthKind truth = TruthKind::TARGET_SAMPLE) {
    if (R < 1) fail(ErrorCode::DimensionMismatch, "need at least one replication");
    SimResult res;
    res.design = design.calibration ? design : calibrate_intercepts(design);
    res.methods = methods;
    res.truth_kind = truth;
    res.raw.assign(R, std::vector<EstimatorOutcome>(methods.size()));
    res.truth.assign(R, res.design.calibration->population_tau);
    const BasisSpec spec = build_basis_spec(identity_terms(res.design.p()), res.design.p());
    FitSettings fs;
    fs.threads = 1;
    parallel_for(R, threads, [&](int r) {
        SimDraw s;
        try {
            s = generate_dataset(res.design, static_cast<uint32_t>(r));
        } catch (const Error&) {
            res.truth[r] = std::nan("");
            return;
        }
        if (truth == TruthKind::TARGET_SAMPLE) res.truth[r] = s.true_tau;
        for (size_t k = 0; k < methods.size(); ++k) {
            try {
                res.raw[r][k] = run_estimator(methods[k], s, spec, fs);
            } catch (const Error&) {
            }
        }
    });
    for (size_t k = 0; k < methods.size(); ++k) {
        std::vector<double> err, len;
        std::vector<int> cover;
        int failures = 0;
        for (int r = 0; r < R; ++r) {
            const auto& o = res.raw[r][k];
            if (!std::isfinite(o.estimate)) {
                ++failures;
                continue;
            }
            err.push_back(o.estimate - res.truth[r]);
            if (std::isfinite(o.ci_lower)) {
                len.push_back(o.ci_upper - o.ci_lower);
                cover.push_back(o.ci_lower <= res.truth[r] && res.truth[r] <= o.ci_upper);
            }
        }
        res.metrics.push_back(summarize(methods[k], err, len, cover, failures));
    }
    return res;
}

inline std::vector<std::string> metrics_header(const std::vector<MethodTag>& methods) {
    std::vector<std::string> h{"overlap", "n", "balanced", "z_varies", "omega", "reps"};
    for (auto m : methods)
        for (const char* f : {"bias", "rmse", "sd", "ci_length", "coverage", "failures"})
            h.push_back(std::string(to_string(m)) + "_" + f);
    return h;
}

inline std::vector<std::string> metrics_row(const SimResult& r) {
    const auto& d = r.design;
    std::vector<std::string> row{to_string(d.overlap), std::to_string(d.target_study_n), d.balanced_trials ? "yes" : "no",
                                 d.z_varies ? "yes" : "no", csv::format_double(d.omega),
                                 std::to_string(r.raw.size())};
    for (const auto& m : r.metrics) {
        for (double v : {m.bias, m.rmse, m.sd, m.ci_length, m.coverage}) row.push_back(csv::format_double(v));
        row.push_back(std::to_string(m.failures));
    }
    return row;
}

inline void write_metrics_csv(std::ostream& out, const std::vector<SimResult>& results) {
    if (results.empty()) return;
    csv::write_row(out, metrics_header(results.front().methods));
    for (const auto& r : results) csv::write_row(out, metrics_row(r));
}

} // namespace pbmeta::sim
