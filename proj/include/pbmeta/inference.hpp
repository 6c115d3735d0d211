#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "errors.hpp"
#include "linalg.hpp"
#include "model.hpp"
#include "parallel.hpp"
#include "rng.hpp"

namespace pbmeta {

// Covariate partition for the pooled regression: C has common slopes, F has
// study-specific slopes. Indices are zero-based covariate columns.
struct EffectPartition {
    std::vector<int> fixed;  // F
    std::vector<int> common; // C

    static EffectPartition all_common(int p) {
        EffectPartition e;
        for (int j = 0; j < p; ++j) e.common.push_back(j);
        return e;
    }
};

inline void check_partition(const EffectPartition& e, int p) {
    std::set<int> seen;
    for (int j : e.fixed)
        if (j < 0 || j >= p || !seen.insert(j).second) fail(ErrorCode::IndexOutOfRange, "bad fixed-effect covariate");
    for (int j : e.common)
        if (j < 0 || j >= p || !seen.insert(j).second) fail(ErrorCode::IndexOutOfRange, "bad common-effect covariate");
}

// Pooled design: intercept, [Z], X_C, X_C*Z, and 1{G=i} X_F, 1{G=i} X_F Z for every study.
inline MatrixXd pooled_design(const IdDataset& d, const EffectPartition& e, bool with_z) {
    check_partition(e, d.p());
    const int n = d.n(), m = d.m();
    const int cols = 1 + (with_z ? 1 : 0) + 2 * static_cast<int>(e.common.size()) + 2 * m * static_cast<int>(e.fixed.size());
    MatrixXd D = MatrixXd::Zero(n, cols);
    for (int r = 0; r < n; ++r) {
        int c = 0;
        const double z = d.z[r];
        D(r, c++) = 1.0;
        if (with_z) D(r, c++) = z;
        for (int j : e.common) {
            D(r, c++) = d.x(r, j);
            D(r, c++) = d.x(r, j) * z;
        }
        for (int i = 0; i < m; ++i)
            for (int j : e.fixed) {
                const double g = d.study[r] == i ? d.x(r, j) : 0.0;
                D(r, c++) = g;
                D(r, c++) = g * z;
            }
    }
    return D;
}

inline double normal_quantile(double p) { return boost::math::quantile(boost::math::normal(), p); }

struct VarianceReport {
    double v_heuristic = 0.0;
    std::optional<double> v_plugin;
    double residual_s2 = 0.0;
    std::optional<double> s2_treated, s2_control;
    double ess_treated = 0.0, ess_control = 0.0;
    double ci_lower = 0.0, ci_upper = 0.0, level = 0.95;
    bool psd_clipped = false;
    std::string scaling;
};

// V = n s^2 sum w^2 where s^2 is the residual variance of Y - tau Z on the pooled
// design without Z, using n - rank - 1 degrees of freedom (tau counts as fitted).
inline VarianceReport heuristic_variance_id(const IdDataset& d, const VectorXd& unit_weights, double tau_hat,
                                            const EffectPartition& e) {
    if (unit_weights.size() != d.n()) fail(ErrorCode::DimensionMismatch, "one weight per unit expected");
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "variance needs outcomes");
    MatrixXd D = pooled_design(d, e, false);
    VectorXd yadj = d.y - tau_hat * d.z.cast<double>();
    auto fit = linalg::least_squares(D, yadj, "pooled design");
    const int df = d.n() - fit.rank - 1;
    if (df <= 0) fail(ErrorCode::RankDeficient, "no residual degrees of freedom");
    VarianceReport r;
    r.residual_s2 = fit.rss / df;
    r.v_heuristic = d.n() * r.residual_s2 * unit_weights.squaredNorm();
    return r;
}

// Plug-in variance. `B` holds the basis values of every unit (same
// coordinates as `b_star`). S_B is projected onto the PSD cone before use.
inline VarianceReport plugin_variance_id(const IdDataset& d, const VectorXd& unit_weights, const MatrixXd& B,
                                         const VectorXd& b_star, std::optional<int> n_star,
                                         const std::optional<MatrixXd>& target_cov = std::nullopt) {
    if (!n_star) fail(ErrorCode::MissingNStar, "plug-in variance needs the target sample size n*");
    if (!d.has_outcomes()) fail(ErrorCode::MissingOutcome, "variance needs outcomes");
    const int n = d.n(), K = static_cast<int>(B.cols());
    if (B.rows() != n || b_star.size() != K || unit_weights.size() != n)
        fail(ErrorCode::DimensionMismatch, "plug-in inputs disagree in size");
    VarianceReport r;
    VectorXd lam[2];
    double s2[2];
    for (int z = 0; z < 2; ++z) {
        std::vector<int> rows;
        for (int i = 0; i < n; ++i)
            if (d.z[i] == z && unit_weights[i] > 0) rows.push_back(i);
        if (static_cast<int>(rows.size()) <= K)
            fail(ErrorCode::RankDeficient, "retained set of group " + std::to_string(z) + " has " +
                                               std::to_string(rows.size()) + " units for " + std::to_string(K) +
                                               " basis functions");
        MatrixXd X(rows.size(), K);
        VectorXd y(rows.size());
        for (size_t a = 0; a < rows.size(); ++a) {
            X.row(a) = B.row(rows[a]);
            y[a] = d.y[rows[a]];
        }
        auto fit = linalg::least_squares(X, y, "retained-set regression");
        lam[z] = fit.coef;
        s2[z] = fit.rss / static_cast<double>(rows.size() - K);
    }
    r.s2_treated = s2[1];
    r.s2_control = s2[0];
    double first = 0.0;
    for (int i = 0; i < n; ++i) first += unit_weights[i] * unit_weights[i] * s2[d.z[i]];
    first *= n;
    MatrixXd S;
    if (target_cov) {
        S = *target_cov;
    } else {
        S = MatrixXd::Zero(K, K);
        for (int i = 0; i < n; ++i) S.noalias() += unit_weights[i] * B.row(i).transpose() * B.row(i);
        S = S / 2.0 - b_star * b_star.transpose();
    }
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (S + S.transpose()));
    VectorXd ev = es.eigenvalues();
    if ((ev.array() < 0).any()) {
        r.psd_clipped = true;
        ev = ev.cwiseMax(0.0);
    }
    VectorXd dl = es.eigenvectors().transpose() * (lam[1] - lam[0]);
    const double second = static_cast<double>(n) / *n_star * (ev.array() * dl.array().square()).sum();
    r.v_plugin = first + second;
    return r;
}

// AD version: s^2 from the no-intercept WLS of (tau_i - tau) on the study basis
// means with weights 1/c_i, df = m - rank; V = m s^2 sum w^2.
inline VarianceReport heuristic_variance_ad(const VectorXd& tau_i, const MatrixXd& Bbar, const VectorXd& c,
                                            const VectorXd& weights, double tau_hat) {
    const int m = static_cast<int>(tau_i.size());
    if (Bbar.rows() != m || c.size() != m || weights.size() != m)
        fail(ErrorCode::DimensionMismatch, "AD variance inputs disagree in size");
    VectorXd y = tau_i.array() - tau_hat;
    auto fit = linalg::weighted_least_squares(Bbar, y, c.cwiseInverse());
    const int df = m - fit.rank;
    if (df <= 0)
        fail(ErrorCode::DegenerateRegression, "AD variance needs m >= K_effective + 1 (m=" + std::to_string(m) +
                                                  ", rank=" + std::to_string(fit.rank) + ")");
    VarianceReport r;
    r.residual_s2 = fit.rss / df;
    r.v_heuristic = m * r.residual_s2 * weights.squaredNorm();
    return r;
}

// tau +/- z * sqrt(V / n_scale)
inline std::pair<double, double> normal_ci(double tau, double V, double n_scale, double level) {
    if (!(level > 0 && level < 1)) fail(ErrorCode::DimensionMismatch, "level must lie in (0,1)");
    const double h = normal_quantile(0.5 + level / 2.0) * std::sqrt(std::max(0.0, V) / n_scale);
    return {tau - h, tau + h};
}

// Sample quantile with linear interpolation between order statistics.
inline double quantile_sorted(const std::vector<double>& v, double q) {
    if (v.empty()) return std::nan("");
    const double h = (v.size() - 1) * q;
    const size_t lo = static_cast<size_t>(std::floor(h));
    const size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (h - lo) * (v[hi] - v[lo]);
}

struct BootstrapResult {
    double lower = 0.0, upper = 0.0;
    int replicates = 0;
    int failures = 0;
};

// Resamples units with replacement inside each (study, arm) stratum. Replicate b
// draws from stream (seed, b), so results are independent of thread count.
inline BootstrapResult bootstrap_ci(const std::function<double(const IdDataset&)>& estimator, const IdDataset& d,
                                    int B, double level, uint64_t seed, int threads = 0) {
    if (B < 100) fail(ErrorCode::DimensionMismatch, "bootstrap needs B >= 100");
    if (!(level > 0 && level < 1)) fail(ErrorCode::DimensionMismatch, "level must lie in (0,1)");
    std::vector<std::vector<int>> strata(2 * d.m());
    for (int i = 0; i < d.n(); ++i) strata[2 * d.study[i] + d.z[i]].push_back(i);
    std::vector<double> est(B, std::nan(""));
    parallel_for(B, threads, [&](int b) {
        Philox rng(seed, static_cast<uint32_t>(b), 0xB007u);
        std::vector<int> rows;
        rows.reserve(d.n());
        for (const auto& s : strata)
            for (size_t k = 0; k < s.size(); ++k) rows.push_back(s[rng.below(s.size())]);
        try {
            est[b] = estimator(d.subset(rows));
        } catch (const Error&) {
        }
    });
    BootstrapResult r;
    std::vector<double> ok;
    for (double v : est)
        if (std::isfinite(v)) ok.push_back(v);
    r.replicates = B;
    r.failures = B - static_cast<int>(ok.size());
    if (r.failures > 0.05 * B)
        fail(ErrorCode::TooManyFailures, std::to_string(r.failures) + " of " + std::to_string(B) +
                                             " bootstrap replicates failed");
    std::sort(ok.begin(), ok.end());
    r.lower = quantile_sorted(ok, (1.0 - level) / 2.0);
    r.upper = quantile_sorted(ok, 1.0 - (1.0 - level) / 2.0);
    return r;
}

} // namespace pbmeta
