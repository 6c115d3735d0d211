#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "linalg.hpp"

namespace pbmeta {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class Dispersion { SQUARED_L2, NEG_ENTROPY };

inline const char* to_string(Dispersion d) { return d == Dispersion::SQUARED_L2 ? "SQUARED_L2" : "NEG_ENTROPY"; }

// min sum_i c_i psi(w_i)  s.t.  |sum_i w_i B_ik - b*_k| <= delta_k,  w >= 0 if nonneg.
struct BalanceProblem {
    MatrixXd B;
    VectorXd b_star;
    VectorXd delta;
    Dispersion dispersion = Dispersion::SQUARED_L2;
    bool nonneg = true;
    VectorXd scale; // empty means all ones

    int n() const { return static_cast<int>(B.rows()); }
    int K() const { return static_cast<int>(B.cols()); }
    double c(int i) const { return scale.size() ? scale[i] : 1.0; }
};

struct SolverSettings {
    double tolerance = 1e-9;
    int max_iter = 500;
};

struct WeightSolution {
    VectorXd weights;
    VectorXd lambda; // dual variables, w_i = rho'(B_i' lambda / c_i) truncated at 0
    std::vector<int> retained;
    double kkt_residual = 0.0;
    int iterations = 0;
    double objective = 0.0;
    bool converged = true;
};

inline void check_problem(const BalanceProblem& p) {
    if (p.n() < 1) fail(ErrorCode::DimensionMismatch, "balance problem has no rows");
    if (p.b_star.size() != p.K() || p.delta.size() != p.K())
        fail(ErrorCode::DimensionMismatch, "target/tolerance length differs from basis width " + std::to_string(p.K()));
    if (p.scale.size() && p.scale.size() != p.n()) fail(ErrorCode::DimensionMismatch, "scale length differs from n");
    for (Eigen::Index k = 0; k < p.delta.size(); ++k)
        if (!(p.delta[k] >= 0)) fail(ErrorCode::DimensionMismatch, "tolerances must be non-negative");
    for (Eigen::Index i = 0; i < p.scale.size(); ++i)
        if (!(p.scale[i] > 0)) fail(ErrorCode::DimensionMismatch, "scale must be positive");
}

namespace detail {

struct DualState {
    double value = 0.0;
    VectorXd grad; // smooth part: b* - B' w
    VectorXd w;
    VectorXd curv; // generalized second derivative per unit, already divided by c_i
};

// Dual f(l) = sum_i c_i Phi(B_i'l / c_i) + b*'l + delta'|l| where Phi = -rho for the
// unbounded program and its positive-part counterpart when w >= 0 is imposed.
// L2: rho(v) = -v^2/4, w = max(0, rho'(v)) = max(0, -v/2). Entropy: Phi(v) = w = exp(-v-1).
inline DualState dual_state(const BalanceProblem& p, const VectorXd& lambda, bool want_curv = true) {
    DualState s;
    const int n = p.n();
    VectorXd u = p.B * lambda;
    s.w.resize(n);
    if (want_curv) s.curv.resize(n);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
        const double c = p.c(i), v = u[i] / c;
        if (p.dispersion == Dispersion::SQUARED_L2) {
            if (!p.nonneg || v < 0) {
                s.w[i] = -0.5 * v;
                acc += c * 0.25 * v * v;
                if (want_curv) s.curv[i] = 0.5 / c;
            } else {
                s.w[i] = 0.0;
                if (want_curv) s.curv[i] = 0.0;
            }
        } else {
            const double e = std::exp(-v - 1.0);
            s.w[i] = e;
            acc += c * e;
            if (want_curv) s.curv[i] = e / c;
        }
    }
    s.value = acc + p.b_star.dot(lambda) + p.delta.dot(lambda.cwiseAbs());
    s.grad = p.b_star - p.B.transpose() * s.w;
    return s;
}

inline VectorXd pseudo_gradient(const VectorXd& g, const VectorXd& lambda, const VectorXd& delta) {
    VectorXd pg = g;
    for (Eigen::Index k = 0; k < g.size(); ++k) {
        const double d = delta[k];
        if (d == 0.0) continue;
        if (lambda[k] > 0) pg[k] = g[k] + d;
        else if (lambda[k] < 0) pg[k] = g[k] - d;
        else if (g[k] + d < 0) pg[k] = g[k] + d;
        else if (g[k] - d > 0) pg[k] = g[k] - d;
        else pg[k] = 0.0;
    }
    return pg;
}

inline double primal_objective(const BalanceProblem& p, const VectorXd& w) {
    double o = 0.0;
    for (int i = 0; i < p.n(); ++i) {
        if (p.dispersion == Dispersion::SQUARED_L2) o += p.c(i) * w[i] * w[i];
        else if (w[i] > 0) o += p.c(i) * w[i] * std::log(w[i]);
    }
    return o;
}

} // namespace detail

// Value and gradient of the dual; the L1 term contributes delta * sign(lambda)
// with sign(0) = 0.
inline std::pair<double, VectorXd> dual_objective(const VectorXd& lambda, const BalanceProblem& p) {
    check_problem(p);
    if (lambda.size() != p.K()) fail(ErrorCode::DimensionMismatch, "lambda length differs from K");
    auto s = detail::dual_state(p, lambda, false);
    VectorXd g = s.grad;
    for (Eigen::Index k = 0; k < g.size(); ++k)
        g[k] += p.delta[k] * (lambda[k] > 0 ? 1.0 : lambda[k] < 0 ? -1.0 : 0.0);
    return {s.value, g};
}

// Feasibility of the constraint set via NNLS. Returns an empty optional when a
// point satisfies the constraints to within `tol`; otherwise a certificate.
inline std::optional<InfeasibilityCertificate> check_feasibility(const BalanceProblem& p, double tol = 1e-7) {
    const int n = p.n(), K = p.K();
    std::vector<int> band;
    for (int k = 0; k < K; ++k)
        if (p.delta[k] > 0) band.push_back(k);
    const int T = static_cast<int>(band.size());
    const int nw = p.nonneg ? n : 2 * n;
    MatrixXd A = MatrixXd::Zero(K + T, nw + 2 * T);
    VectorXd b(K + T);
    A.topLeftCorner(K, n) = p.B.transpose();
    if (!p.nonneg) A.block(0, n, K, n) = -p.B.transpose();
    b.head(K) = p.b_star;
    for (int t = 0; t < T; ++t) {
        const int k = band[t];
        // sum w B_k - a_k = b*_k - delta_k with a_k + s_k = 2 delta_k, a_k, s_k >= 0
        A(k, nw + 2 * t) = -1.0;
        b[k] -= p.delta[k];
        A(K + t, nw + 2 * t) = 1.0;
        A(K + t, nw + 2 * t + 1) = 1.0;
        b[K + t] = 2.0 * p.delta[k];
    }
    auto r = linalg::nnls(A, b);
    const double res = r.residual.norm();
    if (res <= tol * (1.0 + b.norm())) return std::nullopt;
    InfeasibilityCertificate cert;
    VectorXd w = r.x.head(n);
    if (!p.nonneg) w -= r.x.segment(n, n);
    VectorXd closest = p.B.transpose() * w;
    cert.direction.assign(r.residual.data(), r.residual.data() + K);
    cert.closest.assign(closest.data(), closest.data() + K);
    cert.target.assign(p.b_star.data(), p.b_star.data() + K);
    cert.tolerance.assign(p.delta.data(), p.delta.data() + K);
    cert.residual = res;
    for (int k = 0; k < K; ++k)
        if (std::abs(closest[k] - p.b_star[k]) > p.delta[k] + tol * (1.0 + std::abs(p.b_star[k])))
            cert.violated.push_back(k);
    return cert;
}

[[noreturn]] inline void throw_infeasible(const BalanceProblem& p, const std::string& why) {
    auto cert = check_feasibility(p);
    if (!cert) {
        InfeasibilityCertificate c;
        c.target.assign(p.b_star.data(), p.b_star.data() + p.K());
        c.tolerance.assign(p.delta.data(), p.delta.data() + p.K());
        throw InfeasibleError(why + " (constraint set is only marginally feasible)", c);
    }
    throw InfeasibleError(why, *cert);
}

inline WeightSolution solve_balancing_weights(const BalanceProblem& p, const SolverSettings& cfg = {}) {
    check_problem(p);
    const int n = p.n(), K = p.K();
    const double c1 = 1e-4;

    // Start from the equality-constrained unbounded solution.
    VectorXd lambda = VectorXd::Zero(K);
    if (p.dispersion == Dispersion::SQUARED_L2) {
        VectorXd cinv(n);
        for (int i = 0; i < n; ++i) cinv[i] = 1.0 / p.c(i);
        MatrixXd G = p.B.transpose() * cinv.asDiagonal() * p.B;
        lambda = -2.0 * linalg::pinv_solve(G, p.b_star);
    } else {
        bool const_col = (p.B.col(0).array() == 1.0).all() && p.b_star[0] == 1.0;
        if (const_col) {
            double cbar = 0.0;
            for (int i = 0; i < n; ++i) cbar += p.c(i);
            cbar /= n;
            lambda[0] = cbar * (std::log(static_cast<double>(n)) - 1.0);
        }
    }

    auto st = detail::dual_state(p, lambda);
    const double f0 = st.value;
    const double floor_value = -(1.0 / cfg.tolerance) * (1.0 + std::abs(f0));
    VectorXd pg = detail::pseudo_gradient(st.grad, lambda, p.delta);
    WeightSolution sol;
    int it = 0;
    bool stalled = false;
    for (; it < cfg.max_iter; ++it) {
        if (pg.lpNorm<Eigen::Infinity>() <= cfg.tolerance) break;

        std::vector<int> freeset;
        for (int k = 0; k < K; ++k)
            if (p.delta[k] == 0.0 || lambda[k] != 0.0 || pg[k] != 0.0) freeset.push_back(k);
        const int F = static_cast<int>(freeset.size());
        MatrixXd BF(n, F);
        for (int f = 0; f < F; ++f) BF.col(f) = p.B.col(freeset[f]);
        MatrixXd H = BF.transpose() * st.curv.asDiagonal() * BF;
        const double mu = 1e-10 * (1.0 + H.diagonal().cwiseAbs().maxCoeff());
        H.diagonal().array() += mu;
        VectorXd rhs(F);
        for (int f = 0; f < F; ++f) rhs[f] = -pg[freeset[f]];
        Eigen::LDLT<MatrixXd> ldlt(H);
        VectorXd d = VectorXd::Zero(K);
        if (ldlt.info() == Eigen::Success) {
            VectorXd dF = ldlt.solve(rhs);
            for (int f = 0; f < F; ++f) d[freeset[f]] = dF[f];
        }
        for (int k = 0; k < K; ++k)
            if (p.delta[k] > 0 && lambda[k] == 0.0 && d[k] * pg[k] >= 0) d[k] = 0.0;
        if (!d.allFinite() || pg.dot(d) >= 0) d = -pg;

        // Orthant of the current iterate; zero coordinates take the side of -pg.
        VectorXd xi(K);
        for (int k = 0; k < K; ++k)
            xi[k] = lambda[k] != 0 ? (lambda[k] > 0 ? 1.0 : -1.0) : (pg[k] < 0 ? 1.0 : pg[k] > 0 ? -1.0 : 0.0);
        auto project = [&](VectorXd x) {
            for (int k = 0; k < K; ++k)
                if (p.delta[k] > 0 && x[k] * xi[k] <= 0) x[k] = 0.0;
            return x;
        };

        // Near the optimum the predicted decrease drops below the rounding error
        // of f; there a step is judged by the pseudo-gradient instead.
        const double noise = 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(st.value));
        const double pg_norm = pg.lpNorm<Eigen::Infinity>();
        auto search = [&](const VectorXd& dir, VectorXd& out, detail::DualState& out_state) {
            double t = 1.0;
            for (int ls = 0; ls < 60; ++ls, t *= 0.5) {
                VectorXd cand = project(lambda + t * dir);
                auto cs = detail::dual_state(p, cand);
                const double pred = pg.dot(cand - lambda);
                if (std::isfinite(cs.value) && -pred <= noise && cs.value <= st.value + noise &&
                    detail::pseudo_gradient(cs.grad, cand, p.delta).lpNorm<Eigen::Infinity>() <= 0.5 * pg_norm) {
                    out = std::move(cand);
                    out_state = std::move(cs);
                    return true;
                }
                if (std::isfinite(cs.value) && cs.value <= st.value + c1 * pred) {
                    out = std::move(cand);
                    out_state = std::move(cs);
                    return true;
                }
                if (std::isfinite(cs.value) && cs.value < floor_value) {
                    out = std::move(cand);
                    out_state = std::move(cs);
                    return true;
                }
            }
            return false;
        };

        VectorXd next;
        detail::DualState ns;
        bool ok = search(d, next, ns);
        if (!ok && d != -pg) ok = search(-pg, next, ns);
        if (!ok) {
            stalled = true;
            break;
        }
        lambda = std::move(next);
        st = std::move(ns);
        pg = detail::pseudo_gradient(st.grad, lambda, p.delta);
        if (st.value < floor_value)
            throw_infeasible(p, "dual objective diverges along a ray; no weights satisfy the constraints");
    }

    sol.lambda = lambda;
    sol.weights = st.w;
    sol.iterations = it;
    sol.kkt_residual = pg.lpNorm<Eigen::Infinity>();
    sol.converged = sol.kkt_residual <= cfg.tolerance;
    if (!sol.converged && stalled && sol.kkt_residual <= 1e3 * cfg.tolerance) sol.converged = true;
    if (!sol.converged) {
        auto cert = check_feasibility(p);
        if (cert) throw InfeasibleError("solver did not converge and the constraint set is empty", *cert);
    }
    for (int i = 0; i < n; ++i)
        if (sol.weights[i] > 0) sol.retained.push_back(i);
    sol.objective = detail::primal_objective(p, sol.weights);
    return sol;
}

// Throws when the solve stopped short of the tolerance.
inline WeightSolution solve_or_throw(const BalanceProblem& p, const SolverSettings& cfg = {}) {
    auto s = solve_balancing_weights(p, cfg);
    if (!s.converged)
        fail(ErrorCode::MaxIterations, "balancing solve stopped at KKT residual " + linalg::format_g(s.kkt_residual) +
                                           " after " + std::to_string(s.iterations) + " iterations");
    return s;
}

} // namespace pbmeta
