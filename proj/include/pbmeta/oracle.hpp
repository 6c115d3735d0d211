#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "solver.hpp"

namespace pbmeta {

// Exact SQUARED_L2 solve by enumerating active sets. Each candidate fixes the
// retained units R and, for every row with delta > 0, whether it is slack, at its
// upper bound or at its lower bound; the equality KKT system is solved and the
// candidate is accepted when primal and dual feasibility both hold. Candidates
// are visited in a fixed order (larger R first), so the result is reproducible.
inline WeightSolution solve_qp_oracle(const BalanceProblem& p) {
    check_problem(p);
    if (p.dispersion != Dispersion::SQUARED_L2) fail(ErrorCode::NotApplicable, "oracle handles SQUARED_L2 only");
    const int n = p.n(), K = p.K();
    if (n > 16 || K > 6) fail(ErrorCode::TooLarge, "oracle is limited to n <= 16 and K <= 6");

    std::vector<int> band, equal;
    for (int k = 0; k < K; ++k) (p.delta[k] > 0 ? band : equal).push_back(k);
    const int T = static_cast<int>(band.size());
    int patterns = 1;
    for (int t = 0; t < T; ++t) patterns *= 3;

    std::vector<uint32_t> masks;
    const uint32_t full = (1u << n) - 1u;
    if (p.nonneg) {
        for (uint32_t m = 1; m <= full; ++m) masks.push_back(m);
        std::stable_sort(masks.begin(), masks.end(),
                         [](uint32_t a, uint32_t b) { return std::popcount(a) > std::popcount(b); });
    } else {
        masks.push_back(full);
    }

    const double tol = 1e-9;
    for (uint32_t mask : masks) {
        std::vector<int> R;
        for (int i = 0; i < n; ++i)
            if (mask >> i & 1u) R.push_back(i);
        const int r = static_cast<int>(R.size());
        for (int pat = 0; pat < patterns; ++pat) {
            // state per band row: 0 slack, 1 upper, 2 lower
            std::vector<int> state(T);
            for (int t = 0, q = pat; t < T; ++t, q /= 3) state[t] = q % 3;
            std::vector<int> S = equal;
            std::vector<double> tgt;
            for (int k : equal) tgt.push_back(p.b_star[k]);
            for (int t = 0; t < T; ++t) {
                if (state[t] == 0) continue;
                S.push_back(band[t]);
                tgt.push_back(p.b_star[band[t]] + (state[t] == 1 ? 1.0 : -1.0) * p.delta[band[t]]);
            }
            const int s = static_cast<int>(S.size());
            MatrixXd A(s, r);
            for (int a = 0; a < s; ++a)
                for (int c = 0; c < r; ++c) A(a, c) = p.B(R[c], S[a]);
            VectorXd cinv(r);
            for (int c = 0; c < r; ++c) cinv[c] = 1.0 / p.c(R[c]);
            VectorXd t = Eigen::Map<VectorXd>(tgt.data(), s);
            MatrixXd M = 0.5 * A * cinv.asDiagonal() * A.transpose();
            VectorXd nu = s ? VectorXd(M.completeOrthogonalDecomposition().solve(t)) : VectorXd();
            VectorXd wR = s ? VectorXd(0.5 * cinv.asDiagonal() * A.transpose() * nu) : VectorXd::Zero(r);

            if (s && (A * wR - t).lpNorm<Eigen::Infinity>() > tol * (1.0 + t.lpNorm<Eigen::Infinity>())) continue;
            bool ok = true;
            if (p.nonneg)
                for (int c = 0; c < r && ok; ++c)
                    if (wR[c] < -1e-12) ok = false;
            if (!ok) continue;
            VectorXd w = VectorXd::Zero(n);
            for (int c = 0; c < r; ++c) w[R[c]] = p.nonneg ? std::max(0.0, wR[c]) : wR[c];
            // reduced costs of the discarded units
            for (int i = 0; i < n && ok; ++i) {
                if (mask >> i & 1u) continue;
                double g = 0.0;
                for (int a = 0; a < s; ++a) g += p.B(i, S[a]) * nu[a];
                if (g > tol) ok = false;
            }
            if (!ok) continue;
            // multiplier signs and slack-row feasibility
            int a = static_cast<int>(equal.size());
            for (int q = 0; q < T && ok; ++q) {
                const int k = band[q];
                if (state[q] == 1) {
                    if (nu[a++] > tol) ok = false;
                } else if (state[q] == 2) {
                    if (nu[a++] < -tol) ok = false;
                } else {
                    double v = p.B.col(k).dot(w);
                    if (std::abs(v - p.b_star[k]) > p.delta[k] + tol) ok = false;
                }
            }
            if (!ok) continue;

            WeightSolution sol;
            sol.weights = w;
            sol.lambda = VectorXd::Zero(K);
            for (int q = 0; q < s; ++q) sol.lambda[S[q]] = -nu[q];
            for (int i = 0; i < n; ++i)
                if (w[i] > 0) sol.retained.push_back(i);
            sol.objective = detail::primal_objective(p, w);
            VectorXd res = p.B.transpose() * w - p.b_star;
            double worst = 0.0;
            for (int k = 0; k < K; ++k) worst = std::max(worst, std::abs(res[k]) - p.delta[k]);
            sol.kkt_residual = std::max(0.0, worst);
            sol.iterations = 0;
            sol.converged = true;
            return sol;
        }
    }
    InfeasibilityCertificate cert;
    cert.target.assign(p.b_star.data(), p.b_star.data() + K);
    cert.tolerance.assign(p.delta.data(), p.delta.data() + K);
    if (auto c = check_feasibility(p)) cert = *c;
    throw InfeasibleError("no active set satisfies the KKT conditions", cert);
}

} // namespace pbmeta
