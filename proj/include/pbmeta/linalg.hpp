#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <vector>

#include "errors.hpp"

namespace pbmeta::linalg {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Minimum-norm solution of A x = b; singular values below rel_tol * sigma_max are dropped.
inline std::string format_g(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

inline VectorXd pinv_solve(const MatrixXd& A, const VectorXd& b, double rel_tol = 1e-12) {
    if (A.size() == 0) return VectorXd::Zero(A.cols());
    Eigen::BDCSVD<MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& s = svd.singularValues();
    const double cut = rel_tol * (s.size() ? s[0] : 0.0);
    VectorXd utb = svd.matrixU().transpose() * b;
    for (Eigen::Index i = 0; i < s.size(); ++i) utb[i] = s[i] > cut && s[i] > 0 ? utb[i] / s[i] : 0.0;
    return svd.matrixV() * utb;
}

inline int numerical_rank(const MatrixXd& X, double rel_tol = 1e-10) {
    if (X.size() == 0) return 0;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    qr.setThreshold(rel_tol);
    return static_cast<int>(qr.rank());
}

struct LsFit {
    VectorXd coef;
    VectorXd resid;
    double rss = 0.0;
    int rank = 0;
};

// Ordinary least squares through a column-pivoted QR. Throws RankDeficient when
// the design lacks full column rank.
inline LsFit least_squares(const MatrixXd& X, const VectorXd& y, const char* what = "design") {
    LsFit f;
    Eigen::ColPivHouseholderQR<MatrixXd> qr(X);
    qr.setThreshold(1e-10);
    f.rank = static_cast<int>(qr.rank());
    if (f.rank < X.cols())
        fail(ErrorCode::RankDeficient, std::string(what) + " has rank " + std::to_string(f.rank) + " < " +
                                           std::to_string(X.cols()) + " columns");
    f.coef = qr.solve(y);
    f.resid = y - X * f.coef;
    f.rss = f.resid.squaredNorm();
    return f;
}

// Weighted least squares, minimizing sum v_i (y_i - x_i b)^2. Rank-tolerant:
// the minimum-norm coefficient is returned and `rank` reports the effective rank.
inline LsFit weighted_least_squares(const MatrixXd& X, const VectorXd& y, const VectorXd& v) {
    LsFit f;
    VectorXd sv = v.array().sqrt();
    MatrixXd Xw = sv.asDiagonal() * X;
    VectorXd yw = sv.asDiagonal() * y;
    f.rank = numerical_rank(Xw);
    f.coef = pinv_solve(Xw, yw, 1e-10);
    f.resid = y - X * f.coef;
    f.rss = (v.array() * f.resid.array().square()).sum();
    return f;
}

struct NnlsResult {
    VectorXd x;
    VectorXd residual; // b - A x
    int iterations = 0;
    bool converged = false;
};

// Lawson-Hanson active-set NNLS: min |A x - b| subject to x >= 0.
inline NnlsResult nnls(const MatrixXd& A, const VectorXd& b, int max_iter = -1, double tol = -1.0) {
    const Eigen::Index n = A.cols();
    if (max_iter < 0) max_iter = static_cast<int>(3 * n + 50);
    if (tol < 0) tol = 10.0 * std::numeric_limits<double>::epsilon() * A.norm() * std::max<Eigen::Index>(A.rows(), n);
    NnlsResult r;
    r.x = VectorXd::Zero(n);
    std::vector<char> passive(n, 0);
    VectorXd w = A.transpose() * b;
    auto solve_passive = [&](VectorXd& z) {
        std::vector<Eigen::Index> idx;
        for (Eigen::Index j = 0; j < n; ++j)
            if (passive[j]) idx.push_back(j);
        MatrixXd Ap(A.rows(), idx.size());
        for (size_t c = 0; c < idx.size(); ++c) Ap.col(c) = A.col(idx[c]);
        VectorXd zp = Ap.colPivHouseholderQr().solve(b);
        z = VectorXd::Zero(n);
        for (size_t c = 0; c < idx.size(); ++c) z[idx[c]] = zp[c];
    };
    while (r.iterations < max_iter) {
        Eigen::Index jmax = -1;
        double wmax = tol;
        for (Eigen::Index j = 0; j < n; ++j)
            if (!passive[j] && w[j] > wmax) {
                wmax = w[j];
                jmax = j;
            }
        if (jmax < 0) {
            r.converged = true;
            break;
        }
        passive[jmax] = 1;
        VectorXd z;
        for (;;) {
            ++r.iterations;
            solve_passive(z);
            bool ok = true;
            for (Eigen::Index j = 0; j < n; ++j)
                if (passive[j] && z[j] <= 0) ok = false;
            if (ok || r.iterations > max_iter) break;
            double alpha = std::numeric_limits<double>::infinity();
            for (Eigen::Index j = 0; j < n; ++j)
                if (passive[j] && z[j] <= 0) alpha = std::min(alpha, r.x[j] / (r.x[j] - z[j]));
            r.x += alpha * (z - r.x);
            for (Eigen::Index j = 0; j < n; ++j)
                if (passive[j] && r.x[j] <= tol) {
                    passive[j] = 0;
                    r.x[j] = 0.0;
                }
        }
        r.x = z;
        w = A.transpose() * (b - A * r.x);
    }
    r.residual = b - A * r.x;
    return r;
}

struct LogisticFit {
    VectorXd coef;
    VectorXd prob;
    int iterations = 0;
};

// Logistic regression by iteratively reweighted least squares.
inline LogisticFit logistic_regression(const MatrixXd& X, const VectorXd& y, int max_iter = 100, double tol = 1e-10) {
    const Eigen::Index n = X.rows(), p = X.cols();
    LogisticFit f;
    f.coef = VectorXd::Zero(p);
    VectorXd eta = VectorXd::Zero(n);
    for (f.iterations = 1; f.iterations <= max_iter; ++f.iterations) {
        VectorXd mu = (1.0 + (-eta.array()).exp()).inverse();
        VectorXd w = (mu.array() * (1.0 - mu.array())).max(1e-300);
        MatrixXd H = X.transpose() * w.asDiagonal() * X;
        VectorXd g = X.transpose() * (y - mu);
        Eigen::LDLT<MatrixXd> ldlt(H);
        if (ldlt.info() != Eigen::Success || !ldlt.isPositive())
            fail(ErrorCode::NonConvergence, "logistic information matrix is singular");
        VectorXd step = ldlt.solve(g);
        if (!step.allFinite()) fail(ErrorCode::NonConvergence, "logistic step is not finite");
        f.coef += step;
        eta = X * f.coef;
        if (f.coef.cwiseAbs().maxCoeff() > 1e6)
            fail(ErrorCode::NonConvergence, "logistic coefficients diverge (separation)");
        if (step.cwiseAbs().maxCoeff() <= tol * (1.0 + f.coef.cwiseAbs().maxCoeff())) {
            f.prob = (1.0 + (-eta.array()).exp()).inverse();
            return f;
        }
    }
    fail(ErrorCode::NonConvergence, "logistic IRLS did not converge in " + std::to_string(max_iter) + " iterations");
}

} // namespace pbmeta::linalg
