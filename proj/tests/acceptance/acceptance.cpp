// Acceptance run: one PASS/FAIL line per criterion; exit status 1 if any fail.
#include <pbmeta/diagnostics.hpp>
#include <pbmeta/estimators.hpp>
#include <pbmeta/oracle.hpp>
#include <pbmeta/simlab.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>

using namespace pbmeta;
namespace fs = std::filesystem;

namespace {

int failures = 0;

void report(bool ok, const char* name, const std::string& detail) {
    std::printf("%s  %-28s %s\n", ok ? "PASS" : "FAIL", name, detail.c_str());
    std::fflush(stdout);
    if (!ok) ++failures;
}

std::string fmt(const char* f, auto... a) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, a...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Guards each criterion so one crash does not hide the others.
void criterion(const char* name, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(false, name, std::string("exception: ") + e.what());
    }
}

BalanceProblem random_problem(Philox& g, int n, int K, bool mixed_delta) {
    BalanceProblem p;
    p.B.resize(n, K);
    p.B.col(0).setOnes();
    for (int i = 0; i < n; ++i)
        for (int k = 1; k < K; ++k) p.B(i, k) = g.normal();
    VectorXd a(n);
    for (int i = 0; i < n; ++i) a[i] = 0.05 + g.uniform();
    a /= a.sum();
    p.b_star = p.B.transpose() * a;
    if (g.below(3) == 0)
        for (int k = 1; k < K; ++k) p.b_star[k] += g.normal();
    p.delta = VectorXd::Zero(K);
    if (mixed_delta)
        for (int k = 1; k < K; ++k) p.delta[k] = g.below(2) ? 0.2 : 0.0;
    p.nonneg = g.below(2) == 1;
    return p;
}

IdDataset random_id(Philox& g, int n, int p, int m) {
    std::vector<IndividualRecord> rr;
    for (int i = 0; i < n; ++i) {
        IndividualRecord q;
        q.study_id = 1 + i % m;
        q.treatment = g.bernoulli(0.5) ? 1 : 0;
        for (int j = 0; j < p; ++j) q.covariates.push_back(g.normal() + 0.4 * q.study_id);
        q.outcome = g.normal();
        for (int j = 0; j < p; ++j) q.outcome += (0.5 + q.treatment * 0.3 * j) * q.covariates[j];
        rr.push_back(q);
    }
    std::vector<std::string> nm;
    for (int j = 0; j < p; ++j) nm.push_back("x" + std::to_string(j + 1));
    return validate_id_dataset(rr, nm).data;
}

// Interacted regression design written out independently of the library:
// 1, Z, then (X_j, X_j Z) for common j and (1{G=i} X_j, 1{G=i} X_j Z) for fixed j.
MatrixXd regression_design(const IdDataset& d, const EffectPartition& e) {
    const int cols = 2 + 2 * static_cast<int>(e.common.size()) + 2 * d.m() * static_cast<int>(e.fixed.size());
    MatrixXd D(d.n(), cols);
    for (int r = 0; r < d.n(); ++r) {
        int c = 0;
        D(r, c++) = 1.0;
        D(r, c++) = d.z[r];
        for (int j : e.common) {
            D(r, c++) = d.x(r, j);
            D(r, c++) = d.x(r, j) * d.z[r];
        }
        for (int i = 0; i < d.m(); ++i)
            for (int j : e.fixed) {
                const double v = d.study[r] == i ? d.x(r, j) : 0.0;
                D(r, c++) = v;
                D(r, c++) = v * d.z[r];
            }
    }
    return D;
}

EffectPartition random_partition(Philox& g, int p, bool with_fixed) {
    EffectPartition e;
    for (int j = 0; j < p; ++j) (with_fixed && (j == 0 || g.below(2)) ? e.fixed : e.common).push_back(j);
    return e;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PBMETA_CLI) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

sim::SimResult simulate(sim::Overlap o, int n, int R, std::vector<MethodTag> methods) {
    sim::SimDesign d;
    d.overlap = o;
    d.target_study_n = n;
    return sim::run_replications(sim::calibrate_intercepts(d), methods, R, 0);
}

const sim::SimMetrics& metric(const sim::SimResult& r, MethodTag m) {
    for (const auto& x : r.metrics)
        if (x.method == m) return x;
    throw std::runtime_error("method missing from simulation");
}

} // namespace

int main() {
    std::optional<sim::SimMetrics> partial_1000, full_1000;

    criterion("dual_oracle_equivalence", [] {
        Philox g(2024);
        auto t0 = std::chrono::steady_clock::now();
        double worst = 0.0;
        int mismatched = 0, infeasible = 0;
        for (int r = 0; r < 200; ++r) {
            const int n = 3 + static_cast<int>(g.below(10)), K = 1 + static_cast<int>(g.below(4));
            auto p = random_problem(g, n, K, true);
            std::optional<VectorXd> a, b;
            try {
                a = solve_or_throw(p).weights;
            } catch (const InfeasibleError&) {
            }
            try {
                b = solve_qp_oracle(p).weights;
            } catch (const InfeasibleError&) {
            }
            if (!a || !b) {
                mismatched += a.has_value() != b.has_value();
                infeasible += !a && !b;
                continue;
            }
            worst = std::max(worst, (*a - *b).cwiseAbs().maxCoeff());
        }
        const double t = seconds_since(t0);
        report(worst <= 1e-7 && mismatched == 0 && t < 10.0, "dual_oracle_equivalence",
               fmt("max|w-w_oracle| = %.2e (<= 1e-7), feasibility disagreements %d, infeasible %d, %.2f s (< 10 s)",
                   worst, mismatched, infeasible, t));
    });

    criterion("ols_weighting_equivalence", [] {
        Philox g(7);
        double worst = 0.0;
        for (int t = 0; t < 50; ++t) {
            const int p = 1 + static_cast<int>(g.below(4)), m = 1 + static_cast<int>(g.below(3));
            const int n = 60 + static_cast<int>(g.below(141));
            auto d = random_id(g, n, p, m);
            auto e = random_partition(g, p, t % 2 == 1);
            auto w = estimate_one_stage_ols(d, e);
            MatrixXd D = regression_design(d, e);
            VectorXd beta = D.colPivHouseholderQr().solve(d.y);
            worst = std::max(worst, std::abs(w.report.tau_hat - beta[1]));
        }
        report(worst <= 1e-8, "ols_weighting_equivalence", fmt("max|tau(weights) - tau(regression)| = %.2e (<= 1e-8)", worst));
    });

    criterion("restriction_relaxation", [] {
        Philox g(99);
        double worst = 0.0;
        int nonzero_off = 0, solves = 0;
        while (solves < 100) {
            const int n = 20 + static_cast<int>(g.below(60)), K = 2 + static_cast<int>(g.below(4));
            auto p = random_problem(g, n, K, true);
            p.nonneg = true;
            if (g.below(2)) p.dispersion = Dispersion::NEG_ENTROPY;
            if (p.dispersion == Dispersion::NEG_ENTROPY) continue; // entropy weights never hit zero
            WeightSolution s;
            try {
                s = solve_or_throw(p);
            } catch (const InfeasibleError&) {
                continue;
            }
            ++solves;
            BalanceProblem q = p;
            q.nonneg = false;
            q.B.resize(s.retained.size(), K);
            for (size_t a = 0; a < s.retained.size(); ++a) q.B.row(a) = p.B.row(s.retained[a]);
            auto u = solve_or_throw(q);
            std::vector<bool> in(n, false);
            for (size_t a = 0; a < s.retained.size(); ++a) {
                in[s.retained[a]] = true;
                worst = std::max(worst, std::abs(u.weights[a] - s.weights[s.retained[a]]));
            }
            for (int i = 0; i < n; ++i)
                if (!in[i] && s.weights[i] != 0.0) ++nonzero_off;
        }
        report(worst <= 1e-8 && nonzero_off == 0, "restriction_relaxation",
               fmt("100 solves: max on-R gap %.2e (<= 1e-8), off-R weights not exactly 0: %d", worst, nonzero_off));
    });

    criterion("heuristic_variance_equality", [] {
        Philox g(31);
        double worst = 0.0;
        for (int t = 0; t < 50; ++t) {
            const int p = 1 + static_cast<int>(g.below(4)), m = 1 + static_cast<int>(g.below(3));
            auto d = random_id(g, 60 + static_cast<int>(g.below(141)), p, m);
            auto e = random_partition(g, p, t % 2 == 1);
            auto fit = estimate_one_stage_ols(d, e);
            MatrixXd D = regression_design(d, e);
            Eigen::ColPivHouseholderQR<MatrixXd> qr(D);
            VectorXd beta = qr.solve(d.y);
            const double s2 = (d.y - D * beta).squaredNorm() / (d.n() - D.cols());
            const double direct = s2 * (D.transpose() * D).inverse()(1, 1);
            worst = std::max(worst, std::abs(*fit.report.variance_heuristic / d.n() - direct));
        }
        report(worst <= 1e-8, "heuristic_variance_equality",
               fmt("max|V_heuristic/n - Var(Z coef)| = %.2e (<= 1e-8)", worst));
    });

    criterion("dual_gradient_check", [] {
        Philox g(5);
        double worst[2] = {0.0, 0.0};
        for (int di = 0; di < 2; ++di) {
            for (int t = 0; t < 20; ++t) {
                auto p = random_problem(g, 25, 4, true);
                p.dispersion = di ? Dispersion::NEG_ENTROPY : Dispersion::SQUARED_L2;
                p.scale = VectorXd(25);
                for (int i = 0; i < 25; ++i) p.scale[i] = 0.5 + g.uniform();
                VectorXd lam(4);
                for (int k = 0; k < 4; ++k) lam[k] = 0.5 * g.normal();
                auto [f, grad] = dual_objective(lam, p);
                const double h = 1e-6;
                for (int k = 0; k < 4; ++k) {
                    VectorXd a = lam, b = lam;
                    a[k] += h;
                    b[k] -= h;
                    const double fd = (dual_objective(a, p).first - dual_objective(b, p).first) / (2 * h);
                    worst[di] = std::max(worst[di], std::abs(fd - grad[k]));
                }
            }
        }
        report(worst[0] <= 1e-6 && worst[1] <= 1e-6, "dual_gradient_check",
               fmt("max |analytic - central difference|: L2 %.2e, entropy %.2e (<= 1e-6)", worst[0], worst[1]));
    });

    criterion("simulation_partial_overlap", [&] {
        auto t0 = std::chrono::steady_clock::now();
        auto r = simulate(sim::Overlap::PARTIAL, 1000, 500, sim::default_sim_methods());
        const double t = seconds_since(t0);
        const auto& b = metric(r, MethodTag::ID_BOUNDED);
        const auto& u = metric(r, MethodTag::ID_UNBOUNDED);
        const auto& ipw = metric(r, MethodTag::IPW);
        const auto& aug = metric(r, MethodTag::AUGMENTED);
        partial_1000 = b;
        const bool ok = std::abs(b.bias) <= 0.02 && b.rmse >= 0.12 && b.rmse <= 0.20 && u.bias >= -0.80 &&
                        u.bias <= -0.58 && ipw.bias >= 2.9 && ipw.bias <= 4.3 && aug.bias >= 0.35 && aug.bias <= 0.80;
        report(ok, "simulation_partial_overlap",
               fmt("R=500: bounded bias %.4f rmse %.4f; unbounded bias %.4f; ipw bias %.4f; augmented bias %.4f; "
                   "failures %d; %.1f s",
                   b.bias, b.rmse, u.bias, ipw.bias, aug.bias, b.failures, t));
    });

    criterion("simulation_full_overlap", [&] {
        auto r = simulate(sim::Overlap::FULL, 1000, 1000, {MethodTag::ID_BOUNDED});
        const auto& b = metric(r, MethodTag::ID_BOUNDED);
        full_1000 = b;
        report(b.coverage >= 0.93 && b.coverage <= 0.97 && std::abs(b.bias) <= 0.01, "simulation_full_overlap",
               fmt("R=1000: coverage %.3f in [0.93, 0.97], bounded bias %.4f (|.| <= 0.01), ci length %.4f", b.coverage,
                   b.bias, b.ci_length));
    });

    criterion("support_detection", [] {
        double tpr = 0.0, tnr = 0.0;
        for (int seed = 1; seed <= 20; ++seed) {
            sim::SimDesign d;
            d.overlap = sim::Overlap::PARTIAL;
            d.target_study_n = 5000;
            d.seed = seed;
            d = sim::calibrate_intercepts(d);
            auto s = sim::generate_dataset(d, 0);
            auto w = solve_id_weights(s.data, build_basis_spec(identity_terms(3), 3), s.profile, true);
            auto sum = support_detection_summary(w.unit_weights, s.in_support);
            tpr += sum.tpr / 20;
            tnr += sum.tnr / 20;
        }
        report(tpr >= 0.95 && tnr >= 0.90, "support_detection",
               fmt("n=5000, 20 seeds: in-support kept %.4f (>= 0.95), out-of-support zeroed %.4f (>= 0.90)", tpr, tnr));
    });

    criterion("consistency_trend", [&] {
        if (!partial_1000 || !full_1000) {
            report(false, "consistency_trend", "n=1000 runs unavailable");
            return;
        }
        std::string detail;
        bool ok = true;
        for (auto o : {sim::Overlap::PARTIAL, sim::Overlap::FULL}) {
            const auto& small = o == sim::Overlap::PARTIAL ? *partial_1000 : *full_1000;
            auto big = metric(simulate(o, 5000, 200, {MethodTag::ID_BOUNDED}), MethodTag::ID_BOUNDED);
            const double se = std::sqrt(small.mc_se * small.mc_se + big.mc_se * big.mc_se);
            const bool pass = std::abs(big.bias) <= std::abs(small.bias) + 2 * se;
            ok = ok && pass;
            detail += fmt("%s |bias| n=5000 %.4f vs n=1000 %.4f (+2se %.4f); ", sim::to_string(o), std::abs(big.bias),
                          std::abs(small.bias), 2 * se);
        }
        report(ok, "consistency_trend", detail);
    });

    criterion("determinism", [] {
        const auto root = fs::temp_directory_path() / ("pbmeta_accept_" + std::to_string(::getpid()));
        const std::string data = PBMETA_DEMO_DATA;
        std::vector<std::string> outs[2];
        bool ran = true;
        for (int k = 0; k < 2; ++k) {
            const auto dir = root / std::to_string(k);
            fs::remove_all(dir);
            const std::string threads = k ? " --threads 1" : "";
            ran &= run_cli("simulate --design partial --n 1000 --reps 20 --seed 11" + threads + " --out " +
                           (dir / "sim").string()) == 0;
            ran &= run_cli("fit-id --data " + data + "/id.csv --profile " + data + "/target.json --boot 200 --seed 3" +
                           threads + " --out " + (dir / "id").string()) == 0;
            ran &= run_cli("fit-ad --data " + data + "/ad.csv --target-study target --out " + (dir / "ad").string()) == 0;
            ran &= run_cli("fit-mixed --id " + data + "/id.csv --ad " + data + "/ad.csv --profile " + data +
                           "/target.json --out " + (dir / "mixed").string()) == 0;
            for (auto f : {"sim/metrics.csv", "sim/simulation.json", "id/estimate.json", "id/weights.csv",
                           "id/diagnostics/summary.json", "ad/estimate.json", "mixed/estimate.json"})
                outs[k].push_back(slurp(dir / f));
        }
        int differ = 0, empty = 0;
        for (size_t i = 0; i < outs[0].size(); ++i) {
            differ += outs[0][i] != outs[1][i];
            empty += outs[0][i].empty();
        }
        fs::remove_all(root);
        report(ran && differ == 0 && empty == 0, "determinism",
               fmt("%zu output files compared across two runs (threads default vs 1): %d differ, %d missing",
                   outs[0].size(), differ, empty));
    });

    std::printf("%s\n", failures ? "ACCEPTANCE FAILED" : "ACCEPTANCE PASSED");
    return failures ? 1 : 0;
}
