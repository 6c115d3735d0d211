#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "basis.hpp"
#include "csv.hpp"
#include "estimators.hpp"
#include "model.hpp"

namespace pbmeta {

inline double effective_sample_size(const VectorXd& w) { return kish_ess(w); }

struct AsmdRow {
    std::string name;
    int column = 0;
    double sd = 0.0;
    double treated = 0.0, control = 0.0;                   // weighted
    double baseline_treated = 0.0, baseline_control = 0.0; // uniform weights
    bool skipped = false;
};

// Per basis column k >= 2: |sum_i w_i B_k(x_i) - B*_k| / sd_k with sd_k the
// unweighted sample sd over both groups. All inputs in raw (unstandardized) scale.
inline std::vector<AsmdRow> asmd_report(const MatrixXd& B, const std::vector<std::string>& names, const IdDataset& d,
                                        const VectorXd& unit_weights, const VectorXd& b_star,
                                        std::vector<std::string>* notes = nullptr) {
    std::vector<AsmdRow> out;
    const int n = d.n();
    int cnt[2] = {0, 0};
    for (int i = 0; i < n; ++i) ++cnt[d.z[i]];
    for (int k = 1; k < B.cols(); ++k) {
        AsmdRow r;
        r.column = k;
        r.name = k < static_cast<int>(names.size()) ? names[k] : "b" + std::to_string(k + 1);
        const double mu = B.col(k).mean();
        r.sd = n > 1 ? std::sqrt((B.col(k).array() - mu).square().sum() / (n - 1)) : 0.0;
        if (!(r.sd > 0)) {
            r.skipped = true;
            if (notes) notes->push_back("ASMD skipped for zero-variance column " + r.name);
            out.push_back(r);
            continue;
        }
        double wm[2] = {0, 0}, um[2] = {0, 0};
        for (int i = 0; i < n; ++i) {
            wm[d.z[i]] += unit_weights[i] * B(i, k);
            um[d.z[i]] += B(i, k) / cnt[d.z[i]];
        }
        r.treated = std::abs(wm[1] - b_star[k]) / r.sd;
        r.control = std::abs(wm[0] - b_star[k]) / r.sd;
        r.baseline_treated = std::abs(um[1] - b_star[k]) / r.sd;
        r.baseline_control = std::abs(um[0] - b_star[k]) / r.sd;
        out.push_back(r);
    }
    return out;
}

struct SignReversalEntry {
    int row = 0;
    int group = 0;
    double weight = 0.0;
    double derivative = 0.0; // d tau_hat / d Y_row
};

struct SignReversalReport {
    std::vector<SignReversalEntry> entries;
    double negative_mass = 0.0;
    double negative_mass_treated = 0.0, negative_mass_control = 0.0;

    bool empty() const { return entries.empty(); }
};

// A negative weight means raising that unit's outcome moves its group mean the
// wrong way: d tau/d Y = +w for treated units and -w for controls.
inline SignReversalReport sign_reversal_report(const VectorXd& unit_weights, const VectorXi& z) {
    SignReversalReport r;
    for (Eigen::Index i = 0; i < unit_weights.size(); ++i) {
        if (!(unit_weights[i] < 0)) continue;
        const int g = z.size() ? z[i] : 1;
        r.entries.push_back({static_cast<int>(i), g, unit_weights[i], g ? unit_weights[i] : -unit_weights[i]});
        r.negative_mass -= unit_weights[i];
        (g ? r.negative_mass_treated : r.negative_mass_control) -= unit_weights[i];
    }
    return r;
}

inline SignReversalReport sign_reversal_report(const VectorXd& weights) {
    return sign_reversal_report(weights, VectorXi());
}

struct SupportSummary {
    double tpr = std::nan("");
    double tnr = std::nan("");
    int in_support = 0, out_support = 0;
};

inline SupportSummary support_detection_summary(const VectorXd& weights, const std::vector<bool>& in_support) {
    if (static_cast<Eigen::Index>(in_support.size()) != weights.size())
        fail(ErrorCode::DimensionMismatch, "one support flag per weight expected");
    if ((weights.array() < 0).any())
        fail(ErrorCode::NotApplicable, "support detection needs non-negative (bounded) weights");
    SupportSummary s;
    int tp = 0, tn = 0;
    for (Eigen::Index i = 0; i < weights.size(); ++i) {
        if (in_support[i]) {
            ++s.in_support;
            tp += weights[i] > 0;
        } else {
            ++s.out_support;
            tn += weights[i] == 0;
        }
    }
    if (s.in_support) s.tpr = static_cast<double>(tp) / s.in_support;
    if (s.out_support) s.tnr = static_cast<double>(tn) / s.out_support;
    return s;
}

struct WeightRecord {
    int row = 0;
    std::string study;
    int group = 0;
    double weight = 0.0;
    bool retained = false;
};

struct DiagnosticsBundle {
    std::vector<WeightRecord> weight_records;
    double ess_treated = 0.0, ess_control = 0.0;
    int retained_treated = 0, retained_control = 0;
    std::vector<AsmdRow> asmd;
    int negative_weight_count = 0;
    SignReversalReport sign_reversal;
    std::vector<std::string> study_labels;
    std::vector<double> donor_share_treated, donor_share_control;
    std::optional<SupportSummary> support;
    std::vector<std::string> lambda_names;
    std::vector<double> lambda_treated, lambda_control; // solver coordinates
    std::vector<std::string> notes;
};

inline DiagnosticsBundle build_diagnostics(const IdDataset& d, const IdWeights& w, const TargetProfile& raw_profile,
                                           const std::vector<bool>* in_support = nullptr) {
    DiagnosticsBundle b;
    const VectorXd& uw = w.unit_weights;
    for (int i = 0; i < d.n(); ++i)
        b.weight_records.push_back({i, d.study_labels[d.study[i]], d.z[i], uw[i], uw[i] > 0});
    b.ess_treated = kish_ess(w.treated.solution.weights);
    b.ess_control = kish_ess(w.control.solution.weights);
    b.retained_treated = static_cast<int>(w.treated.solution.retained.size());
    b.retained_control = static_cast<int>(w.control.solution.retained.size());
    MatrixXd raw = evaluate_raw(d.x, w.basis.spec);
    std::vector<std::string> names(w.basis.names.begin(), w.basis.names.begin() + w.basis.base_K);
    b.asmd = asmd_report(raw, names, d, uw, raw_profile.basis_targets, &b.notes);
    b.sign_reversal = sign_reversal_report(uw, d.z);
    b.negative_weight_count = static_cast<int>(b.sign_reversal.entries.size());
    b.study_labels = d.study_labels;
    b.donor_share_treated.assign(d.m(), 0.0);
    b.donor_share_control.assign(d.m(), 0.0);
    for (int i = 0; i < d.n(); ++i) (d.z[i] ? b.donor_share_treated : b.donor_share_control)[d.study[i]] += uw[i];
    if (in_support && w.bounded) b.support = support_detection_summary(uw, *in_support);
    b.lambda_names = w.basis.names;
    b.lambda_treated.assign(w.treated.lambda.data(), w.treated.lambda.data() + w.treated.lambda.size());
    b.lambda_control.assign(w.control.lambda.data(), w.control.lambda.data() + w.control.lambda.size());
    if (!w.bounded && b.negative_weight_count)
        b.notes.push_back("unbounded weights: ESS is reported for signed weights");
    return b;
}

inline nlohmann::ordered_json number_or_null(double v) {
    return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr);
}

inline nlohmann::ordered_json diagnostics_summary_json(const DiagnosticsBundle& b) {
    using J = nlohmann::ordered_json;
    J j;
    j["ess"] = {{"treated", b.ess_treated}, {"control", b.ess_control}};
    j["retained"] = {{"treated", b.retained_treated}, {"control", b.retained_control}};
    j["negative_weight_count"] = b.negative_weight_count;
    j["negative_mass"] = {{"treated", b.sign_reversal.negative_mass_treated},
                          {"control", b.sign_reversal.negative_mass_control}};
    J asmd = J::array();
    for (const auto& r : b.asmd) {
        J a;
        a["basis"] = r.name;
        if (r.skipped) {
            a["skipped"] = true;
        } else {
            a["sd"] = r.sd;
            a["treated"] = r.treated;
            a["control"] = r.control;
            a["unweighted_treated"] = r.baseline_treated;
            a["unweighted_control"] = r.baseline_control;
        }
        asmd.push_back(a);
    }
    j["asmd"] = asmd;
    J donors = J::array();
    for (size_t s = 0; s < b.study_labels.size(); ++s)
        donors.push_back({{"study", b.study_labels[s]},
                          {"treated", b.donor_share_treated[s]},
                          {"control", b.donor_share_control[s]}});
    j["donor_shares"] = donors;
    j["lambda"] = {{"basis", b.lambda_names}, {"treated", b.lambda_treated}, {"control", b.lambda_control}};
    if (b.support)
        j["support"] = {{"tpr", number_or_null(b.support->tpr)},
                        {"tnr", number_or_null(b.support->tnr)},
                        {"in_support", b.support->in_support},
                        {"out_of_support", b.support->out_support}};
    j["notes"] = b.notes;
    return j;
}

inline void write_weights_csv(std::ostream& out, const IdDataset& d, const DiagnosticsBundle& b) {
    std::vector<std::string> h{"row", "study_id", "z", "weight", "retained"};
    h.insert(h.end(), d.covariate_names.begin(), d.covariate_names.end());
    csv::write_row(out, h);
    for (const auto& r : b.weight_records) {
        std::vector<std::string> f{std::to_string(r.row + 1), r.study, std::to_string(r.group),
                                   csv::format_double(r.weight), r.retained ? "1" : "0"};
        for (int j = 0; j < d.p(); ++j) f.push_back(csv::format_double(d.x(r.row, j)));
        csv::write_row(out, f);
    }
}

inline void write_asmd_csv(std::ostream& out, const DiagnosticsBundle& b) {
    csv::write_row(out, {"basis", "sd", "asmd_treated", "asmd_control", "unweighted_treated", "unweighted_control"});
    for (const auto& r : b.asmd) {
        if (r.skipped) {
            csv::write_row(out, {r.name, "0", "", "", "", ""});
            continue;
        }
        csv::write_row(out, {r.name, csv::format_double(r.sd), csv::format_double(r.treated),
                             csv::format_double(r.control), csv::format_double(r.baseline_treated),
                             csv::format_double(r.baseline_control)});
    }
}

// Scatter of two covariates, marker area proportional to |weight|; negative
// weights drawn hollow, discarded units as small grey dots.
inline std::string weights_scatter_svg(const IdDataset& d, const DiagnosticsBundle& b, int jx, int jy,
                                       const std::vector<double>& target = {}) {
    const double W = 640, H = 480, pad = 50;
    if (d.p() == 0) return "<svg xmlns=\"http://www.w3.org/2000/svg\"/>\n";
    if (jy >= d.p()) jy = jx;
    const double x0 = d.x.col(jx).minCoeff(), x1 = d.x.col(jx).maxCoeff();
    const double y0 = d.x.col(jy).minCoeff(), y1 = d.x.col(jy).maxCoeff();
    auto sx = [&](double v) { return pad + (x1 > x0 ? (v - x0) / (x1 - x0) : 0.5) * (W - 2 * pad); };
    auto sy = [&](double v) { return H - pad - (y1 > y0 ? (v - y0) / (y1 - y0) : 0.5) * (H - 2 * pad); };
    double wmax = 0;
    for (const auto& r : b.weight_records) wmax = std::max(wmax, std::abs(r.weight));
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
    s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s << "<text x=\"" << W / 2 << "\" y=\"" << H - 10 << "\" text-anchor=\"middle\">" << d.covariate_names[jx]
      << "</text>\n";
    s << "<text x=\"15\" y=\"" << H / 2 << "\" transform=\"rotate(-90 15 " << H / 2 << ")\" text-anchor=\"middle\">"
      << d.covariate_names[jy] << "</text>\n";
    for (const auto& r : b.weight_records) {
        const double cx = sx(d.x(r.row, jx)), cy = sy(d.x(r.row, jy));
        const char* color = r.group ? "#c0392b" : "#2471a3";
        if (r.weight == 0) {
            s << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"1\" fill=\"#bbbbbb\"/>\n";
            continue;
        }
        const double rad = 1.0 + 8.0 * std::sqrt(std::abs(r.weight) / (wmax > 0 ? wmax : 1.0));
        if (r.weight > 0)
            s << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << rad << "\" fill=\"" << color
              << "\" fill-opacity=\"0.5\"/>\n";
        else
            s << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"" << rad << "\" fill=\"none\" stroke=\"" << color
              << "\"/>\n";
    }
    if (target.size() > static_cast<size_t>(std::max(jx, jy)))
        s << "<path d=\"M" << sx(target[jx]) - 6 << ' ' << sy(target[jy]) << " h12 M" << sx(target[jx]) << ' '
          << sy(target[jy]) - 6 << " v12\" stroke=\"black\" stroke-width=\"2\"/>\n";
    s << "</svg>\n";
    return s.str();
}

} // namespace pbmeta
