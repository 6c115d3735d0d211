#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "csv.hpp"
#include "errors.hpp"

namespace pbmeta {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Eigen::VectorXi;

inline constexpr double kMissing = std::numeric_limits<double>::quiet_NaN();

struct IndividualRecord {
    int study_id = 1;
    int treatment = 0;
    std::vector<double> covariates;
    double outcome = kMissing;
};

struct StudyCounts {
    int n = 0;
    int treated = 0;
    int control = 0;
};

// Canonical ID data. Study ids are 1..m in first-appearance order; the
// `study` vector stores them zero-based for indexing.
struct IdDataset {
    std::vector<std::string> covariate_names;
    std::vector<std::string> study_labels;
    MatrixXd x;
    VectorXi z;
    VectorXi study;
    VectorXd y;

    int n() const { return static_cast<int>(z.size()); }
    int m() const { return static_cast<int>(study_labels.size()); }
    int p() const { return static_cast<int>(x.cols()); }

    bool has_outcomes() const {
        for (Eigen::Index i = 0; i < y.size(); ++i)
            if (std::isnan(y[i])) return false;
        return y.size() == z.size();
    }

    std::vector<StudyCounts> study_counts() const {
        std::vector<StudyCounts> c(m());
        for (int i = 0; i < n(); ++i) {
            auto& s = c[study[i]];
            ++s.n;
            (z[i] ? s.treated : s.control)++;
        }
        return c;
    }

    std::vector<int> rows_where(int group) const {
        std::vector<int> r;
        for (int i = 0; i < n(); ++i)
            if (z[i] == group) r.push_back(i);
        return r;
    }

    std::vector<int> rows_of_study(int s) const {
        std::vector<int> r;
        for (int i = 0; i < n(); ++i)
            if (study[i] == s) r.push_back(i);
        return r;
    }

    // Row subset; study labels and ids are kept as-is (no re-canonicalization).
    IdDataset subset(const std::vector<int>& rows) const {
        IdDataset d;
        d.covariate_names = covariate_names;
        d.study_labels = study_labels;
        const int k = static_cast<int>(rows.size());
        d.x.resize(k, p());
        d.z.resize(k);
        d.study.resize(k);
        d.y.resize(k);
        for (int r = 0; r < k; ++r) {
            d.x.row(r) = x.row(rows[r]);
            d.z[r] = z[rows[r]];
            d.study[r] = study[rows[r]];
            d.y[r] = y[rows[r]];
        }
        return d;
    }

    std::vector<IndividualRecord> to_records() const {
        std::vector<IndividualRecord> out(n());
        for (int i = 0; i < n(); ++i) {
            out[i].study_id = study[i] + 1;
            out[i].treatment = z[i];
            out[i].covariates.resize(p());
            for (int j = 0; j < p(); ++j) out[i].covariates[j] = x(i, j);
            out[i].outcome = y[i];
        }
        return out;
    }
};

struct IdIngest {
    IdDataset data;
    std::vector<StudyCounts> counts;
};

namespace detail {

inline IdIngest finish_id(std::vector<std::string> labels, std::vector<std::string> names,
                          std::vector<IndividualRecord>& recs, const std::vector<std::string>& raw_ids) {
    if (recs.empty()) fail(ErrorCode::EmptyStudy, "dataset has no rows");
    IdIngest out;
    auto& d = out.data;
    d.covariate_names = std::move(names);
    const int n = static_cast<int>(recs.size()), p = static_cast<int>(d.covariate_names.size());
    d.x.resize(n, p);
    d.z.resize(n);
    d.study.resize(n);
    d.y.resize(n);
    std::map<std::string, int> index;
    for (int i = 0; i < n; ++i) {
        auto [it, inserted] = index.emplace(raw_ids[i], static_cast<int>(d.study_labels.size()));
        if (inserted) d.study_labels.push_back(labels[i]);
        d.study[i] = it->second;
        d.z[i] = recs[i].treatment;
        for (int j = 0; j < p; ++j) d.x(i, j) = recs[i].covariates[j];
        d.y[i] = recs[i].outcome;
    }
    out.counts = d.study_counts();
    return out;
}

} // namespace detail

inline IdIngest validate_id_dataset(const std::vector<IndividualRecord>& records,
                                    std::vector<std::string> covariate_names) {
    std::vector<IndividualRecord> recs = records;
    std::vector<std::string> ids, labels;
    const size_t p = covariate_names.size();
    for (size_t r = 0; r < recs.size(); ++r) {
        const auto& rec = recs[r];
        if (rec.study_id <= 0)
            fail(ErrorCode::IndexOutOfRange, "row " + std::to_string(r + 1) + ": study id must be positive");
        if (rec.treatment != 0 && rec.treatment != 1)
            fail(ErrorCode::NonBinaryTreatment, "row " + std::to_string(r + 1) + ": treatment " +
                                                    std::to_string(rec.treatment));
        if (rec.covariates.size() != p)
            fail(ErrorCode::DimensionMismatch, "row " + std::to_string(r + 1) + ": expected " +
                                                   std::to_string(p) + " covariates");
        for (size_t j = 0; j < p; ++j)
            if (!std::isfinite(rec.covariates[j]))
                fail(ErrorCode::MissingCovariate, "row " + std::to_string(r + 1) + ", column " +
                                                      covariate_names[j]);
        ids.push_back(std::to_string(rec.study_id));
        labels.push_back(ids.back());
    }
    return detail::finish_id(labels, std::move(covariate_names), recs, ids);
}

// Re-validation of an already canonical dataset keeps its labels.
inline IdIngest validate_id_dataset(const IdDataset& d) {
    auto recs = d.to_records();
    auto out = validate_id_dataset(recs, d.covariate_names);
    for (auto& lab : out.data.study_labels) lab = d.study_labels[std::stoi(lab) - 1];
    return out;
}

// Columns: study_id, z, optional y, then every remaining column is a covariate.
inline IdIngest validate_id_dataset(const csv::Table& t) {
    const int cs = t.column("study_id"), cz = t.column("z"), cy = t.column("y");
    if (cs < 0 || cz < 0) fail(ErrorCode::ParseError, "ID table needs study_id and z columns");
    std::vector<int> cov;
    std::vector<std::string> names;
    for (int j = 0; j < static_cast<int>(t.header.size()); ++j)
        if (j != cs && j != cz && j != cy) {
            cov.push_back(j);
            names.push_back(t.header[j]);
        }
    std::vector<IndividualRecord> recs(t.rows.size());
    std::vector<std::string> ids(t.rows.size());
    for (size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = "row " + std::to_string(r + 1);
        if (row[cs].empty()) fail(ErrorCode::ParseError, where + ": empty study_id");
        ids[r] = row[cs];
        double zv;
        if (!csv::parse_double(row[cz], zv) || (zv != 0.0 && zv != 1.0))
            fail(ErrorCode::NonBinaryTreatment, where + ": z = '" + row[cz] + "'");
        recs[r].treatment = static_cast<int>(zv);
        recs[r].covariates.resize(cov.size());
        for (size_t j = 0; j < cov.size(); ++j) {
            double v;
            if (!csv::parse_double(row[cov[j]], v) || !std::isfinite(v))
                fail(ErrorCode::MissingCovariate, where + ", column " + names[j]);
            recs[r].covariates[j] = v;
        }
        if (cy >= 0 && !row[cy].empty()) {
            double v;
            if (!csv::parse_double(row[cy], v) || !std::isfinite(v))
                fail(ErrorCode::ParseError, where + ": bad outcome '" + row[cy] + "'");
            recs[r].outcome = v;
        }
    }
    return detail::finish_id(ids, std::move(names), recs, ids);
}

inline IdIngest read_id_csv(const std::string& path) { return validate_id_dataset(csv::read_file(path)); }

inline void write_id_csv(std::ostream& out, const IdDataset& d) {
    std::vector<std::string> h{"study_id", "z", "y"};
    h.insert(h.end(), d.covariate_names.begin(), d.covariate_names.end());
    csv::write_row(out, h);
    for (int i = 0; i < d.n(); ++i) {
        std::vector<std::string> f{d.study_labels[d.study[i]], std::to_string(d.z[i]), csv::format_double(d.y[i])};
        for (int j = 0; j < d.p(); ++j) f.push_back(csv::format_double(d.x(i, j)));
        csv::write_row(out, f);
    }
}

// ---------------------------------------------------------------------------

struct TargetProfile {
    VectorXd basis_targets;
    VectorXd tolerances;
    std::optional<int> n_star;
    std::optional<double> alpha;

    int K() const { return static_cast<int>(basis_targets.size()); }
};

inline void check_profile(const TargetProfile& t) {
    if (t.basis_targets.size() == 0 || t.tolerances.size() != t.basis_targets.size())
        fail(ErrorCode::DimensionMismatch, "basis_targets and tolerances must have equal non-zero length");
    if (t.basis_targets[0] != 1.0 || t.tolerances[0] != 0.0)
        fail(ErrorCode::DimensionMismatch, "first profile entry is the normalization row (1, tolerance 0)");
    for (Eigen::Index k = 0; k < t.K(); ++k) {
        if (!(t.tolerances[k] >= 0.0) || !std::isfinite(t.tolerances[k]))
            fail(ErrorCode::DimensionMismatch, "tolerances must be finite and non-negative");
        if (!std::isfinite(t.basis_targets[k])) fail(ErrorCode::DimensionMismatch, "non-finite target");
    }
    if (t.n_star && *t.n_star <= 0) fail(ErrorCode::DimensionMismatch, "n_star must be positive");
    if (t.alpha && !(*t.alpha > 0.0)) fail(ErrorCode::DimensionMismatch, "alpha must be positive");
}

// `means` covers the non-constant basis functions; the normalization row is prepended.
inline TargetProfile target_profile_from_means(const VectorXd& means, const VectorXd& tolerances,
                                               std::optional<int> n_star = std::nullopt,
                                               int expected = -1) {
    if (tolerances.size() != means.size())
        fail(ErrorCode::DimensionMismatch, "means and tolerances differ in length");
    if (expected >= 0 && means.size() != expected)
        fail(ErrorCode::DimensionMismatch, "expected " + std::to_string(expected) + " means, got " +
                                               std::to_string(means.size()));
    TargetProfile t;
    t.basis_targets.resize(means.size() + 1);
    t.tolerances.resize(means.size() + 1);
    t.basis_targets << 1.0, means;
    t.tolerances << 0.0, tolerances;
    t.n_star = n_star;
    check_profile(t);
    return t;
}

inline nlohmann::ordered_json profile_to_json(const TargetProfile& t) {
    nlohmann::ordered_json j;
    j["basis_targets"] = std::vector<double>(t.basis_targets.data(), t.basis_targets.data() + t.K());
    j["tolerances"] = std::vector<double>(t.tolerances.data(), t.tolerances.data() + t.K());
    j["n_star"] = t.n_star ? nlohmann::ordered_json(*t.n_star) : nlohmann::ordered_json(nullptr);
    j["alpha"] = t.alpha ? nlohmann::ordered_json(*t.alpha) : nlohmann::ordered_json(nullptr);
    return j;
}

// basis_targets carries the full vector including the leading 1. Missing
// tolerances default to zero.
inline TargetProfile profile_from_json(const nlohmann::json& j) {
    if (!j.is_object() || !j.contains("basis_targets"))
        fail(ErrorCode::ParseError, "profile needs basis_targets");
    TargetProfile t;
    try {
        auto b = j.at("basis_targets").get<std::vector<double>>();
        std::vector<double> d(b.size(), 0.0);
        if (j.contains("tolerances") && !j["tolerances"].is_null()) d = j["tolerances"].get<std::vector<double>>();
        t.basis_targets = Eigen::Map<VectorXd>(b.data(), b.size());
        t.tolerances = Eigen::Map<VectorXd>(d.data(), d.size());
        if (j.contains("n_star") && !j["n_star"].is_null()) t.n_star = j["n_star"].get<int>();
        if (j.contains("alpha") && !j["alpha"].is_null()) t.alpha = j["alpha"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseError, std::string("profile: ") + e.what());
    }
    check_profile(t);
    return t;
}

inline TargetProfile read_profile(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::ParseError, "cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseError, path + ": " + e.what());
    }
    return profile_from_json(j);
}

// ---------------------------------------------------------------------------

enum class ScaleMode { Sigma2, InverseN };

struct AdStudyRow {
    int study_id = 0;
    std::string label;
    double tau_hat = 0.0;
    double sigma2_hat = 1.0;
    int n_i = 1;
    VectorXd basis_means; // leading entry is the constant 1
    double scale_c = 1.0;
};

struct AdDataset {
    std::vector<AdStudyRow> rows;
    std::vector<std::string> basis_names; // non-constant columns

    int m() const { return static_cast<int>(rows.size()); }
    int K() const { return rows.empty() ? 0 : static_cast<int>(rows[0].basis_means.size()); }
};

struct AdIngest {
    AdDataset data;
    std::optional<TargetProfile> target;
};

// Columns: study_id, tau_hat, sigma2_hat, n, then basis means of the
// non-constant basis functions; an optional scale_c column overrides the scale.
// A row whose study_id equals `target_label` becomes the target profile.
inline AdIngest validate_ad_dataset(const csv::Table& t, ScaleMode mode = ScaleMode::Sigma2,
                                    const std::string& target_label = "") {
    const int cs = t.column("study_id"), ct = t.column("tau_hat"), cv = t.column("sigma2_hat"),
              cn = t.column("n"), cc = t.column("scale_c");
    if (cs < 0 || ct < 0 || cv < 0 || cn < 0)
        fail(ErrorCode::ParseError, "AD table needs study_id, tau_hat, sigma2_hat, n columns");
    AdIngest out;
    std::vector<int> bcols;
    for (int j = 0; j < static_cast<int>(t.header.size()); ++j)
        if (j != cs && j != ct && j != cv && j != cn && j != cc) {
            bcols.push_back(j);
            out.data.basis_names.push_back(t.header[j]);
        }
    std::map<std::string, int> seen;
    for (size_t r = 0; r < t.rows.size(); ++r) {
        const auto& row = t.rows[r];
        const std::string where = "row " + std::to_string(r + 1);
        auto num = [&](int c, const char* what) {
            double v;
            if (!csv::parse_double(row[c], v) || !std::isfinite(v))
                fail(ErrorCode::ParseError, where + ": bad " + what + " '" + row[c] + "'");
            return v;
        };
        VectorXd b(bcols.size() + 1);
        b[0] = 1.0;
        for (size_t j = 0; j < bcols.size(); ++j) b[j + 1] = num(bcols[j], "basis mean");
        if (!target_label.empty() && row[cs] == target_label) {
            double n = row[cn].empty() ? 0.0 : num(cn, "n");
            out.target = target_profile_from_means(b.tail(bcols.size()), VectorXd::Zero(bcols.size()),
                                                   n > 0 ? std::optional<int>(static_cast<int>(n)) : std::nullopt);
            continue;
        }
        if (!seen.emplace(row[cs], static_cast<int>(r)).second)
            fail(ErrorCode::DuplicateStudyId, where + ": study_id '" + row[cs] + "' repeats");
        AdStudyRow s;
        s.label = row[cs];
        s.study_id = static_cast<int>(out.data.rows.size()) + 1;
        s.tau_hat = num(ct, "tau_hat");
        s.sigma2_hat = num(cv, "sigma2_hat");
        if (!(s.sigma2_hat > 0.0)) fail(ErrorCode::NonPositiveVariance, where + ": sigma2_hat must be > 0");
        double n = num(cn, "n");
        if (!(n >= 1.0) || n != std::floor(n)) fail(ErrorCode::ParseError, where + ": n must be a positive integer");
        s.n_i = static_cast<int>(n);
        s.basis_means = b;
        s.scale_c = mode == ScaleMode::Sigma2 ? s.sigma2_hat : 1.0 / s.n_i;
        if (cc >= 0 && !row[cc].empty()) s.scale_c = num(cc, "scale_c");
        if (!(s.scale_c > 0.0)) fail(ErrorCode::NonPositiveVariance, where + ": scale_c must be > 0");
        out.data.rows.push_back(std::move(s));
    }
    return out;
}

inline AdIngest read_ad_csv(const std::string& path, ScaleMode mode = ScaleMode::Sigma2,
                            const std::string& target_label = "") {
    return validate_ad_dataset(csv::read_file(path), mode, target_label);
}

inline void write_ad_csv(std::ostream& out, const AdDataset& d) {
    std::vector<std::string> h{"study_id", "tau_hat", "sigma2_hat", "n"};
    h.insert(h.end(), d.basis_names.begin(), d.basis_names.end());
    h.push_back("scale_c");
    csv::write_row(out, h);
    for (const auto& r : d.rows) {
        std::vector<std::string> f{r.label, csv::format_double(r.tau_hat), csv::format_double(r.sigma2_hat),
                                   std::to_string(r.n_i)};
        for (Eigen::Index k = 1; k < r.basis_means.size(); ++k) f.push_back(csv::format_double(r.basis_means[k]));
        f.push_back(csv::format_double(r.scale_c));
        csv::write_row(out, f);
    }
}

// ---------------------------------------------------------------------------

enum class MethodTag {
    ID_BOUNDED,
    ID_UNBOUNDED,
    ONE_STAGE_OLS,
    TWO_STAGE,
    AD_BOUNDED,
    AD_UNBOUNDED,
    G_FORMULA,
    IPW,
    AUGMENTED,
    CLASSICAL_TWO_STAGE,
};

inline const char* to_string(MethodTag t) {
    switch (t) {
    case MethodTag::ID_BOUNDED: return "ID_BOUNDED";
    case MethodTag::ID_UNBOUNDED: return "ID_UNBOUNDED";
    case MethodTag::ONE_STAGE_OLS: return "ONE_STAGE_OLS";
    case MethodTag::TWO_STAGE: return "TWO_STAGE";
    case MethodTag::AD_BOUNDED: return "AD_BOUNDED";
    case MethodTag::AD_UNBOUNDED: return "AD_UNBOUNDED";
    case MethodTag::G_FORMULA: return "G_FORMULA";
    case MethodTag::IPW: return "IPW";
    case MethodTag::AUGMENTED: return "AUGMENTED";
    case MethodTag::CLASSICAL_TWO_STAGE: return "CLASSICAL_TWO_STAGE";
    }
    return "?";
}

inline std::optional<MethodTag> parse_method(const std::string& s) {
    for (int i = 0; i <= static_cast<int>(MethodTag::CLASSICAL_TWO_STAGE); ++i)
        if (s == to_string(static_cast<MethodTag>(i))) return static_cast<MethodTag>(i);
    return std::nullopt;
}

struct EstimateReport {
    double tau_hat = 0.0;
    std::optional<double> variance_heuristic;
    std::optional<double> variance_plugin;
    std::optional<double> ci_lower, ci_upper;
    double level = 0.95;
    std::string ci_method;
    MethodTag method_tag = MethodTag::ID_BOUNDED;
    std::string diagnostics_ref;
    std::vector<std::string> notes;
};

} // namespace pbmeta
