#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "errors.hpp"
#include "model.hpp"

namespace pbmeta {

struct Term {
    enum Kind { CONSTANT, IDENTITY, SQUARE, INTERACTION } kind = CONSTANT;
    int j = -1; // zero-based covariate indices
    int k = -1;

    double eval(const double* x) const {
        switch (kind) {
        case CONSTANT: return 1.0;
        case IDENTITY: return x[j];
        case SQUARE: return x[j] * x[j];
        case INTERACTION: return x[j] * x[k];
        }
        return 0.0;
    }

    std::string name(const std::vector<std::string>& cov) const {
        auto nm = [&](int i) { return i < static_cast<int>(cov.size()) ? cov[i] : "x" + std::to_string(i + 1); };
        switch (kind) {
        case CONSTANT: return "(constant)";
        case IDENTITY: return nm(j);
        case SQUARE: return nm(j) + "^2";
        case INTERACTION: return nm(j) + "*" + nm(k);
        }
        return "?";
    }

    friend bool operator==(const Term&, const Term&) = default;
};

struct BasisSpec {
    std::vector<Term> terms;
    std::vector<int> across; // A, zero-based basis indices
    std::vector<int> within; // W
    bool standardize = true;

    int K() const { return static_cast<int>(terms.size()); }
};

inline std::vector<Term> identity_terms(int p) {
    std::vector<Term> t;
    for (int j = 0; j < p; ++j) t.push_back({Term::IDENTITY, j, -1});
    return t;
}

inline std::vector<Term> square_terms(int p) {
    std::vector<Term> t;
    for (int j = 0; j < p; ++j) t.push_back({Term::SQUARE, j, -1});
    return t;
}

inline std::vector<Term> interaction_terms(int p) {
    std::vector<Term> t;
    for (int j = 0; j < p; ++j)
        for (int k = j + 1; k < p; ++k) t.push_back({Term::INTERACTION, j, k});
    return t;
}

// Prepends CONSTANT when absent. `within` lists basis indices (zero-based, in the
// final numbering) to balance within each study; everything else is across.
inline BasisSpec build_basis_spec(std::vector<Term> terms, int p, std::vector<int> within = {},
                                  bool standardize = true) {
    BasisSpec s;
    s.standardize = standardize;
    if (terms.empty() || terms.front().kind != Term::CONSTANT) terms.insert(terms.begin(), Term{});
    for (size_t i = 1; i < terms.size(); ++i) {
        const auto& t = terms[i];
        if (t.kind == Term::CONSTANT) fail(ErrorCode::IndexOutOfRange, "CONSTANT may only appear first");
        if (t.j < 0 || t.j >= p || (t.kind == Term::INTERACTION && (t.k < 0 || t.k >= p)))
            fail(ErrorCode::IndexOutOfRange, "basis term refers to a covariate outside 1.." + std::to_string(p));
    }
    s.terms = std::move(terms);
    std::sort(within.begin(), within.end());
    within.erase(std::unique(within.begin(), within.end()), within.end());
    for (int k : within) {
        if (k <= 0 || k >= s.K())
            fail(ErrorCode::IndexOutOfRange, "within-study index " + std::to_string(k + 1) +
                                                 " must name a non-constant basis function");
    }
    s.within = within;
    for (int k = 0; k < s.K(); ++k)
        if (!std::binary_search(within.begin(), within.end(), k)) s.across.push_back(k);
    return s;
}

// Config form: {"terms": ["identity", "squares", "interactions", {"type":"square","var":2}, ...],
//               "within": [2, 3], "standardize": true}. Indices in config are one-based.
inline BasisSpec basis_spec_from_json(const nlohmann::json& j, int p) {
    std::vector<Term> terms;
    std::vector<int> within;
    bool standardize = true;
    auto one_based = [&](const nlohmann::json& v) {
        int i = v.get<int>();
        if (i < 1) fail(ErrorCode::IndexOutOfRange, "indices in config are one-based");
        return i - 1;
    };
    if (!j.is_null()) {
        if (j.contains("terms")) {
            for (const auto& t : j["terms"]) {
                if (t.is_string()) {
                    auto s = t.get<std::string>();
                    std::vector<Term> add;
                    if (s == "identity") add = identity_terms(p);
                    else if (s == "squares") add = square_terms(p);
                    else if (s == "interactions") add = interaction_terms(p);
                    else if (s == "constant") add = {Term{}};
                    else fail(ErrorCode::ParseError, "unknown basis shorthand '" + s + "'");
                    terms.insert(terms.end(), add.begin(), add.end());
                } else {
                    auto type = t.at("type").get<std::string>();
                    if (type == "constant") terms.push_back({});
                    else if (type == "identity") terms.push_back({Term::IDENTITY, one_based(t.at("var")), -1});
                    else if (type == "square") terms.push_back({Term::SQUARE, one_based(t.at("var")), -1});
                    else if (type == "interaction")
                        terms.push_back({Term::INTERACTION, one_based(t.at("vars").at(0)), one_based(t.at("vars").at(1))});
                    else fail(ErrorCode::ParseError, "unknown basis term type '" + type + "'");
                }
            }
        } else {
            terms = identity_terms(p);
        }
        if (j.contains("within"))
            for (const auto& w : j["within"]) within.push_back(one_based(w));
        if (j.contains("standardize")) standardize = j["standardize"].get<bool>();
    } else {
        terms = identity_terms(p);
    }
    return build_basis_spec(terms, p, within, standardize);
}

inline nlohmann::ordered_json basis_spec_to_json(const BasisSpec& s) {
    nlohmann::ordered_json j, terms = nlohmann::ordered_json::array();
    for (const auto& t : s.terms) {
        nlohmann::ordered_json o;
        switch (t.kind) {
        case Term::CONSTANT: o["type"] = "constant"; break;
        case Term::IDENTITY: o["type"] = "identity"; o["var"] = t.j + 1; break;
        case Term::SQUARE: o["type"] = "square"; o["var"] = t.j + 1; break;
        case Term::INTERACTION: o["type"] = "interaction"; o["vars"] = {t.j + 1, t.k + 1}; break;
        }
        terms.push_back(o);
    }
    j["terms"] = terms;
    nlohmann::ordered_json w = nlohmann::ordered_json::array();
    for (int k : s.within) w.push_back(k + 1);
    j["within"] = w;
    j["standardize"] = s.standardize;
    return j;
}

inline MatrixXd evaluate_raw(const MatrixXd& x, const BasisSpec& spec) {
    const Eigen::Index n = x.rows();
    MatrixXd B(n, spec.K());
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> xr = x;
    for (Eigen::Index i = 0; i < n; ++i)
        for (int k = 0; k < spec.K(); ++k) B(i, k) = spec.terms[k].eval(xr.row(i).data());
    return B;
}

struct BasisMatrix {
    MatrixXd values;
    BasisSpec spec;
    VectorXd center; // per column; (0, 1) for unscaled columns
    VectorXd scale;
    std::vector<int> constrained; // columns that enter the balance system
    int base_K = 0;               // columns before within-study augmentation
    std::vector<std::string> names;

    int K() const { return static_cast<int>(values.cols()); }
    int rows() const { return static_cast<int>(values.rows()); }
};

// Affine map into the solver's coordinates; tolerances are read in this scale.
inline TargetProfile transform_profile(const TargetProfile& t, const BasisMatrix& B) {
    if (t.K() != B.base_K)
        fail(ErrorCode::DimensionMismatch, "profile has " + std::to_string(t.K()) + " entries, basis has " +
                                               std::to_string(B.base_K));
    TargetProfile out = t;
    for (int k = 0; k < B.base_K; ++k)
        out.basis_targets[k] = (t.basis_targets[k] - B.center[k]) / B.scale[k];
    return out;
}

inline MatrixXd apply_scaling(const MatrixXd& raw, const BasisMatrix& B) {
    MatrixXd out = raw;
    for (int k = 0; k < B.base_K; ++k) out.col(k) = (raw.col(k).array() - B.center[k]) / B.scale[k];
    return out;
}

// Standardizes columns 2..K by the sample mean and sd of `x` (the study population).
inline BasisMatrix evaluate_basis(const MatrixXd& x, const BasisSpec& spec) {
    BasisMatrix B;
    B.spec = spec;
    B.values = evaluate_raw(x, spec);
    B.base_K = spec.K();
    B.center = VectorXd::Zero(spec.K());
    B.scale = VectorXd::Ones(spec.K());
    const auto n = B.values.rows();
    if (spec.standardize && n > 1) {
        for (int k = 1; k < spec.K(); ++k) {
            double mu = B.values.col(k).mean();
            double var = (B.values.col(k).array() - mu).square().sum() / static_cast<double>(n - 1);
            double sd = std::sqrt(var);
            B.center[k] = mu;
            B.scale[k] = sd > 1e-12 * (1.0 + std::abs(mu)) ? sd : 1.0;
            B.values.col(k) = (B.values.col(k).array() - mu) / B.scale[k];
        }
    }
    B.constrained = spec.across;
    for (const auto& t : spec.terms) B.names.push_back(t.name({}));
    return B;
}

inline BasisMatrix evaluate_basis(const IdDataset& data, const BasisSpec& spec) {
    if (spec.K() == 0) fail(ErrorCode::DimensionMismatch, "empty basis");
    for (const auto& t : spec.terms)
        if (t.kind != Term::CONSTANT && (t.j >= data.p() || t.k >= data.p()))
            fail(ErrorCode::DimensionMismatch, "basis refers to covariates the dataset does not have");
    auto B = evaluate_basis(data.x, spec);
    for (int k = 0; k < spec.K(); ++k) B.names[k] = spec.terms[k].name(data.covariate_names);
    return B;
}

// Appends 1{G=i}(B_k - B*_k) for every study i and k in W. Both inputs are in
// solver coordinates. `within_tol` overrides the reused across tolerances.
inline std::pair<BasisMatrix, TargetProfile> augment_within_study(const BasisMatrix& B, const IdDataset& data,
                                                                  const TargetProfile& profile,
                                                                  const std::vector<double>& within_tol = {}) {
    const auto& W = B.spec.within;
    if (W.empty()) return {B, profile};
    if (B.rows() != data.n()) fail(ErrorCode::DimensionMismatch, "basis rows do not match dataset");
    if (profile.K() != B.base_K) fail(ErrorCode::DimensionMismatch, "profile length differs from basis");
    if (!within_tol.empty() && within_tol.size() != W.size())
        fail(ErrorCode::DimensionMismatch, "within tolerance override needs one entry per W element");
    const int m = data.m(), add = m * static_cast<int>(W.size());
    BasisMatrix out = B;
    out.values.conservativeResize(Eigen::NoChange, B.K() + add);
    TargetProfile tp = profile;
    tp.basis_targets.conservativeResize(B.K() + add);
    tp.tolerances.conservativeResize(B.K() + add);
    int col = B.K();
    for (int i = 0; i < m; ++i) {
        for (size_t w = 0; w < W.size(); ++w, ++col) {
            const int k = W[w];
            for (int r = 0; r < data.n(); ++r)
                out.values(r, col) = data.study[r] == i ? B.values(r, k) - profile.basis_targets[k] : 0.0;
            tp.basis_targets[col] = 0.0;
            tp.tolerances[col] = within_tol.empty() ? profile.tolerances[k] : within_tol[w];
            out.constrained.push_back(col);
            out.names.push_back(B.names[k] + "@" + data.study_labels[i]);
        }
    }
    return {out, tp};
}

} // namespace pbmeta
