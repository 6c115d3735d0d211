#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "basis.hpp"
#include "diagnostics.hpp"
#include "errors.hpp"
#include "estimators.hpp"
#include "inference.hpp"
#include "model.hpp"

// Request/response layer shared by the command line tool and the HTTP service,
// so both produce the same JSON for the same inputs.
namespace pbmeta::api {

using ojson = nlohmann::ordered_json;

struct Session {
    std::optional<IdDataset> id;
    std::optional<AdDataset> ad;
    BasisSpec spec;
    FitSettings settings;
    ScaleMode scale = ScaleMode::Sigma2;
};

struct EstimateRequest {
    TargetProfile profile;
    bool bounded = true;
    std::optional<MethodTag> method;
    double level = 0.95;
    int bootstrap = 0;
    uint64_t seed = 0;
};

inline ojson optional_number(const std::optional<double>& v) {
    return v && std::isfinite(*v) ? ojson(*v) : ojson(nullptr);
}

inline ojson report_json(const EstimateReport& r) {
    ojson j;
    j["method_tag"] = to_string(r.method_tag);
    j["tau_hat"] = r.tau_hat;
    j["variance_heuristic"] = optional_number(r.variance_heuristic);
    j["variance_plugin"] = optional_number(r.variance_plugin);
    if (r.ci_lower && r.ci_upper)
        j["ci"] = {{"lower", *r.ci_lower}, {"upper", *r.ci_upper}, {"level", r.level}, {"method", r.ci_method}};
    else
        j["ci"] = nullptr;
    j["diagnostics_ref"] = r.diagnostics_ref.empty() ? ojson(nullptr) : ojson(r.diagnostics_ref);
    j["notes"] = r.notes;
    return j;
}

inline ojson certificate_json(const InfeasibilityCertificate& c) {
    ojson j;
    j["group"] = c.group;
    ojson rows = ojson::array();
    for (size_t k = 0; k < c.target.size(); ++k) {
        ojson r;
        r["basis"] = k < c.names.size() ? c.names[k] : "b" + std::to_string(k + 1);
        r["target"] = c.target[k];
        r["tolerance"] = k < c.tolerance.size() ? c.tolerance[k] : 0.0;
        r["closest_achievable"] = k < c.closest.size() ? ojson(c.closest[k]) : ojson(nullptr);
        r["direction"] = k < c.direction.size() ? ojson(c.direction[k]) : ojson(nullptr);
        r["violated"] = std::find(c.violated.begin(), c.violated.end(), static_cast<int>(k)) != c.violated.end();
        rows.push_back(r);
    }
    j["constraints"] = rows;
    j["residual"] = c.residual;
    return j;
}

inline ojson error_json(const Error& e) {
    ojson j;
    j["error"] = to_string(e.code());
    j["message"] = e.message();
    if (auto* inf = dynamic_cast<const InfeasibleError*>(&e)) j["certificate"] = certificate_json(inf->certificate());
    return j;
}

inline ojson variance_json(const VarianceReport& v) {
    ojson j;
    j["v_heuristic"] = v.v_heuristic;
    j["v_plugin"] = optional_number(v.v_plugin);
    j["residual_s2"] = v.residual_s2;
    j["s2_treated"] = optional_number(v.s2_treated);
    j["s2_control"] = optional_number(v.s2_control);
    j["psd_clipped"] = v.psd_clipped;
    return j;
}

// ---------------------------------------------------------------------------

inline EstimateRequest parse_request(const nlohmann::json& body, const Session& s) {
    if (!body.is_object()) fail(ErrorCode::ParseError, "request body must be a JSON object");
    EstimateRequest r;
    if (!body.contains("profile")) fail(ErrorCode::ParseError, "request needs a profile");
    r.profile = profile_from_json(body["profile"]);
    try {
        if (body.contains("bounded")) r.bounded = body["bounded"].get<bool>();
        if (body.contains("level")) r.level = body["level"].get<double>();
        if (body.contains("bootstrap")) r.bootstrap = body["bootstrap"].get<int>();
        if (body.contains("seed")) r.seed = body["seed"].get<uint64_t>();
        if (body.contains("method") && !body["method"].is_null()) {
            auto tag = body["method"].get<std::string>();
            r.method = parse_method(tag);
            if (!r.method) fail(ErrorCode::ParseError, "unknown method '" + tag + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseError, e.what());
    }
    if (!(r.level > 0 && r.level < 1)) fail(ErrorCode::DimensionMismatch, "level must lie in (0,1)");
    (void)s;
    return r;
}

inline MethodTag resolve_method(const Session& s, const EstimateRequest& r) {
    if (r.method) return *r.method;
    if (s.id && s.ad) return MethodTag::TWO_STAGE;
    if (s.id) return r.bounded ? MethodTag::ID_BOUNDED : MethodTag::ID_UNBOUNDED;
    return r.bounded ? MethodTag::AD_BOUNDED : MethodTag::AD_UNBOUNDED;
}

// Things the command line tool writes next to estimate.json.
struct Artifacts {
    std::optional<IdWeights> weights;
    std::optional<DiagnosticsBundle> diagnostics;
};

inline ojson weights_json(const IdDataset& d, const VectorXd& w) {
    ojson a = ojson::array();
    for (int i = 0; i < d.n(); ++i)
        a.push_back({{"row", i + 1}, {"study", d.study_labels[d.study[i]]}, {"z", d.z[i]}, {"weight", w[i]}});
    return a;
}

inline ojson study_weights_json(const std::vector<std::string>& labels, const StudyLevelEstimates& st,
                                const VectorXd& w) {
    ojson a = ojson::array();
    for (size_t i = 0; i < labels.size(); ++i) {
        const auto& e = st.studies[i];
        a.push_back({{"study", labels[i]},
                     {"weight", w[i]},
                     {"tau_hat", e.tau_hat},
                     {"sigma2_hat", e.sigma2_hat},
                     {"scale_c", e.scale_c},
                     {"source", e.source == StudySource::ID_DERIVED ? "ID" : "AD"}});
    }
    return a;
}

// Study-level balance summary: |sum w Bbar_k - B*_k| / sd_k with sd_k across
// study means.
inline ojson study_diagnostics_json(const StudyLevelEstimates& st, const VectorXd& w, const TargetProfile& profile) {
    ojson j;
    int neg = 0, kept = 0;
    double negm = 0.0;
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        if (w[i] > 0) ++kept;
        if (w[i] < 0) {
            ++neg;
            negm -= w[i];
        }
    }
    j["ess"] = kish_ess(w);
    j["retained"] = kept;
    j["negative_weight_count"] = neg;
    j["negative_mass"] = negm;
    ojson asmd = ojson::array();
    const int m = st.m();
    for (int k = 1; k < profile.K(); ++k) {
        double mu = 0.0, wm = 0.0;
        for (int i = 0; i < m; ++i) {
            mu += st.studies[i].basis_means[k] / m;
            wm += w[i] * st.studies[i].basis_means[k];
        }
        double ss = 0.0;
        for (int i = 0; i < m; ++i) ss += std::pow(st.studies[i].basis_means[k] - mu, 2);
        const double sd = m > 1 ? std::sqrt(ss / (m - 1)) : 0.0;
        const std::string name =
            k - 1 < static_cast<int>(st.basis_names.size()) ? st.basis_names[k - 1] : "b" + std::to_string(k + 1);
        if (sd > 0)
            asmd.push_back({{"basis", name}, {"sd", sd}, {"weighted", std::abs(wm - profile.basis_targets[k]) / sd},
                            {"unweighted", std::abs(mu - profile.basis_targets[k]) / sd}});
        else
            asmd.push_back({{"basis", name}, {"skipped", true}});
    }
    j["asmd"] = asmd;
    return j;
}

inline ojson run_id(const Session& s, const EstimateRequest& r, MethodTag tag, Artifacts* art) {
    const auto& d = *s.id;
    if (r.profile.K() != s.spec.K())
        fail(ErrorCode::DimensionMismatch, "profile has " + std::to_string(r.profile.K()) +
                                               " entries, the basis has " + std::to_string(s.spec.K()));
    FitSettings fs = s.settings;
    fs.level = r.level;
    const bool bounded = tag == MethodTag::ID_BOUNDED;
    auto fit = estimate_id(d, s.spec, r.profile, bounded, fs);
    auto bundle = build_diagnostics(d, fit.weights, r.profile);
    fit.report.diagnostics_ref = "diagnostics/summary.json";
    ojson j;
    j["estimate"] = report_json(fit.report);
    if (r.bootstrap > 0) {
        auto closure = [&](const IdDataset& b) {
            FitSettings inner = fs;
            inner.threads = 1;
            auto w = solve_id_weights(b, s.spec, r.profile, bounded, inner);
            return weighted_contrast(b, w);
        };
        auto bs = bootstrap_ci(closure, d, r.bootstrap, r.level, r.seed, fs.threads);
        j["bootstrap"] = {{"replicates", bs.replicates}, {"failures", bs.failures}, {"lower", bs.lower},
                          {"upper", bs.upper}, {"level", r.level}, {"seed", r.seed},
                          {"method", "percentile, resampling within study and arm"}};
    }
    j["profile"] = profile_to_json(r.profile);
    j["basis"] = std::vector<std::string>(fit.weights.basis.names.begin(),
                                          fit.weights.basis.names.begin() + fit.weights.basis.base_K);
    j["variance"] = variance_json(fit.variance);
    j["diagnostics"] = diagnostics_summary_json(bundle);
    j["weights"] = weights_json(d, fit.weights.unit_weights);
    if (art) {
        art->weights = fit.weights;
        art->diagnostics = std::move(bundle);
    }
    return j;
}

inline ojson run_ols(const Session& s, const EstimateRequest& r) {
    const auto& d = *s.id;
    FitSettings fs = s.settings;
    fs.level = r.level;
    auto part = fs.partition.value_or(EffectPartition::all_common(d.p()));
    auto fit = estimate_one_stage_ols(d, part, fs);
    fit.report.notes.push_back("pooled-regression estimand; the target profile is not used");
    ojson j;
    j["estimate"] = report_json(fit.report);
    auto sr = sign_reversal_report(fit.unit_weights, d.z);
    j["diagnostics"] = {{"ess", {{"treated", kish_ess(fit.treated.weights)}, {"control", kish_ess(fit.control.weights)}}},
                        {"negative_weight_count", static_cast<int>(sr.entries.size())},
                        {"negative_mass", sr.negative_mass}};
    j["weights"] = weights_json(d, fit.unit_weights);
    return j;
}

inline ojson run_study_level(const Session& s, const EstimateRequest& r, MethodTag tag) {
    FitSettings fs = s.settings;
    fs.level = r.level;
    TwoStageInput in;
    in.id = s.id;
    in.ad = s.ad;
    in.profile = r.profile;
    in.spec = s.spec;
    if (!s.id) {
        in.spec = build_basis_spec(identity_terms(s.ad->K() - 1), s.ad->K() - 1, {}, s.spec.standardize);
    }
    if (r.profile.K() != in.spec.K())
        fail(ErrorCode::DimensionMismatch, "profile has " + std::to_string(r.profile.K()) +
                                               " entries, the study basis has " + std::to_string(in.spec.K()));
    ojson j;
    if (tag == MethodTag::CLASSICAL_TWO_STAGE) {
        StudyLevelEstimates st;
        if (s.id) {
            auto two = estimate_two_stage(in, true, fs, s.scale);
            st = two.studies;
        } else {
            st = from_ad(*s.ad);
        }
        auto fit = estimate_classical_two_stage(st, fs);
        std::vector<std::string> labels;
        for (const auto& e : st.studies) labels.push_back(e.label);
        j["estimate"] = report_json(fit.report);
        j["sigma_tau2"] = fit.sigma_tau2;
        j["study_weights"] = study_weights_json(labels, st, fit.weights);
        return j;
    }
    const bool bounded = tag == MethodTag::AD_BOUNDED || (tag == MethodTag::TWO_STAGE && r.bounded);
    auto fit = estimate_two_stage(in, bounded, fs, s.scale);
    if (tag == MethodTag::TWO_STAGE) fit.stage2.report.method_tag = MethodTag::TWO_STAGE;
    j["estimate"] = report_json(fit.stage2.report);
    j["profile"] = profile_to_json(r.profile);
    ojson names = ojson::array({"(constant)"});
    for (const auto& b : fit.studies.basis_names) names.push_back(b);
    j["basis"] = names;
    j["study_weights"] = study_weights_json(fit.stage2.labels, fit.studies, fit.stage2.solution.weights);
    j["diagnostics"] = study_diagnostics_json(fit.studies, fit.stage2.solution.weights, r.profile);
    return j;
}

// One estimation request. Throws Error / InfeasibleError.
inline ojson run_estimate(const Session& s, const EstimateRequest& r, Artifacts* art = nullptr) {
    if (!s.id && !s.ad) fail(ErrorCode::NotLoaded, "no dataset loaded");
    const MethodTag tag = resolve_method(s, r);
    switch (tag) {
    case MethodTag::ID_BOUNDED:
    case MethodTag::ID_UNBOUNDED:
        if (!s.id) fail(ErrorCode::NotApplicable, std::string(to_string(tag)) + " needs individual-level data");
        return run_id(s, r, tag, art);
    case MethodTag::ONE_STAGE_OLS:
        if (!s.id) fail(ErrorCode::NotApplicable, "ONE_STAGE_OLS needs individual-level data");
        return run_ols(s, r);
    case MethodTag::TWO_STAGE:
        if (!s.id) fail(ErrorCode::NotApplicable, "TWO_STAGE needs individual-level data");
        return run_study_level(s, r, tag);
    case MethodTag::AD_BOUNDED:
    case MethodTag::AD_UNBOUNDED:
    case MethodTag::CLASSICAL_TWO_STAGE:
        if (s.id && tag != MethodTag::CLASSICAL_TWO_STAGE)
            fail(ErrorCode::NotApplicable, "AD methods run on aggregate data; use TWO_STAGE for individual data");
        return run_study_level(s, r, tag);
    default:
        fail(ErrorCode::NotApplicable, std::string(to_string(tag)) +
                                           " needs target-sample covariates and is only available in simulations");
    }
}

// Covariate ranges and study sizes for the UI sliders.
inline ojson dataset_summary(const Session& s) {
    if (!s.id && !s.ad) fail(ErrorCode::NotLoaded, "no dataset loaded");
    ojson j;
    if (s.id) {
        const auto& d = *s.id;
        j["kind"] = s.ad ? "MIXED" : "ID";
        j["n"] = d.n();
        j["m"] = d.m();
        j["p"] = d.p();
        ojson cov = ojson::array();
        for (int c = 0; c < d.p(); ++c) {
            const auto col = d.x.col(c);
            const double mu = col.mean();
            const double sd = d.n() > 1 ? std::sqrt((col.array() - mu).square().sum() / (d.n() - 1)) : 0.0;
            cov.push_back({{"name", d.covariate_names[c]}, {"min", col.minCoeff()}, {"max", col.maxCoeff()},
                           {"mean", mu}, {"sd", sd}});
        }
        j["covariates"] = cov;
        ojson st = ojson::array();
        auto counts = d.study_counts();
        for (int i = 0; i < d.m(); ++i)
            st.push_back({{"study", d.study_labels[i]}, {"n", counts[i].n}, {"treated", counts[i].treated},
                          {"control", counts[i].control}});
        j["studies"] = st;
        j["basis"] = basis_spec_to_json(s.spec);
        ojson names = ojson::array();
        for (const auto& t : s.spec.terms) names.push_back(t.name(d.covariate_names));
        j["basis_names"] = names;
    }
    if (s.ad) {
        const auto& a = *s.ad;
        if (!s.id) {
            j["kind"] = "AD";
            j["m"] = static_cast<int>(a.rows.size());
        }
        j["ad_basis"] = a.basis_names;
        ojson st = ojson::array();
        for (const auto& r : a.rows) {
            std::vector<double> bm(r.basis_means.data() + 1, r.basis_means.data() + r.basis_means.size());
            st.push_back({{"study", r.label}, {"n", r.n_i}, {"tau_hat", r.tau_hat}, {"sigma2_hat", r.sigma2_hat},
                          {"basis_means", bm}});
        }
        j[s.id ? "ad_studies" : "studies"] = st;
    }
    return j;
}

} // namespace pbmeta::api
