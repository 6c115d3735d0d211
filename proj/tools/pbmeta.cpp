#include <CLI11.hpp>
#include <json.hpp>

#include <pbmeta/api.hpp>
#include <pbmeta/diagnostics.hpp>
#include <pbmeta/service.hpp>
#include <pbmeta/simlab.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace pbmeta;
using ojson = nlohmann::ordered_json;

namespace {

constexpr int kExitInput = 1;
constexpr int kExitInfeasible = 2;

struct Options {
    // inputs
    std::string data, ad, id, profile, basis, terms, within, fixed, method, target_study, scale = "sigma2";
    bool bounded = true;
    bool standardize = true;
    std::vector<double> within_tol;
    // solver / inference
    std::string dispersion = "l2";
    double tolerance = 1e-9;
    int max_iter = 500;
    double level = 0.95;
    int boot = 0;
    int threads = 0;
    std::optional<uint64_t> seed;
    // outputs
    std::string out = "out";
    bool svg = false;
    std::string axes;
    // simulate
    std::string design = "partial";
    int n = 1000;
    int reps = 500;
    int total = 10000;
    double omega = 0.9;
    bool unbalanced = false;
    bool z_constant = false;
    std::string truth = "sample";
    std::string methods;
    // serve
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string ui;
    int timeout_ms = 10000;
    std::string config;
};

std::vector<std::string> split(const std::string& s, char sep = ',') {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        auto b = item.find_first_not_of(" \t"), e = item.find_last_not_of(" \t");
        if (b != std::string::npos) out.push_back(item.substr(b, e - b + 1));
    }
    return out;
}

nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::ParseError, "cannot open " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::ParseError, path + ": " + e.what());
    }
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream o(p, std::ios::binary);
    if (!o) fail(ErrorCode::ParseError, "cannot write " + p.string());
    o << text;
}

// Covariate references by name or one-based index.
int covariate_index(const std::string& ref, const std::vector<std::string>& names) {
    for (size_t j = 0; j < names.size(); ++j)
        if (names[j] == ref) return static_cast<int>(j);
    int k = 0;
    auto r = std::from_chars(ref.data(), ref.data() + ref.size(), k);
    if (r.ec != std::errc() || r.ptr != ref.data() + ref.size() || k < 1 || k > static_cast<int>(names.size()))
        fail(ErrorCode::IndexOutOfRange, "unknown covariate '" + ref + "'");
    return k - 1;
}

BasisSpec make_spec(const Options& o, const IdDataset& d) {
    nlohmann::json j = nlohmann::json::object();
    if (!o.basis.empty()) {
        auto b = o.basis;
        j = b.front() == '{' ? nlohmann::json::parse(b) : read_json(b);
    }
    if (!o.terms.empty()) j["terms"] = split(o.terms);
    if (!o.within.empty()) {
        std::vector<int> w;
        for (const auto& s : split(o.within)) w.push_back(std::stoi(s));
        j["within"] = w;
    }
    if (!o.standardize) j["standardize"] = false;
    return basis_spec_from_json(j, d.p());
}

FitSettings make_settings(const Options& o, const IdDataset* d) {
    FitSettings s;
    if (o.dispersion == "l2") s.dispersion = Dispersion::SQUARED_L2;
    else if (o.dispersion == "entropy") s.dispersion = Dispersion::NEG_ENTROPY;
    else fail(ErrorCode::ParseError, "dispersion must be l2 or entropy");
    s.solver.tolerance = o.tolerance;
    s.solver.max_iter = o.max_iter;
    s.level = o.level;
    s.threads = o.threads;
    s.within_tolerance = o.within_tol;
    if (d && !o.fixed.empty()) {
        EffectPartition e;
        std::vector<bool> isf(d->p(), false);
        for (const auto& r : split(o.fixed)) isf[covariate_index(r, d->covariate_names)] = true;
        for (int j = 0; j < d->p(); ++j) (isf[j] ? e.fixed : e.common).push_back(j);
        s.partition = e;
    }
    return s;
}

ScaleMode scale_mode(const Options& o) {
    if (o.scale == "sigma2") return ScaleMode::Sigma2;
    if (o.scale == "inverse-n") return ScaleMode::InverseN;
    fail(ErrorCode::ParseError, "scale must be sigma2 or inverse-n");
}

uint64_t resolve_seed(Options& o) {
    if (!o.seed) {
        std::random_device rd;
        o.seed = (static_cast<uint64_t>(rd()) << 32) ^ rd();
        std::cerr << "seed: " << *o.seed << "\n";
    }
    return *o.seed;
}

void write_metadata(const Options& o, const std::string& command, int argc, char** argv) {
    ojson m;
    m["command"] = command;
    std::vector<std::string> args(argv, argv + argc);
    m["argv"] = args;
    m["seed"] = o.seed ? ojson(*o.seed) : ojson(nullptr);
    m["threads"] = o.threads > 0 ? o.threads : default_threads();
    std::time_t t = std::time(nullptr);
    char buf[64];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    m["timestamp"] = buf;
    write_text(fs::path(o.out) / "metadata.json", m.dump(2) + "\n");
}

void write_scatter(const Options& o, const IdDataset& d, const api::Artifacts& art, const TargetProfile& raw,
                   const fs::path& path) {
    if (d.p() == 0) return;
    const auto& spec = art.weights->basis.spec;
    int jx = 0, jy = d.p() > 1 ? 1 : 0;
    if (!o.axes.empty()) {
        auto ax = split(o.axes);
        if (ax.size() != 2) fail(ErrorCode::ParseError, "--axes takes two covariates");
        jx = covariate_index(ax[0], d.covariate_names);
        jy = covariate_index(ax[1], d.covariate_names);
    } else {
        // Covariates whose balance rows bind hardest go on the axes.
        std::vector<std::pair<double, int>> act;
        for (int k = 0; k < spec.K(); ++k)
            if (spec.terms[k].kind == Term::IDENTITY)
                act.push_back({-(std::abs(art.weights->treated.lambda[k]) + std::abs(art.weights->control.lambda[k])),
                               spec.terms[k].j});
        std::stable_sort(act.begin(), act.end());
        if (act.size() >= 2) jx = act[0].second, jy = act[1].second;
    }
    std::vector<double> target(d.p(), std::nan(""));
    for (int k = 0; k < spec.K() && k < raw.K(); ++k)
        if (spec.terms[k].kind == Term::IDENTITY) target[spec.terms[k].j] = raw.basis_targets[k];
    write_text(path, weights_scatter_svg(d, *art.diagnostics, jx, jy, target));
}

void write_diagnostics(const Options& o, const IdDataset& d, const api::Artifacts& art, const TargetProfile& raw,
                       const fs::path& dir) {
    std::ostringstream w, a;
    write_weights_csv(w, d, *art.diagnostics);
    write_text(dir / "weights.csv", w.str());
    write_asmd_csv(a, *art.diagnostics);
    write_text(dir / "asmd.csv", a.str());
    write_text(dir / "summary.json", diagnostics_summary_json(*art.diagnostics).dump(2) + "\n");
    if (o.svg) write_scatter(o, d, art, raw, dir / "weights_scatter.svg");
}

void write_id_artifacts(const Options& o, const IdDataset& d, const api::Artifacts& art, const TargetProfile& raw) {
    if (!art.diagnostics) return;
    std::ostringstream w;
    write_weights_csv(w, d, *art.diagnostics);
    write_text(fs::path(o.out) / "weights.csv", w.str());
    write_diagnostics(o, d, art, raw, fs::path(o.out) / "diagnostics");
}

void write_study_weights(const Options& o, const ojson& result) {
    if (!result.contains("study_weights")) return;
    std::ostringstream w;
    csv::write_row(w, {"study_id", "weight", "tau_hat", "sigma2_hat", "scale_c", "source"});
    for (const auto& s : result["study_weights"])
        csv::write_row(w, {s["study"].get<std::string>(), csv::format_double(s["weight"].get<double>()),
                           csv::format_double(s["tau_hat"].get<double>()),
                           csv::format_double(s["sigma2_hat"].get<double>()),
                           csv::format_double(s["scale_c"].get<double>()), s["source"].get<std::string>()});
    write_text(fs::path(o.out) / "weights.csv", w.str());
}

api::EstimateRequest make_request(Options& o, const TargetProfile& profile) {
    api::EstimateRequest r;
    r.profile = profile;
    r.bounded = o.bounded;
    r.level = o.level;
    r.bootstrap = o.boot;
    if (o.boot > 0) r.seed = resolve_seed(o);
    if (!o.method.empty()) {
        r.method = parse_method(o.method);
        if (!r.method) fail(ErrorCode::ParseError, "unknown method '" + o.method + "'");
    }
    return r;
}

void finish_estimate(const Options& o, const ojson& result) {
    write_text(fs::path(o.out) / "estimate.json", service::render(result));
    const auto& e = result["estimate"];
    std::cout << e["method_tag"].get<std::string>() << "  tau_hat = " << e["tau_hat"].get<double>();
    if (!e["ci"].is_null())
        std::cout << "  CI(" << e["ci"]["level"].get<double>() << ") = [" << e["ci"]["lower"].get<double>() << ", "
                  << e["ci"]["upper"].get<double>() << "]";
    std::cout << "\n";
}

int cmd_fit_id(Options& o) {
    auto d = read_id_csv(o.data).data;
    api::Session s;
    s.spec = make_spec(o, d);
    s.settings = make_settings(o, &d);
    s.scale = scale_mode(o);
    s.id = std::move(d);
    auto profile = read_profile(o.profile);
    auto req = make_request(o, profile);
    api::Artifacts art;
    auto result = api::run_estimate(s, req, &art);
    finish_estimate(o, result);
    write_id_artifacts(o, *s.id, art, profile);
    return 0;
}

int cmd_fit_ad(Options& o) {
    auto ing = read_ad_csv(o.data, scale_mode(o), o.target_study);
    api::Session s;
    s.settings = make_settings(o, nullptr);
    s.spec.standardize = o.standardize;
    s.scale = scale_mode(o);
    std::optional<TargetProfile> profile;
    if (!o.profile.empty()) profile = read_profile(o.profile);
    else profile = ing.target;
    if (!profile) fail(ErrorCode::ParseError, "fit-ad needs --profile or --target-study");
    s.ad = std::move(ing.data);
    auto req = make_request(o, *profile);
    auto result = api::run_estimate(s, req);
    finish_estimate(o, result);
    write_study_weights(o, result);
    return 0;
}

int cmd_fit_mixed(Options& o) {
    auto d = read_id_csv(o.id).data;
    api::Session s;
    s.spec = make_spec(o, d);
    s.settings = make_settings(o, &d);
    s.scale = scale_mode(o);
    s.id = std::move(d);
    if (!o.ad.empty()) s.ad = read_ad_csv(o.ad, s.scale).data;
    auto req = make_request(o, read_profile(o.profile));
    if (!req.method) req.method = MethodTag::TWO_STAGE;
    auto result = api::run_estimate(s, req);
    finish_estimate(o, result);
    write_study_weights(o, result);
    return 0;
}

int cmd_diagnose(Options& o) {
    auto d = read_id_csv(o.data).data;
    auto spec = make_spec(o, d);
    auto settings = make_settings(o, &d);
    auto profile = read_profile(o.profile);
    auto w = solve_id_weights(d, spec, profile, o.bounded, settings);
    api::Artifacts art;
    art.weights = w;
    art.diagnostics = build_diagnostics(d, w, profile);
    write_diagnostics(o, d, art, profile, o.out);
    const auto& bundle = *art.diagnostics;
    std::cout << "ESS treated " << bundle.ess_treated << ", control " << bundle.ess_control << "; negative weights "
              << bundle.negative_weight_count << "\n";
    return 0;
}

sim::SimDesign design_from(const Options& o, const nlohmann::json& sc) {
    sim::SimDesign d;
    auto get = [&](const char* k, auto def) {
        using T = decltype(def);
        return sc.contains(k) ? sc[k].get<T>() : def;
    };
    const auto design = get("design", o.design);
    if (design == "full") d.overlap = sim::Overlap::FULL;
    else if (design == "partial") d.overlap = sim::Overlap::PARTIAL;
    else fail(ErrorCode::ParseError, "design must be full or partial");
    d.target_study_n = get("n", o.n);
    d.total_n = get("total", o.total);
    d.omega = get("omega", o.omega);
    d.balanced_trials = !get("unbalanced", o.unbalanced);
    d.z_varies = !get("z_constant", o.z_constant);
    d.seed = *o.seed;
    return d;
}

std::vector<MethodTag> sim_methods(const Options& o) {
    if (o.methods.empty()) return sim::default_sim_methods();
    std::vector<MethodTag> m;
    for (const auto& s : split(o.methods)) {
        auto t = parse_method(s);
        if (!t) fail(ErrorCode::ParseError, "unknown method '" + s + "'");
        m.push_back(*t);
    }
    return m;
}

int cmd_simulate(Options& o) {
    resolve_seed(o);
    std::vector<nlohmann::json> scenarios;
    if (!o.config.empty()) {
        auto cfg = read_json(o.config);
        if (cfg.contains("scenarios"))
            for (const auto& s : cfg["scenarios"]) scenarios.push_back(s);
    }
    if (scenarios.empty()) scenarios.push_back(nlohmann::json::object());
    sim::TruthKind truth;
    if (o.truth == "sample") truth = sim::TruthKind::TARGET_SAMPLE;
    else if (o.truth == "population") truth = sim::TruthKind::POPULATION;
    else fail(ErrorCode::ParseError, "truth must be sample or population");
    const auto methods = sim_methods(o);
    std::vector<sim::SimResult> results;
    ojson js = ojson::array();
    for (const auto& sc : scenarios) {
        auto d = sim::calibrate_intercepts(design_from(o, sc));
        const int reps = sc.contains("reps") ? sc["reps"].get<int>() : o.reps;
        auto r = sim::run_replications(d, methods, reps, o.threads, truth);
        const auto& c = *r.design.calibration;
        ojson e;
        e["design"] = sim::to_string(d.overlap);
        e["n"] = d.target_study_n;
        e["total_n"] = d.total_n;
        e["omega"] = d.omega;
        e["balanced_trials"] = d.balanced_trials;
        e["z_varies"] = d.z_varies;
        e["reps"] = reps;
        e["seed"] = d.seed;
        e["truth"] = truth == sim::TruthKind::TARGET_SAMPLE ? "target_sample" : "population";
        e["calibration"] = {{"beta0", c.beta0},
                            {"zeta0", c.zeta0},
                            {"zeta0_tilde", c.zeta0_tilde},
                            {"trial_shares", c.trial_shares},
                            {"population_tau", c.population_tau}};
        ojson ms = ojson::array();
        for (const auto& m : r.metrics) {
            ms.push_back({{"method", to_string(m.method)},
                          {"bias", api::optional_number(m.bias)},
                          {"sd", api::optional_number(m.sd)},
                          {"rmse", api::optional_number(m.rmse)},
                          {"mc_se", api::optional_number(m.mc_se)},
                          {"ci_length", api::optional_number(m.ci_length)},
                          {"coverage", api::optional_number(m.coverage)},
                          {"replications", m.replications},
                          {"failures", m.failures},
                          {"sd_undefined", m.sd_undefined}});
            std::cout << sim::to_string(d.overlap) << " n=" << d.target_study_n << " " << to_string(m.method)
                      << "  bias " << m.bias << "  rmse " << m.rmse << "  sd " << m.sd;
            if (std::isfinite(m.coverage)) std::cout << "  coverage " << m.coverage;
            std::cout << "\n";
        }
        e["metrics"] = ms;
        js.push_back(e);
        results.push_back(std::move(r));
    }
    std::ostringstream csvs;
    sim::write_metrics_csv(csvs, results);
    write_text(fs::path(o.out) / "metrics.csv", csvs.str());
    write_text(fs::path(o.out) / "simulation.json", js.dump(2) + "\n");
    return 0;
}

int cmd_serve(Options& o) {
    api::Session s;
    s.settings = make_settings(o, nullptr);
    s.scale = scale_mode(o);
    bool any = false;
    if (!o.data.empty()) {
        auto d = read_id_csv(o.data).data;
        s.spec = make_spec(o, d);
        s.settings = make_settings(o, &d);
        s.id = std::move(d);
        any = true;
    }
    if (!o.ad.empty()) {
        s.ad = read_ad_csv(o.ad, s.scale).data;
        any = true;
    }
    service::Service svc = any ? service::Service(std::move(s)) : service::Service();
    svc.timeout = std::chrono::milliseconds(o.timeout_ms);
    httplib::Server srv;
    service::install_routes(srv, svc, o.ui);
    std::cerr << "listening on http://" << o.host << ":" << o.port << (any ? "" : " (no dataset loaded)") << "\n";
    if (!srv.listen(o.host, o.port)) fail(ErrorCode::ParseError, "cannot bind " + o.host + ":" + std::to_string(o.port));
    return 0;
}

// Turns {"key": value} from --config into "--key=value" arguments placed before
// the user's own, so explicit flags (parsed later, last one wins) override it.
std::vector<std::string> config_args(const nlohmann::json& cfg) {
    std::vector<std::string> out;
    for (auto it = cfg.begin(); it != cfg.end(); ++it) {
        if (it.key() == "scenarios" || it.key() == "config") continue;
        const auto& v = it.value();
        std::string flag = "--" + it.key();
        std::replace(flag.begin() + 2, flag.end(), '_', '-');
        if (v.is_boolean()) out.push_back(flag + "=" + (v.get<bool>() ? "true" : "false"));
        else if (v.is_string()) out.push_back(flag + "=" + v.get<std::string>());
        else if (v.is_array()) {
            std::string s;
            for (const auto& e : v) s += (s.empty() ? "" : ",") + (e.is_string() ? e.get<std::string>() : e.dump());
            out.push_back(flag + "=" + s);
        } else if (v.is_object()) out.push_back(flag + "=" + v.dump());
        else out.push_back(flag + "=" + v.dump());
    }
    return out;
}

int write_error(const Options& o, const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    try {
        write_text(fs::path(o.out) / "error.json", service::render(api::error_json(e)));
        if (auto* inf = dynamic_cast<const InfeasibleError*>(&e))
            write_text(fs::path(o.out) / "certificate.json", service::render(api::certificate_json(inf->certificate())));
    } catch (...) {
    }
    return e.code() == ErrorCode::Infeasible ? kExitInfeasible : kExitInput;
}

} // namespace

int main(int argc, char** argv) {
    Options o;
    CLI::App app{"Personalized, sample-bounded evidence synthesis"};
    app.require_subcommand(1);
    app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

    auto common = [&](CLI::App* c) {
        c->add_option("--out", o.out, "Output directory")->capture_default_str();
        c->add_option("--seed", o.seed, "Random seed (printed when omitted)");
        c->add_option("--threads", o.threads, "Worker threads (0 = all cores)");
        c->add_option("--config", o.config, "JSON file of option defaults; explicit flags win");
    };
    auto solver = [&](CLI::App* c) {
        c->add_flag("--bounded,!--unbounded", o.bounded, "Impose w >= 0 (default) or not");
        c->add_option("--dispersion", o.dispersion, "l2 or entropy")->capture_default_str();
        c->add_option("--tol", o.tolerance, "Solver KKT tolerance")->capture_default_str();
        c->add_option("--max-iter", o.max_iter, "Solver iteration cap")->capture_default_str();
        c->add_option("--level", o.level, "Confidence level")->capture_default_str();
        c->add_option("--boot", o.boot, "Bootstrap replicates (0 = none, else >= 100)");
        c->add_option("--method", o.method, "Method tag, e.g. ID_BOUNDED, TWO_STAGE");
        c->add_option("--scale", o.scale, "Study scale for study-level weights: sigma2 or inverse-n");
        c->add_flag("--standardize,!--no-standardize", o.standardize, "Standardize basis columns");
    };
    auto basis = [&](CLI::App* c) {
        c->add_option("--basis", o.basis, "Basis spec: JSON file or inline JSON");
        c->add_option("--terms", o.terms, "Basis shorthand list: identity,squares,interactions");
        c->add_option("--within", o.within, "One-based basis indices balanced within each study");
        c->add_option("--within-tol", o.within_tol, "Tolerances for the within-study rows")->delimiter(',');
        c->add_option("--fixed", o.fixed, "Covariates with study-specific slopes in the variance model");
    };

    auto fit_id = app.add_subcommand("fit-id", "Weights and estimate from individual-level data");
    fit_id->add_option("--data", o.data, "ID CSV")->required();
    fit_id->add_option("--profile", o.profile, "Target profile JSON")->required();
    fit_id->add_flag("--svg", o.svg, "Also write diagnostics/weights_scatter.svg");
    fit_id->add_option("--axes", o.axes, "Two covariates for the scatter");
    common(fit_id), solver(fit_id), basis(fit_id);

    auto fit_ad = app.add_subcommand("fit-ad", "Study weights and estimate from aggregate data");
    fit_ad->add_option("--data", o.data, "AD CSV")->required();
    fit_ad->add_option("--profile", o.profile, "Target profile JSON");
    fit_ad->add_option("--target-study", o.target_study, "Row of the AD file that holds the target means");
    common(fit_ad), solver(fit_ad);

    auto fit_mixed = app.add_subcommand("fit-mixed", "Two-stage estimate from ID and AD studies");
    fit_mixed->add_option("--id", o.id, "ID CSV")->required();
    fit_mixed->add_option("--ad", o.ad, "AD CSV");
    fit_mixed->add_option("--profile", o.profile, "Target profile JSON")->required();
    common(fit_mixed), solver(fit_mixed), basis(fit_mixed);

    auto diagnose = app.add_subcommand("diagnose", "Design-stage diagnostics (no outcomes needed)");
    diagnose->add_option("--data", o.data, "ID CSV")->required();
    diagnose->add_option("--profile", o.profile, "Target profile JSON")->required();
    diagnose->add_flag("--svg", o.svg, "Also write weights_scatter.svg");
    diagnose->add_option("--axes", o.axes, "Two covariates for the scatter");
    common(diagnose), solver(diagnose), basis(diagnose);

    auto simulate = app.add_subcommand("simulate", "Monte Carlo study of the estimators");
    simulate->add_option("--design", o.design, "full or partial")->capture_default_str();
    simulate->add_option("--n", o.n, "Study population size")->capture_default_str();
    simulate->add_option("--reps", o.reps, "Replications")->capture_default_str();
    simulate->add_option("--total", o.total, "n + n*")->capture_default_str();
    simulate->add_option("--omega", o.omega, "Support threshold of the partial design")->capture_default_str();
    simulate->add_flag("--unbalanced", o.unbalanced, "4:2:1 trial sizes");
    simulate->add_flag("--z-constant", o.z_constant, "P(Z=1) = 1/2 in every trial");
    simulate->add_option("--truth", o.truth, "Error reference: sample or population")->capture_default_str();
    simulate->add_option("--methods", o.methods, "Comma-separated method tags");
    common(simulate);

    auto serve = app.add_subcommand("serve", "HTTP service over one dataset");
    serve->add_option("--data", o.data, "ID CSV");
    serve->add_option("--ad", o.ad, "AD CSV");
    serve->add_option("--host", o.host)->capture_default_str();
    serve->add_option("--port", o.port)->capture_default_str();
    serve->add_option("--ui", o.ui, "Directory served at /");
    serve->add_option("--timeout-ms", o.timeout_ms, "Per-request solve timeout")->capture_default_str();
    common(serve), solver(serve), basis(serve);

    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        for (size_t i = 0; i < args.size(); ++i) {
            std::string cfg;
            if (args[i] == "--config" && i + 1 < args.size()) cfg = args[i + 1];
            else if (args[i].rfind("--config=", 0) == 0) cfg = args[i].substr(9);
            if (cfg.empty()) continue;
            auto extra = config_args(read_json(cfg));
            const size_t at = args.empty() || args[0].rfind("-", 0) == 0 ? 0 : 1;
            args.insert(args.begin() + static_cast<long>(at), extra.begin(), extra.end());
            break;
        }
    } catch (const Error& e) {
        return write_error(o, e);
    }
    std::reverse(args.begin(), args.end());
    try {
        app.parse(args);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        int rc = 0;
        std::string cmd;
        if (fit_id->parsed()) cmd = "fit-id", rc = cmd_fit_id(o);
        else if (fit_ad->parsed()) cmd = "fit-ad", rc = cmd_fit_ad(o);
        else if (fit_mixed->parsed()) cmd = "fit-mixed", rc = cmd_fit_mixed(o);
        else if (diagnose->parsed()) cmd = "diagnose", rc = cmd_diagnose(o);
        else if (simulate->parsed()) cmd = "simulate", rc = cmd_simulate(o);
        else if (serve->parsed()) cmd = "serve", rc = cmd_serve(o);
        if (cmd != "serve") write_metadata(o, cmd, argc, argv);
        return rc;
    } catch (const Error& e) {
        return write_error(o, e);
    } catch (const nlohmann::json::exception& e) {
        return write_error(o, Error(ErrorCode::ParseError, e.what()));
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
}
