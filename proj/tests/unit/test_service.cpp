#include <gtest/gtest.h>

#include <pbmeta/service.hpp>

#include <sys/wait.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

using namespace pbmeta;
namespace fs = std::filesystem;

namespace {

const std::string kData = PBMETA_DEMO_DATA;

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("pbmeta_test_" + std::to_string(::getpid())) / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(PBMETA_CLI) + " " + args + " > /dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

api::Session id_session() {
    api::Session s;
    s.id = read_id_csv(kData + "/id.csv").data;
    s.spec = build_basis_spec(identity_terms(s.id->p()), s.id->p());
    return s;
}

nlohmann::json parse(const service::Reply& r) { return nlohmann::json::parse(r.body); }

std::string profile_body(const std::vector<double>& targets, double tol = 0.0) {
    nlohmann::json p;
    p["basis_targets"] = targets;
    p["tolerances"] = std::vector<double>(targets.size(), tol);
    p["tolerances"][0] = 0.0;
    return nlohmann::json{{"profile", p}}.dump();
}

} // namespace

TEST(Service, HealthzAndNotLoaded) {
    service::Service empty;
    EXPECT_EQ(empty.healthz().status, 200);
    EXPECT_EQ(parse(empty.healthz())["loaded"], false);
    EXPECT_EQ(empty.summary().status, 409);
    EXPECT_EQ(empty.estimate_now(profile_body({1, 0, 0, 0})).status, 409);
}

TEST(Service, SummaryListsStudies) {
    service::Service svc(id_session());
    auto r = svc.summary();
    ASSERT_EQ(r.status, 200);
    auto j = parse(r);
    EXPECT_EQ(j["m"], 3);
    EXPECT_EQ(j["studies"].size(), 3u);
    EXPECT_EQ(j["studies"][0]["n"], 120);

    api::Session ad;
    ad.ad = read_ad_csv(kData + "/ad.csv", ScaleMode::Sigma2, "target").data;
    auto k = parse(service::Service(ad).summary());
    EXPECT_EQ(k["kind"], "AD");
    EXPECT_EQ(k["studies"][0]["basis_means"].size(), 3u);
}

TEST(Service, ProfileAtDataMeansIsNearUniform) {
    auto s = id_session();
    VectorXd mu = s.id->x.colwise().mean();
    service::Service svc(s);
    auto r = svc.estimate_now(profile_body({1, mu[0], mu[1], mu[2]}));
    ASSERT_EQ(r.status, 200) << r.body;
    auto j = parse(r);
    auto counts = s.id->study_counts();
    int treated = 0, control = 0;
    for (const auto& c : counts) treated += c.treated, control += c.control;
    EXPECT_GT(j["diagnostics"]["ess"]["treated"].get<double>(), 0.8 * treated);
    EXPECT_GT(j["diagnostics"]["ess"]["control"].get<double>(), 0.8 * control);
}

TEST(Service, InfeasibleProfileReturnsCertificate) {
    service::Service svc(id_session());
    auto r = svc.estimate_now(profile_body({1, 40, 0, 0.5}));
    EXPECT_EQ(r.status, 422);
    auto j = parse(r);
    EXPECT_EQ(j["error"], "Infeasible");
    EXPECT_FALSE(j["certificate"]["constraints"].empty());
}

TEST(Service, BadRequests) {
    service::Service svc(id_session());
    EXPECT_EQ(svc.estimate_now("{not json").status, 400);
    EXPECT_EQ(svc.estimate_now("{}").status, 400);
    EXPECT_EQ(svc.estimate_now(profile_body({1, 0})).status, 400);
    EXPECT_EQ(svc.estimate_now(R"({"profile":{"basis_targets":[1,0,0,0]},"method":"NOPE"})").status, 400);
}

TEST(Service, TimeoutReturns503) {
    service::Service svc(id_session());
    svc.timeout = std::chrono::milliseconds(0);
    auto r = svc.estimate(profile_body({1, 0, 0, 0.5}, 0.02));
    EXPECT_EQ(r.status, 503);
    EXPECT_EQ(parse(r)["error"], "Timeout");
    EXPECT_TRUE(parse(r)["partial"].contains("dataset"));
}

TEST(Service, HttpRoundTrip) {
    service::Service svc(id_session());
    httplib::Server srv;
    service::install_routes(srv, svc);
    const int port = srv.bind_to_any_port("127.0.0.1");
    ASSERT_GT(port, 0);
    std::thread t([&] { srv.listen_after_bind(); });
    srv.wait_until_ready();
    httplib::Client cli("127.0.0.1", port);
    auto h = cli.Get("/healthz");
    ASSERT_TRUE(h);
    EXPECT_EQ(h->status, 200);
    EXPECT_EQ(h->get_header_value("Access-Control-Allow-Origin"), "*");
    const auto body = profile_body({1, 0.2, 0.0, 0.5}, 0.02);
    auto e = cli.Post("/estimate", body, "application/json");
    ASSERT_TRUE(e);
    EXPECT_EQ(e->status, 200);
    EXPECT_EQ(e->body, svc.estimate_now(body).body);
    auto bad = cli.Post("/estimate", profile_body({1, 40, 0, 0.5}), "application/json");
    ASSERT_TRUE(bad);
    EXPECT_EQ(bad->status, 422);
    auto s = cli.Get("/dataset/summary");
    ASSERT_TRUE(s);
    EXPECT_EQ(s->status, 200);
    srv.stop();
    t.join();
}

TEST(Cli, MatchesServiceByteForByte) {
    service::Service svc(id_session());
    const std::vector<std::vector<double>> profiles = {{1, -0.3, 0.1, 0.4}, {1, 0.0, 0.0, 0.5}, {1, 0.6, -0.2, 0.7}};
    std::set<std::string> estimates;
    for (size_t i = 0; i < profiles.size(); ++i) {
        auto dir = scratch("parity" + std::to_string(i));
        const auto body = profile_body(profiles[i], 0.02);
        std::ofstream(dir / "target.json") << nlohmann::json::parse(body)["profile"].dump();
        ASSERT_EQ(run_cli("fit-id --data " + kData + "/id.csv --profile " + (dir / "target.json").string() +
                          " --out " + (dir / "out").string()),
                  0);
        auto reply = svc.estimate_now(body);
        ASSERT_EQ(reply.status, 200);
        EXPECT_EQ(slurp(dir / "out" / "estimate.json"), reply.body);
        estimates.insert(parse(reply)["estimate"]["tau_hat"].dump());
    }
    EXPECT_EQ(estimates.size(), profiles.size());
}

TEST(Cli, FitAdOracleInstance) {
    auto dir = scratch("ad");
    std::ofstream(dir / "ad.csv") << "study_id,tau_hat,sigma2_hat,n,x\na,1,1,10,0\nb,2,1,10,1\nc,3,1,10,2\n";
    std::ofstream(dir / "t.json") << R"({"basis_targets":[1,0.25]})";
    ASSERT_EQ(run_cli("fit-ad --data " + (dir / "ad.csv").string() + " --profile " + (dir / "t.json").string() +
                      " --out " + (dir / "out").string()),
              0);
    auto j = nlohmann::json::parse(slurp(dir / "out" / "estimate.json"));
    EXPECT_EQ(j["estimate"]["method_tag"], "AD_BOUNDED");
    EXPECT_NEAR(j["estimate"]["tau_hat"].get<double>(), 0.75 * 1 + 0.25 * 2, 1e-9);
}

TEST(Cli, ExitCodesAndErrorFiles) {
    auto dir = scratch("errors");
    std::ofstream(dir / "far.json") << R"({"basis_targets":[1,40,0,0.5]})";
    EXPECT_EQ(run_cli("fit-id --data " + kData + "/id.csv --profile " + (dir / "far.json").string() + " --out " +
                      (dir / "inf").string()),
              2);
    EXPECT_TRUE(fs::exists(dir / "inf" / "certificate.json"));
    EXPECT_EQ(nlohmann::json::parse(slurp(dir / "inf" / "error.json"))["error"], "Infeasible");
    EXPECT_EQ(run_cli("fit-id --data " + (dir / "missing.csv").string() + " --profile " + (dir / "far.json").string() +
                      " --out " + (dir / "bad").string()),
              1);
}

TEST(Cli, FlagsOverrideConfig) {
    auto dir = scratch("config");
    std::ofstream(dir / "run.json") << R"({"level": 0.9, "unbounded": true})";
    ASSERT_EQ(run_cli("fit-id --config " + (dir / "run.json").string() + " --data " + kData + "/id.csv --profile " +
                      kData + "/target.json --level 0.8 --out " + (dir / "out").string()),
              0);
    auto j = nlohmann::json::parse(slurp(dir / "out" / "estimate.json"));
    EXPECT_EQ(j["estimate"]["ci"]["level"], 0.8);
    EXPECT_EQ(j["estimate"]["method_tag"], "ID_UNBOUNDED");
}

TEST(Cli, RepeatedRunsAreIdentical) {
    std::string first[3];
    for (int k = 0; k < 2; ++k) {
        auto dir = scratch("det" + std::to_string(k));
        ASSERT_EQ(run_cli("fit-id --data " + kData + "/id.csv --profile " + kData + "/target.json --boot 100 --seed 4 --out " +
                          (dir / "fit").string()),
                  0);
        ASSERT_EQ(run_cli("simulate --design partial --reps 4 --seed 9 --out " + (dir / "sim").string()), 0);
        const std::string got[3] = {slurp(dir / "fit" / "estimate.json"), slurp(dir / "sim" / "metrics.csv"),
                                    slurp(dir / "sim" / "simulation.json")};
        for (int i = 0; i < 3; ++i) {
            EXPECT_FALSE(got[i].empty());
            if (k == 0) first[i] = got[i];
            else EXPECT_EQ(got[i], first[i]);
        }
    }
}

TEST(Cli, DiagnoseWritesArtifacts) {
    auto dir = scratch("diag");
    ASSERT_EQ(run_cli("diagnose --data " + kData + "/id.csv --profile " + kData + "/target.json --svg --out " +
                      dir.string()),
              0);
    for (auto f : {"weights.csv", "asmd.csv", "summary.json", "weights_scatter.svg"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
}
