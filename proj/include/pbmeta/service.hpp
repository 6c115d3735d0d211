#pragma once

#include <chrono>
#include <filesystem>
#include <future>
#include <memory>
#include <optional>
#include <string>
#include <thread>

#include "api.hpp"
#include "errors.hpp"

#include <json.hpp>

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro that
// collides with Eigen's parameter names.
#include <httplib.h>

namespace pbmeta::service {

struct Reply {
    int status = 200;
    std::string body;
};

// JSON text written by both the service and the command line tool.
inline std::string render(const api::ojson& j) { return j.dump(2) + "\n"; }

inline int status_for(ErrorCode c) {
    switch (c) {
    case ErrorCode::Infeasible: return 422;
    case ErrorCode::NotLoaded: return 409;
    case ErrorCode::MaxIterations:
    case ErrorCode::NonConvergence: return 500;
    default: return 400;
    }
}

// The session is immutable after construction; handlers only read it, so
// concurrent requests need no locking.
class Service {
public:
    Service() = default;
    explicit Service(api::Session s) : session_(std::make_shared<const api::Session>(std::move(s))) {}

    bool loaded() const { return session_ != nullptr; }
    const api::Session* session() const { return session_.get(); }

    std::chrono::milliseconds timeout{10000};

    Reply healthz() const {
        api::ojson j;
        j["status"] = "ok";
        j["loaded"] = loaded();
        return {200, render(j)};
    }

    Reply summary() const {
        if (!loaded()) return error(Error(ErrorCode::NotLoaded, "no dataset loaded"));
        try {
            return {200, render(api::dataset_summary(*session_))};
        } catch (const Error& e) {
            return error(e);
        }
    }

    // Runs synchronously; no timeout.
    Reply estimate_now(const std::string& body) const {
        if (!loaded()) return error(Error(ErrorCode::NotLoaded, "no dataset loaded"));
        try {
            nlohmann::json req;
            try {
                req = nlohmann::json::parse(body);
            } catch (const nlohmann::json::exception& e) {
                fail(ErrorCode::ParseError, std::string("request body: ") + e.what());
            }
            auto r = api::parse_request(req, *session_);
            return {200, render(api::run_estimate(*session_, r))};
        } catch (const Error& e) {
            return error(e);
        } catch (const std::exception& e) {
            api::ojson j;
            j["error"] = "Internal";
            j["message"] = e.what();
            return {500, render(j)};
        }
    }

    // Runs the solve on a worker; past the timeout the caller gets 503 and the
    // worker finishes in the background.
    Reply estimate(const std::string& body) const {
        auto prom = std::make_shared<std::promise<Reply>>();
        auto fut = prom->get_future();
        auto self = *this;
        std::thread([self, body, prom] { prom->set_value(self.estimate_now(body)); }).detach();
        if (fut.wait_for(timeout) == std::future_status::ready) return fut.get();
        api::ojson j;
        j["error"] = "Timeout";
        j["message"] = "solve exceeded " + std::to_string(timeout.count()) + " ms";
        api::ojson partial;
        partial["request_bytes"] = body.size();
        if (loaded()) partial["dataset"] = api::dataset_summary(*session_);
        j["partial"] = partial;
        return {503, render(j)};
    }

    static Reply error(const Error& e) { return {status_for(e.code()), render(api::error_json(e))}; }

private:
    std::shared_ptr<const api::Session> session_;
};

inline void install_routes(httplib::Server& srv, const Service& svc, const std::string& ui_dir = "") {
    auto send = [](httplib::Response& res, const Reply& r) {
        res.status = r.status;
        res.set_content(r.body, "application/json");
    };
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                             {"Access-Control-Allow-Headers", "Content-Type"},
                             {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    srv.Get("/healthz", [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.healthz()); });
    srv.Get("/dataset/summary",
            [&svc, send](const httplib::Request&, httplib::Response& res) { send(res, svc.summary()); });
    srv.Post("/estimate", [&svc, send](const httplib::Request& req, httplib::Response& res) {
        send(res, svc.estimate(req.body));
    });
    srv.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    if (!ui_dir.empty() && std::filesystem::is_directory(ui_dir)) srv.set_mount_point("/", ui_dir);
}

} // namespace pbmeta::service
