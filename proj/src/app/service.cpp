#include "flowforge/app/service.hpp"

#include <httplib.h>

#include "flowforge/errors.hpp"
#include "flowforge/version.hpp"

namespace flowforge::app {

struct SynthesisService::Server {
    httplib::Server http;
};

namespace {

ApiResponse error_response(int status, const std::string& message, const std::vector<std::string>& details = {}) {
    nlohmann::json body{{"error", message}};
    if (!details.empty()) body["details"] = details;
    return {status, body};
}

}  // namespace

SynthesisService::SynthesisService(std::shared_ptr<const Model> model, ServiceDefaults defaults)
    : model_(std::move(model)), defaults_(defaults), server_(std::make_unique<Server>()) {
    if (model_ && model_->meta.contains("width") && model_->meta.contains("height")) {
        defaults_.width = model_->meta["width"].get<int>();
        defaults_.height = model_->meta["height"].get<int>();
    }
    auto reply = [](httplib::Response& res, const ApiResponse& api) {
        res.status = api.status;
        res.set_content(api.body.dump(), "application/json");
    };
    // every method reaches handle() so wrong verbs get 405 rather than 404
    auto route = [this, reply](const httplib::Request& req, httplib::Response& res) {
        reply(res, handle(req.method, req.path, req.body));
    };
    server_->http.set_payload_max_length(kMaxRequestBytes);
    // SO_REUSEADDR only: httplib's default SO_REUSEPORT would let a second server share a busy port
    server_->http.set_socket_options([](socket_t sock) {
        int yes = 1;
        setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    server_->http.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    for (const char* path : {"/api/health", "/api/defaults", "/api/synthesize"}) {
        server_->http.Get(path, route);
        server_->http.Post(path, route);
        server_->http.Put(path, route);
        server_->http.Delete(path, route);
        server_->http.Patch(path, route);
        server_->http.Options(path, [](const httplib::Request&, httplib::Response& res) {
            res.status = 204;
            res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
            res.set_header("Access-Control-Allow-Headers", "Content-Type");
        });
    }
    server_->http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
        if (!res.body.empty()) return;
        const std::string msg = res.status == 413 ? "request too large" : "not found";
        res.set_content(nlohmann::json{{"error", msg}}.dump(), "application/json");
    });
}

SynthesisService::~SynthesisService() { stop(); }

ApiResponse SynthesisService::handle(const std::string& method, const std::string& path,
                                     const std::string& body) const {
    if (path == "/api/health") {
        if (method != "GET") return error_response(405, "use GET");
        nlohmann::json j{{"status", "ok"}, {"version", kVersion}};
        if (model_) {
            j["model"] = model_->params.config.to_json();
            j["schedule"] = model_->schedule.config.to_json();
            j["parameters"] = model_->params.count();
        } else {
            j["model"] = nullptr;
        }
        j["methods"] = model_ ? nlohmann::json{"diffusion", "svd"} : nlohmann::json{"svd"};
        return {200, j};
    }
    if (path == "/api/defaults") {
        if (method != "GET") return error_response(405, "use GET");
        return {200,
                {{"w", defaults_.w},
                 {"steps", defaults_.steps},
                 {"magnitude", defaults_.magnitude},
                 {"resample_spacing", defaults_.resample_spacing},
                 {"width", defaults_.width},
                 {"height", defaults_.height},
                 {"max_side", kMaxRequestSide},
                 {"method", model_ ? "diffusion" : "svd"}}};
    }
    if (path == "/api/synthesize") {
        if (method != "POST") return error_response(405, "use POST");
        if (body.size() > kMaxRequestBytes) return error_response(413, "request too large");
        try {
            nlohmann::json j;
            try {
                j = nlohmann::json::parse(body);
            } catch (const nlohmann::json::parse_error& e) {
                return error_response(400, std::string("request body is not valid JSON: ") + e.what());
            }
            if (j.is_object()) {
                if (!j.contains("w")) j["w"] = defaults_.w;
                if (!j.contains("steps")) j["steps"] = defaults_.steps;
                if (!j.contains("magnitude")) j["magnitude"] = defaults_.magnitude;
                if (!j.contains("resample_spacing")) j["resample_spacing"] = defaults_.resample_spacing;
                if (!j.contains("width")) j["width"] = defaults_.width;
                if (!j.contains("height")) j["height"] = defaults_.height;
            }
            const SynthesisRequest req = SynthesisRequest::from_json(j);
            return {200, synthesize(req, model_.get()).to_json(true)};
        } catch (const RequestError& e) {
            return error_response(400, e.what(), e.details());
        } catch (const InvalidInput& e) {
            return error_response(400, e.what());
        } catch (const std::exception& e) {
            return error_response(500, e.what());
        }
    }
    return error_response(404, "no route for " + method + " " + path);
}

int SynthesisService::bind_to_any_port(const std::string& host) { return server_->http.bind_to_any_port(host); }

void SynthesisService::bind(const std::string& host, int port) {
    if (!server_->http.bind_to_port(host, port)) {
        throw IoError("cannot bind " + host + ":" + std::to_string(port) + " (address in use?)");
    }
}

void SynthesisService::listen_after_bind() { server_->http.listen_after_bind(); }

void SynthesisService::stop() {
    if (server_) server_->http.stop();
}

void SynthesisService::wait_until_ready() const { server_->http.wait_until_ready(); }

}  // namespace flowforge::app
