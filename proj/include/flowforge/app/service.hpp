#pragma once

#include <cstddef>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "flowforge/app/synthesis.hpp"

namespace flowforge::app {

struct ServiceDefaults {
    double w = 3.0;
    int steps = 250;
    double magnitude = kDefaultHandDrawnMagnitude;
    double resample_spacing = kDefaultResampleSpacing;
    int width = 32;   // replaced by the checkpoint's training grid when known
    int height = 32;
};

inline constexpr std::size_t kMaxRequestBytes = 8u << 20;

struct ApiResponse {
    int status = 200;
    nlohmann::json body;
};

/// HTTP front end for synthesis. Requests only read the shared model, so any
/// number of them may run at once.
///
///   POST /api/synthesize   SynthesisRequest -> SynthesisResponse
///   GET  /api/health       version and model configuration
///   GET  /api/defaults     defaults for the sketch client
class SynthesisService {
public:
    explicit SynthesisService(std::shared_ptr<const Model> model, ServiceDefaults defaults = {});
    ~SynthesisService();
    SynthesisService(const SynthesisService&) = delete;
    SynthesisService& operator=(const SynthesisService&) = delete;

    /// Routing and validation without the network layer.
    ApiResponse handle(const std::string& method, const std::string& path, const std::string& body) const;

    /// Returns the chosen port, or -1 on failure.
    int bind_to_any_port(const std::string& host);
    /// Throws IoError if the address cannot be bound (e.g. port in use).
    void bind(const std::string& host, int port);
    /// Blocks until stop() is called.
    void listen_after_bind();
    void stop();
    void wait_until_ready() const;

    const ServiceDefaults& defaults() const { return defaults_; }

private:
    struct Server;
    std::shared_ptr<const Model> model_;
    ServiceDefaults defaults_;
    std::unique_ptr<Server> server_;
};

}  // namespace flowforge::app
