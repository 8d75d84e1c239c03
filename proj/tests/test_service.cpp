#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <httplib.h>

#include <cmath>
#include <filesystem>
#include <sstream>
#include <thread>

#include "flowforge/app/commands.hpp"
#include "flowforge/app/service.hpp"
#include "flowforge/version.hpp"

using namespace flowforge;
using namespace flowforge::app;
namespace fs = std::filesystem;

namespace {

const fs::path kSource = FLOWFORGE_SOURCE_DIR;

std::shared_ptr<const Model> random_model(std::uint64_t seed) {
    NetConfig net;
    net.base_width = 8;
    net.levels = 2;
    net.time_embed_dim = 16;
    net.groups = 4;
    Rng rng(seed);
    Checkpoint c;
    c.params = init_params<float>(net, rng);
    for (const auto& t : c.params.tensors()) {
        if (t.name.rfind("out.", 0) != 0) continue;
        for (auto& v : c.params.tensor(t.name)) v = float(0.05 * standard_normal(rng));
    }
    c.meta = {{"width", 32}, {"height", 32}};
    return Model::from_checkpoint(c);
}

// Runs the service on an ephemeral port for the lifetime of the object.
struct LiveServer {
    SynthesisService service;
    int port = -1;
    std::thread thread;

    explicit LiveServer(std::shared_ptr<const Model> model, ServiceDefaults d = {}) : service(std::move(model), d) {
        port = service.bind_to_any_port("127.0.0.1");
        REQUIRE(port > 0);
        thread = std::thread([this] { service.listen_after_bind(); });
        service.wait_until_ready();
    }
    ~LiveServer() {
        service.stop();
        thread.join();
    }
    httplib::Client client() const {
        httplib::Client c("127.0.0.1", port);
        c.set_read_timeout(120, 0);
        return c;
    }
};

nlohmann::json without_timing(nlohmann::json j) {
    j.erase("timing_ms");
    return j;
}

// The subset of JSON Schema used by the polyline schema file.
std::vector<std::string> schema_problems(const nlohmann::json& schema, const nlohmann::json& rec) {
    std::vector<std::string> out;
    if (!rec.is_object()) return {"not an object"};
    for (const auto& key : schema["required"]) {
        if (!rec.contains(key.get<std::string>())) out.push_back("missing " + key.get<std::string>());
    }
    const auto& props = schema["properties"];
    for (const auto& [key, value] : rec.items()) {
        if (!props.contains(key)) {
            out.push_back("unexpected " + key);
            continue;
        }
        const auto& p = props[key];
        if (key == "points") {
            if (!value.is_array() || value.size() < p["minItems"].get<std::size_t>()) out.push_back("points");
            for (const auto& pt : value) {
                if (!pt.is_array() || pt.size() != 2 || !pt[0].is_number() || !pt[1].is_number()) {
                    out.push_back("point shape");
                }
            }
        } else if (key == "magnitude") {
            if (!value.is_null() && !(value.is_number() && value.get<double>() >= p["minimum"].get<double>())) {
                out.push_back("magnitude");
            }
        } else if (key == "source") {
            if (std::find(p["enum"].begin(), p["enum"].end(), value) == p["enum"].end()) out.push_back("source");
        }
    }
    return out;
}

}  // namespace

TEST_CASE("handle: health, defaults and routing") {
    SynthesisService svc(random_model(1), ServiceDefaults{2.0, 100, 0.4, 3.0, 16, 16});
    const auto h = svc.handle("GET", "/api/health", "");
    CHECK(h.status == 200);
    CHECK(h.body["status"] == "ok");
    CHECK(h.body["version"] == kVersion);
    CHECK(h.body["model"]["base_width"] == 8);
    CHECK(h.body["methods"].size() == 2);

    const auto d = svc.handle("GET", "/api/defaults", "");
    CHECK(d.status == 200);
    CHECK(d.body["w"] == 2.0);
    CHECK(d.body["steps"] == 100);
    CHECK(d.body["magnitude"] == 0.4);
    CHECK(d.body["resample_spacing"] == 3.0);
    CHECK(d.body["width"] == 32);  // the checkpoint's grid wins
    CHECK(d.body["max_side"] == kMaxRequestSide);

    CHECK(svc.handle("GET", "/api/synthesize", "").status == 405);
    CHECK(svc.handle("POST", "/api/health", "").status == 405);
    CHECK(svc.handle("GET", "/api/nothing", "").status == 404);

    SynthesisService bare(nullptr);
    CHECK(bare.handle("GET", "/api/health", "").body["model"].is_null());
    CHECK(bare.handle("GET", "/api/defaults", "").body["method"] == "svd");
    const auto r = bare.handle("POST", "/api/synthesize", R"({"method": "diffusion"})");
    CHECK(r.status == 400);
}

TEST_CASE("handle: structured validation errors") {
    SynthesisService svc(random_model(1));
    auto post = [&](const std::string& body) { return svc.handle("POST", "/api/synthesize", body); };

    auto r = post("{not json");
    CHECK(r.status == 400);
    CHECK(r.body["error"].get<std::string>().find("not valid JSON") != std::string::npos);

    CHECK(post("[1, 2]").status == 400);

    r = post(R"({"method": "svd", "streamlines": [{"points": [[1, 1]]}, {"points": [[1, 1], [2, 2]]},
                 {"points": [[1, 1], [99, 2]]}]})");
    CHECK(r.status == 400);
    REQUIRE(r.body["details"].size() == 2);
    CHECK(r.body["details"][0].get<std::string>().rfind("line 0:", 0) == 0);
    CHECK(r.body["details"][1].get<std::string>().rfind("line 2:", 0) == 0);

    r = post(R"({"method": "svd", "width": 300, "height": 32})");
    CHECK(r.status == 400);
    CHECK(r.body["error"].get<std::string>().find("256") != std::string::npos);

    CHECK(post(R"({"method": "svd", "w": -1})").status == 400);
    CHECK(post(R"({"method": "magic"})").status == 400);
    CHECK(post(R"({"width": 30, "height": 32})").status == 400);  // not divisible for the model
    CHECK(post(R"({"steps": 0})").status == 400);
    CHECK(post(R"({"width": "wide"})").status == 400);
    CHECK(post(std::string(kMaxRequestBytes + 1, ' ')).status == 413);
}

TEST_CASE("http: health, vortex round trip and error statuses") {
    LiveServer server(random_model(2));
    auto cli = server.client();

    auto res = cli.Get("/api/health");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->get_header_value("Content-Type") == "application/json");
    CHECK(res->get_header_value("Access-Control-Allow-Origin") == "*");
    CHECK(nlohmann::json::parse(res->body)["version"] == kVersion);

    res = cli.Get("/api/defaults");
    REQUIRE(res);
    CHECK(nlohmann::json::parse(res->body)["w"] == 3.0);

    const auto request = load_json_file(kSource / "tests" / "fixtures" / "vortex_request.json");
    res = cli.Post("/api/synthesize", request.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto body = nlohmann::json::parse(res->body);
    CHECK(body["width"] == 32);
    CHECK(body["height"] == 32);
    REQUIRE(body["u"].size() == 32 * 32);
    REQUIRE(body["v"].size() == 32 * 32);
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        CHECK(std::isfinite(body["u"][i].get<double>()));
        CHECK(std::isfinite(body["v"][i].get<double>()));
    }
    CHECK(body["method"] == "diffusion");
    CHECK(body["mask_density"].get<double>() > 0.0);
    CHECK(body["timing_ms"].get<double>() > 0.0);
    CHECK(body["input_streamlines"].size() == 1);

    // known cells carry the drawn tangents exactly
    for (std::size_t i = 0; i < 32 * 32; ++i) {
        if (body["mask"][i] != 1) continue;
        CHECK(std::hypot(body["u"][i].get<double>(), body["v"][i].get<double>()) == doctest::Approx(0.5));
    }

    res = cli.Get("/api/synthesize");
    REQUIRE(res);
    CHECK(res->status == 405);
    res = cli.Get("/api/missing");
    REQUIRE(res);
    CHECK(res->status == 404);
    CHECK(nlohmann::json::parse(res->body).contains("error"));
    res = cli.Post("/api/synthesize", R"({"method": "svd", "width": 512, "height": 512})", "application/json");
    REQUIRE(res);
    CHECK(res->status == 400);
    CHECK(nlohmann::json::parse(res->body).contains("error"));
    res = cli.Post("/api/synthesize", std::string(kMaxRequestBytes + 16, ' '), "application/json");
    if (res) CHECK(res->status == 413);  // the server may also drop the connection
    res = cli.Options("/api/synthesize");
    REQUIRE(res);
    CHECK(res->status == 204);
}

TEST_CASE("http: concurrent requests match serial runs bitwise") {
    const auto model = random_model(3);
    LiveServer server(model);
    auto base = load_json_file(kSource / "tests" / "fixtures" / "vortex_request.json");
    base["steps"] = 40;
    base["w"] = 0.5;

    std::vector<nlohmann::json> serial;
    for (int k = 0; k < 4; ++k) {
        auto r = base;
        r["seed"] = 100 + k;
        serial.push_back(without_timing(synthesize(SynthesisRequest::from_json(r), model.get()).to_json()));
    }

    std::vector<nlohmann::json> concurrent(4);
    std::vector<int> status(4, 0);
    std::vector<std::thread> threads;
    for (int k = 0; k < 4; ++k) {
        threads.emplace_back([&, k] {
            auto r = base;
            r["seed"] = 100 + k;
            auto cli = server.client();
            auto res = cli.Post("/api/synthesize", r.dump(), "application/json");
            if (!res) return;
            status[k] = res->status;
            concurrent[k] = without_timing(nlohmann::json::parse(res->body));
        });
    }
    for (auto& t : threads) t.join();
    for (int k = 0; k < 4; ++k) {
        CHECK(status[k] == 200);
        CHECK(concurrent[k] == serial[k]);
    }
    // independent seeds give independent fields
    CHECK(serial[0]["u"] != serial[1]["u"]);

    // identical requests serialize identically
    auto cli = server.client();
    auto r = base;
    r["seed"] = 100;
    auto a = cli.Post("/api/synthesize", r.dump(), "application/json");
    REQUIRE(a);
    CHECK(without_timing(nlohmann::json::parse(a->body)).dump() == serial[0].dump());
}

TEST_CASE("http: a busy port is reported") {
    LiveServer first(nullptr);
    SynthesisService second(nullptr);
    CHECK_THROWS_AS(second.bind("127.0.0.1", first.port), IoError);
}

TEST_CASE("polyline schema contract") {
    const auto schema = load_json_file(kSource / "schemas" / "polyline.schema.json");
    const auto strokes = load_json_file(kSource / "tests" / "fixtures" / "ui_strokes.json");
    for (const auto& s : strokes["strokes"]) CHECK(schema_problems(schema, s).empty());
    CHECK_FALSE(schema_problems(schema, {{"points", {{1, 2}}}}).empty());
    CHECK_FALSE(schema_problems(schema, {{"points", {{1, 2}, {3, 4}}}, {"source", "pen"}}).empty());
    CHECK_FALSE(schema_problems(schema, {{"points", {{1, 2}, {3, 4}}}, {"colour", 1}}).empty());

    // what the primary component emits conforms too
    const auto request = load_json_file(kSource / "tests" / "fixtures" / "vortex_request.json");
    auto req = SynthesisRequest::from_json(request);
    req.method = Method::svd;
    const auto res = synthesize(req, nullptr);
    const auto j = res.to_json();
    for (const auto& l : j["streamlines"]) CHECK(schema_problems(schema, l).empty());
    for (const auto& l : j["input_streamlines"]) CHECK(schema_problems(schema, l).empty());
    for (const auto& l : request["streamlines"]) CHECK(schema_problems(schema, l).empty());
}

TEST_CASE("UI strokes give the same mask through the service and the CLI") {
    const auto strokes = load_json_file(kSource / "tests" / "fixtures" / "ui_strokes.json");
    nlohmann::json body{{"width", strokes["width"]},
                        {"height", strokes["height"]},
                        {"method", "svd"},
                        {"streamlines", strokes["strokes"]}};

    LiveServer server(nullptr);
    auto cli = server.client();
    auto res = cli.Post("/api/synthesize", body.dump(), "application/json");
    REQUIRE(res);
    REQUIRE(res->status == 200);
    const auto via_http = nlohmann::json::parse(res->body);

    const auto dir = fs::temp_directory_path() / "flowforge_test_service_contract";
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_json_file(dir / "request.json", body);
    std::ostringstream log;
    cmd_synthesize(SynthesisRequest::from_json(load_json_file(dir / "request.json")), nullptr, dir / "cli", log);
    const auto via_cli = load_json_file(synthesize_outputs(dir / "cli").response);

    REQUIRE(via_http["mask"].size() == 32 * 32);
    CHECK(via_http["mask"] == via_cli["mask"]);
    CHECK(via_http["known_cells"] == via_cli["known_cells"]);
    CHECK(via_http["known_cells"].get<std::size_t>() > 0);
    CHECK(via_http["u"] == via_cli["u"]);

    // and the same as rasterizing the resampled strokes directly
    StreamlineSet set;
    set.source = StreamlineSource::hand_drawn;
    for (const auto& s : strokes["strokes"]) {
        Polyline line = resample_polyline(polyline_from_json(s), kDefaultResampleSpacing);
        line.magnitude = s.contains("magnitude") ? s["magnitude"].get<double>() : kDefaultHandDrawnMagnitude;
        set.lines.push_back(line);
    }
    const auto cm = rasterize(set, nullptr, 32, 32);
    for (std::size_t i = 0; i < cm.mask.values.size(); ++i) CHECK(via_http["mask"][i] == (cm.known(i) ? 1 : 0));
    fs::remove_all(dir);
}
