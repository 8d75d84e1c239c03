#include "flowforge/app/synthesis.hpp"

#include <chrono>
#include <cmath>

#include "flowforge/errors.hpp"

namespace flowforge::app {

std::shared_ptr<const Model> Model::from_checkpoint(const Checkpoint& ckpt) {
    auto m = std::make_shared<Model>();
    m->params = ckpt.params;
    m->schedule = make_schedule(ckpt.schedule);
    m->meta = ckpt.meta;
    if (ckpt.meta.contains("train") && ckpt.meta["train"].contains("conditioning")) {
        m->conditioning = conditioning_from_json(ckpt.meta["train"]["conditioning"]);
    }
    m->dataset_scale = ckpt.meta.value("dataset_scale", 1.0);
    return m;
}

std::shared_ptr<const Model> Model::load(const std::filesystem::path& checkpoint) {
    return from_checkpoint(load_checkpoint(checkpoint));
}

std::string method_name(Method m) { return m == Method::svd ? "svd" : "diffusion"; }

Method method_from_string(const std::string& s) {
    if (s == "diffusion") return Method::diffusion;
    if (s == "svd") return Method::svd;
    throw RequestError("method must be \"diffusion\" or \"svd\", got \"" + s + "\"");
}

void SynthesisRequest::validate(const Model* model) const {
    if (width < VectorField::kMinSide || height < VectorField::kMinSide) {
        throw RequestError("width and height must be at least " + std::to_string(VectorField::kMinSide));
    }
    if (width > kMaxRequestSide || height > kMaxRequestSide) {
        throw RequestError("width and height are capped at " + std::to_string(kMaxRequestSide));
    }
    if (!(w >= 0.0) || !std::isfinite(w)) throw RequestError("w must be a finite value >= 0");
    if (!(resample_spacing > 0.0) || !std::isfinite(resample_spacing)) {
        throw RequestError("resample_spacing must be > 0");
    }
    if (!(magnitude >= 0.0) || !std::isfinite(magnitude)) throw RequestError("magnitude must be >= 0");
    const auto problems = validate_polylines(streamlines, width, height);
    if (!problems.empty()) throw RequestError("invalid streamlines", problems);
    if (method == Method::diffusion) {
        if (!model) throw RequestError("method diffusion needs a loaded checkpoint");
        if (steps < 1 || steps > model->schedule.T) {
            throw RequestError("steps must be in [1, " + std::to_string(model->schedule.T) + "]");
        }
        try {
            model->params.config.check_input(height, width);
        } catch (const InvalidInput& e) {
            throw RequestError(e.what());
        }
    } else {
        try {
            svd.validate(1.0);
        } catch (const InvalidInput& e) {
            throw RequestError(e.what());
        }
    }
}

nlohmann::json SynthesisRequest::to_json() const {
    nlohmann::json lines = nlohmann::json::array();
    for (const auto& l : streamlines) lines.push_back(polyline_to_json(l, StreamlineSource::hand_drawn));
    return {{"width", width},
            {"height", height},
            {"streamlines", lines},
            {"method", method_name(method)},
            {"w", w},
            {"steps", steps},
            {"seed", seed},
            {"resample_spacing", resample_spacing},
            {"magnitude", magnitude},
            {"svd", svd.to_json()}};
}

SynthesisRequest SynthesisRequest::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw RequestError("request body must be a JSON object");
    SynthesisRequest r;
    try {
        r.width = j.value("width", r.width);
        r.height = j.value("height", r.height);
        r.method = method_from_string(j.value("method", std::string("diffusion")));
        r.w = j.value("w", r.w);
        r.steps = j.value("steps", r.steps);
        r.seed = j.value("seed", r.seed);
        r.resample_spacing = j.value("resample_spacing", r.resample_spacing);
        r.magnitude = j.value("magnitude", r.magnitude);
        if (j.contains("svd")) r.svd = SvdConfig::from_json(j["svd"]);
        if (j.contains("streamlines")) {
            if (!j["streamlines"].is_array()) throw RequestError("streamlines must be an array");
            std::vector<std::string> problems;
            for (std::size_t i = 0; i < j["streamlines"].size(); ++i) {
                try {
                    r.streamlines.push_back(polyline_from_json(j["streamlines"][i]));
                } catch (const InvalidInput& e) {
                    problems.push_back("line " + std::to_string(i) + ": " + e.what());
                }
            }
            if (!problems.empty()) throw RequestError("invalid streamlines", problems);
        }
    } catch (const nlohmann::json::exception& e) {
        throw RequestError(std::string("malformed request: ") + e.what());
    }
    return r;
}

namespace {

std::vector<int> mask_bits(const ConstraintMask& c) {
    std::vector<int> bits(c.mask.values.size());
    for (std::size_t i = 0; i < bits.size(); ++i) bits[i] = c.known(i) ? 1 : 0;
    return bits;
}

}  // namespace

nlohmann::json SynthesisResponse::to_json(bool with_timing) const {
    nlohmann::json preview_json = nlohmann::json::array();
    for (const auto& l : preview) preview_json.push_back(polyline_to_json(l, StreamlineSource::traced));
    nlohmann::json input_json = nlohmann::json::array();
    for (const auto& l : input_lines) input_json.push_back(polyline_to_json(l, StreamlineSource::hand_drawn));
    nlohmann::json j{{"width", field.width()},
                     {"height", field.height()},
                     {"u", field.u()},
                     {"v", field.v()},
                     {"mask_density", mask_density()},
                     {"known_cells", constraint.known_count()},
                     {"mask", mask_bits(constraint)},
                     {"method", method_name(method)},
                     {"streamlines", preview_json},
                     {"input_streamlines", input_json}};
    if (with_timing) j["timing_ms"] = timing_ms;
    return j;
}

std::vector<Polyline> trace_preview(const VectorField& field) {
    const auto seeds = seed_uniform(field.width(), field.height(), kPreviewSeedsPerAxis);
    return trace_all(field, seeds, TraceParams{}).lines;
}

SynthesisResponse synthesize(const SynthesisRequest& req, const Model* model) {
    req.validate(model);
    const auto start = std::chrono::steady_clock::now();

    SynthesisResponse res;
    res.method = req.method;
    StreamlineSet set;
    set.source = StreamlineSource::hand_drawn;
    for (const Polyline& line : req.streamlines) {
        Polyline r = resample_polyline(line, req.resample_spacing);
        r.magnitude = line.magnitude.value_or(req.magnitude);
        set.lines.push_back(std::move(r));
    }
    res.constraint = rasterize(set, nullptr, req.width, req.height);
    res.input_lines = set.lines;

    if (req.method == Method::diffusion) {
        SampleConfig sc;
        sc.steps = req.steps;
        sc.w = req.w;
        sc.seed = req.seed;
        sc.conditioning = model->conditioning;
        Rng rng = derive_rng(req.seed, 0);
        res.field = sample(model->params, res.constraint, sc, model->schedule, rng);
    } else {
        res.field = svd_solve(res.constraint, req.svd).field;
    }
    res.preview = trace_preview(res.field);
    res.timing_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    return res;
}

}  // namespace flowforge::app
