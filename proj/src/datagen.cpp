#include "flowforge/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "flowforge/dataset_io.hpp"
#include "flowforge/errors.hpp"

namespace flowforge {

void StructureParams::validate() const {
    if (!(core_radius > 0.0)) throw InvalidInput("structure core_radius must be > 0");
    if (strength == 0.0 || !std::isfinite(strength)) throw InvalidInput("structure strength must be nonzero");
    if (shape_index < 0 || shape_index >= int(kShapeMatrices.size())) throw InvalidInput("bad shape index");
}

double vatistas_profile(double r, double core_radius, double order) {
    if (r < 0.0) throw InvalidInput("vatistas_profile needs r >= 0");
    const double q = r / core_radius;
    return r / (core_radius * std::pow(1.0 + std::pow(q, 2.0 * order), 1.0 / order));
}

Vec2 eval_structure(const StructureParams& p, Vec2 pos, double order) {
    const double c = std::cos(p.rotation), s = std::sin(p.rotation);
    const double dx = pos[0] - p.center[0], dy = pos[1] - p.center[1];
    // local = R(-rotation) * (pos - center)
    const double lx = c * dx + s * dy;
    const double ly = -s * dx + c * dy;
    const double r = std::hypot(lx, ly);
    if (r == 0.0) return {0.0, 0.0};
    const ShapeMatrix& m = kShapeMatrices.at(std::size_t(p.shape_index));
    const double k = p.strength * vatistas_profile(r, p.core_radius, order) / r;
    const double vx = k * (m[0][0] * lx + m[0][1] * ly);
    const double vy = k * (m[1][0] * lx + m[1][1] * ly);
    return {c * vx - s * vy, s * vx + c * vy};
}

void GeneratorConfig::validate() const {
    if (min_structures < 1 || max_structures < min_structures) throw InvalidInput("bad structure count range");
    if (shapes.empty()) throw InvalidInput("generator needs at least one shape");
    for (int s : shapes) {
        if (s < 0 || s >= int(kShapeMatrices.size())) throw InvalidInput("generator shape index out of range");
    }
    if (!(core_radius_min > 0.0) || core_radius_max < core_radius_min) throw InvalidInput("bad core radius range");
    if (!(strength_min > 0.0) || strength_max < strength_min) throw InvalidInput("bad strength range");
    if (center_inset < 0.0 || center_inset >= 0.5) throw InvalidInput("center_inset must be in [0, 0.5)");
    if (!(vatistas_order > 0.0)) throw InvalidInput("vatistas_order must be > 0");
}

nlohmann::json GeneratorConfig::to_json() const {
    return {{"min_structures", min_structures}, {"max_structures", max_structures},
            {"shapes", shapes},                 {"center_inset", center_inset},
            {"core_radius_min", core_radius_min}, {"core_radius_max", core_radius_max},
            {"strength_min", strength_min},     {"strength_max", strength_max},
            {"vatistas_order", vatistas_order}, {"centered", centered}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
    GeneratorConfig c;
    c.min_structures = j.value("min_structures", c.min_structures);
    c.max_structures = j.value("max_structures", c.max_structures);
    c.shapes = j.value("shapes", c.shapes);
    c.center_inset = j.value("center_inset", c.center_inset);
    c.core_radius_min = j.value("core_radius_min", c.core_radius_min);
    c.core_radius_max = j.value("core_radius_max", c.core_radius_max);
    c.strength_min = j.value("strength_min", c.strength_min);
    c.strength_max = j.value("strength_max", c.strength_max);
    c.vatistas_order = j.value("vatistas_order", c.vatistas_order);
    c.centered = j.value("centered", c.centered);
    c.validate();
    return c;
}

std::vector<StructureParams> draw_structures(int width, int height, Rng& rng, const GeneratorConfig& cfg) {
    cfg.validate();
    const int count = std::uniform_int_distribution<int>(cfg.min_structures, cfg.max_structures)(rng);
    const double side = std::min(width, height);
    std::vector<StructureParams> out;
    out.reserve(std::size_t(count));
    for (int k = 0; k < count; ++k) {
        StructureParams p;
        p.shape_index = cfg.shapes[std::uniform_int_distribution<std::size_t>(0, cfg.shapes.size() - 1)(rng)];
        const double cx = uniform(rng, cfg.center_inset, 1.0 - cfg.center_inset) * (width - 1);
        const double cy = uniform(rng, cfg.center_inset, 1.0 - cfg.center_inset) * (height - 1);
        p.center = cfg.centered ? Vec2{0.5 * (width - 1), 0.5 * (height - 1)} : Vec2{cx, cy};
        p.core_radius = uniform(rng, cfg.core_radius_min, cfg.core_radius_max) * side;
        const double sign = std::bernoulli_distribution(0.5)(rng) ? 1.0 : -1.0;
        p.strength = sign * uniform(rng, cfg.strength_min, cfg.strength_max);
        const double rot = uniform(rng, 0.0, 2.0 * std::numbers::pi);
        p.rotation = cfg.centered ? 0.0 : rot;
        out.push_back(p);
    }
    return out;
}

VectorField render_structures(int width, int height, std::span<const StructureParams> structures, double order) {
    VectorField f(width, height);
    for (const auto& s : structures) s.validate();
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            Vec2 acc{0.0, 0.0};
            for (const auto& s : structures) {
                const Vec2 v = eval_structure(s, {double(x), double(y)}, order);
                acc[0] += v[0];
                acc[1] += v[1];
            }
            f.set(x, y, acc);
        }
    }
    return f;
}

VectorField gen_field(int width, int height, Rng& rng, const GeneratorConfig& cfg) {
    const auto structures = draw_structures(width, height, rng, cfg);
    return render_structures(width, height, structures, cfg.vatistas_order);
}

namespace {

TraceDirection parse_direction(const std::string& s) {
    if (s == "forward") return TraceDirection::forward;
    if (s == "backward") return TraceDirection::backward;
    if (s == "both") return TraceDirection::both;
    throw InvalidInput("trace direction must be forward, backward or both");
}

std::string direction_name(TraceDirection d) {
    switch (d) {
        case TraceDirection::forward: return "forward";
        case TraceDirection::backward: return "backward";
        default: return "both";
    }
}

}  // namespace

void DatasetConfig::validate() const {
    if (n_samples < 10) throw InvalidInput("a dataset needs at least 10 samples");
    if (width < VectorField::kMinSide || height < VectorField::kMinSide) throw InvalidInput("dataset grid too small");
    if (streamlines_per_sample < 0) throw InvalidInput("streamlines_per_sample must be >= 0");
    if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw InvalidInput("test_fraction must be in (0, 1)");
    if (!(mask_radius >= 0.0)) throw InvalidInput("mask_radius must be >= 0");
    trace.validate();
    generator.validate();
}

nlohmann::json DatasetConfig::to_json() const {
    return {{"n_samples", n_samples},
            {"width", width},
            {"height", height},
            {"streamlines_per_sample", streamlines_per_sample},
            {"seed", seed},
            {"test_fraction", test_fraction},
            {"mask_radius", mask_radius},
            {"trace",
             {{"base_step", trace.base_step},
              {"max_steps", trace.max_steps},
              {"min_speed", trace.min_speed},
              {"error_tol", trace.error_tol},
              {"direction", direction_name(trace.direction)}}},
            {"generator", generator.to_json()}};
}

DatasetConfig DatasetConfig::from_json(const nlohmann::json& j) {
    DatasetConfig c;
    c.n_samples = j.value("n_samples", c.n_samples);
    c.width = j.value("width", c.width);
    c.height = j.value("height", c.height);
    c.streamlines_per_sample = j.value("streamlines_per_sample", c.streamlines_per_sample);
    c.seed = j.value("seed", c.seed);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.mask_radius = j.value("mask_radius", c.mask_radius);
    if (j.contains("trace")) {
        const auto& t = j["trace"];
        c.trace.base_step = t.value("base_step", c.trace.base_step);
        c.trace.max_steps = t.value("max_steps", c.trace.max_steps);
        c.trace.min_speed = t.value("min_speed", c.trace.min_speed);
        c.trace.error_tol = t.value("error_tol", c.trace.error_tol);
        c.trace.direction = parse_direction(t.value("direction", direction_name(c.trace.direction)));
    }
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j["generator"]);
    c.validate();
    return c;
}

double DatasetManifest::mean_accepted_streamlines() const {
    if (accepted_streamlines.empty()) return 0.0;
    return std::accumulate(accepted_streamlines.begin(), accepted_streamlines.end(), 0.0) /
           double(accepted_streamlines.size());
}

nlohmann::json DatasetManifest::to_json() const {
    return {{"format", "VFDS"},
            {"version", version},
            {"sample_count", sample_count},
            {"width", width},
            {"height", height},
            {"scale", scale},
            {"streamlines_per_sample", streamlines_per_sample},
            {"seed", seed},
            {"train_fraction", train_fraction},
            {"test_fraction", test_fraction},
            {"train_indices", train_indices},
            {"test_indices", test_indices},
            {"accepted_streamlines", accepted_streamlines},
            {"empty_mask_samples", empty_mask_samples},
            {"header_bytes", header_bytes},
            {"record_bytes", record_bytes},
            {"generation", generation}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
    try {
        DatasetManifest m;
        m.version = j.at("version").get<int>();
        m.sample_count = j.at("sample_count").get<std::size_t>();
        m.width = j.at("width").get<int>();
        m.height = j.at("height").get<int>();
        m.scale = j.at("scale").get<double>();
        m.streamlines_per_sample = j.at("streamlines_per_sample").get<int>();
        m.seed = j.at("seed").get<std::uint64_t>();
        m.train_fraction = j.at("train_fraction").get<double>();
        m.test_fraction = j.at("test_fraction").get<double>();
        m.train_indices = j.at("train_indices").get<std::vector<std::size_t>>();
        m.test_indices = j.at("test_indices").get<std::vector<std::size_t>>();
        m.accepted_streamlines = j.at("accepted_streamlines").get<std::vector<int>>();
        m.empty_mask_samples = j.at("empty_mask_samples").get<std::vector<std::size_t>>();
        m.header_bytes = j.at("header_bytes").get<std::size_t>();
        m.record_bytes = j.at("record_bytes").get<std::size_t>();
        m.generation = j.value("generation", nlohmann::json::object());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed, std::string("dataset manifest: ") + e.what());
    }
}

std::filesystem::path manifest_path(const std::filesystem::path& dataset) {
    return std::filesystem::path(dataset.string() + ".json");
}

DatasetManifest read_manifest(const std::filesystem::path& dataset) {
    std::ifstream in(manifest_path(dataset));
    if (!in) throw IoError("missing manifest " + manifest_path(dataset).string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(FormatError::Kind::Malformed, std::string("dataset manifest: ") + e.what());
    }
    DatasetManifest m = DatasetManifest::from_json(j);
    if (m.version != int(kDatasetVersion)) {
        throw FormatError(FormatError::Kind::VersionMismatch, "dataset manifest version mismatch");
    }
    return m;
}

void write_manifest(const std::filesystem::path& dataset, const DatasetManifest& m) {
    std::ofstream out(manifest_path(dataset), std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest_path(dataset).string());
    out << m.to_json().dump(2) << "\n";
}

void split_indices(std::size_t n, double test_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& test) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng = derive_rng(seed, 0x5917ull);
    // Fisher-Yates with our own index draws: std::shuffle is not specified
    // identically across standard libraries.
    for (std::size_t i = n; i > 1; --i) {
        const std::size_t j = std::size_t(rng() % i);
        std::swap(idx[i - 1], idx[j]);
    }
    std::size_t n_test = std::size_t(std::llround(double(n) * test_fraction));
    n_test = std::clamp<std::size_t>(n_test, 1, n > 1 ? n - 1 : 1);
    test.assign(idx.begin(), idx.begin() + std::ptrdiff_t(n_test));
    train.assign(idx.begin() + std::ptrdiff_t(n_test), idx.end());
    std::sort(test.begin(), test.end());
    std::sort(train.begin(), train.end());
}

namespace {

VectorField raw_sample_field(const DatasetConfig& cfg, std::size_t index) {
    Rng rng = derive_rng(cfg.seed, index, 0);
    return gen_field(cfg.width, cfg.height, rng, cfg.generator);
}

}  // namespace

GeneratedSample generate_sample(const DatasetConfig& cfg, std::size_t index, double scale) {
    GeneratedSample s;
    s.field = raw_sample_field(cfg, index);
    for (double& x : s.field.u()) x /= scale;
    for (double& x : s.field.v()) x /= scale;
    StreamlineSet lines;
    if (cfg.streamlines_per_sample > 0) {
        Rng rng = derive_rng(cfg.seed, index, 1);
        const auto seeds = seed_random(cfg.width, cfg.height, cfg.streamlines_per_sample, rng);
        lines = trace_all(s.field, seeds, cfg.trace);
    }
    s.accepted_streamlines = int(lines.lines.size());
    s.constraint = rasterize(lines, &s.field, cfg.width, cfg.height, cfg.mask_radius);
    return s;
}

DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out) {
    cfg.validate();
    const std::size_t n = std::size_t(cfg.n_samples);

    double scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, raw_sample_field(cfg, i).max_abs_component());
    if (!(scale > 0.0)) scale = 1.0;

    DatasetManifest m;
    m.version = int(kDatasetVersion);
    m.sample_count = n;
    m.width = cfg.width;
    m.height = cfg.height;
    m.scale = scale;
    m.streamlines_per_sample = cfg.streamlines_per_sample;
    m.seed = cfg.seed;
    m.test_fraction = cfg.test_fraction;
    m.train_fraction = 1.0 - cfg.test_fraction;
    m.header_bytes = kDatasetHeaderBytes;
    m.record_bytes = dataset_record_bytes(cfg.width, cfg.height);
    m.generation = cfg.to_json();

    DatasetWriter writer(out, cfg.width, cfg.height);
    for (std::size_t i = 0; i < n; ++i) {
        GeneratedSample s = generate_sample(cfg, i, scale);
        m.accepted_streamlines.push_back(s.accepted_streamlines);
        if (s.accepted_streamlines == 0) m.empty_mask_samples.push_back(i);
        writer.write(s.field, s.constraint);
    }
    writer.finish();
    split_indices(n, cfg.test_fraction, cfg.seed, m.train_indices, m.test_indices);
    write_manifest(out, m);
    return m;
}

}  // namespace flowforge
