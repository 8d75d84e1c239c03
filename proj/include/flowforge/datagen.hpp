#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/field.hpp"
#include "flowforge/rng.hpp"
#include "flowforge/streamline.hpp"

namespace flowforge {

/// One critical-point structure: a base shape matrix scaled by a Vatistas
/// speed profile, placed at `center` and rotated by `rotation`.
struct StructureParams {
    Vec2 center{0.0, 0.0};  // cell coordinates
    int shape_index = 0;    // 0 rotation, 1 saddle, 2 spiral
    double core_radius = 1.0;
    double strength = 1.0;
    double rotation = 0.0;  // radians

    void validate() const;
};

using ShapeMatrix = std::array<std::array<double, 2>, 2>;

inline constexpr std::array<ShapeMatrix, 3> kShapeMatrices{{
    {{{0.0, -1.0}, {1.0, 0.0}}},   // rotation
    {{{1.0, 0.0}, {0.0, -1.0}}},   // saddle
    {{{0.5, -1.0}, {1.0, 0.5}}},   // spiral
}};

inline constexpr double kDefaultVatistasOrder = 2.0;

/// v0(r) = r / (rc * (1 + (r/rc)^(2n))^(1/n))
double vatistas_profile(double r, double core_radius, double order = kDefaultVatistasOrder);

Vec2 eval_structure(const StructureParams& p, Vec2 pos, double order = kDefaultVatistasOrder);

struct GeneratorConfig {
    int min_structures = 1;
    int max_structures = 4;
    std::vector<int> shapes{0, 1, 2};
    double center_inset = 0.1;       // fraction of the side kept clear of centers
    double core_radius_min = 0.06;   // fractions of the shorter side
    double core_radius_max = 0.25;
    double strength_min = 0.5;       // magnitude; sign drawn separately
    double strength_max = 1.5;
    double vatistas_order = kDefaultVatistasOrder;
    bool centered = false;           // pin every structure to the domain center, rotation 0

    void validate() const;
    nlohmann::json to_json() const;
    static GeneratorConfig from_json(const nlohmann::json& j);
};

std::vector<StructureParams> draw_structures(int width, int height, Rng& rng, const GeneratorConfig& cfg);
VectorField render_structures(int width, int height, std::span<const StructureParams> structures,
                              double order = kDefaultVatistasOrder);

/// Random superposition of structures; raw (unnormalized) units.
VectorField gen_field(int width, int height, Rng& rng, const GeneratorConfig& cfg);

struct DatasetConfig {
    int n_samples = 2000;
    int width = 32;
    int height = 32;
    int streamlines_per_sample = 12;
    std::uint64_t seed = 1;
    double test_fraction = 0.1;
    double mask_radius = kDefaultMaskRadius;
    TraceParams trace{};
    GeneratorConfig generator{};

    void validate() const;
    nlohmann::json to_json() const;
    static DatasetConfig from_json(const nlohmann::json& j);
};

/// Sidecar describing a written dataset. Stored next to the binary file as
/// `<path>.json`.
struct DatasetManifest {
    int version = 1;
    std::size_t sample_count = 0;
    int width = 0;
    int height = 0;
    double scale = 1.0;
    int streamlines_per_sample = 0;
    std::uint64_t seed = 0;
    double train_fraction = 0.9;
    double test_fraction = 0.1;
    std::vector<std::size_t> train_indices;
    std::vector<std::size_t> test_indices;
    std::vector<int> accepted_streamlines;     // per sample
    std::vector<std::size_t> empty_mask_samples;
    std::size_t header_bytes = 0;
    std::size_t record_bytes = 0;
    nlohmann::json generation;                 // full DatasetConfig echo

    double mean_accepted_streamlines() const;
    nlohmann::json to_json() const;
    static DatasetManifest from_json(const nlohmann::json& j);
};

std::filesystem::path manifest_path(const std::filesystem::path& dataset);
DatasetManifest read_manifest(const std::filesystem::path& dataset);
void write_manifest(const std::filesystem::path& dataset, const DatasetManifest& m);

/// Deterministic split: indices shuffled with a generator derived from the
/// seed, the first round(n * test_fraction) (at least one) go to test.
void split_indices(std::size_t n, double test_fraction, std::uint64_t seed, std::vector<std::size_t>& train,
                   std::vector<std::size_t>& test);

/// Generate fields, normalize them with one global scale, trace randomly
/// seeded streamlines on each normalized field and write field + mask records.
/// Samples are regenerated from per-sample streams in a second pass so memory
/// does not grow with the sample count.
DatasetManifest build_dataset(const DatasetConfig& cfg, const std::filesystem::path& out);

/// The normalized field and constraint for one sample, as build_dataset makes it.
struct GeneratedSample {
    VectorField field;
    ConstraintMask constraint;
    int accepted_streamlines = 0;
};
GeneratedSample generate_sample(const DatasetConfig& cfg, std::size_t index, double scale);

}  // namespace flowforge
