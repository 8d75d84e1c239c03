#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/field.hpp"
#include "flowforge/rng.hpp"

namespace flowforge {

enum class StreamlineSource { traced, hand_drawn };

struct Polyline {
    std::vector<Vec2> points;           // continuous cell coordinates
    std::vector<Vec2> velocities;       // optional, one per point when present
    std::optional<double> magnitude;    // hand-drawn lines carry a constant magnitude

    double arc_length() const;
};

struct StreamlineSet {
    std::vector<Polyline> lines;
    StreamlineSource source = StreamlineSource::traced;
};

/// Binary constraint mask M and the known values M * x0.
struct ConstraintMask {
    ScalarGrid mask;     // entries in {0, 1}
    VectorField values;  // zero wherever mask == 0

    int width() const { return mask.width; }
    int height() const { return mask.height; }
    bool known(std::size_t i) const { return mask.values[i] > 0.5; }
    std::size_t known_count() const;
    double density() const;

    static ConstraintMask empty(int width, int height);
    /// Mask every cell and take the values from `field`.
    static ConstraintMask full(const VectorField& field);
};

enum class TraceDirection { forward, backward, both };

struct TraceParams {
    double base_step = 0.5;   // maximum step, cell units (arc length)
    int max_steps = 200;      // per direction
    double min_speed = 1e-3;
    double error_tol = 1e-5;
    TraceDirection direction = TraceDirection::both;

    void validate() const;
};

/// Why a trace stopped (forward leg if direction is both).
enum class TraceStop { domain_exit, max_steps, low_speed, step_underflow };

struct TraceResult {
    std::optional<Polyline> line;  // std::nullopt: rejected (fewer than 4 points)
    TraceStop forward_stop = TraceStop::max_steps;
    TraceStop backward_stop = TraceStop::max_steps;
};

inline constexpr std::size_t kMinStreamlinePoints = 4;

/// Adaptive RK4 (step doubling) along the normalized direction field, so step
/// sizes are arc lengths in cell units. Throws InvalidInput if the seed is
/// outside the domain; a short result is a rejection, not an error.
TraceResult trace(const VectorField& field, Vec2 seed, const TraceParams& params);

std::vector<Vec2> seed_uniform(int width, int height, int n_per_axis);

inline constexpr double kRandomSeedInset = 2.0;

std::vector<Vec2> seed_random(int width, int height, int n, Rng& rng);

/// Trace from every seed and keep the accepted lines.
StreamlineSet trace_all(const VectorField& field, const std::vector<Vec2>& seeds, const TraceParams& params);

inline constexpr double kDefaultMaskRadius = 1.0;
inline constexpr double kDefaultHandDrawnMagnitude = 0.5;

/// A cell is known iff its node lies within `radius` of some polyline segment.
/// Traced sources take values from `field`; hand-drawn sources use the nearest
/// segment's unit tangent times the line magnitude (default 0.5).
ConstraintMask rasterize(const StreamlineSet& lines, const VectorField* field, int width, int height,
                         double radius = kDefaultMaskRadius);

/// Arc-length uniform resampling with floor(L / spacing) + 1 points (at least
/// two). Endpoints are kept; each interior point is the mean position of the
/// input curve over its arc-length window, which averages out jitter shorter
/// than the new spacing.
Polyline resample_polyline(const Polyline& line, double spacing);

/// Per-line problems, reported with the index of the offending line.
std::vector<std::string> validate_polylines(const std::vector<Polyline>& lines, int width, int height);

// Shared JSON record: {"points": [[x,y],...], "magnitude": m, "source": "hand_drawn"|"traced"}
nlohmann::json polyline_to_json(const Polyline& line, StreamlineSource source);
Polyline polyline_from_json(const nlohmann::json& j, StreamlineSource* source = nullptr);

}  // namespace flowforge
