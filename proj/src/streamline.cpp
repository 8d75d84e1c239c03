#include "flowforge/streamline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "flowforge/errors.hpp"

namespace flowforge {

double Polyline::arc_length() const {
    double len = 0.0;
    for (std::size_t i = 1; i < points.size(); ++i) {
        len += std::hypot(points[i][0] - points[i - 1][0], points[i][1] - points[i - 1][1]);
    }
    return len;
}

std::size_t ConstraintMask::known_count() const {
    return std::size_t(std::count_if(mask.values.begin(), mask.values.end(), [](double m) { return m > 0.5; }));
}

double ConstraintMask::density() const {
    return mask.values.empty() ? 0.0 : double(known_count()) / double(mask.values.size());
}

ConstraintMask ConstraintMask::empty(int width, int height) {
    return ConstraintMask{ScalarGrid(width, height), VectorField(width, height)};
}

ConstraintMask ConstraintMask::full(const VectorField& field) {
    return ConstraintMask{ScalarGrid(field.width(), field.height(), 1.0), field};
}

void TraceParams::validate() const {
    if (!(base_step > 0.0)) throw InvalidInput("trace base_step must be > 0");
    if (max_steps < 1) throw InvalidInput("trace max_steps must be >= 1");
    if (!(error_tol > 0.0)) throw InvalidInput("trace error_tol must be > 0");
    if (!(min_speed >= 0.0)) throw InvalidInput("trace min_speed must be >= 0");
}

namespace {

enum class Probe { ok, outside, slow };

struct Direction {
    Probe status;
    Vec2 dir;
};

Direction direction_at(const VectorField& field, Vec2 p, double min_speed, double sign) {
    const auto v = sample_bilinear(field, p[0], p[1]);
    if (!v) return {Probe::outside, {}};
    const double speed = std::hypot((*v)[0], (*v)[1]);
    if (speed < min_speed || speed == 0.0) return {Probe::slow, {}};
    return {Probe::ok, {sign * (*v)[0] / speed, sign * (*v)[1] / speed}};
}

struct Rk4 {
    Probe status;
    Vec2 p;
};

Rk4 rk4_step(const VectorField& field, Vec2 p, double h, double min_speed, double sign) {
    auto at = [&](Vec2 q) { return direction_at(field, q, min_speed, sign); };
    const Direction k1 = at(p);
    if (k1.status != Probe::ok) return {k1.status, p};
    const Direction k2 = at({p[0] + 0.5 * h * k1.dir[0], p[1] + 0.5 * h * k1.dir[1]});
    if (k2.status != Probe::ok) return {k2.status, p};
    const Direction k3 = at({p[0] + 0.5 * h * k2.dir[0], p[1] + 0.5 * h * k2.dir[1]});
    if (k3.status != Probe::ok) return {k3.status, p};
    const Direction k4 = at({p[0] + h * k3.dir[0], p[1] + h * k3.dir[1]});
    if (k4.status != Probe::ok) return {k4.status, p};
    return {Probe::ok,
            {p[0] + h / 6.0 * (k1.dir[0] + 2.0 * k2.dir[0] + 2.0 * k3.dir[0] + k4.dir[0]),
             p[1] + h / 6.0 * (k1.dir[1] + 2.0 * k2.dir[1] + 2.0 * k3.dir[1] + k4.dir[1])}};
}

bool strictly_inside(const VectorField& f, Vec2 p) {
    return p[0] > 0.0 && p[1] > 0.0 && p[0] < f.width() - 1 && p[1] < f.height() - 1;
}

TraceStop stop_for(Probe p) { return p == Probe::outside ? TraceStop::domain_exit : TraceStop::low_speed; }

// Points after the seed along one direction.
TraceStop trace_leg(const VectorField& field, Vec2 seed, const TraceParams& prm, double sign,
                    std::vector<Vec2>& out) {
    if (direction_at(field, seed, prm.min_speed, sign).status == Probe::slow) return TraceStop::low_speed;
    const double min_step = prm.base_step * 1e-6;
    double h = prm.base_step;
    int accepts = 0;
    Vec2 p = seed;
    for (int step = 0; step < prm.max_steps; ++step) {
        Vec2 next{};
        for (;;) {
            const Rk4 full = rk4_step(field, p, h, prm.min_speed, sign);
            if (full.status != Probe::ok) return stop_for(full.status);
            const Rk4 half = rk4_step(field, p, 0.5 * h, prm.min_speed, sign);
            if (half.status != Probe::ok) return stop_for(half.status);
            const Rk4 two = rk4_step(field, half.p, 0.5 * h, prm.min_speed, sign);
            if (two.status != Probe::ok) return stop_for(two.status);
            const double err = std::max(std::abs(two.p[0] - full.p[0]), std::abs(two.p[1] - full.p[1]));
            if (err < prm.error_tol) {
                next = two.p;
                break;
            }
            h *= 0.5;
            accepts = 0;
            if (h < min_step) return TraceStop::step_underflow;
        }
        if (!strictly_inside(field, next)) return TraceStop::domain_exit;
        out.push_back(next);
        p = next;
        if (++accepts >= 2) {
            h = std::min(1.5 * h, prm.base_step);
            accepts = 0;
        }
    }
    return TraceStop::max_steps;
}

}  // namespace

TraceResult trace(const VectorField& field, Vec2 seed, const TraceParams& params) {
    params.validate();
    if (!(seed[0] >= 0.0 && seed[1] >= 0.0 && seed[0] <= field.width() - 1 && seed[1] <= field.height() - 1)) {
        throw InvalidInput("trace seed outside the domain");
    }
    TraceResult result;
    std::vector<Vec2> fwd, bwd;
    if (params.direction != TraceDirection::backward) {
        result.forward_stop = trace_leg(field, seed, params, 1.0, fwd);
    }
    if (params.direction != TraceDirection::forward) {
        result.backward_stop = trace_leg(field, seed, params, -1.0, bwd);
    }
    Polyline line;
    line.points.reserve(fwd.size() + bwd.size() + 1);
    if (params.direction == TraceDirection::backward) {
        line.points.push_back(seed);
        line.points.insert(line.points.end(), bwd.begin(), bwd.end());
    } else {
        line.points.assign(bwd.rbegin(), bwd.rend());
        line.points.push_back(seed);
        line.points.insert(line.points.end(), fwd.begin(), fwd.end());
    }
    if (line.points.size() >= kMinStreamlinePoints) result.line = std::move(line);
    return result;
}

std::vector<Vec2> seed_uniform(int width, int height, int n_per_axis) {
    if (n_per_axis < 1) throw InvalidInput("seed_uniform needs n_per_axis >= 1");
    const double sx = double(width - 1) / n_per_axis;
    const double sy = double(height - 1) / n_per_axis;
    std::vector<Vec2> seeds;
    seeds.reserve(std::size_t(n_per_axis) * n_per_axis);
    for (int j = 0; j < n_per_axis; ++j) {
        for (int i = 0; i < n_per_axis; ++i) seeds.push_back({sx * (i + 0.5), sy * (j + 0.5)});
    }
    return seeds;
}

std::vector<Vec2> seed_random(int width, int height, int n, Rng& rng) {
    if (n < 1) throw InvalidInput("seed_random needs n >= 1");
    std::vector<Vec2> seeds;
    seeds.reserve(std::size_t(n));
    for (int k = 0; k < n; ++k) {
        const double x = uniform(rng, kRandomSeedInset, width - 1 - kRandomSeedInset);
        const double y = uniform(rng, kRandomSeedInset, height - 1 - kRandomSeedInset);
        seeds.push_back({x, y});
    }
    return seeds;
}

StreamlineSet trace_all(const VectorField& field, const std::vector<Vec2>& seeds, const TraceParams& params) {
    StreamlineSet set;
    set.source = StreamlineSource::traced;
    for (const Vec2& s : seeds) {
        TraceResult r = trace(field, s, params);
        if (r.line) set.lines.push_back(std::move(*r.line));
    }
    return set;
}

namespace {

double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
    const double dx = b[0] - a[0], dy = b[1] - a[1];
    const double len2 = dx * dx + dy * dy;
    double t = 0.0;
    if (len2 > 0.0) t = std::clamp(((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2, 0.0, 1.0);
    return std::hypot(p[0] - (a[0] + t * dx), p[1] - (a[1] + t * dy));
}

}  // namespace

ConstraintMask rasterize(const StreamlineSet& lines, const VectorField* field, int width, int height,
                         double radius) {
    if (!(radius >= 0.0)) throw InvalidInput("rasterize radius must be >= 0");
    if (lines.source == StreamlineSource::traced && !lines.lines.empty()) {
        if (!field) throw InvalidInput("rasterizing traced streamlines needs the source field");
        if (field->width() != width || field->height() != height) {
            throw DimensionMismatch("rasterize field does not match the requested grid");
        }
    }
    ConstraintMask out = ConstraintMask::empty(width, height);
    const std::size_t n = std::size_t(width) * height;
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    std::vector<Vec2> tangent(n, Vec2{0.0, 0.0});
    std::vector<double> magnitude(n, 0.0);

    for (const Polyline& line : lines.lines) {
        const double mag = line.magnitude.value_or(kDefaultHandDrawnMagnitude);
        const std::size_t segs = line.points.size() > 1 ? line.points.size() - 1 : line.points.size();
        for (std::size_t s = 0; s < segs; ++s) {
            const Vec2 a = line.points[s];
            const Vec2 b = line.points.size() > 1 ? line.points[s + 1] : a;
            const int x0 = std::max(0, int(std::floor(std::min(a[0], b[0]) - radius)));
            const int x1 = std::min(width - 1, int(std::ceil(std::max(a[0], b[0]) + radius)));
            const int y0 = std::max(0, int(std::floor(std::min(a[1], b[1]) - radius)));
            const int y1 = std::min(height - 1, int(std::ceil(std::max(a[1], b[1]) + radius)));
            const double len = std::hypot(b[0] - a[0], b[1] - a[1]);
            const Vec2 dir = len > 0.0 ? Vec2{(b[0] - a[0]) / len, (b[1] - a[1]) / len} : Vec2{0.0, 0.0};
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    const double d = point_segment_distance({double(x), double(y)}, a, b);
                    const std::size_t i = std::size_t(y) * width + x;
                    if (d <= radius && d < best[i]) {
                        best[i] = d;
                        tangent[i] = dir;
                        magnitude[i] = mag;
                    }
                }
            }
        }
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(best[i])) continue;
        out.mask.values[i] = 1.0;
        if (lines.source == StreamlineSource::traced) {
            out.values.u()[i] = field->u()[i];
            out.values.v()[i] = field->v()[i];
        } else {
            out.values.u()[i] = tangent[i][0] * magnitude[i];
            out.values.v()[i] = tangent[i][1] * magnitude[i];
        }
    }
    return out;
}

namespace {

// Piecewise-linear curve parametrized by arc length.
class ArcCurve {
public:
    explicit ArcCurve(const std::vector<Vec2>& pts) : pts_(pts), cum_(pts.size(), 0.0) {
        for (std::size_t i = 1; i < pts.size(); ++i) {
            cum_[i] = cum_[i - 1] + std::hypot(pts[i][0] - pts[i - 1][0], pts[i][1] - pts[i - 1][1]);
        }
    }

    double length() const { return cum_.back(); }

    // Integral of the position over s in [a, b].
    Vec2 integral(double a, double b) const {
        Vec2 acc{0.0, 0.0};
        for (std::size_t i = 1; i < pts_.size(); ++i) {
            const double lo = std::max(a, cum_[i - 1]);
            const double hi = std::min(b, cum_[i]);
            if (hi <= lo) continue;
            const Vec2 mid = at_segment(i, 0.5 * (lo + hi));
            acc[0] += (hi - lo) * mid[0];
            acc[1] += (hi - lo) * mid[1];
        }
        return acc;
    }

private:
    Vec2 at_segment(std::size_t i, double s) const {
        const double seg = cum_[i] - cum_[i - 1];
        const double t = seg > 0.0 ? (s - cum_[i - 1]) / seg : 0.0;
        return {pts_[i - 1][0] + t * (pts_[i][0] - pts_[i - 1][0]), pts_[i - 1][1] + t * (pts_[i][1] - pts_[i - 1][1])};
    }

    const std::vector<Vec2>& pts_;
    std::vector<double> cum_;
};

}  // namespace

Polyline resample_polyline(const Polyline& line, double spacing) {
    if (!(spacing > 0.0)) throw InvalidInput("resample spacing must be > 0");
    if (line.points.empty()) throw InvalidInput("cannot resample an empty polyline");
    Polyline out;
    out.magnitude = line.magnitude;
    const ArcCurve curve(line.points);
    const double len = curve.length();
    if (len <= 0.0) {
        out.points = {line.points.front(), line.points.back()};
        return out;
    }
    const std::size_t count = std::max<std::size_t>(2, std::size_t(std::floor(len / spacing)) + 1);
    const double step = len / double(count - 1);
    out.points.reserve(count);
    out.points.push_back(line.points.front());
    for (std::size_t k = 1; k + 1 < count; ++k) {
        const double s = step * double(k);
        const Vec2 sum = curve.integral(s - 0.5 * step, s + 0.5 * step);
        out.points.push_back({sum[0] / step, sum[1] / step});
    }
    out.points.push_back(line.points.back());
    return out;
}

std::vector<std::string> validate_polylines(const std::vector<Polyline>& lines, int width, int height) {
    std::vector<std::string> errors;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        const Polyline& l = lines[i];
        const std::string tag = "line " + std::to_string(i) + ": ";
        if (l.points.size() < 2) {
            errors.push_back(tag + "needs at least 2 points, got " + std::to_string(l.points.size()));
            continue;
        }
        for (std::size_t k = 0; k < l.points.size(); ++k) {
            const Vec2 p = l.points[k];
            if (!std::isfinite(p[0]) || !std::isfinite(p[1]) || p[0] < 0.0 || p[1] < 0.0 || p[0] > width - 1 ||
                p[1] > height - 1) {
                errors.push_back(tag + "point " + std::to_string(k) + " out of bounds");
                break;
            }
        }
        if (l.arc_length() <= 0.0) errors.push_back(tag + "has zero length");
        if (l.magnitude && !(std::isfinite(*l.magnitude) && *l.magnitude >= 0.0)) {
            errors.push_back(tag + "magnitude must be finite and non-negative");
        }
    }
    return errors;
}

nlohmann::json polyline_to_json(const Polyline& line, StreamlineSource source) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Vec2& p : line.points) pts.push_back({p[0], p[1]});
    nlohmann::json j;
    j["points"] = std::move(pts);
    if (line.magnitude) j["magnitude"] = *line.magnitude;
    j["source"] = source == StreamlineSource::hand_drawn ? "hand_drawn" : "traced";
    return j;
}

Polyline polyline_from_json(const nlohmann::json& j, StreamlineSource* source) {
    if (!j.is_object() || !j.contains("points") || !j["points"].is_array()) {
        throw InvalidInput("polyline record needs a \"points\" array");
    }
    Polyline line;
    for (const auto& p : j["points"]) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
            throw InvalidInput("polyline points must be [x, y] number pairs");
        }
        line.points.push_back({p[0].get<double>(), p[1].get<double>()});
    }
    if (j.contains("magnitude") && !j["magnitude"].is_null()) {
        if (!j["magnitude"].is_number()) throw InvalidInput("polyline magnitude must be a number");
        line.magnitude = j["magnitude"].get<double>();
    }
    StreamlineSource src = StreamlineSource::hand_drawn;
    if (j.contains("source")) {
        const std::string s = j["source"].get<std::string>();
        if (s == "traced") src = StreamlineSource::traced;
        else if (s != "hand_drawn") throw InvalidInput("polyline source must be hand_drawn or traced");
    }
    if (source) *source = src;
    return line;
}

}  // namespace flowforge
