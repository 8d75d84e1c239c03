#include "flowforge/field.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "flowforge/errors.hpp"

namespace flowforge {

VectorField::VectorField(int width, int height, double spacing)
    : width_(width), height_(height), spacing_(spacing) {
    if (width < kMinSide || height < kMinSide) {
        throw InvalidInput("vector field must be at least " + std::to_string(kMinSide) + "x" +
                           std::to_string(kMinSide) + ", got " + std::to_string(width) + "x" +
                           std::to_string(height));
    }
    if (!(spacing > 0.0) || !std::isfinite(spacing)) throw InvalidInput("grid spacing must be positive");
    u_.assign(std::size_t(width) * height, 0.0);
    v_.assign(std::size_t(width) * height, 0.0);
}

bool VectorField::all_finite() const {
    auto finite = [](double x) { return std::isfinite(x); };
    return std::all_of(u_.begin(), u_.end(), finite) && std::all_of(v_.begin(), v_.end(), finite);
}

double VectorField::max_abs_component() const {
    double m = 0.0;
    for (double x : u_) m = std::max(m, std::abs(x));
    for (double x : v_) m = std::max(m, std::abs(x));
    return m;
}

void VectorField::validate() const {
    if (width_ < kMinSide || height_ < kMinSide) throw InvalidInput("vector field below minimum size");
    const std::size_t n = std::size_t(width_) * height_;
    if (u_.size() != n || v_.size() != n) throw InvalidInput("vector field component size mismatch");
    if (!all_finite()) throw InvalidInput("vector field holds non-finite values");
}

namespace {

void require_operable(const VectorField& f) {
    if (f.width() < VectorField::kMinSide || f.height() < VectorField::kMinSide) {
        throw InvalidInput("field too small for finite differences");
    }
}

void require_same_shape(const VectorField& a, const VectorField& b) {
    if (!a.same_shape(b)) {
        throw DimensionMismatch("field shapes differ: " + std::to_string(a.width()) + "x" +
                                std::to_string(a.height()) + " vs " + std::to_string(b.width()) + "x" +
                                std::to_string(b.height()));
    }
}

void require_selection(const VectorField& f, CellSelection cells) {
    if (!cells.empty() && cells.size() != f.cells()) throw DimensionMismatch("cell selection size mismatch");
}

bool selected(CellSelection cells, std::size_t i) { return cells.empty() || cells[i] != 0; }

// d/dx of a plane at node (x, y).
double ddx(const std::vector<double>& p, int w, int x, int y, double h) {
    const std::size_t row = std::size_t(y) * w;
    if (x == 0) return (p[row + 1] - p[row]) / h;
    if (x == w - 1) return (p[row + x] - p[row + x - 1]) / h;
    return (p[row + x + 1] - p[row + x - 1]) / (2.0 * h);
}

double ddy(const std::vector<double>& p, int w, int hgt, int x, int y, double h) {
    auto at = [&](int yy) { return p[std::size_t(yy) * w + x]; };
    if (y == 0) return (at(1) - at(0)) / h;
    if (y == hgt - 1) return (at(y) - at(y - 1)) / h;
    return (at(y + 1) - at(y - 1)) / (2.0 * h);
}

}  // namespace

ScalarGrid curl(const VectorField& field) {
    require_operable(field);
    const int w = field.width(), h = field.height();
    const double dx = field.spacing();
    ScalarGrid out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            out.at(x, y) = ddx(field.v(), w, x, y, dx) - ddy(field.u(), w, h, x, y, dx);
        }
    }
    return out;
}

ScalarGrid divergence(const VectorField& field) {
    require_operable(field);
    const int w = field.width(), h = field.height();
    const double dx = field.spacing();
    ScalarGrid out(w, h);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            out.at(x, y) = ddx(field.u(), w, x, y, dx) + ddy(field.v(), w, h, x, y, dx);
        }
    }
    return out;
}

std::optional<Vec2> sample_bilinear(const VectorField& field, double x, double y) {
    const int w = field.width(), h = field.height();
    if (!(x >= 0.0 && y >= 0.0 && x <= w - 1 && y <= h - 1)) return std::nullopt;
    const int x0 = std::min(int(std::floor(x)), w - 2);
    const int y0 = std::min(int(std::floor(y)), h - 2);
    const double fx = x - x0, fy = y - y0;
    auto lerp2 = [&](const std::vector<double>& p) {
        const std::size_t i00 = field.index(x0, y0);
        const std::size_t i01 = i00 + w;
        const double top = p[i00] * (1.0 - fx) + p[i00 + 1] * fx;
        const double bottom = p[i01] * (1.0 - fx) + p[i01 + 1] * fx;
        return top * (1.0 - fy) + bottom * fy;
    };
    return Vec2{lerp2(field.u()), lerp2(field.v())};
}

double dataset_scale(std::span<const VectorField> fields) {
    double scale = 0.0;
    for (const auto& f : fields) scale = std::max(scale, f.max_abs_component());
    return scale > 0.0 ? scale : 1.0;
}

VectorField scale_field(const VectorField& field, double factor) {
    VectorField out = field;
    for (double& x : out.u()) x *= factor;
    for (double& x : out.v()) x *= factor;
    return out;
}

NormalizedDataset normalize_dataset(std::span<const VectorField> fields) {
    if (fields.empty()) throw InvalidInput("normalize_dataset needs at least one field");
    NormalizedDataset out;
    out.scale = dataset_scale(fields);
    out.fields.reserve(fields.size());
    for (const auto& f : fields) {
        VectorField g = f;
        for (double& x : g.u()) x /= out.scale;
        for (double& x : g.v()) x /= out.scale;
        out.fields.push_back(std::move(g));
    }
    return out;
}

VectorField denormalize(const VectorField& field, double scale) { return scale_field(field, scale); }

double mse(const VectorField& ref, const VectorField& pred, CellSelection cells) {
    require_same_shape(ref, pred);
    require_selection(ref, cells);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < ref.cells(); ++i) {
        if (!selected(cells, i)) continue;
        const double du = ref.u()[i] - pred.u()[i];
        const double dv = ref.v()[i] - pred.v()[i];
        sum += du * du + dv * dv;
        n += 2;
    }
    return n ? sum / double(n) : 0.0;
}

AngularError angular_error(const VectorField& ref, const VectorField& pred, CellSelection cells) {
    require_same_shape(ref, pred);
    require_selection(ref, cells);
    AngularError out;
    double sum = 0.0;
    for (std::size_t i = 0; i < ref.cells(); ++i) {
        if (!selected(cells, i)) continue;
        const double au = ref.u()[i], av = ref.v()[i];
        const double bu = pred.u()[i], bv = pred.v()[i];
        const double na = std::hypot(au, av), nb = std::hypot(bu, bv);
        if (na < kAngularMinMagnitude || nb < kAngularMinMagnitude) continue;
        // atan2 form of acos(dot / (|a| |b|)), well conditioned near 0 and pi
        sum += std::atan2(std::abs(au * bv - av * bu), au * bu + av * bv);
        ++out.valid_cells;
    }
    if (out.valid_cells == 0) {
        out.no_valid_cells = true;
        return out;
    }
    out.degrees = sum / double(out.valid_cells) * 180.0 / std::numbers::pi;
    return out;
}

namespace {

struct NormPair {
    double diff = 0.0;
    double ref = 0.0;
};

NormPair grid_norms(const ScalarGrid& ref, const ScalarGrid& pred, CellSelection cells) {
    double d2 = 0.0, r2 = 0.0;
    for (std::size_t i = 0; i < ref.size(); ++i) {
        if (!selected(cells, i)) continue;
        const double d = ref.values[i] - pred.values[i];
        d2 += d * d;
        r2 += ref.values[i] * ref.values[i];
    }
    return {std::sqrt(d2), std::sqrt(r2)};
}

}  // namespace

PhysicsError physics_error(const VectorField& ref, const VectorField& pred, CellSelection cells) {
    require_same_shape(ref, pred);
    require_selection(ref, cells);
    PhysicsError out;
    const NormPair c = grid_norms(curl(ref), curl(pred), cells);
    const NormPair d = grid_norms(divergence(ref), divergence(pred), cells);
    if (c.ref < kPhysicsDenominatorFloor) {
        out.curl_err = c.diff;
        out.curl_unnormalized = true;
    } else {
        out.curl_err = c.diff / c.ref;
    }
    if (d.ref < kPhysicsDenominatorFloor) {
        out.div_err = d.diff;
        out.div_unnormalized = true;
    } else {
        out.div_err = d.diff / d.ref;
    }
    out.physics = 0.5 * (out.curl_err + out.div_err);
    return out;
}

MetricReport evaluate_metrics(const VectorField& ref, const VectorField& pred, CellSelection cells) {
    MetricReport r;
    r.mse = mse(ref, pred, cells);
    const AngularError a = angular_error(ref, pred, cells);
    r.angular_deg = a.degrees;
    r.angular_degenerate = a.no_valid_cells;
    const PhysicsError p = physics_error(ref, pred, cells);
    r.physics = p.physics;
    r.curl_err = p.curl_err;
    r.div_err = p.div_err;
    r.physics_degenerate = p.curl_unnormalized || p.div_unnormalized;
    return r;
}

}  // namespace flowforge
