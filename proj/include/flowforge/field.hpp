#pragma once

#include <array>
#include <optional>
#include <span>
#include <vector>

namespace flowforge {

using Vec2 = std::array<double, 2>;

/// Scalar values on a width x height grid, row-major (index = y * width + x).
struct ScalarGrid {
    int width = 0;
    int height = 0;
    std::vector<double> values;

    ScalarGrid() = default;
    ScalarGrid(int w, int h, double fill = 0.0) : width(w), height(h), values(std::size_t(w) * h, fill) {}

    double& at(int x, int y) { return values[std::size_t(y) * width + x]; }
    double at(int x, int y) const { return values[std::size_t(y) * width + x]; }
    std::size_t size() const { return values.size(); }
};

/// A 2D velocity field sampled at the nodes of a regular grid.
///
/// Node (x, y) sits at continuous position (x, y) in cell coordinates, so the
/// domain is [0, width-1] x [0, height-1]. Components are stored as separate
/// planes, row-major.
class VectorField {
public:
    static constexpr int kMinSide = 4;

    VectorField() = default;
    VectorField(int width, int height, double spacing = 1.0);

    int width() const { return width_; }
    int height() const { return height_; }
    double spacing() const { return spacing_; }
    std::size_t cells() const { return u_.size(); }

    std::vector<double>& u() { return u_; }
    std::vector<double>& v() { return v_; }
    const std::vector<double>& u() const { return u_; }
    const std::vector<double>& v() const { return v_; }

    std::size_t index(int x, int y) const { return std::size_t(y) * width_ + x; }
    Vec2 at(int x, int y) const { return {u_[index(x, y)], v_[index(x, y)]}; }
    void set(int x, int y, Vec2 value) {
        u_[index(x, y)] = value[0];
        v_[index(x, y)] = value[1];
    }

    bool same_shape(const VectorField& other) const {
        return width_ == other.width_ && height_ == other.height_;
    }
    bool all_finite() const;
    double max_abs_component() const;

    /// Throws InvalidInput unless the invariants hold (size, finiteness).
    void validate() const;

    friend bool operator==(const VectorField&, const VectorField&) = default;

private:
    int width_ = 0;
    int height_ = 0;
    double spacing_ = 1.0;
    std::vector<double> u_;
    std::vector<double> v_;
};

// Differential operators. Central differences on interior nodes, first-order
// one-sided differences on the boundary rows/columns.
ScalarGrid curl(const VectorField& field);
ScalarGrid divergence(const VectorField& field);

/// Bilinear sample at a continuous position. std::nullopt signals that the
/// position left the domain; streamline tracing treats that as termination.
std::optional<Vec2> sample_bilinear(const VectorField& field, double x, double y);

struct NormalizedDataset {
    std::vector<VectorField> fields;
    double scale = 1.0;
};

/// Divides every component by the global max |component|, so the whole set
/// lands in [-1, 1]. An all-zero set keeps scale 1.
NormalizedDataset normalize_dataset(std::span<const VectorField> fields);
double dataset_scale(std::span<const VectorField> fields);
VectorField scale_field(const VectorField& field, double factor);
VectorField denormalize(const VectorField& field, double scale);

// ---------------------------------------------------------------------------
// Metrics

/// Optional per-cell selection used to restrict a metric to a subset of cells
/// (e.g. only the unknown region). Empty span means "all cells".
using CellSelection = std::span<const unsigned char>;

double mse(const VectorField& ref, const VectorField& pred, CellSelection cells = {});

inline constexpr double kAngularMinMagnitude = 1e-8;

struct AngularError {
    double degrees = 0.0;
    std::size_t valid_cells = 0;
    bool no_valid_cells = false;
};

AngularError angular_error(const VectorField& ref, const VectorField& pred, CellSelection cells = {});

struct PhysicsError {
    double physics = 0.0;
    double curl_err = 0.0;
    double div_err = 0.0;
    bool curl_unnormalized = false;  // reference curl norm vanished
    bool div_unnormalized = false;   // reference divergence norm vanished
};

inline constexpr double kPhysicsDenominatorFloor = 1e-12;

PhysicsError physics_error(const VectorField& ref, const VectorField& pred, CellSelection cells = {});

struct MetricReport {
    double mse = 0.0;
    double angular_deg = 0.0;
    double physics = 0.0;
    double curl_err = 0.0;
    double div_err = 0.0;
    bool angular_degenerate = false;
    bool physics_degenerate = false;
};

MetricReport evaluate_metrics(const VectorField& ref, const VectorField& pred, CellSelection cells = {});

}  // namespace flowforge
