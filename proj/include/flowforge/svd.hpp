#pragma once

#include <optional>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/field.hpp"
#include "flowforge/streamline.hpp"

namespace flowforge {

/// Streamline Vector Diffusion baseline: minimizes
///   E = sum  mu * |grad v|^2 + psi * |v - v0|^2   (times cell area)
/// with psi = psi_scale * mask, by explicit diffusion steps.
struct SvdConfig {
    double mu = 0.2;
    double psi_scale = 10.0;
    std::optional<double> tau;   // default 0.9 * h^2 / (4 mu)
    double tol = 1e-6;
    int max_iter = 20000;
    double psi_falloff_sigma = 0.0;  // > 0 spreads psi (and v0) around the mask with a Gaussian
    bool track_energy = false;       // record E after every iteration

    double time_step(double spacing) const;
    void validate(double spacing) const;
    nlohmann::json to_json() const;
    static SvdConfig from_json(const nlohmann::json& j);
};

struct SvdResult {
    VectorField field;
    int iterations = 0;
    double residual = 0.0;        // max |mu lap v - psi (v - v0)| at the returned field
    bool converged = false;
    std::vector<double> energy;   // only with track_energy; entry k is E after k updates
};

double svd_energy(const VectorField& field, const ConstraintMask& constraint, const SvdConfig& cfg);
double svd_residual(const VectorField& field, const ConstraintMask& constraint, const SvdConfig& cfg);

/// Jacobi-style simultaneous update with mirror (Neumann) ghost cells. The
/// smoothness term is stepped explicitly and the data term implicitly:
///   v' = (v + tau * mu * lap v + tau * psi * v0) / (1 + tau * psi)
/// which shares its fixed point with the fully explicit update and stays
/// stable for any psi under tau <= h^2 / (4 mu). Stops once the explicit
/// update tau * |mu lap v - psi (v - v0)| is below tol everywhere.
SvdResult svd_solve(const ConstraintMask& constraint, const SvdConfig& cfg,
                    const std::optional<VectorField>& init = std::nullopt);

}  // namespace flowforge
