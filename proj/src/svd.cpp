#include "flowforge/svd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "flowforge/errors.hpp"

namespace flowforge {

double SvdConfig::time_step(double spacing) const { return tau.value_or(0.9 * spacing * spacing / (4.0 * mu)); }

void SvdConfig::validate(double spacing) const {
    if (!(mu > 0.0)) throw InvalidInput("svd mu must be > 0");
    if (!(psi_scale >= 0.0)) throw InvalidInput("svd psi_scale must be >= 0");
    if (!(tol > 0.0)) throw InvalidInput("svd tol must be > 0");
    if (max_iter < 1) throw InvalidInput("svd max_iter must be >= 1");
    if (psi_falloff_sigma < 0.0) throw InvalidInput("svd psi_falloff_sigma must be >= 0");
    const double t = time_step(spacing);
    if (!(t > 0.0) || t > spacing * spacing / (4.0 * mu)) {
        throw InvalidInput("svd tau violates the explicit stability bound tau <= h^2 / (4 mu)");
    }
}

nlohmann::json SvdConfig::to_json() const {
    nlohmann::json j{{"mu", mu},
                     {"psi_scale", psi_scale},
                     {"tol", tol},
                     {"max_iter", max_iter},
                     {"psi_falloff_sigma", psi_falloff_sigma}};
    j["tau"] = tau ? nlohmann::json(*tau) : nlohmann::json(nullptr);
    return j;
}

SvdConfig SvdConfig::from_json(const nlohmann::json& j) {
    SvdConfig c;
    c.mu = j.value("mu", c.mu);
    c.psi_scale = j.value("psi_scale", c.psi_scale);
    c.tol = j.value("tol", c.tol);
    c.max_iter = j.value("max_iter", c.max_iter);
    c.psi_falloff_sigma = j.value("psi_falloff_sigma", c.psi_falloff_sigma);
    if (j.contains("tau") && !j["tau"].is_null()) c.tau = j["tau"].get<double>();
    return c;
}

namespace {

// Data weight and target per cell. With falloff, cells outside the mask take
// the value of their nearest mask cell and a Gaussian-attenuated weight.
struct DataTerm {
    std::vector<double> psi;
    std::vector<double> u0;
    std::vector<double> v0;
};

DataTerm build_data_term(const ConstraintMask& c, const SvdConfig& cfg) {
    const std::size_t n = c.mask.values.size();
    DataTerm d{std::vector<double>(n, 0.0), c.values.u(), c.values.v()};
    for (std::size_t i = 0; i < n; ++i) d.psi[i] = c.known(i) ? cfg.psi_scale : 0.0;
    if (cfg.psi_falloff_sigma <= 0.0) return d;

    const int w = c.width(), h = c.height();
    std::vector<std::size_t> known;
    for (std::size_t i = 0; i < n; ++i) {
        if (c.known(i)) known.push_back(i);
    }
    if (known.empty()) return d;
    const double two_s2 = 2.0 * cfg.psi_falloff_sigma * cfg.psi_falloff_sigma;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            if (c.known(i)) continue;
            double best = std::numeric_limits<double>::infinity();
            std::size_t arg = known.front();
            for (std::size_t k : known) {
                const double dx = double(int(k % w) - x), dy = double(int(k / w) - y);
                const double d2 = dx * dx + dy * dy;
                if (d2 < best) {
                    best = d2;
                    arg = k;
                }
            }
            d.psi[i] = cfg.psi_scale * std::exp(-best * c.values.spacing() * c.values.spacing() / two_s2);
            d.u0[i] = c.values.u()[arg];
            d.v0[i] = c.values.v()[arg];
        }
    }
    return d;
}

// 5-point Laplacian with mirror ghost cells (ghost equals the boundary value).
double laplacian(const std::vector<double>& p, int w, int h, int x, int y, double inv_h2) {
    const std::size_t i = std::size_t(y) * w + x;
    const double c = p[i];
    const double l = x > 0 ? p[i - 1] : c;
    const double r = x < w - 1 ? p[i + 1] : c;
    const double d = y > 0 ? p[i - w] : c;
    const double u = y < h - 1 ? p[i + w] : c;
    return (l + r + d + u - 4.0 * c) * inv_h2;
}

void require_match(const VectorField& f, const ConstraintMask& c) {
    if (f.width() != c.width() || f.height() != c.height()) throw DimensionMismatch("svd field/mask size mismatch");
}

double energy_with(const VectorField& f, const DataTerm& d, const SvdConfig& cfg) {
    const int w = f.width(), h = f.height();
    const double hs = f.spacing();
    double smooth = 0.0, data = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            for (const auto* p : {&f.u(), &f.v()}) {
                if (x + 1 < w) {
                    const double g = ((*p)[i + 1] - (*p)[i]) / hs;
                    smooth += g * g;
                }
                if (y + 1 < h) {
                    const double g = ((*p)[i + w] - (*p)[i]) / hs;
                    smooth += g * g;
                }
            }
            const double du = f.u()[i] - d.u0[i], dv = f.v()[i] - d.v0[i];
            data += d.psi[i] * (du * du + dv * dv);
        }
    }
    return (cfg.mu * smooth + data) * hs * hs;
}

double residual_with(const VectorField& f, const DataTerm& d, const SvdConfig& cfg) {
    const int w = f.width(), h = f.height();
    const double inv_h2 = 1.0 / (f.spacing() * f.spacing());
    double r = 0.0;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const std::size_t i = std::size_t(y) * w + x;
            const double ru = cfg.mu * laplacian(f.u(), w, h, x, y, inv_h2) - d.psi[i] * (f.u()[i] - d.u0[i]);
            const double rv = cfg.mu * laplacian(f.v(), w, h, x, y, inv_h2) - d.psi[i] * (f.v()[i] - d.v0[i]);
            r = std::max({r, std::abs(ru), std::abs(rv)});
        }
    }
    return r;
}

}  // namespace

double svd_energy(const VectorField& field, const ConstraintMask& constraint, const SvdConfig& cfg) {
    require_match(field, constraint);
    return energy_with(field, build_data_term(constraint, cfg), cfg);
}

double svd_residual(const VectorField& field, const ConstraintMask& constraint, const SvdConfig& cfg) {
    require_match(field, constraint);
    return residual_with(field, build_data_term(constraint, cfg), cfg);
}

SvdResult svd_solve(const ConstraintMask& constraint, const SvdConfig& cfg, const std::optional<VectorField>& init) {
    const double hs = constraint.values.spacing();
    cfg.validate(hs);
    const int w = constraint.width(), h = constraint.height();
    const DataTerm d = build_data_term(constraint, cfg);
    const double tau = cfg.time_step(hs);
    const double inv_h2 = 1.0 / (hs * hs);

    SvdResult res;
    res.field = init ? *init : constraint.values;
    require_match(res.field, constraint);
    VectorField next = res.field;
    if (cfg.track_energy) res.energy.push_back(energy_with(res.field, d, cfg));

    for (int it = 0; it < cfg.max_iter; ++it) {
        double max_update = 0.0;
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const std::size_t i = std::size_t(y) * w + x;
                const double tp = tau * d.psi[i];
                const double u = res.field.u()[i], v = res.field.v()[i];
                const double lu = cfg.mu * laplacian(res.field.u(), w, h, x, y, inv_h2);
                const double lv = cfg.mu * laplacian(res.field.v(), w, h, x, y, inv_h2);
                max_update = std::max({max_update, tau * std::abs(lu - d.psi[i] * (u - d.u0[i])),
                                       tau * std::abs(lv - d.psi[i] * (v - d.v0[i]))});
                next.u()[i] = (u + tau * lu + tp * d.u0[i]) / (1.0 + tp);
                next.v()[i] = (v + tau * lv + tp * d.v0[i]) / (1.0 + tp);
            }
        }
        if (!std::isfinite(max_update)) {
            throw DivergenceError("svd-solve", it, "svd solver produced non-finite values at iteration " +
                                                       std::to_string(it));
        }
        if (max_update < cfg.tol) {
            res.converged = true;
            break;
        }
        std::swap(res.field, next);
        res.iterations = it + 1;
        if (cfg.track_energy) res.energy.push_back(energy_with(res.field, d, cfg));
    }
    res.residual = residual_with(res.field, d, cfg);
    return res;
}

}  // namespace flowforge
