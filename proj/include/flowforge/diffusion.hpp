#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/dataset_io.hpp"
#include "flowforge/denoiser.hpp"
#include "flowforge/field.hpp"
#include "flowforge/rng.hpp"
#include "flowforge/streamline.hpp"

namespace flowforge {

enum class ScheduleKind { linear };

struct ScheduleConfig {
    int steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    ScheduleKind kind = ScheduleKind::linear;
    // Diffusion runs on data_scale * x; sample() returns data units.
    double data_scale = 1.0;

    void validate() const;
    nlohmann::json to_json() const;
    static ScheduleConfig from_json(const nlohmann::json& j);
    friend bool operator==(const ScheduleConfig&, const ScheduleConfig&) = default;
};

/// Arrays are indexed by t = 0..T; index 0 holds the convention
/// beta = 0, alpha = 1, alpha_bar = 1.
struct DiffusionSchedule {
    ScheduleConfig config;
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> sqrt_alpha_bar;
    std::vector<double> sqrt_one_minus_alpha_bar;
    std::vector<double> posterior_variance;  // beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)
};

DiffusionSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind = ScheduleKind::linear);
DiffusionSchedule make_schedule(const ScheduleConfig& cfg);

/// Noisy where the mask is off, clean where it is on. t = 0 returns x0.
VectorField forward_noise(const VectorField& x0, const ConstraintMask& constraint, int t, const VectorField& eps,
                          const DiffusionSchedule& schedule);

/// Standard normal noise for every component.
VectorField gaussian_field(int width, int height, Rng& rng);

/// eps_uncond + w (eps_cond - eps_uncond). w = 1 and w = 0 return the
/// respective input unchanged.
VectorField cfg_combine(const VectorField& eps_cond, const VectorField& eps_uncond, double w);

/// What the two conditioning channels carry.
enum class Conditioning {
    mask_mask,   // (M, M)
    mask_speed,  // (M, M * |known value|)
};

/// Network input (noisy u, noisy v, c2, c3). `conditional = false` zeroes the
/// conditioning channels, which is how the unconditional path is realized.
Tensor3<float> build_input(const VectorField& x, const ConstraintMask& constraint, bool conditional,
                           Conditioning conditioning);

enum class LrSchedule {
    constant,
    cosine,  // half cosine from learning_rate down to 0 over the run
};

struct TrainConfig {
    double p_drop = 0.1;
    int batch_size = 16;
    double learning_rate = 2e-4;
    int epochs = 30;
    std::uint64_t seed = 1;
    int threads = 1;
    Conditioning conditioning = Conditioning::mask_mask;
    LrSchedule lr_schedule = LrSchedule::constant;

    void validate() const;
    AdamConfig adam() const;
    /// Learning rate for optimizer step `step` (0-based) of a run with `total_steps` steps.
    double learning_rate_at(std::int64_t step, std::int64_t total_steps) const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainingStepResult {
    double loss = 0.0;
    std::vector<float> grads;               // summed over the batch, layout of params.values
    std::size_t conditional_samples = 0;    // mask channels kept
    std::size_t unconditional_samples = 0;  // mask channels dropped
    std::vector<int> timesteps;
    std::vector<VectorField> loss_grad;     // d loss / d eps_hat per sample
};

/// One forward/backward pass over a batch. Per sample: t ~ U{1..T}, eps ~ N(0, I),
/// selective noising, conditioning dropout with probability p_drop, loss
///   L_i = sum over unknown cells and both components of (eps_hat - eps)^2 / (2 n_unknown)
/// and the batch loss is the mean of L_i. All random draws happen up front in
/// sample order, so the result does not depend on cfg.threads.
TrainingStepResult training_step(std::span<const DatasetRecord> batch, const DenoiserParams<float>& params,
                                 const TrainConfig& cfg, const DiffusionSchedule& schedule, Rng& rng,
                                 std::int64_t step_index = 0);

enum class SampleMode { cfg, conditional_only };

struct SampleConfig {
    int steps = 1000;  // strided subset of the training steps when < T
    double w = 3.0;
    std::uint64_t seed = 0;
    SampleMode mode = SampleMode::cfg;
    Conditioning conditioning = Conditioning::mask_mask;

    void validate(const DiffusionSchedule& schedule) const;
    nlohmann::json to_json() const;
    static SampleConfig from_json(const nlohmann::json& j);
};

/// Timesteps visited by the sampler, descending, ending at 0:
/// tau_k = floor(k T / S) for k = S..0.
std::vector<int> sampling_timesteps(int T, int steps);

/// Ancestral DDPM mean for the step t -> t_prev (t_prev defaults to t - 1;
/// strided steps use the effective beta 1 - alpha_bar_t / alpha_bar_prev).
VectorField scheduler_mean(const VectorField& x_t, int t, const VectorField& eps_hat, const DiffusionSchedule& schedule,
                           std::optional<int> t_prev = std::nullopt);

/// scheduler_mean plus sigma z; no noise is drawn when t_prev is 0.
VectorField scheduler_step(const VectorField& x_t, int t, const VectorField& eps_hat, const DiffusionSchedule& schedule,
                           Rng& rng, std::optional<int> t_prev = std::nullopt);

/// Called after every clamped step with the timestep just reached.
using SampleObserver = std::function<void(int t, const VectorField& x)>;

/// Mask-clamped ancestral sampling. Known cells of the result are bitwise
/// equal to constraint.values.
VectorField sample(const DenoiserParams<float>& params, const ConstraintMask& constraint, const SampleConfig& cfg,
                   const DiffusionSchedule& schedule, Rng& rng, const SampleObserver& observer = {});

nlohmann::json conditioning_to_json(Conditioning c);
Conditioning conditioning_from_json(const nlohmann::json& j);

}  // namespace flowforge
