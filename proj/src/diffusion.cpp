#include "flowforge/diffusion.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numbers>
#include <string>
#include <thread>

#include "flowforge/errors.hpp"

namespace flowforge {

// ---------------------------------------------------------------------------
// Schedule

void ScheduleConfig::validate() const {
    if (steps < 1) throw InvalidInput("schedule needs at least one step");
    if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
        throw InvalidInput("schedule requires 0 < beta_start <= beta_end < 1");
    }
    if (!(data_scale > 0.0) || !std::isfinite(data_scale)) throw InvalidInput("data_scale must be positive");
}

nlohmann::json ScheduleConfig::to_json() const {
    return {{"steps", steps}, {"beta_start", beta_start}, {"beta_end", beta_end}, {"kind", "linear"}, {"data_scale", data_scale}};
}

ScheduleConfig ScheduleConfig::from_json(const nlohmann::json& j) {
    ScheduleConfig c;
    c.steps = j.value("steps", c.steps);
    c.beta_start = j.value("beta_start", c.beta_start);
    c.beta_end = j.value("beta_end", c.beta_end);
    c.data_scale = j.value("data_scale", c.data_scale);
    if (j.value("kind", std::string("linear")) != "linear") throw InvalidInput("only the linear schedule is supported");
    c.validate();
    return c;
}

DiffusionSchedule make_schedule(int T, double beta_start, double beta_end, ScheduleKind kind) {
    ScheduleConfig cfg;
    cfg.steps = T;
    cfg.beta_start = beta_start;
    cfg.beta_end = beta_end;
    cfg.kind = kind;
    return make_schedule(cfg);
}

DiffusionSchedule make_schedule(const ScheduleConfig& cfg) {
    cfg.validate();
    DiffusionSchedule s;
    s.config = cfg;
    s.T = cfg.steps;
    const std::size_t n = std::size_t(s.T) + 1;
    s.beta.assign(n, 0.0);
    s.alpha.assign(n, 1.0);
    s.alpha_bar.assign(n, 1.0);
    s.sqrt_alpha_bar.assign(n, 1.0);
    s.sqrt_one_minus_alpha_bar.assign(n, 0.0);
    s.posterior_variance.assign(n, 0.0);
    for (int t = 1; t <= s.T; ++t) {
        const double frac = s.T == 1 ? 0.0 : double(t - 1) / double(s.T - 1);
        const auto i = std::size_t(t);
        s.beta[i] = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
        s.sqrt_alpha_bar[i] = std::sqrt(s.alpha_bar[i]);
        s.sqrt_one_minus_alpha_bar[i] = std::sqrt(1.0 - s.alpha_bar[i]);
        s.posterior_variance[i] = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
    }
    return s;
}

// ---------------------------------------------------------------------------
// Noise and guidance

namespace {

void require_shape(const VectorField& a, const VectorField& b, const char* what) {
    if (!a.same_shape(b)) throw DimensionMismatch(std::string(what) + ": field shapes differ");
}

void require_shape(const VectorField& a, const ConstraintMask& c, const char* what) {
    if (a.width() != c.width() || a.height() != c.height()) {
        throw DimensionMismatch(std::string(what) + ": field and mask shapes differ");
    }
}

void check_t(int t, int lo, const DiffusionSchedule& s, const char* what) {
    if (t < lo || t > s.T) {
        throw InvalidInput(std::string(what) + ": timestep " + std::to_string(t) + " outside [" + std::to_string(lo) +
                           ", " + std::to_string(s.T) + "]");
    }
}

VectorField to_field(const Tensor3<float>& t, double spacing) {
    VectorField f(t.width, t.height, spacing);
    const float* u = t.channel(0);
    const float* v = t.channel(1);
    for (std::size_t i = 0; i < f.cells(); ++i) {
        f.u()[i] = u[i];
        f.v()[i] = v[i];
    }
    return f;
}

}  // namespace

VectorField forward_noise(const VectorField& x0, const ConstraintMask& constraint, int t, const VectorField& eps,
                          const DiffusionSchedule& schedule) {
    require_shape(x0, eps, "forward_noise");
    require_shape(x0, constraint, "forward_noise");
    check_t(t, 0, schedule, "forward_noise");
    VectorField out = x0;
    if (t == 0) return out;
    const double a = schedule.sqrt_alpha_bar[std::size_t(t)];
    const double b = schedule.sqrt_one_minus_alpha_bar[std::size_t(t)];
    for (std::size_t i = 0; i < x0.cells(); ++i) {
        if (constraint.known(i)) continue;
        out.u()[i] = a * x0.u()[i] + b * eps.u()[i];
        out.v()[i] = a * x0.v()[i] + b * eps.v()[i];
    }
    return out;
}

VectorField gaussian_field(int width, int height, Rng& rng) {
    VectorField f(width, height);
    for (std::size_t i = 0; i < f.cells(); ++i) {
        f.u()[i] = standard_normal(rng);
        f.v()[i] = standard_normal(rng);
    }
    return f;
}

VectorField cfg_combine(const VectorField& eps_cond, const VectorField& eps_uncond, double w) {
    require_shape(eps_cond, eps_uncond, "cfg_combine");
    if (w == 1.0) return eps_cond;
    if (w == 0.0) return eps_uncond;
    VectorField out = eps_uncond;
    for (std::size_t i = 0; i < out.cells(); ++i) {
        out.u()[i] = eps_uncond.u()[i] + w * (eps_cond.u()[i] - eps_uncond.u()[i]);
        out.v()[i] = eps_uncond.v()[i] + w * (eps_cond.v()[i] - eps_uncond.v()[i]);
    }
    return out;
}

Tensor3<float> build_input(const VectorField& x, const ConstraintMask& constraint, bool conditional,
                           Conditioning conditioning) {
    require_shape(x, constraint, "build_input");
    Tensor3<float> in(4, x.height(), x.width());
    float* u = in.channel(0);
    float* v = in.channel(1);
    float* c2 = in.channel(2);
    float* c3 = in.channel(3);
    for (std::size_t i = 0; i < x.cells(); ++i) {
        u[i] = float(x.u()[i]);
        v[i] = float(x.v()[i]);
        if (!conditional || !constraint.known(i)) continue;
        c2[i] = 1.0f;
        if (conditioning == Conditioning::mask_mask) {
            c3[i] = 1.0f;
        } else {
            c3[i] = float(std::hypot(constraint.values.u()[i], constraint.values.v()[i]));
        }
    }
    return in;
}

nlohmann::json conditioning_to_json(Conditioning c) {
    return c == Conditioning::mask_speed ? "mask_speed" : "mask_mask";
}

Conditioning conditioning_from_json(const nlohmann::json& j) {
    const auto s = j.get<std::string>();
    if (s == "mask_mask") return Conditioning::mask_mask;
    if (s == "mask_speed") return Conditioning::mask_speed;
    throw InvalidInput("conditioning must be mask_mask or mask_speed");
}

// ---------------------------------------------------------------------------
// Training

void TrainConfig::validate() const {
    if (!(p_drop >= 0.0 && p_drop < 1.0)) throw InvalidInput("p_drop must be in [0, 1)");
    if (batch_size < 1) throw InvalidInput("batch_size must be >= 1");
    if (!(learning_rate > 0.0)) throw InvalidInput("learning_rate must be > 0");
    if (epochs < 1) throw InvalidInput("epochs must be >= 1");
    if (threads < 1) throw InvalidInput("threads must be >= 1");
}

AdamConfig TrainConfig::adam() const {
    AdamConfig a;
    a.learning_rate = learning_rate;
    return a;
}

double TrainConfig::learning_rate_at(std::int64_t step, std::int64_t total_steps) const {
    if (lr_schedule == LrSchedule::constant || total_steps <= 0) return learning_rate;
    const double frac = std::clamp(double(step) / double(total_steps), 0.0, 1.0);
    return learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
}

nlohmann::json TrainConfig::to_json() const {
    return {{"p_drop", p_drop},   {"batch_size", batch_size}, {"learning_rate", learning_rate},
            {"epochs", epochs},   {"seed", seed},             {"threads", threads},
            {"conditioning", conditioning_to_json(conditioning)},
            {"lr_schedule", lr_schedule == LrSchedule::cosine ? "cosine" : "constant"}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.p_drop = j.value("p_drop", c.p_drop);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.threads = j.value("threads", c.threads);
    if (j.contains("conditioning")) c.conditioning = conditioning_from_json(j["conditioning"]);
    const std::string lr = j.value("lr_schedule", std::string("constant"));
    if (lr == "cosine") c.lr_schedule = LrSchedule::cosine;
    else if (lr != "constant") throw InvalidInput("unknown lr_schedule '" + lr + "'");
    c.validate();
    return c;
}

namespace {

// Run fn(i) for i in [0, n) on up to `threads` workers. The first exception
// is rethrown on the caller.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::size_t(std::max(threads, 1)), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    auto work = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t k = 1; k < workers; ++k) pool.emplace_back(work);
    work();
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

VectorField scaled(VectorField f, double k) {
    if (k == 1.0) return f;
    for (std::size_t i = 0; i < f.cells(); ++i) {
        f.u()[i] *= k;
        f.v()[i] *= k;
    }
    return f;
}

ConstraintMask scaled(const ConstraintMask& c, double k) {
    return ConstraintMask{c.mask, scaled(c.values, k)};
}

}  // namespace

TrainingStepResult training_step(std::span<const DatasetRecord> batch, const DenoiserParams<float>& params,
                                 const TrainConfig& cfg, const DiffusionSchedule& schedule, Rng& rng,
                                 std::int64_t step_index) {
    cfg.validate();
    if (batch.empty()) throw InvalidInput("training batch is empty");
    const std::size_t n = batch.size();

    struct Draw {
        int t = 1;
        VectorField eps;
        bool conditional = true;
    };
    std::vector<Draw> draws(n);
    std::uniform_int_distribution<int> pick_t(1, schedule.T);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const VectorField& x0 = batch[i].field;
        require_shape(x0, batch[i].constraint, "training_step");
        draws[i].t = pick_t(rng);
        draws[i].eps = gaussian_field(x0.width(), x0.height(), rng);
        draws[i].conditional = !(coin(rng) < cfg.p_drop);
    }

    TrainingStepResult res;
    res.timesteps.resize(n);
    res.loss_grad.resize(n);
    std::vector<double> losses(n, 0.0);
    std::vector<std::vector<float>> grads(n);

    parallel_for(n, cfg.threads, [&](std::size_t i) {
        const DatasetRecord& rec = batch[i];
        const Draw& d = draws[i];
        const ConstraintMask constraint = scaled(rec.constraint, schedule.config.data_scale);
        const VectorField x_t =
            forward_noise(scaled(rec.field, schedule.config.data_scale), constraint, d.t, d.eps, schedule);
        const Tensor3<float> input = build_input(x_t, constraint, d.conditional, cfg.conditioning);
        TraceHandle<float> trace;
        const Tensor3<float> out = forward(params, input, d.t, trace);

        const std::size_t cells = x_t.cells();
        std::size_t unknown = 0;
        for (std::size_t c = 0; c < cells; ++c) unknown += rec.constraint.known(c) ? 0 : 1;

        VectorField g(x_t.width(), x_t.height(), x_t.spacing());
        Tensor3<float> upstream(2, x_t.height(), x_t.width());
        double loss = 0.0;
        if (unknown > 0) {
            const double norm = 1.0 / (2.0 * double(unknown));
            const double gscale = 2.0 * norm / double(n);
            const float* pu = out.channel(0);
            const float* pv = out.channel(1);
            for (std::size_t c = 0; c < cells; ++c) {
                if (rec.constraint.known(c)) continue;
                const double du = double(pu[c]) - d.eps.u()[c];
                const double dv = double(pv[c]) - d.eps.v()[c];
                loss += du * du + dv * dv;
                g.u()[c] = gscale * du;
                g.v()[c] = gscale * dv;
                upstream.channel(0)[c] = float(g.u()[c]);
                upstream.channel(1)[c] = float(g.v()[c]);
            }
            loss *= norm;
        }
        losses[i] = loss;
        grads[i].assign(params.values.size(), 0.0f);
        if (unknown > 0) backward(params, trace, upstream, std::span<float>(grads[i]));
        res.loss_grad[i] = std::move(g);
    });

    res.grads.assign(params.values.size(), 0.0f);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        total += losses[i];
        for (std::size_t k = 0; k < res.grads.size(); ++k) res.grads[k] += grads[i][k];
        res.timesteps[i] = draws[i].t;
        if (draws[i].conditional) ++res.conditional_samples;
        else ++res.unconditional_samples;
    }
    res.loss = total / double(n);
    if (!std::isfinite(res.loss)) {
        std::string ts;
        for (std::size_t i = 0; i < n; ++i) ts += (i ? "," : "") + std::to_string(draws[i].t);
        throw DivergenceError("training", step_index,
                              "non-finite training loss at step " + std::to_string(step_index) +
                                  " (batch of " + std::to_string(n) + ", timesteps " + ts + ")");
    }
    return res;
}

// ---------------------------------------------------------------------------
// Sampling

void SampleConfig::validate(const DiffusionSchedule& schedule) const {
    if (steps < 1 || steps > schedule.T) {
        throw InvalidInput("sampling steps must be in [1, " + std::to_string(schedule.T) + "]");
    }
    if (!(w >= 0.0) || !std::isfinite(w)) throw InvalidInput("guidance scale w must be >= 0");
}

nlohmann::json SampleConfig::to_json() const {
    return {{"steps", steps},
            {"w", w},
            {"seed", seed},
            {"mode", mode == SampleMode::cfg ? "cfg" : "conditional_only"},
            {"conditioning", conditioning_to_json(conditioning)}};
}

SampleConfig SampleConfig::from_json(const nlohmann::json& j) {
    SampleConfig c;
    c.steps = j.value("steps", c.steps);
    c.w = j.value("w", c.w);
    c.seed = j.value("seed", c.seed);
    const auto mode = j.value("mode", std::string("cfg"));
    if (mode == "cfg") c.mode = SampleMode::cfg;
    else if (mode == "conditional_only") c.mode = SampleMode::conditional_only;
    else throw InvalidInput("sample mode must be cfg or conditional_only");
    if (j.contains("conditioning")) c.conditioning = conditioning_from_json(j["conditioning"]);
    return c;
}

std::vector<int> sampling_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw InvalidInput("sampling steps must be in [1, T]");
    std::vector<int> ts;
    ts.reserve(std::size_t(steps) + 1);
    for (int k = steps; k >= 0; --k) ts.push_back(int((std::int64_t(k) * T) / steps));
    return ts;
}

namespace {

struct StepCoefficients {
    double mean_x = 1.0;    // 1 / sqrt(alpha)
    double mean_eps = 0.0;  // beta / sqrt(1 - alpha_bar), applied before the 1 / sqrt(alpha) factor
    double sigma = 0.0;
};

StepCoefficients step_coefficients(int t, std::optional<int> t_prev, const DiffusionSchedule& s) {
    check_t(t, 1, s, "scheduler_step");
    const int tp = t_prev.value_or(t - 1);
    if (tp < 0 || tp >= t) throw InvalidInput("scheduler_step: previous timestep must be in [0, t)");
    const double ab = s.alpha_bar[std::size_t(t)];
    const double ab_prev = s.alpha_bar[std::size_t(tp)];
    const double beta = tp == t - 1 ? s.beta[std::size_t(t)] : 1.0 - ab / ab_prev;
    const double alpha = 1.0 - beta;
    StepCoefficients c;
    c.mean_x = 1.0 / std::sqrt(alpha);
    c.mean_eps = beta / std::sqrt(1.0 - ab);
    c.sigma = tp == 0 ? 0.0 : std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    return c;
}

}  // namespace

VectorField scheduler_mean(const VectorField& x_t, int t, const VectorField& eps_hat, const DiffusionSchedule& schedule,
                           std::optional<int> t_prev) {
    require_shape(x_t, eps_hat, "scheduler_step");
    const StepCoefficients c = step_coefficients(t, t_prev, schedule);
    VectorField out = x_t;
    for (std::size_t i = 0; i < out.cells(); ++i) {
        out.u()[i] = c.mean_x * (x_t.u()[i] - c.mean_eps * eps_hat.u()[i]);
        out.v()[i] = c.mean_x * (x_t.v()[i] - c.mean_eps * eps_hat.v()[i]);
    }
    return out;
}

VectorField scheduler_step(const VectorField& x_t, int t, const VectorField& eps_hat, const DiffusionSchedule& schedule,
                           Rng& rng, std::optional<int> t_prev) {
    VectorField out = scheduler_mean(x_t, t, eps_hat, schedule, t_prev);
    const StepCoefficients c = step_coefficients(t, t_prev, schedule);
    if (c.sigma == 0.0) return out;
    for (std::size_t i = 0; i < out.cells(); ++i) {
        out.u()[i] += c.sigma * standard_normal(rng);
        out.v()[i] += c.sigma * standard_normal(rng);
    }
    return out;
}

VectorField sample(const DenoiserParams<float>& params, const ConstraintMask& constraint, const SampleConfig& cfg,
                   const DiffusionSchedule& schedule, Rng& rng, const SampleObserver& observer) {
    cfg.validate(schedule);
    params.config.check_input(constraint.height(), constraint.width());
    const double k = schedule.config.data_scale;
    const ConstraintMask work = scaled(constraint, k);
    const VectorField& known = work.values;
    const std::size_t cells = known.cells();

    auto clamp_to = [&](VectorField& x, const VectorField& values) {
        for (std::size_t i = 0; i < cells; ++i) {
            if (!constraint.known(i)) continue;
            x.u()[i] = values.u()[i];
            x.v()[i] = values.v()[i];
        }
    };
    auto clamp = [&](VectorField& x) { clamp_to(x, known); };
    // Back to data units with the known cells restored bitwise.
    auto unscaled = [&](const VectorField& x) {
        VectorField out = scaled(x, 1.0 / k);
        clamp_to(out, constraint.values);
        return out;
    };

    VectorField x = gaussian_field(constraint.width(), constraint.height(), rng);
    clamp(x);

    const std::vector<int> ts = sampling_timesteps(schedule.T, cfg.steps);
    const bool need_uncond = cfg.mode == SampleMode::cfg && cfg.w != 1.0;
    const bool need_cond = cfg.mode == SampleMode::conditional_only || cfg.w != 0.0;
    for (std::size_t k = 0; k + 1 < ts.size(); ++k) {
        const int t = ts[k], t_prev = ts[k + 1];
        std::optional<VectorField> cond, uncond;
        if (need_cond) {
            cond = to_field(predict(params, build_input(x, work, true, cfg.conditioning), t), known.spacing());
        }
        if (need_uncond) {
            uncond = to_field(predict(params, build_input(x, work, false, cfg.conditioning), t), known.spacing());
        }
        VectorField eps_hat;
        if (cfg.mode == SampleMode::conditional_only) eps_hat = std::move(*cond);
        else if (!need_uncond) eps_hat = std::move(*cond);
        else if (!need_cond) eps_hat = std::move(*uncond);
        else eps_hat = cfg_combine(*cond, *uncond, cfg.w);

        x = scheduler_step(x, t, eps_hat, schedule, rng, t_prev);
        clamp(x);
        if (!x.all_finite()) {
            throw DivergenceError("sampling", t, "non-finite values while sampling at timestep " + std::to_string(t));
        }
        if (observer) observer(t_prev, unscaled(x));
    }
    return unscaled(x);
}

}  // namespace flowforge
