#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flowforge/rng.hpp"

namespace flowforge {

enum class Padding { zero, periodic };

/// Architecture of the noise predictor. Channel width doubles per level; the
/// bottleneck runs at base_width * 2^levels.
struct NetConfig {
    int in_channels = 4;
    int out_channels = 2;
    int base_width = 16;
    int levels = 3;
    int time_embed_dim = 64;
    int groups = 8;  // group-norm groups (reduced to a divisor for narrow layers)
    Padding padding = Padding::zero;

    void validate() const;
    /// Both sides must be divisible by 2^levels.
    void check_input(int height, int width) const;
    int channels_at(int level) const { return base_width << level; }

    nlohmann::json to_json() const;
    static NetConfig from_json(const nlohmann::json& j);
    friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

/// Channel-major image: data[(c * height + y) * width + x].
template <typename T>
struct Tensor3 {
    int channels = 0;
    int height = 0;
    int width = 0;
    std::vector<T> data;

    Tensor3() = default;
    Tensor3(int c, int h, int w, T fill = T(0)) : channels(c), height(h), width(w), data(std::size_t(c) * h * w, fill) {}

    std::size_t plane() const { return std::size_t(height) * width; }
    T* channel(int c) { return data.data() + std::size_t(c) * plane(); }
    const T* channel(int c) const { return data.data() + std::size_t(c) * plane(); }
    T& at(int c, int y, int x) { return data[(std::size_t(c) * height + y) * width + x]; }
    T at(int c, int y, int x) const { return data[(std::size_t(c) * height + y) * width + x]; }
};

struct TensorInfo {
    std::string name;
    std::vector<int> shape;
    std::size_t offset = 0;
    std::size_t size = 0;
};

struct NetLayout;  // layer specs with parameter offsets, built from a NetConfig

std::shared_ptr<const NetLayout> build_layout(const NetConfig& cfg);
const std::vector<TensorInfo>& layout_tensors(const NetLayout& layout);
std::size_t layout_parameter_count(const NetLayout& layout);

/// All trainable weights in one flat buffer, addressed through a named index.
template <typename T>
struct DenoiserParams {
    NetConfig config;
    std::shared_ptr<const NetLayout> layout;
    std::vector<T> values;

    std::size_t count() const { return values.size(); }
    const std::vector<TensorInfo>& tensors() const { return layout_tensors(*layout); }
    const TensorInfo& info(const std::string& name) const;
    std::span<T> tensor(const std::string& name);
    std::span<const T> tensor(const std::string& name) const;
    /// Name of the tensor containing flat index `i`.
    const std::string& owner(std::size_t i) const;
};

/// Hidden layers get fan-in scaled Gaussian weights, norms start at identity,
/// the output convolution starts at exactly zero.
template <typename T>
DenoiserParams<T> init_params(const NetConfig& cfg, Rng& rng);

/// Allocates a zeroed parameter buffer with the layout of `cfg`.
template <typename T>
DenoiserParams<T> zero_params(const NetConfig& cfg);

/// Sinusoidal encoding: [sin(t f_k), cos(t f_k)] with f_k = 10000^(-k / (dim/2)).
std::vector<double> time_embedding(int t, int dim);

/// Intermediate values kept by a forward pass for the matching backward pass.
template <typename T>
struct ForwardTrace;

template <typename T>
class TraceHandle {
public:
    TraceHandle();
    ~TraceHandle();
    TraceHandle(TraceHandle&&) noexcept;
    TraceHandle& operator=(TraceHandle&&) noexcept;
    ForwardTrace<T>& get() { return *impl_; }
    const ForwardTrace<T>& get() const { return *impl_; }

private:
    std::unique_ptr<ForwardTrace<T>> impl_;
};

/// eps_theta(x_in, t): 4-channel input -> 2-channel noise prediction.
template <typename T>
Tensor3<T> predict(const DenoiserParams<T>& params, const Tensor3<T>& input, int t);

/// Forward pass that keeps what backward needs.
template <typename T>
Tensor3<T> forward(const DenoiserParams<T>& params, const Tensor3<T>& input, int t, TraceHandle<T>& trace);

/// Accumulates d<upstream, output>/d(params) into `grads` (same layout as params.values).
template <typename T>
void backward(const DenoiserParams<T>& params, const TraceHandle<T>& trace, const Tensor3<T>& upstream,
              std::span<T> grads);

/// Convenience form that reruns the forward pass and returns fresh gradients.
template <typename T>
std::vector<T> backward(const DenoiserParams<T>& params, const Tensor3<T>& input, int t, const Tensor3<T>& upstream);

struct AdamConfig {
    double learning_rate = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

template <typename T>
struct OptimizerState {
    AdamConfig config;
    std::int64_t step = 0;
    std::vector<T> m;
    std::vector<T> v;

    static OptimizerState zeros(std::size_t n, const AdamConfig& cfg) {
        return OptimizerState{cfg, 0, std::vector<T>(n, T(0)), std::vector<T>(n, T(0))};
    }
};

/// Adam with bias correction. Throws DivergenceError naming the tensor if a
/// gradient is non-finite; parameters are untouched in that case.
template <typename T>
void optimizer_step(DenoiserParams<T>& params, std::span<const T> grads, OptimizerState<T>& state);

}  // namespace flowforge
