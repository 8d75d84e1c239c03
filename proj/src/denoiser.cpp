#include "flowforge/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Core>

#include "flowforge/errors.hpp"

namespace flowforge {

// ---------------------------------------------------------------------------
// Configuration

void NetConfig::validate() const {
    if (in_channels != 4 || out_channels != 2) {
        throw InvalidInput("denoiser takes 4 input channels and predicts 2 output channels");
    }
    if (base_width < 1) throw InvalidInput("base_width must be >= 1");
    if (levels < 1) throw InvalidInput("levels must be >= 1");
    if (time_embed_dim < 2 || time_embed_dim % 2 != 0) throw InvalidInput("time_embed_dim must be even and >= 2");
    if (groups < 1) throw InvalidInput("groups must be >= 1");
}

void NetConfig::check_input(int height, int width) const {
    const int f = 1 << levels;
    if (height % f != 0 || width % f != 0 || height < f || width < f) {
        throw InvalidInput("input " + std::to_string(width) + "x" + std::to_string(height) +
                           " is not divisible by 2^levels = " + std::to_string(f));
    }
}

nlohmann::json NetConfig::to_json() const {
    return {{"in_channels", in_channels},       {"out_channels", out_channels}, {"base_width", base_width},
            {"levels", levels},                 {"time_embed_dim", time_embed_dim}, {"groups", groups},
            {"padding", padding == Padding::periodic ? "periodic" : "zero"}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
    NetConfig c;
    c.in_channels = j.value("in_channels", c.in_channels);
    c.out_channels = j.value("out_channels", c.out_channels);
    c.base_width = j.value("base_width", c.base_width);
    c.levels = j.value("levels", c.levels);
    c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
    c.groups = j.value("groups", c.groups);
    const std::string pad = j.value("padding", std::string("zero"));
    if (pad == "periodic") c.padding = Padding::periodic;
    else if (pad == "zero") c.padding = Padding::zero;
    else throw InvalidInput("padding must be zero or periodic");
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Layout

namespace {

struct ConvSpec {
    int in = 0, out = 0, k = 3;
    std::size_t w = 0, b = 0;
};

struct NormSpec {
    int channels = 0, groups = 1;
    std::size_t gamma = 0, beta = 0;
};

struct LinearSpec {
    int in = 0, out = 0;
    std::size_t w = 0, b = 0;
};

struct BlockSpec {
    ConvSpec conv1;
    NormSpec norm1;
    LinearSpec temb;
    ConvSpec conv2;
    NormSpec norm2;
    ConvSpec skip;  // 1x1 residual projection of the block input
};

}  // namespace

struct NetLayout {
    NetConfig cfg;
    LinearSpec fc1, fc2;
    std::vector<BlockSpec> down;
    BlockSpec mid;
    std::vector<BlockSpec> up;  // up[l] runs at level l
    ConvSpec out;
    std::vector<TensorInfo> tensors;
    std::size_t total = 0;
};

namespace {

class LayoutBuilder {
public:
    explicit LayoutBuilder(NetLayout& l) : l_(l) {}

    std::size_t add(const std::string& name, std::vector<int> shape) {
        std::size_t n = 1;
        for (int s : shape) n *= std::size_t(s);
        l_.tensors.push_back(TensorInfo{name, std::move(shape), l_.total, n});
        const std::size_t off = l_.total;
        l_.total += n;
        return off;
    }

    ConvSpec conv(const std::string& name, int in, int out, int k) {
        ConvSpec c{in, out, k, 0, 0};
        c.w = add(name + ".weight", {out, in, k, k});
        c.b = add(name + ".bias", {out});
        return c;
    }

    NormSpec norm(const std::string& name, int channels, int groups) {
        NormSpec n{channels, std::gcd(groups, channels), 0, 0};
        n.gamma = add(name + ".weight", {channels});
        n.beta = add(name + ".bias", {channels});
        return n;
    }

    LinearSpec linear(const std::string& name, int in, int out) {
        LinearSpec s{in, out, 0, 0};
        s.w = add(name + ".weight", {out, in});
        s.b = add(name + ".bias", {out});
        return s;
    }

    BlockSpec block(const std::string& name, int in, int out) {
        const NetConfig& c = l_.cfg;
        BlockSpec b;
        b.conv1 = conv(name + ".conv1", in, out, 3);
        b.norm1 = norm(name + ".norm1", out, c.groups);
        b.temb = linear(name + ".temb", c.time_embed_dim, out);
        b.conv2 = conv(name + ".conv2", out, out, 3);
        b.norm2 = norm(name + ".norm2", out, c.groups);
        b.skip = conv(name + ".skip", in, out, 1);
        return b;
    }

private:
    NetLayout& l_;
};

}  // namespace

std::shared_ptr<const NetLayout> build_layout(const NetConfig& cfg) {
    cfg.validate();
    auto l = std::make_shared<NetLayout>();
    l->cfg = cfg;
    LayoutBuilder b(*l);
    const int d = cfg.time_embed_dim;
    l->fc1 = b.linear("time.fc1", d, d);
    l->fc2 = b.linear("time.fc2", d, d);
    for (int lev = 0; lev < cfg.levels; ++lev) {
        const int in = lev == 0 ? cfg.in_channels : cfg.channels_at(lev - 1);
        l->down.push_back(b.block("down" + std::to_string(lev), in, cfg.channels_at(lev)));
    }
    l->mid = b.block("mid", cfg.channels_at(cfg.levels - 1), cfg.channels_at(cfg.levels));
    l->up.resize(std::size_t(cfg.levels));
    for (int lev = cfg.levels - 1; lev >= 0; --lev) {
        const int in = cfg.channels_at(lev + 1) + cfg.channels_at(lev);
        l->up[std::size_t(lev)] = b.block("up" + std::to_string(lev), in, cfg.channels_at(lev));
    }
    l->out = b.conv("out", cfg.channels_at(0), cfg.out_channels, 3);
    return l;
}

const std::vector<TensorInfo>& layout_tensors(const NetLayout& layout) { return layout.tensors; }
std::size_t layout_parameter_count(const NetLayout& layout) { return layout.total; }

template <typename T>
const TensorInfo& DenoiserParams<T>::info(const std::string& name) const {
    for (const auto& t : layout->tensors) {
        if (t.name == name) return t;
    }
    throw InvalidInput("no parameter tensor named " + name);
}

template <typename T>
std::span<T> DenoiserParams<T>::tensor(const std::string& name) {
    const auto& t = info(name);
    return std::span<T>(values.data() + t.offset, t.size);
}

template <typename T>
std::span<const T> DenoiserParams<T>::tensor(const std::string& name) const {
    const auto& t = info(name);
    return std::span<const T>(values.data() + t.offset, t.size);
}

template <typename T>
const std::string& DenoiserParams<T>::owner(std::size_t i) const {
    for (const auto& t : layout->tensors) {
        if (i >= t.offset && i < t.offset + t.size) return t.name;
    }
    throw InvalidInput("parameter index out of range");
}

template <typename T>
DenoiserParams<T> zero_params(const NetConfig& cfg) {
    DenoiserParams<T> p;
    p.config = cfg;
    p.layout = build_layout(cfg);
    p.values.assign(p.layout->total, T(0));
    return p;
}

template <typename T>
DenoiserParams<T> init_params(const NetConfig& cfg, Rng& rng) {
    DenoiserParams<T> p = zero_params<T>(cfg);
    for (const TensorInfo& t : p.layout->tensors) {
        const bool is_bias = t.name.ends_with(".bias");
        const bool is_norm = t.name.find(".norm") != std::string::npos;
        T* dst = p.values.data() + t.offset;
        if (t.name.starts_with("out.")) continue;  // zero-initialized projection
        if (is_norm) {
            if (!is_bias) std::fill(dst, dst + t.size, T(1));
            continue;
        }
        if (is_bias) continue;
        std::size_t fan_in = 1;
        for (std::size_t k = 1; k < t.shape.size(); ++k) fan_in *= std::size_t(t.shape[k]);
        // gain 2 ahead of SiLU, 1 for linear maps and the residual projections
        const bool gain2 = t.shape.size() == 4 && t.name.find(".skip.") == std::string::npos;
        const double stddev = std::sqrt((gain2 ? 2.0 : 1.0) / double(fan_in));
        std::normal_distribution<double> dist(0.0, stddev);
        for (std::size_t i = 0; i < t.size; ++i) dst[i] = T(dist(rng));
    }
    return p;
}

std::vector<double> time_embedding(int t, int dim) {
    if (dim < 2 || dim % 2 != 0) throw InvalidInput("time embedding dimension must be even");
    const int half = dim / 2;
    std::vector<double> e(static_cast<std::size_t>(dim));
    for (int k = 0; k < half; ++k) {
        const double freq = std::exp(-std::log(10000.0) * double(k) / double(half));
        e[std::size_t(k)] = std::sin(double(t) * freq);
        e[std::size_t(half + k)] = std::cos(double(t) * freq);
    }
    return e;
}

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using MapV = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CMapV = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

int wrap(int i, int n) { return ((i % n) + n) % n; }

template <typename T>
void im2col(const Tensor3<T>& x, int k, Padding pad, std::vector<T>& cols) {
    const int c_in = x.channels, h = x.height, w = x.width, p = k / 2;
    const std::size_t hw = x.plane();
    cols.assign(std::size_t(c_in) * k * k * hw, T(0));
    for (int c = 0; c < c_in; ++c) {
        const T* src = x.channel(c);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                T* dst = cols.data() + (std::size_t(c * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    int sy = y + ky - p;
                    if (pad == Padding::periodic) sy = wrap(sy, h);
                    else if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        int sx = xx + kx - p;
                        if (pad == Padding::periodic) sx = wrap(sx, w);
                        else if (sx < 0 || sx >= w) continue;
                        dst[std::size_t(y) * w + xx] = src[std::size_t(sy) * w + sx];
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const std::vector<T>& cols, int k, Padding pad, Tensor3<T>& dx) {
    const int c_in = dx.channels, h = dx.height, w = dx.width, p = k / 2;
    const std::size_t hw = dx.plane();
    for (int c = 0; c < c_in; ++c) {
        T* dst = dx.channel(c);
        for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
                const T* src = cols.data() + (std::size_t(c * k + ky) * k + kx) * hw;
                for (int y = 0; y < h; ++y) {
                    int sy = y + ky - p;
                    if (pad == Padding::periodic) sy = wrap(sy, h);
                    else if (sy < 0 || sy >= h) continue;
                    for (int xx = 0; xx < w; ++xx) {
                        int sx = xx + kx - p;
                        if (pad == Padding::periodic) sx = wrap(sx, w);
                        else if (sx < 0 || sx >= w) continue;
                        dst[std::size_t(sy) * w + sx] += src[std::size_t(y) * w + xx];
                    }
                }
            }
        }
    }
}

template <typename T>
Tensor3<T> conv_forward(const ConvSpec& s, const T* prm, const Tensor3<T>& x, Padding pad, std::vector<T>& cols) {
    im2col(x, s.k, pad, cols);
    const int rows = s.in * s.k * s.k;
    const auto hw = Eigen::Index(x.plane());
    Tensor3<T> y(s.out, x.height, x.width);
    CMapR<T> wm(prm + s.w, s.out, rows);
    CMapR<T> cm(cols.data(), rows, hw);
    MapR<T> ym(y.data.data(), s.out, hw);
    ym.noalias() = wm * cm;
    ym.colwise() += CMapV<T>(prm + s.b, s.out);
    return y;
}

// dx may be null when the input gradient is not needed.
template <typename T>
void conv_backward(const ConvSpec& s, const T* prm, const std::vector<T>& cols, const Tensor3<T>& dy, Padding pad,
                   T* grads, Tensor3<T>* dx) {
    const int rows = s.in * s.k * s.k;
    const auto hw = Eigen::Index(dy.plane());
    CMapR<T> dym(dy.data.data(), s.out, hw);
    CMapR<T> cm(cols.data(), rows, hw);
    MapR<T> gw(grads + s.w, s.out, rows);
    gw.noalias() += dym * cm.transpose();
    // fixed summation order; Eigen's vectorized reductions depend on buffer alignment
    for (int o = 0; o < s.out; ++o) {
        const T* row = dy.data.data() + std::size_t(o) * hw;
        T acc = T(0);
        for (std::size_t k = 0; k < std::size_t(hw); ++k) acc += row[k];
        grads[s.b + std::size_t(o)] += acc;
    }
    if (dx) {
        std::vector<T> dcols(std::size_t(rows) * std::size_t(hw));
        MapR<T> dcm(dcols.data(), rows, hw);
        CMapR<T> wm(prm + s.w, s.out, rows);
        dcm.noalias() = wm.transpose() * dym;
        *dx = Tensor3<T>(s.in, dy.height, dy.width);
        col2im_add(dcols, s.k, pad, *dx);
    }
}

template <typename T>
struct NormCache {
    std::vector<T> xhat;
    std::vector<T> rstd;  // per group
};

constexpr double kNormEpsilon = 1e-5;

template <typename T>
Tensor3<T> norm_forward(const NormSpec& s, const T* prm, const Tensor3<T>& x, NormCache<T>& cache) {
    const int cpg = s.channels / s.groups;
    const std::size_t hw = x.plane();
    const std::size_t n = std::size_t(cpg) * hw;
    Tensor3<T> y(x.channels, x.height, x.width);
    cache.xhat.resize(x.data.size());
    cache.rstd.resize(std::size_t(s.groups));
    for (int g = 0; g < s.groups; ++g) {
        const std::size_t base = std::size_t(g) * n;
        double mean = 0.0;
        for (std::size_t i = 0; i < n; ++i) mean += double(x.data[base + i]);
        mean /= double(n);
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double d = double(x.data[base + i]) - mean;
            var += d * d;
        }
        var /= double(n);
        const double rstd = 1.0 / std::sqrt(var + kNormEpsilon);
        cache.rstd[std::size_t(g)] = T(rstd);
        for (int cc = 0; cc < cpg; ++cc) {
            const int c = g * cpg + cc;
            const T gamma = prm[s.gamma + std::size_t(c)], beta = prm[s.beta + std::size_t(c)];
            const std::size_t off = std::size_t(c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const T xh = T((double(x.data[off + i]) - mean) * rstd);
                cache.xhat[off + i] = xh;
                y.data[off + i] = gamma * xh + beta;
            }
        }
    }
    return y;
}

template <typename T>
Tensor3<T> norm_backward(const NormSpec& s, const T* prm, const NormCache<T>& cache, const Tensor3<T>& dy, T* grads) {
    const int cpg = s.channels / s.groups;
    const std::size_t hw = dy.plane();
    const std::size_t n = std::size_t(cpg) * hw;
    Tensor3<T> dx(dy.channels, dy.height, dy.width);
    std::vector<double> dxhat(n);
    for (int g = 0; g < s.groups; ++g) {
        double sum_d = 0.0, sum_dx = 0.0;
        for (int cc = 0; cc < cpg; ++cc) {
            const int c = g * cpg + cc;
            const double gamma = prm[s.gamma + std::size_t(c)];
            const std::size_t off = std::size_t(c) * hw;
            double dgamma = 0.0, dbeta = 0.0;
            for (std::size_t i = 0; i < hw; ++i) {
                const double d = dy.data[off + i];
                const double xh = cache.xhat[off + i];
                dgamma += d * xh;
                dbeta += d;
                const double dh = d * gamma;
                dxhat[std::size_t(cc) * hw + i] = dh;
                sum_d += dh;
                sum_dx += dh * xh;
            }
            grads[s.gamma + std::size_t(c)] += T(dgamma);
            grads[s.beta + std::size_t(c)] += T(dbeta);
        }
        const double rstd = cache.rstd[std::size_t(g)];
        const double inv_n = 1.0 / double(n);
        for (int cc = 0; cc < cpg; ++cc) {
            const std::size_t off = std::size_t(g * cpg + cc) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
                const double xh = cache.xhat[off + i];
                const double dh = dxhat[std::size_t(cc) * hw + i];
                dx.data[off + i] = T(rstd * (dh - inv_n * sum_d - xh * inv_n * sum_dx));
            }
        }
    }
    return dx;
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T silu(T x) {
    return x * sigmoid(x);
}

template <typename T>
T silu_grad(T x) {
    const T s = sigmoid(x);
    return s * (T(1) + x * (T(1) - s));
}

template <typename T>
std::vector<T> linear_forward(const LinearSpec& s, const T* prm, const std::vector<T>& x) {
    std::vector<T> y(std::size_t(s.out));
    for (int o = 0; o < s.out; ++o) {
        const T* w = prm + s.w + std::size_t(o) * std::size_t(s.in);
        T acc = prm[s.b + std::size_t(o)];
        for (int i = 0; i < s.in; ++i) acc += w[i] * x[std::size_t(i)];
        y[std::size_t(o)] = acc;
    }
    return y;
}

// Returns dx.
template <typename T>
std::vector<T> linear_backward(const LinearSpec& s, const T* prm, const std::vector<T>& x, const std::vector<T>& dy,
                               T* grads) {
    std::vector<T> dx(std::size_t(s.in), T(0));
    for (int o = 0; o < s.out; ++o) {
        const T g = dy[std::size_t(o)];
        const std::size_t row = std::size_t(o) * std::size_t(s.in);
        for (int i = 0; i < s.in; ++i) {
            grads[s.w + row + std::size_t(i)] += g * x[std::size_t(i)];
            dx[std::size_t(i)] += prm[s.w + row + std::size_t(i)] * g;
        }
        grads[s.b + std::size_t(o)] += g;
    }
    return dx;
}

template <typename T>
Tensor3<T> avgpool2(const Tensor3<T>& x) {
    Tensor3<T> y(x.channels, x.height / 2, x.width / 2);
    for (int c = 0; c < x.channels; ++c) {
        for (int yy = 0; yy < y.height; ++yy) {
            for (int xx = 0; xx < y.width; ++xx) {
                y.at(c, yy, xx) = T(0.25) * (x.at(c, 2 * yy, 2 * xx) + x.at(c, 2 * yy, 2 * xx + 1) +
                                             x.at(c, 2 * yy + 1, 2 * xx) + x.at(c, 2 * yy + 1, 2 * xx + 1));
            }
        }
    }
    return y;
}

template <typename T>
void avgpool2_backward_add(const Tensor3<T>& dy, Tensor3<T>& dx) {
    for (int c = 0; c < dx.channels; ++c) {
        for (int yy = 0; yy < dx.height; ++yy) {
            for (int xx = 0; xx < dx.width; ++xx) dx.at(c, yy, xx) += T(0.25) * dy.at(c, yy / 2, xx / 2);
        }
    }
}

template <typename T>
Tensor3<T> upsample2(const Tensor3<T>& x) {
    Tensor3<T> y(x.channels, x.height * 2, x.width * 2);
    for (int c = 0; c < y.channels; ++c) {
        for (int yy = 0; yy < y.height; ++yy) {
            for (int xx = 0; xx < y.width; ++xx) y.at(c, yy, xx) = x.at(c, yy / 2, xx / 2);
        }
    }
    return y;
}

template <typename T>
Tensor3<T> upsample2_backward(const Tensor3<T>& dy) {
    Tensor3<T> dx(dy.channels, dy.height / 2, dy.width / 2);
    for (int c = 0; c < dy.channels; ++c) {
        for (int yy = 0; yy < dy.height; ++yy) {
            for (int xx = 0; xx < dy.width; ++xx) dx.at(c, yy / 2, xx / 2) += dy.at(c, yy, xx);
        }
    }
    return dx;
}

template <typename T>
Tensor3<T> concat(const Tensor3<T>& a, const Tensor3<T>& b) {
    Tensor3<T> y(a.channels + b.channels, a.height, a.width);
    std::copy(a.data.begin(), a.data.end(), y.data.begin());
    std::copy(b.data.begin(), b.data.end(), y.data.begin() + std::ptrdiff_t(a.data.size()));
    return y;
}

template <typename T>
struct BlockCache {
    std::vector<T> cols1;
    NormCache<T> n1;
    Tensor3<T> g1;  // norm1 output (pre-activation)
    std::vector<T> cols2;
    NormCache<T> n2;
    Tensor3<T> g2;  // norm2 output (pre-activation)
    std::vector<T> cols_skip;
};

template <typename T>
Tensor3<T> block_forward(const BlockSpec& s, const T* prm, const Tensor3<T>& x, const std::vector<T>& temb_act,
                         Padding pad, BlockCache<T>& cache) {
    Tensor3<T> h1 = conv_forward(s.conv1, prm, x, pad, cache.cols1);
    cache.g1 = norm_forward(s.norm1, prm, h1, cache.n1);
    const std::vector<T> shift = linear_forward(s.temb, prm, temb_act);
    Tensor3<T> a1(cache.g1.channels, cache.g1.height, cache.g1.width);
    const std::size_t hw = a1.plane();
    for (int c = 0; c < a1.channels; ++c) {
        const T sh = shift[std::size_t(c)];
        const T* g = cache.g1.channel(c);
        T* a = a1.channel(c);
        for (std::size_t i = 0; i < hw; ++i) a[i] = silu(g[i]) + sh;
    }
    Tensor3<T> h2 = conv_forward(s.conv2, prm, a1, pad, cache.cols2);
    cache.g2 = norm_forward(s.norm2, prm, h2, cache.n2);
    Tensor3<T> y = conv_forward(s.skip, prm, x, pad, cache.cols_skip);
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += silu(cache.g2.data[i]);
    return y;
}

template <typename T>
void block_backward(const BlockSpec& s, const T* prm, const BlockCache<T>& cache, const std::vector<T>& temb_act,
                    const Tensor3<T>& dy, Padding pad, T* grads, std::vector<T>& d_temb_act, Tensor3<T>* dx) {
    Tensor3<T> dg2(dy.channels, dy.height, dy.width);
    for (std::size_t i = 0; i < dy.data.size(); ++i) dg2.data[i] = dy.data[i] * silu_grad(cache.g2.data[i]);
    const Tensor3<T> dh2 = norm_backward(s.norm2, prm, cache.n2, dg2, grads);
    Tensor3<T> da1;
    conv_backward(s.conv2, prm, cache.cols2, dh2, pad, grads, &da1);

    const std::size_t hw = da1.plane();
    std::vector<T> dshift(std::size_t(da1.channels), T(0));
    Tensor3<T> dg1(da1.channels, da1.height, da1.width);
    for (int c = 0; c < da1.channels; ++c) {
        const T* d = da1.channel(c);
        const T* g = cache.g1.channel(c);
        T* o = dg1.channel(c);
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
            acc += double(d[i]);
            o[i] = d[i] * silu_grad(g[i]);
        }
        dshift[std::size_t(c)] = T(acc);
    }
    const std::vector<T> dt = linear_backward(s.temb, prm, temb_act, dshift, grads);
    for (std::size_t i = 0; i < dt.size(); ++i) d_temb_act[i] += dt[i];

    const Tensor3<T> dh1 = norm_backward(s.norm1, prm, cache.n1, dg1, grads);
    conv_backward(s.conv1, prm, cache.cols1, dh1, pad, grads, dx);
    Tensor3<T> dskip;
    conv_backward(s.skip, prm, cache.cols_skip, dy, pad, grads, dx ? &dskip : nullptr);
    if (dx) {
        for (std::size_t i = 0; i < dx->data.size(); ++i) dx->data[i] += dskip.data[i];
    }
}

}  // namespace

template <typename T>
struct ForwardTrace {
    int height = 0, width = 0;
    std::vector<T> e0, z1, a1, temb, temb_act;
    std::vector<BlockCache<T>> down;
    BlockCache<T> mid;
    std::vector<BlockCache<T>> up;
    std::vector<int> skip_channels;
    std::vector<T> cols_out;
};

template <typename T>
TraceHandle<T>::TraceHandle() : impl_(std::make_unique<ForwardTrace<T>>()) {}
template <typename T>
TraceHandle<T>::~TraceHandle() = default;
template <typename T>
TraceHandle<T>::TraceHandle(TraceHandle&&) noexcept = default;
template <typename T>
TraceHandle<T>& TraceHandle<T>::operator=(TraceHandle&&) noexcept = default;

template <typename T>
Tensor3<T> forward(const DenoiserParams<T>& params, const Tensor3<T>& input, int t, TraceHandle<T>& handle) {
    const NetLayout& l = *params.layout;
    const NetConfig& cfg = l.cfg;
    if (input.channels != cfg.in_channels) throw DimensionMismatch("denoiser input must have 4 channels");
    cfg.check_input(input.height, input.width);
    const T* prm = params.values.data();
    ForwardTrace<T>& tr = handle.get();
    tr.height = input.height;
    tr.width = input.width;

    const auto e = time_embedding(t, cfg.time_embed_dim);
    tr.e0.assign(e.begin(), e.end());
    tr.z1 = linear_forward(l.fc1, prm, tr.e0);
    tr.a1.resize(tr.z1.size());
    for (std::size_t i = 0; i < tr.z1.size(); ++i) tr.a1[i] = silu(tr.z1[i]);
    tr.temb = linear_forward(l.fc2, prm, tr.a1);
    tr.temb_act.resize(tr.temb.size());
    for (std::size_t i = 0; i < tr.temb.size(); ++i) tr.temb_act[i] = silu(tr.temb[i]);

    const std::size_t levels = std::size_t(cfg.levels);
    tr.down.resize(levels);
    tr.up.resize(levels);
    tr.skip_channels.resize(levels);
    std::vector<Tensor3<T>> skips(levels);
    Tensor3<T> h = input;
    for (std::size_t lev = 0; lev < levels; ++lev) {
        skips[lev] = block_forward(l.down[lev], prm, h, tr.temb_act, cfg.padding, tr.down[lev]);
        tr.skip_channels[lev] = skips[lev].channels;
        h = avgpool2(skips[lev]);
    }
    h = block_forward(l.mid, prm, h, tr.temb_act, cfg.padding, tr.mid);
    for (std::size_t lev = levels; lev-- > 0;) {
        const Tensor3<T> cat = concat(upsample2(h), skips[lev]);
        h = block_forward(l.up[lev], prm, cat, tr.temb_act, cfg.padding, tr.up[lev]);
    }
    return conv_forward(l.out, prm, h, cfg.padding, tr.cols_out);
}

template <typename T>
Tensor3<T> predict(const DenoiserParams<T>& params, const Tensor3<T>& input, int t) {
    TraceHandle<T> trace;
    return forward(params, input, t, trace);
}

template <typename T>
void backward(const DenoiserParams<T>& params, const TraceHandle<T>& handle, const Tensor3<T>& upstream,
              std::span<T> grads) {
    const NetLayout& l = *params.layout;
    const NetConfig& cfg = l.cfg;
    const ForwardTrace<T>& tr = handle.get();
    if (grads.size() != params.values.size()) throw DimensionMismatch("gradient buffer size mismatch");
    if (upstream.channels != cfg.out_channels || upstream.height != tr.height || upstream.width != tr.width) {
        throw DimensionMismatch("upstream gradient does not match the forward output");
    }
    const T* prm = params.values.data();
    T* g = grads.data();
    const Padding pad = cfg.padding;
    std::vector<T> d_temb_act(tr.temb_act.size(), T(0));

    Tensor3<T> dh;
    conv_backward(l.out, prm, tr.cols_out, upstream, pad, g, &dh);

    const std::size_t levels = std::size_t(cfg.levels);
    std::vector<Tensor3<T>> d_skips(levels);
    for (std::size_t lev = 0; lev < levels; ++lev) {
        Tensor3<T> dcat;
        block_backward(l.up[lev], prm, tr.up[lev], tr.temb_act, dh, pad, g, d_temb_act, &dcat);
        const int up_ch = dcat.channels - tr.skip_channels[lev];
        const std::size_t split = std::size_t(up_ch) * dcat.plane();
        Tensor3<T> d_up(up_ch, dcat.height, dcat.width);
        std::copy(dcat.data.begin(), dcat.data.begin() + std::ptrdiff_t(split), d_up.data.begin());
        d_skips[lev] = Tensor3<T>(tr.skip_channels[lev], dcat.height, dcat.width);
        std::copy(dcat.data.begin() + std::ptrdiff_t(split), dcat.data.end(), d_skips[lev].data.begin());
        dh = upsample2_backward(d_up);
    }
    Tensor3<T> d_pooled;
    block_backward(l.mid, prm, tr.mid, tr.temb_act, dh, pad, g, d_temb_act, &d_pooled);
    for (std::size_t lev = levels; lev-- > 0;) {
        Tensor3<T> d_out = std::move(d_skips[lev]);
        avgpool2_backward_add(d_pooled, d_out);
        Tensor3<T> d_in;
        block_backward(l.down[lev], prm, tr.down[lev], tr.temb_act, d_out, pad, g, d_temb_act,
                       lev > 0 ? &d_in : nullptr);
        d_pooled = std::move(d_in);
    }

    std::vector<T> d_temb(d_temb_act.size());
    for (std::size_t i = 0; i < d_temb.size(); ++i) d_temb[i] = d_temb_act[i] * silu_grad(tr.temb[i]);
    std::vector<T> d_a1 = linear_backward(l.fc2, prm, tr.a1, d_temb, g);
    for (std::size_t i = 0; i < d_a1.size(); ++i) d_a1[i] *= silu_grad(tr.z1[i]);
    linear_backward(l.fc1, prm, tr.e0, d_a1, g);
}

template <typename T>
std::vector<T> backward(const DenoiserParams<T>& params, const Tensor3<T>& input, int t, const Tensor3<T>& upstream) {
    TraceHandle<T> trace;
    forward(params, input, t, trace);
    std::vector<T> grads(params.values.size(), T(0));
    backward(params, trace, upstream, std::span<T>(grads));
    return grads;
}

template <typename T>
void optimizer_step(DenoiserParams<T>& params, std::span<const T> grads, OptimizerState<T>& state) {
    const std::size_t n = params.values.size();
    if (grads.size() != n || state.m.size() != n || state.v.size() != n) {
        throw DimensionMismatch("optimizer buffers do not match the parameters");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(double(grads[i]))) {
            throw DivergenceError("optimizer", state.step,
                                  "non-finite gradient in tensor " + params.owner(i) + " at optimizer step " +
                                      std::to_string(state.step));
        }
    }
    const AdamConfig& c = state.config;
    ++state.step;
    const double bc1 = 1.0 - std::pow(c.beta1, double(state.step));
    const double bc2 = 1.0 - std::pow(c.beta2, double(state.step));
    for (std::size_t i = 0; i < n; ++i) {
        const double g = grads[i];
        const double m = c.beta1 * double(state.m[i]) + (1.0 - c.beta1) * g;
        const double v = c.beta2 * double(state.v[i]) + (1.0 - c.beta2) * g * g;
        state.m[i] = T(m);
        state.v[i] = T(v);
        const double update = c.learning_rate * (m / bc1) / (std::sqrt(v / bc2) + c.epsilon);
        params.values[i] = T(double(params.values[i]) - update);
    }
}

#define FLOWFORGE_INSTANTIATE(T)                                                                              \
    template struct DenoiserParams<T>;                                                                         \
    template DenoiserParams<T> init_params<T>(const NetConfig&, Rng&);                                         \
    template DenoiserParams<T> zero_params<T>(const NetConfig&);                                               \
    template class TraceHandle<T>;                                                                             \
    template Tensor3<T> predict<T>(const DenoiserParams<T>&, const Tensor3<T>&, int);                          \
    template Tensor3<T> forward<T>(const DenoiserParams<T>&, const Tensor3<T>&, int, TraceHandle<T>&);         \
    template void backward<T>(const DenoiserParams<T>&, const TraceHandle<T>&, const Tensor3<T>&, std::span<T>); \
    template std::vector<T> backward<T>(const DenoiserParams<T>&, const Tensor3<T>&, int, const Tensor3<T>&);  \
    template void optimizer_step<T>(DenoiserParams<T>&, std::span<const T>, OptimizerState<T>&);

FLOWFORGE_INSTANTIATE(float)
FLOWFORGE_INSTANTIATE(double)

#undef FLOWFORGE_INSTANTIATE

}  // namespace flowforge
