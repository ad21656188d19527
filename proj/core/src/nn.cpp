#include "kgrl/nn.hpp"

#include <algorithm>
#include <cmath>

#include "kgrl/errors.hpp"

namespace kgrl {

using ad::Value;

Act act_from_string(const std::string& s) {
    if (s == "relu") return Act::relu;
    if (s == "tanh") return Act::tanh;
    if (s == "none") return Act::none;
    throw ConfigError("unknown activation '" + s + "'");
}

std::string act_to_string(Act a) {
    switch (a) {
        case Act::relu: return "relu";
        case Act::tanh: return "tanh";
        case Act::none: return "none";
    }
    return "none";
}

void MLPSpec::validate() const {
    if (input_dim == 0 || output_dim == 0)
        throw ConfigError("mlp: input and output dims must be positive");
    for (const auto& [w, a] : hidden) {
        (void)a;
        if (w == 0) throw ConfigError("mlp: hidden width must be positive");
    }
}

void ConvEncoderSpec::validate() const {
    if (in_channels == 0 || height == 0 || width == 0)
        throw ConfigError("conv encoder: input dims must be positive");
    if (head_width == 0) throw ConfigError("conv encoder: head width must be positive");
    std::size_t h = height, w = width;
    for (const auto& l : layers) {
        if (l.filters == 0 || l.kernel == 0 || l.stride == 0)
            throw ConfigError("conv encoder: layer sizes must be positive");
        if (h < l.kernel || w < l.kernel)
            throw ConfigError("conv encoder: kernel exceeds remaining spatial extent");
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
    }
}

std::size_t ConvEncoderSpec::flat_dim() const {
    std::size_t h = height, w = width;
    for (const auto& l : layers) {
        h = (h - l.kernel) / l.stride + 1;
        w = (w - l.kernel) / l.stride + 1;
    }
    return layers.back().filters * h * w;
}

Value ParameterStore::create(const std::string& name, TensorBuf init) {
    if (slots_.count(name)) throw UsageError("parameter '" + name + "' already exists");
    init.validate("parameter '" + name + "'");
    Slot slot;
    slot.param = ad::leaf(std::move(init), name);
    slot.m.assign(slot.param->size(), 0.0);
    slot.v.assign(slot.param->size(), 0.0);
    auto [it, ok] = slots_.emplace(name, std::move(slot));
    (void)ok;
    return it->second.param;
}

Value ParameterStore::get(const std::string& name) const {
    auto it = slots_.find(name);
    if (it == slots_.end()) throw UsageError("parameter '" + name + "' not found");
    return it->second.param;
}

bool ParameterStore::contains(const std::string& name) const { return slots_.count(name) > 0; }

std::vector<std::string> ParameterStore::names() const {
    std::vector<std::string> out;
    out.reserve(slots_.size());
    for (const auto& [name, slot] : slots_) {
        (void)slot;
        out.push_back(name);
    }
    return out;
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, slot] : slots_) {
        (void)name;
        n += slot.param->size();
    }
    return n;
}

void ParameterStore::zero_grad() {
    for (auto& [name, slot] : slots_) {
        (void)name;
        slot.param->ensure_grad();
        slot.param->zero_grad();
    }
}

void ParameterStore::adam_step(double lr) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (auto& [name, slot] : slots_) {
        ad::Node& p = *slot.param;
        p.ensure_grad();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double g = p.grad[i];
            if (!std::isfinite(g))
                throw NumericError("adam_step: non-finite gradient in '" + name +
                                   "' at element " + std::to_string(i));
            slot.m[i] = beta1 * slot.m[i] + (1.0 - beta1) * g;
            slot.v[i] = beta2 * slot.v[i] + (1.0 - beta2) * g * g;
            p.value[i] -= lr * (slot.m[i] / bc1) / (std::sqrt(slot.v[i] / bc2) + eps);
            if (!std::isfinite(p.value[i]))
                throw NumericError("adam_step: parameter '" + name +
                                   "' became non-finite at element " + std::to_string(i));
        }
    }
}

std::map<std::string, TensorBuf> ParameterStore::snapshot() const {
    std::map<std::string, TensorBuf> out;
    for (const auto& [name, slot] : slots_)
        out.emplace(name, TensorBuf(slot.param->shape, slot.param->value));
    return out;
}

void ParameterStore::load(const std::map<std::string, TensorBuf>& values) {
    for (const auto& [name, buf] : values) {
        auto it = slots_.find(name);
        if (it == slots_.end())
            throw UsageError("load: parameter '" + name + "' not registered");
        ad::Node& p = *it->second.param;
        if (p.shape != buf.shape)
            throw ShapeError("load: parameter '" + name + "' shape " +
                             shape_to_string(p.shape) + " vs blob " +
                             shape_to_string(buf.shape));
        p.value = buf.data;
        std::fill(it->second.m.begin(), it->second.m.end(), 0.0);
        std::fill(it->second.v.begin(), it->second.v.end(), 0.0);
    }
}

namespace {

// Thin-Q Householder factorization of an m x n Gaussian draw (m >= n);
// columns are orthonormal, sign-fixed by the R diagonal.
std::vector<double> thin_q(std::size_t m, std::size_t n, CounterRng& rng) {
    std::vector<double> a(m * n);
    for (auto& v : a) v = rng.normal();
    std::vector<std::vector<double>> vs;  // Householder vectors, length m-k
    std::vector<double> rdiag(n);
    for (std::size_t k = 0; k < n; ++k) {
        double norm = 0.0;
        for (std::size_t i = k; i < m; ++i) norm += a[i * n + k] * a[i * n + k];
        norm = std::sqrt(norm);
        const double x0 = a[k * n + k];
        const double alpha = x0 >= 0.0 ? -norm : norm;
        std::vector<double> v(m - k);
        v[0] = x0 - alpha;
        for (std::size_t i = k + 1; i < m; ++i) v[i - k] = a[i * n + k];
        double vnorm = 0.0;
        for (double t : v) vnorm += t * t;
        vnorm = std::sqrt(vnorm);
        if (vnorm > 1e-300)
            for (double& t : v) t /= vnorm;
        // reflect remaining columns: A -= 2 v (v^T A)
        for (std::size_t j = k; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < m; ++i) dot += v[i - k] * a[i * n + j];
            for (std::size_t i = k; i < m; ++i) a[i * n + j] -= 2.0 * dot * v[i - k];
        }
        rdiag[k] = a[k * n + k];
        vs.push_back(std::move(v));
    }
    // Q = H_0 ... H_{n-1} applied to the thin identity
    std::vector<double> q(m * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) q[j * n + j] = 1.0;
    for (std::size_t k = n; k-- > 0;) {
        const auto& v = vs[k];
        for (std::size_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::size_t i = k; i < m; ++i) dot += v[i - k] * q[i * n + j];
            for (std::size_t i = k; i < m; ++i) q[i * n + j] -= 2.0 * dot * v[i - k];
        }
    }
    for (std::size_t j = 0; j < n; ++j) {
        const double s = rdiag[j] >= 0.0 ? 1.0 : -1.0;
        for (std::size_t i = 0; i < m; ++i) q[i * n + j] *= s;
    }
    return q;
}

}  // namespace

TensorBuf orthogonal_init(std::size_t rows, std::size_t cols, double gain, CounterRng& rng) {
    if (rows == 0 || cols == 0) throw UsageError("orthogonal_init: empty matrix");
    TensorBuf out = TensorBuf::zeros({rows, cols});
    if (rows >= cols) {
        auto q = thin_q(rows, cols, rng);
        for (std::size_t i = 0; i < rows * cols; ++i) out.data[i] = gain * q[i];
    } else {
        auto q = thin_q(cols, rows, rng);  // [cols, rows], orthonormal columns
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) out.data[i * cols + j] = gain * q[j * rows + i];
    }
    return out;
}

TensorBuf unit_sphere_rows(std::size_t rows, std::size_t dim, CounterRng& rng) {
    if (dim == 0) throw UsageError("unit_sphere_rows: dim must be positive");
    TensorBuf out = TensorBuf::zeros({rows, dim});
    for (std::size_t r = 0; r < rows; ++r) {
        double norm = 0.0;
        do {
            norm = 0.0;
            for (std::size_t j = 0; j < dim; ++j) {
                const double g = rng.normal();
                out.data[r * dim + j] = g;
                norm += g * g;
            }
            norm = std::sqrt(norm);
        } while (norm < 1e-12);
        for (std::size_t j = 0; j < dim; ++j) out.data[r * dim + j] /= norm;
    }
    return out;
}

double gain_for(Act a) { return a == Act::relu ? std::sqrt(2.0) : 1.0; }

namespace {

Value bind_or_create(ParameterStore& params, const std::string& name,
                     const std::function<TensorBuf()>& make) {
    if (params.contains(name)) return params.get(name);
    return params.create(name, make());
}

Value apply_act(const Value& x, Act a) {
    switch (a) {
        case Act::relu: return ad::relu(x);
        case Act::tanh: return ad::tanh_(x);
        case Act::none: return x;
    }
    return x;
}

}  // namespace

Mlp::Mlp(std::string prefix, MLPSpec spec, ParameterStore& params, CounterRng& rng)
    : prefix_(std::move(prefix)), spec_(std::move(spec)) {
    spec_.validate();
    std::vector<std::size_t> dims{spec_.input_dim};
    for (const auto& [w, a] : spec_.hidden) {
        dims.push_back(w);
        acts_.push_back(a);
    }
    dims.push_back(spec_.output_dim);
    acts_.push_back(spec_.output_activation);
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const bool last = i + 2 == dims.size();
        const double gain = last ? 1.0 : gain_for(acts_[i]);
        const std::size_t in = dims[i], out = dims[i + 1];
        ws_.push_back(bind_or_create(params, prefix_ + ".w" + std::to_string(i),
                                     [&] { return orthogonal_init(in, out, gain, rng); }));
        bs_.push_back(bind_or_create(params, prefix_ + ".b" + std::to_string(i),
                                     [&] { return TensorBuf::zeros({out}); }));
    }
}

Value Mlp::forward(const Value& x) const {
    if (x->cols() != spec_.input_dim)
        throw ShapeError(prefix_ + ": input has " + std::to_string(x->cols()) +
                         " features, spec wants " + std::to_string(spec_.input_dim));
    Value h = x;
    for (std::size_t i = 0; i < ws_.size(); ++i)
        h = apply_act(ad::add_rowvec(ad::matmul(h, ws_[i]), bs_[i]), acts_[i]);
    return h;
}

ConvEncoder::ConvEncoder(std::string prefix, ConvEncoderSpec spec, ParameterStore& params,
                         CounterRng& rng)
    : prefix_(std::move(prefix)), spec_(std::move(spec)) {
    spec_.validate();
    std::size_t channels = spec_.in_channels;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
        const auto& l = spec_.layers[i];
        const std::string base = prefix_ + ".conv" + std::to_string(i);
        // Orthogonal over the flattened fan-in, reshaped to the kernel.
        conv_w_[i] = bind_or_create(params, base + ".w", [&] {
            TensorBuf flat = orthogonal_init(l.filters, channels * l.kernel * l.kernel,
                                             gain_for(spec_.conv_activation), rng);
            return TensorBuf({l.filters, channels, l.kernel, l.kernel}, std::move(flat.data));
        });
        conv_b_[i] = bind_or_create(params, base + ".b",
                                    [&] { return TensorBuf::zeros({l.filters}); });
        channels = l.filters;
    }
    const std::size_t head_in = spec_.flat_dim() + spec_.extra_inputs;
    head_w_ = bind_or_create(params, prefix_ + ".head.w", [&] {
        return orthogonal_init(head_in, spec_.head_width, gain_for(spec_.head_activation), rng);
    });
    head_b_ = bind_or_create(params, prefix_ + ".head.b",
                             [&] { return TensorBuf::zeros({spec_.head_width}); });
}

Value ConvEncoder::forward(const Value& img, const Value& extra) const {
    if (img->shape.size() != 4 || img->shape[1] != spec_.in_channels ||
        img->shape[2] != spec_.height || img->shape[3] != spec_.width)
        throw ShapeError(prefix_ + ": image shape " + shape_to_string(img->shape) +
                         " does not match the encoder spec");
    const std::size_t n = img->shape[0];
    Value h = img;
    for (std::size_t i = 0; i < spec_.layers.size(); ++i)
        h = apply_act(ad::conv2d(h, conv_w_[i], conv_b_[i], spec_.layers[i].stride),
                      spec_.conv_activation);
    h = ad::reshape(h, {n, spec_.flat_dim()});
    if (spec_.extra_inputs) {
        if (!extra || extra->rows() != n || extra->cols() != spec_.extra_inputs)
            throw ShapeError(prefix_ + ": expected [" + std::to_string(n) + "," +
                             std::to_string(spec_.extra_inputs) + "] extra features");
        h = ad::concat_cols({h, extra});
    } else if (extra) {
        throw ShapeError(prefix_ + ": spec declares no extra features");
    }
    return apply_act(ad::add_rowvec(ad::matmul(h, head_w_), head_b_), spec_.head_activation);
}

EmbeddingTable::EmbeddingTable(const std::string& name, std::size_t rows, std::size_t dim,
                               ParameterStore& params, CounterRng& rng)
    : rows_(rows), dim_(dim) {
    table_ = params.contains(name) ? params.get(name)
                                   : params.create(name, unit_sphere_rows(rows, dim, rng));
    if (table_->shape != std::vector<std::size_t>{rows, dim})
        throw ShapeError("embedding '" + name + "': bound shape " +
                         shape_to_string(table_->shape) + " != requested [" +
                         std::to_string(rows) + "," + std::to_string(dim) + "]");
}

TensorBuf forward(const MLPSpec& spec, ParameterStore& params, const TensorBuf& input,
                  const std::string& prefix) {
    spec.validate();
    if (!params.contains(prefix + ".w0"))
        throw UsageError("forward: no parameters bound under prefix '" + prefix + "'");
    CounterRng unused(0, 0);
    Mlp net(prefix, spec, params, unused);
    const bool batched = input.shape.size() == 2;
    const std::size_t n = batched ? input.shape[0] : 1;
    if (input.size() != n * spec.input_dim)
        throw ShapeError("forward: input shape " + shape_to_string(input.shape) +
                         " does not match input_dim " + std::to_string(spec.input_dim));
    ad::NoGradGuard guard;
    auto x = ad::constant(TensorBuf({n, spec.input_dim}, input.data));
    auto y = net.forward(x);
    if (batched) return TensorBuf({n, spec.output_dim}, y->value);
    return TensorBuf({spec.output_dim}, y->value);
}

GradCheckResult gradient_check(ParameterStore& params,
                               const std::function<ad::Value()>& loss_fn, double h,
                               CounterRng* jitter_rng) {
    CounterRng fallback(0x6b696e6b, 0);
    CounterRng& jr = jitter_rng ? *jitter_rng : fallback;
    GradCheckResult res;

    const auto names = params.names();
    std::map<std::string, std::vector<double>> original;
    for (const auto& nm : names) original[nm] = params.get(nm)->value;

    auto out = loss_fn();
    if (!out || out->size() != 1) throw UsageError("gradient_check: loss must be scalar");
    const double kink_eps = 10.0 * h;
    while (ad::min_kink_distance(out) < kink_eps) {
        res.kink_flagged = true;
        if (++res.perturbations > 8)
            throw NumericError("gradient_check: could not jitter away from a branch point");
        for (const auto& nm : names) {
            auto p = params.get(nm);
            for (auto& v : p->value) v += jr.uniform(-1.0, 1.0) * 1e-2;
        }
        out = loss_fn();
    }

    params.zero_grad();
    ad::backward(out);
    std::map<std::string, std::vector<double>> analytic;
    for (const auto& nm : names) analytic[nm] = params.get(nm)->grad;

    for (const auto& nm : names) {
        auto p = params.get(nm);
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double f1 = loss_fn()->value[0];
            p->value[i] = saved - h;
            const double f0 = loss_fn()->value[0];
            p->value[i] = saved;
            const double numeric = (f1 - f0) / (2.0 * h);
            const double an = analytic[nm][i];
            const double rel = std::abs(an - numeric) /
                               std::max({std::abs(an), std::abs(numeric), 1e-8});
            res.max_rel_error = std::max(res.max_rel_error, rel);
        }
    }

    for (const auto& nm : names) params.get(nm)->value = original[nm];
    params.zero_grad();
    return res;
}

}  // namespace kgrl
