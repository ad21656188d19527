#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "kgrl/autodiff.hpp"
#include "kgrl/rng.hpp"
#include "kgrl/tensor.hpp"

namespace kgrl {

enum class Act { relu, tanh, none };

Act act_from_string(const std::string& s);
std::string act_to_string(Act a);

// Fully-connected stack: input_dim -> hidden widths -> output_dim.
struct MLPSpec {
    std::size_t input_dim = 0;
    std::vector<std::pair<std::size_t, Act>> hidden;
    std::size_t output_dim = 0;
    Act output_activation = Act::none;

    void validate() const;  // throws ConfigError
};

struct ConvLayerSpec {
    std::size_t filters = 0;
    std::size_t kernel = 0;
    std::size_t stride = 1;
};

// Image encoder: exactly three conv layers then one fully-connected head.
// `extra_inputs` scalars (e.g. an inventory flag) are concatenated to the
// flattened conv features before the head.
struct ConvEncoderSpec {
    std::size_t in_channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::array<ConvLayerSpec, 3> layers{};
    std::size_t head_width = 0;
    std::size_t extra_inputs = 0;
    Act conv_activation = Act::relu;
    Act head_activation = Act::relu;

    void validate() const;
    std::size_t flat_dim() const;  // conv output elements per sample
};

// Owner of every trainable leaf plus the optimizer state. One writer at a
// time; rollout readers hold the shared leaf values immutably between steps.
class ParameterStore {
public:
    // Registers a new parameter initialized to `init`. Throws UsageError on
    // duplicate names.
    ad::Value create(const std::string& name, TensorBuf init);
    ad::Value get(const std::string& name) const;  // throws UsageError if absent
    bool contains(const std::string& name) const;
    std::vector<std::string> names() const;  // insertion-independent (sorted)
    std::size_t scalar_count() const;

    void zero_grad();

    // One adaptive-moment update over every parameter with beta = (0.9,
    // 0.999), eps = 1e-8. Throws NumericError naming the parameter if a
    // gradient or updated value is non-finite. Parameters whose grad buffer
    // was never touched this step are treated as zero-gradient.
    void adam_step(double lr);

    std::map<std::string, TensorBuf> snapshot() const;
    // Overwrites values of existing parameters; shapes must match. Unknown
    // names are rejected. Optimizer moments reset for the loaded entries.
    void load(const std::map<std::string, TensorBuf>& values);

private:
    struct Slot {
        ad::Value param;
        std::vector<double> m, v;
    };
    std::map<std::string, Slot> slots_;
    std::uint64_t step_ = 0;
};

// Orthogonal [rows, cols] matrix (semi-orthogonal when rectangular) scaled
// by `gain`, from a QR factorization of a Gaussian draw.
TensorBuf orthogonal_init(std::size_t rows, std::size_t cols, double gain, CounterRng& rng);

// Rows drawn uniformly on the unit sphere in R^dim.
TensorBuf unit_sphere_rows(std::size_t rows, std::size_t dim, CounterRng& rng);

double gain_for(Act a);  // sqrt(2) for relu, 1 otherwise

// A multilayer perceptron bound to parameters "<prefix>.w<i>"/"<prefix>.b<i>"
// in a store. Creates and initializes the parameters when absent (orthogonal
// weights, zero biases); reuses them when present (e.g. after a blob load).
class Mlp {
public:
    Mlp(std::string prefix, MLPSpec spec, ParameterStore& params, CounterRng& rng);

    ad::Value forward(const ad::Value& x) const;  // x: [N, input_dim]
    const MLPSpec& spec() const { return spec_; }
    const std::string& prefix() const { return prefix_; }

private:
    std::string prefix_;
    MLPSpec spec_;
    std::vector<ad::Value> ws_, bs_;
    std::vector<Act> acts_;
};

// Conv stack + head bound to "<prefix>.conv<i>.w/b" and "<prefix>.head.w/b".
class ConvEncoder {
public:
    ConvEncoder(std::string prefix, ConvEncoderSpec spec, ParameterStore& params,
                CounterRng& rng);

    // img: [N, in_channels, height, width]; extra: [N, extra_inputs] or null
    // when the spec declares none. Returns [N, head_width].
    ad::Value forward(const ad::Value& img, const ad::Value& extra = nullptr) const;
    const ConvEncoderSpec& spec() const { return spec_; }

private:
    std::string prefix_;
    ConvEncoderSpec spec_;
    std::array<ad::Value, 3> conv_w_, conv_b_;
    ad::Value head_w_, head_b_;
};

// A [rows, dim] table of trainable embeddings, rows starting on the unit
// sphere. Used for the per-knowledge key vectors.
class EmbeddingTable {
public:
    EmbeddingTable(const std::string& name, std::size_t rows, std::size_t dim,
                   ParameterStore& params, CounterRng& rng);

    ad::Value all() const { return table_; }
    std::size_t rows() const { return rows_; }
    std::size_t dim() const { return dim_; }

private:
    ad::Value table_;
    std::size_t rows_, dim_;
};

// Value-only forward pass through already-registered parameters (throws
// UsageError when the prefix is unbound). Convenience for tests and tools.
TensorBuf forward(const MLPSpec& spec, ParameterStore& params, const TensorBuf& input,
                  const std::string& prefix = "mlp");

struct GradCheckResult {
    double max_rel_error = 0.0;
    bool kink_flagged = false;  // a branch point sat within the probe step
    int perturbations = 0;      // jitter rounds applied to clear the kink
};

// Central-difference audit of d loss / d theta for every element of every
// parameter. `loss_fn` must rebuild the scalar loss from current parameter
// values. When the recorded graph passes within 10h of a relu/clamp/min/max
// branch point the check point is jittered and re-evaluated (the original
// values are restored afterwards). Relative error uses
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult gradient_check(ParameterStore& params,
                               const std::function<ad::Value()>& loss_fn, double h = 1e-5,
                               CounterRng* jitter_rng = nullptr);

}  // namespace kgrl
