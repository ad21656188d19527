#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "kgrl/tensor.hpp"

namespace kgrl::ad {

class Node;
using Value = std::shared_ptr<Node>;

// One vertex of the reverse-mode tape. Ops build nodes that hold the forward
// value plus a closure accumulating into the inputs' grad buffers. Leaves are
// long-lived (owned by a ParameterStore); interior nodes die with the graph.
class Node {
public:
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    bool is_leaf = false;
    std::string name;  // parameter name for leaves (diagnostics)
    std::vector<Value> inputs;
    std::function<void(Node&)> backprop;
    // Distance from the nearest subgradient branch point (relu zero, clamp
    // bound, min/max tie) at this node; +inf for smooth ops. Lets gradient
    // checks detect and sidestep kinks.
    double kink_distance = std::numeric_limits<double>::infinity();

    std::size_t size() const { return value.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
    std::size_t cols() const;
    void ensure_grad();
    void zero_grad();
};

// While a guard is alive, ops produce value-only nodes with no inputs and no
// backward closures (rollout-time forward passes).
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

// ---- graph construction ----
Value constant(TensorBuf t);
Value constant_scalar(double v);
Value leaf(TensorBuf t, std::string name);  // trainable parameter node

// ---- arithmetic ----
Value add(const Value& a, const Value& b);           // same shape
Value add_rowvec(const Value& a, const Value& b);    // [N,M] + [M]
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);           // elementwise
Value mul_col(const Value& a, const Value& c);       // [N,M] * [N,1] broadcast
Value scale(const Value& a, double s);
Value add_scalar(const Value& a, double s);
Value neg(const Value& a);
Value matmul(const Value& a, const Value& b);        // [N,K]x[K,M]
Value matmul_bt(const Value& a, const Value& b);     // [N,K]x[M,K]^T -> [N,M]

// ---- nonlinearities ----
Value relu(const Value& a);
Value tanh_(const Value& a);
Value exp_(const Value& a);
Value log_(const Value& a);
Value square(const Value& a);
Value softplus(const Value& a);
Value clamp(const Value& a, double lo, double hi);   // zero grad outside
Value minimum(const Value& a, const Value& b);
Value maximum(const Value& a, const Value& b);

// ---- rowwise / reductions ----
Value softmax_rows(const Value& a);
Value log_softmax_rows(const Value& a);
Value logsumexp_rows(const Value& a);                // [N,M] -> [N,1]
Value sum_cols(const Value& a);                      // [N,M] -> [N,1]
Value sum_all(const Value& a);                       // -> [1]
Value mean_all(const Value& a);                      // -> [1]

// ---- structure ----
Value gather_cols(const Value& a, const std::vector<int>& idx);  // [N,M],[N] -> [N,1]
Value slice_cols(const Value& a, std::size_t c0, std::size_t c1);
Value concat_cols(const std::vector<Value>& parts);
Value reshape(const Value& a, std::vector<std::size_t> shape);
Value detach(const Value& a);

// 2-D convolution over [N,C,H,W] with weight [F,C,kh,kw], bias [F].
Value conv2d(const Value& x, const Value& w, const Value& b, std::size_t stride);

// Scalar-output reverse pass. Seeds root grad with 1 and walks the graph in
// reverse topological order. Throws UsageError if the root is not scalar.
void backward(const Value& root);

// Minimum kink_distance over the recorded graph reached from root. Requires
// a grad-enabled forward pass (no-grad graphs keep no edges to walk).
double min_kink_distance(const Value& root);

}  // namespace kgrl::ad
