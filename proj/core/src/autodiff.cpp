#include "kgrl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "kgrl/errors.hpp"

namespace kgrl::ad {

namespace {

thread_local bool g_grad_enabled = true;

Value make_node(std::vector<std::size_t> shape, std::vector<double> value,
                std::vector<Value> inputs, std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (g_grad_enabled) {
        for (const auto& in : inputs)
            if (in->requires_grad) {
                n->requires_grad = true;
                break;
            }
        if (n->requires_grad) {
            n->inputs = std::move(inputs);
            n->backprop = std::move(backprop);
        }
    }
    return n;
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
    if (a->shape != b->shape)
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_to_string(a->shape) +
                         " vs " + shape_to_string(b->shape));
}

}  // namespace

std::size_t Node::cols() const {
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
}

void Node::ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

void Node::zero_grad() { std::fill(grad.begin(), grad.end(), 0.0); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

Value constant(TensorBuf t) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(t.shape);
    n->value = std::move(t.data);
    return n;
}

Value constant_scalar(double v) { return constant(TensorBuf::scalar(v)); }

Value leaf(TensorBuf t, std::string name) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(t.shape);
    n->value = std::move(t.data);
    n->requires_grad = true;
    n->is_leaf = true;
    n->name = std::move(name);
    return n;
}

Value add(const Value& a, const Value& b) {
    check_same_shape(a, b, "add");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + b->value[i];
    return make_node(a->shape, std::move(out), {a, b}, [](Node& n) {
        for (int k = 0; k < 2; ++k) {
            Node& in = *n.inputs[k];
            if (!in.requires_grad) continue;
            in.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) in.grad[i] += n.grad[i];
        }
    });
}

Value add_rowvec(const Value& a, const Value& b) {
    const std::size_t cols = a->cols();
    if (b->size() != cols)
        throw ShapeError("add_rowvec: row vector length " + std::to_string(b->size()) +
                         " != cols " + std::to_string(cols));
    std::vector<double> out(a->size());
    const std::size_t rows = a->rows();
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c)
            out[r * cols + c] = a->value[r * cols + c] + b->value[c];
    return make_node(a->shape, std::move(out), {a, b}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) b.grad[c] += n.grad[r * cols + c];
        }
    });
}

Value sub(const Value& a, const Value& b) {
    check_same_shape(a, b, "sub");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] - b->value[i];
    return make_node(a->shape, std::move(out), {a, b}, [](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) b.grad[i] -= n.grad[i];
        }
    });
}

Value mul(const Value& a, const Value& b) {
    check_same_shape(a, b, "mul");
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * b->value[i];
    return make_node(a->shape, std::move(out), {a, b}, [](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i] * b.value[i];
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (std::size_t i = 0; i < n.size(); ++i) b.grad[i] += n.grad[i] * a.value[i];
        }
    });
}

Value mul_col(const Value& a, const Value& c) {
    const std::size_t rows = a->rows(), cols = a->cols();
    if (c->rows() != rows || c->cols() != 1)
        throw ShapeError("mul_col: column must be [N,1] matching rows of a");
    std::vector<double> out(a->size());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j)
            out[r * cols + j] = a->value[r * cols + j] * c->value[r];
    return make_node(a->shape, std::move(out), {a, c}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        Node& c = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < cols; ++j)
                    a.grad[r * cols + j] += n.grad[r * cols + j] * c.value[r];
        }
        if (c.requires_grad) {
            c.ensure_grad();
            for (std::size_t r = 0; r < rows; ++r) {
                double s = 0.0;
                for (std::size_t j = 0; j < cols; ++j)
                    s += n.grad[r * cols + j] * a.value[r * cols + j];
                c.grad[r] += s;
            }
        }
    });
}

Value scale(const Value& a, double s) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * s;
    return make_node(a->shape, std::move(out), {a}, [s](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i] * s;
    });
}

Value add_scalar(const Value& a, double s) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] + s;
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i];
    });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value matmul(const Value& a, const Value& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
        throw ShapeError("matmul: need [N,K]x[K,M], got " + shape_to_string(a->shape) + " x " +
                         shape_to_string(b->shape));
    const std::size_t N = a->shape[0], K = a->shape[1], M = b->shape[1];
    std::vector<double> out(N * M, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t k = 0; k < K; ++k) {
            const double av = a->value[i * K + k];
            const double* brow = &b->value[k * M];
            double* orow = &out[i * M];
            for (std::size_t j = 0; j < M; ++j) orow[j] += av * brow[j];
        }
    return make_node({N, M}, std::move(out), {a, b}, [N, K, M](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    double s = 0.0;
                    const double* grow = &n.grad[i * M];
                    const double* brow = &b.value[k * M];
                    for (std::size_t j = 0; j < M; ++j) s += grow[j] * brow[j];
                    a.grad[i * K + k] += s;
                }
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t k = 0; k < K; ++k) {
                    const double av = a.value[i * K + k];
                    const double* grow = &n.grad[i * M];
                    double* brow = &b.grad[k * M];
                    for (std::size_t j = 0; j < M; ++j) brow[j] += av * grow[j];
                }
        }
    });
}

Value matmul_bt(const Value& a, const Value& b) {
    if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[1])
        throw ShapeError("matmul_bt: need [N,K]x[M,K], got " + shape_to_string(a->shape) +
                         " x " + shape_to_string(b->shape));
    const std::size_t N = a->shape[0], K = a->shape[1], M = b->shape[0];
    std::vector<double> out(N * M, 0.0);
    for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < M; ++j) {
            double s = 0.0;
            const double* arow = &a->value[i * K];
            const double* brow = &b->value[j * K];
            for (std::size_t k = 0; k < K; ++k) s += arow[k] * brow[k];
            out[i * M + j] = s;
        }
    return make_node({N, M}, std::move(out), {a, b}, [N, K, M](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) {
            a.ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < M; ++j) {
                    const double g = n.grad[i * M + j];
                    const double* brow = &b.value[j * K];
                    double* arow = &a.grad[i * K];
                    for (std::size_t k = 0; k < K; ++k) arow[k] += g * brow[k];
                }
        }
        if (b.requires_grad) {
            b.ensure_grad();
            for (std::size_t i = 0; i < N; ++i)
                for (std::size_t j = 0; j < M; ++j) {
                    const double g = n.grad[i * M + j];
                    const double* arow = &a.value[i * K];
                    double* brow = &b.grad[j * K];
                    for (std::size_t k = 0; k < K; ++k) brow[k] += g * arow[k];
                }
        }
    });
}

Value relu(const Value& a) {
    std::vector<double> out(a->size());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a->value[i] > 0.0 ? a->value[i] : 0.0;
        kink = std::min(kink, std::abs(a->value[i]));
    }
    auto n = make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i)
            if (a.value[i] > 0.0) a.grad[i] += n.grad[i];
    });
    n->kink_distance = kink;
    return n;
}

Value tanh_(const Value& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a->value[i]);
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i)
            a.grad[i] += n.grad[i] * (1.0 - n.value[i] * n.value[i]);
    });
}

Value exp_(const Value& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(a->value[i]);
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i] * n.value[i];
    });
}

Value log_(const Value& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a->value[i]);
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i] / a.value[i];
    });
}

Value square(const Value& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a->value[i] * a->value[i];
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i] * 2.0 * a.value[i];
    });
}

Value softplus(const Value& a) {
    std::vector<double> out(a->size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a->value[i];
        out[i] = x > 30.0 ? x : std::log1p(std::exp(x));
    }
    return make_node(a->shape, std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i)
            a.grad[i] += n.grad[i] / (1.0 + std::exp(-a.value[i]));
    });
}

Value clamp(const Value& a, double lo, double hi) {
    std::vector<double> out(a->size());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::clamp(a->value[i], lo, hi);
        kink = std::min({kink, std::abs(a->value[i] - lo), std::abs(a->value[i] - hi)});
    }
    auto n = make_node(a->shape, std::move(out), {a}, [lo, hi](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i)
            if (a.value[i] > lo && a.value[i] < hi) a.grad[i] += n.grad[i];
    });
    n->kink_distance = kink;
    return n;
}

Value minimum(const Value& a, const Value& b) {
    check_same_shape(a, b, "minimum");
    std::vector<double> out(a->size());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::min(a->value[i], b->value[i]);
        kink = std::min(kink, std::abs(a->value[i] - b->value[i]));
    }
    // Subgradient routes to the first argument on ties.
    auto n = make_node(a->shape, std::move(out), {a, b}, [](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) a.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a.value[i] <= b.value[i]) {
                if (a.requires_grad) a.grad[i] += n.grad[i];
            } else if (b.requires_grad) {
                b.grad[i] += n.grad[i];
            }
        }
    });
    n->kink_distance = kink;
    return n;
}

Value maximum(const Value& a, const Value& b) {
    check_same_shape(a, b, "maximum");
    std::vector<double> out(a->size());
    double kink = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = std::max(a->value[i], b->value[i]);
        kink = std::min(kink, std::abs(a->value[i] - b->value[i]));
    }
    auto n = make_node(a->shape, std::move(out), {a, b}, [](Node& n) {
        Node& a = *n.inputs[0];
        Node& b = *n.inputs[1];
        if (a.requires_grad) a.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) {
            if (a.value[i] >= b.value[i]) {
                if (a.requires_grad) a.grad[i] += n.grad[i];
            } else if (b.requires_grad) {
                b.grad[i] += n.grad[i];
            }
        }
    });
    n->kink_distance = kink;
    return n;
}

Value softmax_rows(const Value& a) {
    const std::size_t rows = a->rows(), cols = a->cols();
    std::vector<double> out(a->size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &a->value[r * cols];
        double* o = &out[r * cols];
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < cols; ++j) o[j] /= sum;
    }
    return make_node(a->shape, std::move(out), {a}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &n.value[r * cols];
            const double* g = &n.grad[r * cols];
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j) dot += y[j] * g[j];
            double* ag = &a.grad[r * cols];
            for (std::size_t j = 0; j < cols; ++j) ag[j] += y[j] * (g[j] - dot);
        }
    });
}

Value log_softmax_rows(const Value& a) {
    const std::size_t rows = a->rows(), cols = a->cols();
    std::vector<double> out(a->size());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &a->value[r * cols];
        double* o = &out[r * cols];
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(in[j] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t j = 0; j < cols; ++j) o[j] = in[j] - lse;
    }
    return make_node(a->shape, std::move(out), {a}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* y = &n.value[r * cols];
            const double* g = &n.grad[r * cols];
            double gsum = 0.0;
            for (std::size_t j = 0; j < cols; ++j) gsum += g[j];
            double* ag = &a.grad[r * cols];
            for (std::size_t j = 0; j < cols; ++j) ag[j] += g[j] - std::exp(y[j]) * gsum;
        }
    });
}

Value logsumexp_rows(const Value& a) {
    const std::size_t rows = a->rows(), cols = a->cols();
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* in = &a->value[r * cols];
        double mx = in[0];
        for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < cols; ++j) sum += std::exp(in[j] - mx);
        out[r] = mx + std::log(sum);
    }
    return make_node({rows, 1}, std::move(out), {a}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double g = n.grad[r];
            const double lse = n.value[r];
            const double* in = &a.value[r * cols];
            double* ag = &a.grad[r * cols];
            for (std::size_t j = 0; j < cols; ++j) ag[j] += g * std::exp(in[j] - lse);
        }
    });
}

Value sum_cols(const Value& a) {
    const std::size_t rows = a->rows(), cols = a->cols();
    std::vector<double> out(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) out[r] += a->value[r * cols + j];
    return make_node({rows, 1}, std::move(out), {a}, [rows, cols](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j) a.grad[r * cols + j] += n.grad[r];
    });
}

Value sum_all(const Value& a) {
    double s = 0.0;
    for (double v : a->value) s += v;
    return make_node({1}, {s}, {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += n.grad[0];
    });
}

Value mean_all(const Value& a) {
    const double inv = 1.0 / static_cast<double>(a->size());
    double s = 0.0;
    for (double v : a->value) s += v;
    return make_node({1}, {s * inv}, {a}, [inv](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < a.grad.size(); ++i) a.grad[i] += n.grad[0] * inv;
    });
}

Value gather_cols(const Value& a, const std::vector<int>& idx) {
    const std::size_t rows = a->rows(), cols = a->cols();
    if (idx.size() != rows) throw ShapeError("gather_cols: index count must equal rows");
    std::vector<double> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const int j = idx[r];
        if (j < 0 || static_cast<std::size_t>(j) >= cols)
            throw ShapeError("gather_cols: index out of range");
        out[r] = a->value[r * cols + static_cast<std::size_t>(j)];
    }
    return make_node({rows, 1}, std::move(out), {a}, [rows, cols, idx](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            a.grad[r * cols + static_cast<std::size_t>(idx[r])] += n.grad[r];
    });
}

Value slice_cols(const Value& a, std::size_t c0, std::size_t c1) {
    const std::size_t rows = a->rows(), cols = a->cols();
    if (c0 >= c1 || c1 > cols) throw ShapeError("slice_cols: bad range");
    const std::size_t w = c1 - c0;
    std::vector<double> out(rows * w);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < w; ++j) out[r * w + j] = a->value[r * cols + c0 + j];
    return make_node({rows, w}, std::move(out), {a}, [rows, cols, c0, w](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j)
                a.grad[r * cols + c0 + j] += n.grad[r * w + j];
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no parts");
    const std::size_t rows = parts[0]->rows();
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p->rows() != rows) throw ShapeError("concat_cols: row mismatch");
        total += p->cols();
    }
    std::vector<double> out(rows * total);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p->cols();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < w; ++j) out[r * total + off + j] = p->value[r * w + j];
        off += w;
    }
    std::vector<std::size_t> widths;
    for (const auto& p : parts) widths.push_back(p->cols());
    return make_node({rows, total}, std::move(out), parts, [rows, total, widths](Node& n) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
            Node& p = *n.inputs[k];
            const std::size_t w = widths[k];
            if (p.requires_grad) {
                p.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j)
                        p.grad[r * w + j] += n.grad[r * total + off + j];
            }
            off += w;
        }
    });
}

Value reshape(const Value& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a->size())
        throw ShapeError("reshape: element count mismatch");
    std::vector<double> out = a->value;
    return make_node(std::move(shape), std::move(out), {a}, [](Node& n) {
        Node& a = *n.inputs[0];
        a.ensure_grad();
        for (std::size_t i = 0; i < n.size(); ++i) a.grad[i] += n.grad[i];
    });
}

Value detach(const Value& a) {
    auto n = std::make_shared<Node>();
    n->shape = a->shape;
    n->value = a->value;
    return n;
}

Value conv2d(const Value& x, const Value& w, const Value& b, std::size_t stride) {
    if (x->shape.size() != 4 || w->shape.size() != 4)
        throw ShapeError("conv2d: expects x[N,C,H,W], w[F,C,kh,kw]");
    const std::size_t N = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
    const std::size_t F = w->shape[0], kh = w->shape[2], kw = w->shape[3];
    if (w->shape[1] != C) throw ShapeError("conv2d: channel mismatch");
    if (b->size() != F) throw ShapeError("conv2d: bias size mismatch");
    if (H < kh || W < kw) throw ShapeError("conv2d: kernel larger than input");
    const std::size_t OH = (H - kh) / stride + 1;
    const std::size_t OW = (W - kw) / stride + 1;

    std::vector<double> out(N * F * OH * OW);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t f = 0; f < F; ++f)
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    double s = b->value[f];
                    for (std::size_t c = 0; c < C; ++c)
                        for (std::size_t ky = 0; ky < kh; ++ky) {
                            const double* xr =
                                &x->value[((n * C + c) * H + oy * stride + ky) * W + ox * stride];
                            const double* wr = &w->value[((f * C + c) * kh + ky) * kw];
                            for (std::size_t kx = 0; kx < kw; ++kx) s += xr[kx] * wr[kx];
                        }
                    out[((n * F + f) * OH + oy) * OW + ox] = s;
                }

    return make_node({N, F, OH, OW}, std::move(out), {x, w, b},
                     [N, C, H, W, F, kh, kw, OH, OW, stride](Node& nd) {
        Node& x = *nd.inputs[0];
        Node& w = *nd.inputs[1];
        Node& b = *nd.inputs[2];
        if (x.requires_grad) x.ensure_grad();
        if (w.requires_grad) w.ensure_grad();
        if (b.requires_grad) b.ensure_grad();
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t f = 0; f < F; ++f)
                for (std::size_t oy = 0; oy < OH; ++oy)
                    for (std::size_t ox = 0; ox < OW; ++ox) {
                        const double g = nd.grad[((n * F + f) * OH + oy) * OW + ox];
                        if (g == 0.0) continue;
                        if (b.requires_grad) b.grad[f] += g;
                        for (std::size_t c = 0; c < C; ++c)
                            for (std::size_t ky = 0; ky < kh; ++ky) {
                                const std::size_t xi =
                                    ((n * C + c) * H + oy * stride + ky) * W + ox * stride;
                                const std::size_t wi = ((f * C + c) * kh + ky) * kw;
                                for (std::size_t kx = 0; kx < kw; ++kx) {
                                    if (w.requires_grad)
                                        w.grad[wi + kx] += g * x.value[xi + kx];
                                    if (x.requires_grad)
                                        x.grad[xi + kx] += g * w.value[wi + kx];
                                }
                            }
                    }
    });
}

void backward(const Value& root) {
    if (!root) throw UsageError("backward: null root");
    if (root->size() != 1) throw UsageError("backward: root must be scalar");
    if (!root->requires_grad)
        throw UsageError("backward: no recorded forward pass reaches trainable leaves");

    // Reverse topological order via iterative DFS.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            Node* child = node->inputs[next++].get();
            if (child->requires_grad && !visited.count(child)) {
                visited.insert(child);
                stack.emplace_back(child, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) {
            n->ensure_grad();
            n->backprop(*n);
        }
    }
}

double min_kink_distance(const Value& root) {
    double best = std::numeric_limits<double>::infinity();
    std::unordered_set<Node*> visited;
    std::vector<Node*> stack{root.get()};
    visited.insert(root.get());
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        best = std::min(best, n->kink_distance);
        for (const auto& in : n->inputs)
            if (visited.insert(in.get()).second) stack.push_back(in.get());
    }
    return best;
}

}  // namespace kgrl::ad
