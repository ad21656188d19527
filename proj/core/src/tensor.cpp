#include "kgrl/tensor.hpp"

#include <cmath>
#include <sstream>

#include "kgrl/errors.hpp"

namespace kgrl {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

TensorBuf::TensorBuf(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != data.size())
        throw ShapeError("TensorBuf: shape " + shape_to_string(shape) + " does not match " +
                         std::to_string(data.size()) + " elements");
}

TensorBuf TensorBuf::zeros(std::vector<std::size_t> s) {
    const std::size_t n = shape_numel(s);
    return TensorBuf(std::move(s), std::vector<double>(n, 0.0));
}

TensorBuf TensorBuf::scalar(double v) { return TensorBuf({1}, {v}); }

TensorBuf TensorBuf::vector(std::vector<double> d) {
    std::vector<std::size_t> s{d.size()};
    return TensorBuf(std::move(s), std::move(d));
}

std::size_t TensorBuf::rows() const { return shape.empty() ? 1 : shape.front(); }

std::size_t TensorBuf::cols() const {
    std::size_t c = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
}

void TensorBuf::validate(const std::string& what) const {
    if (shape_numel(shape) != data.size())
        throw ShapeError(what + ": shape/data mismatch");
    for (double v : data)
        if (!std::isfinite(v)) throw NumericError(what + ": non-finite entry");
}

}  // namespace kgrl
