#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace kgrl {

// Dense row-major buffer of 64-bit reals. Shape invariant: product(shape) ==
// data.size(). Serialization narrows to 32-bit (see blob.hpp).
struct TensorBuf {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    TensorBuf() = default;
    TensorBuf(std::vector<std::size_t> s, std::vector<double> d);
    static TensorBuf zeros(std::vector<std::size_t> s);
    static TensorBuf scalar(double v);
    static TensorBuf vector(std::vector<double> d);

    std::size_t size() const { return data.size(); }
    std::size_t rows() const;  // first dim (1 for scalars)
    std::size_t cols() const;  // product of trailing dims

    // Throws ShapeError / NumericError if the invariants fail.
    void validate(const std::string& what) const;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

}  // namespace kgrl
