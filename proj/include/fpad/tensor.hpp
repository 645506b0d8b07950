#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "fpad/error.hpp"
#include "fpad/rng.hpp"

namespace fpad {

// Dense row-major tensor of 64-bit floats. Immutable by convention once it
// leaves the op that produced it.
struct Tensor {
    std::vector<std::size_t> dims;
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::vector<std::size_t> d, std::vector<double> values)
        : dims(std::move(d)), v(std::move(values)) {
        if (count(dims) != v.size()) throw ContractViolation("Tensor: dims do not match value count");
    }

    static std::size_t count(const std::vector<std::size_t>& dims) {
        std::size_t n = 1;
        for (std::size_t d : dims) {
            if (d == 0) throw ContractViolation("Tensor: zero extent");
            n *= d;
        }
        return n;
    }

    static Tensor zeros(std::vector<std::size_t> dims) {
        const std::size_t n = count(dims);
        return Tensor(std::move(dims), std::vector<double>(n, 0.0));
    }

    static Tensor full(std::vector<std::size_t> dims, double value) {
        const std::size_t n = count(dims);
        return Tensor(std::move(dims), std::vector<double>(n, value));
    }

    std::size_t size() const { return v.size(); }

    std::size_t rows() const {
        if (dims.size() != 2) throw ContractViolation("Tensor::rows: not a matrix");
        return dims[0];
    }
    std::size_t cols() const {
        if (dims.size() != 2) throw ContractViolation("Tensor::cols: not a matrix");
        return dims[1];
    }

    double& at(std::size_t r, std::size_t c) { return v[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return v[r * cols() + c]; }

    double* row_ptr(std::size_t r) { return v.data() + r * dims.back(); }
    const double* row_ptr(std::size_t r) const { return v.data() + r * dims.back(); }

    bool same_dims(const Tensor& other) const { return dims == other.dims; }

    bool all_finite() const {
        for (double x : v) {
            if (!std::isfinite(x)) return false;
        }
        return true;
    }
};

inline void require_finite(const Tensor& t, const char* what) {
    if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

inline double vector_norm(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) acc += x * x;
    return std::sqrt(acc);
}

inline std::vector<double> random_unit_vector(std::size_t dim, Rng& rng) {
    std::vector<double> v(dim);
    for (;;) {
        for (auto& x : v) x = rng.normal();
        const double n = vector_norm(v);
        if (n > 1e-8) {
            for (auto& x : v) x /= n;
            return v;
        }
    }
}

}  // namespace fpad
