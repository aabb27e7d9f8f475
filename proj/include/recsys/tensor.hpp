#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "recsys/error.hpp"

namespace recsys {

// Production builds run 32-bit scalars; defining RECSYS_REAL_DOUBLE switches
// the whole library to 64-bit for gradient verification.
#if defined(RECSYS_REAL_DOUBLE)
using Real = double;
#else
using Real = float;
#endif

// Row-major dense tensor. Rank is 1 or 2 everywhere in this model.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<Real> v;

    Tensor() = default;
    explicit Tensor(std::size_t n) : shape{n}, v(n, Real(0)) {}
    Tensor(std::size_t r, std::size_t c) : shape{r, c}, v(r * c, Real(0)) {}

    std::size_t size() const { return v.size(); }
    std::size_t rows() const { return shape.empty() ? 0 : shape[0]; }
    std::size_t cols() const { return shape.size() < 2 ? (shape.empty() ? 0 : 1) : shape[1]; }

    Real& at(std::size_t i) { return v[i]; }
    Real at(std::size_t i) const { return v[i]; }
    Real& at(std::size_t r, std::size_t c) { return v[r * cols() + c]; }
    Real at(std::size_t r, std::size_t c) const { return v[r * cols() + c]; }

    const Real* row(std::size_t r) const { return v.data() + r * cols(); }
    Real* row(std::size_t r) { return v.data() + r * cols(); }

    void fill(Real x) { std::fill(v.begin(), v.end(), x); }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
};

inline Tensor zeros_like(const Tensor& t) {
    Tensor z;
    z.shape = t.shape;
    z.v.assign(t.v.size(), Real(0));
    return z;
}

inline bool all_finite(const Tensor& t) {
    for (Real x : t.v) {
        if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
}

// Dot product with 64-bit accumulation; float inputs widen exactly, so the
// result rounds once instead of per element.
inline double dot(const Real* a, const Real* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    return s;
}

inline double dot(const std::vector<Real>& a, const std::vector<Real>& b) {
    if (a.size() != b.size()) throw ShapeError("dot: size mismatch");
    return dot(a.data(), b.data(), a.size());
}

inline double squared_norm(const std::vector<Real>& a) { return dot(a.data(), a.data(), a.size()); }

}  // namespace recsys
