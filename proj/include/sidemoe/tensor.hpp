#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "sidemoe/errors.hpp"
#include "sidemoe/rng.hpp"

namespace sidemoe {

// Row-major dense array of doubles. Only 1-D and 2-D shapes are exercised;
// kernels keep a fixed accumulation order so identical inputs always produce
// identical bytes.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
        data.assign(element_count(shape), 0.0);
    }

    Tensor(std::vector<std::size_t> s, std::vector<double> values)
        : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != element_count(shape)) {
            throw DimensionError("Tensor: data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_string(shape));
        }
    }

    static std::size_t element_count(const std::vector<std::size_t>& s) {
        std::size_t n = 1;
        for (const std::size_t d : s) n *= d;
        return n;
    }

    static std::string shape_string(const std::vector<std::size_t>& s) {
        std::ostringstream os;
        os << "[";
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
        os << "]";
        return os.str();
    }

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<std::size_t> s, double value) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), value);
        return t;
    }

    static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> values) {
        return Tensor({r, c}, std::move(values));
    }

    static Tensor vector_of(std::vector<double> values) {
        const std::size_t n = values.size();
        return Tensor({n}, std::move(values));
    }

    static Tensor random_normal(std::vector<std::size_t> s, Rng& rng, double mu = 0.0,
                                double sigma = 1.0) {
        Tensor t(std::move(s));
        for (double& v : t.data) v = rng.normal(mu, sigma);
        return t;
    }

    std::size_t size() const { return data.size(); }
    std::size_t ndim() const { return shape.size(); }

    // 1-D tensors act as a single row in all row-wise kernels
    std::size_t rows() const { return ndim() == 2 ? shape[0] : (ndim() == 1 ? 1 : 0); }
    std::size_t cols() const { return ndim() == 2 ? shape[1] : (ndim() == 1 ? shape[0] : 0); }

    double& at(std::size_t i) { return data[i]; }
    double at(std::size_t i) const { return data[i]; }
    double& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols(), cols()}; }

    bool same_shape(const Tensor& other) const { return shape == other.shape; }

    bool all_finite() const {
        for (const double v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw DimensionError(std::string(op) + ": shape mismatch " +
                             Tensor::shape_string(a.shape) + " vs " +
                             Tensor::shape_string(b.shape));
    }
}

// --- forward kernels -------------------------------------------------------

// C = A * B. i-k-j loop order for cache-friendly row traversal; every c_ij
// still accumulates over ascending k, so results are bit-deterministic.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " + Tensor::shape_string(a.shape) +
                             " vs " + Tensor::shape_string(b.shape));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({m, n});
    const double* pa = a.data.data();
    const double* pb = b.data.data();
    double* pc = c.data.data();
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < k; ++t) {
            const double aik = pa[i * k + t];
            const double* brow = pb + t * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return c;
}

inline Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2) throw DimensionError("transpose: expected 2-D tensor");
    Tensor t({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t.at(j, i) = a.at(i, j);
    return t;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
    return out;
}

inline Tensor scale(const Tensor& a, double factor) {
    Tensor out = a;
    for (double& v : out.data) v *= factor;
    return out;
}

// Per-row mean/variance normalization followed by affine gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t cols = x.cols();
    if (gamma.size() != cols || beta.size() != cols) {
        throw DimensionError("layer_norm: gamma/beta length must equal row width " +
                             std::to_string(cols));
    }
    Tensor out = x;
    const std::size_t rows = x.ndim() == 2 ? x.rows() : 1;
    for (std::size_t r = 0; r < rows; ++r) {
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) mean += x.data[r * cols + c];
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = x.data[r * cols + c] - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < cols; ++c) {
            const double norm = (x.data[r * cols + c] - mean) * inv;
            out.data[r * cols + c] = norm * gamma.data[c] + beta.data[c];
        }
    }
    return out;
}

// Softmax along the last axis. -inf entries map to exactly 0; a row of only
// -inf has no valid distribution and is rejected.
inline Tensor softmax_rows(const Tensor& x) {
    Tensor out = x;
    const std::size_t cols = x.cols();
    const std::size_t rows = x.ndim() == 2 ? x.rows() : 1;
    if (cols == 0) throw DimensionError("softmax: empty axis");
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, x.data[r * cols + c]);
        if (mx == -std::numeric_limits<double>::infinity()) {
            throw NumericError("softmax: all entries -inf, no valid distribution");
        }
        double denom = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double e = std::exp(x.data[r * cols + c] - mx);
            out.data[r * cols + c] = e;
            denom += e;
        }
        for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] /= denom;
    }
    return out;
}

// Axis-selectable wrapper: 2-D tensors may normalize down columns instead.
inline Tensor softmax(const Tensor& x, int axis) {
    const int last = x.ndim() <= 1 ? 0 : 1;
    if (axis == last) return softmax_rows(x);
    if (x.ndim() == 2 && axis == 0) return transpose(softmax_rows(transpose(x)));
    throw ConfigError("softmax: invalid axis " + std::to_string(axis) + " for " +
                      Tensor::shape_string(x.shape));
}

inline double gelu_scalar(double x) {
    return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475244));
}

inline double gelu_grad_scalar(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475244));
    const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014326779;
    return cdf + x * pdf;
}

// Mean negative log-softmax probability of the true class.
inline double cross_entropy(const Tensor& logits, std::span<const int> labels) {
    const std::size_t rows = logits.rows();
    const std::size_t cols = logits.cols();
    if (labels.size() != rows) throw DimensionError("cross_entropy: one label per row required");
    const Tensor probs = softmax_rows(logits);
    double loss = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        const int label = labels[r];
        if (label < 0 || static_cast<std::size_t>(label) >= cols) {
            throw IndexError("cross_entropy: label " + std::to_string(label) +
                             " outside class count " + std::to_string(cols));
        }
        loss -= std::log(probs.at(r, static_cast<std::size_t>(label)));
    }
    return loss / static_cast<double>(rows);
}

// Max relative disagreement between an analytic gradient and central finite
// differences of f at params, step h.
inline double finite_difference_check(const std::function<double(std::span<const double>)>& f,
                                      std::span<const double> params,
                                      std::span<const double> analytic_grad, double h) {
    if (h <= 0.0) throw ConfigError("finite_difference_check: h must be positive");
    if (params.size() != analytic_grad.size()) {
        throw DimensionError("finite_difference_check: gradient length mismatch");
    }
    std::vector<double> work(params.begin(), params.end());
    double worst = 0.0;
    for (std::size_t i = 0; i < work.size(); ++i) {
        const double saved = work[i];
        work[i] = saved + h;
        const double up = f(work);
        work[i] = saved - h;
        const double down = f(work);
        work[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw NumericError("finite_difference_check: non-finite objective");
        }
        const double numeric = (up - down) / (2.0 * h);
        const double analytic = analytic_grad[i];
        const double rel = std::abs(analytic - numeric) /
                           (std::abs(analytic) + std::abs(numeric) + 1e-12);
        worst = std::max(worst, rel);
    }
    return worst;
}

} // namespace sidemoe
