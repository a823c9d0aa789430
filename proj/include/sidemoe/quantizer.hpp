#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string>
#include <vector>

#include "sidemoe/tensor.hpp"

namespace sidemoe {

enum class Rounding { Floor, Nearest };

inline Rounding rounding_from_string(const std::string& s) {
    if (s == "floor") return Rounding::Floor;
    if (s == "nearest") return Rounding::Nearest;
    throw ConfigError("rounding: expected floor|nearest, got '" + s + "'");
}

inline const char* to_string(Rounding r) {
    return r == Rounding::Floor ? "floor" : "nearest";
}

// Affine quantization coefficients for one weight tensor. Codes live in
// [0, 2^bits - 1]; q_min is fixed at 0.
struct QuantParams {
    double scale = 1.0;
    std::int32_t zero_point = 0;
    int bits = 8;
    double r_min = 0.0;
    double r_max = 0.0;

    std::int64_t q_max() const { return (std::int64_t(1) << bits) - 1; }

    bool operator==(const QuantParams&) const = default;
};

// Code storage in the smallest machine width that holds `bits` (1, 2 or 4
// bytes per code, little-endian).
class CodeArray {
public:
    CodeArray() = default;

    CodeArray(std::size_t count, int bits) : count_(count), width_(width_for_bits(bits)) {
        bytes_.assign(count_ * width_, 0);
    }

    static std::size_t width_for_bits(int bits) {
        if (bits <= 8) return 1;
        if (bits <= 16) return 2;
        return 4;
    }

    std::size_t size() const { return count_; }
    std::size_t code_width_bytes() const { return width_; }
    const std::vector<std::uint8_t>& bytes() const { return bytes_; }
    std::vector<std::uint8_t>& bytes() { return bytes_; }

    std::uint32_t get(std::size_t i) const {
        std::uint32_t v = 0;
        std::memcpy(&v, bytes_.data() + i * width_, width_);
        return v;
    }

    void set(std::size_t i, std::uint32_t v) {
        std::memcpy(bytes_.data() + i * width_, &v, width_);
    }

    bool operator==(const CodeArray&) const = default;

private:
    std::size_t count_ = 0;
    std::size_t width_ = 1;
    std::vector<std::uint8_t> bytes_;
};

// Immutable after construction: integer codes plus the affine metadata
// needed to reconstruct approximate weights.
struct QuantizedTensor {
    CodeArray codes;
    QuantParams params;
    std::vector<std::size_t> shape;

    std::size_t size() const { return codes.size(); }
};

// Min-max asymmetric calibration:
//   s = (r_max - r_min) / (2^n - 1)
//   z = clamp(floor(q_max - r_max / s), 0, q_max)
// The observed range is widened to include zero first, the usual asymmetric
// PTQ convention: it keeps z inside [0, q_max] for single-sign tensors
// (otherwise the clamp saturates every code) and makes 0.0 exactly
// representable as code z. A degenerate range (r_max == r_min == 0) falls
// back to s = 1 so the all-zero tensor round-trips exactly.
inline QuantParams calibrate(const Tensor& weights, int bits) {
    if (weights.size() == 0) throw ConfigError("calibrate: empty weight tensor");
    if (bits < 2 || bits > 32) {
        throw ConfigError("calibrate: bitwidth must be in [2, 32], got " + std::to_string(bits));
    }
    double r_min = 0.0;
    double r_max = 0.0;
    for (const double w : weights.data) {
        if (!std::isfinite(w)) throw NumericError("calibrate: non-finite weight");
        r_min = std::min(r_min, w);
        r_max = std::max(r_max, w);
    }
    QuantParams p;
    p.bits = bits;
    p.r_min = r_min;
    p.r_max = r_max;
    const double q_max = static_cast<double>(p.q_max());
    p.scale = (r_max > r_min) ? (r_max - r_min) / q_max : 1.0;
    const double z_raw = std::floor(q_max - r_max / p.scale);
    p.zero_point = static_cast<std::int32_t>(std::clamp(z_raw, 0.0, q_max));
    return p;
}

// code = clamp(floor(w / s) + z, 0, 2^n - 1); Nearest replaces floor with
// round-half-away-from-zero.
inline QuantizedTensor quantize(const Tensor& weights, const QuantParams& params,
                                Rounding rounding = Rounding::Floor) {
    if (params.scale <= 0.0) throw ConfigError("quantize: scale must be positive");
    QuantizedTensor q;
    q.params = params;
    q.shape = weights.shape;
    q.codes = CodeArray(weights.size(), params.bits);
    const double q_max = static_cast<double>(params.q_max());
    for (std::size_t i = 0; i < weights.size(); ++i) {
        const double scaled = weights.data[i] / params.scale;
        const double stepped =
            rounding == Rounding::Floor ? std::floor(scaled) : std::round(scaled);
        const double code = std::clamp(stepped + params.zero_point, 0.0, q_max);
        q.codes.set(i, static_cast<std::uint32_t>(code));
    }
    return q;
}

// w_d = s * (code - z)
inline Tensor dequantize(const QuantizedTensor& q) {
    Tensor out(q.shape);
    for (std::size_t i = 0; i < q.size(); ++i) {
        out.data[i] = q.params.scale *
                      (static_cast<double>(q.codes.get(i)) - q.params.zero_point);
    }
    return out;
}

// mean squared residual between the original weights and their dequantized
// reconstruction
inline double quantization_error(const Tensor& original, const QuantizedTensor& q) {
    if (original.shape != q.shape) {
        throw DimensionError("quantization_error: shape mismatch " +
                             Tensor::shape_string(original.shape) + " vs " +
                             Tensor::shape_string(q.shape));
    }
    if (original.size() == 0) throw DimensionError("quantization_error: empty tensor");
    double acc = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const double w_d = q.params.scale *
                           (static_cast<double>(q.codes.get(i)) - q.params.zero_point);
        const double r = original.data[i] - w_d;
        acc += r * r;
    }
    return acc / static_cast<double>(original.size());
}

inline double max_abs_residual(const Tensor& original, const QuantizedTensor& q) {
    const Tensor deq = dequantize(q);
    double worst = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i)
        worst = std::max(worst, std::abs(original.data[i] - deq.data[i]));
    return worst;
}

} // namespace sidemoe
