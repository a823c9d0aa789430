#pragma once

#include <algorithm>
#include <cstddef>
#include <string>
#include <vector>

#include "sidemoe/errors.hpp"

namespace sidemoe {

// Analytic byte accounting for training memory: activation set, activation
// derivative set, weights, optimizer state. Closed-form, not an allocator
// probe.

// Per-layer pre-activation dimensions and weight element counts.
struct NetworkShape {
    std::vector<std::size_t> pre_activation_dims; // dim(z_i) per layer
    std::vector<std::size_t> weight_counts;       // weight elements per layer
    double reduction = 1.0;                       // r >= 1

    void validate() const {
        if (reduction < 1.0) throw ConfigError("NetworkShape: reduction must be >= 1");
        for (const std::size_t d : pre_activation_dims)
            if (d == 0) throw ConfigError("NetworkShape: dims must be positive");
    }

    std::size_t activation_elements() const {
        std::size_t acc = 0;
        for (const std::size_t d : pre_activation_dims) acc += d;
        return acc;
    }

    std::size_t weight_elements() const {
        std::size_t acc = 0;
        for (const std::size_t w : weight_counts) acc += w;
        return acc;
    }
};

// Bits per element for each storage class.
struct PrecisionMap {
    int frozen_weight_bits = 8;    // quantized backbone
    int layer_norm_bits = 32;      // trainable backbone LayerNorm
    int side_weight_bits = 16;     // side network parameters
    int activation_bits = 32;      // cached activations and derivatives
    double optimizer_copies = 2.0; // adaptive-moment state per trainable param
    int optimizer_bits = 32;

    void validate() const {
        for (const int b :
             {frozen_weight_bits, layer_norm_bits, side_weight_bits, activation_bits, optimizer_bits}) {
            if (b != 4 && b != 8 && b != 16 && b != 32 && b != 64)
                throw ConfigError("PrecisionMap: bits must be one of {4, 8, 16, 32, 64}");
        }
        if (optimizer_copies < 0) throw ConfigError("PrecisionMap: optimizer_copies must be >= 0");
    }
};

inline double bytes_for(std::size_t elements, int bits) {
    return static_cast<double>(elements) * static_cast<double>(bits) / 8.0;
}

// Itemized budget. Weight storage is reported separately from the
// backpropagation set (activations + activation derivatives); totals include
// everything.
struct MemoryBudget {
    double weight_bytes = 0.0;
    double activation_bytes = 0.0;
    double derivative_bytes = 0.0;
    double optimizer_bytes = 0.0;

    double backprop_bytes() const { return activation_bytes + derivative_bytes; }
    double total_bytes() const {
        return weight_bytes + activation_bytes + derivative_bytes + optimizer_bytes;
    }

    MemoryBudget& operator+=(const MemoryBudget& o) {
        weight_bytes += o.weight_bytes;
        activation_bytes += o.activation_bytes;
        derivative_bytes += o.derivative_bytes;
        optimizer_bytes += o.optimizer_bytes;
        return *this;
    }
};

// Full backpropagation footprint of a shape: |{a}| and |{sigma'}| share the
// same element count, sum of dim(z_i) over layers. Weight bytes use the side
// weight class; optimizer state covers every weight element.
inline MemoryBudget backprop_memory(const NetworkShape& shape, const PrecisionMap& prec) {
    shape.validate();
    prec.validate();
    MemoryBudget b;
    const std::size_t act = shape.activation_elements();
    b.activation_bytes = bytes_for(act, prec.activation_bits);
    b.derivative_bytes = bytes_for(act, prec.activation_bits);
    b.weight_bytes = bytes_for(shape.weight_elements(), prec.side_weight_bits);
    b.optimizer_bytes = bytes_for(shape.weight_elements(), prec.optimizer_bits) *
                        prec.optimizer_copies;
    return b;
}

// Shape of the width-reduced side branch: every dimension divided by r
// (floor, minimum 1) and weight counts by r^2 since both ends of each matrix
// shrink.
inline NetworkShape side_shape(const NetworkShape& backbone, double r) {
    if (r < 1.0) throw ConfigError("side_shape: r must be >= 1");
    NetworkShape s = backbone;
    s.reduction = r;
    for (std::size_t& d : s.pre_activation_dims)
        d = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(d) / r));
    for (std::size_t& w : s.weight_counts)
        w = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(w) / (r * r)));
    return s;
}

inline MemoryBudget side_memory(const NetworkShape& backbone, double r, const PrecisionMap& prec) {
    return backprop_memory(side_shape(backbone, r), prec);
}

// The best any scheme that still backpropagates through the backbone can do:
// half of the full activation + derivative footprint.
inline double petl_floor(const NetworkShape& shape, const PrecisionMap& prec) {
    return backprop_memory(shape, prec).backprop_bytes() / 2.0;
}

// Parameter counts per precision class.
struct WeightClassCounts {
    std::size_t frozen_quantized = 0;
    std::size_t layer_norm = 0;
    std::size_t side = 0;
};

struct WeightBytesReport {
    double bytes = 0.0;
    double full_precision_bytes = 0.0; // all classes at 32-bit
    double savings_ratio = 0.0;        // 1 - bytes / full_precision_bytes
};

inline WeightBytesReport mixed_precision_weights(const WeightClassCounts& counts,
                                                 const PrecisionMap& prec) {
    prec.validate();
    WeightBytesReport r;
    r.bytes = bytes_for(counts.frozen_quantized, prec.frozen_weight_bits) +
              bytes_for(counts.layer_norm, prec.layer_norm_bits) +
              bytes_for(counts.side, prec.side_weight_bits);
    const std::size_t total = counts.frozen_quantized + counts.layer_norm + counts.side;
    r.full_precision_bytes = bytes_for(total, 32);
    r.savings_ratio =
        r.full_precision_bytes > 0.0 ? 1.0 - r.bytes / r.full_precision_bytes : 0.0;
    return r;
}

} // namespace sidemoe
