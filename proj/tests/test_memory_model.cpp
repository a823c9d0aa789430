#include <catch2/catch_amalgamated.hpp>

#include "sidemoe/memory_model.hpp"

using namespace sidemoe;

namespace {

NetworkShape toy_shape() {
    NetworkShape s;
    s.pre_activation_dims = {128, 64, 64, 32};
    s.weight_counts = {1024, 512, 512, 256};
    return s;
}

} // namespace

TEST_CASE("backprop memory counts activations and derivatives equally") {
    NetworkShape s;
    s.pre_activation_dims = {100};
    s.weight_counts = {0};
    PrecisionMap prec;
    const MemoryBudget b = backprop_memory(s, prec);
    CHECK(b.activation_bytes == 400.0);
    CHECK(b.derivative_bytes == 400.0);

    NetworkShape doubled = s;
    doubled.pre_activation_dims = {200};
    const MemoryBudget b2 = backprop_memory(doubled, prec);
    CHECK(b2.backprop_bytes() == 2.0 * b.backprop_bytes());
}

TEST_CASE("budgets match a per-layer brute-force summation") {
    const NetworkShape s = toy_shape();
    PrecisionMap prec;
    const MemoryBudget b = backprop_memory(s, prec);

    double activations = 0.0, weights = 0.0;
    for (const std::size_t d : s.pre_activation_dims)
        activations += static_cast<double>(d) * prec.activation_bits / 8.0;
    for (const std::size_t w : s.weight_counts)
        weights += static_cast<double>(w) * prec.side_weight_bits / 8.0;

    CHECK(b.activation_bytes == activations);
    CHECK(b.derivative_bytes == activations);
    CHECK(b.weight_bytes == weights);
    CHECK(b.total_bytes() ==
          b.weight_bytes + b.activation_bytes + b.derivative_bytes + b.optimizer_bytes);
}

TEST_CASE("budgets are additive over shape concatenation") {
    NetworkShape a = toy_shape();
    NetworkShape b;
    b.pre_activation_dims = {48, 16};
    b.weight_counts = {96, 32};
    NetworkShape both = a;
    both.pre_activation_dims.insert(both.pre_activation_dims.end(),
                                    b.pre_activation_dims.begin(), b.pre_activation_dims.end());
    both.weight_counts.insert(both.weight_counts.end(), b.weight_counts.begin(),
                              b.weight_counts.end());
    PrecisionMap prec;
    MemoryBudget sum = backprop_memory(a, prec);
    sum += backprop_memory(b, prec);
    const MemoryBudget joint = backprop_memory(both, prec);
    CHECK(joint.total_bytes() == sum.total_bytes());
    CHECK(joint.backprop_bytes() == sum.backprop_bytes());
}

TEST_CASE("side memory scales with the reduction factor") {
    const NetworkShape s = toy_shape();
    PrecisionMap prec;
    const MemoryBudget base = backprop_memory(s, prec);

    CHECK(side_memory(s, 1.0, prec).backprop_bytes() == base.backprop_bytes());
    // dims all even: exact halving at r = 2
    CHECK(side_memory(s, 2.0, prec).backprop_bytes() == base.backprop_bytes() / 2.0);

    double previous = base.backprop_bytes();
    for (const double r : {2.0, 3.0, 4.0, 8.0}) {
        const double current = side_memory(s, r, prec).backprop_bytes();
        CHECK(current <= previous);
        previous = current;
    }
}

TEST_CASE("PETL floor comparison") {
    const NetworkShape s = toy_shape();
    PrecisionMap prec;
    const double floor_bytes = petl_floor(s, prec);
    CHECK(floor_bytes == backprop_memory(s, prec).backprop_bytes() / 2.0);

    CHECK(side_memory(s, 2.0, prec).backprop_bytes() == floor_bytes);
    for (const double r : {3.0, 4.0, 8.0})
        CHECK(side_memory(s, r, prec).backprop_bytes() < floor_bytes);
}

TEST_CASE("dimension floors bottom out at one") {
    NetworkShape tiny;
    tiny.pre_activation_dims = {3, 1};
    tiny.weight_counts = {9, 1};
    const NetworkShape reduced = side_shape(tiny, 8.0);
    CHECK(reduced.pre_activation_dims == std::vector<std::size_t>{1, 1});
    CHECK(reduced.weight_counts == std::vector<std::size_t>{1, 1});
}

TEST_CASE("mixed precision weight accounting") {
    PrecisionMap prec;

    WeightClassCounts all8;
    all8.frozen_quantized = 1000;
    const WeightBytesReport r8 = mixed_precision_weights(all8, prec);
    CHECK(r8.bytes == 1000.0);
    CHECK(r8.full_precision_bytes == 4000.0);
    CHECK(r8.savings_ratio == 0.75);

    const WeightBytesReport empty = mixed_precision_weights({}, prec);
    CHECK(empty.bytes == 0.0);
    CHECK(empty.savings_ratio == 0.0);

    // element-by-element oracle for a mixed map
    WeightClassCounts mixed;
    mixed.frozen_quantized = 700;
    mixed.layer_norm = 40;
    mixed.side = 300;
    const WeightBytesReport rm = mixed_precision_weights(mixed, prec);
    double oracle = 0.0;
    for (std::size_t i = 0; i < mixed.frozen_quantized; ++i) oracle += 1.0;
    for (std::size_t i = 0; i < mixed.layer_norm; ++i) oracle += 4.0;
    for (std::size_t i = 0; i < mixed.side; ++i) oracle += 2.0;
    CHECK(rm.bytes == oracle);

    // uniform b-bit map saves exactly 1 - b/32
    PrecisionMap uniform16 = prec;
    uniform16.frozen_weight_bits = 16;
    WeightClassCounts only_frozen;
    only_frozen.frozen_quantized = 123;
    CHECK(mixed_precision_weights(only_frozen, uniform16).savings_ratio == 1.0 - 16.0 / 32.0);
}

TEST_CASE("invalid shapes and precision maps are rejected") {
    NetworkShape bad;
    bad.pre_activation_dims = {0};
    bad.weight_counts = {1};
    PrecisionMap prec;
    CHECK_THROWS_AS(backprop_memory(bad, prec), ConfigError);

    NetworkShape s = toy_shape();
    CHECK_THROWS_AS(side_shape(s, 0.5), ConfigError);

    PrecisionMap odd;
    odd.activation_bits = 12;
    CHECK_THROWS_AS(backprop_memory(s, odd), ConfigError);
}
