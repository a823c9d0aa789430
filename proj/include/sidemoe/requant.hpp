#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sidemoe/quantizer.hpp"
#include "sidemoe/rng.hpp"
#include "sidemoe/tensor.hpp"

namespace sidemoe {

// Re-quantization cadence: a fraction p of all frozen weights is re-sampled
// every `interval` epochs, for total_epochs / interval events per run.
struct RequantSchedule {
    double p = 0.10;
    int interval = 10;
    int total_epochs = 50;
    std::uint64_t rng_seed = 0;

    int events() const { return interval > 0 ? total_epochs / interval : 0; }
    bool is_event_epoch(int epoch) const { return epoch >= 1 && epoch % interval == 0; }

    void validate() const {
        if (!(p > 0.0 && p <= 1.0))
            throw ConfigError("requant: p must be in (0, 1], got " + std::to_string(p));
        if (interval < 1) throw ConfigError("requant: interval must be >= 1");
        if (total_epochs < 0) throw ConfigError("requant: total_epochs must be >= 0");
    }
};

// Per-event Gaussian drift parameters.
struct NoiseParams {
    double mu = 0.0;
    double sigma = 0.0;
    int event_index = 0;

    void validate() const {
        if (!(std::isfinite(mu) && std::isfinite(sigma)) || sigma < 0.0)
            throw NumericError("NoiseParams: mu/sigma must be finite, sigma >= 0");
    }
};

// Snapshot of a group's dequantized weights at the last re-quantization event
// plus the element-wise deltas the live weights have accumulated since.
struct DriftRecord {
    Tensor snapshot;
    std::vector<double> deltas;

    void observe(const Tensor& live) {
        require_same_shape(snapshot, live, "DriftRecord::observe");
        deltas.resize(live.size());
        for (std::size_t i = 0; i < live.size(); ++i)
            deltas[i] = live.data[i] - snapshot.data[i];
    }

    void reset(Tensor new_snapshot) {
        snapshot = std::move(new_snapshot);
        deltas.assign(snapshot.size(), 0.0);
    }
};

// One frozen weight tensor: the evolving full-precision values, their
// quantized form, and the drift bookkeeping between events.
struct WeightGroup {
    std::string name;
    Tensor live;
    QuantizedTensor quant;
    DriftRecord drift;

    double error() const { return quantization_error(live, quant); }
};

inline WeightGroup make_weight_group(std::string name, Tensor weights, int bits,
                                     Rounding rounding = Rounding::Floor) {
    WeightGroup g;
    g.name = std::move(name);
    g.quant = quantize(weights, calibrate(weights, bits), rounding);
    g.drift.reset(dequantize(g.quant));
    g.live = std::move(weights);
    return g;
}

struct ElementRef {
    std::size_t group = 0;
    std::size_t index = 0;

    bool operator<(const ElementRef& o) const {
        return group != o.group ? group < o.group : index < o.index;
    }
};

// Uniform sample without replacement of ceil(p * U) elements across all
// groups, via partial Fisher-Yates over the flattened index space. Result is
// sorted so downstream iteration order is deterministic.
inline std::vector<ElementRef> sample_subset(std::span<const std::size_t> group_sizes, double p,
                                             Rng& rng) {
    if (!(p > 0.0 && p <= 1.0))
        throw ConfigError("sample_subset: p must be in (0, 1], got " + std::to_string(p));
    std::size_t total = 0;
    for (const std::size_t s : group_sizes) total += s;
    if (total == 0) throw ConfigError("sample_subset: empty weight set");

    const std::size_t count =
        std::min(total, static_cast<std::size_t>(std::ceil(p * static_cast<double>(total))));
    std::vector<std::size_t> pool(total);
    for (std::size_t i = 0; i < total; ++i) pool[i] = i;
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = i + rng.index(total - i);
        std::swap(pool[i], pool[j]);
    }

    std::vector<ElementRef> refs(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t flat = pool[i];
        std::size_t g = 0;
        while (flat >= group_sizes[g]) {
            flat -= group_sizes[g];
            ++g;
        }
        refs[i] = {g, flat};
    }
    std::sort(refs.begin(), refs.end());
    return refs;
}

inline std::vector<ElementRef> sample_subset(const std::vector<WeightGroup>& groups, double p,
                                             Rng& rng) {
    std::vector<std::size_t> sizes(groups.size());
    for (std::size_t i = 0; i < groups.size(); ++i) sizes[i] = groups[i].live.size();
    return sample_subset(sizes, p, rng);
}

// Gaussian maximum-likelihood fit of the observed drift: mu = sample mean,
// sigma = population standard deviation. Fewer than two observations carry
// no spread information and yield (0, 0).
inline NoiseParams fit_noise(const DriftRecord& drift, int event_index = 0) {
    NoiseParams noise;
    noise.event_index = event_index;
    if (drift.deltas.size() < 2) return noise;
    double mean = 0.0;
    for (const double d : drift.deltas) mean += d;
    mean /= static_cast<double>(drift.deltas.size());
    double var = 0.0;
    for (const double d : drift.deltas) var += (d - mean) * (d - mean);
    var /= static_cast<double>(drift.deltas.size());
    noise.mu = mean;
    noise.sigma = std::sqrt(var);
    noise.validate();
    return noise;
}

// w' = w + eps, eps ~ N(mu, sigma^2) i.i.d. per element; input left intact.
inline Tensor perturb(const Tensor& weights, const NoiseParams& noise, Rng& rng) {
    noise.validate();
    Tensor out = weights;
    if (noise.mu == 0.0 && noise.sigma == 0.0) return out;
    for (double& w : out.data) w += rng.normal(noise.mu, noise.sigma);
    return out;
}

// Event log row: what a single group re-quantization did.
struct RequantEvent {
    int epoch = 0;
    std::string group;
    double error_before = 0.0;
    double error_after = 0.0;
    double noise_mu = 0.0;
    double noise_sigma = 0.0;
    double scale = 0.0;
    std::int32_t zero_point = 0;
};

// Re-quantize one group: perturb the given sampled elements with the fitted
// noise, recalibrate scale/zero-point over the whole perturbed group, and
// re-emit codes. Quantization error is reported against the unperturbed live
// weights both before and after.
inline RequantEvent requantize_group(WeightGroup& group, std::span<const std::size_t> sampled,
                                     const NoiseParams& noise, int epoch, Rng& rng,
                                     Rounding rounding = Rounding::Floor) {
    RequantEvent ev;
    ev.epoch = epoch;
    ev.group = group.name;
    ev.error_before = group.error();
    ev.noise_mu = noise.mu;
    ev.noise_sigma = noise.sigma;

    Tensor perturbed = group.live;
    if (noise.mu != 0.0 || noise.sigma != 0.0) {
        for (const std::size_t i : sampled) perturbed.data[i] += rng.normal(noise.mu, noise.sigma);
    }
    const QuantParams params = calibrate(perturbed, group.quant.params.bits);
    group.quant = quantize(perturbed, params, rounding);
    group.drift.reset(dequantize(group.quant));

    ev.error_after = group.error();
    ev.scale = params.scale;
    ev.zero_point = params.zero_point;
    return ev;
}

// Single-group schedule step. Off-event epochs leave the group untouched.
// The sampled fraction is drawn from this group alone.
inline std::optional<RequantEvent> requantize_step(WeightGroup& group,
                                                   const RequantSchedule& schedule,
                                                   const NoiseParams& noise, int epoch, Rng& rng,
                                                   Rounding rounding = Rounding::Floor) {
    if (epoch < 1) throw ConfigError("requantize_step: epoch must be >= 1");
    schedule.validate();
    if (!schedule.is_event_epoch(epoch)) return std::nullopt;

    const std::size_t sizes[1] = {group.live.size()};
    const std::vector<ElementRef> refs = sample_subset(sizes, schedule.p, rng);
    std::vector<std::size_t> sampled(refs.size());
    for (std::size_t i = 0; i < refs.size(); ++i) sampled[i] = refs[i].index;
    return requantize_group(group, sampled, noise, epoch, rng, rounding);
}

// Whole-backbone event: sample p of all elements, then refresh every group
// that received at least one sampled element. Noise is fitted per group from
// its drift record.
inline std::vector<RequantEvent> requantize_all(std::vector<WeightGroup>& groups,
                                                const RequantSchedule& schedule, int epoch,
                                                Rng& rng, Rounding rounding = Rounding::Floor) {
    schedule.validate();
    std::vector<RequantEvent> events;
    if (!schedule.is_event_epoch(epoch)) return events;

    const int event_index = epoch / schedule.interval;
    const std::vector<ElementRef> refs = sample_subset(groups, schedule.p, rng);

    std::size_t cursor = 0;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::vector<std::size_t> sampled;
        while (cursor < refs.size() && refs[cursor].group == g) {
            sampled.push_back(refs[cursor].index);
            ++cursor;
        }
        if (sampled.empty()) continue;
        groups[g].drift.observe(groups[g].live);
        const NoiseParams noise = fit_noise(groups[g].drift, event_index);
        events.push_back(requantize_group(groups[g], sampled, noise, epoch, rng, rounding));
    }
    return events;
}

// Aggregate quantization error over all groups, element-weighted.
inline double total_quantization_error(const std::vector<WeightGroup>& groups) {
    double acc = 0.0;
    std::size_t total = 0;
    for (const WeightGroup& g : groups) {
        acc += g.error() * static_cast<double>(g.live.size());
        total += g.live.size();
    }
    return total > 0 ? acc / static_cast<double>(total) : 0.0;
}

} // namespace sidemoe
