#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "sidemoe/tensor.hpp"

namespace sidemoe {

// How the refined scores are turned into combination weights after top-k
// selection: divide the selected entries by their sum, or softmax them.
enum class PostMask { Renormalize, Softmax };

inline PostMask post_mask_from_string(const std::string& s) {
    if (s == "renormalize") return PostMask::Renormalize;
    if (s == "softmax") return PostMask::Softmax;
    throw ConfigError("post_mask: expected renormalize|softmax, got '" + s + "'");
}

inline const char* to_string(PostMask m) {
    return m == PostMask::Renormalize ? "renormalize" : "softmax";
}

// Linear gating projection: d x N plus optional per-expert bias.
struct GateWeights {
    Tensor projection; // d x N
    Tensor bias;       // N (empty means no bias)

    std::size_t experts() const { return projection.cols(); }
};

// One learnable D-wide row per expert, matched against the backbone's
// salient token.
struct RepresentativeTokens {
    Tensor tokens; // N x D

    std::size_t experts() const { return tokens.rows(); }
};

// Everything the combine step and the diagnostics need for one token.
struct RoutingDecision {
    std::vector<int> experts;        // k selected, ranked by refined score
    std::vector<double> weights;     // k combination weights, sum to 1
    std::vector<double> raw_scores;  // g(x), length N
    std::vector<double> correlation; // c, length N
    std::vector<double> refined;     // g', length N

    int top1() const { return experts.empty() ? -1 : experts[0]; }
};

namespace detail {

// Ascending-order accumulation: exactly invariant under permutations of the
// inputs, which makes routing outputs permutation-equivariant to the bit.
inline double ordered_sum(std::span<const double> values) {
    std::vector<double> tmp(values.begin(), values.end());
    std::sort(tmp.begin(), tmp.end());
    double acc = 0.0;
    for (const double v : tmp) acc += v;
    return acc;
}

inline std::vector<double> masked_softmax(std::span<const double> scores) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const double s : scores) mx = std::max(mx, s);
    if (mx == -std::numeric_limits<double>::infinity())
        throw NumericError("softmax: all entries -inf, no valid distribution");
    std::vector<double> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = std::exp(scores[i] - mx);
    const double denom = ordered_sum(out);
    for (double& v : out) v /= denom;
    return out;
}

// indices of the k largest entries, ranked descending, ties to lower index
inline std::vector<int> topk_indices(std::span<const double> scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 1 || k > n)
        throw ConfigError("top-k: k must be in [1, " + std::to_string(n) + "], got " +
                          std::to_string(k));
    std::vector<int> order(scores.size());
    for (int i = 0; i < n; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    order.resize(k);
    return order;
}

} // namespace detail

// raw gating scores g(x) = x^T W (+ bias)
inline std::vector<double> gate_scores(std::span<const double> x, const GateWeights& gate) {
    const std::size_t d = gate.projection.rows();
    const std::size_t n = gate.projection.cols();
    if (x.size() != d) {
        throw DimensionError("gate_scores: token width " + std::to_string(x.size()) +
                             " vs projection rows " + std::to_string(d));
    }
    if (gate.bias.size() != 0 && gate.bias.size() != n)
        throw DimensionError("gate_scores: bias length must equal expert count");
    std::vector<double> scores(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += x[i] * gate.projection.at(i, j);
        scores[j] = acc + (gate.bias.size() ? gate.bias.data[j] : 0.0);
    }
    return scores;
}

// keep the top-k entries verbatim, set the rest to -inf
inline std::vector<double> topk_mask(std::span<const double> scores, int k) {
    const std::vector<int> keep = detail::topk_indices(scores, k);
    std::vector<double> masked(scores.size(), -std::numeric_limits<double>::infinity());
    for (const int i : keep) masked[static_cast<std::size_t>(i)] = scores[static_cast<std::size_t>(i)];
    return masked;
}

// G(x) = softmax over the masked scores; unselected entries are exactly 0
inline std::vector<double> routing_probs(std::span<const double> scores, int k) {
    const std::vector<double> masked = topk_mask(scores, k);
    return detail::masked_softmax(masked);
}

// c = softmax(h . r_i over experts i): the similarity between the backbone's
// salient token and each expert's representative token, normalized to a
// distribution.
inline std::vector<double> correlation_scores(std::span<const double> salient,
                                              const RepresentativeTokens& reps) {
    const std::size_t n = reps.tokens.rows();
    const std::size_t d = reps.tokens.cols();
    if (salient.size() != d) {
        throw DimensionError("correlation_scores: salient width " +
                             std::to_string(salient.size()) + " vs representative width " +
                             std::to_string(d));
    }
    std::vector<double> sims(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += salient[j] * reps.tokens.at(i, j);
        sims[i] = acc;
    }
    return detail::masked_softmax(sims);
}

// g' = (softmax(g(x)) + c) / 2, then top-k selection over g' and weight
// normalization per the configured post-mask mode.
inline RoutingDecision refined_routing(std::span<const double> x,
                                       std::span<const double> salient, const GateWeights& gate,
                                       const RepresentativeTokens& reps, int k,
                                       PostMask post_mask = PostMask::Renormalize) {
    if (gate.experts() != reps.experts())
        throw DimensionError("refined_routing: gate and representative expert counts differ");
    RoutingDecision d;
    d.raw_scores = gate_scores(x, gate);
    d.correlation = correlation_scores(salient, reps);
    const std::vector<double> probs = detail::masked_softmax(d.raw_scores);
    d.refined.resize(probs.size());
    for (std::size_t i = 0; i < probs.size(); ++i)
        d.refined[i] = 0.5 * (probs[i] + d.correlation[i]);

    d.experts = detail::topk_indices(d.refined, k);
    std::vector<double> selected(d.experts.size());
    for (std::size_t j = 0; j < d.experts.size(); ++j)
        selected[j] = d.refined[static_cast<std::size_t>(d.experts[j])];
    if (post_mask == PostMask::Renormalize) {
        const double denom = detail::ordered_sum(selected);
        if (denom <= 0.0) throw NumericError("refined_routing: selected mass not positive");
        d.weights.resize(selected.size());
        for (std::size_t j = 0; j < selected.size(); ++j) d.weights[j] = selected[j] / denom;
    } else {
        d.weights = detail::masked_softmax(selected);
    }
    return d;
}

// Weighted sum of the selected experts only; unselected experts are never
// invoked.
inline Tensor dispatch_combine(const Tensor& x, const RoutingDecision& decision,
                               std::span<const std::function<Tensor(const Tensor&)>> experts) {
    if (decision.experts.empty()) throw ConfigError("dispatch_combine: empty decision");
    Tensor out;
    for (std::size_t j = 0; j < decision.experts.size(); ++j) {
        const int e = decision.experts[j];
        if (e < 0 || static_cast<std::size_t>(e) >= experts.size())
            throw IndexError("dispatch_combine: expert index out of range");
        Tensor y = experts[static_cast<std::size_t>(e)](x);
        if (j == 0) {
            out = Tensor(y.shape);
        } else if (!out.same_shape(y)) {
            throw DimensionError("dispatch_combine: expert output shape mismatch " +
                                 Tensor::shape_string(out.shape) + " vs " +
                                 Tensor::shape_string(y.shape));
        }
        for (std::size_t i = 0; i < out.size(); ++i)
            out.data[i] += decision.weights[j] * y.data[i];
    }
    return out;
}

// N * sum_i f_i * P_i with f_i the fraction of tokens whose top-1 expert is
// i and P_i the mean probability mass the selection distribution puts on i.
// Perfect balance gives 1, full collapse gives N.
inline double load_balancing_loss(std::span<const RoutingDecision> decisions,
                                  std::size_t n_experts) {
    if (decisions.empty()) throw ConfigError("load_balancing_loss: no routed tokens");
    std::vector<double> top1_share(n_experts, 0.0);
    std::vector<double> mean_prob(n_experts, 0.0);
    for (const RoutingDecision& d : decisions) {
        top1_share[static_cast<std::size_t>(d.top1())] += 1.0;
        for (std::size_t i = 0; i < n_experts; ++i) mean_prob[i] += d.refined[i];
    }
    const double inv = 1.0 / static_cast<double>(decisions.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < n_experts; ++i)
        acc += (top1_share[i] * inv) * (mean_prob[i] * inv);
    return static_cast<double>(n_experts) * acc;
}

} // namespace sidemoe
