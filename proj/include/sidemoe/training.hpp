#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sidemoe/side_network.hpp"

namespace sidemoe {

struct Sample {
    Tensor tokens; // T x D
    int label = 0;
    int cluster = -1; // generator-side latent, kept for diagnostics
};

struct LossBreakdown {
    double total = 0.0;
    double task = 0.0;
    double balance = 0.0;
};

struct BatchForward {
    Var task_loss;
    Var balance_loss;                       // valid only for moe networks
    std::vector<RoutingDecision> decisions; // pooled over samples, blocks, tokens
    std::vector<int> predictions;           // argmax per sample
};

// Forward the whole batch on one tape: frozen backbone (dequantized weights
// as constants, LayerNorm as shared leaves) feeding the side branch. The
// balance term is N * sum_i f_i * P_i where f comes from the pooled
// straight-through selections and P is the mean refined distribution.
inline BatchForward batch_forward(GradTape& tape, const BackboneStub& backbone,
                                  const SideNetwork& side, const BackboneVars& bv,
                                  const SideVars& sv, std::span<const Sample> batch) {
    if (batch.empty()) throw ConfigError("batch_forward: empty batch");
    BatchForward out;
    Var task_acc;
    Var refined_acc;
    std::size_t refined_rows = 0;
    for (const Sample& sample : batch) {
        const Var input = tape.leaf(sample.tokens);
        const BackboneOut bb = backbone_forward(tape, backbone, bv, input);
        SideForwardOut sf = side_forward(tape, side, sv, input, bb);

        const Tensor& logits = tape.value(sf.logits);
        int best = 0;
        for (std::size_t c = 1; c < logits.size(); ++c)
            if (logits.data[c] > logits.data[best]) best = static_cast<int>(c);
        out.predictions.push_back(best);

        const Var ce = tape.cross_entropy(sf.logits, {sample.label});
        task_acc = task_acc.valid() ? tape.add(task_acc, ce) : ce;
        for (const Var r : sf.refined_rows) {
            refined_acc = refined_acc.valid() ? tape.add(refined_acc, r) : r;
            ++refined_rows;
        }
        out.decisions.insert(out.decisions.end(),
                             std::make_move_iterator(sf.decisions.begin()),
                             std::make_move_iterator(sf.decisions.end()));
    }
    out.task_loss = tape.scale(task_acc, 1.0 / static_cast<double>(batch.size()));

    if (side.cfg.moe) {
        // P_i: mean refined mass; the per-block rows are already token means
        const Var mean_refined =
            tape.scale(refined_acc, 1.0 / static_cast<double>(refined_rows));
        const std::size_t n = side.cfg.experts;
        std::vector<double> coeff(n, 0.0);
        for (const RoutingDecision& d : out.decisions)
            coeff[static_cast<std::size_t>(d.top1())] += 1.0;
        const double scale = static_cast<double>(n) / static_cast<double>(out.decisions.size());
        for (double& c : coeff) c *= scale;
        out.balance_loss = tape.weighted_sum(mean_refined, std::move(coeff));
    }
    return out;
}

// One optimizer update on total = alpha * cross_entropy + beta * balance.
// A dense (non-moe) side network has no routing to balance; its balance term
// is the perfect-balance floor 1, kept so loss values line up with a
// single-expert moe run.
inline LossBreakdown train_step(BackboneStub& backbone, SideNetwork& side,
                                std::span<const Sample> batch, AdamW& opt, double alpha,
                                double beta) {
    GradTape tape;
    const BackboneVars bv = backbone_leaves(tape, backbone);
    const SideVars sv = side_leaves(tape, side);
    const BatchForward fwd = batch_forward(tape, backbone, side, bv, sv, batch);

    LossBreakdown loss;
    loss.task = tape.value(fwd.task_loss).data[0];
    if (!std::isfinite(loss.task)) throw NumericError("train_step: task loss is not finite");

    Var total = tape.scale(fwd.task_loss, alpha);
    if (side.cfg.moe) {
        loss.balance = tape.value(fwd.balance_loss).data[0];
        if (!std::isfinite(loss.balance))
            throw NumericError("train_step: balance loss is not finite");
        total = tape.add(total, tape.scale(fwd.balance_loss, beta));
    } else {
        loss.balance = 1.0;
        total = tape.add(total, tape.leaf(Tensor::full({1}, beta * loss.balance)));
    }
    loss.total = tape.value(total).data[0];
    tape.backward(total);

    std::vector<ParamRef> params = trainable_parameters(&backbone, &side);
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    // leaves were created in the same order trainable_parameters walks
    std::size_t li = 0;
    auto take = [&](Var v) { grads.push_back(tape.grad(v)); ++li; };
    for (std::size_t l = 0; l < backbone.cfg.layers; ++l) {
        take(bv.ln_gamma[l]);
        take(bv.ln_beta[l]);
    }
    take(sv.input_down);
    for (std::size_t b = 0; b < side.blocks.size(); ++b) {
        const SideVars::Block& blk = sv.blocks[b];
        take(blk.down);
        take(blk.ln_gamma);
        take(blk.ln_beta);
        take(blk.mix);
        if (side.cfg.moe) {
            take(blk.gate_proj);
            take(blk.gate_bias);
            take(blk.reps);
        }
        for (const auto& e : blk.experts)
            for (const Var v : e) take(v);
    }
    take(sv.head_w);
    take(sv.head_b);
    if (grads.size() != params.size())
        throw DimensionError("train_step: parameter/gradient bookkeeping mismatch");

    opt.step(params, grads);
    return loss;
}

// Per-expert routing summary: top-1 token share f_i and mean probability
// mass P_i, plus the balance loss they imply.
struct RoutingStats {
    std::vector<double> share;
    std::vector<double> mean_prob;
    double balance = 1.0;
};

inline RoutingStats routing_stats(std::span<const RoutingDecision> decisions,
                                  std::size_t n_experts) {
    RoutingStats s;
    s.share.assign(n_experts, 0.0);
    s.mean_prob.assign(n_experts, 0.0);
    if (decisions.empty()) return s;
    for (const RoutingDecision& d : decisions) {
        s.share[static_cast<std::size_t>(d.top1())] += 1.0;
        for (std::size_t i = 0; i < n_experts; ++i) s.mean_prob[i] += d.refined[i];
    }
    const double inv = 1.0 / static_cast<double>(decisions.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < n_experts; ++i) {
        s.share[i] *= inv;
        s.mean_prob[i] *= inv;
        acc += s.share[i] * s.mean_prob[i];
    }
    s.balance = static_cast<double>(n_experts) * acc;
    return s;
}

struct EvalResult {
    double accuracy = 0.0;
    double mean_loss = 0.0;
    double balance = 0.0; // load-balancing loss over the evaluated tokens
    RoutingStats routing;
};

inline EvalResult evaluate(const BackboneStub& backbone, const SideNetwork& side,
                           std::span<const Sample> samples) {
    if (samples.empty()) throw ConfigError("evaluate: empty sample set");
    GradTape tape;
    const BackboneVars bv = backbone_leaves(tape, backbone);
    const SideVars sv = side_leaves(tape, side);
    const BatchForward fwd = batch_forward(tape, backbone, side, bv, sv, samples);
    EvalResult r;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < samples.size(); ++i)
        if (fwd.predictions[i] == samples[i].label) ++hits;
    r.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
    r.mean_loss = tape.value(fwd.task_loss).data[0];
    if (side.cfg.moe) {
        r.routing = routing_stats(fwd.decisions, side.cfg.experts);
        r.balance = r.routing.balance;
    } else {
        r.balance = 1.0;
    }
    return r;
}

} // namespace sidemoe
