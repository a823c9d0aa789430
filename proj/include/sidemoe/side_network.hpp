#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "sidemoe/autodiff.hpp"
#include "sidemoe/moe_router.hpp"
#include "sidemoe/optimizer.hpp"
#include "sidemoe/requant.hpp"
#include "sidemoe/rng.hpp"

namespace sidemoe {

// ---------------------------------------------------------------------------
// Frozen backbone stub: L blocks of token mixing + FFN with trainable
// LayerNorm in front. Non-LayerNorm weights live as quantized groups once
// freeze() has run; the forward pass always consumes dequantized values.
// Token mixing is a fixed T x T linear layer by default; single-head
// attention can be enabled for shape realism.
// ---------------------------------------------------------------------------

struct BackboneConfig {
    std::size_t layers = 4;
    std::size_t dim = 32;   // token width D
    std::size_t tokens = 8; // sequence length T
    std::size_t ffn_hidden = 0; // 0 -> dim
    std::size_t classes = 4;    // pretraining head width
    bool attention = false;
    double ln_eps = 1e-5;
    int bits = 8;
    Rounding rounding = Rounding::Floor;

    std::size_t hidden() const { return ffn_hidden ? ffn_hidden : dim; }
};

struct BackboneStub {
    BackboneConfig cfg;

    // trainable, full precision
    std::vector<Tensor> ln_gamma, ln_beta; // per layer, width D

    // non-LayerNorm weights, in a fixed slot order; full precision until
    // freeze(), quantized groups afterwards
    std::vector<std::string> slot_names;
    std::vector<Tensor> fp_weights;    // valid before freeze()
    std::vector<WeightGroup> groups;   // valid after freeze()
    std::vector<Tensor> dequant_cache; // refreshed after every requant event
    bool frozen = false;

    struct LayerSlots {
        int mix = -1, wq = -1, wk = -1, wv = -1, wo = -1;
        int w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    };
    std::vector<LayerSlots> slots;
    int head_w = -1, head_b = -1;

    std::size_t frozen_weight_elements() const {
        std::size_t acc = 0;
        if (frozen)
            for (const WeightGroup& g : groups) acc += g.live.size();
        else
            for (const Tensor& t : fp_weights) acc += t.size();
        return acc;
    }

    std::size_t layer_norm_elements() const {
        std::size_t acc = 0;
        for (const Tensor& t : ln_gamma) acc += t.size();
        for (const Tensor& t : ln_beta) acc += t.size();
        return acc;
    }

    // Quantize every non-LayerNorm weight per-tensor and drop the fp copies
    // into the groups' live slots.
    void freeze() {
        if (frozen) throw ConfigError("BackboneStub: already frozen");
        groups.reserve(fp_weights.size());
        for (std::size_t i = 0; i < fp_weights.size(); ++i) {
            groups.push_back(make_weight_group(slot_names[i], std::move(fp_weights[i]),
                                               cfg.bits, cfg.rounding));
        }
        fp_weights.clear();
        frozen = true;
        refresh_dequant();
    }

    void refresh_dequant() {
        dequant_cache.resize(groups.size());
        for (std::size_t i = 0; i < groups.size(); ++i)
            dequant_cache[i] = dequantize(groups[i].quant);
    }
};

inline BackboneStub make_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
    BackboneStub bb;
    bb.cfg = cfg;
    const std::size_t D = cfg.dim, T = cfg.tokens, H = cfg.hidden();
    bb.slots.resize(cfg.layers);

    auto push = [&](const std::string& name, std::vector<std::size_t> shape, double sigma) {
        Rng rng(derive_seed(seed, "backbone." + name));
        bb.slot_names.push_back(name);
        bb.fp_weights.push_back(Tensor::random_normal(std::move(shape), rng, 0.0, sigma));
        return static_cast<int>(bb.fp_weights.size() - 1);
    };

    for (std::size_t l = 0; l < cfg.layers; ++l) {
        bb.ln_gamma.push_back(Tensor::full({D}, 1.0));
        bb.ln_beta.push_back(Tensor::zeros({D}));
        const std::string p = "layer" + std::to_string(l) + ".";
        BackboneStub::LayerSlots& s = bb.slots[l];
        if (cfg.attention) {
            const double sig = 1.0 / std::sqrt(static_cast<double>(D));
            s.wq = push(p + "wq", {D, D}, sig);
            s.wk = push(p + "wk", {D, D}, sig);
            s.wv = push(p + "wv", {D, D}, sig);
            s.wo = push(p + "wo", {D, D}, sig);
        } else {
            s.mix = push(p + "mix", {T, T}, 1.0 / std::sqrt(static_cast<double>(T)));
        }
        s.w1 = push(p + "ffn_w1", {D, H}, 1.0 / std::sqrt(static_cast<double>(D)));
        s.b1 = push(p + "ffn_b1", {H}, 0.0);
        s.w2 = push(p + "ffn_w2", {H, D}, 1.0 / std::sqrt(static_cast<double>(H)));
        s.b2 = push(p + "ffn_b2", {D}, 0.0);
    }
    bb.head_w = push("head_w", {D, cfg.classes}, 1.0 / std::sqrt(static_cast<double>(D)));
    bb.head_b = push("head_b", {cfg.classes}, 0.0);
    return bb;
}

// Per-forward handles: one leaf per trainable LayerNorm tensor, one constant
// leaf per frozen (or pretraining) weight slot.
struct BackboneVars {
    std::vector<Var> ln_gamma, ln_beta;
    std::vector<Var> weights;
};

inline BackboneVars backbone_leaves(GradTape& tape, const BackboneStub& bb) {
    BackboneVars v;
    for (std::size_t l = 0; l < bb.cfg.layers; ++l) {
        v.ln_gamma.push_back(tape.leaf(bb.ln_gamma[l]));
        v.ln_beta.push_back(tape.leaf(bb.ln_beta[l]));
    }
    const std::size_t n = bb.frozen ? bb.groups.size() : bb.fp_weights.size();
    for (std::size_t i = 0; i < n; ++i)
        v.weights.push_back(tape.leaf(bb.frozen ? bb.dequant_cache[i] : bb.fp_weights[i]));
    return v;
}

struct BackboneOut {
    std::vector<Var> layer_outputs; // T x D per layer
    std::vector<Var> salient;       // 1 x D per layer (position-0 token)
    Var logits;                     // 1 x classes (pretraining head)
};

inline BackboneOut backbone_forward(GradTape& tape, const BackboneStub& bb,
                                    const BackboneVars& v, Var input) {
    const BackboneConfig& cfg = bb.cfg;
    BackboneOut out;
    Var x = input;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        const BackboneStub::LayerSlots& s = bb.slots[l];
        x = tape.layer_norm(x, v.ln_gamma[l], v.ln_beta[l], cfg.ln_eps);
        if (cfg.attention) {
            const Var q = tape.matmul(x, v.weights[s.wq]);
            const Var k = tape.matmul(x, v.weights[s.wk]);
            const Var val = tape.matmul(x, v.weights[s.wv]);
            Var scores = tape.matmul(q, tape.transpose(k));
            scores = tape.scale(scores, 1.0 / std::sqrt(static_cast<double>(cfg.dim)));
            const Var attn = tape.softmax_rows(scores);
            x = tape.add(x, tape.matmul(tape.matmul(attn, val), v.weights[s.wo]));
        } else {
            x = tape.add(x, tape.matmul(v.weights[s.mix], x));
        }
        Var h = tape.gelu(tape.add_row_broadcast(tape.matmul(x, v.weights[s.w1]),
                                                 v.weights[s.b1]));
        x = tape.add(x, tape.add_row_broadcast(tape.matmul(h, v.weights[s.w2]),
                                               v.weights[s.b2]));
        out.layer_outputs.push_back(x);
        out.salient.push_back(tape.gather_rows(x, {0}));
    }
    const Var pooled = tape.gather_rows(x, {0});
    out.logits = tape.add_row_broadcast(tape.matmul(pooled, v.weights[bb.head_w]),
                                        v.weights[bb.head_b]);
    return out;
}

// ---------------------------------------------------------------------------
// Trainable side branch: one down-scaled block per retained backbone layer,
// FFN replaced by the expert bank with salient-token guided routing.
// ---------------------------------------------------------------------------

struct SideConfig {
    std::size_t reduction = 2; // r
    std::size_t experts = 6;   // N
    int top_k = 1;             // k
    PostMask post_mask = PostMask::Renormalize;
    bool moe = true;                      // false -> dense single-FFN blocks
    std::vector<std::size_t> layer_drop;  // backbone layers with no side block
    double ln_eps = 1e-5;
};

struct ExpertFfn {
    Tensor w1, b1, w2, b2; // d x d, d, d x d, d
};

struct SideBlock {
    Tensor down;               // D x d ladder projection
    Tensor ln_gamma, ln_beta;  // d
    Tensor mix;                // T x T
    GateWeights gate;          // d x N (+ bias N), moe only
    RepresentativeTokens reps; // N x D, moe only
    std::vector<ExpertFfn> experts;
};

struct SideNetwork {
    SideConfig cfg;
    std::size_t width = 0;  // d = floor(D / r)
    std::size_t classes = 0;
    Tensor input_down;      // D x d, block-0 initial state
    std::vector<SideBlock> blocks;
    std::vector<std::size_t> taps; // backbone layer feeding each block
    Tensor head_w, head_b;         // d x classes, classes

    std::size_t expert_count() const { return cfg.moe ? cfg.experts : 1; }

    std::size_t parameter_elements() const {
        std::size_t acc = input_down.size() + head_w.size() + head_b.size();
        for (const SideBlock& b : blocks) {
            acc += b.down.size() + b.ln_gamma.size() + b.ln_beta.size() + b.mix.size();
            acc += b.gate.projection.size() + b.gate.bias.size() + b.reps.tokens.size();
            for (const ExpertFfn& e : b.experts)
                acc += e.w1.size() + e.b1.size() + e.w2.size() + e.b2.size();
        }
        return acc;
    }
};

inline SideNetwork make_side_network(const BackboneConfig& backbone, const SideConfig& cfg,
                                     std::size_t classes, std::uint64_t seed) {
    if (cfg.reduction < 1) throw ConfigError("side network: reduction must be >= 1");
    if (cfg.experts < 1) throw ConfigError("side network: expert count must be >= 1");
    if (cfg.top_k < 1 || cfg.top_k > static_cast<int>(cfg.experts))
        throw ConfigError("side network: top_k must be in [1, experts]");

    SideNetwork side;
    side.cfg = cfg;
    side.classes = classes;
    const std::size_t D = backbone.dim, T = backbone.tokens;
    const std::size_t d = std::max<std::size_t>(1, D / cfg.reduction);
    side.width = d;

    auto init = [&](const std::string& name, std::vector<std::size_t> shape, double sigma) {
        Rng rng(derive_seed(seed, "side." + name));
        return sigma == 0.0 ? Tensor::zeros(std::move(shape))
                            : Tensor::random_normal(std::move(shape), rng, 0.0, sigma);
    };

    side.input_down = init("input_down", {D, d}, 1.0 / std::sqrt(static_cast<double>(D)));
    for (std::size_t l = 0; l < backbone.layers; ++l) {
        if (std::find(cfg.layer_drop.begin(), cfg.layer_drop.end(), l) != cfg.layer_drop.end())
            continue;
        side.taps.push_back(l);
        const std::string p = "block" + std::to_string(l) + ".";
        SideBlock b;
        b.down = init(p + "down", {D, d}, 1.0 / std::sqrt(static_cast<double>(D)));
        b.ln_gamma = Tensor::full({d}, 1.0);
        b.ln_beta = Tensor::zeros({d});
        b.mix = init(p + "mix", {T, T}, 1.0 / std::sqrt(static_cast<double>(T)));
        const std::size_t n_experts = cfg.moe ? cfg.experts : 1;
        if (cfg.moe) {
            b.gate.projection = init(p + "gate", {d, cfg.experts}, 0.02);
            b.gate.bias = Tensor::zeros({cfg.experts});
            b.reps.tokens = init(p + "reps", {cfg.experts, D}, 0.02);
        }
        for (std::size_t e = 0; e < n_experts; ++e) {
            const std::string ep = p + "expert" + std::to_string(e) + ".";
            ExpertFfn f;
            f.w1 = init(ep + "w1", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
            f.b1 = Tensor::zeros({d});
            f.w2 = init(ep + "w2", {d, d}, 1.0 / std::sqrt(static_cast<double>(d)));
            f.b2 = Tensor::zeros({d});
            b.experts.push_back(std::move(f));
        }
        side.blocks.push_back(std::move(b));
    }
    side.head_w = init("head_w", {d, classes}, 1.0 / std::sqrt(static_cast<double>(d)));
    side.head_b = Tensor::zeros({classes});
    return side;
}

// Flat view over every trainable tensor, each exactly once: backbone
// LayerNorm gamma/beta plus all side parameters. Frozen quantized weights are
// excluded. Pass nullptr to leave a component out.
inline std::vector<ParamRef> trainable_parameters(BackboneStub* backbone, SideNetwork* side) {
    std::vector<ParamRef> params;
    if (backbone) {
        for (std::size_t l = 0; l < backbone->cfg.layers; ++l) {
            params.push_back({"backbone.ln" + std::to_string(l) + ".gamma",
                              &backbone->ln_gamma[l]});
            params.push_back({"backbone.ln" + std::to_string(l) + ".beta",
                              &backbone->ln_beta[l]});
        }
    }
    if (side) {
        params.push_back({"side.input_down", &side->input_down});
        for (std::size_t i = 0; i < side->blocks.size(); ++i) {
            SideBlock& b = side->blocks[i];
            const std::string p = "side.block" + std::to_string(side->taps[i]) + ".";
            params.push_back({p + "down", &b.down});
            params.push_back({p + "ln.gamma", &b.ln_gamma});
            params.push_back({p + "ln.beta", &b.ln_beta});
            params.push_back({p + "mix", &b.mix});
            if (side->cfg.moe) {
                params.push_back({p + "gate.projection", &b.gate.projection});
                params.push_back({p + "gate.bias", &b.gate.bias});
                params.push_back({p + "reps", &b.reps.tokens});
            }
            for (std::size_t e = 0; e < b.experts.size(); ++e) {
                const std::string ep = p + "expert" + std::to_string(e) + ".";
                params.push_back({ep + "w1", &b.experts[e].w1});
                params.push_back({ep + "b1", &b.experts[e].b1});
                params.push_back({ep + "w2", &b.experts[e].w2});
                params.push_back({ep + "b2", &b.experts[e].b2});
            }
        }
        params.push_back({"side.head_w", &side->head_w});
        params.push_back({"side.head_b", &side->head_b});
    }
    return params;
}

struct SideVars {
    Var input_down;
    struct Block {
        Var down, ln_gamma, ln_beta, mix, gate_proj, gate_bias, reps;
        std::vector<std::array<Var, 4>> experts; // w1, b1, w2, b2
    };
    std::vector<Block> blocks;
    Var head_w, head_b;
};

inline SideVars side_leaves(GradTape& tape, const SideNetwork& side) {
    SideVars v;
    v.input_down = tape.leaf(side.input_down);
    for (const SideBlock& b : side.blocks) {
        SideVars::Block bv;
        bv.down = tape.leaf(b.down);
        bv.ln_gamma = tape.leaf(b.ln_gamma);
        bv.ln_beta = tape.leaf(b.ln_beta);
        bv.mix = tape.leaf(b.mix);
        if (side.cfg.moe) {
            bv.gate_proj = tape.leaf(b.gate.projection);
            bv.gate_bias = tape.leaf(b.gate.bias);
            bv.reps = tape.leaf(b.reps.tokens);
        }
        for (const ExpertFfn& e : b.experts)
            bv.experts.push_back({tape.leaf(e.w1), tape.leaf(e.b1), tape.leaf(e.w2),
                                  tape.leaf(e.b2)});
        v.blocks.push_back(std::move(bv));
    }
    v.head_w = tape.leaf(side.head_w);
    v.head_b = tape.leaf(side.head_b);
    return v;
}

struct SideForwardOut {
    Var logits;                             // 1 x classes
    std::vector<RoutingDecision> decisions; // per block x token (moe only)
    std::vector<Var> refined_rows;          // mean g' per block (1 x N), for the balance term
};

// Expert FFN applied to a row bundle.
inline Var expert_apply(GradTape& tape, const std::array<Var, 4>& w, Var rows) {
    const Var h = tape.gelu(tape.add_row_broadcast(tape.matmul(rows, w[0]), w[1]));
    return tape.add_row_broadcast(tape.matmul(h, w[2]), w[3]);
}

// One forward pass of the side branch over a single sequence. The backbone
// outputs feed each block through its ladder; the block's routing reads that
// layer's salient token. Top-k selection is read off the tape values and
// treated as constant during backward (straight-through selection).
inline SideForwardOut side_forward(GradTape& tape, const SideNetwork& side, const SideVars& v,
                                   Var input_tokens, const BackboneOut& backbone) {
    const std::size_t T = tape.value(input_tokens).rows();
    const std::size_t n_experts = side.expert_count();
    const int k = side.cfg.moe ? side.cfg.top_k : 1;

    SideForwardOut out;
    Var state = tape.matmul(input_tokens, v.input_down);
    for (std::size_t bi = 0; bi < side.blocks.size(); ++bi) {
        const SideVars::Block& bv = v.blocks[bi];
        const std::size_t tap = side.taps[bi];
        state = tape.add(state, tape.matmul(backbone.layer_outputs[tap], bv.down));
        state = tape.layer_norm(state, bv.ln_gamma, bv.ln_beta, side.cfg.ln_eps);
        state = tape.add(state, tape.matmul(bv.mix, state));

        if (!side.cfg.moe) {
            state = tape.add(state, expert_apply(tape, bv.experts[0], state));
            continue;
        }

        // refined routing per token: g' = (softmax(g) + c) / 2
        const Var raw = tape.add_row_broadcast(tape.matmul(state, bv.gate_proj), bv.gate_bias);
        const Var probs = tape.softmax_rows(raw);
        const Var corr = tape.softmax_rows(
            tape.matmul(backbone.salient[tap], tape.transpose(bv.reps)));
        const Var refined = tape.scale(tape.add(probs, tape.repeat_row(corr, T)), 0.5);

        // constant selection from current values
        std::vector<std::vector<int>> selected(T);
        for (std::size_t t = 0; t < T; ++t) {
            selected[t] = detail::topk_indices(tape.value(refined).row(t), k);
            RoutingDecision d;
            d.experts = selected[t];
            const auto raw_row = tape.value(raw).row(t);
            const auto corr_row = tape.value(corr).row(0);
            const auto ref_row = tape.value(refined).row(t);
            d.raw_scores.assign(raw_row.begin(), raw_row.end());
            d.correlation.assign(corr_row.begin(), corr_row.end());
            d.refined.assign(ref_row.begin(), ref_row.end());
            out.decisions.push_back(std::move(d));
        }

        // Combination weights for the expert sum. The default mode keeps the
        // selected g' masses themselves (out = sum over top-k of g'_i E_i):
        // each weight stays below 1, so the gate and representative tokens
        // receive task-loss gradient even at k = 1, where a renormalized
        // weight would be the constant 1. The softmax mode is the literal
        // masked-softmax-of-probabilities reading.
        const Var picked = tape.gather_cols_per_row(refined, selected);
        const Var weights = side.cfg.post_mask == PostMask::Renormalize
                                ? picked
                                : tape.softmax_rows(picked);

        // diagnostics carry the normalized per-token weights of the routing
        // contract (selected masses divided by their sum)
        for (std::size_t t = 0; t < T; ++t) {
            RoutingDecision& d = out.decisions[out.decisions.size() - T + t];
            const auto prow = tape.value(picked).row(t);
            const double mass = GradTape::ordered_sum(prow);
            d.weights.resize(prow.size());
            for (std::size_t j = 0; j < prow.size(); ++j) d.weights[j] = prow[j] / mass;
        }

        // group tokens by expert, run each expert once over its bundle
        Var moe_out;
        for (std::size_t e = 0; e < n_experts; ++e) {
            std::vector<std::size_t> token_rows;
            std::vector<std::size_t> weight_elems;
            for (std::size_t t = 0; t < T; ++t) {
                for (int j = 0; j < k; ++j) {
                    if (selected[t][static_cast<std::size_t>(j)] == static_cast<int>(e)) {
                        token_rows.push_back(t);
                        weight_elems.push_back(t * static_cast<std::size_t>(k) +
                                               static_cast<std::size_t>(j));
                    }
                }
            }
            if (token_rows.empty()) continue;
            const Var rows = tape.gather_rows(state, token_rows);
            const Var y = expert_apply(tape, bv.experts[e], rows);
            const Var wvec = tape.gather_elems(weights, weight_elems);
            const Var contrib = tape.scatter_add_rows(tape.scale_rows(y, wvec), token_rows, T);
            moe_out = moe_out.valid() ? tape.add(moe_out, contrib) : contrib;
        }
        state = tape.add(state, moe_out);

        out.refined_rows.push_back(tape.mean_rows(refined));
    }

    const Var pooled = tape.gather_rows(state, {0});
    out.logits = tape.add_row_broadcast(tape.matmul(pooled, v.head_w), v.head_b);
    return out;
}

} // namespace sidemoe
