#pragma once

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "sidemoe/config.hpp"
#include "sidemoe/memory_model.hpp"
#include "sidemoe/synthetic_task.hpp"
#include "sidemoe/training.hpp"

namespace sidemoe {

// ---------------------------------------------------------------------------
// Backbone pretraining on the source task (full precision, every parameter
// trainable). This is what gives the salient token its "general knowledge"
// content before the backbone is frozen and quantized.
// ---------------------------------------------------------------------------

inline void pretrain_backbone(BackboneStub& bb, const SyntheticTask& source,
                              std::size_t epochs, double lr, std::size_t batch_size,
                              std::uint64_t seed) {
    if (bb.frozen) throw ConfigError("pretrain_backbone: backbone already frozen");
    std::vector<ParamRef> params;
    for (std::size_t l = 0; l < bb.cfg.layers; ++l) {
        params.push_back({"ln_gamma", &bb.ln_gamma[l]});
        params.push_back({"ln_beta", &bb.ln_beta[l]});
    }
    for (std::size_t i = 0; i < bb.fp_weights.size(); ++i)
        params.push_back({bb.slot_names[i], &bb.fp_weights[i]});

    AdamW opt({lr});
    const std::size_t n = source.train.size();
    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(seed, "pretrain.shuffle", epoch));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

        for (std::size_t start = 0; start < n; start += batch_size) {
            const std::size_t stop = std::min(n, start + batch_size);
            GradTape tape;
            const BackboneVars bv = backbone_leaves(tape, bb);
            Var loss_acc;
            for (std::size_t i = start; i < stop; ++i) {
                const Sample& s = source.train[order[i]];
                const Var input = tape.leaf(s.tokens);
                const BackboneOut out = backbone_forward(tape, bb, bv, input);
                const Var ce = tape.cross_entropy(out.logits, {s.label});
                loss_acc = loss_acc.valid() ? tape.add(loss_acc, ce) : ce;
            }
            const Var loss = tape.scale(loss_acc, 1.0 / static_cast<double>(stop - start));
            if (!std::isfinite(tape.value(loss).data[0]))
                throw NumericError("pretrain_backbone: loss is not finite");
            tape.backward(loss);

            std::vector<Tensor> grads;
            for (std::size_t l = 0; l < bb.cfg.layers; ++l) {
                grads.push_back(tape.grad(bv.ln_gamma[l]));
                grads.push_back(tape.grad(bv.ln_beta[l]));
            }
            for (const Var w : bv.weights) grads.push_back(tape.grad(w));
            opt.step(params, grads);
        }
    }
}

// Per-epoch synthetic drift: a fraction of each group's live weights gets a
// Gaussian bump with sigma proportional to that group's quantization step.
inline void inject_drift(std::vector<WeightGroup>& groups, double fraction, double mu,
                         double sigma_scale, Rng& rng) {
    if (fraction <= 0.0) return;
    for (WeightGroup& g : groups) {
        const std::size_t count = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(g.live.size())));
        const double sigma = sigma_scale * g.quant.params.scale;
        for (std::size_t i = 0; i < count; ++i) {
            const std::size_t at = rng.index(g.live.size());
            g.live.data[at] += rng.normal(mu, sigma);
        }
    }
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

struct EpochRow {
    int epoch = 0;
    double train_total = 0.0;
    double train_task = 0.0;
    double train_balance = 0.0;
    double val_accuracy = 0.0;
    double error_q = 0.0;
    double balance = 0.0; // validation-time load-balancing loss
};

struct RoutingDiagRow {
    int epoch = 0;
    int expert = 0;
    double share = 0.0;
    double mean_prob = 0.0;
    double balance = 0.0;
};

// Analytic training-memory ledger for one run. Backbone forward buffers are
// identical across configurations and excluded; the backprop set covers the
// side branch only, which is the point of decoupled tuning.
struct RunMemory {
    double backbone_weight_bytes = 0.0;
    double layer_norm_bytes = 0.0;
    double side_weight_bytes = 0.0;
    double optimizer_bytes = 0.0;
    double side_backprop_bytes = 0.0;

    double total_bytes() const {
        return backbone_weight_bytes + layer_norm_bytes + side_weight_bytes + optimizer_bytes +
               side_backprop_bytes;
    }
};

struct RunReport {
    RunConfig config;
    std::vector<EpochRow> rows;
    std::vector<RequantEvent> requant_events;
    std::vector<RoutingDiagRow> routing;
    double final_val_accuracy = 0.0;
    double final_test_accuracy = 0.0;
    double final_error_q = 0.0;
    double final_balance = 0.0;
    RunMemory memory;
    double wall_seconds = 0.0; // kept out of the deterministic artifacts
};

struct RunOutput {
    RunReport report;
    BackboneStub backbone;
    SideNetwork side;
};

inline RunMemory run_memory(const RunConfig& cfg, const BackboneStub& bb,
                            const SideNetwork& side) {
    RunMemory m;
    const double backbone_bits = cfg.quantize_backbone ? static_cast<double>(cfg.bits) : 32.0;
    m.backbone_weight_bytes =
        static_cast<double>(bb.frozen_weight_elements()) * backbone_bits / 8.0;
    m.layer_norm_bytes = static_cast<double>(bb.layer_norm_elements()) * 4.0;
    m.side_weight_bytes = static_cast<double>(side.parameter_elements()) * 2.0;
    const double trainable =
        static_cast<double>(side.parameter_elements() + bb.layer_norm_elements());
    m.optimizer_bytes = trainable * 4.0 * cfg.optimizer_copies;

    // backprop set of the side branch: three cached pre-activation maps per
    // block (mixing out, routed expert hidden, expert out) plus the head
    NetworkShape shape;
    const std::size_t T = cfg.task.tokens;
    const std::size_t d = side.width;
    for (std::size_t b = 0; b < side.blocks.size(); ++b)
        shape.pre_activation_dims.insert(shape.pre_activation_dims.end(),
                                         {T * d, T * d * static_cast<std::size_t>(side.cfg.moe ? side.cfg.top_k : 1),
                                          T * d});
    shape.pre_activation_dims.push_back(cfg.task.classes);
    shape.weight_counts.assign(shape.pre_activation_dims.size(), 0);
    PrecisionMap prec;
    prec.activation_bits = cfg.activation_bits;
    m.side_backprop_bytes = backprop_memory(shape, prec).backprop_bytes();
    return m;
}

// ---------------------------------------------------------------------------
// The full desk-scale experiment: pretrain, quantize, fine-tune with
// re-quantization events, evaluate. Deterministic for a fixed config.
// ---------------------------------------------------------------------------

inline RunOutput run_experiment(const RunConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    const TaskFamily family = make_task_family(cfg.task, derive_seed(cfg.seed, "family"));
    const SyntheticTask source =
        make_task(cfg.task, family, derive_seed(cfg.seed, "source"), true);
    const SyntheticTask target =
        make_task(cfg.task, family, derive_seed(cfg.seed, "target"), false);

    RunOutput out;
    out.backbone = make_backbone(cfg.backbone_config(), derive_seed(cfg.seed, "backbone"));
    pretrain_backbone(out.backbone, source, cfg.pretrain_epochs, cfg.pretrain_lr,
                      cfg.pretrain_batch, cfg.seed);
    if (cfg.quantize_backbone) out.backbone.freeze();

    out.side = make_side_network(cfg.backbone_config(), cfg.side_config(), cfg.task.classes,
                                 derive_seed(cfg.seed, "side"));

    AdamW opt({cfg.lr});
    const RequantSchedule schedule{cfg.p > 0.0 ? cfg.p : 1.0, cfg.interval, cfg.epochs, 0};
    const bool requant_on = cfg.requant_enabled && cfg.p > 0.0 && cfg.quantize_backbone;
    Rng requant_rng(derive_seed(cfg.seed, "requant"));
    Rng drift_rng(derive_seed(cfg.seed, "drift"));

    RunReport& report = out.report;
    report.config = cfg;

    const std::size_t n = target.train.size();
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        if (requant_on && schedule.is_event_epoch(epoch)) {
            std::vector<RequantEvent> events =
                requantize_all(out.backbone.groups, schedule, epoch, requant_rng, cfg.rounding);
            out.backbone.refresh_dequant();
            report.requant_events.insert(report.requant_events.end(), events.begin(),
                                         events.end());
        }

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[shuffle.index(i)]);

        EpochRow row;
        row.epoch = epoch;
        std::size_t steps = 0;
        for (std::size_t start = 0; start < n; start += cfg.batch) {
            const std::size_t stop = std::min(n, start + cfg.batch);
            std::vector<Sample> batch;
            batch.reserve(stop - start);
            for (std::size_t i = start; i < stop; ++i) batch.push_back(target.train[order[i]]);
            try {
                const LossBreakdown loss =
                    train_step(out.backbone, out.side, batch, opt, cfg.alpha, cfg.beta);
                row.train_total += loss.total;
                row.train_task += loss.task;
                row.train_balance += loss.balance;
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
            }
            ++steps;
        }
        row.train_total /= static_cast<double>(steps);
        row.train_task /= static_cast<double>(steps);
        row.train_balance /= static_cast<double>(steps);

        if (cfg.quantize_backbone)
            inject_drift(out.backbone.groups, cfg.drift_fraction, cfg.drift_mu,
                         cfg.drift_sigma_scale, drift_rng);

        const EvalResult val = evaluate(out.backbone, out.side, target.val);
        row.val_accuracy = val.accuracy;
        row.error_q =
            cfg.quantize_backbone ? total_quantization_error(out.backbone.groups) : 0.0;
        row.balance = val.balance;
        report.rows.push_back(row);

        if (out.side.cfg.moe) {
            for (std::size_t e = 0; e < cfg.experts; ++e) {
                report.routing.push_back({epoch, static_cast<int>(e), val.routing.share[e],
                                          val.routing.mean_prob[e], val.routing.balance});
            }
        }
    }

    report.final_val_accuracy = report.rows.back().val_accuracy;
    report.final_error_q = report.rows.back().error_q;
    report.final_balance = report.rows.back().balance;
    report.final_test_accuracy = evaluate(out.backbone, out.side, target.test).accuracy;
    report.memory = run_memory(cfg, out.backbone, out.side);
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
}

// ---------------------------------------------------------------------------
// Ablation sweeps over {component, p, N} with everything else fixed.
// ---------------------------------------------------------------------------

struct AblationRow {
    std::string axis;
    std::string value;
    double final_val_accuracy = 0.0;
    double final_test_accuracy = 0.0;
    double final_error_q = 0.0;
    double memory_bytes = 0.0;
    double final_balance = 0.0;
};

struct AblationResult {
    std::vector<RunReport> reports;
    std::vector<AblationRow> rows;
};

inline RunConfig apply_ablation_value(const std::string& axis, const std::string& value,
                                      RunConfig cfg) {
    if (axis == "component") {
        bool quant = false, moe = false;
        if (value == "neither") {
        } else if (value == "quant") {
            quant = true;
        } else if (value == "moe") {
            moe = true;
        } else if (value == "both") {
            quant = moe = true;
        } else {
            throw ConfigError("component axis: expected neither|quant|moe|both, got '" +
                              value + "'");
        }
        cfg.quantize_backbone = quant;
        cfg.requant_enabled = quant;
        cfg.moe_enabled = moe;
    } else if (axis == "p") {
        cfg.p = detail::parse_double("ablation p", value);
        cfg.requant_enabled = cfg.p > 0.0;
    } else if (axis == "N") {
        cfg.experts = static_cast<std::size_t>(detail::parse_int("ablation N", value));
        if (cfg.top_k > static_cast<int>(cfg.experts)) cfg.top_k = 1;
    } else {
        throw ConfigError("unknown ablation axis '" + axis + "' (expected component|p|N)");
    }
    cfg.validate();
    return cfg;
}

inline std::size_t sweep_worker_cap() {
    if (const char* env = std::getenv("SIDEMOE_THREADS")) {
        const long v = std::atol(env);
        if (v >= 1) return static_cast<std::size_t>(v);
    }
    return 1;
}

inline AblationResult ablation_sweep(const std::string& axis,
                                     const std::vector<std::string>& values,
                                     const RunConfig& base, std::size_t workers = 0) {
    if (values.empty()) throw ConfigError("ablation_sweep: no values given");
    if (workers == 0) workers = sweep_worker_cap();

    std::vector<RunConfig> configs;
    for (const std::string& v : values) configs.push_back(apply_ablation_value(axis, v, base));

    AblationResult result;
    result.reports.resize(values.size());
    if (workers <= 1 || values.size() <= 1) {
        for (std::size_t i = 0; i < configs.size(); ++i)
            result.reports[i] = run_experiment(configs[i]).report;
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        std::vector<std::string> failures(values.size());
        const std::size_t count = std::min(workers, values.size());
        for (std::size_t w = 0; w < count; ++w) {
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= configs.size()) return;
                    try {
                        result.reports[i] = run_experiment(configs[i]).report;
                    } catch (const std::exception& e) {
                        failures[i] = e.what();
                    }
                }
            });
        }
        for (std::thread& t : pool) t.join();
        for (const std::string& f : failures)
            if (!f.empty()) throw NumericError("ablation run failed: " + f);
    }

    for (std::size_t i = 0; i < values.size(); ++i) {
        const RunReport& r = result.reports[i];
        result.rows.push_back({axis, values[i], r.final_val_accuracy, r.final_test_accuracy,
                               r.final_error_q, r.memory.total_bytes(), r.final_balance});
    }
    return result;
}

} // namespace sidemoe
