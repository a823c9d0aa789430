#pragma once

#include <filesystem>
#include <string>

#include "sidemoe/harness.hpp"
#include "sidemoe/io.hpp"

namespace sidemoe {

// Deterministic artifact rendering. Wall-clock time is deliberately not
// written: identical config + seed must produce byte-identical files.

inline std::string report_csv(const RunReport& r) {
    CsvWriter csv({"epoch", "train_total", "train_task", "train_balance", "val_accuracy",
                   "error_q", "balance"});
    for (const EpochRow& row : r.rows) {
        csv.row({std::to_string(row.epoch), format_double(row.train_total),
                 format_double(row.train_task), format_double(row.train_balance),
                 format_double(row.val_accuracy), format_double(row.error_q),
                 format_double(row.balance)});
    }
    return csv.str();
}

inline std::string requant_events_csv(const RunReport& r) {
    CsvWriter csv({"epoch", "group", "error_before", "error_after", "noise_mu", "noise_sigma",
                   "scale", "zero_point"});
    for (const RequantEvent& e : r.requant_events) {
        csv.row({std::to_string(e.epoch), e.group, format_double(e.error_before),
                 format_double(e.error_after), format_double(e.noise_mu),
                 format_double(e.noise_sigma), format_double(e.scale),
                 std::to_string(e.zero_point)});
    }
    return csv.str();
}

inline std::string routing_diagnostics_csv(const RunReport& r) {
    CsvWriter csv({"epoch", "expert", "share", "mean_prob", "balance"});
    for (const RoutingDiagRow& d : r.routing) {
        csv.row({std::to_string(d.epoch), std::to_string(d.expert), format_double(d.share),
                 format_double(d.mean_prob), format_double(d.balance)});
    }
    return csv.str();
}

inline nlohmann::json memory_json(const RunMemory& m) {
    nlohmann::json j;
    j["backbone_weight_bytes"] = m.backbone_weight_bytes;
    j["layer_norm_bytes"] = m.layer_norm_bytes;
    j["side_weight_bytes"] = m.side_weight_bytes;
    j["optimizer_bytes"] = m.optimizer_bytes;
    j["side_backprop_bytes"] = m.side_backprop_bytes;
    j["total_bytes"] = m.total_bytes();
    return j;
}

inline nlohmann::json summary_json(const RunReport& r) {
    nlohmann::json j;
    j["epochs"] = r.rows.size();
    j["final_val_accuracy"] = r.final_val_accuracy;
    j["final_test_accuracy"] = r.final_test_accuracy;
    j["final_error_q"] = r.final_error_q;
    j["final_balance"] = r.final_balance;
    j["requant_events"] = r.requant_events.size();
    j["memory"] = memory_json(r.memory);
    j["config"] = serialize_config(r.config);
    return j;
}

inline std::string ablation_csv(const AblationResult& a) {
    CsvWriter csv({"axis", "value", "final_val_accuracy", "final_test_accuracy", "final_error_q",
                   "memory_bytes", "final_balance"});
    for (const AblationRow& row : a.rows) {
        csv.row({row.axis, row.value, format_double(row.final_val_accuracy),
                 format_double(row.final_test_accuracy), format_double(row.final_error_q),
                 format_double(row.memory_bytes), format_double(row.final_balance)});
    }
    return csv.str();
}

// --- checkpoint ---------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointMagic = 0x534d434bu; // "SMCK"

// Single binary container: quantizer blobs for every backbone group plus all
// full-precision trainable parameters and the config echo.
inline void write_checkpoint(const std::filesystem::path& path, BackboneStub& backbone,
                             SideNetwork& side, const RunConfig& cfg) {
    detail::BinaryWriter w;
    w.put(kCheckpointMagic);
    w.put<std::uint32_t>(1);
    w.put_string(serialize_config(cfg));

    w.put<std::uint64_t>(backbone.frozen ? backbone.groups.size() : 0);
    if (backbone.frozen) {
        for (const WeightGroup& g : backbone.groups) {
            w.put_string(g.name);
            append_quantized(w, g.quant);
        }
    }

    const std::vector<ParamRef> params = trainable_parameters(&backbone, &side);
    w.put<std::uint64_t>(params.size());
    for (const ParamRef& p : params) {
        w.put_string(p.name);
        append_tensor(w, *p.tensor);
    }
    write_text_atomic(path, w.bytes);
}

inline nlohmann::json checkpoint_manifest(BackboneStub& backbone, SideNetwork& side,
                                          const RunConfig& cfg) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["quantized_groups"] = nlohmann::json::array();
    if (backbone.frozen) {
        for (const WeightGroup& g : backbone.groups) {
            j["quantized_groups"].push_back({{"name", g.name},
                                             {"bits", g.quant.params.bits},
                                             {"scale", g.quant.params.scale},
                                             {"zero_point", g.quant.params.zero_point},
                                             {"elements", g.quant.size()}});
        }
    }
    j["trainable"] = nlohmann::json::array();
    for (const ParamRef& p : trainable_parameters(&backbone, &side))
        j["trainable"].push_back({{"name", p.name}, {"shape", p.tensor->shape}});
    j["config"] = serialize_config(cfg);
    return j;
}

struct Checkpoint {
    RunConfig config;
    std::vector<std::pair<std::string, QuantizedTensor>> groups;
    std::vector<std::pair<std::string, Tensor>> trainable;
};

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
    const std::string bytes = read_text(path);
    detail::BinaryReader r{bytes};
    if (r.get<std::uint32_t>() != kCheckpointMagic) throw IoError("not a checkpoint container");
    if (r.get<std::uint32_t>() != 1) throw IoError("unsupported checkpoint version");
    Checkpoint ck;
    ck.config = parse_config(r.get_string());
    const std::uint64_t groups = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < groups; ++i) {
        std::string name = r.get_string();
        ck.groups.emplace_back(std::move(name), read_quantized(r));
    }
    const std::uint64_t params = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < params; ++i) {
        std::string name = r.get_string();
        ck.trainable.emplace_back(std::move(name), read_tensor(r));
    }
    return ck;
}

// All files cmd_train leaves behind, written atomically into `dir`.
inline void write_run_artifacts(const std::filesystem::path& dir, RunOutput& run) {
    write_text_atomic(dir / "report.csv", report_csv(run.report));
    write_text_atomic(dir / "report.json", summary_json(run.report).dump(2) + "\n");
    write_text_atomic(dir / "requant_events.csv", requant_events_csv(run.report));
    write_text_atomic(dir / "routing_diagnostics.csv", routing_diagnostics_csv(run.report));
    write_checkpoint(dir / "checkpoint.bin", run.backbone, run.side, run.report.config);
    write_text_atomic(dir / "checkpoint_manifest.json",
                      checkpoint_manifest(run.backbone, run.side, run.report.config).dump(2) +
                          "\n");
}

// --- memory report -------------------------------------------------------------

// Closed-form byte model: full backprop footprint of the backbone shape,
// the side branch at a sweep of reduction factors, and the PETL floor.
inline nlohmann::json memory_report_json(const RunConfig& cfg) {
    cfg.validate();
    const std::size_t T = cfg.task.tokens;
    const std::size_t D = cfg.task.dim;
    const std::size_t H = cfg.ffn_hidden ? cfg.ffn_hidden : D;

    NetworkShape backbone;
    for (std::size_t l = 0; l < cfg.layers; ++l) {
        backbone.pre_activation_dims.insert(backbone.pre_activation_dims.end(),
                                            {T * D, T * H, T * D});
        std::size_t weights = D * H + H + H * D + D;
        weights += cfg.attention ? 4 * D * D : T * T;
        backbone.weight_counts.push_back(weights);
        backbone.weight_counts.push_back(0);
        backbone.weight_counts.push_back(0);
    }

    PrecisionMap prec;
    prec.frozen_weight_bits = cfg.quantize_backbone ? cfg.bits : 32;
    prec.activation_bits = cfg.activation_bits;
    prec.optimizer_copies = cfg.optimizer_copies;

    const MemoryBudget full = backprop_memory(backbone, prec);
    const double petl = petl_floor(backbone, prec);

    nlohmann::json j;
    j["backbone"] = {{"activation_bytes", full.activation_bytes},
                     {"derivative_bytes", full.derivative_bytes},
                     {"backprop_bytes", full.backprop_bytes()},
                     {"weight_elements", backbone.weight_elements()}};
    j["petl_floor_bytes"] = petl;

    j["side_sweep"] = nlohmann::json::array();
    for (const double r : {1.0, 2.0, 4.0, 8.0}) {
        const MemoryBudget side = side_memory(backbone, r, prec);
        j["side_sweep"].push_back({{"reduction", r},
                                   {"backprop_bytes", side.backprop_bytes()},
                                   {"below_petl_floor", side.backprop_bytes() < petl},
                                   {"equals_petl_floor", side.backprop_bytes() == petl}});
    }

    WeightClassCounts counts;
    std::size_t frozen = 0;
    for (const std::size_t w : backbone.weight_counts) frozen += w;
    frozen += D * cfg.task.classes + cfg.task.classes; // pretraining head
    counts.frozen_quantized = frozen;
    counts.layer_norm = cfg.layers * 2 * D;
    const SideNetwork side =
        make_side_network(cfg.backbone_config(), cfg.side_config(), cfg.task.classes, 0);
    counts.side = side.parameter_elements();
    const WeightBytesReport weights = mixed_precision_weights(counts, prec);
    j["weights"] = {{"frozen_elements", counts.frozen_quantized},
                    {"layer_norm_elements", counts.layer_norm},
                    {"side_elements", counts.side},
                    {"bytes", weights.bytes},
                    {"full_precision_bytes", weights.full_precision_bytes},
                    {"savings_ratio", weights.savings_ratio}};
    return j;
}

} // namespace sidemoe
