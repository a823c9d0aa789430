// Command line front end: quantize / train / memory-report / ablate.
//
// Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
// 4 I/O error, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "sidemoe/harness.hpp"
#include "sidemoe/reports.hpp"

namespace fs = std::filesystem;
using namespace sidemoe;

namespace {

std::string schema_help() {
    std::string out = "Config keys (section.key = default):\n";
    std::string section;
    for (const ConfigKey& k : config_schema()) {
        if (section != k.section) {
            section = k.section;
            out += "  [" + section + "]\n";
        }
        out += "    " + std::string(k.key) + " = " + (std::string(k.fallback).empty() ? "(empty)" : k.fallback) +
               "  # " + k.description + "\n";
    }
    return out;
}

RunConfig load_config(const std::string& path, long long seed_override) {
    RunConfig cfg;
    if (!path.empty()) cfg = parse_config(read_text(path));
    if (seed_override >= 0) cfg.seed = static_cast<std::uint64_t>(seed_override);
    cfg.validate();
    return cfg;
}

Tensor load_weights(const std::string& path) {
    const std::string bytes = read_text(path);
    if (bytes.size() >= 4) {
        std::uint32_t magic = 0;
        std::memcpy(&magic, bytes.data(), 4);
        if (magic == kTensorMagic) return read_tensor_file(path);
    }
    return read_float_csv(path);
}

int cmd_quantize(const std::string& input, int bits, const std::string& rounding,
                 const fs::path& out_dir, bool verbose) {
    const Tensor weights = load_weights(input);
    const Rounding mode = rounding_from_string(rounding);
    const QuantParams params = calibrate(weights, bits);
    const QuantizedTensor q = quantize(weights, params, mode);

    fs::create_directories(out_dir);
    write_quantized_blob(out_dir / "quantized.bin", q);
    write_text_atomic(out_dir / "quantized.json", quantized_sidecar(q).dump(2) + "\n");

    nlohmann::json report;
    report["s"] = params.scale;
    report["z"] = params.zero_point;
    report["n"] = params.bits;
    report["rounding"] = rounding;
    report["elements"] = weights.size();
    report["error_q"] = quantization_error(weights, q);
    report["max_abs_residual"] = max_abs_residual(weights, q);
    write_text_atomic(out_dir / "quantize_report.json", report.dump(2) + "\n");
    if (verbose) std::cout << report.dump(2) << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, long long seed_override, const fs::path& out_dir,
              bool verbose) {
    const RunConfig cfg = load_config(config_path, seed_override);
    RunOutput run = run_experiment(cfg);
    fs::create_directories(out_dir);
    write_run_artifacts(out_dir, run);
    if (verbose) {
        std::cout << "final val accuracy:  " << format_double(run.report.final_val_accuracy)
                  << "\nfinal test accuracy: " << format_double(run.report.final_test_accuracy)
                  << "\nfinal error_q:       " << format_double(run.report.final_error_q)
                  << "\nwall seconds:        " << format_double(run.report.wall_seconds) << "\n";
    }
    return 0;
}

int cmd_memory_report(const std::string& config_path, long long seed_override,
                      const fs::path& out_dir, bool verbose) {
    const RunConfig cfg = load_config(config_path, seed_override);
    const nlohmann::json j = memory_report_json(cfg);
    fs::create_directories(out_dir);
    write_text_atomic(out_dir / "memory_report.json", j.dump(2) + "\n");
    if (verbose) std::cout << j.dump(2) << "\n";
    return 0;
}

std::vector<std::string> split_values(const std::string& csv) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= csv.size()) {
        std::size_t comma = csv.find(',', pos);
        if (comma == std::string::npos) comma = csv.size();
        const std::string item = detail::trim(csv.substr(pos, comma - pos));
        if (!item.empty()) out.push_back(item);
        pos = comma + 1;
    }
    return out;
}

std::string sanitize(const std::string& value) {
    std::string out = value;
    for (char& c : out)
        if (c == '.' || c == '/' || c == ' ') c = '_';
    return out;
}

int cmd_ablate(const std::string& axis, const std::string& values_csv,
               const std::string& config_path, long long seed_override, const fs::path& out_dir,
               bool verbose) {
    const RunConfig base = load_config(config_path, seed_override);
    const std::vector<std::string> values = split_values(values_csv);
    const AblationResult result = ablation_sweep(axis, values, base);

    fs::create_directories(out_dir);
    write_text_atomic(out_dir / "ablation.csv", ablation_csv(result));
    for (std::size_t i = 0; i < values.size(); ++i) {
        const fs::path sub = out_dir / (axis + "_" + sanitize(values[i]));
        fs::create_directories(sub);
        write_text_atomic(sub / "report.csv", report_csv(result.reports[i]));
        write_text_atomic(sub / "report.json", summary_json(result.reports[i]).dump(2) + "\n");
    }
    if (verbose) std::cout << ablation_csv(result);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Desk-scale mixed-precision side-tuning: weight-only quantization with "
                 "iterative re-quantization and a sparse expert side network."};
    app.require_subcommand(1);
    app.fallthrough(); // global flags may appear after the subcommand

    std::string config_path;
    std::string out_dir = "out";
    long long seed = -1;
    bool verbose = false;
    app.add_option("--config", config_path, "run config file (key = value sections)");
    app.add_option("--out", out_dir, "output directory (created if absent)");
    app.add_option("--seed", seed, "override train.seed from the config");
    app.add_flag("--verbose", verbose, "print summaries to stdout");

    auto* quantize_cmd =
        app.add_subcommand("quantize", "calibrate and quantize a weight tensor file");
    std::string input;
    int bits = 8;
    std::string rounding = "floor";
    quantize_cmd->add_option("--input", input, "weight file: binary tensor container or CSV of floats")
        ->required();
    quantize_cmd->add_option("--bits", bits, "code bitwidth n (default 8)");
    quantize_cmd->add_option("--rounding", rounding, "floor|nearest (default floor)");

    auto* train_cmd = app.add_subcommand(
        "train", "pretrain + quantize the backbone, fine-tune the side network");
    train_cmd->footer(schema_help());

    auto* memory_cmd = app.add_subcommand(
        "memory-report", "analytic training-memory model: reduction sweep and PETL floor");
    memory_cmd->footer(schema_help());

    auto* ablate_cmd =
        app.add_subcommand("ablate", "sweep one axis (component|p|N), everything else fixed");
    std::string axis;
    std::string values_csv;
    ablate_cmd->add_option("--axis", axis, "component | p | N")->required();
    ablate_cmd->add_option("--values", values_csv, "comma-separated sweep values")->required();
    ablate_cmd->footer(schema_help());

    try {
        app.parse(argc, argv);
        if (quantize_cmd->parsed()) return cmd_quantize(input, bits, rounding, out_dir, verbose);
        if (train_cmd->parsed()) return cmd_train(config_path, seed, out_dir, verbose);
        if (memory_cmd->parsed()) return cmd_memory_report(config_path, seed, out_dir, verbose);
        if (ablate_cmd->parsed())
            return cmd_ablate(axis, values_csv, config_path, seed, out_dir, verbose);
        return 1;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
