#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "sidemoe/config.hpp"
#include "sidemoe/io.hpp"

using namespace sidemoe;
namespace fs = std::filesystem;

namespace {

struct CliResult {
    int exit_code = -1;
    std::string output; // stdout + stderr
};

CliResult run_cli(const std::string& args, const fs::path& workdir) {
    const fs::path log = workdir / "cli_output.log";
    const std::string cmd = "cd " + workdir.string() + " && " + SIDEMOE_CLI_PATH + " " + args +
                            " > " + log.string() + " 2>&1";
    const int raw = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WEXITSTATUS(raw);
    if (fs::exists(log)) r.output = read_text(log);
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string quick_config() {
    RunConfig cfg;
    cfg.task.tokens = 4;
    cfg.task.dim = 12;
    cfg.task.classes = 3;
    cfg.task.clusters = 3;
    cfg.task.train_size = 48;
    cfg.task.val_size = 24;
    cfg.task.test_size = 24;
    cfg.task.source_train_size = 64;
    cfg.layers = 2;
    cfg.pretrain_epochs = 3;
    cfg.experts = 3;
    cfg.epochs = 6;
    cfg.interval = 3;
    cfg.batch = 16;
    return serialize_config(cfg);
}

} // namespace

TEST_CASE("quantize subcommand reproduces the hand example") {
    const fs::path dir = fresh_dir("sidemoe_cli_quant");
    {
        std::ofstream csv(dir / "w.csv");
        csv << "-1,0,2\n";
    }
    const CliResult r = run_cli("quantize --input w.csv --bits 8 --out q", dir);
    CHECK(r.exit_code == 0);

    const nlohmann::json report =
        nlohmann::json::parse(read_text(dir / "q" / "quantize_report.json"));
    CHECK(report["s"].get<double>() == 3.0 / 255.0);
    CHECK(report["z"].get<int>() == 85);
    CHECK(report["n"].get<int>() == 8);
    CHECK(report["error_q"].get<double>() == 0.0);
    CHECK(report["max_abs_residual"].get<double>() == 0.0);

    const QuantizedTensor q = read_quantized_blob(dir / "q" / "quantized.bin");
    CHECK(q.codes.get(0) == 0);
    CHECK(q.codes.get(1) == 85);
    CHECK(q.codes.get(2) == 255);

    const nlohmann::json sidecar = nlohmann::json::parse(read_text(dir / "q" / "quantized.json"));
    CHECK(sidecar["codes"] == nlohmann::json::array({0, 85, 255}));
    fs::remove_all(dir);
}

TEST_CASE("quantize rejects empty and missing inputs") {
    const fs::path dir = fresh_dir("sidemoe_cli_quant_bad");
    {
        std::ofstream csv(dir / "empty.csv");
    }
    CHECK(run_cli("quantize --input empty.csv --out q", dir).exit_code == 2);
    CHECK(run_cli("quantize --input nope.csv --out q", dir).exit_code == 4);
    {
        std::ofstream csv(dir / "nan.csv");
        csv << "1,nan,2\n";
    }
    CHECK(run_cli("quantize --input nan.csv --out q", dir).exit_code == 3);
    fs::remove_all(dir);
}

TEST_CASE("higher bitwidth never reports a larger error") {
    const fs::path dir = fresh_dir("sidemoe_cli_quant_bits");
    {
        std::ofstream csv(dir / "w.csv");
        Rng rng(3);
        for (int i = 0; i < 500; ++i) csv << rng.normal() << (i + 1 < 500 ? "," : "\n");
    }
    REQUIRE(run_cli("quantize --input w.csv --bits 8 --out q8", dir).exit_code == 0);
    REQUIRE(run_cli("quantize --input w.csv --bits 16 --out q16", dir).exit_code == 0);
    const double e8 = nlohmann::json::parse(read_text(dir / "q8" / "quantize_report.json"))
                          .at("error_q")
                          .get<double>();
    const double e16 = nlohmann::json::parse(read_text(dir / "q16" / "quantize_report.json"))
                           .at("error_q")
                           .get<double>();
    CHECK(e16 <= e8);
    fs::remove_all(dir);
}

TEST_CASE("train subcommand writes all artifacts deterministically") {
    const fs::path dir = fresh_dir("sidemoe_cli_train");
    write_text_atomic(dir / "quick.ini", quick_config());

    const CliResult a = run_cli("train --config quick.ini --seed 0 --out run_a", dir);
    REQUIRE(a.exit_code == 0);
    for (const char* f : {"report.csv", "report.json", "requant_events.csv",
                          "routing_diagnostics.csv", "checkpoint.bin",
                          "checkpoint_manifest.json"})
        CHECK(fs::exists(dir / "run_a" / f));

    const CliResult b = run_cli("train --config quick.ini --seed 0 --out run_b", dir);
    REQUIRE(b.exit_code == 0);
    // idempotent to the byte across every artifact
    for (const char* f : {"report.csv", "report.json", "requant_events.csv",
                          "routing_diagnostics.csv", "checkpoint.bin",
                          "checkpoint_manifest.json"})
        CHECK(read_text(dir / "run_a" / f) == read_text(dir / "run_b" / f));

    // different seed, different trajectory
    const CliResult c = run_cli("train --config quick.ini --seed 7 --out run_c", dir);
    REQUIRE(c.exit_code == 0);
    CHECK(read_text(dir / "run_a" / "report.csv") != read_text(dir / "run_c" / "report.csv"));
    fs::remove_all(dir);
}

TEST_CASE("train names the offending config key before any compute") {
    const fs::path dir = fresh_dir("sidemoe_cli_train_bad");
    write_text_atomic(dir / "bad.ini", "[train]\nepochss = 3\n");
    const CliResult r = run_cli("train --config bad.ini --out run", dir);
    CHECK(r.exit_code == 2);
    CHECK(r.output.find("train.epochss") != std::string::npos);
    CHECK(!fs::exists(dir / "run"));
    fs::remove_all(dir);
}

TEST_CASE("memory-report shows the reduction sweep with the PETL boundary") {
    const fs::path dir = fresh_dir("sidemoe_cli_mem");
    write_text_atomic(dir / "quick.ini", quick_config());
    const CliResult r = run_cli("memory-report --config quick.ini --out mem", dir);
    REQUIRE(r.exit_code == 0);
    const nlohmann::json j = nlohmann::json::parse(read_text(dir / "mem" / "memory_report.json"));
    REQUIRE(j["side_sweep"].size() == 4);
    double previous = 1e300;
    for (const auto& row : j["side_sweep"]) {
        CHECK(row["backprop_bytes"].get<double>() <= previous);
        previous = row["backprop_bytes"].get<double>();
        if (row["reduction"].get<double>() == 2.0) CHECK(row["equals_petl_floor"].get<bool>());
    }
    fs::remove_all(dir);
}

TEST_CASE("ablate produces one row per value and rejects unknown axes") {
    const fs::path dir = fresh_dir("sidemoe_cli_ablate");
    RunConfig cfg = parse_config(quick_config());
    cfg.epochs = 3;
    cfg.pretrain_epochs = 2;
    write_text_atomic(dir / "quick.ini", serialize_config(cfg));

    const CliResult r =
        run_cli("ablate --axis p --values 0,0.05,0.1,0.5 --config quick.ini --out ab", dir);
    REQUIRE(r.exit_code == 0);
    const std::string csv = read_text(dir / "ab" / "ablation.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5); // header + 4 rows
    CHECK(fs::exists(dir / "ab" / "p_0_05" / "report.csv"));

    CHECK(run_cli("ablate --axis beta --values 1,2 --config quick.ini --out ab2", dir)
              .exit_code == 2);
    fs::remove_all(dir);
}

TEST_CASE("help lists every config key with its default") {
    const fs::path dir = fresh_dir("sidemoe_cli_help");
    const CliResult r = run_cli("train --help", dir);
    CHECK(r.exit_code == 0);
    for (const ConfigKey& k : config_schema()) {
        CHECK(r.output.find(std::string("[") + k.section + "]") != std::string::npos);
        CHECK(r.output.find(k.key) != std::string::npos);
    }
    // paper-anchored defaults visible
    CHECK(r.output.find("p = 0.1") != std::string::npos);
    CHECK(r.output.find("experts = 6") != std::string::npos);
    CHECK(r.output.find("top_k = 1") != std::string::npos);
    CHECK(r.output.find("beta = 0.001") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("subcommands write only inside the output directory") {
    const fs::path dir = fresh_dir("sidemoe_cli_sandbox");
    write_text_atomic(dir / "quick.ini", quick_config());
    std::set<std::string> before;
    for (const auto& e : fs::directory_iterator(dir)) before.insert(e.path().filename());

    REQUIRE(run_cli("train --config quick.ini --out only_here", dir).exit_code == 0);

    std::set<std::string> after;
    for (const auto& e : fs::directory_iterator(dir)) after.insert(e.path().filename());
    before.insert("only_here");
    before.insert("cli_output.log"); // the test's own redirection
    CHECK(after == before);
    fs::remove_all(dir);
}

TEST_CASE("numeric divergence aborts with exit code 3 naming the epoch") {
    const fs::path dir = fresh_dir("sidemoe_cli_diverge");
    RunConfig cfg = parse_config(quick_config());
    cfg.lr = 1e18; // drives the side weights to overflow within an epoch or two
    write_text_atomic(dir / "diverge.ini", serialize_config(cfg));
    const CliResult r = run_cli("train --config diverge.ini --out run", dir);
    CHECK(r.exit_code == 3);
    CHECK(r.output.find("epoch") != std::string::npos);
    fs::remove_all(dir);
}
