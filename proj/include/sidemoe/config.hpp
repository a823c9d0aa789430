#pragma once

#include <charconv>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sidemoe/io.hpp"
#include "sidemoe/moe_router.hpp"
#include "sidemoe/quantizer.hpp"
#include "sidemoe/side_network.hpp"
#include "sidemoe/synthetic_task.hpp"

namespace sidemoe {

// Complete run description. Parsed from a sectioned key = value file;
// unknown sections or keys are hard errors so ablation configs cannot
// silently misfire.
struct RunConfig {
    TaskConfig task;

    // backbone
    std::size_t layers = 3;
    std::size_t ffn_hidden = 0; // 0 -> dim
    bool attention = false;
    std::size_t pretrain_epochs = 40;
    double pretrain_lr = 1e-2;
    std::size_t pretrain_batch = 32;

    // quantizer
    bool quantize_backbone = true;
    int bits = 8;
    Rounding rounding = Rounding::Floor;

    // requant
    bool requant_enabled = true;
    double p = 0.10;
    int interval = 10; // epochs between re-quantization events

    // drift
    double drift_fraction = 0.01;
    double drift_sigma_scale = 0.1; // sigma = scale * quantization step
    double drift_mu = 0.0;

    // moe
    bool moe_enabled = true;
    std::size_t experts = 6;
    int top_k = 1;
    PostMask post_mask = PostMask::Renormalize;

    // side
    std::size_t reduction = 2;
    std::vector<std::size_t> layer_drop;

    // train
    int epochs = 50;
    std::size_t batch = 32;
    double lr = 1e-2;
    double alpha = 1.0; // task loss weight
    double beta = 1e-3; // balance loss weight
    std::uint64_t seed = 0;

    // memory accounting
    int activation_bits = 16;
    double optimizer_copies = 2.0;

    BackboneConfig backbone_config() const {
        BackboneConfig b;
        b.layers = layers;
        b.dim = task.dim;
        b.tokens = task.tokens;
        b.ffn_hidden = ffn_hidden;
        b.classes = task.classes;
        b.attention = attention;
        b.bits = bits;
        b.rounding = rounding;
        return b;
    }

    SideConfig side_config() const {
        SideConfig s;
        s.reduction = reduction;
        s.experts = experts;
        s.top_k = top_k;
        s.post_mask = post_mask;
        s.moe = moe_enabled;
        s.layer_drop = layer_drop;
        return s;
    }

    void validate() const {
        task.validate();
        if (layers < 1 || layers > 64) throw ConfigError("backbone.layers out of range [1, 64]");
        if (bits < 2 || bits > 32) throw ConfigError("quantizer.bits out of range [2, 32]");
        if (p < 0.0 || p > 1.0) throw ConfigError("requant.p out of range [0, 1]");
        if (interval < 1) throw ConfigError("requant.interval must be >= 1");
        if (drift_fraction < 0.0 || drift_fraction > 1.0)
            throw ConfigError("drift.fraction out of range [0, 1]");
        if (drift_sigma_scale < 0.0) throw ConfigError("drift.sigma_scale must be >= 0");
        if (experts < 1 || experts > 64) throw ConfigError("moe.experts out of range [1, 64]");
        if (top_k < 1 || top_k > static_cast<int>(experts))
            throw ConfigError("moe.top_k out of range [1, experts]");
        if (reduction < 1) throw ConfigError("side.reduction must be >= 1");
        for (const std::size_t l : layer_drop)
            if (l >= layers) throw ConfigError("side.layer_drop index exceeds layer count");
        if (epochs < 1 || epochs > 100000) throw ConfigError("train.epochs out of range");
        if (batch < 1) throw ConfigError("train.batch must be >= 1");
        if (lr <= 0.0) throw ConfigError("train.lr must be > 0");
        if (alpha < 0.0 || beta < 0.0) throw ConfigError("train.alpha/beta must be >= 0");
        if (activation_bits != 16 && activation_bits != 32)
            throw ConfigError("memory.activation_bits must be 16 or 32");
        if (optimizer_copies < 0.0) throw ConfigError("memory.optimizer_copies must be >= 0");
    }
};

// One row per config key: section, key, default, description. The CLI help
// and the parser share this table, so help text cannot drift from the code.
struct ConfigKey {
    const char* section;
    const char* key;
    const char* fallback;
    const char* description;
};

inline const std::vector<ConfigKey>& config_schema() {
    static const std::vector<ConfigKey> schema = {
        {"task", "tokens", "6", "sequence length per sample"},
        {"task", "dim", "24", "token feature width D"},
        {"task", "classes", "4", "label count"},
        {"task", "clusters", "6", "latent clusters with distinct label rules"},
        {"task", "content_dims", "6", "label-relevant content subspace width"},
        {"task", "train_size", "192", "target-task training samples"},
        {"task", "val_size", "96", "validation samples"},
        {"task", "test_size", "96", "test samples"},
        {"task", "source_train_size", "256", "source-task pretraining samples"},
        {"task", "cluster_scale", "2", "centroid magnitude"},
        {"task", "token_noise", "0.1", "per-token noise sigma"},
        {"task", "rule_margin", "1", "min winning-class score gap at generation"},
        {"backbone", "layers", "3", "backbone depth L"},
        {"backbone", "ffn_hidden", "0", "backbone FFN hidden width (0 = dim)"},
        {"backbone", "attention", "false", "single-head attention instead of fixed mixing"},
        {"backbone", "pretrain_epochs", "40", "source-task pretraining epochs"},
        {"backbone", "pretrain_lr", "0.01", "pretraining learning rate"},
        {"backbone", "pretrain_batch", "32", "pretraining batch size"},
        {"quantizer", "enabled", "true", "quantize the frozen backbone"},
        {"quantizer", "bits", "8", "code bitwidth n"},
        {"quantizer", "rounding", "floor", "floor|nearest code rounding"},
        {"requant", "enabled", "true", "iterative re-quantization on/off"},
        {"requant", "p", "0.1", "re-sampled weight fraction per event"},
        {"requant", "interval", "10", "epochs between events (M)"},
        {"drift", "fraction", "0.01", "backbone elements drifted per epoch"},
        {"drift", "sigma_scale", "0.1", "drift sigma as a multiple of the quant step"},
        {"drift", "mu", "0", "drift mean"},
        {"moe", "enabled", "true", "expert bank on; off = dense side FFN"},
        {"moe", "experts", "6", "expert count N"},
        {"moe", "top_k", "1", "experts routed per token (k)"},
        {"moe", "post_mask", "renormalize", "renormalize|softmax selected-weight handling"},
        {"side", "reduction", "2", "width reduction factor r"},
        {"side", "layer_drop", "", "comma list of backbone layers with no side block"},
        {"train", "epochs", "50", "fine-tuning epochs"},
        {"train", "batch", "32", "fine-tuning batch size"},
        {"train", "lr", "0.01", "fine-tuning learning rate"},
        {"train", "alpha", "1", "task loss weight"},
        {"train", "beta", "0.001", "load-balancing loss weight"},
        {"train", "seed", "0", "master seed"},
        {"memory", "activation_bits", "16", "side activation precision for the byte model"},
        {"memory", "optimizer_copies", "2", "optimizer state copies per trainable param"},
    };
    return schema;
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
    while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
    return s.substr(b, e - b);
}

inline double parse_double(const std::string& where, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(where + ": expected a number, got '" + v + "'");
    return out;
}

inline long long parse_int(const std::string& where, const std::string& v) {
    long long out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(where + ": expected an integer, got '" + v + "'");
    return out;
}

inline bool parse_bool(const std::string& where, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError(where + ": expected true|false, got '" + v + "'");
}

inline std::vector<std::size_t> parse_index_list(const std::string& where, const std::string& v) {
    std::vector<std::size_t> out;
    std::size_t pos = 0;
    while (pos < v.size()) {
        std::size_t comma = v.find(',', pos);
        if (comma == std::string::npos) comma = v.size();
        const std::string item = trim(v.substr(pos, comma - pos));
        if (!item.empty())
            out.push_back(static_cast<std::size_t>(parse_int(where, item)));
        pos = comma + 1;
    }
    return out;
}

} // namespace detail

// Parse a sectioned key = value document. '#' and ';' start comments.
inline RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::string section;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t eol = text.find('\n', pos);
        if (eol == std::string::npos) eol = text.size();
        std::string line = detail::trim(text.substr(pos, eol - pos));
        pos = eol + 1;
        ++line_no;
        if (!line.empty()) {
            const std::size_t hash = line.find_first_of("#;");
            if (hash != std::string::npos) line = detail::trim(line.substr(0, hash));
        }
        if (line.empty()) {
            if (pos > text.size()) break;
            continue;
        }
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("line " + std::to_string(line_no) + ": malformed section");
            section = detail::trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const ConfigKey& k : config_schema())
                if (section == k.section) known = true;
            if (!known)
                throw ConfigError("unknown config section '" + section + "'");
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + ": expected key = value");
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const std::string where = section + "." + key;

        bool known = false;
        for (const ConfigKey& k : config_schema())
            if (section == k.section && key == k.key) known = true;
        if (!known) throw ConfigError("unknown config key '" + where + "'");

        using namespace detail;
        if (where == "task.tokens") cfg.task.tokens = parse_int(where, value);
        else if (where == "task.dim") cfg.task.dim = parse_int(where, value);
        else if (where == "task.classes") cfg.task.classes = parse_int(where, value);
        else if (where == "task.clusters") cfg.task.clusters = parse_int(where, value);
        else if (where == "task.content_dims") cfg.task.content_dims = parse_int(where, value);
        else if (where == "task.train_size") cfg.task.train_size = parse_int(where, value);
        else if (where == "task.val_size") cfg.task.val_size = parse_int(where, value);
        else if (where == "task.test_size") cfg.task.test_size = parse_int(where, value);
        else if (where == "task.source_train_size")
            cfg.task.source_train_size = parse_int(where, value);
        else if (where == "task.cluster_scale") cfg.task.cluster_scale = parse_double(where, value);
        else if (where == "task.token_noise") cfg.task.token_noise = parse_double(where, value);
        else if (where == "task.rule_margin") cfg.task.rule_margin = parse_double(where, value);
        else if (where == "backbone.layers") cfg.layers = parse_int(where, value);
        else if (where == "backbone.ffn_hidden") cfg.ffn_hidden = parse_int(where, value);
        else if (where == "backbone.attention") cfg.attention = parse_bool(where, value);
        else if (where == "backbone.pretrain_epochs") cfg.pretrain_epochs = parse_int(where, value);
        else if (where == "backbone.pretrain_lr") cfg.pretrain_lr = parse_double(where, value);
        else if (where == "backbone.pretrain_batch") cfg.pretrain_batch = parse_int(where, value);
        else if (where == "quantizer.enabled") cfg.quantize_backbone = parse_bool(where, value);
        else if (where == "quantizer.bits") cfg.bits = static_cast<int>(parse_int(where, value));
        else if (where == "quantizer.rounding") cfg.rounding = rounding_from_string(value);
        else if (where == "requant.enabled") cfg.requant_enabled = parse_bool(where, value);
        else if (where == "requant.p") cfg.p = parse_double(where, value);
        else if (where == "requant.interval")
            cfg.interval = static_cast<int>(parse_int(where, value));
        else if (where == "drift.fraction") cfg.drift_fraction = parse_double(where, value);
        else if (where == "drift.sigma_scale") cfg.drift_sigma_scale = parse_double(where, value);
        else if (where == "drift.mu") cfg.drift_mu = parse_double(where, value);
        else if (where == "moe.enabled") cfg.moe_enabled = parse_bool(where, value);
        else if (where == "moe.experts") cfg.experts = parse_int(where, value);
        else if (where == "moe.top_k") cfg.top_k = static_cast<int>(parse_int(where, value));
        else if (where == "moe.post_mask") cfg.post_mask = post_mask_from_string(value);
        else if (where == "side.reduction") cfg.reduction = parse_int(where, value);
        else if (where == "side.layer_drop") cfg.layer_drop = parse_index_list(where, value);
        else if (where == "train.epochs") cfg.epochs = static_cast<int>(parse_int(where, value));
        else if (where == "train.batch") cfg.batch = parse_int(where, value);
        else if (where == "train.lr") cfg.lr = parse_double(where, value);
        else if (where == "train.alpha") cfg.alpha = parse_double(where, value);
        else if (where == "train.beta") cfg.beta = parse_double(where, value);
        else if (where == "train.seed")
            cfg.seed = static_cast<std::uint64_t>(parse_int(where, value));
        else if (where == "memory.activation_bits")
            cfg.activation_bits = static_cast<int>(parse_int(where, value));
        else if (where == "memory.optimizer_copies")
            cfg.optimizer_copies = parse_double(where, value);
        else throw ConfigError("unhandled config key '" + where + "'");
    }
    cfg.validate();
    return cfg;
}

inline std::string serialize_index_list(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

// Canonical rendering; parse(serialize(c)) reproduces c exactly.
inline std::string serialize_config(const RunConfig& c) {
    std::string out;
    auto kv = [&](const char* key, const std::string& value) {
        out += key;
        out += " = ";
        out += value;
        out += '\n';
    };
    out += "[task]\n";
    kv("tokens", std::to_string(c.task.tokens));
    kv("dim", std::to_string(c.task.dim));
    kv("classes", std::to_string(c.task.classes));
    kv("clusters", std::to_string(c.task.clusters));
    kv("content_dims", std::to_string(c.task.content_dims));
    kv("train_size", std::to_string(c.task.train_size));
    kv("val_size", std::to_string(c.task.val_size));
    kv("test_size", std::to_string(c.task.test_size));
    kv("source_train_size", std::to_string(c.task.source_train_size));
    kv("cluster_scale", format_double(c.task.cluster_scale));
    kv("token_noise", format_double(c.task.token_noise));
    kv("rule_margin", format_double(c.task.rule_margin));
    out += "\n[backbone]\n";
    kv("layers", std::to_string(c.layers));
    kv("ffn_hidden", std::to_string(c.ffn_hidden));
    kv("attention", c.attention ? "true" : "false");
    kv("pretrain_epochs", std::to_string(c.pretrain_epochs));
    kv("pretrain_lr", format_double(c.pretrain_lr));
    kv("pretrain_batch", std::to_string(c.pretrain_batch));
    out += "\n[quantizer]\n";
    kv("enabled", c.quantize_backbone ? "true" : "false");
    kv("bits", std::to_string(c.bits));
    kv("rounding", to_string(c.rounding));
    out += "\n[requant]\n";
    kv("enabled", c.requant_enabled ? "true" : "false");
    kv("p", format_double(c.p));
    kv("interval", std::to_string(c.interval));
    out += "\n[drift]\n";
    kv("fraction", format_double(c.drift_fraction));
    kv("sigma_scale", format_double(c.drift_sigma_scale));
    kv("mu", format_double(c.drift_mu));
    out += "\n[moe]\n";
    kv("enabled", c.moe_enabled ? "true" : "false");
    kv("experts", std::to_string(c.experts));
    kv("top_k", std::to_string(c.top_k));
    kv("post_mask", to_string(c.post_mask));
    out += "\n[side]\n";
    kv("reduction", std::to_string(c.reduction));
    kv("layer_drop", serialize_index_list(c.layer_drop));
    out += "\n[train]\n";
    kv("epochs", std::to_string(c.epochs));
    kv("batch", std::to_string(c.batch));
    kv("lr", format_double(c.lr));
    kv("alpha", format_double(c.alpha));
    kv("beta", format_double(c.beta));
    kv("seed", std::to_string(c.seed));
    out += "\n[memory]\n";
    kv("activation_bits", std::to_string(c.activation_bits));
    kv("optimizer_copies", format_double(c.optimizer_copies));
    return out;
}

} // namespace sidemoe
