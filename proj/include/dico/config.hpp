#pragma once

// Line-oriented `section.key = value` configuration shared by every command.
// Unknown keys are rejected, absent keys fall back to defaults, and the
// cross-field invariants are validated at load time.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dico/error.hpp"

namespace dico {

enum class Precision { F32, F64 };

inline std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

struct ModelConfig {
    int d_raw = 32;  // raw token feature dimension (synthetic data space)
    int d = 64;      // encoded token dimension
    int K = 8;       // slots
    int M = 8;       // concept blocks per slot
    int d_c = 256;   // block dimension
    int d_h = 2048;  // slot dimension, must equal M * d_c
    int K_m = 256;   // prototypes per concept memory
    int T = 3;       // refinement iterations
    double tau_p = 1.0;
    int d_e = 64;    // alignment embedding dimension
    bool operator==(const ModelConfig&) const = default;
};

struct LossConfig {
    double lambda_s = 0.5;
    double lambda_b = 0.5;
    double lambda_r = 0.01;
    double tau_init = 0.07;
    double tau_s_init = 0.07;
    double tau_b_init = 0.07;
    bool bidirectional_local = false;
    bool id_global = true;
    bool id_slot = true;
    bool operator==(const LossConfig&) const = default;
};

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int batch = 32;
    int steps = 2000;
    Precision precision = Precision::F32;
    bool operator==(const OptimConfig&) const = default;
};

struct DataConfig {
    int P = 4;              // body parts
    int F = 2;              // factors per part
    int V = 6;              // values per factor
    int n_ids = 200;        // identities in the universe
    int N = 32;             // image tokens per sample
    double sigma = 0.3;     // image token noise
    double p = 0.3;         // caption drop probability per (part,factor) cell
    int renders_per_id = 4;
    double train_frac = 0.5;
    bool operator==(const DataConfig&) const = default;
};

struct EvalConfig {
    double w_g = 1.0;
    double w_s = 1.0;
    double w_b = 1.0;
    bool operator==(const EvalConfig&) const = default;
};

struct SeedConfig {
    uint64_t model = 1;
    uint64_t data = 7;
    uint64_t train = 13;
    bool operator==(const SeedConfig&) const = default;
};

struct Config {
    ModelConfig model;
    LossConfig loss;
    OptimConfig optim;
    DataConfig data;
    EvalConfig eval;
    SeedConfig seeds;
    bool operator==(const Config&) const = default;

    void validate() const;
    std::string serialize() const;
};

namespace detail {

struct ConfigField {
    const char* key;
    std::function<void(Config&, const std::string&, int line)> set;
    std::function<std::string(const Config&)> get;
};

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

template <typename Int>
Int parse_int(const std::string& v, int line) {
    Int out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(cat("line ", line, ": expected an integer, got '", v, "'"));
    return out;
}

inline double parse_double(const std::string& v, int line) {
    double out{};
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size())
        throw ConfigError(cat("line ", line, ": expected a number, got '", v, "'"));
    return out;
}

inline bool parse_bool(const std::string& v, int line) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError(cat("line ", line, ": expected true/false, got '", v, "'"));
}

inline std::string format_double(double d) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), d);
    (void)ec;
    return std::string(buf, ptr);
}

template <typename Get>
ConfigField field_int(const char* key, Get get) {
    return {key,
            [get](Config& c, const std::string& v, int line) { get(c) = parse_int<int>(v, line); },
            [get](const Config& c) { return std::to_string(get(const_cast<Config&>(c))); }};
}

template <typename Get>
ConfigField field_u64(const char* key, Get get) {
    return {key,
            [get](Config& c, const std::string& v, int line) { get(c) = parse_int<uint64_t>(v, line); },
            [get](const Config& c) { return std::to_string(get(const_cast<Config&>(c))); }};
}

template <typename Get>
ConfigField field_double(const char* key, Get get) {
    return {key,
            [get](Config& c, const std::string& v, int line) { get(c) = parse_double(v, line); },
            [get](const Config& c) { return format_double(get(const_cast<Config&>(c))); }};
}

template <typename Get>
ConfigField field_bool(const char* key, Get get) {
    return {key,
            [get](Config& c, const std::string& v, int line) { get(c) = parse_bool(v, line); },
            [get](const Config& c) { return get(const_cast<Config&>(c)) ? "true" : "false"; }};
}

inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = [] {
        std::vector<ConfigField> f;
        f.push_back(field_int("model.d_raw", [](Config& c) -> int& { return c.model.d_raw; }));
        f.push_back(field_int("model.d", [](Config& c) -> int& { return c.model.d; }));
        f.push_back(field_int("model.K", [](Config& c) -> int& { return c.model.K; }));
        f.push_back(field_int("model.M", [](Config& c) -> int& { return c.model.M; }));
        f.push_back(field_int("model.d_c", [](Config& c) -> int& { return c.model.d_c; }));
        f.push_back(field_int("model.d_h", [](Config& c) -> int& { return c.model.d_h; }));
        f.push_back(field_int("model.K_m", [](Config& c) -> int& { return c.model.K_m; }));
        f.push_back(field_int("model.T", [](Config& c) -> int& { return c.model.T; }));
        f.push_back(field_double("model.tau_p", [](Config& c) -> double& { return c.model.tau_p; }));
        f.push_back(field_int("model.d_e", [](Config& c) -> int& { return c.model.d_e; }));

        f.push_back(field_double("loss.lambda_s", [](Config& c) -> double& { return c.loss.lambda_s; }));
        f.push_back(field_double("loss.lambda_b", [](Config& c) -> double& { return c.loss.lambda_b; }));
        f.push_back(field_double("loss.lambda_r", [](Config& c) -> double& { return c.loss.lambda_r; }));
        f.push_back(field_double("loss.tau_init", [](Config& c) -> double& { return c.loss.tau_init; }));
        f.push_back(field_double("loss.tau_s_init", [](Config& c) -> double& { return c.loss.tau_s_init; }));
        f.push_back(field_double("loss.tau_b_init", [](Config& c) -> double& { return c.loss.tau_b_init; }));
        f.push_back(field_bool("loss.bidirectional_local",
                               [](Config& c) -> bool& { return c.loss.bidirectional_local; }));
        f.push_back(field_bool("loss.id_global", [](Config& c) -> bool& { return c.loss.id_global; }));
        f.push_back(field_bool("loss.id_slot", [](Config& c) -> bool& { return c.loss.id_slot; }));

        f.push_back(field_double("optim.lr", [](Config& c) -> double& { return c.optim.lr; }));
        f.push_back(field_double("optim.beta1", [](Config& c) -> double& { return c.optim.beta1; }));
        f.push_back(field_double("optim.beta2", [](Config& c) -> double& { return c.optim.beta2; }));
        f.push_back(field_double("optim.eps", [](Config& c) -> double& { return c.optim.eps; }));
        f.push_back(field_double("optim.weight_decay",
                                 [](Config& c) -> double& { return c.optim.weight_decay; }));
        f.push_back(field_int("optim.batch", [](Config& c) -> int& { return c.optim.batch; }));
        f.push_back(field_int("optim.steps", [](Config& c) -> int& { return c.optim.steps; }));
        f.push_back({"optim.precision",
                     [](Config& c, const std::string& v, int line) {
                         if (v == "f32") c.optim.precision = Precision::F32;
                         else if (v == "f64") c.optim.precision = Precision::F64;
                         else throw ConfigError(cat("line ", line, ": expected f32 or f64, got '", v, "'"));
                     },
                     [](const Config& c) { return to_string(c.optim.precision); }});

        f.push_back(field_int("data.P", [](Config& c) -> int& { return c.data.P; }));
        f.push_back(field_int("data.F", [](Config& c) -> int& { return c.data.F; }));
        f.push_back(field_int("data.V", [](Config& c) -> int& { return c.data.V; }));
        f.push_back(field_int("data.n_ids", [](Config& c) -> int& { return c.data.n_ids; }));
        f.push_back(field_int("data.N", [](Config& c) -> int& { return c.data.N; }));
        f.push_back(field_double("data.sigma", [](Config& c) -> double& { return c.data.sigma; }));
        f.push_back(field_double("data.p", [](Config& c) -> double& { return c.data.p; }));
        f.push_back(field_int("data.renders_per_id",
                              [](Config& c) -> int& { return c.data.renders_per_id; }));
        f.push_back(field_double("data.train_frac",
                                 [](Config& c) -> double& { return c.data.train_frac; }));

        f.push_back(field_double("eval.w_g", [](Config& c) -> double& { return c.eval.w_g; }));
        f.push_back(field_double("eval.w_s", [](Config& c) -> double& { return c.eval.w_s; }));
        f.push_back(field_double("eval.w_b", [](Config& c) -> double& { return c.eval.w_b; }));

        f.push_back(field_u64("seeds.model", [](Config& c) -> uint64_t& { return c.seeds.model; }));
        f.push_back(field_u64("seeds.data", [](Config& c) -> uint64_t& { return c.seeds.data; }));
        f.push_back(field_u64("seeds.train", [](Config& c) -> uint64_t& { return c.seeds.train; }));
        return f;
    }();
    return fields;
}

inline const ConfigField* find_field(const std::string& key) {
    for (const auto& f : config_fields())
        if (key == f.key) return &f;
    return nullptr;
}

} // namespace detail

inline void Config::validate() const {
    auto positive_dim = [](int v, const char* what) {
        if (v < 1) throw ConfigError(cat("invariant violation: ", what, " must be >= 1, got ", v));
    };
    positive_dim(model.d_raw, "model.d_raw");
    positive_dim(model.d, "model.d");
    positive_dim(model.K, "model.K");
    positive_dim(model.M, "model.M");
    positive_dim(model.d_c, "model.d_c");
    positive_dim(model.K_m, "model.K_m");
    positive_dim(model.T, "model.T");
    positive_dim(model.d_e, "model.d_e");
    positive_dim(data.P, "data.P");
    positive_dim(data.F, "data.F");
    positive_dim(data.V, "data.V");
    positive_dim(data.n_ids, "data.n_ids");
    positive_dim(data.N, "data.N");
    positive_dim(data.renders_per_id, "data.renders_per_id");
    positive_dim(optim.batch, "optim.batch");
    if (optim.steps < 0)
        throw ConfigError(cat("invariant violation: optim.steps must be >= 0, got ", optim.steps));
    if (model.d_h != model.M * model.d_c)
        throw ConfigError(cat("invariant violation: model.d_h (", model.d_h,
                              ") must equal model.M * model.d_c (", model.M * model.d_c, ")"));
    if (!(model.tau_p > 0))
        throw ConfigError("invariant violation: model.tau_p must be > 0");
    auto nonneg = [](double v, const char* what) {
        if (!(v >= 0)) throw ConfigError(cat("invariant violation: ", what, " must be >= 0"));
    };
    nonneg(loss.lambda_s, "loss.lambda_s");
    nonneg(loss.lambda_b, "loss.lambda_b");
    nonneg(loss.lambda_r, "loss.lambda_r");
    nonneg(optim.weight_decay, "optim.weight_decay");
    nonneg(data.sigma, "data.sigma");
    nonneg(eval.w_g, "eval.w_g");
    nonneg(eval.w_s, "eval.w_s");
    nonneg(eval.w_b, "eval.w_b");
    auto positive = [](double v, const char* what) {
        if (!(v > 0)) throw ConfigError(cat("invariant violation: ", what, " must be > 0"));
    };
    positive(loss.tau_init, "loss.tau_init");
    positive(loss.tau_s_init, "loss.tau_s_init");
    positive(loss.tau_b_init, "loss.tau_b_init");
    positive(optim.lr, "optim.lr");
    positive(optim.eps, "optim.eps");
    if (!(optim.beta1 >= 0 && optim.beta1 < 1) || !(optim.beta2 >= 0 && optim.beta2 < 1))
        throw ConfigError("invariant violation: optim.beta1/beta2 must lie in [0,1)");
    if (!(data.p >= 0 && data.p < 1))
        throw ConfigError(cat("invariant violation: data.p must lie in [0,1), got ", data.p));
    if (!(data.train_frac > 0 && data.train_frac < 1))
        throw ConfigError(cat("invariant violation: data.train_frac must lie in (0,1), got ",
                              data.train_frac));
}

inline std::string Config::serialize() const {
    std::ostringstream oss;
    for (const auto& f : detail::config_fields())
        oss << f.key << " = " << f.get(*this) << "\n";
    return oss.str();
}

/// Parses config text. Lines are `section.key = value`; '#' starts a comment.
/// Unknown keys and malformed values raise ConfigError with the line number.
inline Config parse_config_text(const std::string& text) {
    Config cfg;
    std::istringstream in(text);
    std::string raw;
    int line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string line = raw;
        if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(cat("line ", line_no, ": expected 'key = value', got '", raw, "'"));
        const std::string key = detail::trim(line.substr(0, eq));
        const std::string value = detail::trim(line.substr(eq + 1));
        const auto* field = detail::find_field(key);
        if (!field)
            throw ConfigError(cat("line ", line_no, ": unknown key '", key, "'"));
        field->set(cfg, value, line_no);
    }
    cfg.validate();
    return cfg;
}

inline Config parse_config(const std::string& path) {
    std::ifstream in(path);
    if (!in)
        throw ConfigError(cat("cannot open config file '", path, "'"));
    std::ostringstream oss;
    oss << in.rdbuf();
    return parse_config_text(oss.str());
}

} // namespace dico
