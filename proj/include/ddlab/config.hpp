#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ddlab/data.hpp"
#include "ddlab/domaindrop.hpp"
#include "ddlab/losses.hpp"
#include "ddlab/model.hpp"

namespace ddlab {

enum class Variant { Baseline, Dd, DdLt, DdCl, Full };

inline Variant parse_variant(const std::string& s) {
    if (s == "baseline") return Variant::Baseline;
    if (s == "dd") return Variant::Dd;
    if (s == "dd+lt") return Variant::DdLt;
    if (s == "dd+cl") return Variant::DdCl;
    if (s == "full") return Variant::Full;
    throw ConfigError("unknown variant: " + s);
}

inline std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Baseline: return "baseline";
        case Variant::Dd: return "dd";
        case Variant::DdLt: return "dd+lt";
        case Variant::DdCl: return "dd+cl";
        case Variant::Full: return "full";
    }
    return "?";
}

inline bool variant_uses_domaindrop(Variant v) { return v != Variant::Baseline; }
inline bool variant_uses_layerwise(Variant v) { return v == Variant::DdLt || v == Variant::Full; }
inline bool variant_uses_consistency(Variant v) { return v == Variant::DdCl || v == Variant::Full; }

struct TrainConfig {
    std::string dataset_path;
    std::string target_domain = "d3";
    std::string backbone = "conv";  // conv | mlp
    std::size_t epochs = 50;
    std::size_t batch_size = 128;
    double lr = 0.002;
    double momentum = 0.9;
    double weight_decay = 0.0005;
    double val_fraction = 0.1;
    DropConfig drop;          // p_drop 0.33, p_active 0.8, grl 0.25, rescale on
    LossWeights weights;      // consistency 1.5, temperature 5
    std::vector<std::size_t> candidate_layers;  // empty = all middle layers
    Variant variant = Variant::Full;
    std::uint64_t seed = 1;

    void validate() const {
        if (epochs == 0) throw ConfigError("epochs must be >= 1");
        if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
        if (lr <= 0.0) throw ConfigError("lr must be > 0");
        if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (val_fraction < 0.0 || val_fraction >= 1.0)
            throw ConfigError("val_fraction must be in [0,1)");
        if (backbone != "conv" && backbone != "mlp")
            throw ConfigError("backbone must be conv or mlp");
        drop.validate();
        weights.validate();
    }
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "on" || v == "1") return true;
    if (v == "false" || v == "off" || v == "0") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + v + "'");
}

inline std::vector<std::size_t> parse_index_list(const std::string& v, const std::string& key) {
    std::vector<std::size_t> out;
    std::stringstream ss(v);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        tok = trim(tok);
        if (tok.empty()) continue;
        try {
            out.push_back(std::stoul(tok));
        } catch (const std::exception&) {
            throw ConfigError("config key '" + key + "': bad index '" + tok + "'");
        }
    }
    return out;
}

template <typename T>
T parse_number(const std::string& v, const std::string& key) {
    std::stringstream ss(v);
    T out{};
    if (!(ss >> out) || !(ss >> std::ws).eof())
        throw ConfigError("config key '" + key + "': bad value '" + v + "'");
    return out;
}

// Flat key=value files; '#' starts a comment; unknown keys rejected.
inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        if (kv.count(key))
            throw ConfigError(path + ": duplicate key '" + key + "'");
        kv[key] = trim(line.substr(eq + 1));
    }
    return kv;
}

}  // namespace detail

inline TrainConfig load_train_config(const std::string& path) {
    TrainConfig c;
    using detail::parse_bool;
    using detail::parse_number;
    for (const auto& [key, val] : detail::read_kv_file(path)) {
        if (key == "dataset") c.dataset_path = val;
        else if (key == "target_domain") c.target_domain = val;
        else if (key == "backbone") c.backbone = val;
        else if (key == "epochs") c.epochs = parse_number<std::size_t>(val, key);
        else if (key == "batch_size") c.batch_size = parse_number<std::size_t>(val, key);
        else if (key == "lr") c.lr = parse_number<double>(val, key);
        else if (key == "momentum") c.momentum = parse_number<double>(val, key);
        else if (key == "weight_decay") c.weight_decay = parse_number<double>(val, key);
        else if (key == "val_fraction") c.val_fraction = parse_number<double>(val, key);
        else if (key == "p_drop") c.drop.p_drop = parse_number<double>(val, key);
        else if (key == "p_active") c.drop.p_active = parse_number<double>(val, key);
        else if (key == "grl_lambda") {
            c.drop.grl_lambda = parse_number<double>(val, key);
            c.weights.grl_lambda = c.drop.grl_lambda;
        }
        else if (key == "consistency_weight") c.weights.consistency = parse_number<double>(val, key);
        else if (key == "temperature") c.weights.temperature = parse_number<double>(val, key);
        else if (key == "rescale") c.drop.rescale = parse_bool(val, key);
        else if (key == "candidate_layers") c.candidate_layers = detail::parse_index_list(val, key);
        else if (key == "variant") c.variant = parse_variant(val);
        else if (key == "seed") c.seed = parse_number<std::uint64_t>(val, key);
        else throw ConfigError("unknown config key '" + key + "' in " + path);
    }
    c.validate();
    return c;
}

inline DatasetSpec load_dataset_spec(const std::string& path) {
    DatasetSpec s;
    using detail::parse_number;
    for (const auto& [key, val] : detail::read_kv_file(path)) {
        if (key == "domains") s.num_domains = parse_number<std::size_t>(val, key);
        else if (key == "classes") s.num_classes = parse_number<std::size_t>(val, key);
        else if (key == "channels") s.channels = parse_number<std::size_t>(val, key);
        else if (key == "height") s.height = parse_number<std::size_t>(val, key);
        else if (key == "width") s.width = parse_number<std::size_t>(val, key);
        else if (key == "samples_per_domain_per_class")
            s.samples_per_domain_per_class = parse_number<std::size_t>(val, key);
        else if (key == "shift_strength") s.shift_strength = parse_number<double>(val, key);
        else if (key == "noise") s.noise = parse_number<double>(val, key);
        else if (key == "seed") s.seed = parse_number<std::uint64_t>(val, key);
        else throw ConfigError("unknown dataset spec key '" + key + "' in " + path);
    }
    s.validate();
    return s;
}

}  // namespace ddlab
