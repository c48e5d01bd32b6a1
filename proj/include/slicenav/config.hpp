#pragma once

#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicenav/attention.hpp"
#include "slicenav/bpr.hpp"
#include "slicenav/checkpoint.hpp"
#include "slicenav/encoder.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/losses.hpp"
#include "slicenav/synthetic.hpp"
#include "slicenav/training.hpp"

// Merged view of the default configuration, an optional config file, and
// --set flag overrides (flags win). Unknown keys are rejected. The
// architecture fingerprint covers the keys that determine network semantics
// (model, embedder, pe) and is stable under key reordering because the
// canonical JSON dump sorts object keys.

namespace slicenav {

using json = nlohmann::json;

inline json default_config() {
    return json{
        {"model",
         {{"d", 64},
          {"self_layers", 2},
          {"cross_layers", 2},
          {"heads", 8},
          {"ffn_multiplier", 4}}},
        {"embedder",
         {{"kind", "conv2d_stack"},
          {"input_h", 32},
          {"input_w", 32},
          {"conv_channels", json::array({8, 16, 32})},
          {"mlp_hidden", 128}}},
        {"pe", {{"mode", "absolute"}}},
        {"loss", {{"kind", "kl"}}},
        {"supervision", {{"sigma_mm", 5.0}}},
        {"sampling", {{"max_slices", 256}}},
        {"train",
         {{"epochs", 100},
          {"lr", 1e-4},
          {"pairs_per_epoch", 256},
          {"seed", 1234},
          {"same_subject_prob", 0.2},
          {"val_partners", 2}}},
        {"bpr",
         {{"epochs", 40}, {"lr", 1e-4}, {"slices_per_volume", 8}, {"seed", 1234}}},
        {"synth",
         {{"n_subjects", 106},
          {"height", 32},
          {"width", 32},
          {"warp_knots", 7},
          {"slope_base_mm", 1.5},
          {"slope_jitter_min", 0.6},
          {"slope_jitter_max", 1.4},
          {"spacing_min_mm", 4.5},
          {"spacing_max_mm", 5.5},
          {"fov_low_min", 0.0},
          {"fov_low_max", 35.0},
          {"fov_high_min", 55.0},
          {"fov_high_max", 100.0},
          {"noise", 0.015},
          {"texture_amp", 0.10},
          {"train_fraction", 0.75},
          {"val_fraction", 0.06},
          {"seed", 7}}},
        {"eval", {{"partners", 5}, {"seed", 99}, {"min_cases_per_key", 6}}},
    };
}

namespace detail {

inline void merge_checked(json& base, const json& user, const std::string& prefix) {
    if (!user.is_object())
        throw ConfigError("config: expected an object at '" +
                          (prefix.empty() ? "<root>" : prefix) + "'");
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!base.contains(key)) throw ConfigError("config: unknown key '" + path + "'");
        json& slot = base[key];
        if (slot.is_object()) {
            merge_checked(slot, value, path);
        } else if (slot.is_array()) {
            if (!value.is_array()) throw ConfigError("config: '" + path + "' must be an array");
            slot = value;
        } else if (slot.is_string()) {
            if (!value.is_string()) throw ConfigError("config: '" + path + "' must be a string");
            slot = value;
        } else if (slot.is_boolean()) {
            if (!value.is_boolean()) throw ConfigError("config: '" + path + "' must be a boolean");
            slot = value;
        } else {
            if (!value.is_number()) throw ConfigError("config: '" + path + "' must be a number");
            slot = value;
        }
    }
}

// 256-bit FNV-1a style digest of a string (four 64-bit lanes with distinct
// offsets); a stable non-cryptographic config fingerprint.
inline Fingerprint digest256(const std::string& s) {
    Fingerprint out{};
    const std::uint64_t offsets[4] = {14695981039346656037ull, 0x9ae16a3b2f90404full,
                                      0xc949d7c7509e6557ull, 0xff51afd7ed558ccdull};
    for (int lane = 0; lane < 4; ++lane) {
        std::uint64_t h = offsets[lane];
        for (const char c : s) {
            h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) +
                 static_cast<std::uint64_t>(lane) * 0x100000001b3ull;
            h *= 1099511628211ull;
        }
        for (int b = 0; b < 8; ++b)
            out[static_cast<std::size_t>(lane * 8 + b)] =
                static_cast<std::uint8_t>((h >> (8 * b)) & 0xff);
    }
    return out;
}

}  // namespace detail

class RunConfig {
public:
    RunConfig() : tree_(default_config()) {}

    static RunConfig from_file(const std::string& path) {
        std::ifstream is(path);
        if (!is) throw IoError("cannot open config '" + path + "'");
        json user;
        try {
            is >> user;
        } catch (const json::exception& e) {
            throw ConfigError("config '" + path + "': " + e.what());
        }
        RunConfig cfg;
        detail::merge_checked(cfg.tree_, user, "");
        return cfg;
    }

    // Applies one dotted-path override, e.g. "train.epochs=10" or
    // "embedder.kind=mlp". The value is parsed against the default's type.
    void set_override(const std::string& assignment) {
        const std::size_t eq = assignment.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("--set expects key.path=value, got '" + assignment + "'");
        const std::string path = assignment.substr(0, eq);
        const std::string value = assignment.substr(eq + 1);
        json* slot = &tree_;
        std::size_t start = 0;
        std::string walked;
        while (true) {
            const std::size_t dot = path.find('.', start);
            const std::string part = path.substr(start, dot == std::string::npos
                                                            ? std::string::npos
                                                            : dot - start);
            walked = walked.empty() ? part : walked + "." + part;
            if (!slot->contains(part))
                throw ConfigError("config: unknown key '" + walked + "'");
            slot = &(*slot)[part];
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        if (slot->is_object()) throw ConfigError("config: '" + path + "' is a section, not a key");
        if (slot->is_string()) {
            *slot = value;
        } else {
            json parsed;
            try {
                parsed = json::parse(value);
            } catch (const json::exception&) {
                throw ConfigError("config: cannot parse value '" + value + "' for '" + path + "'");
            }
            json merged = json::object();
            merged["v"] = *slot;
            json user = json::object();
            user["v"] = parsed;
            detail::merge_checked(merged, user, path);
            *slot = merged["v"];
        }
    }

    const json& tree() const { return tree_; }

    template <class V>
    V get(const std::string& dotted) const {
        const json* slot = &tree_;
        std::size_t start = 0;
        while (true) {
            const std::size_t dot = dotted.find('.', start);
            const std::string part = dotted.substr(start, dot == std::string::npos
                                                              ? std::string::npos
                                                              : dot - start);
            if (!slot->contains(part)) throw ConfigError("config: unknown key '" + dotted + "'");
            slot = &(*slot).at(part);
            if (dot == std::string::npos) break;
            start = dot + 1;
        }
        return slot->get<V>();
    }

    InsertionModelConfig model_config() const {
        InsertionModelConfig c;
        c.d = get<std::size_t>("model.d");
        c.self_layers = get<std::size_t>("model.self_layers");
        c.cross_layers = get<std::size_t>("model.cross_layers");
        c.heads = get<std::size_t>("model.heads");
        c.ffn_multiplier = get<std::size_t>("model.ffn_multiplier");
        c.validate();
        return c;
    }

    EmbedderConfig embedder_config() const {
        EmbedderConfig c;
        c.kind = embedder_kind_from_string(get<std::string>("embedder.kind"));
        c.input_h = get<std::size_t>("embedder.input_h");
        c.input_w = get<std::size_t>("embedder.input_w");
        c.embedding_dim = get<std::size_t>("model.d");
        c.conv_channels = get<std::vector<std::size_t>>("embedder.conv_channels");
        c.mlp_hidden = get<std::size_t>("embedder.mlp_hidden");
        return c;
    }

    PEMode pe_mode() const { return pe_mode_from_string(get<std::string>("pe.mode")); }

    TrainConfig train_config() const {
        TrainConfig c;
        c.epochs = get<std::size_t>("train.epochs");
        c.lr = get<double>("train.lr");
        c.loss = loss_kind_from_string(get<std::string>("loss.kind"));
        c.max_slices = get<std::size_t>("sampling.max_slices");
        c.pairs_per_epoch = get<std::size_t>("train.pairs_per_epoch");
        c.seed = get<std::uint64_t>("train.seed");
        c.same_subject_prob = get<double>("train.same_subject_prob");
        c.sigma_mm = get<double>("supervision.sigma_mm");
        c.val_partners = get<std::size_t>("train.val_partners");
        c.validate();
        return c;
    }

    BprTrainConfig bpr_config() const {
        BprTrainConfig c;
        c.epochs = get<std::size_t>("bpr.epochs");
        c.lr = get<double>("bpr.lr");
        c.slices_per_volume = get<std::size_t>("bpr.slices_per_volume");
        c.max_slices = get<std::size_t>("sampling.max_slices");
        c.val_partners = get<std::size_t>("train.val_partners");
        c.seed = get<std::uint64_t>("bpr.seed");
        return c;
    }

    SyntheticConfig synth_config() const {
        SyntheticConfig c;
        c.n_subjects = get<std::size_t>("synth.n_subjects");
        c.height = get<std::size_t>("synth.height");
        c.width = get<std::size_t>("synth.width");
        c.warp_knots = get<std::size_t>("synth.warp_knots");
        c.slope_base_mm = get<double>("synth.slope_base_mm");
        c.slope_jitter_min = get<double>("synth.slope_jitter_min");
        c.slope_jitter_max = get<double>("synth.slope_jitter_max");
        c.spacing_min_mm = get<double>("synth.spacing_min_mm");
        c.spacing_max_mm = get<double>("synth.spacing_max_mm");
        c.fov_low_min = get<double>("synth.fov_low_min");
        c.fov_low_max = get<double>("synth.fov_low_max");
        c.fov_high_min = get<double>("synth.fov_high_min");
        c.fov_high_max = get<double>("synth.fov_high_max");
        c.noise = get<double>("synth.noise");
        c.texture_amp = get<double>("synth.texture_amp");
        c.train_fraction = get<double>("synth.train_fraction");
        c.val_fraction = get<double>("synth.val_fraction");
        c.seed = get<std::uint64_t>("synth.seed");
        c.validate();
        return c;
    }

    // Architecture fingerprint for the insertion network.
    Fingerprint insertion_fingerprint() const {
        json arch;
        arch["arch"] = "insertion";
        arch["model"] = tree_.at("model");
        arch["embedder"] = tree_.at("embedder");
        arch["pe"] = tree_.at("pe");
        return detail::digest256(arch.dump());
    }

    // Architecture fingerprint for the BPR baseline.
    Fingerprint bpr_fingerprint() const {
        json arch;
        arch["arch"] = "bpr";
        arch["model_d"] = tree_.at("model").at("d");
        arch["embedder"] = tree_.at("embedder");
        return detail::digest256(arch.dump());
    }

    // Flat key=default listing for --help.
    static std::vector<std::string> flat_default_listing() {
        std::vector<std::string> out;
        const json defaults = default_config();
        const std::function<void(const json&, const std::string&)> walk =
            [&](const json& node, const std::string& prefix) {
                for (const auto& [key, value] : node.items()) {
                    const std::string path = prefix.empty() ? key : prefix + "." + key;
                    if (value.is_object())
                        walk(value, path);
                    else
                        out.push_back(path + " = " + value.dump());
                }
            };
        walk(defaults, "");
        return out;
    }

private:
    json tree_;
};

}  // namespace slicenav
