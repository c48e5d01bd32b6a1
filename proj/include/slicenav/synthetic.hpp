#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/supervision.hpp"
#include "slicenav/volume.hpp"

// Families of synthetic slice sequences with known cross-subject
// correspondence. Each subject has a private strictly increasing
// piecewise-linear warp from a canonical [0,100] anatomy axis to physical
// millimeters, a random slice spacing, and a random field of view. Slice
// content encodes the canonical score through a horizontal band whose
// vertical placement and width grow with the score, over a per-subject
// texture. A context-free decoder can read the score from one slice
// (approximately), while the per-subject warp and texture leave headroom
// that only sequence context can close.

namespace slicenav {

struct SyntheticConfig {
    std::size_t n_subjects = 106;
    std::size_t height = 32;
    std::size_t width = 32;
    double canonical_min = 0.0;
    double canonical_max = 100.0;
    std::size_t warp_knots = 7;        // piecewise-linear segments + 1
    double slope_base_mm = 1.5;        // mm of body per canonical unit
    double slope_jitter_min = 0.6;     // per-segment multiplier range
    double slope_jitter_max = 1.4;
    double spacing_min_mm = 4.5;
    double spacing_max_mm = 5.5;
    double fov_low_min = 0.0;          // FOV start sampled in [this, fov_low_max]
    double fov_low_max = 35.0;
    double fov_high_min = 55.0;        // FOV end sampled in [fov_high_min, fov_high_max]
    double fov_high_max = 100.0;
    double noise = 0.015;
    double texture_amp = 0.10;
    double train_fraction = 0.75;
    double val_fraction = 0.06;
    std::uint64_t seed = 7;

    void validate() const {
        if (n_subjects < 2) throw ConfigError("synth: n_subjects must be >= 2");
        if (canonical_max <= canonical_min) throw ConfigError("synth: bad canonical range");
        if (warp_knots < 2) throw ConfigError("synth: warp_knots must be >= 2");
        if (spacing_min_mm <= 0 || spacing_max_mm < spacing_min_mm)
            throw ConfigError("synth: bad spacing range");
        if (fov_low_min > fov_low_max || fov_high_min > fov_high_max)
            throw ConfigError("synth: bad FOV window ranges");
        if (fov_low_max >= fov_high_min) throw ConfigError("synth: FOV ranges overlap");
    }
};

// Strictly increasing piecewise-linear map canonical score -> physical mm.
struct Warp {
    std::vector<double> knots_c;  // canonical knot positions
    std::vector<double> knots_z;  // physical positions, strictly increasing

    double to_mm(double c) const {
        std::size_t seg = 0;
        while (seg + 2 < knots_c.size() && c >= knots_c[seg + 1]) ++seg;
        const double t = (c - knots_c[seg]) / (knots_c[seg + 1] - knots_c[seg]);
        return knots_z[seg] + t * (knots_z[seg + 1] - knots_z[seg]);
    }

    double to_canonical(double z) const {
        std::size_t seg = 0;
        while (seg + 2 < knots_z.size() && z >= knots_z[seg + 1]) ++seg;
        const double t = (z - knots_z[seg]) / (knots_z[seg + 1] - knots_z[seg]);
        return knots_c[seg] + t * (knots_c[seg + 1] - knots_c[seg]);
    }
};

// Per-subject content style: a fixed background texture shared by all the
// subject's slices.
struct SubjectTexture {
    std::vector<double> amp, freq, theta, phase;
};

struct SyntheticVolume {
    SliceSequence seq;
    std::vector<KeySliceLabel> labels;
    std::vector<double> canonical_scores;  // exact generator scores per slice
    Warp warp;
};

namespace detail {

inline double render_pixel(double s_canonical, double canonical_span, std::size_t y, std::size_t x,
                           std::size_t h, std::size_t w, const SubjectTexture& tex) {
    const double u = s_canonical / canonical_span;  // 0..1 along the anatomy axis
    // band placement keeps a ~2.8 sigma margin to the borders so the band
    // mass stays monotone in the score
    const double margin = 0.22 * static_cast<double>(h);
    const double band_center = margin + u * (static_cast<double>(h) - 1.0 - 2.0 * margin);
    const double band_sigma = (1.2 + 1.3 * u) * (static_cast<double>(h) / 32.0);
    const double dy = static_cast<double>(y) - band_center;
    double v = -0.35 + 0.85 * std::exp(-dy * dy / (2.0 * band_sigma * band_sigma));
    for (std::size_t i = 0; i < tex.amp.size(); ++i) {
        const double proj = (static_cast<double>(x) * std::cos(tex.theta[i]) +
                             static_cast<double>(y) * std::sin(tex.theta[i])) /
                            static_cast<double>(w);
        v += tex.amp[i] * std::sin(6.283185307179586 * tex.freq[i] * proj + tex.phase[i]);
    }
    return v;
}

}  // namespace detail

// One subject: warp, spacing, FOV, rendered slices, key labels at the
// canonical key scores that fall inside the FOV. Retries the FOV draw when
// fewer than two keys land inside.
inline SyntheticVolume generate_subject(const SyntheticConfig& cfg, const std::string& volume_id,
                                        Rng& rng) {
    cfg.validate();
    const double span = cfg.canonical_max - cfg.canonical_min;
    const std::map<std::string, double> key_scores = default_key_scores();

    SyntheticVolume vol;
    vol.seq.volume_id = volume_id;
    vol.seq.height = cfg.height;
    vol.seq.width = cfg.width;
    vol.seq.source = VolumeSource::synthetic;

    vol.warp.knots_c.resize(cfg.warp_knots);
    vol.warp.knots_z.resize(cfg.warp_knots);
    for (std::size_t j = 0; j < cfg.warp_knots; ++j)
        vol.warp.knots_c[j] = cfg.canonical_min + span * static_cast<double>(j) /
                                                      static_cast<double>(cfg.warp_knots - 1);
    vol.warp.knots_z[0] = 0.0;
    for (std::size_t j = 1; j < cfg.warp_knots; ++j) {
        const double slope =
            cfg.slope_base_mm * rng.uniform(cfg.slope_jitter_min, cfg.slope_jitter_max);
        vol.warp.knots_z[j] =
            vol.warp.knots_z[j - 1] + slope * (vol.warp.knots_c[j] - vol.warp.knots_c[j - 1]);
    }

    vol.seq.spacing_mm = rng.uniform(cfg.spacing_min_mm, cfg.spacing_max_mm);

    SubjectTexture tex;
    const std::size_t n_tex = 3;
    for (std::size_t i = 0; i < n_tex; ++i) {
        tex.amp.push_back(rng.uniform(0.0, cfg.texture_amp));
        tex.freq.push_back(rng.uniform(0.5, 3.0));
        tex.theta.push_back(rng.uniform(0.0, 3.141592653589793));
        tex.phase.push_back(rng.uniform(0.0, 6.283185307179586));
    }

    double fov_lo = 0.0, fov_hi = 0.0;
    std::vector<std::pair<std::string, double>> keys_inside;
    for (int attempt = 0;; ++attempt) {
        if (attempt >= 20)
            throw ValidationError("generate_subject: could not draw a FOV containing >= 2 keys");
        fov_lo = rng.uniform(cfg.fov_low_min, cfg.fov_low_max);
        fov_hi = rng.uniform(cfg.fov_high_min, cfg.fov_high_max);
        keys_inside.clear();
        for (const auto& [name, score] : key_scores)
            if (score >= fov_lo && score <= fov_hi) keys_inside.emplace_back(name, score);
        if (keys_inside.size() >= 2) break;
    }

    const double z_lo = vol.warp.to_mm(fov_lo);
    const double z_hi = vol.warp.to_mm(fov_hi);
    const std::size_t n_slices =
        static_cast<std::size_t>(std::floor((z_hi - z_lo) / vol.seq.spacing_mm)) + 1;
    if (n_slices < 2) throw ValidationError("generate_subject: FOV too short for 2 slices");

    vol.canonical_scores.resize(n_slices);
    vol.seq.slices.reserve(n_slices);
    for (std::size_t i = 0; i < n_slices; ++i) {
        const double z = z_lo + static_cast<double>(i) * vol.seq.spacing_mm;
        const double s = vol.warp.to_canonical(z);
        vol.canonical_scores[i] = s;
        std::vector<float> img(cfg.height * cfg.width);
        for (std::size_t y = 0; y < cfg.height; ++y)
            for (std::size_t x = 0; x < cfg.width; ++x) {
                double v = detail::render_pixel(s, span, y, x, cfg.height, cfg.width, tex);
                if (cfg.noise > 0.0) v += rng.normal(0.0, cfg.noise);
                img[y * cfg.width + x] = static_cast<float>(std::clamp(v, -1.0, 1.0));
            }
        vol.seq.slices.push_back(std::move(img));
    }

    // key slice = the slice whose canonical score is nearest the key score
    std::sort(keys_inside.begin(), keys_inside.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    for (const auto& [name, score] : keys_inside) {
        std::size_t best = 0;
        double best_d = std::fabs(vol.canonical_scores[0] - score);
        for (std::size_t i = 1; i < n_slices; ++i) {
            const double d = std::fabs(vol.canonical_scores[i] - score);
            if (d < best_d) {
                best_d = d;
                best = i;
            }
        }
        vol.labels.push_back({name, best});
    }
    // adjacent keys can quantize onto the same slice only for extreme
    // spacing configs; drop the later one to keep labels valid
    std::vector<KeySliceLabel> dedup;
    for (const auto& l : vol.labels)
        if (dedup.empty() || l.slice_index > dedup.back().slice_index) dedup.push_back(l);
    vol.labels = std::move(dedup);
    if (vol.labels.size() < 2)
        throw ValidationError("generate_subject: fewer than 2 distinct key slices");
    return vol;
}

struct SyntheticDataset {
    std::vector<SyntheticVolume> train, val, test;

    const std::vector<SyntheticVolume>& split(const std::string& name) const {
        if (name == "train") return train;
        if (name == "val") return val;
        if (name == "test") return test;
        throw ValidationError("unknown split '" + name + "'");
    }
};

// Disjoint train/val/test splits (default proportions 75/6/19).
inline SyntheticDataset generate_dataset(const SyntheticConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const std::size_t n = cfg.n_subjects;
    std::size_t n_train = static_cast<std::size_t>(std::lround(cfg.train_fraction * n));
    std::size_t n_val = static_cast<std::size_t>(std::lround(cfg.val_fraction * n));
    if (n_train + n_val >= n) throw ConfigError("synth: split fractions leave no test subjects");
    SyntheticDataset ds;
    for (std::size_t i = 0; i < n; ++i) {
        char id[32];
        std::snprintf(id, sizeof(id), "synth%03zu", i);
        Rng srng = rng.fork(id);
        SyntheticVolume vol = generate_subject(cfg, id, srng);
        if (i < n_train)
            ds.train.push_back(std::move(vol));
        else if (i < n_train + n_val)
            ds.val.push_back(std::move(vol));
        else
            ds.test.push_back(std::move(vol));
    }
    return ds;
}

// True cross-subject correspondence by composing warps: the target slice
// whose canonical score is nearest the query slice's, or a boundary when the
// query score is outside the target's covered range. This is the exact
// generator-level oracle for localization tests.
inline std::size_t oracle_insertion_position(const SyntheticVolume& query, std::size_t query_slice,
                                             const SyntheticVolume& target) {
    const double s = query.canonical_scores[query_slice];
    return gt_insertion_position(s, target.canonical_scores);
}

}  // namespace slicenav
