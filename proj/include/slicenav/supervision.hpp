#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/volume.hpp"

// Ground-truth construction: piecewise-linear position scores from key-slice
// labels, nearest-score insertion positions with boundary handling, and
// truncated Gaussian target distributions over the N+2 insertion grid.

namespace slicenav {

// Per-slice anatomical position scores for one volume.
struct PositionScoreMap {
    std::vector<double> scores;  // one per slice, strictly increasing
    std::map<std::string, double> key_scores;
};

// The k-th of the seven keys gets score 10*k by default. Only the relative
// ordering and segment ratios matter to the correspondence math.
inline std::map<std::string, double> default_key_scores(
    const std::vector<std::string>& key_names = default_key_names()) {
    std::map<std::string, double> out;
    for (std::size_t k = 0; k < key_names.size(); ++k)
        out[key_names[k]] = 10.0 * static_cast<double>(k + 1);
    return out;
}

// Truncated, renormalized Gaussian over n_positions insertion slots.
struct InsertionTarget {
    std::vector<double> probs;  // sums to 1 +- 1e-9, mode at center_index
    std::size_t center_index = 0;
    double sigma_index = 0.0;
};

// Linear interpolation between labeled key slices; linear extrapolation
// beyond the first/last key using the adjacent segment's slope.
inline PositionScoreMap interpolate_scores(
    const std::vector<KeySliceLabel>& labels, std::size_t n_slices,
    const std::map<std::string, double>& key_scores = default_key_scores()) {
    if (labels.size() < 2)
        throw ValidationError("interpolate_scores: need >= 2 key labels, got " +
                              std::to_string(labels.size()));
    struct Anchor {
        std::size_t index;
        double score;
    };
    std::vector<Anchor> anchors;
    anchors.reserve(labels.size());
    for (const auto& l : labels) {
        const auto it = key_scores.find(l.key_name);
        if (it == key_scores.end())
            throw ValidationError("interpolate_scores: no score for key '" + l.key_name + "'");
        if (l.slice_index >= n_slices)
            throw ValidationError("interpolate_scores: label index " +
                                  std::to_string(l.slice_index) + " out of range for " +
                                  std::to_string(n_slices) + " slices");
        anchors.push_back({l.slice_index, it->second});
    }
    std::sort(anchors.begin(), anchors.end(),
              [](const Anchor& a, const Anchor& b) { return a.score < b.score; });
    for (std::size_t i = 1; i < anchors.size(); ++i)
        if (anchors[i].index <= anchors[i - 1].index)
            throw ValidationError(
                "interpolate_scores: label indices must strictly increase with anatomical order");

    PositionScoreMap out;
    out.key_scores = key_scores;
    out.scores.resize(n_slices);
    for (std::size_t i = 0; i < n_slices; ++i) {
        // segment whose [index_a, index_b) covers i; clamped segments extrapolate
        std::size_t seg = 0;
        while (seg + 2 < anchors.size() && static_cast<double>(i) >= anchors[seg + 1].index) ++seg;
        const Anchor& a = anchors[seg];
        const Anchor& b = anchors[seg + 1];
        const double t = (static_cast<double>(i) - static_cast<double>(a.index)) /
                         (static_cast<double>(b.index) - static_cast<double>(a.index));
        out.scores[i] = a.score + t * (b.score - a.score);
    }
    return out;
}

constexpr std::size_t kBeforeStart = 0;  // grid position of the artificial starting slice

// Insertion grid position for a query score against the target's sampled
// score grid (N scores): below range -> 0 (start boundary), above range ->
// N+1 (end boundary), otherwise 1 + argmin |query - target_i| with ties to
// the lowest index.
inline std::size_t gt_insertion_position(double query_score,
                                         const std::vector<double>& target_scores) {
    if (target_scores.empty())
        throw ValidationError("gt_insertion_position: empty target score grid");
    double mn = target_scores[0], mx = target_scores[0];
    for (const double s : target_scores) {
        mn = std::min(mn, s);
        mx = std::max(mx, s);
    }
    if (query_score < mn) return 0;
    if (query_score > mx) return target_scores.size() + 1;
    std::size_t best = 0;
    double best_d = std::fabs(query_score - target_scores[0]);
    for (std::size_t i = 1; i < target_scores.size(); ++i) {
        const double d = std::fabs(query_score - target_scores[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best + 1;
}

// p_i proportional to exp(-(i - center)^2 / (2 sigma^2)) over the insertion
// grid, truncated by the grid bounds and renormalized to sum to 1.
inline InsertionTarget gaussian_target(std::size_t center_index, double sigma_index,
                                       std::size_t n_positions) {
    if (sigma_index <= 0.0)
        throw ValidationError("gaussian_target: sigma_index must be positive");
    if (center_index >= n_positions)
        throw ValidationError("gaussian_target: center " + std::to_string(center_index) +
                              " outside grid of " + std::to_string(n_positions));
    InsertionTarget t;
    t.center_index = center_index;
    t.sigma_index = sigma_index;
    t.probs.resize(n_positions);
    double total = 0.0;
    for (std::size_t i = 0; i < n_positions; ++i) {
        const double d = static_cast<double>(i) - static_cast<double>(center_index);
        t.probs[i] = std::exp(-d * d / (2.0 * sigma_index * sigma_index));
        total += t.probs[i];
    }
    for (double& p : t.probs) p /= total;
    return t;
}

// The annotation-uncertainty sigma is specified in millimeters; the target
// distribution lives on the sampled index grid.
inline double sigma_from_mm(double sigma_mm, double effective_spacing_mm) {
    if (effective_spacing_mm <= 0.0)
        throw ValidationError("sigma_from_mm: effective spacing must be positive");
    return sigma_mm / effective_spacing_mm;
}

}  // namespace slicenav
