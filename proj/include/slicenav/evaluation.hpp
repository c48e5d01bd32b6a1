#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slicenav/attention.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/sampling.hpp"
#include "slicenav/supervision.hpp"

// Key-slice localization error, statistical comparison, and attention-map
// export.

namespace slicenav {

// A volume together with its key labels and interpolated score map; the unit
// both training and evaluation operate on.
struct LabeledVolume {
    SliceSequence seq;
    std::vector<KeySliceLabel> labels;
    PositionScoreMap scores;
};

inline LabeledVolume make_labeled_volume(SliceSequence seq, std::vector<KeySliceLabel> labels,
                                         const std::map<std::string, double>& key_scores) {
    LabeledVolume v;
    v.scores = interpolate_scores(labels, seq.n_slices(), key_scores);
    v.seq = std::move(seq);
    v.labels = std::move(labels);
    return v;
}

struct LocalizationResult {
    std::string query_id, target_id, key_name;
    InsertionPosition pred;
    std::size_t gt_grid_position = 0;  // 0..N+1 on the target insertion grid
    bool gt_is_boundary = false;
    bool boundary_correct = false;  // meaningful when gt_is_boundary
    double error_mm = 0.0;          // |pred - gt| grid distance in mm when gt is in range
    double effective_spacing_mm = 0.0;
};

namespace detail {

inline LocalizationResult classify_result(const std::string& query_id,
                                          const std::string& target_id, const std::string& key,
                                          const InsertionPosition& pred, std::size_t gt_grid,
                                          std::size_t n_positions, double spacing) {
    LocalizationResult r;
    r.query_id = query_id;
    r.target_id = target_id;
    r.key_name = key;
    r.pred = pred;
    r.gt_grid_position = gt_grid;
    r.effective_spacing_mm = spacing;
    r.gt_is_boundary = (gt_grid == 0 || gt_grid == n_positions - 1);
    if (r.gt_is_boundary) {
        r.boundary_correct = (pred.grid_position == gt_grid);
        r.error_mm = r.boundary_correct ? 0.0 : -1.0;
    } else {
        const double d = std::fabs(static_cast<double>(pred.grid_position) -
                                   static_cast<double>(gt_grid));
        r.error_mm = d * spacing;
    }
    return r;
}

// Row of the sampled query grid holding (or nearest to) an original index.
inline std::size_t nearest_sampled_row(const SampledSequence& s, std::size_t original_index) {
    std::size_t best = 0;
    long best_d = std::llabs(static_cast<long>(s.index_map[0]) - static_cast<long>(original_index));
    for (std::size_t i = 1; i < s.index_map.size(); ++i) {
        const long d =
            std::llabs(static_cast<long>(s.index_map[i]) - static_cast<long>(original_index));
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return best;
}

}  // namespace detail

// Runs the insertion pipeline once per pair and scores each labeled query
// key slice: in-range ground truth yields a grid-distance error in mm, keys
// whose ground truth falls outside the target FOV are scored as correct iff
// the model emits the matching boundary sentinel.
template <class T>
std::vector<LocalizationResult> localize_keyslices(const InsertionModel<T>& model,
                                                   const LabeledVolume& query,
                                                   const LabeledVolume& target,
                                                   std::size_t max_slices) {
    const SampledSequence qs = uniform_sample(query.seq, max_slices);
    const SampledSequence ts = uniform_sample(target.seq, max_slices);
    const AttentionMap map = model.predict(qs, ts);
    const std::vector<InsertionPosition> preds = argmax_positions(map);
    const std::vector<double> target_scores = gather_by_index_map(target.scores.scores, ts);

    std::vector<LocalizationResult> out;
    out.reserve(query.labels.size());
    for (const auto& label : query.labels) {
        const std::size_t row = detail::nearest_sampled_row(qs, label.slice_index);
        const double qscore = query.scores.scores[qs.index_map[row]];
        const std::size_t gt = gt_insertion_position(qscore, target_scores);
        out.push_back(detail::classify_result(query.seq.volume_id, target.seq.volume_id,
                                              label.key_name, preds[row], gt, map.n_positions,
                                              ts.effective_spacing_mm));
    }
    return out;
}

struct KeyStats {
    std::size_t count = 0;
    double mean = 0.0, median = 0.0, stddev = 0.0;
    std::size_t boundary_count = 0, boundary_correct = 0;
    bool excluded = false;  // too few cases for reliable statistics
};

struct AggregateStats {
    std::map<std::string, KeyStats> per_key;
    double average = 0.0;       // pooled mean over included keys' in-range errors
    std::size_t average_n = 0;  // number of errors pooled into the average
    double mean_spacing_mm = 0.0;
};

// Per-key mean/median/std plus the pooled "Average" over keys with at least
// min_cases in-range results; sparser keys are reported but excluded from
// the pooled statistic, which is unreliable for them.
inline AggregateStats aggregate(const std::vector<LocalizationResult>& results,
                                std::size_t min_cases = 6) {
    std::map<std::string, std::vector<double>> errs;
    AggregateStats agg;
    double spacing_sum = 0.0;
    std::size_t spacing_n = 0;
    for (const auto& r : results) {
        KeyStats& ks = agg.per_key[r.key_name];
        if (r.gt_is_boundary) {
            ks.boundary_count += 1;
            if (r.boundary_correct) ks.boundary_correct += 1;
        } else {
            errs[r.key_name].push_back(r.error_mm);
            spacing_sum += r.effective_spacing_mm;
            spacing_n += 1;
        }
    }
    double pooled_sum = 0.0;
    std::size_t pooled_n = 0;
    for (auto& [key, v] : errs) {
        KeyStats& ks = agg.per_key[key];
        ks.count = v.size();
        double s = 0.0;
        for (const double e : v) s += e;
        ks.mean = s / static_cast<double>(v.size());
        std::vector<double> sorted = v;
        std::sort(sorted.begin(), sorted.end());
        ks.median = (sorted.size() % 2 == 1)
                        ? sorted[sorted.size() / 2]
                        : 0.5 * (sorted[sorted.size() / 2 - 1] + sorted[sorted.size() / 2]);
        double ss = 0.0;
        for (const double e : v) ss += (e - ks.mean) * (e - ks.mean);
        ks.stddev = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
        ks.excluded = v.size() < min_cases;
        if (!ks.excluded) {
            pooled_sum += s;
            pooled_n += v.size();
        }
    }
    agg.average = pooled_n ? pooled_sum / static_cast<double>(pooled_n) : 0.0;
    agg.average_n = pooled_n;
    agg.mean_spacing_mm = spacing_n ? spacing_sum / static_cast<double>(spacing_n) : 0.0;
    return agg;
}

// Two-sided Wilcoxon signed-rank test for paired samples. Zero differences
// are dropped (Wilcoxon's original prescription); all-zero input returns
// p = 1 by convention. Ties in |d| receive average ranks. The exact null
// distribution (equivalent to enumerating all 2^n sign assignments) is used
// for n <= 25; above that a normal approximation with tie correction and no
// continuity correction.
inline double wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw ValidationError("wilcoxon: paired samples must have equal length");
    std::vector<double> diffs;
    diffs.reserve(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    const std::size_t n = diffs.size();
    if (n == 0) return 1.0;

    // average ranks of |d|
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::fabs(diffs[x]) < std::fabs(diffs[y]);
    });
    std::vector<double> ranks(n, 0.0);
    std::vector<std::size_t> tie_sizes;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && std::fabs(diffs[order[j + 1]]) == std::fabs(diffs[order[i]])) ++j;
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j + 1);
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg_rank;
        tie_sizes.push_back(j - i + 1);
        i = j + 1;
    }
    double w_plus = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        if (diffs[i] > 0.0) w_plus += ranks[i];

    if (n <= 25) {
        // doubled ranks are integers even with .5 average ranks; their total
        // is exactly n(n+1)
        std::vector<long> r2(n);
        for (std::size_t i = 0; i < n; ++i) r2[i] = std::lround(2.0 * ranks[i]);
        const long total = static_cast<long>(n * (n + 1));
        std::vector<double> counts(total + 1, 0.0);
        counts[0] = 1.0;
        long reach = 0;
        for (const long r : r2) {
            reach += r;
            for (long s = reach; s >= r; --s) counts[s] += counts[s - r];
        }
        const long w2_plus = std::lround(2.0 * w_plus);
        const long w2_small = std::min(w2_plus, total - w2_plus);
        double tail = 0.0;
        for (long s = 0; s <= w2_small; ++s) tail += counts[s];
        const double p = 2.0 * tail / std::pow(2.0, static_cast<double>(n));
        return std::min(p, 1.0);
    }

    const double nd = static_cast<double>(n);
    const double mean_w = nd * (nd + 1.0) / 4.0;
    double var_w = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0;
    for (const std::size_t t : tie_sizes) {
        const double td = static_cast<double>(t);
        var_w -= (td * td * td - td) / 48.0;
    }
    if (var_w <= 0.0) return 1.0;
    const double z = (w_plus - mean_w) / std::sqrt(var_w);
    return std::erfc(std::fabs(z) / std::sqrt(2.0));
}

// Writes the M x (N+2) matrix as CSV; re-read reproduces it to 1e-6.
inline void export_attention_csv(const AttentionMap& map, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    char buf[32];
    for (std::size_t i = 0; i < map.n_query; ++i) {
        for (std::size_t j = 0; j < map.n_positions; ++j) {
            std::snprintf(buf, sizeof(buf), "%.9g", map.at(i, j));
            os << (j ? "," : "") << buf;
        }
        os << "\n";
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

// Grayscale heatmap, height M and width N+2, scaled by the global maximum.
inline void export_attention_pgm(const AttentionMap& map, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    double mx = 0.0;
    for (const double p : map.probs) mx = std::max(mx, p);
    if (mx <= 0.0) mx = 1.0;
    os << "P5\n" << map.n_positions << " " << map.n_query << "\n255\n";
    for (const double p : map.probs) {
        const int v = static_cast<int>(std::lround(255.0 * p / mx));
        os.put(static_cast<char>(std::clamp(v, 0, 255)));
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

inline void export_attention(const AttentionMap& map, const std::string& base_path) {
    export_attention_csv(map, base_path + ".csv");
    export_attention_pgm(map, base_path + ".pgm");
}

// Deterministic evaluation pairing: each volume as query against `partners`
// seeded distinct partner volumes from the same split.
inline std::vector<std::pair<std::size_t, std::size_t>> make_eval_pairs(std::size_t n_volumes,
                                                                        std::size_t partners,
                                                                        std::uint64_t seed) {
    if (n_volumes < 2) throw ValidationError("make_eval_pairs: need >= 2 volumes");
    Rng rng(seed);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t qi = 0; qi < n_volumes; ++qi) {
        std::vector<std::size_t> others;
        others.reserve(n_volumes - 1);
        for (std::size_t t = 0; t < n_volumes; ++t)
            if (t != qi) others.push_back(t);
        for (std::size_t k = 0; k < partners && !others.empty(); ++k) {
            const std::size_t pick = static_cast<std::size_t>(rng.randint(others.size()));
            pairs.emplace_back(qi, others[pick]);
            others.erase(others.begin() + static_cast<long>(pick));
        }
    }
    return pairs;
}

// Results CSV: volume_pair,key,pred,gt,error_mm. Boundary rows carry the
// sentinel names and an empty error field.
inline void write_results_csv(const std::vector<LocalizationResult>& results,
                              const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "volume_pair,key,pred,gt,error_mm\n";
    char buf[32];
    for (const auto& r : results) {
        os << r.query_id << ":" << r.target_id << "," << r.key_name << ",";
        if (r.pred.kind == PositionKind::inside)
            os << r.pred.grid_position;
        else
            os << to_string(r.pred.kind);
        os << ",";
        if (r.gt_is_boundary)
            os << (r.gt_grid_position == 0 ? "BEFORE_START" : "AFTER_END") << ",";
        else
            os << r.gt_grid_position << ",";
        if (r.gt_is_boundary) {
            os << "\n";
        } else {
            std::snprintf(buf, sizeof(buf), "%.9g", r.error_mm);
            os << buf << "\n";
        }
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

// Reads back the numeric rows of a results CSV keyed by (volume_pair, key).
inline std::map<std::pair<std::string, std::string>, double> read_results_errors(
    const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line) ||
        line.rfind("volume_pair,key,pred,gt,error_mm", 0) != 0)
        throw ValidationError("'" + path + "': not a results CSV");
    std::map<std::pair<std::string, std::string>, double> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string pair_id, key, pred, gt, err;
        std::getline(ss, pair_id, ',');
        std::getline(ss, key, ',');
        std::getline(ss, pred, ',');
        std::getline(ss, gt, ',');
        std::getline(ss, err);
        if (err.empty()) continue;
        out[{pair_id, key}] = std::stod(err);
    }
    return out;
}

// Pairs two result files by (volume_pair, key) and runs the Wilcoxon test on
// the matched in-range errors.
inline double compare_results_wilcoxon(const std::string& path_a, const std::string& path_b,
                                       std::size_t* n_pairs = nullptr) {
    const auto ea = read_results_errors(path_a);
    const auto eb = read_results_errors(path_b);
    std::vector<double> va, vb;
    for (const auto& [k, v] : ea) {
        const auto it = eb.find(k);
        if (it != eb.end()) {
            va.push_back(v);
            vb.push_back(it->second);
        }
    }
    if (n_pairs) *n_pairs = va.size();
    if (va.empty()) throw ValidationError("no overlapping result rows to compare");
    return wilcoxon_signed_rank(va, vb);
}

}  // namespace slicenav
