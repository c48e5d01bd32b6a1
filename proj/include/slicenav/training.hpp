#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "slicenav/attention.hpp"
#include "slicenav/bpr.hpp"
#include "slicenav/checkpoint.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/evaluation.hpp"
#include "slicenav/losses.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/sampling.hpp"
#include "slicenav/supervision.hpp"

// End-to-end supervised training for the insertion network: pair
// construction with Gaussian-smoothed attention supervision, per-pair Adam
// steps, per-epoch validation localization error, best-epoch checkpointing,
// and deterministic metric logs.

namespace slicenav {

struct TrainConfig {
    std::size_t epochs = 100;
    double lr = 1e-4;
    LossKind loss = LossKind::kl;
    std::size_t max_slices = 256;
    std::size_t pairs_per_epoch = 256;
    std::uint64_t seed = 1234;
    double same_subject_prob = 0.2;  // same volume, different samplings
    double sigma_mm = 5.0;
    std::size_t val_partners = 2;

    void validate() const {
        if (epochs == 0) throw ConfigError("train: epochs must be positive");
        if (lr <= 0.0) throw ConfigError("train: lr must be positive");
        if (pairs_per_epoch == 0) throw ConfigError("train: pairs_per_epoch must be positive");
    }
};

struct TrainingPair {
    SampledSequence query, target;
    std::vector<InsertionTarget> targets;  // one per valid query row
};

// Two volumes (distinct subjects, or the same volume under different
// samplings with probability same_subject_prob), sampled by the training
// strategy coin, with per-query-slice Gaussian insertion targets computed
// against the target's sampled score grid.
inline TrainingPair make_training_pair(const std::vector<LabeledVolume>& volumes,
                                       const TrainConfig& cfg, Rng& rng) {
    if (volumes.empty()) throw ValidationError("make_training_pair: no volumes");
    const std::size_t qi = static_cast<std::size_t>(rng.randint(volumes.size()));
    std::size_t ti = qi;
    if (volumes.size() > 1 && rng.uniform() >= cfg.same_subject_prob) {
        while (ti == qi) ti = static_cast<std::size_t>(rng.randint(volumes.size()));
    }
    TrainingPair pair;
    pair.query = choose_training_sample(volumes[qi].seq, cfg.max_slices, rng);
    pair.target = choose_training_sample(volumes[ti].seq, cfg.max_slices, rng);

    const std::vector<double> q_scores =
        gather_by_index_map(volumes[qi].scores.scores, pair.query);
    const std::vector<double> t_scores =
        gather_by_index_map(volumes[ti].scores.scores, pair.target);
    const double sigma_index = sigma_from_mm(cfg.sigma_mm, pair.target.effective_spacing_mm);
    const std::size_t n_positions = pair.target.n_valid() + 2;
    pair.targets.reserve(q_scores.size());
    for (const double qs : q_scores) {
        const std::size_t center = gt_insertion_position(qs, t_scores);
        pair.targets.push_back(gaussian_target(center, sigma_index, n_positions));
    }
    return pair;
}

struct TrainResult {
    std::vector<EpochMetrics> metrics;
    std::size_t best_epoch = 0;
    double best_val_error = 0.0;
    Checkpoint best_checkpoint;
};

// Mean in-range key localization error (mm) over fixed seeded validation
// pairs; the same metric the test evaluation reports.
template <class T>
double validation_error(const InsertionModel<T>& model, const std::vector<LabeledVolume>& vols,
                        const std::vector<std::pair<std::size_t, std::size_t>>& pairs,
                        std::size_t max_slices) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& [qi, ti] : pairs) {
        const auto rs = localize_keyslices(model, vols[qi], vols[ti], max_slices);
        for (const auto& r : rs)
            if (!r.gt_is_boundary) {
                sum += r.error_mm;
                n += 1;
            }
    }
    return n ? sum / static_cast<double>(n) : std::numeric_limits<double>::infinity();
}

inline void write_metrics_csv(const std::vector<EpochMetrics>& metrics, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "epoch,train_loss,val_error_mm\n";
    char buf[80];
    for (const auto& m : metrics) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g,%.9g\n", m.epoch, m.train_loss, m.val_error_mm);
        os << buf;
    }
    if (!os) throw IoError("write failure on '" + path + "'");
}

// Trains in place. Per epoch: pairs_per_epoch pairs, loss = mean over query
// rows, one Adam step per pair; then validation error, metric row, and a
// checkpoint snapshot whenever the validation error strictly improves (so
// the kept checkpoint is exactly the argmin of the logged errors, first
// minimum on ties). A non-finite loss aborts with the last-good best
// checkpoint retained in the result.
template <class T>
TrainResult train(InsertionModel<T>& model, const std::vector<LabeledVolume>& train_vols,
                  const std::vector<LabeledVolume>& val_vols, const TrainConfig& cfg,
                  const Fingerprint& fingerprint,
                  const std::string& metrics_path = std::string()) {
    cfg.validate();
    if (train_vols.empty()) throw ValidationError("train: no training volumes");
    ParamList<T> params = model.named_params();
    AdamState<T> adam;
    adam.lr = cfg.lr;
    adam.init_for(params);
    Rng rng(cfg.seed);
    Rng pair_rng = rng.fork("pairs");
    Rng val_rng = rng.fork("val-pairs");

    std::vector<std::pair<std::size_t, std::size_t>> val_pairs;
    if (val_vols.size() >= 2)
        val_pairs = make_eval_pairs(val_vols.size(), cfg.val_partners, val_rng.next_u64());

    TrainResult result;
    result.best_val_error = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        for (std::size_t pi = 0; pi < cfg.pairs_per_epoch; ++pi) {
            const TrainingPair pair = make_training_pair(train_vols, cfg, pair_rng);
            std::vector<std::vector<double>> rows;
            rows.reserve(pair.targets.size());
            for (const auto& t : pair.targets) rows.push_back(t.probs);

            Tape<T> tape;
            TapeScope<T> scope(tape);
            zero_grads(params);
            Tensor<T> probs = model.forward(pair.query, pair.target);
            Tensor<T> loss = loss_rows(cfg.loss, rows, probs);
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv))
                throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) +
                                   " pair " + std::to_string(pi));
            backward(loss);
            adam_step(params, adam);
            loss_sum += lv;
        }

        const double val_err = val_pairs.empty()
                                   ? loss_sum / static_cast<double>(cfg.pairs_per_epoch)
                                   : validation_error(model, val_vols, val_pairs, cfg.max_slices);
        result.metrics.push_back(
            {epoch, loss_sum / static_cast<double>(cfg.pairs_per_epoch), val_err});
        if (val_err < result.best_val_error) {
            result.best_val_error = val_err;
            result.best_epoch = epoch;
            result.best_checkpoint = make_checkpoint(params, adam, fingerprint,
                                                     static_cast<std::uint32_t>(epoch), val_err);
        }
        if (!metrics_path.empty()) write_metrics_csv(result.metrics, metrics_path);
    }
    return result;
}

}  // namespace slicenav
