#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "slicenav/checkpoint.hpp"
#include "slicenav/encoder.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/evaluation.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/tensor.hpp"

// Supervised body part regression baseline: a context-free per-slice scalar
// score regressor sharing the embedder architecture, trained with L1 loss on
// the same interpolated ground-truth position scores. Its predictions for a
// slice are identical regardless of which volume or ordering the slice
// appears in; that context-freeness is exactly what the insertion network is
// designed to beat.

namespace slicenav {

template <class T>
class BprModel {
public:
    BprModel() = default;

    BprModel(const EmbedderConfig& ecfg, std::uint64_t seed) {
        Rng rng(seed);
        Rng erng = rng.fork("embedder");
        embedder_ = Embedder<T>(ecfg, erng);
        Rng hrng = rng.fork("head");
        head_w_ = Tensor<T>::zeros({ecfg.embedding_dim, 1}, true);
        init_kaiming_uniform(head_w_, ecfg.embedding_dim, hrng);
        head_b_ = Tensor<T>::zeros({1}, true);
    }

    const EmbedderConfig& embedder_config() const { return embedder_.config(); }

    // Differentiable scores for a batch of slices -> [n, 1].
    Tensor<T> score_rows(const std::vector<const std::vector<float>*>& slices) const {
        return linear(embedder_.embed_slices(slices), head_w_, head_b_);
    }

    double predict_score(const std::vector<float>& slice) const {
        const Tensor<T> s = linear(embedder_.embed_slice(slice), head_w_, head_b_);
        return static_cast<double>(s.at(0));
    }

    std::vector<double> predict_scores(const SampledSequence& sampled) const {
        std::vector<double> out;
        out.reserve(sampled.n_valid());
        for (std::size_t i = 0; i < sampled.n_valid(); ++i)
            out.push_back(predict_score(sampled.slices[i]));
        return out;
    }

    ParamList<T> named_params() {
        ParamList<T> out;
        embedder_.collect_params("embedder", out);
        out.emplace_back("head.weight", head_w_);
        out.emplace_back("head.bias", head_b_);
        return out;
    }

private:
    Embedder<T> embedder_;
    Tensor<T> head_w_, head_b_;
};

// Nearest predicted score wins; queries beyond the target's predicted score
// range by more than one mean inter-slice score gap map to the boundary
// sentinels. The gap rule is a documented stand-in: BPR has no boundary
// construct of its own. Positions use the same N+2 grid convention as the
// insertion head; ties go to the lowest index.
inline InsertionPosition bpr_position_from_scores(double query_score,
                                                  const std::vector<double>& target_scores,
                                                  const std::vector<std::size_t>& index_map) {
    if (target_scores.empty()) throw ValidationError("bpr_localize: empty target");
    double mn = target_scores[0], mx = target_scores[0];
    for (const double s : target_scores) {
        mn = std::min(mn, s);
        mx = std::max(mx, s);
    }
    const double gap = target_scores.size() > 1
                           ? (mx - mn) / static_cast<double>(target_scores.size() - 1)
                           : 0.0;
    InsertionPosition pos;
    if (query_score < mn - gap) {
        pos.kind = PositionKind::before_start;
        pos.grid_position = 0;
        return pos;
    }
    if (query_score > mx + gap) {
        pos.kind = PositionKind::after_end;
        pos.grid_position = target_scores.size() + 1;
        return pos;
    }
    std::size_t best = 0;
    double best_d = std::fabs(query_score - target_scores[0]);
    for (std::size_t i = 1; i < target_scores.size(); ++i) {
        const double d = std::fabs(query_score - target_scores[i]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    pos.kind = PositionKind::inside;
    pos.grid_position = best + 1;
    if (!index_map.empty()) pos.target_slice_index = static_cast<long>(index_map[best]);
    return pos;
}

template <class T>
InsertionPosition bpr_localize(double query_score, const SampledSequence& target,
                               const BprModel<T>& model) {
    return bpr_position_from_scores(query_score, model.predict_scores(target), target.index_map);
}

// Localization results for every labeled query key slice against one target,
// mirroring the insertion-network evaluation path.
template <class T>
std::vector<LocalizationResult> bpr_localize_keyslices(const BprModel<T>& model,
                                                       const LabeledVolume& query,
                                                       const LabeledVolume& target,
                                                       std::size_t max_slices) {
    const SampledSequence ts = uniform_sample(target.seq, max_slices);
    const std::vector<double> target_gt_scores = gather_by_index_map(target.scores.scores, ts);
    const std::vector<double> target_pred_scores = model.predict_scores(ts);
    std::vector<LocalizationResult> out;
    out.reserve(query.labels.size());
    for (const auto& label : query.labels) {
        const double q_pred = model.predict_score(query.seq.slices[label.slice_index]);
        const double q_gt = query.scores.scores[label.slice_index];
        const std::size_t gt = gt_insertion_position(q_gt, target_gt_scores);
        const InsertionPosition pos =
            bpr_position_from_scores(q_pred, target_pred_scores, ts.index_map);
        out.push_back(detail::classify_result(query.seq.volume_id, target.seq.volume_id,
                                              label.key_name, pos, gt,
                                              target_pred_scores.size() + 2,
                                              ts.effective_spacing_mm));
    }
    return out;
}

struct BprTrainConfig {
    std::size_t epochs = 40;
    double lr = 1e-4;
    std::size_t slices_per_volume = 8;
    std::size_t max_slices = 256;  // validation sampling
    std::size_t val_partners = 2;
    std::uint64_t seed = 1234;
};

struct EpochMetrics {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_error_mm = 0.0;
};

struct BprTrainResult {
    std::vector<EpochMetrics> metrics;
    std::size_t best_epoch = 0;
    double best_val_error = 0.0;
    Checkpoint best_checkpoint;
};

// L1 regression of per-slice scores; best epoch by validation localization
// error over seeded val pairs.
template <class T>
BprTrainResult bpr_train(BprModel<T>& model, const std::vector<LabeledVolume>& train_vols,
                         const std::vector<LabeledVolume>& val_vols, const BprTrainConfig& cfg,
                         const Fingerprint& fingerprint) {
    if (train_vols.empty()) throw ValidationError("bpr_train: no training volumes");
    ParamList<T> params = model.named_params();
    AdamState<T> adam;
    adam.lr = cfg.lr;
    adam.init_for(params);
    Rng rng(cfg.seed);
    Rng val_rng = rng.fork("val-pairs");

    std::vector<std::pair<std::size_t, std::size_t>> val_pairs;
    if (val_vols.size() >= 2)
        val_pairs = make_eval_pairs(val_vols.size(), cfg.val_partners, val_rng.next_u64());

    BprTrainResult result;
    result.best_val_error = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        double loss_sum = 0.0;
        std::size_t loss_n = 0;
        for (std::size_t vi = 0; vi < train_vols.size(); ++vi) {
            const LabeledVolume& vol = train_vols[vi];
            std::vector<const std::vector<float>*> batch;
            std::vector<std::vector<double>> gts;
            for (std::size_t k = 0; k < cfg.slices_per_volume; ++k) {
                const std::size_t idx =
                    static_cast<std::size_t>(rng.randint(vol.seq.n_slices()));
                batch.push_back(&vol.seq.slices[idx]);
                gts.push_back({vol.scores.scores[idx]});
            }
            Tape<T> tape;
            TapeScope<T> scope(tape);
            zero_grads(params);
            Tensor<T> pred = model.score_rows(batch);
            Tensor<T> gt = Tensor<T>::zeros({batch.size(), 1});
            for (std::size_t k = 0; k < batch.size(); ++k)
                gt.at(k, 0) = static_cast<T>(gts[k][0]);
            Tensor<T> loss = mean(absval(sub(pred, gt)));
            const double lv = static_cast<double>(loss.item());
            if (!std::isfinite(lv)) throw NumericError("bpr_train: non-finite loss");
            backward(loss);
            adam_step(params, adam);
            loss_sum += lv;
            loss_n += 1;
        }

        double val_err = 0.0;
        std::size_t val_n = 0;
        for (const auto& [qi, ti] : val_pairs) {
            const auto rs =
                bpr_localize_keyslices(model, val_vols[qi], val_vols[ti], cfg.max_slices);
            for (const auto& r : rs)
                if (!r.gt_is_boundary) {
                    val_err += r.error_mm;
                    val_n += 1;
                }
        }
        val_err = val_n ? val_err / static_cast<double>(val_n)
                        : loss_sum / static_cast<double>(std::max<std::size_t>(loss_n, 1));

        result.metrics.push_back({epoch, loss_sum / static_cast<double>(loss_n), val_err});
        if (val_err < result.best_val_error) {
            result.best_val_error = val_err;
            result.best_epoch = epoch;
            result.best_checkpoint = make_checkpoint(params, adam, fingerprint,
                                                     static_cast<std::uint32_t>(epoch), val_err);
        }
    }
    return result;
}

}  // namespace slicenav
