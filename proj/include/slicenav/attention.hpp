#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "slicenav/encoder.hpp"
#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/sampling.hpp"
#include "slicenav/tensor.hpp"

// Transformer self-attention over each sequence, cross-attention from query
// to target, final Q/K projections, and the insertion distribution head.
//
// The self-attention stack is shared between the query and target streams
// (one encoder applied to both); cross-attention layers then enrich the
// query stream with target context. Layers are post-norm. The final head
// computes Q K^T / sqrt(d) and a masked row softmax over the N+2 target
// positions; boundary positions are never masked by the model.

namespace slicenav {

struct InsertionModelConfig {
    std::size_t d = 64;
    std::size_t self_layers = 2;
    std::size_t cross_layers = 2;
    std::size_t heads = 8;
    std::size_t ffn_multiplier = 4;

    void validate() const {
        if (d == 0 || heads == 0 || d % heads != 0)
            throw ConfigError("model: d (" + std::to_string(d) + ") must be divisible by heads (" +
                              std::to_string(heads) + ")");
        if (d % 2 != 0) throw ConfigError("model: d must be even for positional encoding");
    }
};

// Predicted row-stochastic insertion probabilities plus the index maps that
// tie matrix coordinates back to original slice indices.
struct AttentionMap {
    std::size_t n_query = 0;       // M rows
    std::size_t n_positions = 0;   // N+2 columns
    std::vector<double> probs;     // row-major M x (N+2)
    std::vector<std::size_t> query_index_map;   // row -> original query slice index
    std::vector<std::size_t> target_index_map;  // target grid slot (1..N) -> original index
    double query_effective_spacing_mm = 0.0;
    double target_effective_spacing_mm = 0.0;

    double at(std::size_t i, std::size_t j) const { return probs[i * n_positions + j]; }
};

enum class PositionKind { before_start, inside, after_end };

inline const char* to_string(PositionKind k) {
    switch (k) {
        case PositionKind::before_start: return "BEFORE_START";
        case PositionKind::inside: return "INSIDE";
        default: return "AFTER_END";
    }
}

struct InsertionPosition {
    PositionKind kind = PositionKind::inside;
    std::size_t grid_position = 0;       // argmax over the N+2 grid
    long target_slice_index = -1;        // original target slice index when inside
};

template <class T>
struct TransformerLayerParams {
    Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
    Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
    Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;

    TransformerLayerParams() = default;

    TransformerLayerParams(std::size_t d, std::size_t ffn_mult, Rng& rng) {
        auto proj = [&](Tensor<T>& w, Tensor<T>& b, std::size_t in, std::size_t out) {
            w = Tensor<T>::zeros({in, out}, true);
            init_kaiming_uniform(w, in, rng);
            b = Tensor<T>::zeros({out}, true);
        };
        proj(wq, bq, d, d);
        proj(wk, bk, d, d);
        proj(wv, bv, d, d);
        proj(wo, bo, d, d);
        proj(ffn_w1, ffn_b1, d, ffn_mult * d);
        proj(ffn_w2, ffn_b2, ffn_mult * d, d);
        ln1_g = Tensor<T>::full({d}, T(1), true);
        ln1_b = Tensor<T>::zeros({d}, true);
        ln2_g = Tensor<T>::full({d}, T(1), true);
        ln2_b = Tensor<T>::zeros({d}, true);
    }

    void collect(const std::string& prefix, ParamList<T>& out) {
        out.emplace_back(prefix + ".wq", wq);
        out.emplace_back(prefix + ".bq", bq);
        out.emplace_back(prefix + ".wk", wk);
        out.emplace_back(prefix + ".bk", bk);
        out.emplace_back(prefix + ".wv", wv);
        out.emplace_back(prefix + ".bv", bv);
        out.emplace_back(prefix + ".wo", wo);
        out.emplace_back(prefix + ".bo", bo);
        out.emplace_back(prefix + ".ln1.gain", ln1_g);
        out.emplace_back(prefix + ".ln1.bias", ln1_b);
        out.emplace_back(prefix + ".ln2.gain", ln2_g);
        out.emplace_back(prefix + ".ln2.bias", ln2_b);
        out.emplace_back(prefix + ".ffn.w1", ffn_w1);
        out.emplace_back(prefix + ".ffn.b1", ffn_b1);
        out.emplace_back(prefix + ".ffn.w2", ffn_w2);
        out.emplace_back(prefix + ".ffn.b2", ffn_b2);
    }
};

// Multi-head attention with queries from `q_in` [m,d] and keys/values from
// `kv_in` [n,d]; `kv_mask` hides key/value positions from every query.
template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& q_in, const Tensor<T>& kv_in,
                               const TransformerLayerParams<T>& p, std::size_t heads,
                               const std::vector<std::uint8_t>& kv_mask = {}) {
    const std::size_t d = q_in.dim(1);
    if (d % heads != 0) throw ConfigError("attention: d not divisible by heads");
    const std::size_t dh = d / heads;
    const Tensor<T> q = linear(q_in, p.wq, p.bq);
    const Tensor<T> k = linear(kv_in, p.wk, p.bk);
    const Tensor<T> v = linear(kv_in, p.wv, p.bv);
    const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Tensor<T> qh = slice_cols(q, h * dh, (h + 1) * dh);
        const Tensor<T> kh = slice_cols(k, h * dh, (h + 1) * dh);
        const Tensor<T> vh = slice_cols(v, h * dh, (h + 1) * dh);
        const Tensor<T> scores = scale(matmul_nt(qh, kh), inv_sqrt_dh);
        const Tensor<T> attn = softmax(scores, kv_mask);
        head_outs.push_back(matmul(attn, vh));
    }
    return linear(concat_cols(head_outs), p.wo, p.bo);
}

// One post-norm transformer encoder layer over `x` with keys/values from
// `kv` (self-attention when kv == x).
template <class T>
Tensor<T> transformer_layer(const Tensor<T>& x, const Tensor<T>& kv,
                            const TransformerLayerParams<T>& p, std::size_t heads,
                            const std::vector<std::uint8_t>& kv_mask = {}) {
    const Tensor<T> attended = multi_head_attention(x, kv, p, heads, kv_mask);
    const Tensor<T> h1 = layer_norm(add(x, attended), p.ln1_g, p.ln1_b);
    const Tensor<T> f = linear(relu(linear(h1, p.ffn_w1, p.ffn_b1)), p.ffn_w2, p.ffn_b2);
    return layer_norm(add(h1, f), p.ln2_g, p.ln2_b);
}

// Stack of self-attention layers; masked positions neither attend out (their
// outputs are ignored downstream) nor are attended to (the key mask hides
// them from valid rows).
template <class T>
Tensor<T> self_encode(const Tensor<T>& embeddings,
                      const std::vector<TransformerLayerParams<T>>& layers, std::size_t heads,
                      const std::vector<std::uint8_t>& mask = {}) {
    Tensor<T> x = embeddings;
    for (const auto& p : layers) x = transformer_layer(x, x, p, heads, mask);
    return x;
}

// Cross-attention stack: queries from the query stream, keys/values from the
// (already self-encoded) target stream.
template <class T>
Tensor<T> cross_attend(const Tensor<T>& query_ctx, const Tensor<T>& target_ctx,
                       const std::vector<TransformerLayerParams<T>>& layers, std::size_t heads,
                       const std::vector<std::uint8_t>& target_mask = {}) {
    Tensor<T> x = query_ctx;
    for (const auto& p : layers) x = transformer_layer(x, target_ctx, p, heads, target_mask);
    return x;
}

// Final insertion head: logits = Q K^T / sqrt(d), masked row softmax.
template <class T>
Tensor<T> insertion_distribution(const Tensor<T>& q_final, const Tensor<T>& k_final,
                                 const std::vector<std::uint8_t>& target_mask = {}) {
    if (q_final.dim(1) != k_final.dim(1))
        throw ShapeError("insertion_distribution: query dim " + shape_str(q_final.shape()) +
                         " vs key dim " + shape_str(k_final.shape()));
    const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q_final.dim(1))));
    const Tensor<T> logits = scale(matmul_nt(q_final, k_final), inv_sqrt_d);
    try {
        return softmax(logits, target_mask);
    } catch (const ValidationError&) {
        throw ValidationError("insertion_distribution: all target positions masked");
    }
}

// The full insertion network.
template <class T>
class InsertionModel {
public:
    InsertionModel() = default;

    InsertionModel(const InsertionModelConfig& mcfg, const EmbedderConfig& ecfg, PEMode pe_mode,
                   std::uint64_t seed)
        : mcfg_(mcfg), pe_mode_(pe_mode) {
        mcfg_.validate();
        if (ecfg.embedding_dim != mcfg_.d)
            throw ConfigError("embedder dim " + std::to_string(ecfg.embedding_dim) +
                              " must equal model d " + std::to_string(mcfg_.d));
        Rng rng(seed);
        Rng erng = rng.fork("embedder");
        embedder_ = Embedder<T>(ecfg, erng);
        Rng lrng = rng.fork("layers");
        for (std::size_t i = 0; i < mcfg_.self_layers; ++i)
            self_layers_.emplace_back(mcfg_.d, mcfg_.ffn_multiplier, lrng);
        for (std::size_t i = 0; i < mcfg_.cross_layers; ++i)
            cross_layers_.emplace_back(mcfg_.d, mcfg_.ffn_multiplier, lrng);
        Rng prng = rng.fork("proj");
        wq_final_ = Tensor<T>::zeros({mcfg_.d, mcfg_.d}, true);
        init_kaiming_uniform(wq_final_, mcfg_.d, prng);
        bq_final_ = Tensor<T>::zeros({mcfg_.d}, true);
        wk_final_ = Tensor<T>::zeros({mcfg_.d, mcfg_.d}, true);
        init_kaiming_uniform(wk_final_, mcfg_.d, prng);
        bk_final_ = Tensor<T>::zeros({mcfg_.d}, true);
    }

    const InsertionModelConfig& config() const { return mcfg_; }
    const EmbedderConfig& embedder_config() const { return embedder_.config(); }
    PEMode pe_mode() const { return pe_mode_; }
    const Embedder<T>& embedder() const { return embedder_; }

    ParamList<T> named_params() {
        ParamList<T> out;
        embedder_.collect_params("embedder", out);
        for (std::size_t i = 0; i < self_layers_.size(); ++i)
            self_layers_[i].collect("self" + std::to_string(i), out);
        for (std::size_t i = 0; i < cross_layers_.size(); ++i)
            cross_layers_[i].collect("cross" + std::to_string(i), out);
        out.emplace_back("proj.q.weight", wq_final_);
        out.emplace_back("proj.q.bias", bq_final_);
        out.emplace_back("proj.k.weight", wk_final_);
        out.emplace_back("proj.k.bias", bk_final_);
        return out;
    }

    // Differentiable forward over compacted (valid-only) sampled sequences.
    // Returns the [M, N+2] row-stochastic attention matrix; computation over
    // padded positions is skipped because masked attention provably zeroes
    // their contribution.
    Tensor<T> forward(const SampledSequence& query, const SampledSequence& target) const {
        const std::size_t m = query.n_valid();
        const std::size_t n = target.n_valid();
        if (m == 0 || n == 0)
            throw ValidationError("insertion forward: empty query or target sequence");

        std::vector<const std::vector<float>*> q_slices;
        q_slices.reserve(m);
        for (std::size_t i = 0; i < m; ++i) q_slices.push_back(&query.slices[i]);

        const auto [start_slice, end_slice] = make_boundary_slices(target.height, target.width);
        std::vector<const std::vector<float>*> t_slices;
        t_slices.reserve(n + 2);
        t_slices.push_back(&start_slice);
        for (std::size_t i = 0; i < n; ++i) t_slices.push_back(&target.slices[i]);
        t_slices.push_back(&end_slice);

        Tensor<T> q_emb = embedder_.embed_slices(q_slices);
        Tensor<T> t_emb = embedder_.embed_slices(t_slices);
        q_emb = apply_pe(q_emb, pe_positions(m, pe_mode_, query.effective_spacing_mm));
        t_emb = apply_pe(t_emb,
                         pe_positions_with_boundaries(n, pe_mode_, target.effective_spacing_mm));

        const Tensor<T> q_ctx = self_encode(q_emb, self_layers_, mcfg_.heads);
        const Tensor<T> t_ctx = self_encode(t_emb, self_layers_, mcfg_.heads);
        const Tensor<T> enriched = cross_attend(q_ctx, t_ctx, cross_layers_, mcfg_.heads);
        const Tensor<T> q_final = linear(enriched, wq_final_, bq_final_);
        const Tensor<T> k_final = linear(t_ctx, wk_final_, bk_final_);
        return insertion_distribution(q_final, k_final);
    }

    // Inference: forward without a tape, packaged with index maps.
    AttentionMap predict(const SampledSequence& query, const SampledSequence& target) const {
        const Tensor<T> probs = forward(query, target);
        AttentionMap map;
        map.n_query = probs.dim(0);
        map.n_positions = probs.dim(1);
        map.probs.resize(map.n_query * map.n_positions);
        for (std::size_t i = 0; i < map.probs.size(); ++i)
            map.probs[i] = static_cast<double>(probs.at(i));
        map.query_index_map = query.index_map;
        map.target_index_map = target.index_map;
        map.query_effective_spacing_mm = query.effective_spacing_mm;
        map.target_effective_spacing_mm = target.effective_spacing_mm;
        return map;
    }

private:
    InsertionModelConfig mcfg_;
    PEMode pe_mode_ = PEMode::absolute;
    Embedder<T> embedder_;
    std::vector<TransformerLayerParams<T>> self_layers_;
    std::vector<TransformerLayerParams<T>> cross_layers_;
    Tensor<T> wq_final_, bq_final_, wk_final_, bk_final_;
};

// Per-row argmax of the attention map, with boundary grid positions reported
// as BEFORE_START / AFTER_END sentinels.
inline std::vector<InsertionPosition> argmax_positions(const AttentionMap& map) {
    std::vector<InsertionPosition> out;
    out.reserve(map.n_query);
    for (std::size_t i = 0; i < map.n_query; ++i) {
        std::size_t best = 0;
        double best_p = map.at(i, 0);
        for (std::size_t j = 1; j < map.n_positions; ++j)
            if (map.at(i, j) > best_p) {
                best_p = map.at(i, j);
                best = j;
            }
        InsertionPosition pos;
        pos.grid_position = best;
        if (best == 0) {
            pos.kind = PositionKind::before_start;
        } else if (best == map.n_positions - 1) {
            pos.kind = PositionKind::after_end;
        } else {
            pos.kind = PositionKind::inside;
            pos.target_slice_index = static_cast<long>(map.target_index_map[best - 1]);
        }
        out.push_back(pos);
    }
    return out;
}

// End-to-end pipeline on full volumes: uniform sampling (inference rule),
// embed, encode, cross-attend, project, normalize, argmax.
template <class T>
std::pair<AttentionMap, std::vector<InsertionPosition>> predict_insertion(
    const SliceSequence& query, const SliceSequence& target, const InsertionModel<T>& model,
    std::size_t max_slices) {
    const SampledSequence qs = uniform_sample(query, max_slices);
    const SampledSequence ts = uniform_sample(target, max_slices);
    AttentionMap map = model.predict(qs, ts);
    std::vector<InsertionPosition> pos = argmax_positions(map);
    return {std::move(map), std::move(pos)};
}

}  // namespace slicenav
