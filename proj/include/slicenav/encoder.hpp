#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/sampling.hpp"
#include "slicenav/tensor.hpp"

// Context-free slice embedding (conv stack or MLP), artificial boundary
// slice construction, and sinusoidal positional encoding.

namespace slicenav {

enum class EmbedderKind { conv2d_stack, mlp };

inline EmbedderKind embedder_kind_from_string(const std::string& s) {
    if (s == "conv2d_stack") return EmbedderKind::conv2d_stack;
    if (s == "mlp") return EmbedderKind::mlp;
    throw ConfigError("embedder.kind must be 'conv2d_stack' or 'mlp', got '" + s + "'");
}

inline const char* to_string(EmbedderKind k) {
    return k == EmbedderKind::conv2d_stack ? "conv2d_stack" : "mlp";
}

struct EmbedderConfig {
    EmbedderKind kind = EmbedderKind::conv2d_stack;
    std::size_t input_h = 32;
    std::size_t input_w = 32;
    std::size_t embedding_dim = 64;             // must equal the attention model dim
    std::vector<std::size_t> conv_channels = {8, 16, 32};  // stride-2, kernel-3 stages
    std::size_t mlp_hidden = 128;
};

enum class PEMode { absolute, relative };

inline PEMode pe_mode_from_string(const std::string& s) {
    if (s == "absolute") return PEMode::absolute;
    if (s == "relative") return PEMode::relative;
    throw ConfigError("pe.mode must be 'absolute' or 'relative', got '" + s + "'");
}

inline const char* to_string(PEMode m) { return m == PEMode::absolute ? "absolute" : "relative"; }

// PE(pos, k) = sin(pos / 10000^(k/d)) for even k, cos(pos / 10000^((k-1)/d))
// for odd k.
inline std::vector<double> positional_encoding(double pos, std::size_t d) {
    if (d % 2 != 0) throw ConfigError("positional_encoding: dimension must be even, got " +
                                      std::to_string(d));
    std::vector<double> pe(d);
    for (std::size_t k = 0; k < d; k += 2) {
        const double denom = std::pow(10000.0, static_cast<double>(k) / static_cast<double>(d));
        pe[k] = std::sin(pos / denom);
        pe[k + 1] = std::cos(pos / denom);
    }
    return pe;
}

// Artificial boundary slices: start filled with +1, end with -1. They are
// prepended/appended to the target sampled sequence only, giving N+2
// insertion positions.
inline std::pair<std::vector<float>, std::vector<float>> make_boundary_slices(std::size_t h,
                                                                              std::size_t w) {
    return {std::vector<float>(h * w, 1.0f), std::vector<float>(h * w, -1.0f)};
}

// Context-free slice embedder. Both kinds map one H x W slice to a [1, d]
// row; sequences are embedded slice by slice and stacked.
template <class T>
class Embedder {
public:
    Embedder() = default;

    Embedder(const EmbedderConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg_.kind == EmbedderKind::conv2d_stack) {
            std::size_t ch_in = 1;
            std::size_t h = cfg_.input_h, w = cfg_.input_w;
            for (std::size_t li = 0; li < cfg_.conv_channels.size(); ++li) {
                const std::size_t ch_out = cfg_.conv_channels[li];
                Tensor<T> kern = Tensor<T>::zeros({ch_out, ch_in, 3, 3}, true);
                init_kaiming_uniform(kern, ch_in * 9, rng);
                Tensor<T> bias = Tensor<T>::zeros({ch_out}, true);
                conv_kernels_.push_back(kern);
                conv_biases_.push_back(bias);
                ch_in = ch_out;
                h = (h + 2 - 3) / 2 + 1;
                w = (w + 2 - 3) / 2 + 1;
                if (h == 0 || w == 0)
                    throw ConfigError("embedder: conv stack collapses the input to nothing");
            }
            fc_w_ = Tensor<T>::zeros({ch_in, cfg_.embedding_dim}, true);
            init_kaiming_uniform(fc_w_, ch_in, rng);
            fc_b_ = Tensor<T>::zeros({cfg_.embedding_dim}, true);
        } else {
            const std::size_t in = cfg_.input_h * cfg_.input_w;
            fc1_w_ = Tensor<T>::zeros({in, cfg_.mlp_hidden}, true);
            init_kaiming_uniform(fc1_w_, in, rng);
            fc1_b_ = Tensor<T>::zeros({cfg_.mlp_hidden}, true);
            fc_w_ = Tensor<T>::zeros({cfg_.mlp_hidden, cfg_.embedding_dim}, true);
            init_kaiming_uniform(fc_w_, cfg_.mlp_hidden, rng);
            fc_b_ = Tensor<T>::zeros({cfg_.embedding_dim}, true);
        }
    }

    const EmbedderConfig& config() const { return cfg_; }

    // One slice -> [1, d].
    Tensor<T> embed_slice(const std::vector<float>& slice) const {
        if (slice.size() != cfg_.input_h * cfg_.input_w)
            throw ShapeError("embed: slice has " + std::to_string(slice.size()) +
                             " values, expected " +
                             std::to_string(cfg_.input_h * cfg_.input_w));
        if (cfg_.kind == EmbedderKind::conv2d_stack) {
            std::vector<T> vals(slice.begin(), slice.end());
            Tensor<T> x = Tensor<T>::from({1, cfg_.input_h, cfg_.input_w}, std::move(vals));
            for (std::size_t li = 0; li < conv_kernels_.size(); ++li)
                x = relu(conv2d(x, conv_kernels_[li], conv_biases_[li], 2, 1));
            return linear(global_avg_pool(x), fc_w_, fc_b_);
        }
        std::vector<T> vals(slice.begin(), slice.end());
        Tensor<T> x = Tensor<T>::from({1, cfg_.input_h * cfg_.input_w}, std::move(vals));
        return linear(relu(linear(x, fc1_w_, fc1_b_)), fc_w_, fc_b_);
    }

    // Stack of slices -> [n, d].
    Tensor<T> embed_slices(const std::vector<const std::vector<float>*>& slices) const {
        std::vector<Tensor<T>> rows;
        rows.reserve(slices.size());
        for (const auto* s : slices) rows.push_back(embed_slice(*s));
        return concat_rows(rows);
    }

    void collect_params(const std::string& prefix, ParamList<T>& out) {
        if (cfg_.kind == EmbedderKind::conv2d_stack) {
            for (std::size_t li = 0; li < conv_kernels_.size(); ++li) {
                out.emplace_back(prefix + ".conv" + std::to_string(li) + ".weight",
                                 conv_kernels_[li]);
                out.emplace_back(prefix + ".conv" + std::to_string(li) + ".bias",
                                 conv_biases_[li]);
            }
        } else {
            out.emplace_back(prefix + ".fc1.weight", fc1_w_);
            out.emplace_back(prefix + ".fc1.bias", fc1_b_);
        }
        out.emplace_back(prefix + ".fc.weight", fc_w_);
        out.emplace_back(prefix + ".fc.bias", fc_b_);
    }

private:
    EmbedderConfig cfg_;
    std::vector<Tensor<T>> conv_kernels_, conv_biases_;
    Tensor<T> fc1_w_, fc1_b_;  // mlp only
    Tensor<T> fc_w_, fc_b_;
};

// Position values for a query stream: 0, 1, ..., n-1, scaled by the
// effective spacing in relative mode.
inline std::vector<double> pe_positions(std::size_t n, PEMode mode, double effective_spacing_mm) {
    const double step = (mode == PEMode::relative) ? effective_spacing_mm : 1.0;
    if (mode == PEMode::relative && effective_spacing_mm <= 0.0)
        throw ValidationError("relative positional encoding requires a positive effective spacing");
    std::vector<double> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = static_cast<double>(i) * step;
    return pos;
}

// Target stream with boundary slices: positions -1, 0..n-1, n, one step
// outside the valid range on each side, same scaling rule.
inline std::vector<double> pe_positions_with_boundaries(std::size_t n, PEMode mode,
                                                        double effective_spacing_mm) {
    const double step = (mode == PEMode::relative) ? effective_spacing_mm : 1.0;
    if (mode == PEMode::relative && effective_spacing_mm <= 0.0)
        throw ValidationError("relative positional encoding requires a positive effective spacing");
    std::vector<double> pos(n + 2);
    pos[0] = -1.0 * step;
    for (std::size_t i = 0; i < n; ++i) pos[i + 1] = static_cast<double>(i) * step;
    pos[n + 1] = static_cast<double>(n) * step;
    return pos;
}

// Adds PE(pos_i) to row i of the embeddings.
template <class T>
Tensor<T> apply_pe(const Tensor<T>& embeddings, const std::vector<double>& positions) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != positions.size())
        throw ShapeError("apply_pe: " + std::to_string(positions.size()) + " positions vs " +
                         shape_str(embeddings.shape()));
    const std::size_t n = embeddings.dim(0), d = embeddings.dim(1);
    Tensor<T> pe = Tensor<T>::zeros({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const std::vector<double> row = positional_encoding(positions[i], d);
        for (std::size_t j = 0; j < d; ++j) pe.at(i, j) = static_cast<T>(row[j]);
    }
    return add(embeddings, pe);
}

}  // namespace slicenav
