#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/tensor.hpp"

// Distributional losses between ground-truth (P) and predicted (Q) insertion
// distributions. Plain-double forms for evaluation and oracles, plus
// tape-differentiable forms over predicted rows for training.
//
// A numerical floor of 1e-12 is applied inside every log; it is part of the
// loss contract and guards zeros adjacent to masked positions.

namespace slicenav {

constexpr double kLogFloor = 1e-12;

namespace detail {
inline void check_pair(std::span<const double> p, std::span<const double> q, const char* name) {
    if (p.size() != q.size())
        throw ShapeError(std::string(name) + ": length mismatch " + std::to_string(p.size()) +
                         " vs " + std::to_string(q.size()));
    if (p.empty()) throw ShapeError(std::string(name) + ": empty distributions");
}
}  // namespace detail

// D_KL(P || Q) = sum_i P_i log(P_i / Q_i); >= 0, 0 iff P == Q.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
    detail::check_pair(p, q, "kl_divergence");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc += p[i] * (std::log(p[i]) - std::log(std::max(q[i], kLogFloor)));
    }
    return acc;
}

// Training form: -sum_i P_i log Q_i. Differs from kl_divergence by exactly
// the (constant) entropy of P.
inline double kl_loss(std::span<const double> p, std::span<const double> q) {
    detail::check_pair(p, q, "kl_loss");
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] <= 0.0) continue;
        acc -= p[i] * std::log(std::max(q[i], kLogFloor));
    }
    return acc;
}

inline double entropy(std::span<const double> p) {
    double acc = 0.0;
    for (const double v : p)
        if (v > 0.0) acc -= v * std::log(v);
    return acc;
}

// 1-D Wasserstein-1 via CDF differences on the unit-spaced grid:
// sum_{k} | sum_{i<=k} (P_i - Q_i) |.
inline double emd_loss(std::span<const double> p, std::span<const double> q) {
    detail::check_pair(p, q, "emd_loss");
    double acc = 0.0, cdf = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        cdf += p[i] - q[i];
        acc += std::fabs(cdf);
    }
    return acc;
}

enum class LossKind { kl, emd };

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "kl") return LossKind::kl;
    if (s == "emd") return LossKind::emd;
    throw ConfigError("loss.kind must be 'kl' or 'emd', got '" + s + "'");
}

inline const char* to_string(LossKind k) { return k == LossKind::kl ? "kl" : "emd"; }

// Differentiable batch losses: rows of `predicted` [M,K] against constant
// ground-truth rows; reduction is the mean over query rows.

template <class T>
Tensor<T> kl_loss_rows(const std::vector<std::vector<double>>& targets,
                       const Tensor<T>& predicted) {
    const std::size_t m = predicted.dim(0), k = predicted.dim(1);
    if (targets.size() != m)
        throw ShapeError("kl_loss_rows: " + std::to_string(targets.size()) + " target rows vs " +
                         std::to_string(m) + " predicted");
    Tensor<T> pmat = Tensor<T>::zeros({m, k});
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i].size() != k) throw ShapeError("kl_loss_rows: target row length mismatch");
        for (std::size_t j = 0; j < k; ++j) pmat.at(i, j) = static_cast<T>(targets[i][j]);
    }
    Tensor<T> logq = log_floored(predicted, static_cast<T>(kLogFloor));
    Tensor<T> weighted = mul(pmat, logq);
    return scale(sum(weighted), static_cast<T>(-1.0 / static_cast<double>(m)));
}

template <class T>
Tensor<T> emd_loss_rows(const std::vector<std::vector<double>>& targets,
                        const Tensor<T>& predicted) {
    const std::size_t m = predicted.dim(0), k = predicted.dim(1);
    if (targets.size() != m)
        throw ShapeError("emd_loss_rows: " + std::to_string(targets.size()) + " target rows vs " +
                         std::to_string(m) + " predicted");
    Tensor<T> pmat = Tensor<T>::zeros({m, k});
    for (std::size_t i = 0; i < m; ++i) {
        if (targets[i].size() != k) throw ShapeError("emd_loss_rows: target row length mismatch");
        for (std::size_t j = 0; j < k; ++j) pmat.at(i, j) = static_cast<T>(targets[i][j]);
    }
    Tensor<T> diff = sub(pmat, predicted);
    Tensor<T> cdf = cumsum_rows(diff);
    return scale(sum(absval(cdf)), static_cast<T>(1.0 / static_cast<double>(m)));
}

template <class T>
Tensor<T> loss_rows(LossKind kind, const std::vector<std::vector<double>>& targets,
                    const Tensor<T>& predicted) {
    return kind == LossKind::kl ? kl_loss_rows(targets, predicted)
                                : emd_loss_rows(targets, predicted);
}

}  // namespace slicenav
