#pragma once

#include <cstddef>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/rng.hpp"
#include "slicenav/volume.hpp"

// Reduce variable-length volumes to at most max_slices model inputs, with
// padding masks and an index map back to original slice indices.

namespace slicenav {

struct SampledSequence {
    std::string volume_id;
    std::size_t height = 0;
    std::size_t width = 0;
    double spacing_mm = 0.0;            // original inter-slice distance
    double effective_spacing_mm = 0.0;  // spacing * stride of the sampled grid
    std::size_t max_slices = 0;
    std::vector<std::vector<float>> slices;  // max_slices entries, zero-padded tail
    std::vector<std::uint8_t> valid_mask;    // max_slices entries
    std::vector<std::size_t> index_map;      // valid position -> original slice index

    std::size_t n_valid() const { return index_map.size(); }
};

namespace detail {

inline SampledSequence sample_window(const SliceSequence& seq, std::size_t win_start,
                                     std::size_t win_len, std::size_t max_slices) {
    const std::size_t stride = (win_len + max_slices - 1) / max_slices;  // ceil
    SampledSequence out;
    out.volume_id = seq.volume_id;
    out.height = seq.height;
    out.width = seq.width;
    out.spacing_mm = seq.spacing_mm;
    out.effective_spacing_mm = seq.spacing_mm * static_cast<double>(std::max<std::size_t>(stride, 1));
    out.max_slices = max_slices;
    out.slices.assign(max_slices, std::vector<float>(seq.height * seq.width, 0.0f));
    out.valid_mask.assign(max_slices, 0);
    for (std::size_t pos = 0, off = 0; off < win_len && pos < max_slices; ++pos, off += stride) {
        const std::size_t orig = win_start + off;
        out.slices[pos] = seq.slices[orig];
        out.valid_mask[pos] = 1;
        out.index_map.push_back(orig);
    }
    return out;
}

}  // namespace detail

// Uniform stride sampling over the whole volume. The first slice is always
// included; stride = ceil(n / max_slices) so the grid covers the volume with
// the last covered index >= n - stride.
inline SampledSequence uniform_sample(const SliceSequence& seq, std::size_t max_slices) {
    if (max_slices < 2) throw ValidationError("uniform_sample: max_slices must be >= 2");
    return detail::sample_window(seq, 0, seq.n_slices(), max_slices);
}

// Random contiguous window of length uniform in [max(2, n/4), n], then
// uniform sampling within it. index_map refers to original volume indices.
inline SampledSequence subvolume_sample(const SliceSequence& seq, std::size_t max_slices,
                                        Rng& rng) {
    if (max_slices < 2) throw ValidationError("subvolume_sample: max_slices must be >= 2");
    const std::size_t n = seq.n_slices();
    const std::size_t lo = std::max<std::size_t>(2, n / 4);
    const std::size_t len = lo + static_cast<std::size_t>(rng.randint(n - lo + 1));
    const std::size_t start = static_cast<std::size_t>(rng.randint(n - len + 1));
    return detail::sample_window(seq, start, len, max_slices);
}

// Training-time augmentation: fair coin between the two strategies.
// Inference always uses uniform_sample.
inline SampledSequence choose_training_sample(const SliceSequence& seq, std::size_t max_slices,
                                              Rng& rng) {
    return rng.coin() ? uniform_sample(seq, max_slices) : subvolume_sample(seq, max_slices, rng);
}

// Pull per-slice values through the sampled grid's index map.
template <class V>
std::vector<V> gather_by_index_map(const std::vector<V>& per_slice,
                                   const SampledSequence& sampled) {
    std::vector<V> out;
    out.reserve(sampled.n_valid());
    for (const std::size_t idx : sampled.index_map) out.push_back(per_slice[idx]);
    return out;
}

}  // namespace slicenav
