#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"

// Volume and label ingestion plus the on-disk container format.
//
// Container layout (little-endian): magic "SQIV", version u32, H u32, W u32,
// n_slices u32, spacing_mm f64, window_low f64, window_high f64, then
// n_slices * H * W f32 values, slice-major. Values are normalized at load so
// the live intensity range is [-1, 1]: the window maps linearly onto it and
// out-of-window values clamp. A window of exactly (-1, 1) is the identity,
// which keeps save/load bit-exact for data already in model range.

namespace slicenav {

enum class VolumeSource { real, synthetic };

// Ordered stack of 2D slices, superior to inferior, uniform H x W,
// values in [-1, 1].
struct SliceSequence {
    std::string volume_id;
    std::size_t height = 0;
    std::size_t width = 0;
    double spacing_mm = 0.0;
    VolumeSource source = VolumeSource::synthetic;
    std::vector<std::vector<float>> slices;  // each H*W, row-major

    std::size_t n_slices() const { return slices.size(); }

    void validate() const {
        if (slices.size() < 2)
            throw ValidationError("volume '" + volume_id + "': needs >= 2 slices");
        if (spacing_mm <= 0.0)
            throw ValidationError("volume '" + volume_id + "': spacing_mm must be positive");
        for (const auto& s : slices)
            if (s.size() != height * width)
                throw ValidationError("volume '" + volume_id + "': slice size mismatch");
    }
};

struct KeySliceLabel {
    std::string key_name;
    std::size_t slice_index = 0;
};

// The seven key anatomies, superior to inferior. Only the ordering matters
// to the math; the names are configurable.
inline const std::vector<std::string>& default_key_names() {
    static const std::vector<std::string> names = {
        "head_end",    "lung_apex",   "carina",         "liver_dome",
        "kidney_lower", "iliac_crest", "pubic_symphysis"};
    return names;
}

namespace detail {

inline void write_u32(std::ostream& os, std::uint32_t v) {
    os.write(reinterpret_cast<const char*>(&v), 4);
}
inline void write_f64(std::ostream& os, double v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}
inline void write_u64(std::ostream& os, std::uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), 8);
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
    std::uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4))
        throw IoError(std::string("truncated file while reading ") + what);
    return v;
}
inline double read_f64(std::istream& is, const char* what) {
    double v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw IoError(std::string("truncated file while reading ") + what);
    return v;
}
inline std::uint64_t read_u64(std::istream& is, const char* what) {
    std::uint64_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8))
        throw IoError(std::string("truncated file while reading ") + what);
    return v;
}

inline std::string stem_of(const std::string& path) {
    const std::size_t slash = path.find_last_of("/\\");
    std::string base = (slash == std::string::npos) ? path : path.substr(slash + 1);
    const std::size_t dot = base.find_last_of('.');
    return (dot == std::string::npos) ? base : base.substr(0, dot);
}

}  // namespace detail

constexpr std::uint32_t kVolumeFormatVersion = 1;

// The sequence is written as-is (model range) with window (-1, 1).
// Externally prepared raw data can carry any window; see load_volume.
inline void save_volume(const SliceSequence& seq, const std::string& path) {
    seq.validate();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write("SQIV", 4);
    detail::write_u32(os, kVolumeFormatVersion);
    detail::write_u32(os, static_cast<std::uint32_t>(seq.height));
    detail::write_u32(os, static_cast<std::uint32_t>(seq.width));
    detail::write_u32(os, static_cast<std::uint32_t>(seq.n_slices()));
    detail::write_f64(os, seq.spacing_mm);
    detail::write_f64(os, -1.0);
    detail::write_f64(os, 1.0);
    for (const auto& s : seq.slices)
        os.write(reinterpret_cast<const char*>(s.data()),
                 static_cast<std::streamsize>(s.size() * sizeof(float)));
    if (!os) throw IoError("write failure on '" + path + "'");
}

// Area-average downsampling to (target_h, target_w); exact when dimensions
// divide evenly, weighted box filter otherwise.
inline std::vector<float> downsample_area(const std::vector<float>& src, std::size_t h,
                                          std::size_t w, std::size_t th, std::size_t tw) {
    std::vector<float> out(th * tw, 0.0f);
    const double sy = static_cast<double>(h) / static_cast<double>(th);
    const double sx = static_cast<double>(w) / static_cast<double>(tw);
    for (std::size_t oy = 0; oy < th; ++oy) {
        const double y0 = oy * sy, y1 = (oy + 1) * sy;
        for (std::size_t ox = 0; ox < tw; ++ox) {
            const double x0 = ox * sx, x1 = (ox + 1) * sx;
            double acc = 0.0, area = 0.0;
            for (std::size_t iy = static_cast<std::size_t>(y0); iy < h && iy < y1; ++iy) {
                const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
                for (std::size_t ix = static_cast<std::size_t>(x0); ix < w && ix < x1; ++ix) {
                    const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
                    acc += wy * wx * src[iy * w + ix];
                    area += wy * wx;
                }
            }
            out[oy * tw + ox] = static_cast<float>(acc / area);
        }
    }
    return out;
}

// Loads a container file; values are rescaled to [-1, 1] by the stored
// intensity window and clamped. When target_h/target_w are nonzero and differ
// from the stored dims, slices are area-averaged down at load.
inline SliceSequence load_volume(const std::string& path, std::size_t target_h = 0,
                                 std::size_t target_w = 0) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4] = {};
    if (!is.read(magic, 4)) throw IoError("truncated file '" + path + "': no magic");
    if (std::memcmp(magic, "SQIV", 4) != 0)
        throw ValidationError("'" + path + "': bad magic, not a volume container");
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != kVolumeFormatVersion)
        throw ValidationError("'" + path + "': unsupported version " + std::to_string(version));
    SliceSequence seq;
    seq.volume_id = detail::stem_of(path);
    seq.height = detail::read_u32(is, "height");
    seq.width = detail::read_u32(is, "width");
    const std::uint32_t n_slices = detail::read_u32(is, "n_slices");
    seq.spacing_mm = detail::read_f64(is, "spacing_mm");
    const double wlo = detail::read_f64(is, "window_low");
    const double whi = detail::read_f64(is, "window_high");
    if (seq.spacing_mm <= 0.0)
        throw ValidationError("'" + path + "': non-positive spacing_mm");
    if (n_slices < 2) throw ValidationError("'" + path + "': fewer than 2 slices");
    if (seq.height == 0 || seq.width == 0)
        throw ValidationError("'" + path + "': zero slice dimensions");
    if (whi <= wlo) throw ValidationError("'" + path + "': degenerate intensity window");

    const bool identity_window = (wlo == -1.0 && whi == 1.0);
    const std::size_t hw = seq.height * seq.width;
    seq.slices.reserve(n_slices);
    for (std::uint32_t k = 0; k < n_slices; ++k) {
        std::vector<float> s(hw);
        if (!is.read(reinterpret_cast<char*>(s.data()),
                     static_cast<std::streamsize>(hw * sizeof(float))))
            throw IoError("'" + path + "': truncated payload (slice " + std::to_string(k) + " of " +
                          std::to_string(n_slices) + ")");
        if (!identity_window) {
            const double scale = 2.0 / (whi - wlo);
            for (float& v : s) {
                double x = -1.0 + (static_cast<double>(v) - wlo) * scale;
                x = std::clamp(x, -1.0, 1.0);
                v = static_cast<float>(x);
            }
        }
        seq.slices.push_back(std::move(s));
    }
    if (target_h != 0 && target_w != 0 && (target_h != seq.height || target_w != seq.width)) {
        for (auto& s : seq.slices)
            s = downsample_area(s, seq.height, seq.width, target_h, target_w);
        seq.height = target_h;
        seq.width = target_w;
    }
    seq.source = VolumeSource::real;
    seq.validate();
    return seq;
}

using LabelMap = std::map<std::string, std::vector<KeySliceLabel>>;

// CSV with header volume_id,key_name,slice_index. Key names are checked
// against `key_names`, duplicates per (volume, key) rejected, and indices
// range-checked against the registry of volume slice counts when provided.
inline LabelMap load_labels(const std::string& path,
                            const std::vector<std::string>& key_names = default_key_names(),
                            const std::map<std::string, std::size_t>& volume_registry = {}) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw ValidationError("'" + path + "': empty label file");
    auto strip = [](std::string s) {
        while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
        return s;
    };
    if (strip(line) != "volume_id,key_name,slice_index")
        throw ValidationError("'" + path + "': expected header volume_id,key_name,slice_index");
    LabelMap out;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        line = strip(line);
        if (line.empty()) continue;
        std::istringstream ss(line);
        std::string vol, key, idx_s;
        if (!std::getline(ss, vol, ',') || !std::getline(ss, key, ',') ||
            !std::getline(ss, idx_s))
            throw ValidationError("'" + path + "' line " + std::to_string(lineno) +
                                  ": expected 3 fields");
        if (std::find(key_names.begin(), key_names.end(), key) == key_names.end())
            throw ValidationError("'" + path + "' line " + std::to_string(lineno) +
                                  ": unknown key_name '" + key + "'");
        std::size_t idx = 0;
        try {
            idx = static_cast<std::size_t>(std::stoul(idx_s));
        } catch (const std::exception&) {
            throw ValidationError("'" + path + "' line " + std::to_string(lineno) +
                                  ": bad slice_index '" + idx_s + "'");
        }
        for (const auto& existing : out[vol])
            if (existing.key_name == key)
                throw ValidationError("'" + path + "' line " + std::to_string(lineno) +
                                      ": duplicate key '" + key + "' for volume '" + vol + "'");
        if (!volume_registry.empty()) {
            const auto it = volume_registry.find(vol);
            if (it != volume_registry.end() && idx >= it->second)
                throw ValidationError("'" + path + "' line " + std::to_string(lineno) +
                                      ": slice_index " + std::to_string(idx) +
                                      " out of range for volume '" + vol + "' with " +
                                      std::to_string(it->second) + " slices");
        }
        out[vol].push_back({key, idx});
    }
    return out;
}

inline void save_labels(const LabelMap& labels, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "volume_id,key_name,slice_index\n";
    for (const auto& [vol, rows] : labels)
        for (const auto& r : rows) os << vol << "," << r.key_name << "," << r.slice_index << "\n";
    if (!os) throw IoError("write failure on '" + path + "'");
}

}  // namespace slicenav
