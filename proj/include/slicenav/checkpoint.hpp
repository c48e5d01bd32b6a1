#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "slicenav/errors.hpp"
#include "slicenav/tensor.hpp"
#include "slicenav/volume.hpp"

// Checkpoint container: magic "SQCK", version u32, config fingerprint
// (32 bytes), epoch u32, validation metric f64, then length-prefixed
// (name, shape, f32 payload) parameter records, then optimizer records in
// the same framing. Little-endian throughout. Reload reproduces forward
// outputs bit-exactly on identical input.

namespace slicenav {

constexpr std::uint32_t kCheckpointFormatVersion = 1;

using Fingerprint = std::array<std::uint8_t, 32>;

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

struct Checkpoint {
    Fingerprint fingerprint{};
    std::uint32_t epoch = 0;
    double val_metric = 0.0;
    std::vector<TensorRecord> params;
    std::vector<TensorRecord> optimizer;
};

namespace detail {

inline void write_record(std::ostream& os, const TensorRecord& r) {
    write_u32(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    write_u32(os, static_cast<std::uint32_t>(r.shape.size()));
    for (const std::size_t d : r.shape) write_u32(os, static_cast<std::uint32_t>(d));
    write_u64(os, r.data.size());
    os.write(reinterpret_cast<const char*>(r.data.data()),
             static_cast<std::streamsize>(r.data.size() * sizeof(float)));
}

inline TensorRecord read_record(std::istream& is) {
    TensorRecord r;
    const std::uint32_t name_len = read_u32(is, "record name length");
    r.name.resize(name_len);
    if (!is.read(r.name.data(), name_len)) throw IoError("truncated checkpoint record name");
    const std::uint32_t ndim = read_u32(is, "record rank");
    r.shape.resize(ndim);
    for (std::uint32_t i = 0; i < ndim; ++i) r.shape[i] = read_u32(is, "record dim");
    const std::uint64_t count = read_u64(is, "record element count");
    if (shape_numel(r.shape) != count)
        throw ValidationError("checkpoint record '" + r.name + "': shape/count mismatch");
    r.data.resize(count);
    if (!is.read(reinterpret_cast<char*>(r.data.data()),
                 static_cast<std::streamsize>(count * sizeof(float))))
        throw IoError("truncated checkpoint payload in record '" + r.name + "'");
    return r;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os.write("SQCK", 4);
    detail::write_u32(os, kCheckpointFormatVersion);
    os.write(reinterpret_cast<const char*>(ck.fingerprint.data()), 32);
    detail::write_u32(os, ck.epoch);
    detail::write_f64(os, ck.val_metric);
    detail::write_u32(os, static_cast<std::uint32_t>(ck.params.size()));
    for (const auto& r : ck.params) detail::write_record(os, r);
    detail::write_u32(os, static_cast<std::uint32_t>(ck.optimizer.size()));
    for (const auto& r : ck.optimizer) detail::write_record(os, r);
    if (!os) throw IoError("write failure on '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[4] = {};
    if (!is.read(magic, 4)) throw IoError("truncated file '" + path + "': no magic");
    if (std::memcmp(magic, "SQCK", 4) != 0)
        throw ValidationError("'" + path + "': bad magic, not a checkpoint");
    const std::uint32_t version = detail::read_u32(is, "version");
    if (version != kCheckpointFormatVersion)
        throw ValidationError("'" + path + "': unsupported checkpoint version " +
                              std::to_string(version));
    Checkpoint ck;
    if (!is.read(reinterpret_cast<char*>(ck.fingerprint.data()), 32))
        throw IoError("'" + path + "': truncated fingerprint");
    ck.epoch = detail::read_u32(is, "epoch");
    ck.val_metric = detail::read_f64(is, "val metric");
    const std::uint32_t n_params = detail::read_u32(is, "parameter record count");
    ck.params.reserve(n_params);
    for (std::uint32_t i = 0; i < n_params; ++i) ck.params.push_back(detail::read_record(is));
    const std::uint32_t n_opt = detail::read_u32(is, "optimizer record count");
    ck.optimizer.reserve(n_opt);
    for (std::uint32_t i = 0; i < n_opt; ++i) ck.optimizer.push_back(detail::read_record(is));
    return ck;
}

// Snapshot named parameters (f32 payload regardless of the working scalar
// type) together with Adam state.
template <class T>
Checkpoint make_checkpoint(ParamList<T>& params, const AdamState<T>& adam,
                           const Fingerprint& fingerprint, std::uint32_t epoch,
                           double val_metric) {
    Checkpoint ck;
    ck.fingerprint = fingerprint;
    ck.epoch = epoch;
    ck.val_metric = val_metric;
    for (auto& [name, p] : params) {
        TensorRecord r;
        r.name = name;
        r.shape = p.shape();
        r.data.assign(p.value().begin(), p.value().end());
        ck.params.push_back(std::move(r));
    }
    TensorRecord hyper;
    hyper.name = "adam.hyper";
    hyper.shape = {4};
    hyper.data = {static_cast<float>(adam.lr), static_cast<float>(adam.beta1),
                  static_cast<float>(adam.beta2), static_cast<float>(adam.eps)};
    ck.optimizer.push_back(std::move(hyper));
    TensorRecord step;
    step.name = "adam.step";
    step.shape = {1};
    step.data = {static_cast<float>(adam.step_count)};
    ck.optimizer.push_back(std::move(step));
    for (std::size_t i = 0; i < params.size() && i < adam.m.size(); ++i) {
        TensorRecord rm, rv;
        rm.name = "adam.m." + params[i].first;
        rm.shape = params[i].second.shape();
        rm.data.assign(adam.m[i].begin(), adam.m[i].end());
        rv.name = "adam.v." + params[i].first;
        rv.shape = params[i].second.shape();
        rv.data.assign(adam.v[i].begin(), adam.v[i].end());
        ck.optimizer.push_back(std::move(rm));
        ck.optimizer.push_back(std::move(rv));
    }
    return ck;
}

// Copy checkpoint parameters into a live parameter list; names and shapes
// must match exactly.
template <class T>
void restore_params(ParamList<T>& params, const Checkpoint& ck) {
    if (params.size() != ck.params.size())
        throw ValidationError("checkpoint has " + std::to_string(ck.params.size()) +
                              " parameter records, model expects " +
                              std::to_string(params.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& [name, p] = params[i];
        const TensorRecord& r = ck.params[i];
        if (r.name != name)
            throw ValidationError("checkpoint parameter '" + r.name + "' does not match model '" +
                                  name + "'");
        if (r.shape != p.shape())
            throw ValidationError("checkpoint parameter '" + r.name + "': shape " +
                                  shape_str(r.shape) + " does not match model " +
                                  shape_str(p.shape()));
        for (std::size_t j = 0; j < r.data.size(); ++j)
            p.value()[j] = static_cast<T>(r.data[j]);
    }
}

template <class T>
void restore_adam(AdamState<T>& adam, ParamList<T>& params, const Checkpoint& ck) {
    adam.init_for(params);
    for (const TensorRecord& r : ck.optimizer) {
        if (r.name == "adam.hyper" && r.data.size() == 4) {
            adam.lr = r.data[0];
            adam.beta1 = r.data[1];
            adam.beta2 = r.data[2];
            adam.eps = r.data[3];
        } else if (r.name == "adam.step" && r.data.size() == 1) {
            adam.step_count = static_cast<long>(r.data[0]);
        } else if (r.name.rfind("adam.m.", 0) == 0 || r.name.rfind("adam.v.", 0) == 0) {
            const bool is_m = r.name[5] == 'm';
            const std::string pname = r.name.substr(7);
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (params[i].first != pname) continue;
                auto& slot = is_m ? adam.m[i] : adam.v[i];
                if (slot.size() != r.data.size())
                    throw ValidationError("checkpoint optimizer record '" + r.name +
                                          "': size mismatch");
                for (std::size_t j = 0; j < r.data.size(); ++j)
                    slot[j] = static_cast<T>(r.data[j]);
                break;
            }
        }
    }
}

}  // namespace slicenav
