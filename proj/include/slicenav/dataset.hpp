#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "slicenav/errors.hpp"
#include "slicenav/evaluation.hpp"
#include "slicenav/supervision.hpp"
#include "slicenav/synthetic.hpp"
#include "slicenav/volume.hpp"

// Dataset directory layout:
//   <dir>/volumes/<id>.sqiv   volume containers
//   <dir>/labels.csv          key-slice labels
//   <dir>/splits.json         {"train": [ids], "val": [ids], "test": [ids]}
//
// Loaders read only the requested split; the manifest is validated for
// disjointness so training can never touch test volumes.

namespace slicenav {

namespace fs = std::filesystem;

struct SplitManifest {
    std::vector<std::string> train, val, test;
};

inline void save_split_manifest(const SplitManifest& m, const std::string& path) {
    nlohmann::json j;
    j["train"] = m.train;
    j["val"] = m.val;
    j["test"] = m.test;
    std::ofstream os(path);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << j.dump(2) << "\n";
}

inline SplitManifest load_split_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open split manifest '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("split manifest '" + path + "': " + e.what());
    }
    SplitManifest m;
    for (const char* split : {"train", "val", "test"}) {
        if (!j.contains(split))
            throw ValidationError("split manifest '" + path + "': missing '" + split + "'");
    }
    m.train = j["train"].get<std::vector<std::string>>();
    m.val = j["val"].get<std::vector<std::string>>();
    m.test = j["test"].get<std::vector<std::string>>();
    std::set<std::string> seen;
    for (const auto* list : {&m.train, &m.val, &m.test})
        for (const auto& id : *list)
            if (!seen.insert(id).second)
                throw ValidationError("split manifest '" + path + "': volume '" + id +
                                      "' appears in more than one split");
    return m;
}

// Writes a generated dataset to disk in the layout above.
inline void write_dataset(const SyntheticDataset& ds, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "volumes");
    LabelMap labels;
    SplitManifest manifest;
    auto emit = [&](const std::vector<SyntheticVolume>& vols, std::vector<std::string>& ids) {
        for (const auto& v : vols) {
            save_volume(v.seq, (fs::path(dir) / "volumes" / (v.seq.volume_id + ".sqiv")).string());
            labels[v.seq.volume_id] = v.labels;
            ids.push_back(v.seq.volume_id);
        }
    };
    emit(ds.train, manifest.train);
    emit(ds.val, manifest.val);
    emit(ds.test, manifest.test);
    save_labels(labels, (fs::path(dir) / "labels.csv").string());
    save_split_manifest(manifest, (fs::path(dir) / "splits.json").string());
}

// Loads one split as labeled volumes. Volumes with fewer than two key labels
// cannot produce a score map and are excluded with a warning.
inline std::vector<LabeledVolume> load_split(
    const std::string& dir, const std::string& split,
    const std::map<std::string, double>& key_scores = default_key_scores(),
    const std::vector<std::string>& key_names = default_key_names(), std::size_t target_h = 0,
    std::size_t target_w = 0) {
    const SplitManifest manifest =
        load_split_manifest((fs::path(dir) / "splits.json").string());
    const std::vector<std::string>* ids = nullptr;
    if (split == "train")
        ids = &manifest.train;
    else if (split == "val")
        ids = &manifest.val;
    else if (split == "test")
        ids = &manifest.test;
    else
        throw ValidationError("unknown split '" + split + "'");

    const LabelMap labels = load_labels((fs::path(dir) / "labels.csv").string(), key_names);
    std::vector<LabeledVolume> out;
    out.reserve(ids->size());
    for (const std::string& id : *ids) {
        const std::string vpath = (fs::path(dir) / "volumes" / (id + ".sqiv")).string();
        SliceSequence seq = load_volume(vpath, target_h, target_w);
        seq.volume_id = id;
        const auto it = labels.find(id);
        if (it == labels.end() || it->second.size() < 2) {
            std::cerr << "warning: volume '" << id
                      << "' has fewer than 2 key labels, excluded from split '" << split << "'\n";
            continue;
        }
        for (const auto& l : it->second)
            if (l.slice_index >= seq.n_slices())
                throw ValidationError("label for volume '" + id + "' key '" + l.key_name +
                                      "' indexes slice " + std::to_string(l.slice_index) +
                                      " of " + std::to_string(seq.n_slices()));
        out.push_back(make_labeled_volume(std::move(seq), it->second, key_scores));
    }
    return out;
}

}  // namespace slicenav
