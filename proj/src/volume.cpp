#include "uxnet/volume.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace uxnet {

namespace fs = std::filesystem;

std::string to_string(Modality m) {
    switch (m) {
        case Modality::CT: return "CT";
        case Modality::MR: return "MR";
        case Modality::SYNTH: return "SYNTH";
    }
    return "?";
}

Modality modality_from_string(const std::string& s) {
    if (s == "CT") return Modality::CT;
    if (s == "MR") return Modality::MR;
    if (s == "SYNTH") return Modality::SYNTH;
    throw VolumeError("unknown modality \"" + s + "\" (expected CT, MR or SYNTH)");
}

std::string to_string(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "val") return Split::Val;
    if (s == "test") return Split::Test;
    throw VolumeError("unknown split \"" + s + "\" (expected train, val or test)");
}

namespace {

void check_extents(const Extents& e, const char* what) {
    for (int64_t x : e) {
        if (x < 1) {
            throw VolumeError(std::string(what) + " extents must be >= 1, got [" + std::to_string(e[0]) +
                              "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + "]");
        }
    }
}

std::string extents_str(const Extents& e) {
    return "[" + std::to_string(e[0]) + "," + std::to_string(e[1]) + "," + std::to_string(e[2]) + "]";
}

json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw VolumeError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw VolumeError(path + ": invalid JSON: " + e.what());
    }
}

void write_text_atomic(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw VolumeError("cannot write " + tmp);
        out << text;
        if (!out) throw VolumeError("write failed for " + tmp);
    }
    fs::rename(tmp, path);
}

template <typename V>
void write_buffer(const std::string& path, const std::vector<V>& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(V)));
    if (!out) throw VolumeError("write failed for " + path);
}

template <typename V>
std::vector<V> read_buffer(const std::string& path, int64_t expected) {
    std::error_code ec;
    const auto bytes = fs::file_size(path, ec);
    if (ec) throw VolumeError("cannot stat " + path + ": " + ec.message());
    const uint64_t want = static_cast<uint64_t>(expected) * sizeof(V);
    if (bytes != want) {
        throw VolumeError(path + ": buffer holds " + std::to_string(bytes / sizeof(V)) +
                          (bytes % sizeof(V) ? "+" : "") + " elements but the sidecar declares " +
                          std::to_string(expected));
    }
    std::vector<V> data(static_cast<size_t>(expected));
    std::ifstream in(path, std::ios::binary);
    if (!in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(want))) {
        throw VolumeError("read failed for " + path);
    }
    return data;
}

struct Sidecar {
    Extents extents{};
    std::string dtype, kind;
    std::array<double, 3> spacing{1, 1, 1};
    Modality modality = Modality::SYNTH;
};

Sidecar read_sidecar(const std::string& raw_path) {
    const std::string p = sidecar_path(raw_path);
    const json j = read_json_file(p);
    Sidecar s;
    try {
        if (!j.is_object()) throw VolumeError("expected an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            static const std::set<std::string> known{"extents", "dtype", "spacing", "kind", "modality"};
            if (!known.count(it.key())) throw VolumeError("unknown key \"" + it.key() + "\"");
        }
        s.extents = j.at("extents").get<Extents>();
        s.dtype = j.at("dtype").get<std::string>();
        s.kind = j.at("kind").get<std::string>();
        if (j.contains("spacing")) s.spacing = j.at("spacing").get<std::array<double, 3>>();
        if (j.contains("modality")) s.modality = modality_from_string(j.at("modality").get<std::string>());
    } catch (const json::exception& e) {
        throw VolumeError(p + ": " + e.what());
    } catch (const VolumeError& e) {
        throw VolumeError(p + ": " + e.what());
    }
    check_extents(s.extents, p.c_str());
    return s;
}

}  // namespace

Volume::Volume(Extents e, float fill, Modality m)
    : extents(e), data(static_cast<size_t>(extents_numel(e)), fill), modality(m) {
    check_extents(e, "volume");
}

void Volume::validate() const {
    check_extents(extents, "volume");
    if (static_cast<int64_t>(data.size()) != numel()) {
        throw VolumeError("volume buffer has " + std::to_string(data.size()) + " values, extents " +
                          extents_str(extents) + " need " + std::to_string(numel()));
    }
    for (double s : spacing) {
        if (!(s > 0)) throw VolumeError("volume spacing must be > 0 on every axis");
    }
    for (size_t i = 0; i < data.size(); ++i) {
        if (std::isnan(data[i])) throw VolumeError("volume contains NaN at flat index " + std::to_string(i));
    }
}

LabelVolume::LabelVolume(Extents e, int64_t classes, int32_t fill)
    : extents(e), data(static_cast<size_t>(extents_numel(e)), fill), num_classes(classes) {
    check_extents(e, "label volume");
}

void LabelVolume::validate() const {
    check_extents(extents, "label volume");
    if (num_classes < 2) throw VolumeError("label volume needs num_classes >= 2");
    if (static_cast<int64_t>(data.size()) != numel()) {
        throw VolumeError("label buffer has " + std::to_string(data.size()) + " values, extents " +
                          extents_str(extents) + " need " + std::to_string(numel()));
    }
    for (size_t i = 0; i < data.size(); ++i) {
        if (data[i] < 0 || data[i] >= num_classes) {
            throw VolumeError("label value " + std::to_string(data[i]) + " at flat index " + std::to_string(i) +
                              " outside [0, " + std::to_string(num_classes) + ")");
        }
    }
}

std::string sidecar_path(const std::string& raw_path) { return raw_path + ".json"; }

void save_raw(const std::string& path, const Volume& v) {
    v.validate();
    write_buffer(path, v.data);
    json j{{"extents", v.extents},
           {"dtype", "f32"},
           {"spacing", v.spacing},
           {"kind", "image"},
           {"modality", to_string(v.modality)}};
    write_text_atomic(sidecar_path(path), j.dump(2) + "\n");
}

void save_raw(const std::string& path, const LabelVolume& l) {
    l.validate();
    write_buffer(path, l.data);
    json j{{"extents", l.extents}, {"dtype", "i32"}, {"spacing", {1.0, 1.0, 1.0}}, {"kind", "label"}};
    write_text_atomic(sidecar_path(path), j.dump(2) + "\n");
}

Volume load_raw_image(const std::string& path) {
    const Sidecar s = read_sidecar(path);
    if (s.kind != "image" || s.dtype != "f32") {
        throw VolumeError(path + ": expected kind \"image\" with dtype \"f32\", sidecar says \"" + s.kind +
                          "\"/\"" + s.dtype + "\"");
    }
    Volume v;
    v.extents = s.extents;
    v.spacing = s.spacing;
    v.modality = s.modality;
    v.data = read_buffer<float>(path, extents_numel(s.extents));
    try {
        v.validate();
    } catch (const VolumeError& e) {
        throw VolumeError(path + ": " + e.what());
    }
    return v;
}

LabelVolume load_raw_label(const std::string& path, int64_t num_classes) {
    const Sidecar s = read_sidecar(path);
    if (s.kind != "label" || s.dtype != "i32") {
        throw VolumeError(path + ": expected kind \"label\" with dtype \"i32\", sidecar says \"" + s.kind +
                          "\"/\"" + s.dtype + "\"");
    }
    LabelVolume l;
    l.extents = s.extents;
    l.num_classes = num_classes;
    l.data = read_buffer<int32_t>(path, extents_numel(s.extents));
    try {
        l.validate();
    } catch (const VolumeError& e) {
        throw VolumeError(path + ": " + e.what());
    }
    return l;
}

// ---- manifest ---------------------------------------------------------------

std::vector<ManifestEntry> DatasetManifest::split(Split s) const {
    std::vector<ManifestEntry> out;
    for (const auto& e : entries) {
        if (e.split == s) out.push_back(e);
    }
    return out;
}

DataConfig DatasetManifest::data_config(const std::string& manifest_path) const {
    DataConfig d;
    d.manifest = manifest_path;
    d.clip = clip;
    d.percentiles = percentiles;
    return d;
}

DatasetManifest load_manifest(const std::string& path) {
    const json j = read_json_file(path);
    const fs::path dir = fs::path(path).parent_path();
    DatasetManifest m;
    try {
        if (!j.is_object()) throw VolumeError("expected an object");
        for (auto it = j.begin(); it != j.end(); ++it) {
            static const std::set<std::string> known{"entries", "num_classes", "clip", "percentiles"};
            if (!known.count(it.key())) throw VolumeError("unknown key \"" + it.key() + "\"");
        }
        m.num_classes = j.at("num_classes").get<int64_t>();
        if (j.contains("clip") && !j.at("clip").is_null()) m.clip = j.at("clip").get<std::array<double, 2>>();
        if (j.contains("percentiles")) m.percentiles = j.at("percentiles").get<std::array<double, 2>>();
        for (const auto& e : j.at("entries")) {
            ManifestEntry me;
            me.image = (dir / e.at("image").get<std::string>()).string();
            me.label = (dir / e.at("label").get<std::string>()).string();
            me.split = split_from_string(e.at("split").get<std::string>());
            m.entries.push_back(std::move(me));
        }
    } catch (const json::exception& e) {
        throw VolumeError(path + ": " + e.what());
    } catch (const VolumeError& e) {
        throw VolumeError(path + ": " + e.what());
    }
    if (m.num_classes < 2) throw VolumeError(path + ": num_classes must be >= 2");
    if (m.clip && !((*m.clip)[0] < (*m.clip)[1])) throw VolumeError(path + ": clip window needs lo < hi");
    std::set<std::string> seen;
    for (const auto& e : m.entries) {
        for (const auto* p : {&e.image, &e.label}) {
            if (!fs::exists(*p)) throw VolumeError(path + ": missing file " + *p);
        }
        if (!seen.insert(fs::weakly_canonical(e.image).string()).second) {
            throw VolumeError(path + ": image " + e.image + " is listed more than once");
        }
    }
    return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
    const fs::path dir = fs::path(path).parent_path();
    json entries = json::array();
    for (const auto& e : m.entries) {
        entries.push_back({{"image", fs::relative(e.image, dir).generic_string()},
                           {"label", fs::relative(e.label, dir).generic_string()},
                           {"split", to_string(e.split)}});
    }
    json j{{"num_classes", m.num_classes},
           {"clip", m.clip ? json(*m.clip) : json(nullptr)},
           {"percentiles", m.percentiles},
           {"entries", entries}};
    write_text_atomic(path, j.dump(2) + "\n");
}

}  // namespace uxnet
