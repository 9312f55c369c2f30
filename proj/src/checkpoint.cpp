#include "uxnet/checkpoint.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

namespace uxnet {

namespace {

constexpr char kMagic[4] = {'U', 'X', 'C', 'K'};
constexpr uint32_t kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

template <typename T>
const char* dtype_name() {
    return dtype_of<T>() == DType::F32 ? "f32" : "f64";
}

template <typename V>
void put(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V take(std::istream& is, const std::string& path) {
    V v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof(V))) {
        throw CheckpointError("checkpoint " + path + " is truncated (header)");
    }
    return v;
}

std::string list(const std::vector<std::string>& names) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) out += (i ? ", " : "") + names[i];
    return out;
}

json read_header(std::istream& in, const std::string& path) {
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
        throw CheckpointError(path + " is not a checkpoint (bad magic)");
    }
    const auto version = take<uint32_t>(in, path);
    if (version != kVersion) {
        throw CheckpointError("checkpoint " + path + " has unsupported version " +
                              std::to_string(version));
    }
    const auto len = take<uint64_t>(in, path);
    if (len > (uint64_t{1} << 32)) throw CheckpointError("checkpoint " + path + " header too large");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
        throw CheckpointError("checkpoint " + path + " is truncated (manifest)");
    }
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint " + path + " has a corrupt manifest: " + e.what());
    }
}

}  // namespace

template <typename T>
const Tensor<T>* Checkpoint<T>::find(const std::string& sec, const std::string& name) const {
    for (const auto& e : entries) {
        if (e.section == sec && e.name == name) return &e.value;
    }
    return nullptr;
}

template <typename T>
std::vector<const CheckpointEntry<T>*> Checkpoint<T>::section(const std::string& sec) const {
    std::vector<const CheckpointEntry<T>*> out;
    for (const auto& e : entries) {
        if (e.section == sec) out.push_back(&e);
    }
    return out;
}

template <typename T>
void write_checkpoint(const std::string& path, const json& meta,
                      const std::vector<CheckpointEntry<T>>& entries) {
    json header = meta;
    header["dtype"] = dtype_name<T>();
    json manifest = json::array();
    uint64_t offset = 0;
    for (const auto& e : entries) {
        manifest.push_back({{"section", e.section},
                            {"name", e.name},
                            {"shape", e.value.shape()},
                            {"offset", offset}});
        offset += static_cast<uint64_t>(e.value.numel()) * sizeof(T);
    }
    header["tensors"] = std::move(manifest);
    const std::string text = header.dump();

    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw CheckpointError("cannot write checkpoint " + tmp);
        os.write(kMagic, 4);
        put<uint32_t>(os, kVersion);
        put<uint64_t>(os, text.size());
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        for (const auto& e : entries) {
            os.write(reinterpret_cast<const char*>(e.value.data()),
                     static_cast<std::streamsize>(e.value.numel() * sizeof(T)));
        }
        if (!os) throw CheckpointError("failed writing checkpoint " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw CheckpointError("cannot move checkpoint into place at " + path + ": " + ec.message());
}

template <typename T>
Checkpoint<T> read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    json header = read_header(in, path);
    if (header.value("dtype", std::string()) != dtype_name<T>()) {
        throw CheckpointError("checkpoint " + path + " holds dtype " +
                              header.value("dtype", std::string("?")) + ", expected " +
                              dtype_name<T>());
    }
    Checkpoint<T> ck;
    uint64_t expect_offset = 0;
    try {
        for (const auto& m : header.at("tensors")) {
            CheckpointEntry<T> e;
            e.section = m.at("section").get<std::string>();
            e.name = m.at("name").get<std::string>();
            Shape shape = m.at("shape").get<Shape>();
            if (m.at("offset").get<uint64_t>() != expect_offset) {
                throw CheckpointError("checkpoint " + path + ": non-contiguous offset for " + e.name);
            }
            e.value = Tensor<T>(std::move(shape));
            const auto bytes = static_cast<std::streamsize>(e.value.numel() * sizeof(T));
            if (!in.read(reinterpret_cast<char*>(e.value.data()), bytes)) {
                throw CheckpointError("checkpoint " + path + " is truncated (tensor " + e.name + ")");
            }
            expect_offset += static_cast<uint64_t>(bytes);
            ck.entries.push_back(std::move(e));
        }
    } catch (const json::exception& e) {
        throw CheckpointError("checkpoint " + path + " has a malformed manifest: " + e.what());
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw CheckpointError("checkpoint " + path + " has trailing bytes after the last tensor");
    }
    header.erase("tensors");
    ck.meta = std::move(header);
    return ck;
}

template <typename T>
std::vector<CheckpointEntry<T>> param_entries(const ParamStore<T>& store) {
    std::vector<CheckpointEntry<T>> out;
    for (const auto& p : store.all()) out.push_back({"param", p->name, p->value});
    return out;
}

template <typename T>
void assign_params(ParamStore<T>& store, const Checkpoint<T>& ckpt) {
    std::set<std::string> in_file;
    std::vector<std::string> missing, unexpected, misshaped;
    for (const auto* e : ckpt.section("param")) {
        in_file.insert(e->name);
        Parameter<T>* p = store.find(e->name);
        if (!p) {
            unexpected.push_back(e->name);
        } else if (p->value.shape() != e->value.shape()) {
            misshaped.push_back(e->name + " " + shape_str(e->value.shape()) + " vs model " +
                                shape_str(p->value.shape()));
        }
    }
    for (const auto& p : store.all()) {
        if (!in_file.count(p->name)) missing.push_back(p->name);
    }
    if (!missing.empty() || !unexpected.empty() || !misshaped.empty()) {
        std::string msg = "checkpoint parameters do not match the model:";
        if (!missing.empty()) msg += " missing [" + list(missing) + "]";
        if (!unexpected.empty()) msg += " unexpected [" + list(unexpected) + "]";
        if (!misshaped.empty()) msg += " shape mismatch [" + list(misshaped) + "]";
        throw CheckpointError(msg);
    }
    for (const auto* e : ckpt.section("param")) store.find(e->name)->value = e->value;
}

template <typename T>
void save_weights(const UXNetModel<T>& model, const std::string& path) {
    json meta{{"kind", "weights"}, {"model", to_json(model.config())}};
    write_checkpoint(path, meta, param_entries(model.params()));
}

template <typename T>
void load_weights(UXNetModel<T>& model, const std::string& path) {
    Checkpoint<T> ck = read_checkpoint<T>(path);
    assign_params(model.params(), ck);
}

UXNetConfig checkpoint_model_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open checkpoint " + path);
    json header = read_header(in, path);
    if (!header.contains("model")) throw CheckpointError("checkpoint " + path + " has no model config");
    return model_config_from_json(header.at("model"));
}

#define UXNET_INSTANTIATE_CKPT(T)                                                            \
    template struct Checkpoint<T>;                                                           \
    template void write_checkpoint<T>(const std::string&, const json&,                       \
                                      const std::vector<CheckpointEntry<T>>&);               \
    template Checkpoint<T> read_checkpoint<T>(const std::string&);                           \
    template std::vector<CheckpointEntry<T>> param_entries<T>(const ParamStore<T>&);         \
    template void assign_params<T>(ParamStore<T>&, const Checkpoint<T>&);                    \
    template void save_weights<T>(const UXNetModel<T>&, const std::string&);                 \
    template void load_weights<T>(UXNetModel<T>&, const std::string&);

UXNET_INSTANTIATE_CKPT(float)
UXNET_INSTANTIATE_CKPT(double)

}  // namespace uxnet
