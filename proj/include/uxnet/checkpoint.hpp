#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "uxnet/config.hpp"
#include "uxnet/model.hpp"

namespace uxnet {

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

template <typename T>
struct CheckpointEntry {
    std::string section;  // "param", "adam_m", "adam_v", ...
    std::string name;
    Tensor<T> value;
};

template <typename T>
struct Checkpoint {
    json meta;
    std::vector<CheckpointEntry<T>> entries;

    /// nullptr when absent.
    const Tensor<T>* find(const std::string& section, const std::string& name) const;
    std::vector<const CheckpointEntry<T>*> section(const std::string& section) const;
};

/// File layout: "UXCK", version (u32), JSON length (u64), JSON header, then the
/// raw little-endian buffers in manifest order. The header holds `meta` plus
/// a "tensors" manifest of {section, name, shape, offset}; offsets are byte
/// positions relative to the first buffer. Written to a temporary file and
/// renamed, so a crash never leaves a half-written checkpoint behind.
template <typename T>
void write_checkpoint(const std::string& path, const json& meta,
                      const std::vector<CheckpointEntry<T>>& entries);

template <typename T>
Checkpoint<T> read_checkpoint(const std::string& path);

/// Parameters of `store` as checkpoint entries in registry order.
template <typename T>
std::vector<CheckpointEntry<T>> param_entries(const ParamStore<T>& store);

/// Copies the "param" section into `store`. Nothing is modified unless the
/// names and shapes match exactly; otherwise the error lists every missing,
/// unexpected and mis-shaped parameter.
template <typename T>
void assign_params(ParamStore<T>& store, const Checkpoint<T>& ckpt);

template <typename T>
void save_weights(const UXNetModel<T>& model, const std::string& path);

template <typename T>
void load_weights(UXNetModel<T>& model, const std::string& path);

/// Model configuration stored in a checkpoint header.
UXNetConfig checkpoint_model_config(const std::string& path);

}  // namespace uxnet
