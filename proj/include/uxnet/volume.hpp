#pragma once

#include <array>
#include <optional>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "uxnet/config.hpp"
#include "uxnet/rng.hpp"

namespace uxnet {

using Extents = std::array<int64_t, 3>;

/// I/O and validation failures for volumes, sidecars and manifests.
class VolumeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class Modality { CT, MR, SYNTH };
std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

inline int64_t extents_numel(const Extents& e) { return e[0] * e[1] * e[2]; }

/// Scalar field stored row-major over (H, W, D); the last axis is contiguous.
struct Volume {
    Extents extents{0, 0, 0};
    std::vector<float> data;
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    Modality modality = Modality::SYNTH;

    Volume() = default;
    Volume(Extents e, float fill = 0.0f, Modality m = Modality::SYNTH);

    int64_t numel() const { return extents_numel(extents); }
    int64_t index(int64_t i, int64_t j, int64_t k) const { return (i * extents[1] + j) * extents[2] + k; }
    float& at(int64_t i, int64_t j, int64_t k) { return data[static_cast<size_t>(index(i, j, k))]; }
    float at(int64_t i, int64_t j, int64_t k) const { return data[static_cast<size_t>(index(i, j, k))]; }

    /// Positive spacing, matching buffer size, and no NaN values.
    void validate() const;
};

struct LabelVolume {
    Extents extents{0, 0, 0};
    std::vector<int32_t> data;
    int64_t num_classes = 2;

    LabelVolume() = default;
    LabelVolume(Extents e, int64_t classes, int32_t fill = 0);

    int64_t numel() const { return extents_numel(extents); }
    int64_t index(int64_t i, int64_t j, int64_t k) const { return (i * extents[1] + j) * extents[2] + k; }
    int32_t& at(int64_t i, int64_t j, int64_t k) { return data[static_cast<size_t>(index(i, j, k))]; }
    int32_t at(int64_t i, int64_t j, int64_t k) const { return data[static_cast<size_t>(index(i, j, k))]; }

    /// Values in [0, num_classes) and a matching buffer size.
    void validate() const;
};

// Raw format: `<name>.uxv` holds the little-endian buffer, `<name>.uxv.json`
// the sidecar {"extents", "dtype": "f32"|"i32", "spacing", "kind": "image"|"label"}.
std::string sidecar_path(const std::string& raw_path);
void save_raw(const std::string& path, const Volume& v);
void save_raw(const std::string& path, const LabelVolume& l);
Volume load_raw_image(const std::string& path);
/// `num_classes` comes from the dataset manifest; values are range-checked.
LabelVolume load_raw_label(const std::string& path, int64_t num_classes);

// NIfTI-1, single-file and uncompressed. Voxel (i, j, k) of the file, with i
// fastest on disk, maps to Volume::at(i, j, k).
enum class NiftiType : int16_t { Int16 = 4, Float32 = 16 };
Volume load_nifti(const std::string& path);
/// Stores `stored` values verbatim with the given scaling fields; test fixtures
/// use this to build headers with known slope and intercept.
void save_nifti(const std::string& path, const Volume& stored, NiftiType type, float slope = 1.0f,
                float inter = 0.0f);

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
    std::string image;  // resolved paths
    std::string label;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    int64_t num_classes = 2;
    std::optional<std::array<double, 2>> clip;
    std::array<double, 2> percentiles{1.0, 99.0};

    std::vector<ManifestEntry> split(Split s) const;
    /// Preprocessing view of the manifest, for DataConfig-driven code paths.
    DataConfig data_config(const std::string& manifest_path) const;
};

/// Paths inside manifest.json are relative to its directory.
DatasetManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const DatasetManifest& m);

// Preprocessing.
Volume clip_intensity(const Volume& v, double lo, double hi);
/// Percentile of `values` using linear interpolation between order statistics
/// (position p/100 * (n - 1) in the sorted sequence).
double percentile(std::vector<float> values, double p);
/// (x - X_lo) / (X_hi - X_lo), clamped to [0, 1].
Volume percentile_normalize(const Volume& v, double p_lo = 1.0, double p_hi = 99.0);
/// Clip (when a window is given) then percentile-normalize.
Volume preprocess(const Volume& v, const std::optional<std::array<double, 2>>& clip,
                  const std::array<double, 2>& percentiles);

/// Zero-pads to at least `size` on every axis, then crops `size`. With
/// probability `fg_prob` the crop is centered on a uniformly chosen voxel with
/// label > 0 (shifted inward at the borders so it stays inside); otherwise the
/// corner is uniform.
std::pair<Volume, LabelVolume> random_crop_foreground(const Volume& v, const LabelVolume& l,
                                                      const Extents& size, Rng& rng,
                                                      double fg_prob = 2.0 / 3.0);
std::pair<Volume, LabelVolume> pad_to(const Volume& v, const LabelVolume& l, const Extents& size);

/// Rotation by `degrees` about principal `axis` through the volume center.
/// The image is resampled trilinearly, the label by nearest neighbour; samples
/// falling outside read the nearest border voxel.
std::pair<Volume, LabelVolume> rotate_axis(const Volume& v, const LabelVolume& l, int axis, double degrees);
/// Zoom about the center by per-axis factors, keeping the extents.
std::pair<Volume, LabelVolume> rescale(const Volume& v, const LabelVolume& l, const std::array<double, 3>& factors);
Volume shift_intensity(const Volume& v, double offset);

/// Random rotation, scaling and intensity offset, each applied with its
/// probability in `params`.
std::pair<Volume, LabelVolume> augment(const Volume& v, const LabelVolume& l, const AugmentParams& params,
                                       Rng& rng);

struct SynthResult {
    std::string manifest_path;
    DatasetManifest manifest;
    std::vector<std::string> warnings;
};

/// Writes image/label pairs of non-overlapping ellipsoids and cuboids, one
/// intensity band per class plus Gaussian noise, and a 70/15/15 manifest.
SynthResult synth_generate(const SynthSpec& spec, const std::string& out_dir, uint64_t seed);

}  // namespace uxnet
