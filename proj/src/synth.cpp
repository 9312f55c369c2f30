#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "uxnet/volume.hpp"

namespace uxnet {

namespace fs = std::filesystem;

namespace {

constexpr int kMaxPlacementTries = 200;

struct Box {
    std::array<int64_t, 3> lo, hi;  // inclusive

    bool overlaps(const Box& o, int64_t margin) const {
        for (size_t a = 0; a < 3; ++a) {
            if (hi[a] + margin < o.lo[a] || o.hi[a] + margin < lo[a]) return false;
        }
        return true;
    }
};

/// Band centre for class `c` of `k`. The bands split the default CT window
/// evenly; background takes the middle band and foreground classes fill the
/// rest in order, so with three classes one organ is darker and one brighter
/// than its surroundings. Normalization layers see contrast direction long
/// before they can recover absolute intensity.
double class_mean(int64_t c, int64_t k) {
    const int64_t mid = (k - 1) / 2;
    int64_t slot = mid;
    if (c > 0) slot = c - 1 < mid ? c - 1 : c;
    return -120.0 + 300.0 * static_cast<double>(slot) / static_cast<double>(k - 1);
}

}  // namespace

SynthResult synth_generate(const SynthSpec& spec, const std::string& out_dir, uint64_t seed) {
    spec.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw VolumeError("cannot create " + out_dir + ": " + ec.message());

    const Rng root(seed);
    const Extents e = spec.extents;
    const int64_t k = spec.num_classes;
    const double band = 300.0 / static_cast<double>(k - 1);

    SynthResult result;
    DatasetManifest& m = result.manifest;
    m.num_classes = k;
    m.clip = std::array<double, 2>{-175.0, 250.0};
    m.percentiles = {1.0, 99.0};
    std::vector<bool> present(static_cast<size_t>(k), false);

    for (int64_t n = 0; n < spec.num_volumes; ++n) {
        Rng rng = root.split(static_cast<uint64_t>(n));
        LabelVolume label(e, k, 0);
        std::vector<double> shape_mean(1, class_mean(0, k));
        std::vector<Box> placed;
        for (int64_t s = 0; s < spec.shapes_per_volume; ++s) {
            const auto cls = static_cast<int32_t>(1 + s % (k - 1));
            bool ok = false;
            for (int attempt = 0; attempt < kMaxPlacementTries && !ok; ++attempt) {
                std::array<double, 3> r{}, c{};
                Box b{};
                for (size_t a = 0; a < 3; ++a) {
                    const double ext = static_cast<double>(e[a]);
                    r[a] = rng.uniform(0.08 * ext, 0.18 * ext);
                    r[a] = std::max(r[a], 1.5);
                    c[a] = rng.uniform(r[a] + 1.0, ext - r[a] - 2.0);
                    b.lo[a] = std::max<int64_t>(0, static_cast<int64_t>(std::floor(c[a] - r[a])));
                    b.hi[a] = std::min<int64_t>(e[a] - 1, static_cast<int64_t>(std::ceil(c[a] + r[a])));
                }
                const bool cuboid = rng.bernoulli(0.5);
                if (std::any_of(placed.begin(), placed.end(), [&](const Box& o) { return b.overlaps(o, 1); })) {
                    continue;
                }
                ok = true;
                placed.push_back(b);
                for (int64_t i = b.lo[0]; i <= b.hi[0]; ++i) {
                    for (int64_t j = b.lo[1]; j <= b.hi[1]; ++j) {
                        for (int64_t q = b.lo[2]; q <= b.hi[2]; ++q) {
                            const double dx = (double(i) - c[0]) / r[0], dy = (double(j) - c[1]) / r[1],
                                         dz = (double(q) - c[2]) / r[2];
                            const bool inside = cuboid ? std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) <= 1.0
                                                       : dx * dx + dy * dy + dz * dz <= 1.0;
                            if (inside) label.at(i, j, q) = cls;
                        }
                    }
                }
            }
            if (!ok) {
                result.warnings.push_back("volume " + std::to_string(n) + ": shape " + std::to_string(s) +
                                          " dropped after " + std::to_string(kMaxPlacementTries) +
                                          " placement attempts");
            }
        }

        // One level per class, jittered per volume within a sixth of the band gap.
        std::vector<double> level(static_cast<size_t>(k));
        for (int64_t c = 0; c < k; ++c) {
            level[static_cast<size_t>(c)] = class_mean(c, k) + rng.uniform(-band / 6, band / 6);
        }
        Volume image(e, 0.0f, Modality::SYNTH);
        Rng noise = rng.split(0xA5);
        for (size_t v = 0; v < image.data.size(); ++v) {
            const int32_t c = label.data[v];
            present[static_cast<size_t>(c)] = true;
            double x = level[static_cast<size_t>(c)];
            if (spec.noise_sigma > 0) x += spec.noise_sigma * noise.normal();
            image.data[v] = static_cast<float>(x);
        }

        char name[32];
        std::snprintf(name, sizeof(name), "case_%03lld", static_cast<long long>(n));
        ManifestEntry entry;
        entry.image = (fs::path(out_dir) / (std::string(name) + "_image.uxv")).string();
        entry.label = (fs::path(out_dir) / (std::string(name) + "_label.uxv")).string();
        save_raw(entry.image, image);
        save_raw(entry.label, label);
        m.entries.push_back(std::move(entry));
    }

    for (int64_t c = 1; c < k; ++c) {
        if (!present[static_cast<size_t>(c)]) {
            throw VolumeError("synth_generate: class " + std::to_string(c) +
                              " absent from every volume; raise shapes_per_volume or num_volumes");
        }
    }

    // 70/15/15 split over a seeded permutation of the cases.
    const int64_t total = spec.num_volumes;
    int64_t n_val = static_cast<int64_t>(std::llround(0.15 * static_cast<double>(total)));
    int64_t n_test = n_val;
    if (total >= 3) {
        n_val = std::max<int64_t>(n_val, 1);
        n_test = std::max<int64_t>(n_test, 1);
    } else {
        n_val = total >= 2 ? 1 : 0;
        n_test = 0;
    }
    std::vector<size_t> order(static_cast<size_t>(total));
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng split_rng = root.split(0x5EED5);
    split_rng.shuffle(order.begin(), order.end());
    for (size_t i = 0; i < order.size(); ++i) {
        const auto idx = static_cast<int64_t>(i);
        Split s = Split::Train;
        if (idx < n_val) {
            s = Split::Val;
        } else if (idx < n_val + n_test) {
            s = Split::Test;
        }
        m.entries[order[i]].split = s;
    }

    result.manifest_path = (fs::path(out_dir) / "manifest.json").string();
    save_manifest(result.manifest_path, m);
    return result;
}

}  // namespace uxnet
