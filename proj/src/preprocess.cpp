#include <algorithm>
#include <cmath>
#include <numbers>

#include "uxnet/volume.hpp"

namespace uxnet {

Volume clip_intensity(const Volume& v, double lo, double hi) {
    if (!(lo < hi)) {
        throw std::invalid_argument("clip_intensity: window needs lo < hi, got [" + std::to_string(lo) + ", " +
                                    std::to_string(hi) + "]");
    }
    Volume out = v;
    const auto flo = static_cast<float>(lo), fhi = static_cast<float>(hi);
    for (float& x : out.data) x = std::clamp(x, flo, fhi);
    return out;
}

double percentile(std::vector<float> values, double p) {
    if (values.empty()) throw std::invalid_argument("percentile of an empty volume");
    if (!(p >= 0 && p <= 100)) throw std::invalid_argument("percentile must be in [0, 100]");
    const double pos = p / 100.0 * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<size_t>(std::floor(pos));
    const size_t hi = std::min(lo + 1, values.size() - 1);
    std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(lo), values.end());
    const double a = values[lo];
    double b = a;
    if (hi != lo) b = *std::min_element(values.begin() + static_cast<std::ptrdiff_t>(hi), values.end());
    return a + (pos - static_cast<double>(lo)) * (b - a);
}

Volume percentile_normalize(const Volume& v, double p_lo, double p_hi) {
    if (!(p_lo < p_hi)) throw std::invalid_argument("percentile_normalize: needs p_lo < p_hi");
    const double xlo = percentile(v.data, p_lo);
    const double xhi = percentile(v.data, p_hi);
    if (!(xhi > xlo)) {
        throw std::invalid_argument("percentile_normalize: volume is constant between percentiles " +
                                    std::to_string(p_lo) + " and " + std::to_string(p_hi) + " (both " +
                                    std::to_string(xlo) + ")");
    }
    Volume out = v;
    const double inv = 1.0 / (xhi - xlo);
    for (float& x : out.data) x = static_cast<float>(std::clamp((x - xlo) * inv, 0.0, 1.0));
    return out;
}

Volume preprocess(const Volume& v, const std::optional<std::array<double, 2>>& clip,
                  const std::array<double, 2>& percentiles) {
    return percentile_normalize(clip ? clip_intensity(v, (*clip)[0], (*clip)[1]) : v, percentiles[0], percentiles[1]);
}

std::pair<Volume, LabelVolume> pad_to(const Volume& v, const LabelVolume& l, const Extents& size) {
    if (v.extents != l.extents) throw std::invalid_argument("pad_to: image and label extents differ");
    Extents e;
    for (size_t a = 0; a < 3; ++a) e[a] = std::max(v.extents[a], size[a]);
    if (e == v.extents) return {v, l};
    Volume pv(e, 0.0f, v.modality);
    pv.spacing = v.spacing;
    LabelVolume pl(e, l.num_classes, 0);
    for (int64_t i = 0; i < v.extents[0]; ++i) {
        for (int64_t j = 0; j < v.extents[1]; ++j) {
            std::copy_n(&v.data[static_cast<size_t>(v.index(i, j, 0))], v.extents[2], &pv.at(i, j, 0));
            std::copy_n(&l.data[static_cast<size_t>(l.index(i, j, 0))], l.extents[2], &pl.at(i, j, 0));
        }
    }
    return {std::move(pv), std::move(pl)};
}

std::pair<Volume, LabelVolume> random_crop_foreground(const Volume& v, const LabelVolume& l,
                                                      const Extents& size, Rng& rng, double fg_prob) {
    for (int64_t s : size) {
        if (s < 1) throw std::invalid_argument("random_crop_foreground: crop size must be >= 1");
    }
    const auto [pv, pl] = pad_to(v, l, size);
    const Extents& e = pv.extents;
    // Every draw happens unconditionally so the stream position never depends on the data.
    const bool want_fg = rng.bernoulli(fg_prob);
    const uint64_t pick = rng.next_u64();
    Extents start{};
    for (size_t a = 0; a < 3; ++a) start[a] = static_cast<int64_t>(rng.below(static_cast<uint64_t>(e[a] - size[a] + 1)));

    int64_t fg_count = 0;
    if (want_fg) {
        for (int32_t x : pl.data) fg_count += x > 0;
    }
    if (want_fg && fg_count > 0) {
        int64_t target = static_cast<int64_t>(pick % static_cast<uint64_t>(fg_count));
        int64_t flat = 0;
        for (;; ++flat) {
            if (pl.data[static_cast<size_t>(flat)] > 0 && target-- == 0) break;
        }
        const Extents c{flat / (e[1] * e[2]), (flat / e[2]) % e[1], flat % e[2]};
        for (size_t a = 0; a < 3; ++a) start[a] = std::clamp(c[a] - size[a] / 2, int64_t{0}, e[a] - size[a]);
    }

    Volume cv(size, 0.0f, pv.modality);
    cv.spacing = pv.spacing;
    LabelVolume cl(size, pl.num_classes, 0);
    for (int64_t i = 0; i < size[0]; ++i) {
        for (int64_t j = 0; j < size[1]; ++j) {
            const int64_t src = pv.index(start[0] + i, start[1] + j, start[2]);
            std::copy_n(&pv.data[static_cast<size_t>(src)], size[2], &cv.at(i, j, 0));
            std::copy_n(&pl.data[static_cast<size_t>(src)], size[2], &cl.at(i, j, 0));
        }
    }
    return {std::move(cv), std::move(cl)};
}

namespace {

/// Resamples through `source(i, j, k) -> (x, y, z)`: trilinear for the image,
/// nearest for labels, coordinates clamped to the volume.
template <typename Map>
std::pair<Volume, LabelVolume> resample(const Volume& v, const LabelVolume& l, Map source) {
    const Extents& e = v.extents;
    Volume ov = v;
    LabelVolume ol = l;
    const std::array<double, 3> hi{double(e[0] - 1), double(e[1] - 1), double(e[2] - 1)};
    for (int64_t i = 0; i < e[0]; ++i) {
        for (int64_t j = 0; j < e[1]; ++j) {
            for (int64_t k = 0; k < e[2]; ++k) {
                std::array<double, 3> p = source(double(i), double(j), double(k));
                std::array<int64_t, 3> base{}, nn{};
                std::array<double, 3> frac{};
                for (size_t a = 0; a < 3; ++a) {
                    p[a] = std::clamp(p[a], 0.0, hi[a]);
                    nn[a] = static_cast<int64_t>(std::lround(p[a]));
                    base[a] = std::min(static_cast<int64_t>(std::floor(p[a])), std::max<int64_t>(e[a] - 2, 0));
                    frac[a] = p[a] - static_cast<double>(base[a]);
                }
                double acc = 0;
                for (int c = 0; c < 8; ++c) {
                    double w = 1;
                    std::array<int64_t, 3> q{};
                    for (size_t a = 0; a < 3; ++a) {
                        const bool up = (c >> a) & 1;
                        w *= up ? frac[a] : 1.0 - frac[a];
                        q[a] = std::min(base[a] + (up ? 1 : 0), e[a] - 1);
                    }
                    if (w != 0.0) acc += w * v.at(q[0], q[1], q[2]);
                }
                ov.at(i, j, k) = static_cast<float>(acc);
                ol.at(i, j, k) = l.at(nn[0], nn[1], nn[2]);
            }
        }
    }
    return {std::move(ov), std::move(ol)};
}

std::array<double, 3> center_of(const Extents& e) {
    return {(double(e[0]) - 1) / 2, (double(e[1]) - 1) / 2, (double(e[2]) - 1) / 2};
}

}  // namespace

std::pair<Volume, LabelVolume> rotate_axis(const Volume& v, const LabelVolume& l, int axis, double degrees) {
    if (axis < 0 || axis > 2) throw std::invalid_argument("rotate_axis: axis must be 0, 1 or 2");
    if (v.extents != l.extents) throw std::invalid_argument("rotate_axis: image and label extents differ");
    if (degrees == 0.0) return {v, l};
    const double t = degrees * std::numbers::pi / 180.0;
    // Snap quarter turns so axis-aligned rotations permute voxels exactly.
    double c = std::cos(t), s = std::sin(t);
    if (std::abs(c) < 1e-12) c = 0;
    if (std::abs(s) < 1e-12) s = 0;
    const auto ctr = center_of(v.extents);
    const size_t p = axis == 0 ? 1 : 0, q = axis == 2 ? 1 : 2;
    return resample(v, l, [&](double i, double j, double k) {
        std::array<double, 3> x{i, j, k};
        const double u = x[p] - ctr[p], w = x[q] - ctr[q];
        std::array<double, 3> src = x;
        src[p] = ctr[p] + c * u + s * w;
        src[q] = ctr[q] - s * u + c * w;
        return src;
    });
}

std::pair<Volume, LabelVolume> rescale(const Volume& v, const LabelVolume& l, const std::array<double, 3>& f) {
    if (v.extents != l.extents) throw std::invalid_argument("rescale: image and label extents differ");
    for (double x : f) {
        if (!(x > 0)) throw std::invalid_argument("rescale: factors must be > 0");
    }
    if (f == std::array<double, 3>{1, 1, 1}) return {v, l};
    const auto ctr = center_of(v.extents);
    return resample(v, l, [&](double i, double j, double k) {
        return std::array<double, 3>{ctr[0] + (i - ctr[0]) / f[0], ctr[1] + (j - ctr[1]) / f[1],
                                     ctr[2] + (k - ctr[2]) / f[2]};
    });
}

Volume shift_intensity(const Volume& v, double offset) {
    Volume out = v;
    for (float& x : out.data) x = static_cast<float>(x + offset);
    return out;
}

std::pair<Volume, LabelVolume> augment(const Volume& v, const LabelVolume& l, const AugmentParams& params,
                                       Rng& rng) {
    params.validate();
    // Every draw is made whether or not the op fires, keeping streams aligned.
    const bool do_rot = rng.bernoulli(params.p_rotate);
    const int axis = static_cast<int>(rng.below(3));
    const double angle = rng.uniform(-params.rotation_deg, params.rotation_deg);
    const bool do_scale = rng.bernoulli(params.p_scale);
    std::array<double, 3> f{};
    for (double& x : f) x = rng.uniform(1.0 - params.scale, 1.0 + params.scale);
    const bool do_off = rng.bernoulli(params.p_offset);
    const double off = rng.uniform(-params.intensity_offset, params.intensity_offset);

    std::pair<Volume, LabelVolume> out{v, l};
    if (do_rot && params.rotation_deg > 0) out = rotate_axis(out.first, out.second, axis, angle);
    if (do_scale && params.scale > 0) out = rescale(out.first, out.second, f);
    if (do_off && params.intensity_offset > 0) out.first = shift_intensity(out.first, off);
    return out;
}

}  // namespace uxnet
