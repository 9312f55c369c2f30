#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include "uxnet/volume.hpp"

namespace uxnet {

namespace {

static_assert(std::endian::native == std::endian::little, "NIfTI I/O assumes a little-endian host");

// Byte offsets into the 348-byte NIfTI-1 header.
constexpr size_t kHeaderSize = 348;
constexpr size_t kDim = 40;
constexpr size_t kDatatype = 70;
constexpr size_t kBitpix = 72;
constexpr size_t kPixdim = 76;
constexpr size_t kVoxOffset = 108;
constexpr size_t kSclSlope = 112;
constexpr size_t kSclInter = 116;
constexpr size_t kMagic = 344;
constexpr int64_t kDataOffset = 352;

template <typename V>
V field(const std::vector<char>& h, size_t off) {
    V v;
    std::memcpy(&v, h.data() + off, sizeof(V));
    return v;
}

template <typename V>
void set_field(std::vector<char>& h, size_t off, V v) {
    std::memcpy(h.data() + off, &v, sizeof(V));
}

}  // namespace

Volume load_nifti(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw VolumeError("cannot open " + path);
    std::vector<char> h(kHeaderSize);
    in.read(h.data(), static_cast<std::streamsize>(kHeaderSize));
    const auto got = in.gcount();
    if (got >= 2 && static_cast<unsigned char>(h[0]) == 0x1f && static_cast<unsigned char>(h[1]) == 0x8b) {
        throw VolumeError(path + ": unsupported: compressed (gzip) NIfTI; decompress to .nii first");
    }
    if (got != static_cast<std::streamsize>(kHeaderSize)) throw VolumeError(path + ": truncated NIfTI header");
    if (field<int32_t>(h, 0) != 348) {
        throw VolumeError(path + ": sizeof_hdr is " + std::to_string(field<int32_t>(h, 0)) +
                          ", expected 348 (big-endian or not NIfTI-1)");
    }
    if (std::memcmp(h.data() + kMagic, "n+1\0", 4) != 0) {
        throw VolumeError(path + ": wrong magic; only single-file NIfTI-1 (\"n+1\") is supported");
    }
    const int16_t ndim = field<int16_t>(h, kDim);
    if (ndim != 3) throw VolumeError(path + ": dim[0] is " + std::to_string(ndim) + ", expected 3");
    Extents e{};
    for (int a = 0; a < 3; ++a) {
        e[static_cast<size_t>(a)] = field<int16_t>(h, kDim + 2 * static_cast<size_t>(a + 1));
        if (e[static_cast<size_t>(a)] < 1) throw VolumeError(path + ": non-positive dim[" + std::to_string(a + 1) + "]");
    }
    const int16_t dtype = field<int16_t>(h, kDatatype);
    size_t elem = 0;
    if (dtype == static_cast<int16_t>(NiftiType::Int16)) {
        elem = 2;
    } else if (dtype == static_cast<int16_t>(NiftiType::Float32)) {
        elem = 4;
    } else {
        throw VolumeError(path + ": unsupported datatype code " + std::to_string(dtype) +
                          " (supported: 4 = int16, 16 = float32)");
    }
    float slope = field<float>(h, kSclSlope);
    const float inter = field<float>(h, kSclInter);
    const bool scaled = slope != 0.0f && std::isfinite(slope);
    if (!scaled) slope = 1.0f;

    Volume v;
    v.extents = e;
    v.modality = Modality::CT;
    for (int a = 0; a < 3; ++a) {
        v.spacing[static_cast<size_t>(a)] = field<float>(h, kPixdim + 4 * static_cast<size_t>(a + 1));
    }
    const auto vox_offset = static_cast<int64_t>(field<float>(h, kVoxOffset));
    if (vox_offset < static_cast<int64_t>(kHeaderSize)) throw VolumeError(path + ": vox_offset below 348");
    in.seekg(vox_offset);
    const int64_t n = extents_numel(e);
    std::vector<char> raw(static_cast<size_t>(n) * elem);
    if (!in.read(raw.data(), static_cast<std::streamsize>(raw.size()))) {
        throw VolumeError(path + ": voxel data shorter than " + std::to_string(n) + " elements");
    }

    v.data.resize(static_cast<size_t>(n));
    // On disk i varies fastest; Volume keeps k contiguous.
    int64_t src = 0;
    for (int64_t k = 0; k < e[2]; ++k) {
        for (int64_t j = 0; j < e[1]; ++j) {
            for (int64_t i = 0; i < e[0]; ++i, ++src) {
                float x;
                if (elem == 2) {
                    int16_t s;
                    std::memcpy(&s, raw.data() + src * 2, 2);
                    x = static_cast<float>(s);
                } else {
                    std::memcpy(&x, raw.data() + src * 4, 4);
                }
                if (scaled) x = x * slope + inter;
                v.at(i, j, k) = x;
            }
        }
    }
    try {
        v.validate();
    } catch (const VolumeError& err) {
        throw VolumeError(path + ": " + err.what());
    }
    return v;
}

void save_nifti(const std::string& path, const Volume& stored, NiftiType type, float slope, float inter) {
    const Extents& e = stored.extents;
    for (int64_t x : e) {
        if (x < 1 || x > std::numeric_limits<int16_t>::max()) throw VolumeError("NIfTI extents must fit int16");
    }
    std::vector<char> h(kHeaderSize, 0);
    set_field<int32_t>(h, 0, 348);
    set_field<int16_t>(h, kDim, 3);
    for (int a = 0; a < 3; ++a) {
        set_field<int16_t>(h, kDim + 2 * static_cast<size_t>(a + 1), static_cast<int16_t>(e[static_cast<size_t>(a)]));
    }
    for (int a = 4; a < 8; ++a) set_field<int16_t>(h, kDim + 2 * static_cast<size_t>(a), 1);
    const bool i16 = type == NiftiType::Int16;
    set_field<int16_t>(h, kDatatype, static_cast<int16_t>(type));
    set_field<int16_t>(h, kBitpix, i16 ? 16 : 32);
    set_field<float>(h, kPixdim, 1.0f);
    for (int a = 0; a < 3; ++a) {
        set_field<float>(h, kPixdim + 4 * static_cast<size_t>(a + 1), static_cast<float>(stored.spacing[static_cast<size_t>(a)]));
    }
    set_field<float>(h, kVoxOffset, static_cast<float>(kDataOffset));
    set_field<float>(h, kSclSlope, slope);
    set_field<float>(h, kSclInter, inter);
    std::memcpy(h.data() + kMagic, "n+1\0", 4);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeError("cannot write " + path);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    const char ext[4] = {0, 0, 0, 0};
    out.write(ext, 4);
    for (int64_t k = 0; k < e[2]; ++k) {
        for (int64_t j = 0; j < e[1]; ++j) {
            for (int64_t i = 0; i < e[0]; ++i) {
                const float x = stored.at(i, j, k);
                if (i16) {
                    const auto s = static_cast<int16_t>(x);
                    out.write(reinterpret_cast<const char*>(&s), 2);
                } else {
                    out.write(reinterpret_cast<const char*>(&x), 4);
                }
            }
        }
    }
    if (!out) throw VolumeError("write failed for " + path);
}

}  // namespace uxnet
