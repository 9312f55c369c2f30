#pragma once

#include "uxnet/model.hpp"
#include "uxnet/volume.hpp"

namespace uxnet {

/// Per-voxel class probabilities of shape (K, H, W, D).
template <typename T>
struct ProbabilityMap {
    Tensor<T> probs;

    int64_t num_classes() const { return probs.dim(0); }
    /// Most probable class per voxel; ties go to the lower class id.
    LabelVolume argmax() const;
};

/// Tiles `v` with windows of `patch` voxels at stride floor(patch * (1 - overlap))
/// (the last window on each axis is pinned to the far edge), runs the model on
/// each tile without recording gradients, and averages the softmax outputs
/// uniformly over the tiles covering each voxel. Axes shorter than the patch
/// are zero-padded and the result cropped back.
template <typename T>
ProbabilityMap<T> sliding_window_infer(const UXNetModel<T>& model, const Volume& v, const Extents& patch,
                                       double overlap = 0.5);

/// Window start offsets along one axis of extent `extent`.
std::vector<int64_t> window_starts(int64_t extent, int64_t patch, double overlap);

}  // namespace uxnet
