#pragma once

#include <cstdint>
#include <vector>

#include "uxnet/autodiff.hpp"
#include "uxnet/config.hpp"

namespace uxnet {

/// Integer class map for a batch, shape (N, H, W, D), row-major.
struct LabelBatch {
    Shape shape;
    std::vector<int32_t> data;

    LabelBatch() = default;
    LabelBatch(Shape s, std::vector<int32_t> d);
    int64_t numel() const { return static_cast<int64_t>(data.size()); }
};

struct DiceOptions {
    double smooth = 1e-5;
    bool include_background = true;
};

/// Soft Dice on softmax(logits) against one-hot labels, summed over the batch:
///   dice_c = (2 sum p_c y_c + smooth) / (sum p_c + sum y_c + smooth)
///   loss   = 1 - mean_c dice_c
template <typename T>
Var<T> dice_loss(const Var<T>& logits, const LabelBatch& labels, const DiceOptions& opt = {});

/// Mean voxelwise cross-entropy of softmax(logits).
template <typename T>
Var<T> cross_entropy(const Var<T>& logits, const LabelBatch& labels);

/// DICE, or DICE + CE with equal weight.
template <typename T>
Var<T> segmentation_loss(const Var<T>& logits, const LabelBatch& labels, LossMode mode,
                         const DiceOptions& opt = {});

/// sum_i w_i * loss(head_i). Weights must match the head count and sum to 1.
template <typename T>
Var<T> deep_supervised_loss(const std::vector<Var<T>>& heads, const LabelBatch& labels,
                            const std::vector<double>& weights, LossMode mode = LossMode::DICE,
                            const DiceOptions& opt = {});

/// Hard Dice per class, 2|A n B| / (|A| + |B|); a class absent from both maps scores 1.
std::vector<double> dice_per_class(const std::vector<int32_t>& pred, const std::vector<int32_t>& truth,
                                   int64_t num_classes);

/// Mean over classes 1..K-1 (background excluded).
double foreground_mean(const std::vector<double>& per_class);

}  // namespace uxnet
