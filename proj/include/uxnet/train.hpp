#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "uxnet/inference.hpp"
#include "uxnet/loss.hpp"
#include "uxnet/optim.hpp"

namespace uxnet {

/// A preprocessed image with its labels, held in memory for a run.
struct Sample {
    std::string name;
    Volume image;
    LabelVolume label;
};

/// Loads and preprocesses (clip, then percentile-normalize) one split.
std::vector<Sample> load_split(const DatasetManifest& manifest, Split split);

struct EvalResult {
    /// Mean over volumes of each class's Dice, background at index 0.
    std::vector<double> per_class;
    /// Mean of per_class over classes 1..K-1.
    double mean_foreground = 0;
    int64_t volumes = 0;
};

/// Hard Dice of sliding-window predictions against each sample's labels.
/// Per-class values are averaged over volumes in sorted order, so the result
/// does not depend on the order of `samples`.
template <typename T>
EvalResult evaluate(const UXNetModel<T>& model, const std::vector<Sample>& samples, double overlap = 0.5);

/// Assembles a (N, 1, h, w, d) batch and its labels from equally sized patches.
Tensor<float> stack_images(const std::vector<Volume>& patches);
LabelBatch stack_labels(const std::vector<LabelVolume>& patches);

struct TrainOptions {
    std::string out_dir = "runs/default";
    uint64_t seed = 0;
    /// Logs wall_ms as 0 so two runs produce identical bytes.
    bool deterministic = false;
    /// A checkpoint written with checkpoint_interval; training continues after its step.
    std::optional<std::string> resume_from;
    /// Receives every log record as it is written.
    std::function<void(const json&)> on_log;
};

struct TrainResult {
    int64_t last_step = 0;
    double last_loss = 0;
    double best_dice = 0;
    int64_t best_step = 0;
    EvalResult last_eval;
    std::string log_path;
    std::string best_checkpoint;
    std::string last_checkpoint;
};

/// Runs the training loop: each step draws `batch_size` training volumes and
/// `crops_per_volume` foreground-biased crops from each, augments them, and
/// applies one AdamW update on the (deep-supervised) loss. Every
/// `eval_interval` steps and at the final step the validation split is scored,
/// the plateau scheduler is stepped on its mean foreground Dice, and the best
/// weights are saved. All randomness for step s comes from a stream keyed by
/// (seed, s), so resuming from a checkpoint replays the remaining steps exactly.
///
/// Files in out_dir: metrics.jsonl, best.uxck, last.uxck and, with
/// checkpoint_interval > 0, step_XXXXXX.uxck resume checkpoints.
TrainResult train(UXNetModel<float>& model, const DatasetManifest& manifest, const TrainConfig& cfg,
                  const AugmentParams& augment_params, const TrainOptions& opts);

/// Name of the resume checkpoint written after `step`.
std::string resume_checkpoint_name(int64_t step);

}  // namespace uxnet
