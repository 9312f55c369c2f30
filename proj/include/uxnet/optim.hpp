#pragma once

#include <limits>
#include <stdexcept>
#include <vector>

#include "uxnet/checkpoint.hpp"

namespace uxnet {

/// A gradient or loss stopped being finite.
class NonFiniteError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct AdamWOptions {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.08;
};

/// Adam with decoupled weight decay:
///   m <- b1 m + (1 - b1) g,  v <- b2 v + (1 - b2) g^2
///   w <- w - lr * (m_hat / (sqrt(v_hat) + eps) + wd * w)
/// with bias-corrected m_hat, v_hat. Arithmetic is carried out in double.
template <typename T>
class AdamW {
public:
    AdamW(std::vector<Parameter<T>*> params, AdamWOptions opts);

    /// Applies one update from each parameter's `grad`. Every gradient is
    /// checked first, so a non-finite value leaves all parameters untouched.
    void step();

    int64_t steps() const { return t_; }
    double lr() const { return opts_.lr; }
    void set_lr(double lr) { opts_.lr = lr; }
    const AdamWOptions& options() const { return opts_; }
    const Tensor<T>& first_moment(size_t i) const { return m_[i]; }
    const Tensor<T>& second_moment(size_t i) const { return v_[i]; }

    /// Moments as "adam_m"/"adam_v" entries keyed by parameter name.
    std::vector<CheckpointEntry<T>> state_entries() const;
    json state_meta() const;
    void load_state(const Checkpoint<T>& ckpt, const json& meta);

private:
    std::vector<Parameter<T>*> params_;
    AdamWOptions opts_;
    int64_t t_ = 0;
    std::vector<Tensor<T>> m_, v_;
};

/// Multiplies the learning rate by `factor` once the monitored metric (higher
/// is better) has failed to improve for more than `patience` evaluations.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, double factor = 0.9, int64_t patience = 10);

    /// Returns the learning rate to use from now on.
    double step(double metric);

    double lr() const { return lr_; }
    double best() const { return best_; }
    int64_t stalled() const { return stall_; }

    json to_json() const;
    void load(const json& j);

private:
    double lr_, factor_;
    int64_t patience_;
    double best_ = -std::numeric_limits<double>::infinity();
    int64_t stall_ = 0;
};

}  // namespace uxnet
