#include "uxnet/optim.hpp"

#include <cmath>

namespace uxnet {

template <typename T>
AdamW<T>::AdamW(std::vector<Parameter<T>*> params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    if (!(opts_.lr >= 0) || !(opts_.eps > 0) || opts_.weight_decay < 0 || opts_.beta1 < 0 || opts_.beta1 >= 1 ||
        opts_.beta2 < 0 || opts_.beta2 >= 1) {
        throw std::invalid_argument("AdamW: lr >= 0, eps > 0, weight_decay >= 0 and betas in [0, 1) required");
    }
    for (auto* p : params_) {
        m_.emplace_back(p->value.shape());
        v_.emplace_back(p->value.shape());
    }
}

template <typename T>
void AdamW<T>::step() {
    for (auto* p : params_) {
        for (int64_t i = 0; i < p->grad.numel(); ++i) {
            if (!std::isfinite(static_cast<double>(p->grad[i]))) {
                throw NonFiniteError("non-finite gradient in parameter " + p->name + " at element " +
                                     std::to_string(i));
            }
        }
    }
    ++t_;
    const double b1 = opts_.beta1, b2 = opts_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (size_t k = 0; k < params_.size(); ++k) {
        Parameter<T>& p = *params_[k];
        T* w = p.value.data();
        const T* g = p.grad.data();
        T* m = m_[k].data();
        T* v = v_[k].data();
        for (int64_t i = 0; i < p.value.numel(); ++i) {
            const double gi = g[i];
            const double mi = b1 * m[i] + (1 - b1) * gi;
            const double vi = b2 * v[i] + (1 - b2) * gi * gi;
            m[i] = static_cast<T>(mi);
            v[i] = static_cast<T>(vi);
            const double wi = w[i];
            w[i] = static_cast<T>(wi - opts_.lr * ((mi / c1) / (std::sqrt(vi / c2) + opts_.eps) + opts_.weight_decay * wi));
        }
    }
}

template <typename T>
std::vector<CheckpointEntry<T>> AdamW<T>::state_entries() const {
    std::vector<CheckpointEntry<T>> out;
    for (size_t k = 0; k < params_.size(); ++k) out.push_back({"adam_m", params_[k]->name, m_[k]});
    for (size_t k = 0; k < params_.size(); ++k) out.push_back({"adam_v", params_[k]->name, v_[k]});
    return out;
}

template <typename T>
json AdamW<T>::state_meta() const {
    return json{{"t", t_},           {"lr", opts_.lr},   {"beta1", opts_.beta1}, {"beta2", opts_.beta2},
                {"eps", opts_.eps}, {"weight_decay", opts_.weight_decay}};
}

template <typename T>
void AdamW<T>::load_state(const Checkpoint<T>& ckpt, const json& meta) {
    std::vector<Tensor<T>> m, v;
    for (auto* p : params_) {
        const Tensor<T>* a = ckpt.find("adam_m", p->name);
        const Tensor<T>* b = ckpt.find("adam_v", p->name);
        if (!a || !b) throw CheckpointError("optimizer state missing for parameter " + p->name);
        if (a->shape() != p->value.shape() || b->shape() != p->value.shape()) {
            throw CheckpointError("optimizer state for " + p->name + " has shape " + shape_str(a->shape()) +
                                  ", parameter is " + shape_str(p->value.shape()));
        }
        m.push_back(*a);
        v.push_back(*b);
    }
    try {
        t_ = meta.at("t").get<int64_t>();
        opts_.lr = meta.at("lr").get<double>();
        opts_.beta1 = meta.at("beta1").get<double>();
        opts_.beta2 = meta.at("beta2").get<double>();
        opts_.eps = meta.at("eps").get<double>();
        opts_.weight_decay = meta.at("weight_decay").get<double>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("optimizer metadata: ") + e.what());
    }
    m_ = std::move(m);
    v_ = std::move(v);
}

template class AdamW<float>;
template class AdamW<double>;

PlateauScheduler::PlateauScheduler(double lr, double factor, int64_t patience)
    : lr_(lr), factor_(factor), patience_(patience) {
    if (!(factor > 0 && factor < 1)) throw std::invalid_argument("plateau factor must be in (0, 1)");
    if (patience < 0) throw std::invalid_argument("plateau patience must be >= 0");
}

double PlateauScheduler::step(double metric) {
    if (!std::isfinite(metric)) throw NonFiniteError("scheduler received a non-finite metric");
    if (metric > best_) {
        best_ = metric;
        stall_ = 0;
    } else if (++stall_ > patience_) {
        lr_ *= factor_;
        stall_ = 0;
    }
    return lr_;
}

json PlateauScheduler::to_json() const {
    return json{{"lr", lr_},
                {"factor", factor_},
                {"patience", patience_},
                {"best", std::isfinite(best_) ? json(best_) : json(nullptr)},
                {"stalled", stall_}};
}

void PlateauScheduler::load(const json& j) {
    try {
        lr_ = j.at("lr").get<double>();
        factor_ = j.at("factor").get<double>();
        patience_ = j.at("patience").get<int64_t>();
        best_ = j.at("best").is_null() ? -std::numeric_limits<double>::infinity() : j.at("best").get<double>();
        stall_ = j.at("stalled").get<int64_t>();
    } catch (const json::exception& e) {
        throw CheckpointError(std::string("scheduler metadata: ") + e.what());
    }
}

}  // namespace uxnet
