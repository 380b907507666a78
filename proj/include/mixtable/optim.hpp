#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "mixtable/nn.hpp"
#include "mixtable/tensor.hpp"

namespace mixtable {

inline double cosine_lr(int64_t step, int64_t total_steps, double lr0) {
    if (total_steps <= 0) throw ConfigError("cosine_lr: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ConfigError(concat("cosine_lr: step ", step, " outside [0, ", total_steps, "]"));
    const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
    return lr0 * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
}

template <typename Real>
struct AdamState {
    struct Moments {
        Tensor<Real> m;
        Tensor<Real> v;
    };
    std::unordered_map<std::string, Moments> moments;
    int64_t step_count = 0;
};

template <typename Real>
using GradView = std::unordered_map<std::string, const Tensor<Real>*>;

template <typename Real>
GradView<Real> gradients_of(const BoundParams<Real>& bound) {
    GradView<Real> g;
    for (const auto& [name, id] : bound.ids) g.emplace(name, &bound.graph->grad(id));
    return g;
}

template <typename Real>
double global_grad_norm(const GradView<Real>& grads) {
    double ss = 0;
    for (const auto& [name, t] : grads) {
        (void)name;
        for (Real x : t->data) ss += static_cast<double>(x) * static_cast<double>(x);
    }
    return std::sqrt(ss);
}

// One adaptive-moment update over every parameter in the store. `grad_scale`
// is applied to each gradient first (gradient clipping plugs in there).
template <typename Real>
void adam_step(ParameterStore<Real>& store, const GradView<Real>& grads, AdamState<Real>& state,
               double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
               double grad_scale = 1.0) {
    if (lr <= 0) throw ConfigError(concat("adam_step: nonpositive learning rate ", lr));
    state.step_count += 1;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step_count));
    for (const auto& name : store.names()) {
        auto git = grads.find(name);
        if (git == grads.end()) throw Error(concat("adam_step: no gradient for '", name, "'"));
        const Tensor<Real>& g = *git->second;
        Tensor<Real>& p = store.at(name);
        check_same_shape(p, g, "adam_step");
        auto [it, fresh] = state.moments.try_emplace(name);
        if (fresh) {
            it->second.m = Tensor<Real>::zeros(p.shape);
            it->second.v = Tensor<Real>::zeros(p.shape);
        }
        auto& m = it->second.m.data;
        auto& v = it->second.v.data;
        for (size_t i = 0; i < p.data.size(); ++i) {
            const double gi = static_cast<double>(g.data[i]) * grad_scale;
            const double mi = beta1 * static_cast<double>(m[i]) + (1.0 - beta1) * gi;
            const double vi = beta2 * static_cast<double>(v[i]) + (1.0 - beta2) * gi * gi;
            m[i] = static_cast<Real>(mi);
            v[i] = static_cast<Real>(vi);
            const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps);
            p.data[i] = static_cast<Real>(static_cast<double>(p.data[i]) - update);
        }
    }
}

}  // namespace mixtable
