#pragma once

// Finite-difference gradient oracle, kept independent of the tape's backward
// rules: losses are re-evaluated forward-only at perturbed parameters and
// compared against one analytic backward pass, all at f64.

#include <cmath>
#include <functional>
#include <string>
#include <unordered_map>

#include "mixtable/graph.hpp"
#include "mixtable/nn.hpp"

namespace gradcheck {

using mixtable::BoundParams;
using mixtable::Graph;
using mixtable::NodeId;
using mixtable::ParameterStore;
using mixtable::Tensor;

// loss builder: given a graph and bound parameters, return a scalar node
using LossFn = std::function<NodeId(Graph<double>&, BoundParams<double>&)>;

inline double eval_loss(const ParameterStore<double>& store, const LossFn& build) {
    Graph<double> g(false);
    BoundParams<double> bound = mixtable::bind_parameters(g, store);
    const NodeId loss = build(g, bound);
    return g.value(loss).data[0];
}

struct Report {
    double max_rel_error = 0.0;
    std::string worst_param;
    size_t checked = 0;
};

inline Report compare(ParameterStore<double>& store, const LossFn& build, double eps = 1e-3) {
    Graph<double> g(true);
    BoundParams<double> bound = mixtable::bind_parameters(g, store);
    const NodeId loss = build(g, bound);
    g.backward(loss);

    Report rep;
    for (const auto& name : store.names()) {
        const Tensor<double>& analytic = bound.grad(name);
        Tensor<double>& theta = store.at(name);
        for (size_t i = 0; i < theta.data.size(); ++i) {
            const double saved = theta.data[i];
            theta.data[i] = saved + eps;
            const double up = eval_loss(store, build);
            theta.data[i] = saved - eps;
            const double down = eval_loss(store, build);
            theta.data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.data[i];
            // floor at 0.1: true relative error for meaningful gradients,
            // 1e-5 absolute for near-zero ones (the FD oracle's truncation
            // error at eps=1e-3 sits around 1e-7 on these losses)
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 0.1});
            if (rel > rep.max_rel_error) {
                rep.max_rel_error = rel;
                rep.worst_param = name;
            }
            ++rep.checked;
        }
    }
    return rep;
}

// deterministic pseudo-random weights so every output element feeds the loss
inline NodeId weighted_sum(Graph<double>& g, NodeId x, uint64_t seed = 1) {
    Tensor<double> w = Tensor<double>::zeros(g.value(x).shape);
    mixtable::CounterRng rng(seed);
    for (auto& v : w.data) v = rng.next_gaussian();
    return g.sum_all(g.mul(x, g.constant(std::move(w))));
}

inline void fill_random(Tensor<double>& t, uint64_t seed, double scale = 1.0) {
    mixtable::CounterRng rng(seed);
    for (auto& v : t.data) v = rng.next_gaussian() * scale;
}

}  // namespace gradcheck
