#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "mixtable/graph.hpp"
#include "mixtable/rng.hpp"
#include "mixtable/tensor.hpp"

namespace mixtable {

// Named parameter tensors with stable iteration order (checkpoint layout
// depends on it).
template <typename Real>
class ParameterStore {
public:
    Tensor<Real>& add(const std::string& name, Tensor<Real> t) {
        if (index_.count(name)) throw Error(concat("duplicate parameter '", name, "'"));
        index_.emplace(name, order_.size());
        order_.push_back(name);
        tensors_.push_back(std::move(t));
        return tensors_.back();
    }

    bool has(const std::string& name) const { return index_.count(name) > 0; }

    Tensor<Real>& at(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error(concat("unknown parameter '", name, "'"));
        return tensors_[it->second];
    }
    const Tensor<Real>& at(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error(concat("unknown parameter '", name, "'"));
        return tensors_[it->second];
    }

    const std::vector<std::string>& names() const { return order_; }
    size_t count() const { return order_.size(); }

    size_t total_values() const {
        size_t n = 0;
        for (const auto& t : tensors_) n += t.numel();
        return n;
    }

    template <typename R2>
    ParameterStore<R2> cast() const {
        ParameterStore<R2> out;
        for (size_t i = 0; i < order_.size(); ++i) out.add(order_[i], tensors_[i].template cast<R2>());
        return out;
    }

private:
    std::vector<std::string> order_;
    std::vector<Tensor<Real>> tensors_;
    std::unordered_map<std::string, size_t> index_;
};

// truncated normal, resampling outside 2 std
template <typename Real>
void init_trunc_normal(Tensor<Real>& t, CounterRng& rng, double std_dev = 0.02) {
    for (auto& x : t.data) {
        double z = rng.next_gaussian();
        while (std::abs(z) > 2.0) z = rng.next_gaussian();
        x = static_cast<Real>(z * std_dev);
    }
}

// Parameter nodes for one store, bound to one graph, in store order. Binding
// every parameter up front means parameters a loss never touches still get
// (zero) gradients.
template <typename Real>
struct BoundParams {
    Graph<Real>* graph = nullptr;
    const ParameterStore<Real>* store = nullptr;
    std::unordered_map<std::string, NodeId> ids;

    NodeId operator[](const std::string& name) const {
        auto it = ids.find(name);
        if (it == ids.end()) throw Error(concat("parameter '", name, "' not bound"));
        return it->second;
    }

    const Tensor<Real>& grad(const std::string& name) const { return graph->grad((*this)[name]); }
};

template <typename Real>
BoundParams<Real> bind_parameters(Graph<Real>& g, const ParameterStore<Real>& store) {
    BoundParams<Real> bound;
    bound.graph = &g;
    bound.store = &store;
    for (const auto& name : store.names()) bound.ids.emplace(name, g.param(store.at(name)));
    return bound;
}

// ---------------------------------------------------------------------------
// linear / mlp

template <typename Real>
void add_linear_params(ParameterStore<Real>& store, const std::string& prefix, int in, int out,
                       CounterRng& rng) {
    Tensor<Real> w = Tensor<Real>::zeros({in, out});
    init_trunc_normal(w, rng);
    store.add(prefix + "/w", std::move(w));
    store.add(prefix + "/b", Tensor<Real>::zeros({out}));
}

template <typename Real>
NodeId linear(BoundParams<Real>& p, const std::string& prefix, NodeId x) {
    Graph<Real>& g = *p.graph;
    return g.add_rowvec(g.matmul(x, p[prefix + "/w"]), p[prefix + "/b"]);
}

struct MlpDims {
    int in = 0;
    int hidden = 0;
    int out = 0;
};

// 3 linear layers with gelu between them
template <typename Real>
void add_mlp_params(ParameterStore<Real>& store, const std::string& prefix, const MlpDims& dims,
                    CounterRng& rng) {
    add_linear_params(store, prefix + "/fc0", dims.in, dims.hidden, rng);
    add_linear_params(store, prefix + "/fc1", dims.hidden, dims.hidden, rng);
    add_linear_params(store, prefix + "/fc2", dims.hidden, dims.out, rng);
}

template <typename Real>
NodeId mlp(BoundParams<Real>& p, const std::string& prefix, NodeId x) {
    Graph<Real>& g = *p.graph;
    NodeId h = g.gelu(linear(p, prefix + "/fc0", x));
    h = g.gelu(linear(p, prefix + "/fc1", h));
    return linear(p, prefix + "/fc2", h);
}

// ---------------------------------------------------------------------------
// transformer encoder

struct TransformerConfig {
    int n_layers = 10;
    int d_h = 1024;
    int n_heads = 8;
    double mlp_ratio = 4.0;
    std::string positional_encoding = "none";  // column order carries no meaning

    int ffn_dim() const { return static_cast<int>(d_h * mlp_ratio); }

    void validate() const {
        if (n_layers <= 0 || d_h <= 0 || n_heads <= 0 || mlp_ratio <= 0)
            throw ConfigError("transformer dims must be positive");
        if (d_h % n_heads != 0)
            throw ConfigError(concat("d_h = ", d_h, " not divisible by n_heads = ", n_heads));
        if (positional_encoding != "none")
            throw ConfigError("positional_encoding must be \"none\"");
    }
};

template <typename Real>
void add_layer_norm_params(ParameterStore<Real>& store, const std::string& prefix, int dim) {
    store.add(prefix + "/gamma", Tensor<Real>::full({dim}, Real(1)));
    store.add(prefix + "/beta", Tensor<Real>::zeros({dim}));
}

template <typename Real>
NodeId layer_norm(BoundParams<Real>& p, const std::string& prefix, NodeId x) {
    return p.graph->layer_norm(x, p[prefix + "/gamma"], p[prefix + "/beta"]);
}

template <typename Real>
void add_attention_params(ParameterStore<Real>& store, const std::string& prefix, int d_h,
                          CounterRng& rng) {
    add_linear_params(store, prefix + "/q", d_h, d_h, rng);
    add_linear_params(store, prefix + "/k", d_h, d_h, rng);
    add_linear_params(store, prefix + "/v", d_h, d_h, rng);
    add_linear_params(store, prefix + "/o", d_h, d_h, rng);
}

// full multi-head self-attention block: projections + softmax attention +
// output projection; no causal mask
template <typename Real>
NodeId multi_head_self_attention(BoundParams<Real>& p, const std::string& prefix, NodeId x,
                                 int batch, int seq_len, int heads) {
    Graph<Real>& g = *p.graph;
    NodeId q = linear(p, prefix + "/q", x);
    NodeId k = linear(p, prefix + "/k", x);
    NodeId v = linear(p, prefix + "/v", x);
    NodeId attn = g.attention_core(q, k, v, batch, seq_len, heads);
    return linear(p, prefix + "/o", attn);
}

template <typename Real>
void add_transformer_params(ParameterStore<Real>& store, const std::string& prefix,
                            const TransformerConfig& cfg, CounterRng& rng) {
    cfg.validate();
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = concat(prefix, "/layer", l);
        add_layer_norm_params(store, lp + "/ln1", cfg.d_h);
        add_attention_params(store, lp + "/attn", cfg.d_h, rng);
        add_layer_norm_params(store, lp + "/ln2", cfg.d_h);
        add_linear_params(store, lp + "/ffn/fc0", cfg.d_h, cfg.ffn_dim(), rng);
        add_linear_params(store, lp + "/ffn/fc1", cfg.ffn_dim(), cfg.d_h, rng);
    }
    add_layer_norm_params(store, prefix + "/final_norm", cfg.d_h);
}

// pre-norm residual blocks, final layer norm
template <typename Real>
NodeId transformer_encoder(BoundParams<Real>& p, const std::string& prefix,
                           const TransformerConfig& cfg, NodeId x, int batch, int seq_len) {
    Graph<Real>& g = *p.graph;
    for (int l = 0; l < cfg.n_layers; ++l) {
        const std::string lp = concat(prefix, "/layer", l);
        NodeId a = multi_head_self_attention(p, lp + "/attn", layer_norm(p, lp + "/ln1", x),
                                             batch, seq_len, cfg.n_heads);
        x = g.add(x, a);  // residual
        NodeId h = layer_norm(p, lp + "/ln2", x);
        h = linear(p, lp + "/ffn/fc1", g.gelu(linear(p, lp + "/ffn/fc0", h)));
        x = g.add(x, h);  // residual
    }
    return layer_norm(p, prefix + "/final_norm", x);
}

// residual wrapper around an arbitrary sublayer
template <typename Real, typename Sublayer>
NodeId residual_block(Graph<Real>& g, NodeId x, Sublayer&& f) {
    return g.add(x, f(x));
}

}  // namespace mixtable
