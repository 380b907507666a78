#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "mixtable/common.hpp"
#include "mixtable/tensor.hpp"

namespace mixtable {

using NodeId = int;

// Reverse-mode tape. Every op appends a node holding its output value and,
// when recording, a closure that scatters the node's gradient back into its
// parents. Nodes are evaluated eagerly; backward() walks the tape in reverse
// creation order, which is a valid topological order.
//
// Instantiated at float for training and at double for finite-difference
// verification.
template <typename Real>
class Graph {
public:
    explicit Graph(bool record = true) : record_(record) {}
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    bool recording() const { return record_; }
    size_t size() const { return nodes_.size(); }

    // leaf that participates in differentiation (parameters, trainable inputs)
    NodeId param(Tensor<Real> v) {
        nodes_.push_back(Node{std::move(v), {}, {}, record_});
        return static_cast<NodeId>(nodes_.size() - 1);
    }
    // leaf treated as fixed data
    NodeId constant(Tensor<Real> v) {
        nodes_.push_back(Node{std::move(v), {}, {}, false});
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    const Tensor<Real>& value(NodeId id) const { return node(id).value; }

    const Tensor<Real>& grad(NodeId id) const {
        if (!backward_done_) throw Error("gradient requested before backward");
        return node(id).grad;
    }

    // ------------------------------------------------------------------
    // arithmetic

    NodeId add(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "add");
        Tensor<Real> out = value(a);
        const auto& vb = value(b).data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += vb[i];
        return make_node(std::move(out), {a, b}, [this, a, b](const Node& n) {
            accumulate(a, n.grad.data);
            accumulate(b, n.grad.data);
        });
    }

    NodeId sub(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "sub");
        Tensor<Real> out = value(a);
        const auto& vb = value(b).data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] -= vb[i];
        return make_node(std::move(out), {a, b}, [this, a, b](const Node& n) {
            accumulate(a, n.grad.data);
            if (wants_grad(b)) {
                auto& gb = node_mut(b).grad.data;
                for (size_t i = 0; i < gb.size(); ++i) gb[i] -= n.grad.data[i];
            }
        });
    }

    NodeId mul(NodeId a, NodeId b) {
        check_same_shape(value(a), value(b), "mul");
        Tensor<Real> out = value(a);
        const auto& vb = value(b).data;
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= vb[i];
        return make_node(std::move(out), {a, b}, [this, a, b](const Node& n) {
            if (wants_grad(a)) {
                auto& ga = node_mut(a).grad.data;
                const auto& vb2 = value(b).data;
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad.data[i] * vb2[i];
            }
            if (wants_grad(b)) {
                auto& gb = node_mut(b).grad.data;
                const auto& va = value(a).data;
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += n.grad.data[i] * va[i];
            }
        });
    }

    NodeId scale(NodeId a, Real c) {
        Tensor<Real> out = value(a);
        for (auto& x : out.data) x *= c;
        return make_node(std::move(out), {a}, [this, a, c](const Node& n) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += c * n.grad.data[i];
        });
    }

    // [m,n] + row vector [n] (or [1,n]) broadcast over rows
    NodeId add_rowvec(NodeId a, NodeId v) {
        const auto& va = value(a);
        const auto& vv = value(v);
        const int m = va.rows(), n = va.cols();
        if (static_cast<int>(vv.numel()) != n)
            throw Error(concat("add_rowvec: shape mismatch ", shape_to_string(va.shape), " vs ",
                               shape_to_string(vv.shape)));
        Tensor<Real> out = va;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += vv.data[j];
        return make_node(std::move(out), {a, v}, [this, a, v, m, n](const Node& nd) {
            accumulate(a, nd.grad.data);
            if (wants_grad(v)) {
                auto& gv = node_mut(v).grad.data;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) gv[j] += nd.grad.data[static_cast<size_t>(i) * n + j];
            }
        });
    }

    // adds row vector v to the rows of a flagged in mask
    NodeId add_masked_rows(NodeId a, NodeId v, std::vector<uint8_t> mask) {
        const auto& va = value(a);
        const auto& vv = value(v);
        const int m = va.rows(), n = va.cols();
        if (static_cast<int>(vv.numel()) != n || static_cast<int>(mask.size()) != m)
            throw Error(concat("add_masked_rows: shape mismatch ", shape_to_string(va.shape),
                               " vs ", shape_to_string(vv.shape)));
        Tensor<Real> out = va;
        for (int i = 0; i < m; ++i) {
            if (!mask[i]) continue;
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += vv.data[j];
        }
        return make_node(std::move(out), {a, v},
                         [this, a, v, m, n, mask = std::move(mask)](const Node& nd) {
                             accumulate(a, nd.grad.data);
                             if (wants_grad(v)) {
                                 auto& gv = node_mut(v).grad.data;
                                 for (int i = 0; i < m; ++i) {
                                     if (!mask[i]) continue;
                                     for (int j = 0; j < n; ++j)
                                         gv[j] += nd.grad.data[static_cast<size_t>(i) * n + j];
                                 }
                             }
                         });
    }

    // per-row constant scaling: out[i,:] = s[i] * a[i,:]
    NodeId mul_rows(NodeId a, std::vector<Real> row_scale) {
        const auto& va = value(a);
        const int m = va.rows(), n = va.cols();
        if (static_cast<int>(row_scale.size()) != m)
            throw Error(concat("mul_rows: ", row_scale.size(), " scales for ", m, " rows"));
        Tensor<Real> out = va;
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] *= row_scale[i];
        return make_node(std::move(out), {a},
                         [this, a, m, n, row_scale = std::move(row_scale)](const Node& nd) {
                             if (!wants_grad(a)) return;
                             auto& ga = node_mut(a).grad.data;
                             for (int i = 0; i < m; ++i)
                                 for (int j = 0; j < n; ++j)
                                     ga[static_cast<size_t>(i) * n + j] +=
                                         row_scale[i] * nd.grad.data[static_cast<size_t>(i) * n + j];
                         });
    }

    // ------------------------------------------------------------------
    // matrix products

    // [m,k] x [k,n] -> [m,n]
    NodeId matmul(NodeId a, NodeId b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.shape.size() != 2 || vb.shape.size() != 2 || va.shape[1] != vb.shape[0])
            throw Error(concat("matmul: shape mismatch ", shape_to_string(va.shape), " vs ",
                               shape_to_string(vb.shape)));
        const int m = va.shape[0], k = va.shape[1], n = vb.shape[1];
        Tensor<Real> out = Tensor<Real>::zeros({m, n});
        gemm_nn(va.data.data(), vb.data.data(), out.data.data(), m, k, n);
        return make_node(std::move(out), {a, b}, [this, a, b, m, k, n](const Node& nd) {
            if (wants_grad(a)) {  // dA += dC * B^T
                auto& ga = node_mut(a).grad.data;
                const auto& vb2 = value(b).data;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const Real g = nd.grad.data[static_cast<size_t>(i) * n + j];
                        if (g == Real(0)) continue;
                        for (int p = 0; p < k; ++p)
                            ga[static_cast<size_t>(i) * k + p] += g * vb2[static_cast<size_t>(p) * n + j];
                    }
            }
            if (wants_grad(b)) {  // dB += A^T * dC
                auto& gb = node_mut(b).grad.data;
                const auto& va2 = value(a).data;
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        const Real av = va2[static_cast<size_t>(i) * k + p];
                        if (av == Real(0)) continue;
                        for (int j = 0; j < n; ++j)
                            gb[static_cast<size_t>(p) * n + j] += av * nd.grad.data[static_cast<size_t>(i) * n + j];
                    }
            }
        });
    }

    // [m,k] x [n,k]^T -> [m,n]
    NodeId matmul_nt(NodeId a, NodeId b) {
        const auto& va = value(a);
        const auto& vb = value(b);
        if (va.shape.size() != 2 || vb.shape.size() != 2 || va.shape[1] != vb.shape[1])
            throw Error(concat("matmul_nt: shape mismatch ", shape_to_string(va.shape), " vs ",
                               shape_to_string(vb.shape)));
        const int m = va.shape[0], k = va.shape[1], n = vb.shape[0];
        Tensor<Real> out = Tensor<Real>::zeros({m, n});
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                Real s = 0;
                for (int p = 0; p < k; ++p)
                    s += va.data[static_cast<size_t>(i) * k + p] * vb.data[static_cast<size_t>(j) * k + p];
                out.data[static_cast<size_t>(i) * n + j] = s;
            }
        return make_node(std::move(out), {a, b}, [this, a, b, m, k, n](const Node& nd) {
            if (wants_grad(a)) {  // dA += dC * B
                auto& ga = node_mut(a).grad.data;
                const auto& vb2 = value(b).data;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const Real g = nd.grad.data[static_cast<size_t>(i) * n + j];
                        if (g == Real(0)) continue;
                        for (int p = 0; p < k; ++p)
                            ga[static_cast<size_t>(i) * k + p] += g * vb2[static_cast<size_t>(j) * k + p];
                    }
            }
            if (wants_grad(b)) {  // dB += dC^T * A
                auto& gb = node_mut(b).grad.data;
                const auto& va2 = value(a).data;
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) {
                        const Real g = nd.grad.data[static_cast<size_t>(i) * n + j];
                        if (g == Real(0)) continue;
                        for (int p = 0; p < k; ++p)
                            gb[static_cast<size_t>(j) * k + p] += g * va2[static_cast<size_t>(i) * k + p];
                    }
            }
        });
    }

    // ------------------------------------------------------------------
    // nonlinearities and normalizations

    NodeId gelu(NodeId a) {
        Tensor<Real> out = value(a);
        for (auto& x : out.data) x = gelu_fwd(x);
        return make_node(std::move(out), {a}, [this, a](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            const auto& va = value(a).data;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad.data[i] * gelu_bwd(va[i]);
        });
    }

    NodeId layer_norm(NodeId a, NodeId gamma, NodeId beta, Real eps = Real(1e-5)) {
        const auto& va = value(a);
        const int m = va.rows(), n = va.cols();
        if (static_cast<int>(value(gamma).numel()) != n || static_cast<int>(value(beta).numel()) != n)
            throw Error(concat("layer_norm: shape mismatch ", shape_to_string(va.shape), " vs ",
                               shape_to_string(value(gamma).shape)));
        Tensor<Real> out = Tensor<Real>::zeros(va.shape);
        Tensor<Real> xhat = Tensor<Real>::zeros(va.shape);
        std::vector<Real> inv_std(m);
        const auto& g = value(gamma).data;
        const auto& b = value(beta).data;
        for (int i = 0; i < m; ++i) {
            const Real* row = va.data.data() + static_cast<size_t>(i) * n;
            Real mean = 0;
            for (int j = 0; j < n; ++j) mean += row[j];
            mean /= Real(n);
            Real var = 0;
            for (int j = 0; j < n; ++j) var += (row[j] - mean) * (row[j] - mean);
            var /= Real(n);
            const Real is = Real(1) / std::sqrt(var + eps);
            inv_std[i] = is;
            for (int j = 0; j < n; ++j) {
                const Real xh = (row[j] - mean) * is;
                xhat.data[static_cast<size_t>(i) * n + j] = xh;
                out.data[static_cast<size_t>(i) * n + j] = xh * g[j] + b[j];
            }
        }
        return make_node(std::move(out), {a, gamma, beta},
                         [this, a, gamma, beta, m, n, xhat = std::move(xhat),
                          inv_std = std::move(inv_std)](const Node& nd) {
                             const auto& g2 = value(gamma).data;
                             for (int i = 0; i < m; ++i) {
                                 const Real* dy = nd.grad.data.data() + static_cast<size_t>(i) * n;
                                 const Real* xh = xhat.data.data() + static_cast<size_t>(i) * n;
                                 if (wants_grad(gamma)) {
                                     auto& gg = node_mut(gamma).grad.data;
                                     for (int j = 0; j < n; ++j) gg[j] += dy[j] * xh[j];
                                 }
                                 if (wants_grad(beta)) {
                                     auto& gb = node_mut(beta).grad.data;
                                     for (int j = 0; j < n; ++j) gb[j] += dy[j];
                                 }
                                 if (wants_grad(a)) {
                                     Real sum_g = 0, sum_gx = 0;
                                     for (int j = 0; j < n; ++j) {
                                         const Real gj = dy[j] * g2[j];
                                         sum_g += gj;
                                         sum_gx += gj * xh[j];
                                     }
                                     const Real inv_n = Real(1) / Real(n);
                                     auto& ga = node_mut(a).grad.data;
                                     for (int j = 0; j < n; ++j) {
                                         const Real gj = dy[j] * g2[j];
                                         ga[static_cast<size_t>(i) * n + j] +=
                                             inv_std[i] * (gj - sum_g * inv_n - xh[j] * sum_gx * inv_n);
                                     }
                                 }
                             }
                         });
    }

    NodeId softmax_rows(NodeId a) {
        const auto& va = value(a);
        const int m = va.rows(), n = va.cols();
        Tensor<Real> out = Tensor<Real>::zeros(va.shape);
        for (int i = 0; i < m; ++i)
            softmax_row(va.data.data() + static_cast<size_t>(i) * n,
                        out.data.data() + static_cast<size_t>(i) * n, n);
        return make_node(std::move(out), {a}, [this, a, m, n](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            for (int i = 0; i < m; ++i) {
                const Real* y = nd.value.data.data() + static_cast<size_t>(i) * n;
                const Real* dy = nd.grad.data.data() + static_cast<size_t>(i) * n;
                Real dot = 0;
                for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
                for (int j = 0; j < n; ++j)
                    ga[static_cast<size_t>(i) * n + j] += y[j] * (dy[j] - dot);
            }
        });
    }

    NodeId log_softmax_rows(NodeId a) {
        const auto& va = value(a);
        const int m = va.rows(), n = va.cols();
        Tensor<Real> out = Tensor<Real>::zeros(va.shape);
        for (int i = 0; i < m; ++i) {
            const Real* row = va.data.data() + static_cast<size_t>(i) * n;
            Real mx = row[0];
            for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
            Real sum = 0;
            for (int j = 0; j < n; ++j) sum += std::exp(row[j] - mx);
            const Real lse = mx + std::log(sum);
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] = row[j] - lse;
        }
        return make_node(std::move(out), {a}, [this, a, m, n](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            for (int i = 0; i < m; ++i) {
                const Real* logp = nd.value.data.data() + static_cast<size_t>(i) * n;
                const Real* dy = nd.grad.data.data() + static_cast<size_t>(i) * n;
                Real sum_dy = 0;
                for (int j = 0; j < n; ++j) sum_dy += dy[j];
                for (int j = 0; j < n; ++j)
                    ga[static_cast<size_t>(i) * n + j] += dy[j] - std::exp(logp[j]) * sum_dy;
            }
        });
    }

    NodeId exp(NodeId a) {
        Tensor<Real> out = value(a);
        for (auto& x : out.data) x = std::exp(x);
        return make_node(std::move(out), {a}, [this, a](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += nd.grad.data[i] * nd.value.data[i];
        });
    }

    // row-wise x / ||x||_2; the norm is accumulated at f64 so unit rows stay
    // unit to f32 rounding. All-zero rows map to zero.
    NodeId l2_normalize_rows(NodeId a) {
        const auto& va = value(a);
        const int m = va.rows(), n = va.cols();
        Tensor<Real> out = Tensor<Real>::zeros(va.shape);
        std::vector<Real> inv_norm(m);
        for (int i = 0; i < m; ++i) {
            const Real* row = va.data.data() + static_cast<size_t>(i) * n;
            double ss = 0;
            for (int j = 0; j < n; ++j) ss += static_cast<double>(row[j]) * row[j];
            const Real inv = ss > 0 ? static_cast<Real>(1.0 / std::sqrt(ss)) : Real(0);
            inv_norm[i] = inv;
            for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] = row[j] * inv;
        }
        return make_node(std::move(out), {a},
                         [this, a, m, n, inv_norm = std::move(inv_norm)](const Node& nd) {
                             if (!wants_grad(a)) return;
                             auto& ga = node_mut(a).grad.data;
                             for (int i = 0; i < m; ++i) {
                                 const Real* y = nd.value.data.data() + static_cast<size_t>(i) * n;
                                 const Real* dy = nd.grad.data.data() + static_cast<size_t>(i) * n;
                                 Real dot = 0;
                                 for (int j = 0; j < n; ++j) dot += y[j] * dy[j];
                                 for (int j = 0; j < n; ++j)
                                     ga[static_cast<size_t>(i) * n + j] += inv_norm[i] * (dy[j] - y[j] * dot);
                             }
                         });
    }

    // ------------------------------------------------------------------
    // gather / scatter / layout

    // out[i,:] = m[indices[i],:]
    NodeId gather_rows(NodeId m, std::vector<int> indices) {
        const auto& vm = value(m);
        const int rows = vm.rows(), n = vm.cols();
        Tensor<Real> out = Tensor<Real>::zeros({static_cast<int>(indices.size()), n});
        for (size_t i = 0; i < indices.size(); ++i) {
            const int r = indices[i];
            if (r < 0 || r >= rows)
                throw Error(concat("gather_rows: index ", r, " out of range [0, ", rows, ")"));
            for (int j = 0; j < n; ++j) out.data[i * n + j] = vm.data[static_cast<size_t>(r) * n + j];
        }
        return make_node(std::move(out), {m},
                         [this, m, n, indices = std::move(indices)](const Node& nd) {
                             if (!wants_grad(m)) return;
                             auto& gm = node_mut(m).grad.data;
                             for (size_t i = 0; i < indices.size(); ++i)
                                 for (int j = 0; j < n; ++j)
                                     gm[static_cast<size_t>(indices[i]) * n + j] += nd.grad.data[i * n + j];
                         });
    }

    // out[i] = -logp[i, targets[i]], as a [m,1] column
    NodeId gather_neg_log(NodeId logp, std::vector<int> targets) {
        const auto& v = value(logp);
        const int m = v.rows(), n = v.cols();
        if (static_cast<int>(targets.size()) != m)
            throw Error(concat("gather_neg_log: ", targets.size(), " targets for ", m, " rows"));
        Tensor<Real> out = Tensor<Real>::zeros({m, 1});
        for (int i = 0; i < m; ++i) {
            const int t = targets[i];
            if (t < 0 || t >= n)
                throw Error(concat("gather_neg_log: target ", t, " out of range [0, ", n, ")"));
            out.data[i] = -v.data[static_cast<size_t>(i) * n + t];
        }
        return make_node(std::move(out), {logp},
                         [this, logp, n, targets = std::move(targets)](const Node& nd) {
                             if (!wants_grad(logp)) return;
                             auto& g = node_mut(logp).grad.data;
                             for (size_t i = 0; i < targets.size(); ++i)
                                 g[i * n + targets[i]] -= nd.grad.data[i];
                         });
    }

    // stacks L lane matrices [B,n] into a sequence tensor [B*L, n] with
    // out[b*L + j] = lanes[j][b]
    NodeId interleave_lanes(const std::vector<NodeId>& lanes) {
        if (lanes.empty()) throw Error("interleave_lanes: no lanes");
        const int L = static_cast<int>(lanes.size());
        const int b_rows = value(lanes[0]).rows();
        const int n = value(lanes[0]).cols();
        for (NodeId l : lanes) check_same_shape(value(lanes[0]), value(l), "interleave_lanes");
        Tensor<Real> out = Tensor<Real>::zeros({b_rows * L, n});
        for (int j = 0; j < L; ++j) {
            const auto& v = value(lanes[j]).data;
            for (int b = 0; b < b_rows; ++b)
                for (int c = 0; c < n; ++c)
                    out.data[(static_cast<size_t>(b) * L + j) * n + c] = v[static_cast<size_t>(b) * n + c];
        }
        return make_node(std::move(out), lanes, [this, lanes, b_rows, L, n](const Node& nd) {
            for (int j = 0; j < L; ++j) {
                if (!wants_grad(lanes[j])) continue;
                auto& g = node_mut(lanes[j]).grad.data;
                for (int b = 0; b < b_rows; ++b)
                    for (int c = 0; c < n; ++c)
                        g[static_cast<size_t>(b) * n + c] += nd.grad.data[(static_cast<size_t>(b) * L + j) * n + c];
            }
        });
    }

    // inverse of interleave_lanes for one lane j: [B*L, n] -> [B, n]
    NodeId take_lane(NodeId seq, int lane, int n_lanes) {
        const auto& v = value(seq);
        const int total = v.rows(), n = v.cols();
        if (n_lanes <= 0 || total % n_lanes != 0 || lane < 0 || lane >= n_lanes)
            throw Error(concat("take_lane: lane ", lane, " of ", n_lanes, " from ",
                               shape_to_string(v.shape)));
        const int b_rows = total / n_lanes;
        Tensor<Real> out = Tensor<Real>::zeros({b_rows, n});
        for (int b = 0; b < b_rows; ++b)
            for (int c = 0; c < n; ++c)
                out.data[static_cast<size_t>(b) * n + c] = v.data[(static_cast<size_t>(b) * n_lanes + lane) * n + c];
        return make_node(std::move(out), {seq}, [this, seq, lane, n_lanes, b_rows, n](const Node& nd) {
            if (!wants_grad(seq)) return;
            auto& g = node_mut(seq).grad.data;
            for (int b = 0; b < b_rows; ++b)
                for (int c = 0; c < n; ++c)
                    g[(static_cast<size_t>(b) * n_lanes + lane) * n + c] += nd.grad.data[static_cast<size_t>(b) * n + c];
        });
    }

    // ------------------------------------------------------------------
    // attention core: scaled dot-product softmax attention applied
    // independently per batch element and head; no causal mask. q,k,v are
    // [B*L, d] with d = heads * head_dim.
    NodeId attention_core(NodeId q, NodeId k, NodeId v, int batch, int seq_len, int heads) {
        const auto& vq = value(q);
        check_same_shape(vq, value(k), "attention_core");
        check_same_shape(vq, value(v), "attention_core");
        const int d = vq.cols();
        if (vq.rows() != batch * seq_len || heads <= 0 || d % heads != 0)
            throw Error(concat("attention_core: bad geometry ", shape_to_string(vq.shape),
                               " batch=", batch, " seq=", seq_len, " heads=", heads));
        const int hd = d / heads;
        const Real scale = Real(1) / std::sqrt(static_cast<Real>(hd));

        Tensor<Real> out = Tensor<Real>::zeros(vq.shape);
        // attention weights kept for backward: [batch, heads, L, L]
        std::vector<Real> attn(static_cast<size_t>(batch) * heads * seq_len * seq_len);
        const auto& qd = vq.data;
        const auto& kd = value(k).data;
        const auto& vd = value(v).data;
        for (int b = 0; b < batch; ++b) {
            for (int h = 0; h < heads; ++h) {
                Real* a_bh = attn.data() + ((static_cast<size_t>(b) * heads + h) * seq_len) * seq_len;
                for (int i = 0; i < seq_len; ++i) {
                    const Real* qrow = qd.data() + (static_cast<size_t>(b) * seq_len + i) * d + h * hd;
                    Real* arow = a_bh + static_cast<size_t>(i) * seq_len;
                    for (int j = 0; j < seq_len; ++j) {
                        const Real* krow = kd.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                        Real s = 0;
                        for (int p = 0; p < hd; ++p) s += qrow[p] * krow[p];
                        arow[j] = s * scale;
                    }
                    softmax_row(arow, arow, seq_len);
                    Real* orow = out.data.data() + (static_cast<size_t>(b) * seq_len + i) * d + h * hd;
                    for (int j = 0; j < seq_len; ++j) {
                        const Real* vrow = vd.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                        const Real w = arow[j];
                        for (int p = 0; p < hd; ++p) orow[p] += w * vrow[p];
                    }
                }
            }
        }
        return make_node(std::move(out), {q, k, v},
                         [this, q, k, v, batch, seq_len, heads, hd, d, scale,
                          attn = std::move(attn)](const Node& nd) {
            const auto& qd2 = value(q).data;
            const auto& kd2 = value(k).data;
            const auto& vd2 = value(v).data;
            const bool gq = wants_grad(q), gk = wants_grad(k), gv = wants_grad(v);
            std::vector<Real> ds(static_cast<size_t>(seq_len) * seq_len);
            for (int b = 0; b < batch; ++b) {
                for (int h = 0; h < heads; ++h) {
                    const Real* a_bh = attn.data() + ((static_cast<size_t>(b) * heads + h) * seq_len) * seq_len;
                    // dV and dS
                    for (int i = 0; i < seq_len; ++i) {
                        const Real* dout = nd.grad.data.data() + (static_cast<size_t>(b) * seq_len + i) * d + h * hd;
                        const Real* arow = a_bh + static_cast<size_t>(i) * seq_len;
                        Real* dsrow = ds.data() + static_cast<size_t>(i) * seq_len;
                        // dA[i,j] = dout . v_j ; then softmax backward into dS
                        Real dot = 0;
                        for (int j = 0; j < seq_len; ++j) {
                            const Real* vrow = vd2.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                            Real da = 0;
                            for (int p = 0; p < hd; ++p) da += dout[p] * vrow[p];
                            dsrow[j] = da;
                            dot += da * arow[j];
                        }
                        for (int j = 0; j < seq_len; ++j)
                            dsrow[j] = arow[j] * (dsrow[j] - dot) * scale;
                        if (gv) {
                            auto& gvd = node_mut(v).grad.data;
                            for (int j = 0; j < seq_len; ++j) {
                                Real* gvrow = gvd.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                                const Real w = arow[j];
                                for (int p = 0; p < hd; ++p) gvrow[p] += w * dout[p];
                            }
                        }
                    }
                    if (gq) {
                        auto& gqd = node_mut(q).grad.data;
                        for (int i = 0; i < seq_len; ++i) {
                            Real* gqrow = gqd.data() + (static_cast<size_t>(b) * seq_len + i) * d + h * hd;
                            const Real* dsrow = ds.data() + static_cast<size_t>(i) * seq_len;
                            for (int j = 0; j < seq_len; ++j) {
                                const Real* krow = kd2.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                                for (int p = 0; p < hd; ++p) gqrow[p] += dsrow[j] * krow[p];
                            }
                        }
                    }
                    if (gk) {
                        auto& gkd = node_mut(k).grad.data;
                        for (int i = 0; i < seq_len; ++i) {
                            const Real* qrow = qd2.data() + (static_cast<size_t>(b) * seq_len + i) * d + h * hd;
                            const Real* dsrow = ds.data() + static_cast<size_t>(i) * seq_len;
                            for (int j = 0; j < seq_len; ++j) {
                                Real* gkrow = gkd.data() + (static_cast<size_t>(b) * seq_len + j) * d + h * hd;
                                for (int p = 0; p < hd; ++p) gkrow[p] += dsrow[j] * qrow[p];
                            }
                        }
                    }
                }
            }
        });
    }

    // ------------------------------------------------------------------
    // reductions

    NodeId sum_all(NodeId a) {
        Real s = 0;
        for (Real x : value(a).data) s += x;
        return make_node(Tensor<Real>::scalar(s), {a}, [this, a](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            const Real g = nd.grad.data[0];
            for (auto& x : ga) x += g;
        });
    }

    NodeId mean_all(NodeId a) {
        const size_t n = value(a).numel();
        if (n == 0) throw Error("mean_all of empty tensor");
        Real s = 0;
        for (Real x : value(a).data) s += x;
        s /= static_cast<Real>(n);
        return make_node(Tensor<Real>::scalar(s), {a}, [this, a, n](const Node& nd) {
            if (!wants_grad(a)) return;
            auto& ga = node_mut(a).grad.data;
            const Real g = nd.grad.data[0] / static_cast<Real>(n);
            for (auto& x : ga) x += g;
        });
    }

    // ------------------------------------------------------------------

    void backward(NodeId loss) {
        if (loss < 0 || loss >= static_cast<NodeId>(nodes_.size()))
            throw Error("backward called on a node this graph never produced");
        if (!record_) throw Error("backward on a non-recording graph");
        if (backward_done_) throw Error("backward already run on this graph");
        if (nodes_[loss].value.numel() != 1)
            throw Error(concat("backward needs a scalar loss, got shape ",
                               shape_to_string(nodes_[loss].value.shape)));
        for (auto& n : nodes_) n.grad = Tensor<Real>::zeros(n.value.shape);
        backward_done_ = true;
        nodes_[loss].grad.data[0] = Real(1);
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (n.requires_grad && n.backprop) n.backprop(n);
        }
    }

private:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;
        std::function<void(const Node&)> backprop;
        bool requires_grad = false;
    };

    const Node& node(NodeId id) const {
        if (id < 0 || id >= static_cast<NodeId>(nodes_.size()))
            throw Error(concat("invalid node id ", id));
        return nodes_[id];
    }
    Node& node_mut(NodeId id) { return nodes_[id]; }

    bool wants_grad(NodeId id) const { return nodes_[id].requires_grad; }

    void accumulate(NodeId id, const std::vector<Real>& g) {
        if (!wants_grad(id)) return;
        auto& dst = nodes_[id].grad.data;
        for (size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

    template <typename F>
    NodeId make_node(Tensor<Real> value, const std::vector<NodeId>& parents, F&& back) {
        bool req = false;
        for (NodeId p : parents) req = req || nodes_[p].requires_grad;
        Node n;
        n.value = std::move(value);
        n.requires_grad = req && record_;
        if (n.requires_grad) n.backprop = std::forward<F>(back);
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    static void gemm_nn(const Real* a, const Real* b, Real* c, int m, int k, int n) {
        for (int i = 0; i < m; ++i) {
            Real* crow = c + static_cast<size_t>(i) * n;
            for (int p = 0; p < k; ++p) {
                const Real av = a[static_cast<size_t>(i) * k + p];
                if (av == Real(0)) continue;
                const Real* brow = b + static_cast<size_t>(p) * n;
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    }

    static void softmax_row(const Real* in, Real* out, int n) {
        Real mx = in[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        Real sum = 0;
        for (int j = 0; j < n; ++j) {
            out[j] = std::exp(in[j] - mx);
            sum += out[j];
        }
        const Real inv = Real(1) / sum;
        for (int j = 0; j < n; ++j) out[j] *= inv;
    }

    static Real gelu_fwd(Real x) {
        return Real(0.5) * x * (Real(1) + std::erf(x * Real(0.7071067811865475244)));
    }
    static Real gelu_bwd(Real x) {
        const Real cdf = Real(0.5) * (Real(1) + std::erf(x * Real(0.7071067811865475244)));
        const Real pdf = std::exp(Real(-0.5) * x * x) * Real(0.3989422804014326779);
        return cdf + x * pdf;
    }

    std::vector<Node> nodes_;
    bool record_;
    bool backward_done_ = false;
};

}  // namespace mixtable
