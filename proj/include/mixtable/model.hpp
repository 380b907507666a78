#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixtable/dataset.hpp"
#include "mixtable/diffusion.hpp"
#include "mixtable/embedding.hpp"
#include "mixtable/graph.hpp"
#include "mixtable/nn.hpp"
#include "mixtable/rng.hpp"

namespace mixtable {

static_assert(std::endian::native == std::endian::little,
              "checkpoint and cache formats assume a little-endian host");

struct ModelConfig {
    int d_h = 1024;      // transformer hidden size
    int d_f = 1024;      // text embedding size
    int n_layers = 10;
    int n_heads = 8;
    double mlp_ratio = 4.0;
    int t_train = 1000;
    int t_infer = 200;
    std::string schedule_kind = "linear";

    TransformerConfig transformer() const {
        TransformerConfig t;
        t.n_layers = n_layers;
        t.d_h = d_h;
        t.n_heads = n_heads;
        t.mlp_ratio = mlp_ratio;
        return t;
    }

    void validate() const {
        transformer().validate();
        if (d_f <= 0) throw ConfigError("d_f must be positive");
        if (d_h % 2 != 0) throw ConfigError("d_h must be even (sinusoidal timestep features)");
        if (t_train < 1 || t_infer < 1 || t_infer > t_train)
            throw ConfigError(concat("bad diffusion steps: t_train = ", t_train, ", t_infer = ", t_infer));
    }

    nlohmann::ordered_json to_json() const {
        return {{"d_h", d_h},         {"d_f", d_f},
                {"n_layers", n_layers}, {"n_heads", n_heads},
                {"mlp_ratio", mlp_ratio}, {"t_train", t_train},
                {"t_infer", t_infer}, {"schedule", schedule_kind}};
    }

    static ModelConfig from_json(const nlohmann::json& j) {
        ModelConfig c;
        c.d_h = j.value("d_h", c.d_h);
        c.d_f = j.value("d_f", c.d_f);
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.t_train = j.value("t_train", c.t_train);
        c.t_infer = j.value("t_infer", c.t_infer);
        c.schedule_kind = j.value("schedule", c.schedule_kind);
        c.validate();
        return c;
    }
};

// Test hook: drops the description / feature-name / timestep terms from the
// fusion sum, isolating the value path.
struct FusionHook {
    bool zero_description = false;
    bool zero_feature_name = false;
    bool zero_timestep = false;
};

// Cached conditioning for one schema: r-bar, s-bar_j, C-bar_j.
struct FeatureContext {
    FeatureSchema schema;
    EmbeddingVector name_embedding;
    CategoryMatrix categories;  // categorical features only
};

struct DatasetContext {
    std::string id;
    std::string description;
    EmbeddingVector description_embedding;
    std::vector<FeatureContext> features;
    double weight = 1.0;

    size_t n_features() const { return features.size(); }

    static DatasetContext from_schema(std::string id, std::string description,
                                      const std::vector<FeatureSchema>& features,
                                      EmbeddingProvider& provider) {
        DatasetContext ctx;
        ctx.id = std::move(id);
        ctx.description = std::move(description);
        if (ctx.description.empty()) throw DataError(concat("dataset '", ctx.id, "': empty description"));
        ctx.description_embedding = provider.embed(ctx.description);
        for (const auto& f : features) {
            FeatureContext fc;
            fc.schema = f;
            fc.name_embedding = provider.embed(f.name);
            if (f.is_categorical()) fc.categories = build_category_matrix(f, provider);
            ctx.features.push_back(std::move(fc));
        }
        return ctx;
    }

    static DatasetContext from_bundle(const DatasetBundle& bundle, EmbeddingProvider& provider) {
        return from_schema(bundle.id, bundle.description, bundle.features, provider);
    }

    // sampling needs de-normalization stats and the allowed categories
    void require_sampling_info() const {
        for (const auto& f : features) {
            if (f.schema.is_categorical()) {
                if (f.schema.categories.empty())
                    throw DataError(concat("feature '", f.schema.name, "': no categories provided"));
            } else if (!f.schema.numeric_stats) {
                throw DataError(concat("feature '", f.schema.name, "': numeric stats required for sampling"));
            }
        }
    }
};

// One training/evaluation batch; all rows come from a single dataset so the
// sequence length is uniform.
struct LaneBatch {
    // numerical lanes: pre-noised scalars and clean targets
    std::vector<double> noisy_numeric;
    std::vector<double> clean_numeric;
    // categorical lanes, training path: target index + raw noise (the noisy
    // embedding is built in-graph so gradients reach g_f through the input)
    std::vector<int> target_category;
    std::vector<double> cat_noise;
    // categorical lanes, sampling path: the current noisy embeddings
    std::vector<double> cat_values;
    std::vector<uint8_t> missing;
};

struct RowBatch {
    const DatasetContext* context = nullptr;
    int t = 0;
    int n_rows = 0;
    std::vector<LaneBatch> lanes;
};

// Assembles a training batch: draws per-lane noise, pre-noises numericals,
// and leaves categorical noising to the graph. Missing lanes carry pure noise.
inline RowBatch make_batch(const DatasetBundle& normalized, const DatasetContext& ctx,
                           const NoiseSchedule& schedule, const std::vector<size_t>& rows, int t,
                           CounterRng& rng) {
    if (normalized.n_features() != ctx.n_features())
        throw DataError("make_batch: bundle and context disagree on feature count");
    RowBatch batch;
    batch.context = &ctx;
    batch.t = t;
    batch.n_rows = static_cast<int>(rows.size());
    int d_f = 0;
    for (const auto& f : ctx.features) {
        if (f.schema.is_categorical()) d_f = f.categories.dim;
    }
    batch.lanes.resize(ctx.n_features());
    std::vector<int> present_count(rows.size(), 0);
    for (size_t j = 0; j < ctx.n_features(); ++j) {
        const FeatureSchema& f = ctx.features[j].schema;
        LaneBatch& lane = batch.lanes[j];
        lane.missing.resize(rows.size());
        for (size_t b = 0; b < rows.size(); ++b) {
            const size_t r = rows[b];
            if (r >= normalized.n_rows())
                throw DataError(concat("make_batch: row ", r, " out of range"));
            lane.missing[b] = normalized.missing[j][r];
            if (!lane.missing[b]) ++present_count[b];
        }
        if (f.is_categorical()) {
            lane.target_category.resize(rows.size());
            lane.cat_noise.resize(rows.size() * static_cast<size_t>(d_f));
            for (size_t b = 0; b < rows.size(); ++b) {
                const int idx = normalized.columns[j].category[rows[b]];
                lane.target_category[b] = lane.missing[b] ? 0 : idx;
                for (int c = 0; c < d_f; ++c)
                    lane.cat_noise[b * d_f + c] = rng.next_gaussian();
            }
        } else {
            lane.noisy_numeric.resize(rows.size());
            lane.clean_numeric.resize(rows.size());
            for (size_t b = 0; b < rows.size(); ++b) {
                const double x0 = normalized.columns[j].numeric[rows[b]];
                const double eps = rng.next_gaussian();
                lane.clean_numeric[b] = x0;
                lane.noisy_numeric[b] = lane.missing[b] ? eps : forward_noise(x0, t, eps, schedule);
            }
        }
    }
    for (size_t b = 0; b < rows.size(); ++b) {
        if (present_count[b] == 0)
            throw DataError(concat("make_batch: all features of row ", rows[b], " are missing"));
    }
    return batch;
}

struct SampleOptions {
    bool argmax_categories = false;  // default draws from the final probabilities
    int chunk_rows = 256;
};

// plain-value per-lane predictions
struct LanePrediction {
    std::vector<double> values;                      // numerical lanes [B]
    std::vector<std::vector<double>> probabilities;  // categorical lanes [B][n_cat]
};
using ForwardResult = std::vector<LanePrediction>;

// Eq. 3 on plain values: per row, mean over present features of CE
// (categorical, natural log) and squared error (numerical); batch mean
// scaled by the dataset weight.
inline double combined_loss(const RowBatch& batch, const ForwardResult& preds) {
    if (preds.size() != batch.lanes.size())
        throw Error("combined_loss: prediction/lane count mismatch");
    double total = 0.0;
    for (int b = 0; b < batch.n_rows; ++b) {
        double row_sum = 0.0;
        int present = 0;
        for (size_t j = 0; j < batch.lanes.size(); ++j) {
            const LaneBatch& lane = batch.lanes[j];
            if (lane.missing[b]) continue;
            ++present;
            if (!lane.target_category.empty()) {
                const double p = preds[j].probabilities[b][lane.target_category[b]];
                row_sum += -std::log(p);
            } else {
                const double d = preds[j].values[b] - lane.clean_numeric[b];
                row_sum += d * d;
            }
        }
        if (present == 0) throw DataError(concat("combined_loss: row ", b, " has no present features"));
        total += row_sum / present;
    }
    return batch.context->weight * total / batch.n_rows;
}

// ---------------------------------------------------------------------------

// Metadata-conditioned diffusion denoiser over mixed-type table rows:
// per-lane fusion MLPs feeding a permutation-equivariant encoder-only
// transformer, with scalar and embedding output heads.
template <typename Real>
class TableDiffusionModel {
public:
    TableDiffusionModel(ModelConfig config, uint64_t init_seed)
        : config_(std::move(config)), schedule_(build_schedule(config_.t_train, config_.t_infer,
                                                               config_.schedule_kind)) {
        config_.validate();
        CounterRng rng(mix_u64(init_seed, fnv1a64("model-init")));
        const int d_h = config_.d_h, d_f = config_.d_f;
        add_mlp_params(params_, "g_r", {d_f, d_h, d_h}, rng);
        add_mlp_params(params_, "g_s", {d_f, d_h, d_h}, rng);
        add_mlp_params(params_, "g_t", {d_h, d_h, d_h}, rng);
        add_mlp_params(params_, "g_f", {d_f, d_f, d_f}, rng);
        add_mlp_params(params_, "g_in_num", {1, d_h, d_h}, rng);
        add_mlp_params(params_, "g_in_cat", {d_f, d_h, d_h}, rng);
        add_mlp_params(params_, "g_out_num", {d_h, d_h, 1}, rng);
        add_mlp_params(params_, "g_out_cat", {d_h, d_h, d_f}, rng);
        {
            Tensor<Real> m = Tensor<Real>::zeros({d_h});
            init_trunc_normal(m, rng);
            params_.add("mask_embedding", std::move(m));
        }
        add_transformer_params(params_, "encoder", config_.transformer(), rng);
    }

    const ModelConfig& config() const { return config_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    ParameterStore<Real>& params() { return params_; }
    const ParameterStore<Real>& params() const { return params_; }
    FusionHook& fusion_hook() { return hook_; }

    struct LaneNodes {
        bool categorical = false;
        NodeId fusion = -1;      // h_j, [B, d_h]
        NodeId value = -1;       // numerical prediction, [B, 1]
        NodeId log_probs = -1;   // categorical, [B, n_cat]
        NodeId probs = -1;       // categorical, [B, n_cat]
        NodeId unit_rows = -1;   // g_f(C-bar), [n_cat, d_f]
    };
    struct GraphOutputs {
        BoundParams<Real> bound;
        std::vector<LaneNodes> lanes;
    };

    // full forward pass on a tape; usable for training (recording graph) and
    // inference (non-recording graph)
    GraphOutputs build_forward(Graph<Real>& g, const RowBatch& batch) const {
        GraphOutputs out;
        out.bound = bind_parameters(g, params_);
        BoundParams<Real>& p = out.bound;
        const DatasetContext& ctx = *batch.context;
        const int B = batch.n_rows;
        const int L = static_cast<int>(ctx.n_features());
        const int d_f = config_.d_f;
        if (L == 0) throw DataError("forward: empty schema");
        if (B <= 0) throw DataError("forward: empty batch");
        if (batch.t < 0 || batch.t >= config_.t_train)
            throw Error(concat("forward: timestep ", batch.t, " outside [0, ", config_.t_train, ")"));

        const double ab = schedule_.alpha_bar(batch.t);
        const Real noise_keep = static_cast<Real>(std::sqrt(ab));
        const Real noise_add = static_cast<Real>(std::sqrt(1.0 - ab));

        // shared conditioning terms
        std::optional<NodeId> shared_cond;
        auto add_cond = [&](NodeId term) {
            shared_cond = shared_cond ? g.add(*shared_cond, term) : term;
        };
        if (!hook_.zero_description) {
            add_cond(mlp(p, "g_r", g.constant(embedding_row(ctx.description_embedding, d_f,
                                                            "description embedding"))));
        }
        if (!hook_.zero_timestep) {
            const auto feats = timestep_features(batch.t, config_.d_h);
            Tensor<Real> tf = Tensor<Real>::zeros({1, config_.d_h});
            for (int i = 0; i < config_.d_h; ++i) tf.data[i] = static_cast<Real>(feats[i]);
            add_cond(mlp(p, "g_t", g.constant(std::move(tf))));
        }

        out.lanes.resize(L);
        std::vector<NodeId> fused(L);
        for (int j = 0; j < L; ++j) {
            const FeatureContext& fc = ctx.features[j];
            const LaneBatch& lane = batch.lanes[j];
            LaneNodes& nodes = out.lanes[j];
            nodes.categorical = fc.schema.is_categorical();

            NodeId value_emb;
            if (nodes.categorical) {
                nodes.unit_rows = finetuned_rows_node(g, p, fc.categories);
                NodeId noisy;
                if (!lane.cat_values.empty()) {
                    Tensor<Real> direct({B, d_f}, cast_vec(lane.cat_values));
                    noisy = g.constant(std::move(direct));
                } else {
                    // sqrt(abar) g_f(c-bar_target) + sqrt(1-abar) eps,
                    // pure noise on missing rows
                    NodeId clean = g.gather_rows(nodes.unit_rows, lane.target_category);
                    std::vector<Real> keep(B);
                    Tensor<Real> noise = Tensor<Real>::zeros({B, d_f});
                    for (int b = 0; b < B; ++b) {
                        keep[b] = lane.missing[b] ? Real(0) : noise_keep;
                        const Real addc = lane.missing[b] ? Real(1) : noise_add;
                        for (int c = 0; c < d_f; ++c)
                            noise.data[static_cast<size_t>(b) * d_f + c] =
                                addc * static_cast<Real>(lane.cat_noise[static_cast<size_t>(b) * d_f + c]);
                    }
                    noisy = g.add(g.mul_rows(clean, std::move(keep)), g.constant(std::move(noise)));
                }
                value_emb = mlp(p, "g_in_cat", noisy);
            } else {
                Tensor<Real> noisy = Tensor<Real>::zeros({B, 1});
                for (int b = 0; b < B; ++b) noisy.data[b] = static_cast<Real>(lane.noisy_numeric[b]);
                value_emb = mlp(p, "g_in_num", g.constant(std::move(noisy)));
            }

            NodeId h = value_emb;
            std::optional<NodeId> lane_cond = shared_cond;
            if (!hook_.zero_feature_name) {
                NodeId s_emb = mlp(p, "g_s", g.constant(embedding_row(fc.name_embedding, d_f,
                                                                      fc.schema.name.c_str())));
                lane_cond = lane_cond ? g.add(*lane_cond, s_emb) : s_emb;
            }
            if (lane_cond) h = g.add_rowvec(h, *lane_cond);
            bool any_missing = false;
            for (uint8_t m : lane.missing) any_missing = any_missing || m;
            if (any_missing) h = g.add_masked_rows(h, p["mask_embedding"], lane.missing);
            nodes.fusion = h;
            fused[j] = h;
        }

        NodeId seq = g.interleave_lanes(fused);
        NodeId enc = transformer_encoder(p, "encoder", config_.transformer(), seq, B, L);

        for (int j = 0; j < L; ++j) {
            LaneNodes& nodes = out.lanes[j];
            NodeId o = g.take_lane(enc, j, L);
            if (nodes.categorical) {
                NodeId c_hat = mlp(p, "g_out_cat", o);
                NodeId logits = g.matmul_nt(c_hat, nodes.unit_rows);  // Eq. 2 inner products
                nodes.log_probs = g.log_softmax_rows(logits);
                nodes.probs = g.exp(nodes.log_probs);
            } else {
                nodes.value = mlp(p, "g_out_num", o);
            }
        }
        return out;
    }

    // Eq. 3 as a graph node: per-row mean over present features of CE + MSE,
    // batch mean, scaled by the dataset weight
    NodeId build_loss(Graph<Real>& g, const RowBatch& batch, const GraphOutputs& fwd) const {
        const int B = batch.n_rows;
        std::vector<Real> inv_present(B, Real(0));
        for (int b = 0; b < B; ++b) {
            int present = 0;
            for (const auto& lane : batch.lanes)
                if (!lane.missing[b]) ++present;
            if (present == 0) throw DataError(concat("loss: row ", b, " has no present features"));
            inv_present[b] = Real(1) / static_cast<Real>(present);
        }
        std::optional<NodeId> total;
        auto add_term = [&](NodeId term) { total = total ? g.add(*total, term) : term; };
        for (size_t j = 0; j < batch.lanes.size(); ++j) {
            const LaneBatch& lane = batch.lanes[j];
            NodeId contrib;
            if (fwd.lanes[j].categorical) {
                contrib = g.gather_neg_log(fwd.lanes[j].log_probs, lane.target_category);
            } else {
                Tensor<Real> target = Tensor<Real>::zeros({B, 1});
                for (int b = 0; b < B; ++b) target.data[b] = static_cast<Real>(lane.clean_numeric[b]);
                NodeId diff = g.sub(fwd.lanes[j].value, g.constant(std::move(target)));
                contrib = g.mul(diff, diff);
            }
            std::vector<Real> present01(B);
            for (int b = 0; b < B; ++b) present01[b] = lane.missing[b] ? Real(0) : Real(1);
            add_term(g.mul_rows(contrib, std::move(present01)));
        }
        NodeId per_row = g.mul_rows(*total, std::move(inv_present));
        return g.scale(g.mean_all(per_row), static_cast<Real>(batch.context->weight));
    }

    // plain-value forward (no gradients)
    ForwardResult forward(const RowBatch& batch) const {
        Graph<Real> g(false);
        GraphOutputs fwd = build_forward(g, batch);
        ForwardResult result(fwd.lanes.size());
        for (size_t j = 0; j < fwd.lanes.size(); ++j) {
            const LaneNodes& nodes = fwd.lanes[j];
            if (nodes.categorical) {
                const Tensor<Real>& probs = g.value(nodes.probs);
                result[j].probabilities.resize(batch.n_rows);
                for (int b = 0; b < batch.n_rows; ++b) {
                    result[j].probabilities[b].resize(probs.cols());
                    for (int c = 0; c < probs.cols(); ++c)
                        result[j].probabilities[b][c] = static_cast<double>(probs.at(b, c));
                }
            } else {
                const Tensor<Real>& v = g.value(nodes.value);
                result[j].values.resize(batch.n_rows);
                for (int b = 0; b < batch.n_rows; ++b)
                    result[j].values[b] = static_cast<double>(v.data[b]);
            }
        }
        return result;
    }

    double loss(const RowBatch& batch) const { return combined_loss(batch, forward(batch)); }

    // per-lane fusion embeddings h_j (pre-transformer), for tests
    std::vector<Tensor<Real>> fuse_inputs(const RowBatch& batch) const {
        Graph<Real> g(false);
        GraphOutputs fwd = build_forward(g, batch);
        std::vector<Tensor<Real>> h;
        h.reserve(fwd.lanes.size());
        for (const auto& lane : fwd.lanes) h.push_back(g.value(lane.fusion));
        return h;
    }

    // g_f: finetune MLP + L2 normalization onto the unit sphere
    Tensor<Real> finetuned_category_rows(const CategoryMatrix& cats) const {
        Graph<Real> g(false);
        BoundParams<Real> p = bind_parameters(g, params_);
        return g.value(finetuned_rows_node(g, p, cats));
    }

    // Eq. 2: softmax over inner products with the normalized category rows
    std::vector<double> decode_categorical(const std::vector<double>& c_hat,
                                           const CategoryMatrix& cats) const {
        const Tensor<Real> rows = finetuned_category_rows(cats);
        Tensor<double> unit_rows = rows.template cast<double>();
        return decode_from_unit_rows(c_hat, unit_rows);
    }

    static std::vector<double> decode_from_unit_rows(const std::vector<double>& c_hat,
                                                     const Tensor<double>& unit_rows) {
        const int n = unit_rows.rows(), d = unit_rows.cols();
        if (n < 1) throw DataError("decode: empty category matrix");
        if (static_cast<int>(c_hat.size()) != d)
            throw Error(concat("decode: c_hat has ", c_hat.size(), " dims, rows have ", d));
        std::vector<double> logits(n, 0.0);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j) logits[i] += unit_rows.at(i, j) * c_hat[j];
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double sum = 0.0;
        for (auto& v : logits) {
            v = std::exp(v - mx);
            sum += v;
        }
        for (auto& v : logits) v /= sum;
        return logits;
    }

    // ------------------------------------------------------------------
    // sampling

    DatasetBundle sample_rows(const DatasetContext& ctx, int n, uint64_t seed,
                              const SampleOptions& opts = {}) const {
        if (n <= 0) throw ConfigError(concat("sample_rows: n = ", n, " must be positive"));
        ctx.require_sampling_info();
        const int L = static_cast<int>(ctx.n_features());
        if (L == 0) throw DataError("sample_rows: empty schema");
        const int d_f = config_.d_f;

        DatasetBundle out;
        out.id = ctx.id;
        out.description = ctx.description;
        for (const auto& fc : ctx.features) out.features.push_back(fc.schema);
        out.columns.resize(L);
        out.missing.assign(L, std::vector<uint8_t>(n, 0));
        for (int j = 0; j < L; ++j) {
            if (ctx.features[j].schema.is_categorical())
                out.columns[j].category.resize(n);
            else
                out.columns[j].numeric.resize(n);
        }

        // per-lane noise streams are keyed by feature name, so permuting the
        // schema permutes the generated columns exactly
        std::vector<uint64_t> lane_key(L);
        for (int j = 0; j < L; ++j) lane_key[j] = fnv1a64(ctx.features[j].schema.name);

        for (int start = 0; start < n; start += opts.chunk_rows) {
            const int B = std::min(opts.chunk_rows, n - start);
            // lane states
            std::vector<std::vector<double>> num_state(L), cat_state(L);
            for (int j = 0; j < L; ++j) {
                if (ctx.features[j].schema.is_categorical()) {
                    cat_state[j].resize(static_cast<size_t>(B) * d_f);
                    for (int b = 0; b < B; ++b) {
                        CounterRng rng(lane_stream(seed, lane_key[j], start + b, kInitTag));
                        for (int c = 0; c < d_f; ++c)
                            cat_state[j][static_cast<size_t>(b) * d_f + c] = rng.next_gaussian();
                    }
                } else {
                    num_state[j].resize(B);
                    for (int b = 0; b < B; ++b) {
                        CounterRng rng(lane_stream(seed, lane_key[j], start + b, kInitTag));
                        num_state[j][b] = rng.next_gaussian();
                    }
                }
            }

            const auto& steps = schedule_.inference_steps;
            for (size_t si = 0; si < steps.size(); ++si) {
                const int t = steps[si];
                RowBatch batch;
                batch.context = &ctx;
                batch.t = t;
                batch.n_rows = B;
                batch.lanes.resize(L);
                for (int j = 0; j < L; ++j) {
                    LaneBatch& lane = batch.lanes[j];
                    lane.missing.assign(B, 0);
                    if (ctx.features[j].schema.is_categorical()) {
                        lane.cat_values = cat_state[j];
                    } else {
                        lane.noisy_numeric = num_state[j];
                        lane.clean_numeric.assign(B, 0.0);
                    }
                }

                Graph<Real> g(false);
                GraphOutputs fwd = build_forward(g, batch);
                const bool last = si + 1 == steps.size();
                for (int j = 0; j < L; ++j) {
                    if (ctx.features[j].schema.is_categorical()) {
                        const Tensor<Real>& probs = g.value(fwd.lanes[j].probs);
                        const Tensor<Real>& unit_rows = g.value(fwd.lanes[j].unit_rows);
                        const int n_cat = probs.cols();
                        if (last) {
                            for (int b = 0; b < B; ++b) {
                                std::vector<double> p(n_cat);
                                for (int c = 0; c < n_cat; ++c) p[c] = static_cast<double>(probs.at(b, c));
                                out.columns[j].category[start + b] =
                                    opts.argmax_categories
                                        ? argmax(p)
                                        : draw_category(p, lane_stream(seed, lane_key[j], start + b, kDrawTag));
                            }
                        } else {
                            // score interpolation: weighted mean of the unit
                            // category embeddings under the predicted probs
                            std::vector<double> x0(static_cast<size_t>(B) * d_f, 0.0);
                            for (int b = 0; b < B; ++b)
                                for (int c = 0; c < n_cat; ++c) {
                                    const double pb = static_cast<double>(probs.at(b, c));
                                    for (int e = 0; e < d_f; ++e)
                                        x0[static_cast<size_t>(b) * d_f + e] +=
                                            pb * static_cast<double>(unit_rows.at(c, e));
                                }
                            cat_state[j] = ddim_step(cat_state[j], x0, t, steps[si + 1], schedule_);
                        }
                    } else {
                        const Tensor<Real>& v = g.value(fwd.lanes[j].value);
                        std::vector<double> x0(B);
                        for (int b = 0; b < B; ++b) x0[b] = static_cast<double>(v.data[b]);
                        if (last) {
                            const NumericStats st = *ctx.features[j].schema.numeric_stats;
                            for (int b = 0; b < B; ++b)
                                out.columns[j].numeric[start + b] = x0[b] * st.std + st.mean;
                        } else {
                            num_state[j] = ddim_step(num_state[j], x0, t, steps[si + 1], schedule_);
                        }
                    }
                }
            }
        }
        return out;
    }

    // ------------------------------------------------------------------
    // checkpoint: magic "LTBL", u32 version, u64 JSON length, JSON metadata
    // (config + ordered parameter manifest), then f32 LE parameter blob

    void save_checkpoint(const std::filesystem::path& path) const {
        nlohmann::ordered_json meta;
        meta["config"] = config_.to_json();
        meta["params"] = nlohmann::ordered_json::array();
        uint64_t offset = 0;
        for (const auto& name : params_.names()) {
            const auto& t = params_.at(name);
            nlohmann::ordered_json jp;
            jp["name"] = name;
            jp["shape"] = t.shape;
            jp["offset"] = offset;
            meta["params"].push_back(jp);
            offset += t.numel() * sizeof(float);
        }
        const std::string json_text = meta.dump();

        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError(concat("cannot write checkpoint: ", path.string()));
        out.write("LTBL", 4);
        const uint32_t version = 1;
        out.write(reinterpret_cast<const char*>(&version), sizeof(version));
        const uint64_t json_len = json_text.size();
        out.write(reinterpret_cast<const char*>(&json_len), sizeof(json_len));
        out.write(json_text.data(), static_cast<std::streamsize>(json_text.size()));
        for (const auto& name : params_.names()) {
            const auto& t = params_.at(name);
            for (Real v : t.data) {
                const float f = static_cast<float>(v);
                out.write(reinterpret_cast<const char*>(&f), sizeof(f));
            }
        }
        if (!out) throw DataError(concat("failed writing checkpoint: ", path.string()));
    }

    static TableDiffusionModel load_checkpoint(const std::filesystem::path& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw DataError(concat("cannot open checkpoint: ", path.string()));
        char magic[4];
        in.read(magic, 4);
        if (!in || std::memcmp(magic, "LTBL", 4) != 0)
            throw DataError(concat("not a checkpoint file: ", path.string()));
        uint32_t version = 0;
        in.read(reinterpret_cast<char*>(&version), sizeof(version));
        if (version != 1) throw DataError(concat("unsupported checkpoint version ", version));
        uint64_t json_len = 0;
        in.read(reinterpret_cast<char*>(&json_len), sizeof(json_len));
        std::string json_text(json_len, '\0');
        in.read(json_text.data(), static_cast<std::streamsize>(json_len));
        if (!in) throw DataError(concat("truncated checkpoint: ", path.string()));
        nlohmann::json meta;
        try {
            meta = nlohmann::json::parse(json_text);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(concat("bad checkpoint metadata: ", e.what()));
        }

        TableDiffusionModel model(ModelConfig::from_json(meta.at("config")), 0);
        const auto& manifest = meta.at("params");
        if (manifest.size() != model.params_.count())
            throw DataError(concat("checkpoint has ", manifest.size(), " parameters, model expects ",
                                   model.params_.count()));
        size_t idx = 0;
        for (const auto& jp : manifest) {
            const std::string name = jp.at("name").get<std::string>();
            if (name != model.params_.names()[idx])
                throw DataError(concat("checkpoint parameter order mismatch at '", name, "'"));
            Tensor<Real>& t = model.params_.at(name);
            const auto shape = jp.at("shape").get<std::vector<int>>();
            if (shape != t.shape)
                throw DataError(concat("checkpoint shape mismatch for '", name, "': ",
                                       shape_to_string(shape), " vs ", shape_to_string(t.shape)));
            for (auto& v : t.data) {
                float f = 0;
                in.read(reinterpret_cast<char*>(&f), sizeof(f));
                v = static_cast<Real>(f);
            }
            ++idx;
        }
        if (!in) throw DataError(concat("truncated checkpoint blob: ", path.string()));
        return model;
    }

private:
    static constexpr uint64_t kInitTag = 0x696e6974;  // lane init noise
    static constexpr uint64_t kDrawTag = 0x64726177;  // final categorical draw

    static uint64_t lane_stream(uint64_t seed, uint64_t lane_key, int row, uint64_t tag) {
        return mix_u64(mix_u64(mix_u64(seed, lane_key), static_cast<uint64_t>(row)), tag);
    }

    static int argmax(const std::vector<double>& p) {
        int best = 0;
        for (size_t i = 1; i < p.size(); ++i)
            if (p[i] > p[best]) best = static_cast<int>(i);
        return best;
    }

    static int draw_category(const std::vector<double>& p, uint64_t stream_seed) {
        CounterRng rng(stream_seed);
        const double u = rng.next_uniform();
        double cum = 0.0;
        for (size_t i = 0; i < p.size(); ++i) {
            cum += p[i];
            if (u < cum) return static_cast<int>(i);
        }
        return static_cast<int>(p.size()) - 1;
    }

    std::vector<Real> cast_vec(const std::vector<double>& v) const {
        std::vector<Real> out(v.size());
        for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<Real>(v[i]);
        return out;
    }

    Tensor<Real> embedding_row(const EmbeddingVector& e, int d_f, const char* what) const {
        if (static_cast<int>(e.size()) != d_f)
            throw DataError(concat("cached ", what, " has dim ", e.size(), ", model expects d_f = ", d_f));
        Tensor<Real> t = Tensor<Real>::zeros({1, d_f});
        for (int i = 0; i < d_f; ++i) t.data[i] = static_cast<Real>(e[i]);
        return t;
    }

    NodeId finetuned_rows_node(Graph<Real>& g, BoundParams<Real>& p, const CategoryMatrix& cats) const {
        if (cats.rows.empty()) throw DataError("empty category matrix");
        const int n_cat = static_cast<int>(cats.rows.size());
        Tensor<Real> raw = Tensor<Real>::zeros({n_cat, config_.d_f});
        for (int i = 0; i < n_cat; ++i) {
            if (static_cast<int>(cats.rows[i].size()) != config_.d_f)
                throw DataError(concat("category embedding dim ", cats.rows[i].size(),
                                       " does not match d_f = ", config_.d_f));
            for (int j = 0; j < config_.d_f; ++j)
                raw.at(i, j) = static_cast<Real>(cats.rows[i][j]);
        }
        // residual finetune: at init g_f is close to the identity on the
        // (unit-norm) provider embeddings, so categories stay distinguishable
        const NodeId raw_node = g.constant(std::move(raw));
        return g.l2_normalize_rows(g.add(raw_node, mlp(p, "g_f", raw_node)));
    }

    ModelConfig config_;
    NoiseSchedule schedule_;
    ParameterStore<Real> params_;
    FusionHook hook_;
};

}  // namespace mixtable
