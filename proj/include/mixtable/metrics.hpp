#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixtable/common.hpp"
#include "mixtable/dataset.hpp"
#include "mixtable/embedding.hpp"

namespace mixtable {

struct MetricReport {
    double precision = 0.0;
    double recall = 0.0;
    double density = 0.0;
    double coverage = 0.0;
    std::optional<double> downstream_auc;
    int n_real = 0;
    int n_synth = 0;
    int k = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["precision"] = precision;
        j["recall"] = recall;
        j["density"] = density;
        j["coverage"] = coverage;
        if (downstream_auc) j["downstream_auc"] = *downstream_auc;
        j["n_real"] = n_real;
        j["n_synth"] = n_synth;
        j["k"] = k;
        return j;
    }
};

using PointMatrix = std::vector<std::vector<double>>;

namespace detail {

inline double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

inline void check_points(const PointMatrix& pts, const char* what) {
    if (pts.empty()) throw DataError(concat(what, ": empty point set"));
    for (const auto& p : pts) {
        if (p.size() != pts.front().size())
            throw DataError(concat(what, ": ragged point dimensions"));
    }
}

// squared distance to the k-th nearest neighbor excluding self
inline std::vector<double> knn_sq_radii(const PointMatrix& pts, int k) {
    const int n = static_cast<int>(pts.size());
    std::vector<double> radii(n);
    std::vector<double> d(n);
    for (int i = 0; i < n; ++i) {
        size_t m = 0;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            d[m++] = sq_dist(pts[i], pts[j]);
        }
        std::nth_element(d.begin(), d.begin() + (k - 1), d.begin() + m);
        radii[i] = d[k - 1];
    }
    return radii;
}

}  // namespace detail

// Euclidean distance from each point to its k-th nearest neighbor (self
// excluded).
inline std::vector<double> knn_radii(const PointMatrix& pts, int k) {
    detail::check_points(pts, "knn_radii");
    if (k < 1) throw ConfigError(concat("knn_radii: k = ", k, " must be >= 1"));
    if (static_cast<int>(pts.size()) <= k)
        throw DataError(concat("knn_radii: need more than k = ", k, " points, got ", pts.size()));
    std::vector<double> radii = detail::knn_sq_radii(pts, k);
    for (auto& r : radii) r = std::sqrt(r);
    return radii;
}

// kNN-ball support metrics: precision/density count synthetic points inside
// real kNN balls, recall swaps the roles, coverage asks each real ball to
// contain a synthetic point.
inline MetricReport prdc(const PointMatrix& real, const PointMatrix& synth, int k) {
    detail::check_points(real, "prdc real");
    detail::check_points(synth, "prdc synth");
    if (real.front().size() != synth.front().size())
        throw DataError(concat("prdc: dimension mismatch ", real.front().size(), " vs ",
                               synth.front().size()));
    if (k < 1) throw ConfigError("prdc: k must be >= 1");
    const int n = static_cast<int>(real.size());
    const int m = static_cast<int>(synth.size());
    if (n <= k || m <= k)
        throw DataError(concat("prdc: need more than k = ", k, " points in each set (n = ", n,
                               ", m = ", m, ")"));

    const std::vector<double> real_r2 = detail::knn_sq_radii(real, k);
    const std::vector<double> synth_r2 = detail::knn_sq_radii(synth, k);

    long density_hits = 0;
    int precision_hits = 0;
    std::vector<uint8_t> real_covered(n, 0);
    for (int j = 0; j < m; ++j) {
        bool inside_any = false;
        for (int i = 0; i < n; ++i) {
            const double d2 = detail::sq_dist(synth[j], real[i]);
            if (d2 <= real_r2[i]) {
                ++density_hits;
                inside_any = true;
                real_covered[i] = 1;
            }
        }
        if (inside_any) ++precision_hits;
    }
    int recall_hits = 0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            if (detail::sq_dist(real[i], synth[j]) <= synth_r2[j]) {
                ++recall_hits;
                break;
            }
        }
    }

    MetricReport r;
    r.n_real = n;
    r.n_synth = m;
    r.k = k;
    r.precision = static_cast<double>(precision_hits) / m;
    r.recall = static_cast<double>(recall_hits) / n;
    r.density = static_cast<double>(density_hits) / (static_cast<double>(k) * m);
    r.coverage = static_cast<double>(std::accumulate(real_covered.begin(), real_covered.end(), 0)) / n;
    return r;
}

// ---------------------------------------------------------------------------
// mixed-type metric space: z-score numericals by the REAL set's stats,
// one-hot categoricals scaled by 1/sqrt(2) so a category mismatch adds unit
// squared distance. Rows with missing cells are dropped.

struct MetricSpaceStats {
    std::vector<double> mean, std;  // per numerical feature, schema order
};

inline MetricSpaceStats metric_stats(const DatasetBundle& real) {
    MetricSpaceStats st;
    for (size_t j = 0; j < real.n_features(); ++j) {
        if (real.features[j].is_categorical()) continue;
        double sum = 0.0;
        size_t cnt = 0;
        for (size_t i = 0; i < real.n_rows(); ++i) {
            if (real.missing[j][i]) continue;
            sum += real.columns[j].numeric[i];
            ++cnt;
        }
        const double mean = cnt ? sum / cnt : 0.0;
        double ss = 0.0;
        for (size_t i = 0; i < real.n_rows(); ++i) {
            if (real.missing[j][i]) continue;
            const double d = real.columns[j].numeric[i] - mean;
            ss += d * d;
        }
        double sd = cnt ? std::sqrt(ss / cnt) : 1.0;
        if (sd <= 0.0) sd = 1.0;  // constant column: leave values centered
        st.mean.push_back(mean);
        st.std.push_back(sd);
    }
    return st;
}

inline PointMatrix metric_space_encode(const DatasetBundle& b, const MetricSpaceStats& st) {
    static const double kOneHotScale = 1.0 / std::sqrt(2.0);
    PointMatrix out;
    for (size_t i = 0; i < b.n_rows(); ++i) {
        bool complete = true;
        for (size_t j = 0; j < b.n_features(); ++j) complete = complete && !b.missing[j][i];
        if (!complete) continue;
        std::vector<double> row;
        size_t num_idx = 0;
        for (size_t j = 0; j < b.n_features(); ++j) {
            const FeatureSchema& f = b.features[j];
            if (f.is_categorical()) {
                const int c = b.columns[j].category[i];
                for (size_t q = 0; q < f.categories.size(); ++q)
                    row.push_back(q == static_cast<size_t>(c) ? kOneHotScale : 0.0);
            } else {
                row.push_back((b.columns[j].numeric[i] - st.mean[num_idx]) / st.std[num_idx]);
                ++num_idx;
            }
        }
        out.push_back(std::move(row));
    }
    return out;
}

// ---------------------------------------------------------------------------
// downstream AUC: built-in logistic classifier trained on synthetic data,
// scored on real test data; AUC via the rank statistic (ties get 0.5 credit)

inline double rank_auc(const std::vector<double>& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw Error("rank_auc: size mismatch");
    const size_t n = scores.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(),
              [&](size_t a, size_t b) { return scores[a] < scores[b]; });
    // average ranks over ties
    std::vector<double> rank(n);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j + 1));
        for (size_t q = i; q <= j; ++q) rank[order[q]] = avg;
        i = j + 1;
    }
    double pos_rank_sum = 0.0;
    size_t n_pos = 0;
    for (size_t q = 0; q < n; ++q) {
        if (labels[q] == 1) {
            pos_rank_sum += rank[q];
            ++n_pos;
        }
    }
    const size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw DataError("rank_auc: test labels contain a single class");
    return (pos_rank_sum - 0.5 * n_pos * (n_pos + 1)) / (static_cast<double>(n_pos) * n_neg);
}

namespace detail {

// full-batch gradient descent on logistic loss; deterministic, zero init
inline std::vector<double> fit_logistic(const PointMatrix& x, const std::vector<int>& y,
                                        int iters = 400) {
    const size_t n = x.size();
    const size_t d = x.front().size();
    std::vector<double> w(d + 1, 0.0);  // bias last
    double mean_sq = 0.0;
    for (const auto& row : x)
        for (double v : row) mean_sq += v * v;
    mean_sq = mean_sq / n + 1.0;
    const double lr = 2.0 / mean_sq;
    std::vector<double> grad(d + 1);
    for (int it = 0; it < iters; ++it) {
        std::fill(grad.begin(), grad.end(), 0.0);
        for (size_t i = 0; i < n; ++i) {
            double z = w[d];
            for (size_t j = 0; j < d; ++j) z += w[j] * x[i][j];
            const double p = 1.0 / (1.0 + std::exp(-z));
            const double err = p - y[i];
            for (size_t j = 0; j < d; ++j) grad[j] += err * x[i][j];
            grad[d] += err;
        }
        for (size_t j = 0; j <= d; ++j) w[j] -= lr * grad[j] / n;
    }
    return w;
}

inline double logistic_score(const std::vector<double>& w, const std::vector<double>& x) {
    double z = w.back();
    for (size_t j = 0; j < x.size(); ++j) z += w[j] * x[j];
    return z;  // monotone in probability, enough for AUC
}

}  // namespace detail

// Train-on-synthetic-test-on-real AUC for a categorical label feature.
// Binary labels use the rank AUC directly; multiclass macro-averages
// one-vs-rest.
inline double downstream_auc(const DatasetBundle& synth, const DatasetBundle& real_test,
                             const std::string& label_feature) {
    int label_idx = -1;
    for (size_t j = 0; j < synth.n_features(); ++j) {
        if (synth.features[j].name == label_feature) label_idx = static_cast<int>(j);
    }
    if (label_idx < 0) throw DataError(concat("label feature '", label_feature, "' not found"));
    if (!synth.features[label_idx].is_categorical())
        throw DataError(concat("label feature '", label_feature, "' must be categorical"));

    // encode without the label column; synthetic stats standardize both sets
    auto drop_label = [&](const DatasetBundle& b) {
        DatasetBundle out = b;
        out.features.erase(out.features.begin() + label_idx);
        out.columns.erase(out.columns.begin() + label_idx);
        out.missing.erase(out.missing.begin() + label_idx);
        return out;
    };
    auto labels_of = [&](const DatasetBundle& b) {
        std::vector<int> y;
        for (size_t i = 0; i < b.n_rows(); ++i) {
            bool complete = true;
            for (size_t j = 0; j < b.n_features(); ++j) complete = complete && !b.missing[j][i];
            if (complete) y.push_back(b.columns[label_idx].category[i]);
        }
        return y;
    };

    const DatasetBundle synth_x = drop_label(synth);
    const DatasetBundle real_x = drop_label(real_test);
    const MetricSpaceStats st = metric_stats(synth_x);
    const PointMatrix xs = metric_space_encode(synth_x, st);
    const PointMatrix xr = metric_space_encode(real_x, st);
    const std::vector<int> ys = labels_of(synth);
    const std::vector<int> yr = labels_of(real_test);
    if (xs.empty() || xr.empty()) throw DataError("downstream_auc: no complete rows");

    const auto& cats = synth.features[label_idx].categories;
    const int n_classes = static_cast<int>(cats.size());
    std::vector<int> present_classes;
    for (int c = 0; c < n_classes; ++c) {
        if (std::find(yr.begin(), yr.end(), c) != yr.end()) present_classes.push_back(c);
    }
    if (present_classes.size() < 2)
        throw DataError("downstream_auc: test labels contain a single class");

    auto one_vs_rest = [&](int positive) {
        std::vector<int> ys_bin(ys.size()), yr_bin(yr.size());
        for (size_t i = 0; i < ys.size(); ++i) ys_bin[i] = ys[i] == positive ? 1 : 0;
        for (size_t i = 0; i < yr.size(); ++i) yr_bin[i] = yr[i] == positive ? 1 : 0;
        const auto w = detail::fit_logistic(xs, ys_bin);
        std::vector<double> scores(xr.size());
        for (size_t i = 0; i < xr.size(); ++i) scores[i] = detail::logistic_score(w, xr[i]);
        return rank_auc(scores, yr_bin);
    };

    if (present_classes.size() == 2) return one_vs_rest(present_classes[1]);
    double sum = 0.0;
    for (int c : present_classes) sum += one_vs_rest(c);
    return sum / present_classes.size();
}

// ---------------------------------------------------------------------------
// feature-name overlap between two metadataset halves

struct OverlapReport {
    std::vector<std::string> target_names;
    std::vector<std::string> source_names;
    PointMatrix cosine;  // [target][source]
    double threshold = 0.8;
    double dissimilar_fraction = 0.0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["threshold"] = threshold;
        j["dissimilar_fraction"] = dissimilar_fraction;
        j["target_features"] = target_names;
        j["source_features"] = source_names;
        return j;
    }
};

inline double cosine_similarity(const EmbeddingVector& a, const EmbeddingVector& b) {
    if (a.size() != b.size()) throw Error("cosine: dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// Cosine-similarity matrix between target and source feature-name embeddings;
// the dissimilar fraction counts target features whose best match stays below
// the threshold.
inline OverlapReport feature_overlap(const std::vector<DatasetBundle>& sources,
                                     const std::vector<DatasetBundle>& targets,
                                     EmbeddingProvider& provider, double threshold = 0.8) {
    OverlapReport rep;
    rep.threshold = threshold;
    for (const auto& b : sources)
        for (const auto& f : b.features) rep.source_names.push_back(f.name);
    for (const auto& b : targets)
        for (const auto& f : b.features) rep.target_names.push_back(f.name);
    if (rep.source_names.empty() || rep.target_names.empty())
        throw DataError("feature_overlap: empty feature sets");

    const auto src_emb = provider.embed_batch(rep.source_names);
    const auto tgt_emb = provider.embed_batch(rep.target_names);
    rep.cosine.assign(rep.target_names.size(), std::vector<double>(rep.source_names.size()));
    int dissimilar = 0;
    for (size_t t = 0; t < tgt_emb.size(); ++t) {
        double best = -1.0;
        for (size_t s = 0; s < src_emb.size(); ++s) {
            const double c = cosine_similarity(tgt_emb[t], src_emb[s]);
            rep.cosine[t][s] = c;
            best = std::max(best, c);
        }
        if (best < threshold) ++dissimilar;
    }
    rep.dissimilar_fraction = static_cast<double>(dissimilar) / tgt_emb.size();
    return rep;
}

// ---------------------------------------------------------------------------
// evaluation pipeline with the sample cap

constexpr int kMetricSampleCap = 5000;

inline void check_schema_compatible(const DatasetBundle& a, const DatasetBundle& b) {
    if (a.n_features() != b.n_features())
        throw DataError("evaluate: real and synthetic schemas differ in feature count");
    for (size_t j = 0; j < a.n_features(); ++j) {
        if (a.features[j].name != b.features[j].name || a.features[j].kind != b.features[j].kind ||
            a.features[j].categories != b.features[j].categories)
            throw DataError(concat("evaluate: schema mismatch at feature '", a.features[j].name, "'"));
    }
}

inline DatasetBundle head_rows(const DatasetBundle& b, size_t n) {
    if (n >= b.n_rows()) return b;
    DatasetBundle out = b;
    for (size_t j = 0; j < out.n_features(); ++j) {
        if (out.features[j].is_categorical())
            out.columns[j].category.resize(n);
        else
            out.columns[j].numeric.resize(n);
        out.missing[j].resize(n);
    }
    return out;
}

// prdc + optional downstream AUC between a real test set and generated data,
// using min{n_test, 5000} generated samples
inline MetricReport evaluate_generation(const DatasetBundle& real_test, const DatasetBundle& synth,
                                        int k, const std::optional<std::string>& label = {}) {
    check_schema_compatible(real_test, synth);
    const size_t cap = std::min<size_t>(real_test.n_rows(), kMetricSampleCap);
    const DatasetBundle synth_capped = head_rows(synth, cap);
    const MetricSpaceStats st = metric_stats(real_test);
    MetricReport rep = prdc(metric_space_encode(real_test, st),
                            metric_space_encode(synth_capped, st), k);
    if (label) rep.downstream_auc = downstream_auc(synth_capped, real_test, *label);
    return rep;
}

}  // namespace mixtable
