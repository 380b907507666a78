#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>

#include "mixtable/model.hpp"
#include "support/toy_model.hpp"

using namespace mixtable;
namespace fs = std::filesystem;

namespace {

using Model = TableDiffusionModel<float>;
using ModelD = TableDiffusionModel<double>;

struct Fixture {
    HashEmbeddingProvider provider;
    ModelConfig cfg;
    Model model;
    DatasetContext ctx;

    explicit Fixture(uint64_t seed = 1)
        : provider(6), cfg(toy::tiny_model_config()), model(cfg, seed),
          ctx(toy::num_cat_context(provider)) {}
};

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("forward shapes follow the schema") {
    Fixture fx;
    const RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 7, 3);
    const ForwardResult preds = fx.model.forward(batch);
    REQUIRE(preds.size() == 2);
    CHECK(preds[0].values.size() == 2);              // numeric lane: one scalar per row
    CHECK(preds[0].probabilities.empty());
    REQUIRE(preds[1].probabilities.size() == 2);     // categorical lane
    CHECK(preds[1].probabilities[0].size() == 2);    // |categories| probabilities
    const double sum = preds[1].probabilities[0][0] + preds[1].probabilities[0][1];
    CHECK(sum == Catch::Approx(1.0).margin(1e-5));
}

TEST_CASE("identical rows get identical predictions") {
    Fixture fx;
    RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 7, 3);
    // duplicate row 0 into row 1
    batch.lanes[0].clean_numeric[1] = batch.lanes[0].clean_numeric[0];
    batch.lanes[0].noisy_numeric[1] = batch.lanes[0].noisy_numeric[0];
    batch.lanes[1].target_category[1] = batch.lanes[1].target_category[0];
    const int d_f = fx.cfg.d_f;
    for (int c = 0; c < d_f; ++c) batch.lanes[1].cat_noise[d_f + c] = batch.lanes[1].cat_noise[c];
    const ForwardResult preds = fx.model.forward(batch);
    CHECK(preds[0].values[0] == preds[0].values[1]);
    CHECK(preds[1].probabilities[0] == preds[1].probabilities[1]);
}

TEST_CASE("fusion hook reduces h_j to the value embedding") {
    Fixture fx;
    const RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 7, 3);
    fx.model.fusion_hook() = FusionHook{true, true, true};
    const auto h = fx.model.fuse_inputs(batch);

    // reference: g_in_num applied to the noisy numeric values directly
    Graph<float> g(false);
    BoundParams<float> p = bind_parameters(g, fx.model.params());
    Tensor<float> noisy = Tensor<float>::zeros({2, 1});
    for (int b = 0; b < 2; ++b) noisy.data[b] = static_cast<float>(batch.lanes[0].noisy_numeric[b]);
    const auto expect = g.value(mlp(p, "g_in_num", g.constant(std::move(noisy))));
    REQUIRE(h[0].shape == expect.shape);
    for (size_t i = 0; i < expect.data.size(); ++i)
        CHECK(h[0].data[i] == Catch::Approx(expect.data[i]).margin(1e-6));
}

TEST_CASE("two lanes with identical name and value fuse identically") {
    HashEmbeddingProvider provider(6);
    std::vector<FeatureSchema> schema{FeatureSchema{"x", FeatureKind::numerical, {}, NumericStats{0, 1}},
                                      FeatureSchema{"x", FeatureKind::numerical, {}, NumericStats{0, 1}}};
    const DatasetContext ctx = DatasetContext::from_schema("twin", "twin lanes", schema, provider);
    Model model(toy::tiny_model_config(), 5);
    RowBatch batch;
    batch.context = &ctx;
    batch.t = 3;
    batch.n_rows = 1;
    batch.lanes.resize(2);
    for (auto& lane : batch.lanes) {
        lane.noisy_numeric = {0.37};
        lane.clean_numeric = {0.4};
        lane.missing = {0};
    }
    const auto h = model.fuse_inputs(batch);
    CHECK(h[0].data == h[1].data);
}

TEST_CASE("permuting features permutes fusion and predictions exactly") {
    HashEmbeddingProvider provider(6);
    std::vector<FeatureSchema> schema{
        FeatureSchema{"a", FeatureKind::numerical, {}, NumericStats{0, 1}},
        FeatureSchema{"b", FeatureKind::categorical, {"x", "y", "z"}, {}},
        FeatureSchema{"c", FeatureKind::numerical, {}, NumericStats{0, 1}}};
    const DatasetContext ctx = DatasetContext::from_schema("p", "permute me", schema, provider);
    Model model(toy::tiny_model_config(), 9);

    RowBatch batch;
    batch.context = &ctx;
    batch.t = 11;
    batch.n_rows = 2;
    batch.lanes.resize(3);
    CounterRng rng(31);
    for (int j : {0, 2}) {
        batch.lanes[j].noisy_numeric = {rng.next_gaussian(), rng.next_gaussian()};
        batch.lanes[j].clean_numeric = {0.1, 0.2};
        batch.lanes[j].missing = {0, 0};
    }
    batch.lanes[1].target_category = {2, 0};
    batch.lanes[1].missing = {0, 0};
    batch.lanes[1].cat_noise.resize(2 * 6);
    for (auto& v : batch.lanes[1].cat_noise) v = rng.next_gaussian();

    const std::vector<int> perm{2, 0, 1};  // position i holds old feature perm[i]
    DatasetContext permuted_ctx = ctx;
    RowBatch permuted = batch;
    for (int i = 0; i < 3; ++i) {
        permuted_ctx.features[i] = ctx.features[perm[i]];
        permuted.lanes[i] = batch.lanes[perm[i]];
    }
    permuted.context = &permuted_ctx;

    const ForwardResult base = model.forward(batch);
    const ForwardResult out = model.forward(permuted);
    for (int i = 0; i < 3; ++i) {
        const int src = perm[i];
        if (!base[src].values.empty()) {
            CHECK(max_abs_diff(out[i].values, base[src].values) <= 1e-5);
        } else {
            for (int b = 0; b < 2; ++b)
                CHECK(max_abs_diff(out[i].probabilities[b], base[src].probabilities[b]) <= 1e-5);
        }
    }
}

TEST_CASE("decode: single category, zero vector, orthogonal rows") {
    Fixture fx;
    FeatureSchema single{"s", FeatureKind::categorical, {"only"}, {}};
    const CategoryMatrix m = build_category_matrix(single, fx.provider);
    const auto p = fx.model.decode_categorical(std::vector<double>(6, 0.3), m);
    REQUIRE(p.size() == 1);
    CHECK(p[0] == 1.0);

    // hand-built orthonormal rows: c_hat equal to row i wins the softmax
    Tensor<double> rows = Tensor<double>::zeros({3, 6});
    rows.at(0, 0) = 1.0;
    rows.at(1, 1) = 1.0;
    rows.at(2, 2) = 1.0;
    const auto probs = Model::decode_from_unit_rows({0.0, 1.0, 0.0, 0.0, 0.0, 0.0}, rows);
    CHECK(probs[1] > probs[0]);
    CHECK(probs[1] > probs[2]);
    // inner products 1 vs 0 -> odds ratio e
    CHECK(probs[1] / probs[0] == Catch::Approx(std::exp(1.0)));

    const auto uniform = Model::decode_from_unit_rows({0, 0, 0, 0, 0, 0}, rows);
    for (double v : uniform) CHECK(v == Catch::Approx(1.0 / 3));
}

TEST_CASE("decode permutes with the category matrix rows") {
    Fixture fx;
    FeatureSchema cat{"c", FeatureKind::categorical, {"a", "b", "c"}, {}};
    const CategoryMatrix m = build_category_matrix(cat, fx.provider);
    CategoryMatrix swapped = m;
    std::swap(swapped.rows[0], swapped.rows[2]);
    const std::vector<double> c_hat{0.2, -0.1, 0.4, 0.0, 0.3, -0.2};
    const auto p = fx.model.decode_categorical(c_hat, m);
    const auto q = fx.model.decode_categorical(c_hat, swapped);
    CHECK(q[0] == Catch::Approx(p[2]).margin(1e-7));
    CHECK(q[2] == Catch::Approx(p[0]).margin(1e-7));
    CHECK(q[1] == Catch::Approx(p[1]).margin(1e-7));
}

TEST_CASE("g_f output always lands on the unit sphere") {
    Fixture fx;
    CounterRng rng(17);
    for (int trial = 0; trial < 50; ++trial) {
        CategoryMatrix m;
        m.dim = 6;
        const int n = 1 + static_cast<int>(rng.next_below(4));
        for (int i = 0; i < n; ++i) {
            EmbeddingVector v(6);
            for (auto& x : v) x = static_cast<float>(rng.next_gaussian() * 3.0);
            m.rows.push_back(v);
        }
        const Tensor<float> rows = fx.model.finetuned_category_rows(m);
        for (int i = 0; i < rows.rows(); ++i) {
            double norm = 0;
            for (int j = 0; j < rows.cols(); ++j)
                norm += static_cast<double>(rows.at(i, j)) * rows.at(i, j);
            CHECK(std::sqrt(norm) == Catch::Approx(1.0).margin(1e-6));
        }
    }
}

TEST_CASE("combined loss formula on hand-built predictions") {
    Fixture fx;
    RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 7, 3);
    batch.n_rows = 1;
    for (auto& lane : batch.lanes) {
        lane.missing.resize(1);
        if (!lane.clean_numeric.empty()) {
            lane.clean_numeric.resize(1);
            lane.noisy_numeric.resize(1);
        } else {
            lane.target_category.resize(1);
            lane.cat_noise.resize(6);
        }
    }
    batch.lanes[0].clean_numeric[0] = 1.0;
    batch.lanes[1].target_category[0] = 0;

    ForwardResult preds(2);
    preds[0].values = {1.5};                      // squared error 0.25
    preds[1].probabilities = {{0.5, 0.5}};        // CE = ln 2
    // (ln 2 + 0.25) / 2 = 0.47157...
    CHECK(combined_loss(batch, preds) == Catch::Approx((std::log(2.0) + 0.25) / 2.0));

    // perfect numeric prediction and a one-hot correct categorical: loss 0
    preds[0].values = {1.0};
    preds[1].probabilities = {{1.0, 0.0}};
    CHECK(combined_loss(batch, preds) == Catch::Approx(0.0).margin(1e-12));

    // dataset weight scales the loss
    DatasetContext weighted = fx.ctx;
    weighted.weight = 3.0;
    batch.context = &weighted;
    preds[0].values = {1.5};
    preds[1].probabilities = {{0.5, 0.5}};
    CHECK(combined_loss(batch, preds) == Catch::Approx(3.0 * (std::log(2.0) + 0.25) / 2.0));
}

TEST_CASE("missing lanes are excluded from the loss and its denominator") {
    Fixture fx;
    RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 7, 3);
    batch.lanes[1].missing = {1, 1};  // categorical lane missing everywhere
    ForwardResult preds(2);
    preds[0].values = {0.0, 0.0};
    preds[1].probabilities = {{0.5, 0.5}, {0.5, 0.5}};
    const double expect = 0.5 * (batch.lanes[0].clean_numeric[0] * batch.lanes[0].clean_numeric[0] +
                                 batch.lanes[0].clean_numeric[1] * batch.lanes[0].clean_numeric[1]);
    CHECK(combined_loss(batch, preds) == Catch::Approx(expect));

    batch.lanes[0].missing = {1, 0};  // row 0 has nothing left
    CHECK_THROWS_AS(combined_loss(batch, preds), DataError);
}

TEST_CASE("graph loss equals the plain-value loss") {
    Fixture fx;
    const RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 12, 9);
    Graph<float> g(true);
    const auto fwd = fx.model.build_forward(g, batch);
    const NodeId loss = fx.model.build_loss(g, batch, fwd);
    CHECK(static_cast<double>(g.value(loss).data[0]) == Catch::Approx(fx.model.loss(batch)).margin(1e-6));
}

TEST_CASE("full-model loss gradients match finite differences") {
    // f64 shadow model; central differences, eps = 1e-3. Checked at a generic
    // parameter point (scale 0.2) rather than the tiny init, where layer-norm
    // variances sit below their eps and the FD probe outruns its accuracy.
    HashEmbeddingProvider provider(6);
    ModelD model(toy::tiny_model_config(), 2);
    {
        CounterRng prng(99);
        for (const auto& name : model.params().names())
            init_trunc_normal(model.params().at(name), prng, 0.2);
    }
    const DatasetContext ctx = toy::num_cat_context(provider);
    const RowBatch batch = toy::num_cat_batch(ctx, model.schedule(), 17, 5);

    Graph<double> g(true);
    const auto fwd = model.build_forward(g, batch);
    const NodeId loss_node = model.build_loss(g, batch, fwd);
    g.backward(loss_node);

    auto eval = [&]() {
        Graph<double> g2(false);
        const auto f2 = model.build_forward(g2, batch);
        return g2.value(model.build_loss(g2, batch, f2)).data[0];
    };

    const double eps = 1e-3;
    double worst = 0.0;
    std::string worst_name;
    for (const auto& name : model.params().names()) {
        const Tensor<double>& analytic = fwd.bound.grad(name);
        Tensor<double>& theta = model.params().at(name);
        for (size_t i = 0; i < theta.data.size(); ++i) {
            const double saved = theta.data[i];
            theta.data[i] = saved + eps;
            const double up = eval();
            theta.data[i] = saved - eps;
            const double down = eval();
            theta.data[i] = saved;
            const double numeric = (up - down) / (2.0 * eps);
            const double a = analytic.data[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 0.1});
            if (rel > worst) {
                worst = rel;
                worst_name = name;
            }
        }
    }
    INFO(worst_name);
    CHECK(worst < 1e-4);
}

TEST_CASE("name information reaches predictions only through g_s") {
    HashEmbeddingProvider provider(6);
    std::vector<FeatureSchema> schema{
        FeatureSchema{"alpha", FeatureKind::numerical, {}, NumericStats{0, 1}},
        FeatureSchema{"omega", FeatureKind::numerical, {}, NumericStats{0, 1}}};
    const DatasetContext ctx = DatasetContext::from_schema("n", "names differ", schema, provider);
    Model model(toy::tiny_model_config(), 4);
    model.fusion_hook() = FusionHook{true, true, true};
    RowBatch batch;
    batch.context = &ctx;
    batch.t = 5;
    batch.n_rows = 1;
    batch.lanes.resize(2);
    for (auto& lane : batch.lanes) {
        lane.noisy_numeric = {0.8};
        lane.clean_numeric = {1.0};
        lane.missing = {0};
    }
    const ForwardResult preds = model.forward(batch);
    CHECK(preds[0].values[0] == preds[1].values[0]);

    // with g_s active the two names must be distinguishable
    model.fusion_hook() = FusionHook{true, false, true};
    const ForwardResult named = model.forward(batch);
    CHECK(named[0].values[0] != named[1].values[0]);
}

TEST_CASE("sampling is deterministic and respects single categories") {
    Fixture fx;
    const DatasetBundle a = fx.model.sample_rows(fx.ctx, 16, 42);
    const DatasetBundle b = fx.model.sample_rows(fx.ctx, 16, 42);
    CHECK(a.columns[0].numeric == b.columns[0].numeric);  // bit-identical
    CHECK(a.columns[1].category == b.columns[1].category);

    const DatasetBundle c = fx.model.sample_rows(fx.ctx, 16, 43);
    CHECK(a.columns[0].numeric != c.columns[0].numeric);

    // single-category feature: always that category
    HashEmbeddingProvider provider(6);
    std::vector<FeatureSchema> schema{
        FeatureSchema{"x", FeatureKind::numerical, {}, NumericStats{2.0, 0.5}},
        FeatureSchema{"only", FeatureKind::categorical, {"sole"}, {}}};
    const DatasetContext ctx = DatasetContext::from_schema("single", "one category", schema, provider);
    const DatasetBundle d = fx.model.sample_rows(ctx, 8, 1);
    for (int v : d.columns[1].category) CHECK(v == 0);
}

TEST_CASE("sampling validates inputs") {
    Fixture fx;
    CHECK_THROWS_AS(fx.model.sample_rows(fx.ctx, 0, 1), ConfigError);
    CHECK_THROWS_AS(fx.model.sample_rows(fx.ctx, -5, 1), ConfigError);
    DatasetContext no_stats = fx.ctx;
    no_stats.features[0].schema.numeric_stats.reset();
    CHECK_THROWS_WITH(fx.model.sample_rows(no_stats, 4, 1),
                      Catch::Matchers::ContainsSubstring("stats"));
}

TEST_CASE("sampling chunk size does not change the result") {
    Fixture fx;
    SampleOptions small;
    small.chunk_rows = 3;
    const DatasetBundle a = fx.model.sample_rows(fx.ctx, 10, 7, small);
    const DatasetBundle b = fx.model.sample_rows(fx.ctx, 10, 7);
    CHECK(a.columns[0].numeric == b.columns[0].numeric);
    CHECK(a.columns[1].category == b.columns[1].category);
}

TEST_CASE("sample_rows equivariance: permuting the schema permutes columns") {
    HashEmbeddingProvider provider(6);
    std::vector<FeatureSchema> schema{
        FeatureSchema{"a", FeatureKind::numerical, {}, NumericStats{0, 1}},
        FeatureSchema{"b", FeatureKind::categorical, {"x", "y"}, {}},
        FeatureSchema{"c", FeatureKind::numerical, {}, NumericStats{5, 2}}};
    const DatasetContext ctx = DatasetContext::from_schema("p", "permutation", schema, provider);
    Model model(toy::tiny_model_config(), 21);
    const DatasetBundle base = model.sample_rows(ctx, 6, 11);

    const std::vector<int> perm{1, 2, 0};
    std::vector<FeatureSchema> shuffled;
    for (int i : perm) shuffled.push_back(schema[i]);
    const DatasetContext pctx = DatasetContext::from_schema("p", "permutation", shuffled, provider);
    const DatasetBundle out = model.sample_rows(pctx, 6, 11);

    for (int i = 0; i < 3; ++i) {
        const int src = perm[i];
        if (schema[src].is_categorical()) {
            CHECK(out.columns[i].category == base.columns[src].category);
        } else {
            for (size_t r = 0; r < 6; ++r)
                CHECK(out.columns[i].numeric[r] == Catch::Approx(base.columns[src].numeric[r]).margin(1e-5));
        }
    }
}

TEST_CASE("checkpoint round-trip preserves forward bit-exactly") {
    Fixture fx;
    const fs::path path = fs::temp_directory_path() / "mixtable_ckpt_test.bin";
    fx.model.save_checkpoint(path);
    const Model loaded = Model::load_checkpoint(path);
    CHECK(loaded.config().d_h == fx.cfg.d_h);
    const RowBatch batch = toy::num_cat_batch(fx.ctx, fx.model.schedule(), 9, 27);
    const ForwardResult a = fx.model.forward(batch);
    const ForwardResult reloaded = loaded.forward(batch);
    CHECK(a[0].values == reloaded[0].values);
    CHECK(a[1].probabilities == reloaded[1].probabilities);
    fs::remove(path);
}

TEST_CASE("checkpoint loader rejects foreign files") {
    const fs::path path = fs::temp_directory_path() / "mixtable_not_a_ckpt.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "definitely not a checkpoint";
    }
    CHECK_THROWS_AS(Model::load_checkpoint(path), DataError);
    CHECK_THROWS_AS(Model::load_checkpoint(path / "missing"), DataError);
    fs::remove(path);
}

TEST_CASE("make_batch pre-noises lanes and flags degenerate rows") {
    HashEmbeddingProvider provider(6);
    DatasetBundle b;
    b.id = "toy";
    b.description = "a small test table";
    b.features = toy::num_cat_schema();
    b.columns = {Column{{0.5, -0.25, 1.5}, {}}, Column{{}, {0, 1, 0}}};
    b.missing = {{0, 0, 1}, {0, 1, 1}};
    const DatasetContext ctx = DatasetContext::from_bundle(b, provider);
    const NoiseSchedule sched = build_schedule(40, 10);
    CounterRng rng(3);
    const RowBatch batch = make_batch(b, ctx, sched, {0, 1}, 5, rng);
    CHECK(batch.n_rows == 2);
    CHECK(batch.lanes[0].missing == std::vector<uint8_t>{0, 0});
    CHECK(batch.lanes[1].missing == std::vector<uint8_t>{0, 1});
    // row 2 has every lane missing
    CounterRng rng2(3);
    CHECK_THROWS_AS(make_batch(b, ctx, sched, {2}, 5, rng2), DataError);
    CounterRng rng3(3);
    CHECK_THROWS_AS(make_batch(b, ctx, sched, {99}, 5, rng3), DataError);
}
