#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mixtable/training.hpp"
#include "support/toy_model.hpp"
#include "support/toy_tables.hpp"

using namespace mixtable;
namespace fs = std::filesystem;

namespace {

ModelConfig small_model() {
    ModelConfig cfg = toy::tiny_model_config(/*d_h=*/16, /*d_f=*/16, /*n_layers=*/1, /*n_heads=*/2,
                                             /*t_train=*/50, /*t_infer=*/10);
    return cfg;
}

TrainConfig short_train(int epochs, double lr0, uint64_t seed) {
    TrainConfig t;
    t.epochs = epochs;
    t.lr0 = lr0;
    t.batch_size = 32;
    t.seed = seed;
    return t;
}

MetaDataset two_table_meta(size_t n_a = 300, size_t n_b = 300) {
    MetaDataset meta;
    meta.datasets.push_back(toy::table_a(n_a, 1));
    meta.datasets.push_back(toy::table_b(n_b, 2));
    return meta;
}

}  // namespace

TEST_CASE("short training run drives the smoothed loss down") {
    HashEmbeddingProvider provider(16);
    const auto result = train(two_table_meta(), small_model(), short_train(50, 1e-3, 3), provider);
    REQUIRE(result.curve.size() == 50);

    // window-5 moving average, strictly decreasing on >= 90% of steps
    std::vector<double> smoothed;
    for (size_t i = 0; i + 5 <= result.curve.size(); ++i) {
        double s = 0;
        for (size_t j = i; j < i + 5; ++j) s += result.curve[j].train_loss;
        smoothed.push_back(s / 5);
    }
    int decreasing = 0;
    for (size_t i = 1; i < smoothed.size(); ++i)
        if (smoothed[i] < smoothed[i - 1]) ++decreasing;
    const double fraction = static_cast<double>(decreasing) / (smoothed.size() - 1);
    INFO("decreasing fraction " << fraction);
    CHECK(fraction >= 0.9);
    CHECK(result.curve.back().train_loss < result.curve.front().train_loss);
}

TEST_CASE("lr0 = 0 leaves the parameters at their initialization") {
    HashEmbeddingProvider provider(16);
    const ModelConfig mcfg = small_model();
    const auto result = train(two_table_meta(120, 120), mcfg, short_train(2, 0.0, 4), provider);
    const TableDiffusionModel<float> reference(mcfg, 4);  // same init seed
    for (const auto& name : reference.params().names())
        CHECK(result.model.params().at(name).data == reference.params().at(name).data);
}

TEST_CASE("training is deterministic under the seed") {
    HashEmbeddingProvider provider(16);
    const auto a = train(two_table_meta(120, 120), small_model(), short_train(4, 5e-4, 7), provider);
    const auto b = train(two_table_meta(120, 120), small_model(), short_train(4, 5e-4, 7), provider);
    REQUIRE(a.curve.size() == b.curve.size());
    for (size_t i = 0; i < a.curve.size(); ++i) {
        CHECK(a.curve[i].train_loss == b.curve[i].train_loss);  // bit-identical
        CHECK(a.curve[i].val_loss == b.curve[i].val_loss);
        CHECK(a.curve[i].lr == b.curve[i].lr);
    }
    for (const auto& name : a.model.params().names())
        CHECK(a.model.params().at(name).data == b.model.params().at(name).data);
}

TEST_CASE("nan loss aborts with a diagnostic") {
    HashEmbeddingProvider provider(16);
    // lr large enough to blow the optimization up within a few epochs
    CHECK_THROWS_AS(train(two_table_meta(120, 120), small_model(), short_train(40, 2e3, 5), provider),
                    NumericError);
}

TEST_CASE("dataset picking follows sqrt(n) frequencies") {
    // spec invariant: sampling frequencies over 10k draws match p_k ~ sqrt(n_k)
    // within 3-sigma multinomial bounds
    HashEmbeddingProvider provider(16);
    MetaDataset meta;
    meta.datasets.push_back(toy::table_a(900, 1));
    meta.datasets.push_back(toy::table_b(100, 2));
    TrainConfig tcfg = short_train(1, 1e-4, 11);
    auto setup = detail::prepare_training<float>(meta, tcfg, provider);

    const size_t n_a = setup.splits[0].train.size();
    const size_t n_b = setup.splits[1].train.size();
    const double pa = std::sqrt(static_cast<double>(n_a)) /
                      (std::sqrt(static_cast<double>(n_a)) + std::sqrt(static_cast<double>(n_b)));

    CounterRng rng(42);
    const int draws = 10000;
    int picked_a = 0;
    for (int i = 0; i < draws; ++i) {
        const double u = rng.next_uniform();
        size_t k = 0;
        while (k + 1 < setup.cumulative_pick.size() && u >= setup.cumulative_pick[k]) ++k;
        if (k == 0) ++picked_a;
    }
    const double sigma = std::sqrt(pa * (1 - pa) * draws);
    CHECK(std::abs(picked_a - pa * draws) <= 3.0 * sigma);
}

TEST_CASE("finetune leaves the source checkpoint untouched and is loadable") {
    HashEmbeddingProvider provider(16);
    const auto pre = train(two_table_meta(120, 120), small_model(), short_train(2, 5e-4, 8), provider);

    const fs::path ckpt = fs::temp_directory_path() / "mixtable_pretrain.bin";
    pre.model.save_checkpoint(ckpt);
    std::ifstream in(ckpt, std::ios::binary);
    const std::string before((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();

    const DatasetBundle target = toy::table_c(200, 9);
    TrainConfig ft = short_train(3, 5e-4, 9);
    const auto base = TableDiffusionModel<float>::load_checkpoint(ckpt);
    const auto result = finetune(base, target, 100, ft, provider);

    // source file bytes unchanged
    std::ifstream in2(ckpt, std::ios::binary);
    const std::string after((std::istreambuf_iterator<char>(in2)), std::istreambuf_iterator<char>());
    CHECK(before == after);

    // the finetuned model moved and round-trips through its own checkpoint
    bool any_changed = false;
    for (const auto& name : base.params().names())
        any_changed = any_changed || result.model.params().at(name).data != base.params().at(name).data;
    CHECK(any_changed);
    const fs::path out = fs::temp_directory_path() / "mixtable_finetuned.bin";
    result.model.save_checkpoint(out);
    CHECK_NOTHROW(TableDiffusionModel<float>::load_checkpoint(out));
    fs::remove(ckpt);
    fs::remove(out);
}

TEST_CASE("finetune can consume the whole train split but not more") {
    HashEmbeddingProvider provider(16);
    const TableDiffusionModel<float> base(small_model(), 3);
    const DatasetBundle target = toy::table_c(100, 10);
    TrainConfig ft = short_train(1, 1e-4, 10);
    const SplitIndices split = split_rows(target, ft.split_spec());
    CHECK_NOTHROW(finetune(base, target, static_cast<int>(split.train.size()), ft, provider));
    CHECK_THROWS_AS(finetune(base, target, static_cast<int>(split.train.size()) + 1, ft, provider),
                    DataError);
    CHECK_THROWS_AS(finetune(base, target, 0, ft, provider), ConfigError);
    CHECK_THROWS_AS(finetune(base, target, -3, ft, provider), ConfigError);
}

TEST_CASE("zero-shot generation works from metadata alone") {
    HashEmbeddingProvider provider(16);
    const TableDiffusionModel<float> model(small_model(), 6);
    std::vector<FeatureSchema> schema{
        FeatureSchema{"entirely new feature", FeatureKind::numerical, {}, NumericStats{10.0, 2.0}},
        FeatureSchema{"novel flag", FeatureKind::categorical, {"yes", "no", "maybe"}, {}}};

    const DatasetBundle a = zero_shot_generate(model, "unseen", "never seen in training", schema,
                                               12, 5, provider);
    const DatasetBundle b = zero_shot_generate(model, "unseen", "never seen in training", schema,
                                               12, 5, provider);
    REQUIRE(a.n_rows() == 12);
    CHECK(a.columns[0].numeric == b.columns[0].numeric);  // same seed, same output
    CHECK(a.columns[1].category == b.columns[1].category);
    for (int c : a.columns[1].category) {
        CHECK(c >= 0);
        CHECK(c < 3);
    }

    // stats are mandatory
    std::vector<FeatureSchema> no_stats = schema;
    no_stats[0].numeric_stats.reset();
    CHECK_THROWS_AS(zero_shot_generate(model, "unseen", "x", no_stats, 4, 5, provider), DataError);
}

TEST_CASE("curve csv uses the documented columns") {
    const fs::path path = fs::temp_directory_path() / "mixtable_curve.csv";
    write_curve_csv(path, {{0, 1.25, 1.5, 1e-3}, {1, 1.0, 1.25, 5e-4}});
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,train_loss,val_loss,lr");
    std::getline(in, line);
    CHECK(line == "0,1.25,1.5,0.001");
    fs::remove(path);
}
