#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "mixtable/dataset.hpp"

using namespace mixtable;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static int counter = 0;
    fs::path dir = fs::temp_directory_path() / ("mixtable_dataset_test_" + std::to_string(counter++));
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    out << text;
}

// the worked example table: description + Age / Gender / Income
const char* kSchema = R"({
  "id": "toy",
  "description": "This describes the dataset.",
  "features": [
    {"name": "Age", "kind": "numerical"},
    {"name": "Gender", "kind": "categorical", "categories": ["Male", "Female"]},
    {"name": "Income", "kind": "numerical"}
  ]
})";

const char* kCsv = "Age,Gender,Income\n42,Male,30000\n33,Female,46000\n";

fs::path write_toy(const fs::path& dir) {
    write_file(dir / "schema.json", kSchema);
    write_file(dir / "data.csv", kCsv);
    return dir;
}

}  // namespace

TEST_CASE("load_bundle reads the worked example") {
    const fs::path dir = write_toy(temp_dir());
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "data.csv");
    CHECK(b.id == "toy");
    CHECK(b.description == "This describes the dataset.");
    REQUIRE(b.n_features() == 3);
    REQUIRE(b.n_rows() == 2);
    CHECK(b.columns[0].numeric[0] == 42.0);
    CHECK(b.columns[1].category[0] == 0);  // Male
    CHECK(b.columns[1].category[1] == 1);  // Female
    CHECK(b.columns[2].numeric[1] == 46000.0);
}

TEST_CASE("two-feature slice of the worked example") {
    const fs::path dir = temp_dir();
    write_file(dir / "schema.json", R"({
      "id": "mini", "description": "d",
      "features": [
        {"name": "Age", "kind": "numerical"},
        {"name": "Gender", "kind": "categorical", "categories": ["Male", "Female"]}
      ]})");
    write_file(dir / "data.csv", "Age,Gender\n42,Male\n33,Female\n");
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "data.csv");
    CHECK(b.n_features() == 2);
    CHECK(b.n_rows() == 2);
}

TEST_CASE("empty csv field becomes missing") {
    const fs::path dir = temp_dir();
    write_file(dir / "schema.json", kSchema);
    write_file(dir / "data.csv", "Age,Gender,Income\n,Male,30000\n33,Female,46000\n");
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "data.csv");
    CHECK(b.missing[0][0] == 1);
    CHECK(b.missing[0][1] == 0);
    CHECK(b.columns[0].numeric[0] == 0.0);
}

TEST_CASE("csv header order does not matter") {
    const fs::path dir = write_toy(temp_dir());
    const DatasetBundle a = load_bundle(dir / "schema.json", dir / "data.csv");
    write_file(dir / "reordered.csv", "Income,Age,Gender\n30000,42,Male\n46000,33,Female\n");
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "reordered.csv");
    REQUIRE(a.n_features() == b.n_features());
    CHECK(a.columns[0].numeric == b.columns[0].numeric);
    CHECK(a.columns[1].category == b.columns[1].category);
    CHECK(a.columns[2].numeric == b.columns[2].numeric);
}

TEST_CASE("load errors: unknown column, bad category, bad numeric") {
    const fs::path dir = temp_dir();
    write_file(dir / "schema.json", kSchema);
    write_file(dir / "unknown.csv", "Age,Gender,Income,Extra\n42,Male,1,2\n33,Male,1,2\n");
    CHECK_THROWS_AS(load_bundle(dir / "schema.json", dir / "unknown.csv"), DataError);
    write_file(dir / "badcat.csv", "Age,Gender,Income\n42,Robot,30000\n");
    CHECK_THROWS_WITH(load_bundle(dir / "schema.json", dir / "badcat.csv"),
                      Catch::Matchers::ContainsSubstring("Robot") &&
                          Catch::Matchers::ContainsSubstring("row 0"));
    write_file(dir / "badnum.csv", "Age,Gender,Income\nforty,Male,30000\n");
    CHECK_THROWS_WITH(load_bundle(dir / "schema.json", dir / "badnum.csv"),
                      Catch::Matchers::ContainsSubstring("forty"));
}

TEST_CASE("rfc-4180 quoting round-trips") {
    const fs::path dir = temp_dir();
    write_file(dir / "schema.json", R"({
      "id": "q", "description": "d",
      "features": [{"name": "label", "kind": "categorical",
                    "categories": ["plain", "with, comma", "with \"quote\""]}]})");
    write_file(dir / "data.csv", "label\nplain\n\"with, comma\"\n\"with \"\"quote\"\"\"\n");
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "data.csv");
    REQUIRE(b.n_rows() == 3);
    CHECK(b.columns[0].category == std::vector<int>{0, 1, 2});
    // write back and reload
    const fs::path out = dir / "out";
    save_bundle(b, out);
    const DatasetBundle b2 = load_bundle_dir(out);
    CHECK(b2.columns[0].category == b.columns[0].category);
}

TEST_CASE("bundle write/load round-trip preserves values to 9 significant digits") {
    const fs::path dir = temp_dir();
    write_file(dir / "schema.json", kSchema);
    write_file(dir / "data.csv",
               "Age,Gender,Income\n42.123456789,Male,30000.5\n,Female,-1.25e-3\n33,,0.1\n");
    const DatasetBundle b = load_bundle(dir / "schema.json", dir / "data.csv");
    const fs::path out = dir / "bundle";
    save_bundle(b, out);
    const DatasetBundle b2 = load_bundle_dir(out);
    REQUIRE(b2.n_rows() == b.n_rows());
    for (size_t j = 0; j < b.n_features(); ++j) {
        CHECK(b2.missing[j] == b.missing[j]);
        if (b.features[j].is_categorical()) {
            CHECK(b2.columns[j].category == b.columns[j].category);
        } else {
            for (size_t i = 0; i < b.n_rows(); ++i) {
                const double x = b.columns[j].numeric[i];
                const double y = b2.columns[j].numeric[i];
                const double scale = std::max(1e-30, std::abs(x));
                CHECK(std::abs(x - y) / scale < 1e-8);  // 9 significant digits
            }
        }
    }
}

TEST_CASE("fit_normalization: population convention on [0,2]") {
    DatasetBundle b;
    b.id = "n";
    b.description = "d";
    b.features = {FeatureSchema{"x", FeatureKind::numerical, {}, {}}};
    b.columns = {Column{{0.0, 2.0}, {}}};
    b.missing = {{0, 0}};
    const DatasetBundle f = fit_normalization(b, {0, 1});
    REQUIRE(f.features[0].numeric_stats.has_value());
    CHECK(f.features[0].numeric_stats->mean == Catch::Approx(1.0));
    CHECK(f.features[0].numeric_stats->std == Catch::Approx(1.0));  // divide-by-n
    CHECK(f.columns[0].numeric[0] == Catch::Approx(-1.0));
    CHECK(f.columns[0].numeric[1] == Catch::Approx(1.0));
}

TEST_CASE("fit_normalization is idempotent in the stats") {
    DatasetBundle b;
    b.id = "n";
    b.description = "d";
    b.features = {FeatureSchema{"x", FeatureKind::numerical, {}, {}}};
    b.columns = {Column{{1.0, 2.0, 3.0, 10.0}, {}}};
    b.missing = {{0, 0, 0, 0}};
    const std::vector<size_t> all{0, 1, 2, 3};
    const DatasetBundle once = fit_normalization(b, all);
    const DatasetBundle twice = fit_normalization(once, all);
    CHECK(twice.features[0].numeric_stats->mean == Catch::Approx(0.0).margin(1e-12));
    CHECK(twice.features[0].numeric_stats->std == Catch::Approx(1.0));
}

TEST_CASE("fit_normalization rejects constant columns") {
    DatasetBundle b;
    b.id = "n";
    b.description = "d";
    b.features = {FeatureSchema{"flat", FeatureKind::numerical, {}, {}}};
    b.columns = {Column{{5.0, 5.0}, {}}};
    b.missing = {{0, 0}};
    CHECK_THROWS_WITH(fit_normalization(b, {0, 1}),
                      Catch::Matchers::ContainsSubstring("constant feature") &&
                          Catch::Matchers::ContainsSubstring("flat"));
}

TEST_CASE("fit_normalization needs two non-missing train values") {
    DatasetBundle b;
    b.id = "n";
    b.description = "d";
    b.features = {FeatureSchema{"x", FeatureKind::numerical, {}, {}}};
    b.columns = {Column{{5.0, 0.0}, {}}};
    b.missing = {{0, 1}};
    CHECK_THROWS_AS(fit_normalization(b, {0, 1}), DataError);
}

TEST_CASE("missing numeric cells become zero after normalization") {
    DatasetBundle b;
    b.id = "n";
    b.description = "d";
    b.features = {FeatureSchema{"x", FeatureKind::numerical, {}, {}}};
    b.columns = {Column{{0.0, 2.0, 99.0}, {}}};
    b.missing = {{0, 0, 1}};
    const DatasetBundle f = fit_normalization(b, {0, 1});
    CHECK(f.columns[0].numeric[2] == 0.0);
    CHECK(f.missing[0][2] == 1);
}

TEST_CASE("compute_weights: sizes 100 and 400 give ratio 2:1") {
    // oracle: w_k = 1/sqrt(n_k), rescaled so sum n_k w_k = sum n_k
    const auto w = weights_for_sizes({100, 400});
    CHECK(w[0] / w[1] == Catch::Approx(2.0));
    CHECK(100.0 * w[0] + 400.0 * w[1] == Catch::Approx(500.0));
}

TEST_CASE("compute_weights: single dataset gets average weight 1") {
    const auto w = weights_for_sizes({1234});
    CHECK(w[0] == Catch::Approx(1.0));
}

TEST_CASE("compute_weights: equal sizes get equal weights") {
    const auto w = weights_for_sizes({50, 50, 50});
    CHECK(w[0] == Catch::Approx(w[1]));
    CHECK(w[1] == Catch::Approx(w[2]));
    CHECK(w[0] == Catch::Approx(1.0));
}

TEST_CASE("compute_weights scales through 1/sqrt(n) only") {
    // doubling every dataset size leaves relative weights unchanged
    const auto w1 = weights_for_sizes({100, 400, 900});
    const auto w2 = weights_for_sizes({200, 800, 1800});
    for (size_t i = 0; i + 1 < w1.size(); ++i)
        CHECK(w1[i] / w1[i + 1] == Catch::Approx(w2[i] / w2[i + 1]));
}

TEST_CASE("compute_weights rejects empty datasets") {
    CHECK_THROWS_AS(weights_for_sizes({10, 0}), DataError);
}

TEST_CASE("split: n=10 with (0.8,0.1,0.1) gives sizes (8,1,1)") {
    const SplitIndices s = split_rows(10, SplitSpec{0.8, 0.1, 0.1, 7});
    CHECK(s.train.size() == 8);
    CHECK(s.val.size() == 1);
    CHECK(s.test.size() == 1);
}

TEST_CASE("split is deterministic under the seed") {
    const SplitIndices a = split_rows(100, SplitSpec{0.8, 0.1, 0.1, 7});
    const SplitIndices b = split_rows(100, SplitSpec{0.8, 0.1, 0.1, 7});
    CHECK(a.train == b.train);
    CHECK(a.val == b.val);
    CHECK(a.test == b.test);
}

TEST_CASE("different seeds give different permutations") {
    const SplitIndices base = split_rows(50, SplitSpec{0.8, 0.1, 0.1, 0});
    int differing = 0;
    for (uint64_t seed = 1; seed <= 100; ++seed) {
        const SplitIndices s = split_rows(50, SplitSpec{0.8, 0.1, 0.1, seed});
        if (s.train != base.train) ++differing;
    }
    CHECK(differing >= 99);
}

TEST_CASE("splits partition the row indices") {
    for (size_t n : {5u, 17u, 100u, 1001u}) {
        for (uint64_t seed : {0u, 1u, 2u}) {
            const SplitIndices s = split_rows(n, SplitSpec{0.6, 0.2, 0.2, seed});
            std::set<size_t> all;
            for (size_t i : s.train) all.insert(i);
            for (size_t i : s.val) all.insert(i);
            for (size_t i : s.test) all.insert(i);
            CHECK(all.size() == n);
            CHECK(s.train.size() + s.val.size() + s.test.size() == n);
            CHECK(*all.rbegin() == n - 1);
        }
    }
}

TEST_CASE("split rejects degenerate sizes") {
    CHECK_THROWS_AS(split_rows(3, SplitSpec{0.8, 0.1, 0.1, 0}), DataError);
    CHECK_THROWS_AS(split_rows(10, SplitSpec{0.5, 0.5, 0.1, 0}), ConfigError);
    CHECK_THROWS_AS(split_rows(10, SplitSpec{-0.5, 0.5, 1.0, 0}), ConfigError);
}

TEST_CASE("schema validation catches duplicates and empty categories") {
    FeatureSchema f{"g", FeatureKind::categorical, {"a", "a"}, {}};
    CHECK_THROWS_AS(f.validate(), DataError);
    FeatureSchema empty{"g", FeatureKind::categorical, {}, {}};
    CHECK_THROWS_AS(empty.validate(), DataError);
    FeatureSchema ok{"g", FeatureKind::categorical, {"a", "b"}, {}};
    CHECK_NOTHROW(ok.validate());
}
