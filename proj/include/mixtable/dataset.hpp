#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixtable/common.hpp"
#include "mixtable/csv.hpp"
#include "mixtable/rng.hpp"

namespace mixtable {

enum class FeatureKind { numerical, categorical };

inline std::string to_string(FeatureKind k) {
    return k == FeatureKind::numerical ? "numerical" : "categorical";
}

struct NumericStats {
    double mean = 0.0;
    double std = 1.0;
};

struct FeatureSchema {
    std::string name;
    FeatureKind kind = FeatureKind::numerical;
    std::vector<std::string> categories;     // categorical only, ordered
    std::optional<NumericStats> numeric_stats;  // numerical only, set after fitting

    bool is_categorical() const { return kind == FeatureKind::categorical; }

    int category_index(const std::string& value) const {
        for (size_t i = 0; i < categories.size(); ++i) {
            if (categories[i] == value) return static_cast<int>(i);
        }
        return -1;
    }

    void validate() const {
        if (name.empty()) throw DataError("feature with empty name");
        if (is_categorical()) {
            if (categories.empty())
                throw DataError(concat("categorical feature '", name, "' has no categories"));
            std::unordered_set<std::string> seen;
            for (const auto& c : categories) {
                if (!seen.insert(c).second)
                    throw DataError(concat("feature '", name, "' has duplicate category '", c, "'"));
            }
        } else if (!categories.empty()) {
            throw DataError(concat("numerical feature '", name, "' must not list categories"));
        }
    }
};

// One table column. Numerical columns use `numeric`, categorical columns use
// `category` (index into the schema's category list, -1 when missing).
struct Column {
    std::vector<double> numeric;
    std::vector<int> category;

    size_t size(FeatureKind kind) const {
        return kind == FeatureKind::numerical ? numeric.size() : category.size();
    }
};

struct DatasetBundle {
    std::string id;
    std::string description;
    std::vector<FeatureSchema> features;
    std::vector<Column> columns;                 // column-major, one per feature
    std::vector<std::vector<uint8_t>> missing;   // [feature][row], 1 = missing

    size_t n_features() const { return features.size(); }
    size_t n_rows() const {
        return columns.empty() ? 0 : columns.front().size(features.front().kind);
    }

    void validate() const {
        if (features.empty()) throw DataError(concat("dataset '", id, "': no features"));
        if (columns.size() != features.size() || missing.size() != features.size())
            throw DataError(concat("dataset '", id, "': column/schema count mismatch"));
        const size_t n = n_rows();
        for (size_t j = 0; j < features.size(); ++j) {
            features[j].validate();
            if (columns[j].size(features[j].kind) != n || missing[j].size() != n)
                throw DataError(concat("dataset '", id, "': column '", features[j].name,
                                       "' length differs from other columns"));
            if (features[j].is_categorical()) {
                const int n_cat = static_cast<int>(features[j].categories.size());
                for (size_t i = 0; i < n; ++i) {
                    const int v = columns[j].category[i];
                    if (missing[j][i]) continue;
                    if (v < 0 || v >= n_cat)
                        throw DataError(concat("dataset '", id, "': cell (", i, ", ",
                                               features[j].name, ") outside category set"));
                }
            }
        }
    }
};

struct MetaDataset {
    std::vector<DatasetBundle> datasets;
    std::vector<double> weights;  // per-dataset w^(k), set by compute_weights

    void validate_ids() const {
        std::unordered_set<std::string> ids;
        for (const auto& d : datasets) {
            if (!ids.insert(d.id).second)
                throw DataError(concat("duplicate dataset id '", d.id, "'"));
        }
    }
};

struct SplitSpec {
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;
    uint64_t seed = 0;

    void validate() const {
        if (train_fraction <= 0 || val_fraction <= 0 || test_fraction <= 0)
            throw ConfigError("split fractions must be positive");
        const double sum = train_fraction + val_fraction + test_fraction;
        if (std::abs(sum - 1.0) > 1e-9)
            throw ConfigError(concat("split fractions sum to ", sum, ", expected 1"));
    }
};

struct SplitIndices {
    std::vector<size_t> train, val, test;
};

// ---------------------------------------------------------------------------
// schema.json I/O

inline FeatureSchema feature_schema_from_json(const nlohmann::json& j) {
    FeatureSchema f;
    f.name = j.at("name").get<std::string>();
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "numerical") {
        f.kind = FeatureKind::numerical;
    } else if (kind == "categorical") {
        f.kind = FeatureKind::categorical;
        f.categories = j.at("categories").get<std::vector<std::string>>();
    } else {
        throw DataError(concat("feature '", f.name, "': unknown kind '", kind, "'"));
    }
    f.validate();
    return f;
}

struct SchemaFile {
    std::string id;
    std::string description;
    std::vector<FeatureSchema> features;
};

inline SchemaFile load_schema_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError(concat("cannot open schema file: ", path.string()));
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(concat("schema parse error in ", path.string(), ": ", e.what()));
    }
    SchemaFile s;
    try {
        s.id = j.at("id").get<std::string>();
        s.description = j.at("description").get<std::string>();
        for (const auto& jf : j.at("features")) s.features.push_back(feature_schema_from_json(jf));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(concat("schema error in ", path.string(), ": ", e.what()));
    }
    if (s.features.empty()) throw DataError(concat(path.string(), ": schema lists no features"));
    return s;
}

inline nlohmann::ordered_json schema_to_json(const DatasetBundle& bundle) {
    nlohmann::ordered_json j;
    j["id"] = bundle.id;
    j["description"] = bundle.description;
    j["features"] = nlohmann::ordered_json::array();
    for (const auto& f : bundle.features) {
        nlohmann::ordered_json jf;
        jf["name"] = f.name;
        jf["kind"] = to_string(f.kind);
        if (f.is_categorical()) jf["categories"] = f.categories;
        j["features"].push_back(jf);
    }
    return j;
}

// ---------------------------------------------------------------------------
// load / save

inline double parse_numeric_cell(const std::string& text, size_t row, const std::string& col) {
    double value = 0.0;
    const char* first = text.data();
    const char* last = first + text.size();
    // skip leading spaces; from_chars does not
    while (first < last && (*first == ' ' || *first == '\t')) ++first;
    auto [ptr, ec] = std::from_chars(first, last, value);
    if (ec != std::errc() || ptr != last)
        throw DataError(concat("unparsable numeric '", text, "' at row ", row, ", column '", col, "'"));
    return value;
}

// Builds a bundle from schema.json + data.csv. CSV headers are matched to
// schema feature names (any order); empty fields become missing.
inline DatasetBundle load_bundle(const std::filesystem::path& schema_path,
                                 const std::filesystem::path& csv_path) {
    const SchemaFile schema = load_schema_file(schema_path);
    const CsvTable csv = read_csv_file(csv_path.string());

    std::unordered_map<std::string, size_t> header_pos;
    for (size_t c = 0; c < csv.header.size(); ++c) {
        if (!header_pos.emplace(csv.header[c], c).second)
            throw DataError(concat(csv_path.string(), ": duplicate column '", csv.header[c], "'"));
    }
    std::unordered_set<std::string> schema_names;
    for (const auto& f : schema.features) schema_names.insert(f.name);
    for (const auto& h : csv.header) {
        if (!schema_names.count(h))
            throw DataError(concat(csv_path.string(), ": unknown column '", h, "'"));
    }

    DatasetBundle bundle;
    bundle.id = schema.id;
    bundle.description = schema.description;
    bundle.features = schema.features;
    const size_t n = csv.rows.size();
    bundle.columns.resize(schema.features.size());
    bundle.missing.assign(schema.features.size(), std::vector<uint8_t>(n, 0));

    for (size_t j = 0; j < schema.features.size(); ++j) {
        const FeatureSchema& f = schema.features[j];
        auto it = header_pos.find(f.name);
        if (it == header_pos.end())
            throw DataError(concat(csv_path.string(), ": missing column '", f.name, "'"));
        const size_t c = it->second;
        Column& col = bundle.columns[j];
        if (f.is_categorical()) col.category.resize(n);
        else col.numeric.resize(n);
        for (size_t i = 0; i < n; ++i) {
            const std::string& cell = csv.rows[i][c];
            if (cell.empty()) {
                bundle.missing[j][i] = 1;
                if (f.is_categorical()) col.category[i] = -1;
                else col.numeric[i] = 0.0;
                continue;
            }
            if (f.is_categorical()) {
                const int idx = f.category_index(cell);
                if (idx < 0)
                    throw DataError(concat("value '", cell, "' at row ", i, ", column '", f.name,
                                           "' is outside the category set"));
                col.category[i] = idx;
            } else {
                col.numeric[i] = parse_numeric_cell(cell, i, f.name);
            }
        }
    }
    bundle.validate();
    return bundle;
}

inline CsvTable bundle_to_csv(const DatasetBundle& bundle) {
    CsvTable table;
    const size_t n = bundle.n_rows();
    for (const auto& f : bundle.features) table.header.push_back(f.name);
    table.rows.assign(n, std::vector<std::string>(bundle.n_features()));
    for (size_t j = 0; j < bundle.n_features(); ++j) {
        const FeatureSchema& f = bundle.features[j];
        for (size_t i = 0; i < n; ++i) {
            if (bundle.missing[j][i]) continue;  // empty field
            table.rows[i][j] = f.is_categorical()
                                   ? f.categories[bundle.columns[j].category[i]]
                                   : format_double(bundle.columns[j].numeric[i]);
        }
    }
    return table;
}

// Bundle directory layout: schema.json + data.csv + (after fit) stats.json
inline void save_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "schema.json");
        if (!out) throw DataError(concat("cannot write ", (dir / "schema.json").string()));
        out << schema_to_json(bundle).dump(2) << '\n';
    }
    {
        std::ofstream out(dir / "data.csv", std::ios::binary);
        if (!out) throw DataError(concat("cannot write ", (dir / "data.csv").string()));
        out << write_csv(bundle_to_csv(bundle));
    }
    bool any_stats = false;
    nlohmann::ordered_json stats;
    stats["id"] = bundle.id;
    stats["stats"] = nlohmann::ordered_json::object();
    for (const auto& f : bundle.features) {
        if (f.numeric_stats) {
            stats["stats"][f.name] = {{"mean", f.numeric_stats->mean}, {"std", f.numeric_stats->std}};
            any_stats = true;
        }
    }
    if (any_stats) {
        std::ofstream out(dir / "stats.json");
        out << stats.dump(2) << '\n';
    }
}

inline DatasetBundle load_bundle_dir(const std::filesystem::path& dir) {
    DatasetBundle bundle = load_bundle(dir / "schema.json", dir / "data.csv");
    const auto stats_path = dir / "stats.json";
    if (std::filesystem::exists(stats_path)) {
        std::ifstream in(stats_path);
        nlohmann::json j;
        in >> j;
        for (auto& f : bundle.features) {
            if (f.kind == FeatureKind::numerical && j.at("stats").contains(f.name)) {
                const auto& js = j["stats"][f.name];
                f.numeric_stats = NumericStats{js.at("mean").get<double>(), js.at("std").get<double>()};
            }
        }
    }
    return bundle;
}

// ---------------------------------------------------------------------------
// normalization, weights, splits

// Fits per-feature mean/std on the train rows (population convention,
// divide by n) and z-scores the whole column. Missing numeric cells are
// stored as 0 after normalization; the mask keeps them out of every loss.
inline DatasetBundle fit_normalization(const DatasetBundle& bundle,
                                       const std::vector<size_t>& train_indices) {
    DatasetBundle out = bundle;
    for (size_t j = 0; j < out.n_features(); ++j) {
        FeatureSchema& f = out.features[j];
        if (f.is_categorical()) continue;
        double sum = 0.0;
        size_t count = 0;
        for (size_t i : train_indices) {
            if (out.missing[j][i]) continue;
            sum += out.columns[j].numeric[i];
            ++count;
        }
        if (count < 2)
            throw DataError(concat("feature '", f.name, "': fewer than 2 non-missing train values"));
        const double mean = sum / static_cast<double>(count);
        double ss = 0.0;
        for (size_t i : train_indices) {
            if (out.missing[j][i]) continue;
            const double d = out.columns[j].numeric[i] - mean;
            ss += d * d;
        }
        const double std = std::sqrt(ss / static_cast<double>(count));
        if (std <= 0.0)
            throw DataError(concat("constant feature '", f.name, "' (std = 0)"));
        f.numeric_stats = NumericStats{mean, std};
        for (size_t i = 0; i < out.n_rows(); ++i) {
            if (out.missing[j][i]) {
                out.columns[j].numeric[i] = 0.0;
            } else {
                out.columns[j].numeric[i] = (out.columns[j].numeric[i] - mean) / std;
            }
        }
    }
    return out;
}

inline std::vector<double> weights_for_sizes(const std::vector<size_t>& sizes) {
    double total_rows = 0.0;
    double total_sqrt = 0.0;
    for (size_t n : sizes) {
        if (n == 0) throw DataError("compute_weights: empty dataset");
        total_rows += static_cast<double>(n);
        total_sqrt += std::sqrt(static_cast<double>(n));
    }
    // w_k = scale / sqrt(n_k), scaled so the average per-row weight is 1
    const double scale = total_rows / total_sqrt;
    std::vector<double> w;
    w.reserve(sizes.size());
    for (size_t n : sizes) w.push_back(scale / std::sqrt(static_cast<double>(n)));
    return w;
}

inline MetaDataset compute_weights(MetaDataset meta) {
    meta.validate_ids();
    std::vector<size_t> sizes;
    for (const auto& d : meta.datasets) sizes.push_back(d.n_rows());
    meta.weights = weights_for_sizes(sizes);
    return meta;
}

inline SplitIndices split_rows(size_t n_rows, const SplitSpec& spec) {
    spec.validate();
    std::vector<size_t> idx(n_rows);
    std::iota(idx.begin(), idx.end(), size_t{0});
    CounterRng rng(mix_u64(spec.seed, 0x73706c6974ULL));  // "split" tag
    shuffle_indices(idx, rng);

    const size_t n_train = static_cast<size_t>(std::floor(spec.train_fraction * static_cast<double>(n_rows)));
    const size_t n_val = static_cast<size_t>(std::floor(spec.val_fraction * static_cast<double>(n_rows)));
    if (n_train == 0 || n_val == 0 || n_train + n_val >= n_rows)
        throw DataError(concat("split of ", n_rows, " rows yields an empty part"));

    SplitIndices out;
    out.train.assign(idx.begin(), idx.begin() + n_train);
    out.val.assign(idx.begin() + n_train, idx.begin() + n_train + n_val);
    out.test.assign(idx.begin() + n_train + n_val, idx.end());
    return out;
}

inline SplitIndices split_rows(const DatasetBundle& bundle, const SplitSpec& spec) {
    return split_rows(bundle.n_rows(), spec);
}

}  // namespace mixtable
