// mixtable command line: ingest, cache-embeddings, train, finetune, generate,
// evaluate, overlap-report. Config-driven (JSON), flags override config keys,
// every run echoes its resolved config next to its outputs.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mixtable/dataset.hpp"
#include "mixtable/embedding.hpp"
#include "mixtable/metrics.hpp"
#include "mixtable/model.hpp"
#include "mixtable/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct ProviderConfig {
    std::string kind = "hash";
    int d_f = 1024;
    std::string endpoint;
    std::string cache_path;
};

struct RunConfig {
    uint64_t seed = 0;
    mixtable::ModelConfig model;
    mixtable::TrainConfig train;
    ProviderConfig provider;

    ordered_json to_json() const {
        ordered_json j;
        j["seed"] = seed;
        j["model"] = model.to_json();
        j["train"] = train.to_json();
        j["provider"] = {{"kind", provider.kind},
                         {"d_f", provider.d_f},
                         {"endpoint", provider.endpoint},
                         {"cache", provider.cache_path}};
        return j;
    }
};

RunConfig load_run_config(const std::string& path) {
    RunConfig cfg;
    if (path.empty()) return cfg;
    std::ifstream in(path);
    if (!in) throw mixtable::ConfigError("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw mixtable::ConfigError(std::string("config parse error: ") + e.what());
    }
    if (j.contains("seed")) cfg.seed = j["seed"].get<uint64_t>();
    if (j.contains("model")) cfg.model = mixtable::ModelConfig::from_json(j["model"]);
    if (j.contains("train")) cfg.train = mixtable::TrainConfig::from_json(j["train"]);
    if (j.contains("provider")) {
        const auto& p = j["provider"];
        cfg.provider.kind = p.value("kind", cfg.provider.kind);
        cfg.provider.d_f = p.value("d_f", cfg.provider.d_f);
        cfg.provider.endpoint = p.value("endpoint", cfg.provider.endpoint);
        cfg.provider.cache_path = p.value("cache", cfg.provider.cache_path);
    }
    return cfg;
}

std::shared_ptr<mixtable::EmbeddingProvider> make_provider(const ProviderConfig& p) {
    std::shared_ptr<mixtable::EmbeddingProvider> inner;
    if (p.kind == "hash") {
        inner = std::make_shared<mixtable::HashEmbeddingProvider>(p.d_f);
    } else if (p.kind == "remote") {
        inner = std::make_shared<mixtable::RemoteEmbeddingProvider>(p.endpoint, p.d_f);
    } else {
        throw mixtable::ConfigError("unknown provider kind '" + p.kind + "'");
    }
    if (p.cache_path.empty()) return inner;
    auto cache = std::make_shared<mixtable::EmbeddingCache>(p.cache_path);
    return std::make_shared<mixtable::CachingProvider>(inner, cache);
}

void write_config_echo(const fs::path& target, const RunConfig& cfg, const std::string& command) {
    ordered_json j = cfg.to_json();
    j["command"] = command;
    fs::path path = target;
    if (fs::is_directory(target) || target.extension().empty()) {
        fs::create_directories(target);
        path = target / "config.json";
    } else {
        path = target.string() + ".config.json";
    }
    std::ofstream out(path);
    if (!out) throw mixtable::DataError("cannot write config echo: " + path.string());
    out << j.dump(2) << '\n';
}

mixtable::MetaDataset load_meta(const std::vector<std::string>& bundle_dirs) {
    mixtable::MetaDataset meta;
    for (const auto& dir : bundle_dirs) meta.datasets.push_back(mixtable::load_bundle_dir(dir));
    meta.validate_ids();
    return meta;
}

// schema file + optional stats.json -> a sampling-ready context
mixtable::DatasetContext context_for_generation(const std::string& schema_path,
                                                std::string stats_path,
                                                mixtable::EmbeddingProvider& provider) {
    mixtable::SchemaFile schema = mixtable::load_schema_file(schema_path);
    if (stats_path.empty()) {
        const fs::path sibling = fs::path(schema_path).parent_path() / "stats.json";
        if (fs::exists(sibling)) stats_path = sibling.string();
    }
    if (!stats_path.empty()) {
        std::ifstream in(stats_path);
        if (!in) throw mixtable::DataError("cannot open stats file: " + stats_path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw mixtable::DataError(std::string("stats parse error: ") + e.what());
        }
        for (auto& f : schema.features) {
            if (f.kind == mixtable::FeatureKind::numerical && j.at("stats").contains(f.name)) {
                const auto& js = j["stats"][f.name];
                f.numeric_stats =
                    mixtable::NumericStats{js.at("mean").get<double>(), js.at("std").get<double>()};
            }
        }
    }
    return mixtable::DatasetContext::from_schema(schema.id, schema.description, schema.features,
                                                 provider);
}

int command_ingest(const RunConfig& cfg, const std::string& schema, const std::string& csv,
                   const std::string& out_dir) {
    mixtable::DatasetBundle bundle = mixtable::load_bundle(schema, csv);
    mixtable::SplitSpec spec = cfg.train.split_spec();
    spec.seed = cfg.seed;
    const mixtable::SplitIndices split = mixtable::split_rows(bundle, spec);
    const mixtable::DatasetBundle fitted = mixtable::fit_normalization(bundle, split.train);
    // keep raw values on disk; stats.json carries the fitted normalization
    for (size_t j = 0; j < bundle.n_features(); ++j)
        bundle.features[j].numeric_stats = fitted.features[j].numeric_stats;
    mixtable::save_bundle(bundle, out_dir);
    write_config_echo(out_dir, cfg, "ingest");
    std::cout << "ingested '" << bundle.id << "': " << bundle.n_rows() << " rows, "
              << bundle.n_features() << " features -> " << out_dir << "\n";
    return 0;
}

int command_cache_embeddings(const RunConfig& cfg, const std::vector<std::string>& bundles) {
    if (cfg.provider.cache_path.empty())
        throw mixtable::ConfigError("cache-embeddings needs --cache");
    mixtable::MetaDataset meta = load_meta(bundles);
    auto inner = make_provider(ProviderConfig{cfg.provider.kind, cfg.provider.d_f,
                                              cfg.provider.endpoint, ""});
    mixtable::EmbeddingCache cache(cfg.provider.cache_path);
    const size_t added = mixtable::cache_warm(meta, *inner, cache);
    write_config_echo(fs::path(cfg.provider.cache_path), cfg, "cache-embeddings");
    std::cout << "cache " << cfg.provider.cache_path << ": " << added << " new entries, "
              << cache.size() << " total\n";
    return 0;
}

int command_train(const RunConfig& cfg, const std::vector<std::string>& bundles,
                  const std::string& out_dir) {
    mixtable::MetaDataset meta = load_meta(bundles);
    auto provider = make_provider(cfg.provider);
    mixtable::TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    const auto result = mixtable::train<float>(meta, cfg.model, tcfg, *provider);
    fs::create_directories(out_dir);
    result.model.save_checkpoint(fs::path(out_dir) / "checkpoint.bin");
    mixtable::write_curve_csv(fs::path(out_dir) / "curve.csv", result.curve);
    write_config_echo(out_dir, cfg, "train");
    std::cout << "trained " << result.curve.size() << " epochs, best epoch " << result.best_epoch
              << " (val loss " << result.curve[result.best_epoch].val_loss << ") -> " << out_dir
              << "\n";
    return 0;
}

int command_finetune(const RunConfig& cfg, const std::string& checkpoint, const std::string& bundle,
                     int n_samples, const std::string& out_dir) {
    const auto base = mixtable::TableDiffusionModel<float>::load_checkpoint(checkpoint);
    const mixtable::DatasetBundle target = mixtable::load_bundle_dir(bundle);
    ProviderConfig pcfg = cfg.provider;
    pcfg.d_f = base.config().d_f;  // embeddings must match the checkpoint
    auto provider = make_provider(pcfg);
    mixtable::TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    const auto result = mixtable::finetune(base, target, n_samples, tcfg, *provider);
    fs::create_directories(out_dir);
    result.model.save_checkpoint(fs::path(out_dir) / "checkpoint.bin");
    mixtable::write_curve_csv(fs::path(out_dir) / "curve.csv", result.curve);
    write_config_echo(out_dir, cfg, "finetune");
    std::cout << "finetuned on " << n_samples << " rows of '" << target.id << "' -> " << out_dir
              << "\n";
    return 0;
}

int command_generate(const RunConfig& cfg, const std::string& checkpoint, const std::string& schema,
                     const std::string& stats, int n, const std::string& out_csv, bool argmax) {
    const auto model = mixtable::TableDiffusionModel<float>::load_checkpoint(checkpoint);
    ProviderConfig pcfg = cfg.provider;
    pcfg.d_f = model.config().d_f;  // embeddings must match the checkpoint
    auto provider = make_provider(pcfg);
    mixtable::DatasetContext ctx = context_for_generation(schema, stats, *provider);
    mixtable::SampleOptions opts;
    opts.argmax_categories = argmax;
    const mixtable::DatasetBundle generated = model.sample_rows(ctx, n, cfg.seed, opts);
    std::ofstream out(out_csv, std::ios::binary);
    if (!out) throw mixtable::DataError("cannot write " + out_csv);
    out << mixtable::write_csv(mixtable::bundle_to_csv(generated));
    out.close();
    write_config_echo(fs::path(out_csv), cfg, "generate");
    std::cout << "generated " << n << " rows -> " << out_csv << "\n";
    return 0;
}

int command_evaluate(const RunConfig& cfg, const std::string& real_csv, const std::string& synth_csv,
                     const std::string& schema, int k, const std::string& label,
                     const std::string& out_json) {
    const mixtable::DatasetBundle real = mixtable::load_bundle(schema, real_csv);
    const mixtable::DatasetBundle synth = mixtable::load_bundle(schema, synth_csv);
    std::optional<std::string> label_opt;
    if (!label.empty()) label_opt = label;
    const mixtable::MetricReport report = mixtable::evaluate_generation(real, synth, k, label_opt);
    const std::string text = report.to_json().dump(2);
    std::cout << text << "\n";
    if (!out_json.empty()) {
        std::ofstream out(out_json);
        if (!out) throw mixtable::DataError("cannot write " + out_json);
        out << text << '\n';
        out.close();
        write_config_echo(fs::path(out_json), cfg, "evaluate");
    }
    return 0;
}

int command_overlap(const RunConfig& cfg, const std::vector<std::string>& sources,
                    const std::vector<std::string>& targets, double threshold,
                    const std::string& out_json, const std::string& matrix_csv) {
    auto provider = make_provider(cfg.provider);
    std::vector<mixtable::DatasetBundle> src, tgt;
    for (const auto& d : sources) src.push_back(mixtable::load_bundle_dir(d));
    for (const auto& d : targets) tgt.push_back(mixtable::load_bundle_dir(d));
    const mixtable::OverlapReport report = mixtable::feature_overlap(src, tgt, *provider, threshold);
    const std::string text = report.to_json().dump(2);
    std::cout << text << "\n";
    if (!out_json.empty()) {
        std::ofstream out(out_json);
        if (!out) throw mixtable::DataError("cannot write " + out_json);
        out << text << '\n';
        out.close();
        write_config_echo(fs::path(out_json), cfg, "overlap-report");
    }
    if (!matrix_csv.empty()) {
        mixtable::CsvTable table;
        table.header.push_back("feature");
        for (const auto& s : report.source_names) table.header.push_back(s);
        for (size_t t = 0; t < report.target_names.size(); ++t) {
            std::vector<std::string> row{report.target_names[t]};
            for (double c : report.cosine[t]) row.push_back(mixtable::format_double(c));
            table.rows.push_back(std::move(row));
        }
        std::ofstream out(matrix_csv, std::ios::binary);
        if (!out) throw mixtable::DataError("cannot write " + matrix_csv);
        out << mixtable::write_csv(table);
    }
    return 0;
}

int error_exit(int code, const char* kind, const std::string& message) {
    ordered_json j;
    j["error"] = {{"exit", code}, {"kind", kind}, {"message", message}};
    std::cerr << j.dump() << "\n";
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mixtable: cross-dataset mixed-type tabular diffusion"};
    app.require_subcommand(1);

    std::string config_path;
    app.add_option("--config", config_path, "JSON config file (flags override its values)");
    std::optional<uint64_t> seed_flag;
    app.add_option("--seed", seed_flag, "seed for every random choice in the run");

    // ingest
    auto* ingest = app.add_subcommand("ingest", "validate a schema+csv pair into a bundle directory");
    std::string in_schema, in_csv, in_out;
    ingest->add_option("--schema", in_schema, "schema.json")->required();
    ingest->add_option("--csv", in_csv, "data.csv")->required();
    ingest->add_option("--out", in_out, "output bundle directory")->required();

    // cache-embeddings
    auto* cachecmd = app.add_subcommand("cache-embeddings", "warm the embedding cache for bundles");
    std::vector<std::string> cache_bundles;
    std::string cache_path_flag, provider_flag, endpoint_flag;
    std::optional<int> d_f_flag;
    cachecmd->add_option("--bundle", cache_bundles, "bundle directory (repeatable)")->required();
    cachecmd->add_option("--cache", cache_path_flag, "embedding cache file");
    cachecmd->add_option("--provider", provider_flag, "hash | remote");
    cachecmd->add_option("--endpoint", endpoint_flag, "remote provider base URL");
    cachecmd->add_option("--d-f", d_f_flag, "embedding dimension");

    // train
    auto* traincmd = app.add_subcommand("train", "pretrain across bundle directories");
    std::vector<std::string> train_bundles;
    std::string train_out;
    std::optional<int> epochs_flag, batch_flag, dh_flag, layers_flag, heads_flag, ttrain_flag, tinfer_flag;
    std::optional<double> lr_flag;
    traincmd->add_option("--bundle", train_bundles, "bundle directory (repeatable)")->required();
    traincmd->add_option("--out", train_out, "output directory")->required();
    traincmd->add_option("--cache", cache_path_flag, "embedding cache file");
    traincmd->add_option("--provider", provider_flag, "hash | remote");
    traincmd->add_option("--endpoint", endpoint_flag, "remote provider base URL");
    traincmd->add_option("--d-f", d_f_flag, "embedding dimension");
    traincmd->add_option("--epochs", epochs_flag, "training epochs");
    traincmd->add_option("--lr0", lr_flag, "initial learning rate");
    traincmd->add_option("--batch-size", batch_flag, "batch size");
    traincmd->add_option("--d-h", dh_flag, "transformer hidden size");
    traincmd->add_option("--layers", layers_flag, "transformer layers");
    traincmd->add_option("--heads", heads_flag, "attention heads");
    traincmd->add_option("--t-train", ttrain_flag, "diffusion training steps");
    traincmd->add_option("--t-infer", tinfer_flag, "DDIM inference steps");

    // finetune
    auto* finecmd = app.add_subcommand("finetune", "finetune a checkpoint on one bundle");
    std::string fine_ckpt, fine_bundle, fine_out;
    int fine_n = 0;
    finecmd->add_option("--checkpoint", fine_ckpt, "pretrained checkpoint")->required();
    finecmd->add_option("--bundle", fine_bundle, "target bundle directory")->required();
    finecmd->add_option("--n-samples", fine_n, "rows of the target train split to use")->required();
    finecmd->add_option("--out", fine_out, "output directory")->required();
    finecmd->add_option("--cache", cache_path_flag, "embedding cache file");
    finecmd->add_option("--provider", provider_flag, "hash | remote");
    finecmd->add_option("--endpoint", endpoint_flag, "remote provider base URL");
    finecmd->add_option("--d-f", d_f_flag, "embedding dimension");
    finecmd->add_option("--epochs", epochs_flag, "finetuning epochs");
    finecmd->add_option("--lr0", lr_flag, "initial learning rate");
    finecmd->add_option("--batch-size", batch_flag, "batch size");

    // generate
    auto* gencmd = app.add_subcommand("generate", "sample rows for a schema from a checkpoint");
    std::string gen_ckpt, gen_schema, gen_stats, gen_out;
    int gen_n = 0;
    bool gen_argmax = false;
    gencmd->add_option("--checkpoint", gen_ckpt, "model checkpoint")->required();
    gencmd->add_option("--schema", gen_schema, "schema.json for the rows to generate")->required();
    gencmd->add_option("--stats", gen_stats, "stats.json (defaults to the schema's sibling)");
    gencmd->add_option("--n", gen_n, "number of rows")->required();
    gencmd->add_option("--out", gen_out, "output csv")->required();
    gencmd->add_flag("--argmax", gen_argmax, "pick most likely category instead of sampling");
    gencmd->add_option("--cache", cache_path_flag, "embedding cache file");
    gencmd->add_option("--provider", provider_flag, "hash | remote");
    gencmd->add_option("--endpoint", endpoint_flag, "remote provider base URL");
    gencmd->add_option("--d-f", d_f_flag, "embedding dimension");

    // evaluate
    auto* evalcmd = app.add_subcommand("evaluate", "generative-quality metrics: real csv vs synthetic csv");
    std::string eval_real, eval_synth, eval_schema, eval_label, eval_out;
    int eval_k = 5;
    evalcmd->add_option("--real", eval_real, "real test csv")->required();
    evalcmd->add_option("--synth", eval_synth, "synthetic csv")->required();
    evalcmd->add_option("--schema", eval_schema, "schema.json shared by both csvs")->required();
    evalcmd->add_option("--k", eval_k, "kNN neighbourhood size");
    evalcmd->add_option("--label", eval_label, "categorical label feature for downstream AUC");
    evalcmd->add_option("--out", eval_out, "write the metric report here too");

    // overlap-report
    auto* overlapcmd = app.add_subcommand("overlap-report", "feature-name embedding overlap");
    std::vector<std::string> overlap_sources, overlap_targets;
    std::string overlap_out, overlap_matrix;
    double overlap_threshold = 0.8;
    overlapcmd->add_option("--source", overlap_sources, "source bundle directory (repeatable)")->required();
    overlapcmd->add_option("--target", overlap_targets, "target bundle directory (repeatable)")->required();
    overlapcmd->add_option("--threshold", overlap_threshold, "similarity threshold");
    overlapcmd->add_option("--out", overlap_out, "write the report here");
    overlapcmd->add_option("--matrix-csv", overlap_matrix, "dump the cosine matrix as csv");
    overlapcmd->add_option("--provider", provider_flag, "hash | remote");
    overlapcmd->add_option("--endpoint", endpoint_flag, "remote provider base URL");
    overlapcmd->add_option("--d-f", d_f_flag, "embedding dimension");
    overlapcmd->add_option("--cache", cache_path_flag, "embedding cache file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) return app.exit(e);  // --help
        return error_exit(2, "config", e.what());
    }

    try {
        RunConfig cfg = load_run_config(config_path);
        if (seed_flag) cfg.seed = *seed_flag;
        if (!cache_path_flag.empty()) cfg.provider.cache_path = cache_path_flag;
        if (!provider_flag.empty()) cfg.provider.kind = provider_flag;
        if (!endpoint_flag.empty()) cfg.provider.endpoint = endpoint_flag;
        if (d_f_flag) {
            cfg.provider.d_f = *d_f_flag;
            cfg.model.d_f = *d_f_flag;
        }
        cfg.provider.d_f = cfg.model.d_f;  // the model consumes these embeddings
        if (epochs_flag) cfg.train.epochs = *epochs_flag;
        if (lr_flag) cfg.train.lr0 = *lr_flag;
        if (batch_flag) cfg.train.batch_size = *batch_flag;
        if (dh_flag) cfg.model.d_h = *dh_flag;
        if (layers_flag) cfg.model.n_layers = *layers_flag;
        if (heads_flag) cfg.model.n_heads = *heads_flag;
        if (ttrain_flag) cfg.model.t_train = *ttrain_flag;
        if (tinfer_flag) cfg.model.t_infer = *tinfer_flag;

        if (*ingest) return command_ingest(cfg, in_schema, in_csv, in_out);
        if (*cachecmd) return command_cache_embeddings(cfg, cache_bundles);
        if (*traincmd) return command_train(cfg, train_bundles, train_out);
        if (*finecmd) return command_finetune(cfg, fine_ckpt, fine_bundle, fine_n, fine_out);
        if (*gencmd)
            return command_generate(cfg, gen_ckpt, gen_schema, gen_stats, gen_n, gen_out, gen_argmax);
        if (*evalcmd)
            return command_evaluate(cfg, eval_real, eval_synth, eval_schema, eval_k, eval_label, eval_out);
        if (*overlapcmd)
            return command_overlap(cfg, overlap_sources, overlap_targets, overlap_threshold,
                                   overlap_out, overlap_matrix);
        return error_exit(2, "config", "no command given");
    } catch (const mixtable::ConfigError& e) {
        return error_exit(2, "config", e.what());
    } catch (const mixtable::DataError& e) {
        return error_exit(3, "data", e.what());
    } catch (const mixtable::ProviderError& e) {
        return error_exit(4, "provider", e.what());
    } catch (const mixtable::NumericError& e) {
        return error_exit(5, "numeric", e.what());
    } catch (const std::exception& e) {
        return error_exit(3, "data", e.what());
    }
}
