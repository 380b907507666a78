#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mixtable/csv.hpp"
#include "mixtable/dataset.hpp"
#include "mixtable/embedding.hpp"
#include "mixtable/model.hpp"
#include "mixtable/optim.hpp"

namespace mixtable {

struct TrainConfig {
    int epochs = 500;
    double lr0 = 5e-5;
    int batch_size = 32;
    uint64_t seed = 0;
    int eval_every = 1;
    double grad_clip = 1.0;
    std::string lr_schedule = "cosine";
    double train_fraction = 0.8;
    double val_fraction = 0.1;
    double test_fraction = 0.1;

    SplitSpec split_spec() const { return SplitSpec{train_fraction, val_fraction, test_fraction, seed}; }

    void validate() const {
        if (epochs <= 0 || batch_size <= 0 || eval_every <= 0)
            throw ConfigError("train config values must be positive");
        if (lr0 < 0) throw ConfigError("lr0 must be nonnegative");
        if (grad_clip <= 0) throw ConfigError("grad_clip must be positive");
        if (lr_schedule != "cosine") throw ConfigError(concat("unknown lr schedule '", lr_schedule, "'"));
        split_spec().validate();
    }

    nlohmann::ordered_json to_json() const {
        return {{"epochs", epochs},     {"lr0", lr0},
                {"batch_size", batch_size}, {"seed", seed},
                {"eval_every", eval_every}, {"grad_clip", grad_clip},
                {"schedule", lr_schedule},  {"train_fraction", train_fraction},
                {"val_fraction", val_fraction}, {"test_fraction", test_fraction}};
    }

    static TrainConfig from_json(const nlohmann::json& j) {
        TrainConfig c;
        c.epochs = j.value("epochs", c.epochs);
        c.lr0 = j.value("lr0", c.lr0);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.lr_schedule = j.value("schedule", c.lr_schedule);
        c.train_fraction = j.value("train_fraction", c.train_fraction);
        c.val_fraction = j.value("val_fraction", c.val_fraction);
        c.test_fraction = j.value("test_fraction", c.test_fraction);
        c.validate();
        return c;
    }
};

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

template <typename Real>
struct TrainResult {
    TableDiffusionModel<Real> model;  // best-validation parameters
    std::vector<EpochRecord> curve;
    int best_epoch = 0;
};

inline void write_curve_csv(const std::filesystem::path& path, const std::vector<EpochRecord>& curve) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError(concat("cannot write loss curve: ", path.string()));
    out << "epoch,train_loss,val_loss,lr\n";
    for (const auto& r : curve)
        out << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.val_loss)
            << ',' << format_double(r.lr) << '\n';
}

namespace detail {

// normalized bundles + contexts + splits + weights, ready to batch from
template <typename Real>
struct TrainingSetup {
    std::vector<DatasetBundle> normalized;
    std::vector<DatasetContext> contexts;
    std::vector<SplitIndices> splits;
    std::vector<double> cumulative_pick;  // dataset choice CDF, proportional to n_k * w_k
    size_t total_train_rows = 0;
};

template <typename Real>
TrainingSetup<Real> prepare_training(const MetaDataset& meta, const TrainConfig& tcfg,
                                     EmbeddingProvider& provider,
                                     const std::vector<std::vector<size_t>>* train_override = nullptr) {
    meta.validate_ids();
    if (meta.datasets.empty()) throw DataError("training needs at least one dataset");
    TrainingSetup<Real> setup;
    std::vector<size_t> train_sizes;
    for (size_t k = 0; k < meta.datasets.size(); ++k) {
        const DatasetBundle& raw = meta.datasets[k];
        raw.validate();
        SplitIndices split = split_rows(raw, tcfg.split_spec());
        if (train_override) split.train = (*train_override)[k];
        setup.normalized.push_back(fit_normalization(raw, split.train));
        setup.contexts.push_back(DatasetContext::from_bundle(setup.normalized.back(), provider));
        train_sizes.push_back(split.train.size());
        setup.total_train_rows += split.train.size();
        setup.splits.push_back(std::move(split));
    }
    // dataset k is drawn with probability proportional to n_k * w_k = sqrt(n_k)
    const std::vector<double> weights = weights_for_sizes(train_sizes);
    double cum = 0.0;
    for (size_t k = 0; k < train_sizes.size(); ++k) {
        setup.contexts[k].weight = weights[k];
        cum += static_cast<double>(train_sizes[k]) * weights[k];
        setup.cumulative_pick.push_back(cum);
    }
    for (auto& c : setup.cumulative_pick) c /= cum;
    return setup;
}

template <typename Real>
double validation_loss(const TableDiffusionModel<Real>& model, const TrainingSetup<Real>& setup,
                       const TrainConfig& tcfg) {
    double loss_sum = 0.0;
    size_t row_count = 0;
    for (size_t k = 0; k < setup.normalized.size(); ++k) {
        const auto& val_rows = setup.splits[k].val;
        const int bs = tcfg.batch_size;
        for (size_t start = 0, bi = 0; start < val_rows.size(); start += bs, ++bi) {
            const size_t end = std::min(val_rows.size(), start + bs);
            std::vector<size_t> rows(val_rows.begin() + start, val_rows.begin() + end);
            // fixed noise and timestep per (dataset, batch) so the validation
            // loss is a deterministic function of the parameters
            CounterRng rng(mix_u64(mix_u64(tcfg.seed, fnv1a64("validation")),
                                   mix_u64(static_cast<uint64_t>(k), bi)));
            const int t = static_cast<int>(rng.next_below(model.config().t_train));
            RowBatch batch = make_batch(setup.normalized[k], setup.contexts[k], model.schedule(),
                                        rows, t, rng);
            loss_sum += model.loss(batch) / setup.contexts[k].weight * rows.size();
            row_count += rows.size();
        }
    }
    return row_count ? loss_sum / row_count : 0.0;
}

template <typename Real>
TrainResult<Real> run_training(TableDiffusionModel<Real> model, const TrainingSetup<Real>& setup,
                               const TrainConfig& tcfg) {
    const int steps_per_epoch = static_cast<int>(
        (setup.total_train_rows + tcfg.batch_size - 1) / tcfg.batch_size);
    const int64_t total_steps = static_cast<int64_t>(steps_per_epoch) * tcfg.epochs;

    AdamState<Real> adam;
    CounterRng rng(mix_u64(tcfg.seed, fnv1a64("train")));
    TrainResult<Real> result{std::move(model), {}, 0};
    ParameterStore<Real> best_params = result.model.params();
    double best_val = std::numeric_limits<double>::infinity();

    int64_t global_step = 0;
    for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
        double epoch_loss = 0.0;
        double lr = 0.0;
        for (int s = 0; s < steps_per_epoch; ++s, ++global_step) {
            lr = cosine_lr(global_step, total_steps, tcfg.lr0);
            // dataset choice ~ sqrt(n_k), rows uniform within the dataset
            const double u = rng.next_uniform();
            size_t k = 0;
            while (k + 1 < setup.cumulative_pick.size() && u >= setup.cumulative_pick[k]) ++k;
            const auto& train_rows = setup.splits[k].train;
            std::vector<size_t> rows(tcfg.batch_size);
            for (auto& r : rows) r = train_rows[rng.next_below(train_rows.size())];
            // timesteps stratified across the epoch: marginally uniform over
            // [0, t_train), but every epoch covers the range evenly, which
            // keeps per-epoch loss means comparable
            const int t_train = result.model.config().t_train;
            const double stratum = (static_cast<double>(s) + rng.next_uniform()) / steps_per_epoch;
            const int t = std::min(t_train - 1, static_cast<int>(stratum * t_train));
            RowBatch batch = make_batch(setup.normalized[k], setup.contexts[k],
                                        result.model.schedule(), rows, t, rng);

            Graph<Real> g(true);
            auto fwd = result.model.build_forward(g, batch);
            const NodeId loss_node = result.model.build_loss(g, batch, fwd);
            const double loss = static_cast<double>(g.value(loss_node).data[0]);
            if (!std::isfinite(loss))
                throw NumericError(concat("non-finite loss at batch ", global_step,
                                          " (lr = ", lr, ", dataset = ", setup.contexts[k].id, ")"));
            epoch_loss += loss;
            g.backward(loss_node);
            const GradView<Real> grads = gradients_of(fwd.bound);
            const double gnorm = global_grad_norm(grads);
            const double scale = gnorm > tcfg.grad_clip ? tcfg.grad_clip / gnorm : 1.0;
            if (lr > 0.0) adam_step(result.model.params(), grads, adam, lr, 0.9, 0.999, 1e-8, scale);
        }
        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = epoch_loss / steps_per_epoch;
        rec.lr = lr;
        rec.val_loss = validation_loss(result.model, setup, tcfg);
        result.curve.push_back(rec);
        if (rec.val_loss < best_val) {
            best_val = rec.val_loss;
            best_params = result.model.params();
            result.best_epoch = epoch;
        }
    }
    result.model.params() = std::move(best_params);
    return result;
}

}  // namespace detail

// Cross-dataset pretraining: splits and normalizes each bundle, weights
// datasets by 1/sqrt(n), optimizes the combined loss, keeps the
// best-validation parameters.
template <typename Real = float>
TrainResult<Real> train(const MetaDataset& meta, const ModelConfig& mcfg, const TrainConfig& tcfg,
                        EmbeddingProvider& provider) {
    tcfg.validate();
    mcfg.validate();
    auto setup = detail::prepare_training<Real>(meta, tcfg, provider);
    TableDiffusionModel<Real> model(mcfg, tcfg.seed);
    return detail::run_training(std::move(model), setup, tcfg);
}

// Few-shot finetuning: continues optimization of an existing checkpoint on a
// reduced slice (n_samples rows) of the target's train split.
template <typename Real = float>
TrainResult<Real> finetune(const TableDiffusionModel<Real>& checkpoint, const DatasetBundle& target,
                           int n_samples, const TrainConfig& tcfg, EmbeddingProvider& provider) {
    tcfg.validate();
    if (n_samples <= 0) throw ConfigError(concat("finetune: n_samples = ", n_samples, " must be positive"));
    MetaDataset meta;
    meta.datasets.push_back(target);
    SplitIndices split = split_rows(target, tcfg.split_spec());
    if (static_cast<size_t>(n_samples) > split.train.size())
        throw DataError(concat("finetune: n_samples = ", n_samples, " exceeds the ", split.train.size(),
                               "-row train split"));
    std::vector<std::vector<size_t>> train_override{
        std::vector<size_t>(split.train.begin(), split.train.begin() + n_samples)};
    auto setup = detail::prepare_training<Real>(meta, tcfg, provider, &train_override);
    return detail::run_training(TableDiffusionModel<Real>(checkpoint), setup, tcfg);
}

// Zero-shot generation for an unseen schema: metadata, numeric stats and
// category sets come from the caller, sampling is delegated to the model.
template <typename Real = float>
DatasetBundle zero_shot_generate(const TableDiffusionModel<Real>& model, const std::string& id,
                                 const std::string& description,
                                 const std::vector<FeatureSchema>& schema, int n, uint64_t seed,
                                 EmbeddingProvider& provider) {
    DatasetContext ctx = DatasetContext::from_schema(id, description, schema, provider);
    ctx.require_sampling_info();
    return model.sample_rows(ctx, n, seed);
}

}  // namespace mixtable
