#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "badres/checkpoint.hpp"
#include "badres/dataset.hpp"
#include "badres/errors.hpp"
#include "badres/eval.hpp"
#include "badres/model.hpp"
#include "badres/poison.hpp"
#include "badres/train.hpp"

// Experiment orchestration: one JSON config document describes dataset,
// model, poisoning, training, defenses and an optional sweep; the runner
// executes poison -> train -> evaluate (-> defenses) and writes every
// artifact, stamped with the config hash, under the output directory.

namespace badres {

constexpr const char* kCodeVersion = "0.1.0";
constexpr const char* kOutputRootEnv = "BADRES_OUTPUT_ROOT";

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config structures (JSON-facing).

enum class DatasetSource { synthetic, mnist_idx };

struct SyntheticSpec {
    std::size_t classes = 10;
    std::size_t train_per_class = 1000;
    std::size_t test_per_class = 200;
    std::size_t image_size = 28;
    std::int64_t seed = -1;  // -1: derive from the global seed
};

struct MnistPaths {
    std::string train_images, train_labels, test_images, test_labels;
};

struct DatasetConfig {
    DatasetSource source = DatasetSource::synthetic;
    SyntheticSpec synthetic;
    MnistPaths mnist;
    std::size_t train_subset = 0;  // 0 = use everything
    std::size_t test_subset = 0;
    std::int64_t subset_seed = -1;
};

struct TriggerConfig {
    TriggerMode mode = TriggerMode::paste;
    std::size_t size = 4;
    std::string pattern = "builtin:1";  // builtin:1..4, ignored when inline set
    std::vector<std::vector<float>> inline_pattern;
    float lambda = 0.05f;
    std::string placement = "bottom-right";
    int offset_x = 0;
    int offset_y = 0;
};

struct StripSettings {
    bool enabled = false;
    std::size_t n_overlays = 100;
    float blend = 0.5f;
    std::size_t n_inputs = 200;
    double threshold_percentile = -1.0;
    std::int64_t seed = -1;
};

struct FinetuneSettings {
    bool enabled = false;
    std::size_t epochs = 2;
    float learning_rate = 1e-4f;
    std::size_t batch_size = 32;
    double subset_fraction = 0.2;
    std::int64_t seed = -1;
};

struct SweepSpec {
    std::string parameter;  // dotted path into the config, e.g. poison.rate
    std::vector<json> values;
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::int64_t model_seed = -1;
    std::string run_id;  // default: run-<hash prefix>
    std::string output_dir = "runs";
    DatasetConfig dataset;
    ModelConfig model;
    float poison_rate = 0.1f;
    int target_label = 0;
    std::int64_t poison_seed = -1;
    TriggerConfig trigger;
    float learning_rate = 1e-4f;
    std::size_t batch_size = 32;
    std::size_t epochs = 5;
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_epsilon = 1e-8f;
    std::int64_t train_seed = -1;
    bool shuffle = true;
    StripSettings strip;
    FinetuneSettings finetune;
    std::optional<SweepSpec> sweep;
};

// Sub-seed derivation tags.
namespace seed_tag {
constexpr std::uint64_t model = 0, dataset = 1, poison = 2, train = 3, strip = 4,
                        finetune = 5, subset = 6, strip_inputs = 7;
}

inline std::uint64_t resolve_seed(std::int64_t v, std::uint64_t global, std::uint64_t tag) {
    return v >= 0 ? static_cast<std::uint64_t>(v) : rng::mix_seed(global, tag);
}

// ---------------------------------------------------------------------------
// JSON <-> config

inline json experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["model_seed"] = c.model_seed;
    j["run_id"] = c.run_id;
    j["output_dir"] = c.output_dir;
    j["dataset"] = {
        {"source", c.dataset.source == DatasetSource::synthetic ? "synthetic" : "mnist_idx"},
        {"synthetic",
         {{"classes", c.dataset.synthetic.classes},
          {"train_per_class", c.dataset.synthetic.train_per_class},
          {"test_per_class", c.dataset.synthetic.test_per_class},
          {"image_size", c.dataset.synthetic.image_size},
          {"seed", c.dataset.synthetic.seed}}},
        {"mnist_idx",
         {{"train_images", c.dataset.mnist.train_images},
          {"train_labels", c.dataset.mnist.train_labels},
          {"test_images", c.dataset.mnist.test_images},
          {"test_labels", c.dataset.mnist.test_labels}}},
        {"train_subset", c.dataset.train_subset},
        {"test_subset", c.dataset.test_subset},
        {"subset_seed", c.dataset.subset_seed}};
    j["model"] = model_config_to_json(c.model);
    json trig = {{"mode", trigger_mode_name(c.trigger.mode)},
                 {"size", c.trigger.size},
                 {"pattern", c.trigger.pattern},
                 {"lambda", c.trigger.lambda},
                 {"placement", c.trigger.placement},
                 {"offset_x", c.trigger.offset_x},
                 {"offset_y", c.trigger.offset_y}};
    if (!c.trigger.inline_pattern.empty()) trig["inline_pattern"] = c.trigger.inline_pattern;
    j["poison"] = {{"rate", c.poison_rate},
                   {"target_label", c.target_label},
                   {"seed", c.poison_seed},
                   {"trigger", std::move(trig)}};
    j["train"] = {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
                  {"epochs", c.epochs},               {"adam_beta1", c.adam_beta1},
                  {"adam_beta2", c.adam_beta2},       {"adam_epsilon", c.adam_epsilon},
                  {"seed", c.train_seed},             {"shuffle", c.shuffle}};
    j["defense"] = {{"strip",
                     {{"enabled", c.strip.enabled},
                      {"n_overlays", c.strip.n_overlays},
                      {"blend", c.strip.blend},
                      {"n_inputs", c.strip.n_inputs},
                      {"threshold_percentile", c.strip.threshold_percentile},
                      {"seed", c.strip.seed}}},
                    {"finetune",
                     {{"enabled", c.finetune.enabled},
                      {"epochs", c.finetune.epochs},
                      {"learning_rate", c.finetune.learning_rate},
                      {"batch_size", c.finetune.batch_size},
                      {"subset_fraction", c.finetune.subset_fraction},
                      {"seed", c.finetune.seed}}}};
    if (c.sweep) j["sweep"] = {{"parameter", c.sweep->parameter}, {"values", c.sweep->values}};
    return j;
}

inline ExperimentConfig parse_experiment_config(const json& j) {
    ExperimentConfig c;
    try {
        c.seed = j.value("seed", std::uint64_t{42});
        c.model_seed = j.value("model_seed", std::int64_t{-1});
        c.run_id = j.value("run_id", std::string{});
        c.output_dir = j.value("output_dir", std::string{"runs"});

        if (j.contains("dataset")) {
            const json& d = j.at("dataset");
            const std::string src = d.value("source", std::string{"synthetic"});
            if (src == "synthetic")
                c.dataset.source = DatasetSource::synthetic;
            else if (src == "mnist_idx")
                c.dataset.source = DatasetSource::mnist_idx;
            else
                throw config_error("dataset.source must be synthetic or mnist_idx, got '" +
                                   src + "'");
            if (d.contains("synthetic")) {
                const json& s = d.at("synthetic");
                c.dataset.synthetic.classes = s.value("classes", std::size_t{10});
                c.dataset.synthetic.train_per_class = s.value("train_per_class", std::size_t{1000});
                c.dataset.synthetic.test_per_class = s.value("test_per_class", std::size_t{200});
                c.dataset.synthetic.image_size = s.value("image_size", std::size_t{28});
                c.dataset.synthetic.seed = s.value("seed", std::int64_t{-1});
            }
            if (d.contains("mnist_idx")) {
                const json& m = d.at("mnist_idx");
                c.dataset.mnist.train_images = m.value("train_images", std::string{});
                c.dataset.mnist.train_labels = m.value("train_labels", std::string{});
                c.dataset.mnist.test_images = m.value("test_images", std::string{});
                c.dataset.mnist.test_labels = m.value("test_labels", std::string{});
            }
            c.dataset.train_subset = d.value("train_subset", std::size_t{0});
            c.dataset.test_subset = d.value("test_subset", std::size_t{0});
            c.dataset.subset_seed = d.value("subset_seed", std::int64_t{-1});
        }
        if (c.dataset.source == DatasetSource::mnist_idx &&
            (c.dataset.mnist.train_images.empty() || c.dataset.mnist.train_labels.empty() ||
             c.dataset.mnist.test_images.empty() || c.dataset.mnist.test_labels.empty()))
            throw config_error("dataset.mnist_idx requires all four file paths");

        if (j.contains("model")) c.model = model_config_from_json(j.at("model"));

        if (j.contains("poison")) {
            const json& p = j.at("poison");
            c.poison_rate = p.value("rate", 0.1f);
            c.target_label = p.value("target_label", 0);
            c.poison_seed = p.value("seed", std::int64_t{-1});
            if (p.contains("trigger")) {
                const json& t = p.at("trigger");
                c.trigger.mode = trigger_mode_from_string(t.value("mode", std::string{"paste"}));
                c.trigger.size = t.value("size", std::size_t{4});
                c.trigger.pattern = t.value("pattern", std::string{"builtin:1"});
                c.trigger.lambda = t.value("lambda", 0.05f);
                c.trigger.placement = t.value("placement", std::string{"bottom-right"});
                c.trigger.offset_x = t.value("offset_x", 0);
                c.trigger.offset_y = t.value("offset_y", 0);
                if (t.contains("inline_pattern"))
                    c.trigger.inline_pattern =
                        t.at("inline_pattern").get<std::vector<std::vector<float>>>();
            }
        }

        if (j.contains("train")) {
            const json& t = j.at("train");
            c.learning_rate = t.value("learning_rate", 1e-4f);
            c.batch_size = t.value("batch_size", std::size_t{32});
            c.epochs = t.value("epochs", std::size_t{5});
            c.adam_beta1 = t.value("adam_beta1", 0.9f);
            c.adam_beta2 = t.value("adam_beta2", 0.999f);
            c.adam_epsilon = t.value("adam_epsilon", 1e-8f);
            c.train_seed = t.value("seed", std::int64_t{-1});
            c.shuffle = t.value("shuffle", true);
        }

        if (j.contains("defense")) {
            const json& d = j.at("defense");
            if (d.contains("strip")) {
                const json& s = d.at("strip");
                c.strip.enabled = s.value("enabled", false);
                c.strip.n_overlays = s.value("n_overlays", std::size_t{100});
                c.strip.blend = s.value("blend", 0.5f);
                c.strip.n_inputs = s.value("n_inputs", std::size_t{200});
                c.strip.threshold_percentile = s.value("threshold_percentile", -1.0);
                c.strip.seed = s.value("seed", std::int64_t{-1});
            }
            if (d.contains("finetune")) {
                const json& f = d.at("finetune");
                c.finetune.enabled = f.value("enabled", false);
                c.finetune.epochs = f.value("epochs", std::size_t{2});
                c.finetune.learning_rate = f.value("learning_rate", 1e-4f);
                c.finetune.batch_size = f.value("batch_size", std::size_t{32});
                c.finetune.subset_fraction = f.value("subset_fraction", 0.2);
                c.finetune.seed = f.value("seed", std::int64_t{-1});
            }
        }

        if (j.contains("sweep") && !j.at("sweep").is_null()) {
            SweepSpec s;
            s.parameter = j.at("sweep").value("parameter", std::string{});
            if (j.at("sweep").contains("values"))
                for (const auto& v : j.at("sweep").at("values")) s.values.push_back(v);
            c.sweep = std::move(s);
        }
    } catch (const json::exception& e) {
        throw config_error(std::string("config json: ") + e.what());
    }
    return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw config_error("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw config_error("config file " + path + ": " + e.what());
    }
    return parse_experiment_config(j);
}

// ---------------------------------------------------------------------------
// Validation, hashing, resolution.

inline void validate_experiment_config(const ExperimentConfig& c) {
    c.model.validate();
    if (c.poison_rate < 0.0f || c.poison_rate > 1.0f)
        throw config_error("poison.rate " + std::to_string(c.poison_rate) + " outside [0, 1]");
    if (c.target_label < 0 || static_cast<std::size_t>(c.target_label) >= c.model.num_classes)
        throw config_error("poison.target_label " + std::to_string(c.target_label) +
                           " outside [0, " + std::to_string(c.model.num_classes) + ")");
    if (!(c.learning_rate > 0.0f)) throw config_error("train.learning_rate must be positive");
    if (c.batch_size < 1) throw config_error("train.batch_size must be >= 1");
    if (c.epochs < 1) throw config_error("train.epochs must be >= 1");
    if (c.strip.enabled && c.strip.n_overlays == 0)
        throw config_error("defense.strip.n_overlays must be >= 1");
    if (c.finetune.enabled &&
        !(c.finetune.subset_fraction > 0.0 && c.finetune.subset_fraction <= 1.0))
        throw config_error("defense.finetune.subset_fraction outside (0, 1]");
    if (c.dataset.source == DatasetSource::synthetic) {
        if (c.dataset.synthetic.image_size != c.model.image_size)
            throw config_error("dataset image_size " +
                               std::to_string(c.dataset.synthetic.image_size) +
                               " does not match model image_size " +
                               std::to_string(c.model.image_size));
        if (c.dataset.synthetic.classes != c.model.num_classes)
            throw config_error("dataset classes != model num_classes");
    }
}

inline std::string fnv1a_hex(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// Hash over the science fields only: output location and run naming do not
// change what the experiment computes.
inline std::string config_hash(const ExperimentConfig& c) {
    json j = experiment_config_to_json(c);
    j.erase("run_id");
    j.erase("output_dir");
    j.erase("sweep");
    return fnv1a_hex(j.dump());
}

inline std::string resolved_run_id(const ExperimentConfig& c) {
    if (!c.run_id.empty()) return c.run_id;
    return "run-" + config_hash(c).substr(0, 12);
}

inline std::filesystem::path resolve_output_dir(const ExperimentConfig& c) {
    std::filesystem::path dir = c.output_dir;
    if (dir.is_relative()) {
        if (const char* root = std::getenv(kOutputRootEnv)) dir = std::filesystem::path(root) / dir;
    }
    return dir / resolved_run_id(c);
}

inline TrainConfig resolved_train_config(const ExperimentConfig& c) {
    TrainConfig t;
    t.learning_rate = c.learning_rate;
    t.batch_size = c.batch_size;
    t.epochs = c.epochs;
    t.adam_beta1 = c.adam_beta1;
    t.adam_beta2 = c.adam_beta2;
    t.adam_epsilon = c.adam_epsilon;
    t.seed = resolve_seed(c.train_seed, c.seed, seed_tag::train);
    t.shuffle = c.shuffle;
    return t;
}

inline TriggerSpec build_trigger_spec(const TriggerConfig& t, std::size_t image_size) {
    TriggerSpec spec;
    spec.mode = t.mode;
    spec.lambda = t.lambda;
    spec.corner = corner_from_string(t.placement);
    spec.offset_x = t.offset_x;
    spec.offset_y = t.offset_y;
    if (!t.inline_pattern.empty()) {
        spec.pattern_h = t.inline_pattern.size();
        spec.pattern_w = t.inline_pattern[0].size();
        for (const auto& row : t.inline_pattern) {
            if (row.size() != spec.pattern_w)
                throw config_error("trigger: inline pattern rows have unequal lengths");
            for (float v : row) spec.pattern.push_back(v);
        }
    } else {
        const std::string& p = t.pattern;
        if (p.rfind("builtin:", 0) != 0)
            throw config_error("trigger.pattern must be builtin:1..4 or an inline matrix, got '" +
                               p + "'");
        const int id = std::atoi(p.c_str() + 8);
        TriggerSpec b = make_builtin_trigger(id, t.mode, t.size, image_size, t.lambda,
                                             spec.corner, t.offset_x, t.offset_y);
        return b;
    }
    return spec;
}

inline PoisonConfig build_poison_config(const ExperimentConfig& c) {
    PoisonConfig pc;
    pc.rate = c.poison_rate;
    pc.target_label = c.target_label;
    pc.trigger = build_trigger_spec(c.trigger, c.model.image_size);
    pc.seed = resolve_seed(c.poison_seed, c.seed, seed_tag::poison);
    return pc;
}

// ---------------------------------------------------------------------------
// Dataset ingestion.

struct PreparedData {
    LabeledDataset train;  // clean
    LabeledDataset test;   // clean
};

inline PreparedData ingest_dataset(const ExperimentConfig& c) {
    PreparedData d;
    if (c.dataset.source == DatasetSource::synthetic) {
        const std::uint64_t base =
            resolve_seed(c.dataset.synthetic.seed, c.seed, seed_tag::dataset);
        d.train = generate_synthetic_dataset(c.dataset.synthetic.classes,
                                             c.dataset.synthetic.train_per_class,
                                             c.dataset.synthetic.image_size, base);
        d.test = generate_synthetic_dataset(c.dataset.synthetic.classes,
                                            c.dataset.synthetic.test_per_class,
                                            c.dataset.synthetic.image_size,
                                            rng::mix_seed(base, 0x7e57));
    } else {
        d.train = load_mnist_idx(c.dataset.mnist.train_images, c.dataset.mnist.train_labels);
        d.test = load_mnist_idx(c.dataset.mnist.test_images, c.dataset.mnist.test_labels);
    }
    const std::uint64_t subset_seed = resolve_seed(c.dataset.subset_seed, c.seed, seed_tag::subset);
    if (c.dataset.train_subset > 0 && c.dataset.train_subset < d.train.count)
        d.train = subset_stratified(d.train, c.dataset.train_subset, subset_seed);
    if (c.dataset.test_subset > 0 && c.dataset.test_subset < d.test.count)
        d.test = subset_stratified(d.test, c.dataset.test_subset, rng::mix_seed(subset_seed, 1));
    return d;
}

// ---------------------------------------------------------------------------
// Artifact writing helpers.

inline void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw io_error("cannot open " + path.string() + " for writing");
    f << content;
    if (!f) throw io_error("write failed for " + path.string());
}

inline std::string csv_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::vector<std::string> metrics_csv_columns() {
    return {"run_id",          "config_hash",     "dataset_source",
            "train_size",      "test_size",       "block_mode",
            "alpha",           "beta",            "poisoned_layer_index",
            "num_layers",      "poison_rate",     "target_label",
            "trigger_mode",    "trigger_pattern", "trigger_lambda",
            "epochs",          "learning_rate",   "batch_size",
            "seed",            "asr",             "ba",
            "n_poisoned_eval", "n_clean_eval",    "strip_mean_entropy_poisoned",
            "strip_mean_entropy_clean", "finetune_asr_before", "finetune_asr_after",
            "finetune_ba_before",       "finetune_ba_after",   "code_version"};
}

inline std::string metrics_csv_header() {
    std::string out;
    const auto cols = metrics_csv_columns();
    for (std::size_t i = 0; i < cols.size(); ++i) {
        if (i) out += ",";
        out += cols[i];
    }
    return out + "\n";
}

inline std::string metrics_csv_row(const ExperimentConfig& c, const json& metrics) {
    auto opt = [&](const char* outer, const char* key) -> std::string {
        if (!metrics.contains(outer) || !metrics.at(outer).contains(key)) return "";
        return csv_double(metrics.at(outer).at(key).get<double>());
    };
    std::vector<std::string> cells = {
        metrics.at("run_id").get<std::string>(),
        metrics.at("config_hash").get<std::string>(),
        c.dataset.source == DatasetSource::synthetic ? "synthetic" : "mnist_idx",
        std::to_string(metrics.at("dataset").at("train_size").get<std::size_t>()),
        std::to_string(metrics.at("dataset").at("test_size").get<std::size_t>()),
        block_mode_name(c.model.block_mode),
        csv_double(c.model.alpha),
        csv_double(c.model.beta),
        std::to_string(c.model.poisoned_layer_index),
        std::to_string(c.model.num_layers),
        csv_double(c.poison_rate),
        std::to_string(c.target_label),
        trigger_mode_name(c.trigger.mode),
        c.trigger.inline_pattern.empty() ? c.trigger.pattern : "inline",
        csv_double(c.trigger.lambda),
        std::to_string(c.epochs),
        csv_double(c.learning_rate),
        std::to_string(c.batch_size),
        std::to_string(c.seed),
        csv_double(metrics.at("asr").get<double>()),
        csv_double(metrics.at("ba").get<double>()),
        std::to_string(metrics.at("n_poisoned_eval").get<std::size_t>()),
        std::to_string(metrics.at("n_clean_eval").get<std::size_t>()),
        opt("strip", "mean_entropy_poisoned"),
        opt("strip", "mean_entropy_clean"),
        opt("finetune", "asr_before"),
        opt("finetune", "asr_after"),
        opt("finetune", "ba_before"),
        opt("finetune", "ba_after"),
        kCodeVersion};
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i) out += ",";
        out += cells[i];
    }
    return out + "\n";
}

inline void write_predictions_csv(const std::filesystem::path& path,
                                  const LabeledDataset& data, const std::vector<int>& pred) {
    std::ostringstream os;
    os << "index,origin_label,label,predicted,poisoned\n";
    for (std::size_t i = 0; i < data.count; ++i)
        os << i << "," << data.origin_labels[i] << "," << data.labels[i] << "," << pred[i]
           << "," << int(data.poisoned_mask[i]) << "\n";
    write_text_file(path, os.str());
}

inline std::string iso8601_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::ostringstream os;
    os << std::put_time(std::gmtime(&t), "%Y-%m-%dT%H:%M:%SZ");
    return os.str();
}

// ---------------------------------------------------------------------------
// The runner.

struct ExperimentResult {
    RunMetrics metrics;
    json metrics_json;
    std::filesystem::path dir;
};

namespace detail {

template <typename Fn>
auto run_stage(const char* stage, Fn&& fn) {
    try {
        return fn();
    } catch (const config_error& e) {
        throw config_error(std::string("stage ") + stage + ": " + e.what());
    } catch (const usage_error& e) {
        throw usage_error(std::string("stage ") + stage + ": " + e.what());
    } catch (const ingestion_error& e) {
        throw ingestion_error(std::string("stage ") + stage + ": " + e.what());
    } catch (const train_error& e) {
        throw train_error(std::string("stage ") + stage + ": " + e.what());
    } catch (const numeric_error& e) {
        throw numeric_error(std::string("stage ") + stage + ": " + e.what());
    } catch (const io_error& e) {
        throw io_error(std::string("stage ") + stage + ": " + e.what());
    }
}

}  // namespace detail

inline ExperimentResult run_experiment(const ExperimentConfig& cfg,
                                       const std::filesystem::path& out_dir) {
    validate_experiment_config(cfg);
    const std::string hash = config_hash(cfg);
    const std::string run_id = resolved_run_id(cfg);
    const std::string started_at = iso8601_now();
    std::filesystem::create_directories(out_dir);

    {
        json echo;
        echo["config"] = experiment_config_to_json(cfg);
        echo["config_hash"] = hash;
        echo["code_version"] = kCodeVersion;
        write_text_file(out_dir / "config.json", echo.dump(2) + "\n");
    }

    PreparedData data = detail::run_stage("ingest", [&] { return ingest_dataset(cfg); });

    const PoisonConfig pc = build_poison_config(cfg);
    PoisonSummary poison_summary;
    LabeledDataset poisoned_train = detail::run_stage("poison", [&] {
        return poison_dataset(data.train, pc, &poison_summary);
    });
    LabeledDataset poisoned_test =
        detail::run_stage("poison", [&] { return make_poisoned_testset(data.test, pc); });

    ModelParams params = build_model(cfg.model, resolve_seed(cfg.model_seed, cfg.seed,
                                                             seed_tag::model));
    const TrainConfig tc = resolved_train_config(cfg);
    TrainReport report =
        detail::run_stage("train", [&] { return train(params, poisoned_train, tc); });

    save_checkpoint(params, (out_dir / "checkpoint").string());
    report.checkpoint = "checkpoint";
    {
        json rj;
        rj["epoch_loss"] = report.epoch_loss;
        rj["epoch_seconds"] = report.epoch_seconds;
        rj["checkpoint"] = report.checkpoint;
        rj["config_hash"] = hash;
        rj["train"] = {{"learning_rate", tc.learning_rate}, {"batch_size", tc.batch_size},
                       {"epochs", tc.epochs},               {"adam_beta1", tc.adam_beta1},
                       {"adam_beta2", tc.adam_beta2},       {"adam_epsilon", tc.adam_epsilon},
                       {"seed", tc.seed},                   {"shuffle", tc.shuffle}};
        write_text_file(out_dir / "train_report.json", rj.dump(2) + "\n");
    }

    ExperimentResult result;
    result.dir = out_dir;
    result.metrics = detail::run_stage("evaluate", [&] {
        return evaluate_attack(params, data.test, poisoned_test, cfg.target_label);
    });
    detail::run_stage("evaluate", [&] {
        write_predictions_csv(out_dir / "predictions_clean.csv", data.test,
                              predict_labels(params, data.test));
        write_predictions_csv(out_dir / "predictions_poisoned.csv", poisoned_test,
                              predict_labels(params, poisoned_test));
        return 0;
    });

    json metrics;
    metrics["run_id"] = run_id;
    metrics["config_hash"] = hash;
    metrics["code_version"] = kCodeVersion;
    metrics["dataset"] = {{"train_size", data.train.count},
                          {"test_size", data.test.count},
                          {"n_poisoned_train", poison_summary.n_poisoned},
                          {"poison_rounded_to_zero", poison_summary.rounded_to_zero}};
    metrics["asr"] = result.metrics.asr;
    metrics["ba"] = result.metrics.ba;
    metrics["n_poisoned_eval"] = result.metrics.n_poisoned_eval;
    metrics["n_clean_eval"] = result.metrics.n_clean_eval;
    metrics["n_attack_success"] = result.metrics.n_attack_success;
    metrics["n_correct"] = result.metrics.n_correct;
    metrics["final_epoch_loss"] = report.epoch_loss.empty() ? 0.0 : report.epoch_loss.back();

    if (cfg.strip.enabled) {
        detail::run_stage("defend:strip", [&] {
            StripConfig sc;
            sc.n_overlays = cfg.strip.n_overlays;
            sc.blend = cfg.strip.blend;
            sc.seed = resolve_seed(cfg.strip.seed, cfg.seed, seed_tag::strip);
            sc.threshold_percentile = cfg.strip.threshold_percentile;

            // Overlay pool: the clean (never-poisoned) part of the training set.
            std::vector<std::size_t> clean_idx;
            for (std::size_t i = 0; i < poisoned_train.count; ++i)
                if (!poisoned_train.poisoned_mask[i]) clean_idx.push_back(i);
            LabeledDataset pool = poisoned_train.select(clean_idx);

            auto pick = [&](const LabeledDataset& ds, std::uint64_t seed) {
                const std::size_t n = std::min(cfg.strip.n_inputs, ds.count);
                std::mt19937 g = rng::make_engine(seed);
                auto idx = rng::sample_without_replacement(ds.count, n, g);
                std::sort(idx.begin(), idx.end());
                return ds.select(idx);
            };
            const std::uint64_t inputs_seed =
                resolve_seed(cfg.strip.seed, cfg.seed, seed_tag::strip_inputs);
            LabeledDataset poisoned_inputs = pick(poisoned_test, inputs_seed);
            LabeledDataset clean_inputs = pick(data.test, rng::mix_seed(inputs_seed, 1));

            StripReport on_poisoned = strip_report(params, poisoned_inputs, pool, sc);
            StripReport on_clean = strip_report(params, clean_inputs, pool, sc);

            json sj;
            sj["n_overlays"] = sc.n_overlays;
            sj["blend"] = sc.blend;
            sj["poisoned_inputs"] = {{"mean_entropy", on_poisoned.mean_entropy},
                                     {"entropies", on_poisoned.entropies}};
            sj["clean_inputs"] = {{"mean_entropy", on_clean.mean_entropy},
                                  {"entropies", on_clean.entropies}};
            if (on_clean.threshold) {
                sj["threshold"] = *on_clean.threshold;
                std::size_t flagged = 0;
                for (double e : on_poisoned.entropies)
                    if (e < *on_clean.threshold) ++flagged;
                sj["poisoned_flagged_fraction"] =
                    static_cast<double>(flagged) /
                    static_cast<double>(on_poisoned.entropies.size());
            }
            write_text_file(out_dir / "strip_report.json", sj.dump(2) + "\n");
            metrics["strip"] = {{"mean_entropy_poisoned", on_poisoned.mean_entropy},
                                {"mean_entropy_clean", on_clean.mean_entropy}};
            return 0;
        });
    }

    if (cfg.finetune.enabled) {
        detail::run_stage("defend:finetune", [&] {
            TrainConfig ft;
            ft.learning_rate = cfg.finetune.learning_rate;
            ft.batch_size = cfg.finetune.batch_size;
            ft.epochs = cfg.finetune.epochs;
            ft.seed = resolve_seed(cfg.finetune.seed, cfg.seed, seed_tag::finetune);
            // Clean samples only, stratified, sized as a fraction of the
            // training set.
            std::vector<std::size_t> clean_idx;
            for (std::size_t i = 0; i < poisoned_train.count; ++i)
                if (!poisoned_train.poisoned_mask[i]) clean_idx.push_back(i);
            LabeledDataset clean_pool = poisoned_train.select(clean_idx);
            const std::size_t want = std::max<std::size_t>(
                1, static_cast<std::size_t>(std::llround(cfg.finetune.subset_fraction *
                                                         static_cast<double>(poisoned_train.count))));
            LabeledDataset subset =
                want < clean_pool.count
                    ? subset_stratified(clean_pool, want, rng::mix_seed(ft.seed, 2))
                    : clean_pool;

            FinetuneResult fr = finetune_defense(params, subset, ft, data.test, poisoned_test,
                                                 cfg.target_label);
            save_checkpoint(fr.defended, (out_dir / "checkpoint_finetuned").string());
            json fj;
            fj["epochs"] = ft.epochs;
            fj["learning_rate"] = ft.learning_rate;
            fj["subset_size"] = subset.count;
            fj["before"] = {{"asr", fr.before.asr}, {"ba", fr.before.ba}};
            fj["after"] = {{"asr", fr.after.asr}, {"ba", fr.after.ba}};
            fj["finetune_epoch_loss"] = fr.report.epoch_loss;
            write_text_file(out_dir / "finetune_report.json", fj.dump(2) + "\n");
            metrics["finetune"] = {{"asr_before", fr.before.asr},
                                   {"asr_after", fr.after.asr},
                                   {"ba_before", fr.before.ba},
                                   {"ba_after", fr.after.ba}};
            return 0;
        });
    }

    write_text_file(out_dir / "metrics.json", metrics.dump(2) + "\n");
    write_text_file(out_dir / "metrics.csv", metrics_csv_header() + metrics_csv_row(cfg, metrics));
    {
        json info;
        info["started_at"] = started_at;
        info["finished_at"] = iso8601_now();
        info["config_hash"] = hash;
        write_text_file(out_dir / "run_info.json", info.dump(2) + "\n");
    }
    result.metrics_json = std::move(metrics);
    return result;
}

// ---------------------------------------------------------------------------
// Sweeps.

struct SweepRow {
    json value;
    std::string run_id;
    std::string hash;
    json metrics;       // empty when the run failed
    std::string error;  // empty when the run succeeded
};

struct SweepResult {
    std::string parameter;
    std::vector<SweepRow> rows;
    bool any_failed = false;
    json summary;
};

inline std::string sweep_value_label(const json& v) {
    std::string s = v.is_string() ? v.get<std::string>() : v.dump();
    for (char& c : s)
        if (c == '/' || c == ':' || c == ' ' || c == '"') c = '_';
    return s;
}

inline SweepResult run_sweep(const ExperimentConfig& base,
                             const std::filesystem::path& out_dir) {
    if (!base.sweep) throw config_error("sweep: config has no sweep section");
    const SweepSpec& spec = *base.sweep;
    if (spec.parameter.empty()) throw config_error("sweep: parameter name is empty");
    if (spec.values.empty()) throw config_error("sweep: value list is empty");

    json base_json = experiment_config_to_json(base);
    base_json.erase("sweep");
    std::string pointer = "/" + spec.parameter;
    for (char& c : pointer)
        if (c == '.') c = '/';
    const json::json_pointer jp(pointer);
    if (!base_json.contains(jp))
        throw config_error("sweep: parameter '" + spec.parameter +
                           "' does not name a config field");

    // Rows ordered by swept value: numerically when possible, else by the
    // order given.
    std::vector<json> values = spec.values;
    const bool all_numeric =
        std::all_of(values.begin(), values.end(), [](const json& v) { return v.is_number(); });
    if (all_numeric)
        std::sort(values.begin(), values.end(), [](const json& a, const json& b) {
            return a.get<double>() < b.get<double>();
        });

    std::filesystem::create_directories(out_dir);
    const std::string started_at = iso8601_now();

    SweepResult result;
    result.parameter = spec.parameter;
    std::string csv = "sweep_value," + metrics_csv_header();
    for (const json& v : values) {
        SweepRow row;
        row.value = v;
        json patched = base_json;
        patched[jp] = v;
        const std::string label = sweep_value_label(v);
        try {
            ExperimentConfig cfg = parse_experiment_config(patched);
            cfg.run_id = resolved_run_id(base) + "-" + spec.parameter + "=" + label;
            row.run_id = cfg.run_id;
            row.hash = config_hash(cfg);
            ExperimentResult r = run_experiment(cfg, out_dir / (spec.parameter + "=" + label));
            row.metrics = r.metrics_json;
            csv += sweep_value_label(v) + "," + metrics_csv_row(cfg, r.metrics_json);
        } catch (const std::exception& e) {
            row.error = e.what();
            result.any_failed = true;
            std::string cells;
            for (std::size_t i = 0; i + 1 < metrics_csv_columns().size(); ++i) cells += ",";
            csv += label + "," + (row.run_id.empty() ? "" : row.run_id) + cells + "\n";
        }
        result.rows.push_back(std::move(row));
    }

    json summary;
    summary["parameter"] = spec.parameter;
    summary["base_config_hash"] = config_hash(base);
    summary["code_version"] = kCodeVersion;
    summary["started_at"] = started_at;
    summary["finished_at"] = iso8601_now();
    json rows = json::array();
    double asr_sum = 0.0, ba_sum = 0.0;
    std::size_t ok = 0;
    for (const SweepRow& row : result.rows) {
        json r;
        r["value"] = row.value;
        r["run_id"] = row.run_id;
        r["config_hash"] = row.hash;
        if (row.error.empty()) {
            r["asr"] = row.metrics.at("asr");
            r["ba"] = row.metrics.at("ba");
            asr_sum += row.metrics.at("asr").get<double>();
            ba_sum += row.metrics.at("ba").get<double>();
            if (row.metrics.contains("strip")) r["strip"] = row.metrics.at("strip");
            if (row.metrics.contains("finetune")) r["finetune"] = row.metrics.at("finetune");
            ++ok;
        } else {
            r["error"] = row.error;
        }
        rows.push_back(std::move(r));
    }
    summary["rows"] = std::move(rows);
    if (ok > 0) {
        summary["mean_asr"] = asr_sum / static_cast<double>(ok);
        summary["mean_ba"] = ba_sum / static_cast<double>(ok);
    }
    summary["failed_runs"] = result.rows.size() - ok;
    result.summary = summary;
    write_text_file(out_dir / "sweep_summary.json", summary.dump(2) + "\n");
    write_text_file(out_dir / "sweep.csv", csv);
    return result;
}

}  // namespace badres
