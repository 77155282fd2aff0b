// badres: backdoor-attack workbench CLI.
//
// Verbs:
//   run       one poison -> train -> evaluate experiment from a JSON config
//   sweep     run the config once per value of the swept parameter
//   evaluate  compute metrics for an existing checkpoint
//   defend    run a defense (strip | finetune) against an existing checkpoint
//   gen-data  write the synthetic dataset to IDX files
//
// Exit codes: 0 success, 1 configuration error, 2 runtime error,
// 3 sweep finished with failed runs.

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "badres/checkpoint.hpp"
#include "badres/dataset.hpp"
#include "badres/eval.hpp"
#include "badres/experiment.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_config_json(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw badres::config_error("cannot open config file " + path);
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw badres::config_error("config file " + path + ": " + e.what());
    }
    return j;
}

// Applies --set key.path=value overrides onto the raw config document.
void apply_overrides(json& cfg, const std::vector<std::string>& sets) {
    for (const std::string& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw badres::config_error("--set expects key.path=value, got '" + s + "'");
        std::string pointer = "/" + s.substr(0, eq);
        for (char& c : pointer)
            if (c == '.') c = '/';
        const std::string raw = s.substr(eq + 1);
        json value;
        try {
            value = json::parse(raw);
        } catch (const json::exception&) {
            value = raw;  // bare strings are fine
        }
        cfg[json::json_pointer(pointer)] = value;
    }
}

badres::ExperimentConfig resolve_config(const std::string& config_path,
                                        const std::vector<std::string>& sets,
                                        const std::string& output_dir_flag,
                                        std::int64_t seed_flag) {
    json raw = config_path.empty() ? json::object() : load_config_json(config_path);
    apply_overrides(raw, sets);
    badres::ExperimentConfig cfg = badres::parse_experiment_config(raw);
    if (!output_dir_flag.empty()) cfg.output_dir = output_dir_flag;
    if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
    return cfg;
}

int run_verb(const badres::ExperimentConfig& cfg) {
    const fs::path dir = badres::resolve_output_dir(cfg);
    badres::ExperimentResult r = badres::run_experiment(cfg, dir);
    std::cout << "run " << badres::resolved_run_id(cfg) << "\n"
              << "  dir: " << r.dir.string() << "\n"
              << "  asr: " << r.metrics.asr << "\n"
              << "  ba:  " << r.metrics.ba << "\n";
    return 0;
}

int sweep_verb(const badres::ExperimentConfig& cfg) {
    fs::path dir = cfg.output_dir;
    if (dir.is_relative()) {
        if (const char* root = std::getenv(badres::kOutputRootEnv))
            dir = fs::path(root) / dir;
    }
    dir /= badres::resolved_run_id(cfg) + "-sweep";
    badres::SweepResult r = badres::run_sweep(cfg, dir);
    std::cout << "sweep " << r.parameter << " (" << r.rows.size() << " runs) -> "
              << dir.string() << "\n";
    for (const auto& row : r.rows) {
        std::cout << "  " << r.parameter << "=" << row.value.dump();
        if (row.error.empty())
            std::cout << "  asr=" << row.metrics.at("asr").get<double>()
                      << "  ba=" << row.metrics.at("ba").get<double>() << "\n";
        else
            std::cout << "  FAILED: " << row.error << "\n";
    }
    return r.any_failed ? 3 : 0;
}

int evaluate_verb(const badres::ExperimentConfig& base, const std::string& checkpoint_stem,
                  const std::string& out_dir_flag) {
    badres::ModelParams params = badres::load_checkpoint(checkpoint_stem);
    badres::ExperimentConfig cfg = base;
    cfg.model = params.config;  // the checkpoint decides the architecture
    badres::validate_experiment_config(cfg);
    badres::PreparedData data = badres::ingest_dataset(cfg);
    const badres::PoisonConfig pc = badres::build_poison_config(cfg);
    badres::LabeledDataset poisoned_test = badres::make_poisoned_testset(data.test, pc);
    badres::RunMetrics m =
        badres::evaluate_attack(params, data.test, poisoned_test, cfg.target_label);
    json out = {{"checkpoint", checkpoint_stem},
                {"config_hash", badres::config_hash(cfg)},
                {"asr", m.asr},
                {"ba", m.ba},
                {"n_poisoned_eval", m.n_poisoned_eval},
                {"n_clean_eval", m.n_clean_eval}};
    std::cout << out.dump(2) << "\n";
    if (!out_dir_flag.empty()) {
        fs::create_directories(out_dir_flag);
        badres::write_text_file(fs::path(out_dir_flag) / "metrics.json", out.dump(2) + "\n");
        badres::write_predictions_csv(fs::path(out_dir_flag) / "predictions_clean.csv",
                                      data.test, badres::predict_labels(params, data.test));
        badres::write_predictions_csv(fs::path(out_dir_flag) / "predictions_poisoned.csv",
                                      poisoned_test,
                                      badres::predict_labels(params, poisoned_test));
    }
    return 0;
}

int defend_verb(const badres::ExperimentConfig& base, const std::string& checkpoint_stem,
                const std::string& method, const std::string& out_dir_flag) {
    badres::ModelParams params = badres::load_checkpoint(checkpoint_stem);
    badres::ExperimentConfig cfg = base;
    cfg.model = params.config;
    badres::validate_experiment_config(cfg);
    badres::PreparedData data = badres::ingest_dataset(cfg);
    const badres::PoisonConfig pc = badres::build_poison_config(cfg);
    badres::LabeledDataset poisoned_test = badres::make_poisoned_testset(data.test, pc);
    fs::path out_dir = out_dir_flag.empty() ? fs::path(".") : fs::path(out_dir_flag);
    fs::create_directories(out_dir);

    if (method == "strip") {
        badres::StripConfig sc;
        sc.n_overlays = cfg.strip.n_overlays;
        sc.blend = cfg.strip.blend;
        sc.seed = badres::resolve_seed(cfg.strip.seed, cfg.seed, badres::seed_tag::strip);
        sc.threshold_percentile = cfg.strip.threshold_percentile;
        const std::size_t n = std::min(cfg.strip.n_inputs, poisoned_test.count);
        std::mt19937 g = badres::rng::make_engine(
            badres::resolve_seed(cfg.strip.seed, cfg.seed, badres::seed_tag::strip_inputs));
        auto idx = badres::rng::sample_without_replacement(poisoned_test.count, n, g);
        std::sort(idx.begin(), idx.end());
        badres::StripReport rep =
            badres::strip_report(params, poisoned_test.select(idx), data.train, sc);
        json out = {{"method", "strip"},
                    {"mean_entropy_poisoned", rep.mean_entropy},
                    {"n_overlays", rep.n_overlays},
                    {"entropies", rep.entropies}};
        std::cout << "strip mean entropy on poisoned inputs: " << rep.mean_entropy << "\n";
        badres::write_text_file(out_dir / "strip_report.json", out.dump(2) + "\n");
        return 0;
    }
    if (method == "finetune") {
        badres::TrainConfig ft;
        ft.learning_rate = cfg.finetune.learning_rate;
        ft.batch_size = cfg.finetune.batch_size;
        ft.epochs = cfg.finetune.epochs;
        ft.seed = badres::resolve_seed(cfg.finetune.seed, cfg.seed, badres::seed_tag::finetune);
        const std::size_t want = std::max<std::size_t>(
            1, static_cast<std::size_t>(std::llround(
                   cfg.finetune.subset_fraction * static_cast<double>(data.train.count))));
        badres::LabeledDataset subset =
            want < data.train.count
                ? badres::subset_stratified(data.train, want, badres::rng::mix_seed(ft.seed, 2))
                : data.train;
        badres::FinetuneResult fr = badres::finetune_defense(params, subset, ft, data.test,
                                                             poisoned_test, cfg.target_label);
        badres::save_checkpoint(fr.defended, (out_dir / "checkpoint_finetuned").string());
        json out = {{"method", "finetune"},
                    {"before", {{"asr", fr.before.asr}, {"ba", fr.before.ba}}},
                    {"after", {{"asr", fr.after.asr}, {"ba", fr.after.ba}}}};
        std::cout << out.dump(2) << "\n";
        badres::write_text_file(out_dir / "finetune_report.json", out.dump(2) + "\n");
        return 0;
    }
    throw badres::config_error("defend: unknown method '" + method + "' (strip|finetune)");
}

int gen_data_verb(const badres::ExperimentConfig& cfg, const std::string& out_dir_flag) {
    const fs::path dir = out_dir_flag.empty() ? fs::path("data") : fs::path(out_dir_flag);
    fs::create_directories(dir);
    const auto& s = cfg.dataset.synthetic;
    const std::uint64_t base =
        badres::resolve_seed(s.seed, cfg.seed, badres::seed_tag::dataset);
    badres::LabeledDataset train =
        badres::generate_synthetic_dataset(s.classes, s.train_per_class, s.image_size, base);
    badres::LabeledDataset test = badres::generate_synthetic_dataset(
        s.classes, s.test_per_class, s.image_size, badres::rng::mix_seed(base, 0x7e57));
    badres::save_idx(train, (dir / "train-images-idx3-ubyte").string(),
                     (dir / "train-labels-idx1-ubyte").string());
    badres::save_idx(test, (dir / "t10k-images-idx3-ubyte").string(),
                     (dir / "t10k-labels-idx1-ubyte").string());
    std::cout << "wrote " << train.count << " train / " << test.count << " test samples to "
              << dir.string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"badres: residual-connection backdoor attack workbench"};
    app.require_subcommand(1);

    std::string config_path, output_dir, checkpoint_stem, method = "strip", out_dir;
    std::int64_t seed = -1;
    std::vector<std::string> sets;

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("-c,--config", config_path, "experiment config JSON");
        if (config_required) opt->required();
        sub->add_option("--set", sets, "override config fields, e.g. --set poison.rate=0.2");
        sub->add_option("--output-dir", output_dir, "output directory (overrides config)");
        sub->add_option("--seed", seed, "global seed (overrides config)");
    };

    CLI::App* run = app.add_subcommand("run", "run one experiment");
    add_common(run, true);
    CLI::App* sweep = app.add_subcommand("sweep", "run the configured parameter sweep");
    add_common(sweep, true);
    CLI::App* evaluate = app.add_subcommand("evaluate", "metrics for an existing checkpoint");
    add_common(evaluate, true);
    evaluate->add_option("--checkpoint", checkpoint_stem, "checkpoint stem (without .json/.bin)")
        ->required();
    evaluate->add_option("--out", out_dir, "directory for metrics artifacts");
    CLI::App* defend = app.add_subcommand("defend", "defense against an existing checkpoint");
    add_common(defend, true);
    defend->add_option("--checkpoint", checkpoint_stem, "checkpoint stem (without .json/.bin)")
        ->required();
    defend->add_option("--method", method, "strip|finetune")->required();
    defend->add_option("--out", out_dir, "directory for defense artifacts");
    CLI::App* gen = app.add_subcommand("gen-data", "write the synthetic dataset as IDX files");
    add_common(gen, false);
    gen->add_option("--out", out_dir, "destination directory (default: data)");

    CLI11_PARSE(app, argc, argv);

    try {
        const badres::ExperimentConfig cfg =
            resolve_config(config_path, sets, output_dir, seed);
        if (run->parsed()) return run_verb(cfg);
        if (sweep->parsed()) return sweep_verb(cfg);
        if (evaluate->parsed()) return evaluate_verb(cfg, checkpoint_stem, out_dir);
        if (defend->parsed()) return defend_verb(cfg, checkpoint_stem, method, out_dir);
        if (gen->parsed()) return gen_data_verb(cfg, out_dir);
    } catch (const badres::config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
