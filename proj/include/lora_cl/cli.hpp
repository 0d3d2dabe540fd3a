#pragma once

// Command-line front end: run, merge, metrics, inspect.
//
// Exit codes: 0 success, 1 data/numeric failure, 2 usage or config error.
// Machine-readable results go to files or `out`; progress and errors go to `err`.

#include <filesystem>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "lora_cl/experiment.hpp"
#include "lora_cl/tensor_file.hpp"

namespace lora_cl::cli {

namespace fs = std::filesystem;

inline constexpr int exit_ok = 0;
inline constexpr int exit_failure = 1;
inline constexpr int exit_usage = 2;

inline void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << text;
    if (!out) throw IoError("write failed on '" + path.string() + "'");
}

inline std::string run_dir_name(const RunKey& k) {
    return "run_" + std::to_string(k.ordering_seed) + "_" + std::to_string(k.run_seed);
}

struct RunOptions {
    std::string config_path;
    std::string strategies_csv;
    std::size_t jobs = 0;
    std::string out_dir;
    std::optional<std::uint64_t> seed;
    std::optional<double> rho;
    std::optional<std::size_t> tasks;
    bool print_config = false;
};

inline ExperimentConfig resolve_config(const RunOptions& o) {
    ExperimentConfig cfg;
    if (!o.config_path.empty()) cfg = load_config(o.config_path);
    if (!o.strategies_csv.empty()) {
        cfg.strategies.clear();
        std::stringstream ss(o.strategies_csv);
        std::string item;
        while (std::getline(ss, item, ',')) cfg.strategies.push_back(parse_strategy(item));
    }
    if (!o.out_dir.empty()) cfg.output_dir = o.out_dir;
    if (o.seed) cfg.sim.master_seed = *o.seed;
    if (o.rho) cfg.sim.rho = *o.rho;
    if (o.tasks) cfg.sim.T = *o.tasks;
    return cfg;
}

inline int cmd_run(const RunOptions& o, std::ostream& out, std::ostream& err) {
    ExperimentConfig cfg;
    try {
        cfg = resolve_config(o);
        if (o.print_config) {
            out << to_json(cfg).dump(2) << "\n";
            return exit_ok;
        }
        cfg.validate();
        fs::create_directories(cfg.output_dir);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << "\n";
        return exit_usage;
    } catch (const fs::filesystem_error& e) {
        err << "cannot create output directory: " << e.what() << "\n";
        return exit_usage;
    }

    const fs::path root = cfg.output_dir;
    const std::string digest = config_digest(cfg);
    const std::size_t jobs = o.jobs ? o.jobs : std::max(1u, std::thread::hardware_concurrency());

    nlohmann::json manifest = {{"config", to_json(cfg)}, {"config_digest", digest}, {"runs", nlohmann::json::array()}};
    std::size_t failures = 0;
    try {
        const Testbed bed(cfg.sim);
        err << "running " << cfg.strategies.size() * cfg.ordering_seeds.size() * cfg.run_seeds.size()
            << " runs on " << jobs << " worker(s)\n";
        const auto outcomes = run_sweep(cfg, bed, jobs);

        std::map<StrategyKind, std::vector<const RunOutcome*>> by_strategy;
        for (const auto& oc : outcomes) by_strategy[oc.key.strategy].push_back(&oc);

        for (const auto& [kind, runs] : by_strategy) {
            const fs::path sdir = root / std::string(to_string(kind));
            fs::create_directories(sdir);
            std::vector<CLReport> reports;
            nlohmann::json run_list = nlohmann::json::array();
            nlohmann::json failed = nlohmann::json::array();
            for (const RunOutcome* oc : runs) {
                const std::string rel = std::string(to_string(kind)) + "/" + run_dir_name(oc->key);
                nlohmann::json entry = {{"strategy", to_string(kind)},
                                        {"ordering_seed", oc->key.ordering_seed},
                                        {"run_seed", oc->key.run_seed},
                                        {"path", rel}};
                if (!oc->result) {
                    ++failures;
                    entry["status"] = "failed";
                    entry["error"] = oc->error;
                    failed.push_back({{"ordering_seed", oc->key.ordering_seed}, {"run_seed", oc->key.run_seed}});
                    err << "run " << rel << " failed: " << oc->error << "\n";
                    manifest["runs"].push_back(entry);
                    continue;
                }
                const RunResult& r = *oc->result;
                const fs::path rdir = root / rel;
                fs::create_directories(rdir);
                export_heatmap(r.scores, rdir / "scores.csv");
                nlohmann::json record = {{"strategy", to_string(kind)},
                                         {"ordering_seed", r.ordering_seed},
                                         {"run_seed", r.run_seed},
                                         {"task_order", r.order},
                                         {"base_scores", r.base_scores},
                                         {"train_loss_ratio", r.train_loss_ratio},
                                         {"student_scores", r.student_scores},
                                         {"report", to_json(r.report)},
                                         {"wall_time", r.wall_time}};
                write_text(rdir / "record.json", record.dump(2) + "\n");
                reports.push_back(r.report);
                run_list.push_back({{"ordering_seed", r.ordering_seed},
                                    {"run_seed", r.run_seed},
                                    {"report", to_json(r.report)}});
                entry["status"] = "ok";
                manifest["runs"].push_back(entry);
            }
            if (reports.empty()) continue;
            double base_mean = 0.0;
            for (double s : bed.base_scores) base_mean += s;
            base_mean /= static_cast<double>(bed.base_scores.size());
            const Aggregate agg = aggregate_runs(reports);
            nlohmann::json aggregate = {{"strategy", to_string(kind)},
                                        {"config_digest", digest},
                                        {"runs", run_list},
                                        {"failed_runs", failed},
                                        {"mean", to_json(agg.mean)},
                                        {"std", to_json(agg.std)},
                                        {"base_avg_score", base_mean}};
            write_text(sdir / "aggregate.json", aggregate.dump(2) + "\n");
            err << to_string(kind) << ": avg_score " << agg.mean.avg_score << " +- " << agg.std.avg_score
                << ", avg_forgetting " << agg.mean.avg_forgetting << " +- " << agg.std.avg_forgetting << "\n";
        }
    } catch (const std::exception& e) {
        err << "run failed: " << e.what() << "\n";
        manifest["error"] = e.what();
        ++failures;
    }
    manifest["failures"] = failures;
    try {
        write_text(root / "manifest.json", manifest.dump(2) + "\n");
    } catch (const std::exception& e) {
        err << e.what() << "\n";
        return exit_failure;
    }
    return failures ? exit_failure : exit_ok;
}

struct MergeOptions {
    std::string base_path;
    std::vector<std::string> adapter_paths;
    std::string strategy;
    std::string out_path;
};

// Applies on-disk adapters to base weights. Sum strategies add every
// adapter's delta in order; magmax selects A and B elementwise across the
// adapters (starting from zero) and merges the selection once.
inline BaseWeights merge_files(const BaseWeights& base, const std::vector<AdapterFile>& adapters, StrategyKind kind) {
    if (adapters.empty()) throw ConfigError("merge needs at least one adapter");
    if (kind == StrategyKind::naive && adapters.size() != 1)
        throw ConfigError("naive merges exactly one (the final) adapter");

    std::vector<Layer> layers = base.layers();
    auto layer_index = [&](const LoraAdapter& ad) {
        for (std::size_t i = 0; i < layers.size(); ++i)
            if (layers[i].name == ad.name) {
                const Matrix& w = layers[i].weight;
                if (ad.out_dim() != w.rows() || ad.in_dim() != w.cols())
                    throw ShapeError("tensor '" + ad.name + std::string(lora_b_suffix) + "' / '" + ad.name +
                                     std::string(lora_a_suffix) + "' gives delta " + std::to_string(ad.out_dim()) +
                                     "x" + std::to_string(ad.in_dim()) + " but base tensor '" + ad.name + "' is " +
                                     w.shape_str());
                return i;
            }
        throw ShapeError("tensor '" + ad.name + std::string(lora_a_suffix) + "' has no base tensor '" + ad.name + "'");
    };

    if (kind != StrategyKind::magmax) {
        for (const auto& af : adapters)
            for (const auto& ad : af.layers) {
                const std::size_t i = layer_index(ad);
                layers[i].weight = merge(layers[i].weight, ad);
            }
        return BaseWeights(std::move(layers));
    }

    std::map<std::size_t, LoraAdapter> selected;
    for (const auto& af : adapters)
        for (const auto& ad : af.layers) {
            const std::size_t i = layer_index(ad);
            auto it = selected.find(i);
            if (it == selected.end()) {
                it = selected.emplace(i, LoraAdapter{Matrix(ad.rank(), ad.in_dim()), Matrix(ad.out_dim(), ad.rank()),
                                                     ad.scale, ad.name})
                         .first;
            }
            LoraAdapter& acc = it->second;
            if (!acc.a.same_shape(ad.a) || !acc.b.same_shape(ad.b))
                throw ShapeError("tensor '" + ad.name + std::string(lora_a_suffix) + "' has rank " +
                                 std::to_string(ad.rank()) + ", earlier adapters have rank " + std::to_string(acc.rank()));
            if (acc.scale != ad.scale)
                throw ShapeError("tensor '" + ad.name + std::string(lora_a_suffix) + "' has scale differing from earlier adapters");
            acc.a = magmax_select(acc.a, ad.a);
            acc.b = magmax_select(acc.b, ad.b);
        }
    for (const auto& [i, acc] : selected) layers[i].weight = merge(layers[i].weight, acc);
    return BaseWeights(std::move(layers));
}

inline int cmd_merge(const MergeOptions& o, std::ostream& out, std::ostream& err) {
    StrategyKind kind;
    try {
        kind = parse_strategy(o.strategy);
        if (o.adapter_paths.empty()) throw ConfigError("merge needs at least one adapter file");
        if (kind == StrategyKind::naive && o.adapter_paths.size() != 1)
            throw ConfigError("naive merges exactly one (the final) adapter");
    } catch (const ConfigError& e) {
        err << "usage error: " << e.what() << "\n";
        return exit_usage;
    }
    try {
        const BaseWeights base = load_weights(o.base_path);
        std::vector<AdapterFile> adapters;
        for (const auto& p : o.adapter_paths) {
            try {
                adapters.push_back(load_adapter_file(p));
            } catch (const FormatError& e) {
                throw FormatError(e.kind(), e.offset(), "'" + p + "': " + e.what());
            }
        }
        const BaseWeights merged = merge_files(base, adapters, kind);
        save_weights(o.out_path, merged,
                     {{"strategy", std::string(to_string(kind))}, {"merged_adapters", std::to_string(adapters.size())}});
        out << nlohmann::json({{"out", o.out_path}, {"layers", merged.size()}, {"adapters", adapters.size()}}).dump()
            << "\n";
        return exit_ok;
    } catch (const std::exception& e) {
        err << "merge failed: " << e.what() << "\n";
        return exit_failure;
    }
}

inline int cmd_metrics(const std::string& csv_path, std::size_t tasks, std::ostream& out, std::ostream& err) {
    try {
        const ScoreMatrix sm = load_heatmap(csv_path, tasks);
        std::vector<std::pair<std::size_t, std::size_t>> needed_missing;
        const std::size_t t = sm.tasks();
        for (auto [j, k] : sm.missing())
            if (k == t || j < t) needed_missing.emplace_back(j, k);
        if (!needed_missing.empty()) {
            err << "incomplete score matrix, missing cells:";
            for (auto [j, k] : needed_missing) err << " (" << j << "," << k << ")";
            err << "\n";
            return exit_failure;
        }
        nlohmann::json j = {{"avg_score", avg_score(sm)}, {"avg_forgetting", avg_forgetting(sm)}};
        out << j.dump() << "\n";
        return exit_ok;
    } catch (const std::exception& e) {
        err << "metrics failed: " << e.what() << "\n";
        return exit_failure;
    }
}

inline int cmd_inspect(const std::string& path, std::ostream& out, std::ostream& err) {
    try {
        const TensorFile tf = read_tensor_file(path);
        nlohmann::json tensors = nlohmann::json::array();
        for (const auto& [name, t] : tf.tensors) {
            tensors.push_back({{"name", name},
                               {"dtype", to_string(t.dtype)},
                               {"shape", {t.value.rows(), t.value.cols()}},
                               {"frobenius_norm", frobenius_norm(t.value)},
                               {"numerical_rank", t.value.all_finite() ? nlohmann::json(numerical_rank(t.value))
                                                                       : nlohmann::json(nullptr)}});
        }
        nlohmann::json adapters = nlohmann::json::array();
        const AdapterFile af = from_tensor_file(tf);
        for (const auto& ad : af.layers)
            adapters.push_back({{"layer", ad.name},
                                {"rank", ad.rank()},
                                {"scale", ad.scale},
                                {"a_numerical_rank", numerical_rank(ad.a)},
                                {"delta_frobenius_norm", frobenius_norm(delta(ad))}});
        nlohmann::json j = {{"path", path}, {"metadata", tf.metadata}, {"tensors", tensors}, {"adapters", adapters}};
        out << j.dump(2) << "\n";
        return exit_ok;
    } catch (const std::exception& e) {
        err << "inspect failed: " << e.what() << "\n";
        return exit_failure;
    }
}

// Parses `args` (without the program name) and dispatches.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Continual LoRA merging toolkit"};
    app.require_subcommand(1);

    RunOptions run;
    auto* run_cmd = app.add_subcommand("run", "Run a strategy x ordering x seed sweep");
    run_cmd->add_option("--config", run.config_path, "JSON config file");
    run_cmd->add_option("--strategies", run.strategies_csv, "Comma-separated strategy names");
    run_cmd->add_option("--jobs", run.jobs, "Worker threads (default: hardware concurrency)");
    run_cmd->add_option("--out", run.out_dir, "Output directory");
    run_cmd->add_option("--seed", run.seed, "Master seed");
    run_cmd->add_option("--rho", run.rho, "Task alignment in [0, 1]");
    run_cmd->add_option("--tasks", run.tasks, "Number of tasks T");
    run_cmd->add_flag("--print-config", run.print_config, "Print the resolved config and exit");

    MergeOptions merge_opt;
    auto* merge_cmd = app.add_subcommand("merge", "Merge adapter files into base weights");
    merge_cmd->add_option("base", merge_opt.base_path, "Base weights file")->required();
    merge_cmd->add_option("adapters", merge_opt.adapter_paths, "Adapter files, in task order");
    merge_cmd->add_option("--strategy", merge_opt.strategy, "merge_init, merge_orth, magmax or naive")->required();
    merge_cmd->add_option("--out", merge_opt.out_path, "Output weights file")->required();

    std::string csv_path;
    std::size_t tasks = 0;
    auto* metrics_cmd = app.add_subcommand("metrics", "Average score and forgetting of a score CSV");
    metrics_cmd->add_option("scores", csv_path, "Score CSV")->required();
    metrics_cmd->add_option("--T", tasks, "Task count (default: inferred)");

    std::string inspect_path;
    auto* inspect_cmd = app.add_subcommand("inspect", "Describe an adapter or weights file");
    inspect_cmd->add_option("file", inspect_path, "Tensor file")->required();

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return exit_ok;
    } catch (const CLI::ParseError& e) {
        err << e.what() << "\n";
        return exit_usage;
    }

    if (*run_cmd) return cmd_run(run, out, err);
    if (*merge_cmd) return cmd_merge(merge_opt, out, err);
    if (*metrics_cmd) return cmd_metrics(csv_path, tasks, out, err);
    if (*inspect_cmd) return cmd_inspect(inspect_path, out, err);
    return exit_usage;
}

} // namespace lora_cl::cli
