#pragma once

// Sweep orchestration: strategies x task orderings x run seeds, each run
// driving one StrategyState through all tasks and filling a full score grid.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "lora_cl/metrics.hpp"
#include "lora_cl/sim.hpp"

namespace lora_cl {

struct ExperimentConfig {
    SimConfig sim;
    std::vector<StrategyKind> strategies{std::begin(all_strategies), std::end(all_strategies)};
    std::vector<std::uint64_t> ordering_seeds{0, 5, 10, 42};
    std::vector<std::uint64_t> run_seeds{0, 5};
    std::string output_dir = "results";

    void validate() const {
        sim.validate();
        if (sim.T < 2) throw ConfigError("T must be >= 2 for forgetting to be defined");
        if (strategies.empty()) throw ConfigError("strategies must not be empty");
        if (ordering_seeds.empty()) throw ConfigError("ordering_seeds must not be empty");
        if (run_seeds.empty()) throw ConfigError("run_seeds must not be empty");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        auto unique = [](auto v) {
            std::sort(v.begin(), v.end());
            return std::adjacent_find(v.begin(), v.end()) == v.end();
        };
        if (!unique(strategies) || !unique(ordering_seeds) || !unique(run_seeds))
            throw ConfigError("strategies, ordering_seeds and run_seeds must not contain duplicates");
    }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json strategies = nlohmann::json::array();
    for (auto k : c.strategies) strategies.push_back(to_string(k));
    const SimConfig& s = c.sim;
    return {{"m", s.m},
            {"n", s.n},
            {"r", s.r},
            {"r_task", s.r_task},
            {"delta", s.delta},
            {"rho", s.rho},
            {"T", s.T},
            {"lr", s.lr},
            {"steps", s.steps},
            {"batch", s.batch},
            {"P", s.P},
            {"master_seed", s.master_seed},
            {"layers", s.layers},
            {"base_norm", s.base_norm},
            {"input_noise", s.input_noise},
            {"std_a", s.std_a},
            {"scale", s.scale},
            {"orth_mode", to_string(s.orth_mode)},
            {"strategies", strategies},
            {"ordering_seeds", c.ordering_seeds},
            {"run_seeds", c.run_seeds},
            {"output_dir", c.output_dir}};
}

// Applies every key of `j` onto `c`. Unknown keys and wrong types are errors.
inline void apply_json(ExperimentConfig& c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    SimConfig& s = c.sim;
    auto count = [](const nlohmann::json& v, const std::string& key) -> std::size_t {
        if (!v.is_number_unsigned()) throw ConfigError("'" + key + "' must be a non-negative integer");
        return v.get<std::size_t>();
    };
    auto seed = [](const nlohmann::json& v, const std::string& key) -> std::uint64_t {
        if (!v.is_number_unsigned()) throw ConfigError("'" + key + "' must hold non-negative integers");
        return v.get<std::uint64_t>();
    };
    auto real = [](const nlohmann::json& v, const std::string& key) -> double {
        if (!v.is_number()) throw ConfigError("'" + key + "' must be a number");
        return v.get<double>();
    };
    auto seeds = [&](const nlohmann::json& v, const std::string& key) {
        if (!v.is_array()) throw ConfigError("'" + key + "' must be an array");
        std::vector<std::uint64_t> out;
        for (const auto& e : v) out.push_back(seed(e, key));
        return out;
    };
    for (const auto& [key, v] : j.items()) {
        if (key == "m") s.m = count(v, key);
        else if (key == "n") s.n = count(v, key);
        else if (key == "r") s.r = count(v, key);
        else if (key == "r_task") s.r_task = count(v, key);
        else if (key == "delta") s.delta = real(v, key);
        else if (key == "rho") s.rho = real(v, key);
        else if (key == "T") s.T = count(v, key);
        else if (key == "lr") s.lr = real(v, key);
        else if (key == "steps") s.steps = count(v, key);
        else if (key == "batch") s.batch = count(v, key);
        else if (key == "P") s.P = count(v, key);
        else if (key == "master_seed") s.master_seed = seed(v, key);
        else if (key == "layers") s.layers = count(v, key);
        else if (key == "base_norm") s.base_norm = real(v, key);
        else if (key == "input_noise") s.input_noise = real(v, key);
        else if (key == "std_a") s.std_a = real(v, key);
        else if (key == "scale") s.scale = real(v, key);
        else if (key == "orth_mode") {
            if (!v.is_string()) throw ConfigError("'orth_mode' must be a string");
            s.orth_mode = parse_orth_mode(v.get<std::string>());
        } else if (key == "strategies") {
            if (!v.is_array()) throw ConfigError("'strategies' must be an array");
            c.strategies.clear();
            for (const auto& e : v) {
                if (!e.is_string()) throw ConfigError("'strategies' must hold strings");
                c.strategies.push_back(parse_strategy(e.get<std::string>()));
            }
        } else if (key == "ordering_seeds") c.ordering_seeds = seeds(v, key);
        else if (key == "run_seeds") c.run_seeds = seeds(v, key);
        else if (key == "output_dir") {
            if (!v.is_string()) throw ConfigError("'output_dir' must be a string");
            c.output_dir = v.get<std::string>();
        } else {
            throw ConfigError("unknown config key '" + key + "'");
        }
    }
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config '" + path.string() + "' is not valid JSON: " + e.what());
    }
    ExperimentConfig c;
    apply_json(c, j);
    return c;
}

// FNV-1a over the canonical JSON of the simulation settings, as 16 hex digits.
inline std::string config_digest(const ExperimentConfig& c) {
    nlohmann::json j = to_json(c);
    j.erase("output_dir");
    j.erase("strategies");
    const std::string text = j.dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// Everything shared by the runs of one sweep: base model and task set are
// generated once from master_seed so orderings permute the same tasks.
struct Testbed {
    SimConfig cfg;
    BaseWeights base;
    std::vector<TaskSpec> tasks;
    std::vector<double> base_scores; // score of the base model on each task

    explicit Testbed(const SimConfig& c) : cfg(c), base(make_base(c)) {
        Rng rng(derive_seed({c.master_seed, static_cast<std::uint64_t>(Stream::tasks)}));
        tasks = generate_tasks(c, base, rng);
        for (const auto& t : tasks) base_scores.push_back(score(base, t));
    }
};

// Fisher-Yates shuffle of 0..T-1 seeded by the ordering seed.
inline std::vector<std::size_t> task_order(const SimConfig& cfg, std::uint64_t ordering_seed) {
    std::vector<std::size_t> order(cfg.T);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed({cfg.master_seed, static_cast<std::uint64_t>(Stream::ordering), ordering_seed}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    return order;
}

// Stream for adapter init and SGD sampling of one task slot in one run.
// Independent of the strategy, so strategies see identical draws.
inline std::uint64_t run_task_seed(std::uint64_t master_seed, std::uint64_t ordering_seed, std::uint64_t run_seed,
                                   std::size_t task_position) {
    return derive_seed({master_seed, static_cast<std::uint64_t>(Stream::run), ordering_seed, run_seed, task_position});
}

struct RunResult {
    StrategyKind strategy = StrategyKind::naive;
    std::uint64_t ordering_seed = 0;
    std::uint64_t run_seed = 0;
    std::vector<std::size_t> order;   // order[t] = task trained at position t
    ScoreMatrix scores;               // rows/cols in training order
    std::vector<double> base_scores;  // base model, in training order
    std::vector<double> train_loss_ratio; // final / initial expected loss per position
    std::vector<double> student_scores;   // effective base + trained adapter, on the task just trained
    CLReport report;
    double wall_time = 0.0;
};

inline RunResult run_experiment(const Testbed& bed, StrategyKind kind, std::uint64_t ordering_seed,
                                std::uint64_t run_seed) {
    const auto t0 = std::chrono::steady_clock::now();
    const SimConfig& cfg = bed.cfg;
    RunResult res;
    res.strategy = kind;
    res.ordering_seed = ordering_seed;
    res.run_seed = run_seed;
    res.order = task_order(cfg, ordering_seed);
    res.scores = ScoreMatrix(cfg.T);
    for (std::size_t pos : res.order) res.base_scores.push_back(bed.base_scores[pos]);

    StrategyState state(kind, bed.base, cfg.strategy_options());
    for (std::size_t k = 0; k < cfg.T; ++k) {
        Rng rng(run_task_seed(cfg.master_seed, ordering_seed, run_seed, k));
        TrainContext ctx = state.begin_task(rng);
        TrainResult tr = train_adapter(ctx, bed.tasks[res.order[k]], cfg, rng);
        res.train_loss_ratio.push_back(tr.initial_loss > 0.0 ? tr.final_loss / tr.initial_loss : 0.0);
        res.student_scores.push_back(score(merge(ctx.effective_base, tr.adapters), bed.tasks[res.order[k]]));
        state.end_task(tr.adapters);
        const BaseWeights w = state.final_weights();
        for (std::size_t j = 0; j < cfg.T; ++j) res.scores.set(j + 1, k + 1, score(w, bed.tasks[res.order[j]]));
    }
    res.report = make_report(res.scores);
    res.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

struct RunKey {
    StrategyKind strategy;
    std::uint64_t ordering_seed;
    std::uint64_t run_seed;
    auto operator<=>(const RunKey&) const = default;
};

struct RunOutcome {
    RunKey key;
    std::optional<RunResult> result;
    std::string error; // set when result is empty
};

// Runs every (strategy, ordering, seed) cell on `jobs` worker threads.
// Outcomes are returned in sorted key order regardless of scheduling.
inline std::vector<RunOutcome> run_sweep(const ExperimentConfig& cfg, const Testbed& bed, std::size_t jobs) {
    std::vector<RunKey> keys;
    for (auto s : cfg.strategies)
        for (auto o : cfg.ordering_seeds)
            for (auto r : cfg.run_seeds) keys.push_back({s, o, r});
    std::sort(keys.begin(), keys.end());

    std::vector<RunOutcome> out(keys.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next++; i < keys.size(); i = next++) {
            out[i].key = keys[i];
            try {
                out[i].result = run_experiment(bed, keys[i].strategy, keys[i].ordering_seed, keys[i].run_seed);
            } catch (const std::exception& e) {
                out[i].error = e.what();
            }
        }
    };
    jobs = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(keys.size(), 1));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t i = 0; i < jobs; ++i) pool.emplace_back(worker);
    }
    return out;
}

} // namespace lora_cl
