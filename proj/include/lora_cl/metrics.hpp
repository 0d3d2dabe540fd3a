#pragma once

// Continual-learning bookkeeping: the score grid S[j][k] (score on task j
// after training through task k), Average Score, Average Forgetting and
// mean/std aggregation across runs.
//
// Task indices are 1-based in the public API and in files, matching the
// usual S_j^k notation.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "lora_cl/error.hpp"

namespace lora_cl {

class ScoreMatrix {
public:
    ScoreMatrix() = default;
    explicit ScoreMatrix(std::size_t tasks) : t_(tasks), cells_(tasks * tasks) {}

    std::size_t tasks() const noexcept { return t_; }

    bool has(std::size_t j, std::size_t k) const { return cells_[index(j, k)].has_value(); }

    double at(std::size_t j, std::size_t k) const {
        const auto& c = cells_[index(j, k)];
        if (!c) throw IncompleteDataError("score cell (" + std::to_string(j) + ", " + std::to_string(k) + ") not evaluated");
        return *c;
    }

    void set(std::size_t j, std::size_t k, double v) {
        if (!std::isfinite(v) || v < -1.0 || v > 1.0)
            throw NumericError("score " + std::to_string(v) + " at (" + std::to_string(j) + ", " + std::to_string(k) +
                               ") is outside [-1, 1]");
        cells_[index(j, k)] = v;
    }

    void clear(std::size_t j, std::size_t k) { cells_[index(j, k)].reset(); }

    std::vector<std::pair<std::size_t, std::size_t>> missing() const {
        std::vector<std::pair<std::size_t, std::size_t>> out;
        for (std::size_t j = 1; j <= t_; ++j)
            for (std::size_t k = 1; k <= t_; ++k)
                if (!has(j, k)) out.emplace_back(j, k);
        return out;
    }

    friend bool operator==(const ScoreMatrix&, const ScoreMatrix&) = default;

private:
    std::size_t index(std::size_t j, std::size_t k) const {
        if (j < 1 || j > t_ || k < 1 || k > t_)
            throw ShapeError("score cell (" + std::to_string(j) + ", " + std::to_string(k) + ") outside " +
                             std::to_string(t_) + "x" + std::to_string(t_));
        return (j - 1) * t_ + (k - 1);
    }

    std::size_t t_ = 0;
    std::vector<std::optional<double>> cells_;
};

// Mean of the final column.
inline double avg_score(const ScoreMatrix& sm) {
    const std::size_t t = sm.tasks();
    if (t == 0) throw IncompleteDataError("avg_score: empty score matrix");
    double sum = 0.0;
    for (std::size_t j = 1; j <= t; ++j) sum += sm.at(j, t);
    return sum / static_cast<double>(t);
}

// (1 / (T-1)) * sum_{j<T} max_{1<=k<=T} (S[j][k] - S[j][T]). The max spans
// every k, including cells evaluated before task j was trained.
inline double avg_forgetting(const ScoreMatrix& sm) {
    const std::size_t t = sm.tasks();
    if (t < 2) throw IncompleteDataError("avg_forgetting is undefined for fewer than 2 tasks");
    double sum = 0.0;
    for (std::size_t j = 1; j < t; ++j) {
        const double last = sm.at(j, t);
        double best = 0.0;
        for (std::size_t k = 1; k <= t; ++k) best = std::max(best, sm.at(j, k) - last);
        sum += best;
    }
    return sum / static_cast<double>(t - 1);
}

struct CLReport {
    double avg_score = 0.0;
    double avg_forgetting = 0.0;
    std::vector<double> per_task_final;   // S[j][T], j = 1..T
    std::vector<double> first_task_curve; // S[1][k], k = 1..T

    friend bool operator==(const CLReport&, const CLReport&) = default;
};

inline CLReport make_report(const ScoreMatrix& sm) {
    CLReport r;
    const std::size_t t = sm.tasks();
    r.avg_score = avg_score(sm);
    r.avg_forgetting = avg_forgetting(sm);
    for (std::size_t j = 1; j <= t; ++j) r.per_task_final.push_back(sm.at(j, t));
    for (std::size_t k = 1; k <= t; ++k) r.first_task_curve.push_back(sm.at(1, k));
    return r;
}

struct Aggregate {
    CLReport mean;
    CLReport std; // population standard deviation
};

inline Aggregate aggregate_runs(std::vector<CLReport> reports) {
    if (reports.empty()) throw ConfigError("aggregate_runs: no reports");
    const std::size_t t = reports.front().per_task_final.size();
    for (const auto& r : reports)
        if (r.per_task_final.size() != t || r.first_task_curve.size() != t)
            throw ShapeError("aggregate_runs: reports cover different task counts");
    // Canonical order so floating-point sums do not depend on input order.
    std::sort(reports.begin(), reports.end(), [](const CLReport& a, const CLReport& b) {
        return std::tie(a.avg_score, a.avg_forgetting, a.per_task_final, a.first_task_curve) <
               std::tie(b.avg_score, b.avg_forgetting, b.per_task_final, b.first_task_curve);
    });

    const double nr = static_cast<double>(reports.size());
    auto mean_std = [&](auto get) {
        double s = 0.0;
        for (const auto& r : reports) s += get(r);
        const double mu = s / nr;
        double v = 0.0;
        for (const auto& r : reports) v += (get(r) - mu) * (get(r) - mu);
        return std::pair{mu, std::sqrt(v / nr)};
    };

    Aggregate out;
    std::tie(out.mean.avg_score, out.std.avg_score) = mean_std([](const CLReport& r) { return r.avg_score; });
    std::tie(out.mean.avg_forgetting, out.std.avg_forgetting) =
        mean_std([](const CLReport& r) { return r.avg_forgetting; });
    for (std::size_t i = 0; i < t; ++i) {
        auto [m1, s1] = mean_std([i](const CLReport& r) { return r.per_task_final[i]; });
        out.mean.per_task_final.push_back(m1);
        out.std.per_task_final.push_back(s1);
        auto [m2, s2] = mean_std([i](const CLReport& r) { return r.first_task_curve[i]; });
        out.mean.first_task_curve.push_back(m2);
        out.std.first_task_curve.push_back(s2);
    }
    return out;
}

inline nlohmann::json to_json(const CLReport& r) {
    return {{"avg_score", r.avg_score},
            {"avg_forgetting", r.avg_forgetting},
            {"per_task_final", r.per_task_final},
            {"first_task_curve", r.first_task_curve}};
}

// ---------------------------------------------------------------------------
// Heatmap CSV: header "task_j,after_k,score", one row per cell in (j, k)
// order, unevaluated cells as an empty field.

inline std::string heatmap_csv(const ScoreMatrix& sm) {
    std::string out = "task_j,after_k,score\n";
    for (std::size_t j = 1; j <= sm.tasks(); ++j)
        for (std::size_t k = 1; k <= sm.tasks(); ++k) {
            out += std::to_string(j) + "," + std::to_string(k) + ",";
            if (sm.has(j, k)) out += nlohmann::json(sm.at(j, k)).dump();
            out += "\n";
        }
    return out;
}

inline void export_heatmap(const ScoreMatrix& sm, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << heatmap_csv(sm);
    if (!out) throw IoError("write failed on '" + path.string() + "'");
}

// Parse failure in a heatmap CSV, with the 1-based line number.
class CsvError : public Error {
public:
    CsvError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

// `tasks` = 0 infers T from the largest index present.
inline ScoreMatrix parse_heatmap_csv(std::istream& in, std::size_t tasks = 0) {
    struct Row {
        std::size_t j, k;
        std::optional<double> v;
        std::size_t line;
    };
    std::vector<Row> rows;
    std::string line;
    std::size_t lineno = 0;
    auto parse_index = [&](const std::string& s, std::size_t ln) {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(s, &used);
        } catch (const std::exception&) {
            throw CsvError(ln, "bad task index '" + s + "'");
        }
        if (used != s.size() || v == 0 || s.front() == '-') throw CsvError(ln, "bad task index '" + s + "'");
        return static_cast<std::size_t>(v);
    };
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (lineno == 1) {
            if (line != "task_j,after_k,score") throw CsvError(1, "expected header 'task_j,after_k,score'");
            continue;
        }
        if (line.empty()) continue;
        std::vector<std::string> fields;
        std::stringstream ss(line);
        std::string f;
        while (std::getline(ss, f, ',')) fields.push_back(f);
        if (!line.empty() && line.back() == ',') fields.emplace_back();
        if (fields.size() != 3) throw CsvError(lineno, "expected 3 fields, got " + std::to_string(fields.size()));
        Row r{parse_index(fields[0], lineno), parse_index(fields[1], lineno), std::nullopt, lineno};
        if (!fields[2].empty()) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(fields[2], &used);
            } catch (const std::exception&) {
                throw CsvError(lineno, "bad score '" + fields[2] + "'");
            }
            if (used != fields[2].size() || !std::isfinite(v) || v < -1.0 || v > 1.0)
                throw CsvError(lineno, "bad score '" + fields[2] + "'");
            r.v = v;
        }
        rows.push_back(r);
    }
    if (lineno == 0) throw CsvError(1, "empty file");
    if (tasks == 0)
        for (const auto& r : rows) tasks = std::max({tasks, r.j, r.k});
    ScoreMatrix sm(tasks);
    std::vector<bool> seen(tasks * tasks, false);
    for (const auto& r : rows) {
        if (r.j > tasks || r.k > tasks)
            throw CsvError(r.line, "cell (" + std::to_string(r.j) + ", " + std::to_string(r.k) + ") outside T=" +
                                       std::to_string(tasks));
        const std::size_t idx = (r.j - 1) * tasks + (r.k - 1);
        if (seen[idx]) throw CsvError(r.line, "duplicate cell");
        seen[idx] = true;
        if (r.v) sm.set(r.j, r.k, *r.v);
    }
    return sm;
}

inline ScoreMatrix load_heatmap(const std::filesystem::path& path, std::size_t tasks = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    return parse_heatmap_csv(in, tasks);
}

} // namespace lora_cl
