#pragma once

// Linear student-teacher testbed for continual adapter training.
//
// The base model is a set of frozen m x n linear maps W0. Each task owns an
// input region: inputs are x = A_t^T z + noise * xi with z ~ N(0, I_{r_task})
// and xi ~ N(0, I_n), where the r_task unit rows of A_t mix directions
// shared by every task (weight rho) with task-specific ones. Task t's teacher
// is W0 + D_t with D_t = B_t A_t rescaled to Frobenius norm delta, so a
// model can serve several tasks at once exactly when their input regions do
// not overlap. The student is effective_base + s*B*A trained by plain SGD on
// squared output error. Models are scored by the mean cosine similarity of
// their outputs with the teacher's outputs on a frozen probe set drawn from
// the task's input distribution.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lora_cl/strategies.hpp"

namespace lora_cl {

struct SimConfig {
    std::size_t m = 64;
    std::size_t n = 64;
    std::size_t r = 4;
    std::size_t r_task = 4;
    double delta = 1.0;      // Frobenius norm of each teacher perturbation
    double rho = 0.6;        // input-direction alignment across tasks
    std::size_t T = 10;
    double lr = 0.02;
    std::size_t steps = 500;
    std::size_t batch = 1;
    std::size_t P = 16;      // probes per task
    std::uint64_t master_seed = 0;
    std::size_t layers = 1;  // 1, or 4 for q/k/v/out
    double base_norm = 2.5;  // Frobenius norm of each base layer
    double input_noise = 0.1; // isotropic input component outside the task region
    double std_a = 0.05;     // A init std; 0 selects 1/sqrt(r)
    double scale = 1.0;
    OrthMode orth_mode = OrthMode::project;

    double effective_std_a() const { return std_a > 0.0 ? std_a : default_std_a(r); }

    StrategyOptions strategy_options() const { return {r, effective_std_a(), scale, orth_mode}; }

    void validate() const {
        auto need = [](bool ok, const std::string& msg) {
            if (!ok) throw ConfigError(msg);
        };
        need(m >= 1 && n >= 1, "m and n must be >= 1");
        need(r >= 1 && r <= std::min(m, n), "r must lie in [1, min(m, n)]");
        need(r_task >= 1 && r_task <= std::min(m, n), "r_task must lie in [1, min(m, n)]");
        need(2 * r_task <= n || rho == 1.0, "shared plus task directions need 2*r_task <= n");
        need(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
        need(delta >= 0.0 && std::isfinite(delta), "delta must be finite and >= 0");
        need(base_norm >= 0.0 && std::isfinite(base_norm), "base_norm must be finite and >= 0");
        need(input_noise >= 0.0 && std::isfinite(input_noise), "input_noise must be finite and >= 0");
        need(T >= 1 && steps >= 1 && batch >= 1 && P >= 1, "T, steps, batch and P must be >= 1");
        need(lr > 0.0 && std::isfinite(lr), "lr must be finite and > 0");
        need(std_a >= 0.0 && std::isfinite(std_a), "std_a must be finite and >= 0");
        need(std::isfinite(scale), "scale must be finite");
        need(layers == 1 || layers == 4, "layers must be 1 or 4");
    }
};

inline std::vector<std::string> layer_names(std::size_t layers) {
    if (layers == 1) return {"layer0"};
    return {"to_q", "to_k", "to_v", "to_out"};
}

struct TaskSpec {
    std::size_t index = 0;
    Matrix input_basis;                // r_task x n, unit rows spanning the task's input region
    double input_noise = 0.0;
    std::vector<Matrix> teacher_delta; // per layer
    BaseWeights teacher;               // base + teacher_delta
    Matrix probes;                     // P x n, one probe per row

    std::vector<double> sample_input(Rng& rng) const {
        std::vector<double> x(input_basis.cols(), 0.0);
        for (std::size_t i = 0; i < input_basis.rows(); ++i) {
            const double z = rng.normal();
            auto row = input_basis.row(i);
            for (std::size_t j = 0; j < x.size(); ++j) x[j] += z * row[j];
        }
        for (double& v : x) v += input_noise * rng.normal();
        return x;
    }
};

// Stream identifiers mixed into derive_seed so that different uses of the
// master seed never share a stream.
enum class Stream : std::uint64_t { base = 1, tasks = 2, ordering = 3, run = 4 };

inline BaseWeights make_base(const SimConfig& cfg) {
    Rng rng(derive_seed({cfg.master_seed, static_cast<std::uint64_t>(Stream::base)}));
    std::vector<Layer> layers;
    for (const auto& name : layer_names(cfg.layers)) {
        Matrix w = randn_matrix(rng, cfg.m, cfg.n, 1.0);
        const double f = frobenius_norm(w);
        if (f > 0.0) w *= cfg.base_norm / f;
        layers.push_back({name, std::move(w)});
    }
    return BaseWeights(std::move(layers));
}

namespace detail {

// Orthonormalizes the rows of m in place (modified Gram-Schmidt, two passes).
inline void orthonormalize_rows(Matrix& m) {
    for (std::size_t i = 0; i < m.rows(); ++i) {
        auto ri = m.row(i);
        for (int pass = 0; pass < 2; ++pass)
            for (std::size_t j = 0; j < i; ++j) {
                auto rj = m.row(j);
                const double p = dot(ri, rj);
                for (std::size_t k = 0; k < ri.size(); ++k) ri[k] -= p * rj[k];
            }
        const double nrm = std::sqrt(dot(ri, ri));
        if (nrm == 0.0) throw NumericError("orthonormalize_rows: dependent rows");
        for (double& v : ri) v /= nrm;
    }
}

} // namespace detail

// Builds cfg.T tasks against `base`. Row i of each task's input basis is
//   rho * u_i + sqrt(1 - rho^2) * g_i
// with u (shared, orthonormal, drawn once) and g_i a fresh unit gaussian
// direction orthogonal to every u. Each layer gets its own gaussian output
// factor over the same input basis.
inline std::vector<TaskSpec> generate_tasks(const SimConfig& cfg, const BaseWeights& base, Rng& rng) {
    cfg.validate();
    Matrix shared = randn_matrix(rng, cfg.r_task, cfg.n, 1.0);
    detail::orthonormalize_rows(shared);
    std::vector<Matrix> shared_out;
    for (std::size_t l = 0; l < base.size(); ++l) shared_out.push_back(randn_matrix(rng, cfg.m, cfg.r_task, 1.0));
    const double own = std::sqrt(std::max(0.0, 1.0 - cfg.rho * cfg.rho));

    std::vector<TaskSpec> tasks;
    for (std::size_t t = 0; t < cfg.T; ++t) {
        TaskSpec task;
        task.index = t;
        task.input_noise = cfg.input_noise;
        Matrix g = randn_matrix(rng, cfg.r_task, cfg.n, 1.0);
        for (std::size_t i = 0; i < g.rows(); ++i) {
            auto gi = g.row(i);
            for (int pass = 0; pass < 2; ++pass)
                for (std::size_t j = 0; j < shared.rows(); ++j) {
                    const double p = dot(gi, shared.row(j));
                    for (std::size_t k = 0; k < gi.size(); ++k) gi[k] -= p * shared(j, k);
                }
            const double nrm = std::sqrt(dot(gi, gi));
            for (double& v : gi) v /= nrm;
        }
        task.input_basis = shared * cfg.rho + g * own;

        std::vector<Layer> teacher;
        for (std::size_t l = 0; l < base.size(); ++l) {
            Matrix b_star = shared_out[l] * cfg.rho + randn_matrix(rng, cfg.m, cfg.r_task, 1.0) * own;
            Matrix d = matmul(b_star, task.input_basis);
            d *= cfg.delta / frobenius_norm(d);
            teacher.push_back({base[l].name, base[l].weight + d});
            task.teacher_delta.push_back(std::move(d));
        }
        task.teacher = BaseWeights(std::move(teacher));
        task.probes = Matrix(cfg.P, cfg.n);
        for (std::size_t p = 0; p < cfg.P; ++p) {
            const auto x = task.sample_input(rng);
            std::copy(x.begin(), x.end(), task.probes.row(p).begin());
        }
        tasks.push_back(std::move(task));
    }
    return tasks;
}

// Squared-error loss of one sample and its gradients with respect to the
// adapter factors, for the student (w_eff + s*B*A) against target w_target:
//   e  = (w_eff - w_target) x + s B (A x)
//   L  = |e|^2
//   dB = 2 s e (A x)^T
//   dA = 2 s (B^T e) x^T
struct LoraGrad {
    double loss = 0.0;
    Matrix grad_a;
    Matrix grad_b;
};

// `residual_w` is w_eff - w_target. weight * gradient is added to grad_a
// (r x n) and grad_b (m x r); the unweighted sample loss is returned.
inline double accumulate_lora_grad(const Matrix& residual_w, const LoraAdapter& ad, std::span<const double> x,
                                   double weight, Matrix& grad_a, Matrix& grad_b) {
    const std::size_t m = ad.out_dim();
    const std::size_t n = ad.in_dim();
    const std::size_t r = ad.rank();
    const auto ax = matvec(ad.a, x);
    auto e = matvec(residual_w, x);
    const auto bax = matvec(ad.b, ax);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        e[i] += ad.scale * bax[i];
        loss += e[i] * e[i];
    }
    const double c = 2.0 * ad.scale * weight;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) grad_b(i, k) += c * e[i] * ax[k];
    std::vector<double> bte(r, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t k = 0; k < r; ++k) bte[k] += ad.b(i, k) * e[i];
    for (std::size_t k = 0; k < r; ++k) {
        const double ck = c * bte[k];
        if (ck == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) grad_a(k, j) += ck * x[j];
    }
    return loss;
}

inline LoraGrad lora_gradients(const Matrix& residual_w, const LoraAdapter& ad, std::span<const double> x) {
    LoraGrad g{0.0, Matrix(ad.rank(), ad.in_dim()), Matrix(ad.out_dim(), ad.rank())};
    g.loss = accumulate_lora_grad(residual_w, ad, x, 1.0, g.grad_a, g.grad_b);
    return g;
}

// Expected loss over the task's input distribution:
//   |M basis^T|_F^2 + noise^2 |M|_F^2,  M = residual_w + s B A.
inline double expected_loss(const Matrix& residual_w, const LoraAdapter& ad, const TaskSpec& task) {
    const Matrix mres = residual_w + delta(ad);
    const double f1 = frobenius_norm(matmul(mres, transpose(task.input_basis)));
    const double f2 = frobenius_norm(mres);
    return f1 * f1 + task.input_noise * task.input_noise * f2 * f2;
}

struct TrainResult {
    LayerAdapters adapters;
    double initial_loss = 0.0; // expected loss summed over layers, before training
    double final_loss = 0.0;   // same, after training
};

// Runs cfg.steps SGD steps on every layer's adapter. Each step draws
// cfg.batch inputs from the task's distribution, shared by all layers; the update uses the batch-mean
// gradient. Throws NumericError if a sampled loss exceeds 1e6 times the
// initial expected loss or turns non-finite.
inline TrainResult train_adapter(const TrainContext& ctx, const TaskSpec& task, const SimConfig& cfg, Rng& rng) {
    const std::size_t nl = ctx.trainable.size();
    if (nl != ctx.effective_base.size() || nl != task.teacher.size())
        throw ShapeError("train_adapter: layer counts disagree");

    TrainResult res;
    res.adapters = ctx.trainable;
    std::vector<Matrix> residual;
    for (std::size_t l = 0; l < nl; ++l) {
        residual.push_back(ctx.effective_base[l].weight - task.teacher[l].weight);
        res.initial_loss += expected_loss(residual[l], res.adapters[l], task);
    }
    const double guard = 1e6 * res.initial_loss;
    const double inv_batch = 1.0 / static_cast<double>(cfg.batch);

    std::vector<Matrix> ga, gb;
    for (const auto& ad : res.adapters) {
        ga.emplace_back(ad.rank(), ad.in_dim());
        gb.emplace_back(ad.out_dim(), ad.rank());
    }
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        for (std::size_t l = 0; l < nl; ++l) {
            std::fill(ga[l].values().begin(), ga[l].values().end(), 0.0);
            std::fill(gb[l].values().begin(), gb[l].values().end(), 0.0);
        }
        double loss = 0.0;
        for (std::size_t b = 0; b < cfg.batch; ++b) {
            const auto x = task.sample_input(rng);
            for (std::size_t l = 0; l < nl; ++l)
                loss += inv_batch * accumulate_lora_grad(residual[l], res.adapters[l], x, inv_batch, ga[l], gb[l]);
        }
        if (!std::isfinite(loss) || loss > guard)
            throw NumericError("train_adapter: diverged at step " + std::to_string(step) + " on task " +
                               std::to_string(task.index) + " (loss " + std::to_string(loss) + ", initial " +
                               std::to_string(res.initial_loss) + ", lr " + std::to_string(cfg.lr) + ")");
        for (std::size_t l = 0; l < nl; ++l) {
            res.adapters[l].a -= ga[l] * cfg.lr;
            res.adapters[l].b -= gb[l] * cfg.lr;
        }
    }
    for (std::size_t l = 0; l < nl; ++l) res.final_loss += expected_loss(residual[l], res.adapters[l], task);
    return res;
}

// Mean over layers and probes of cos(W x, W_teacher x).
inline double score(const BaseWeights& weights, const TaskSpec& task) {
    if (task.probes.rows() == 0) throw ConfigError("score: task has no probes");
    if (weights.size() != task.teacher.size()) throw ShapeError("score: layer counts disagree");
    double total = 0.0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
        for (std::size_t p = 0; p < task.probes.rows(); ++p) {
            const auto x = task.probes.row(p);
            const auto ys = matvec(weights[l].weight, x);
            const auto yt = matvec(task.teacher[l].weight, x);
            total += cosine_similarity(ys, yt).value;
        }
    }
    return total / static_cast<double>(weights.size() * task.probes.rows());
}

} // namespace lora_cl
