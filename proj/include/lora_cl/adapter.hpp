#pragma once

// Low-rank adapters: delta W = scale * B * A with A (r x n) and B (m x r).

#include <cmath>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "lora_cl/linalg.hpp"
#include "lora_cl/rng.hpp"

namespace lora_cl {

struct LoraAdapter {
    Matrix a;            // r x n
    Matrix b;            // m x r
    double scale = 1.0;
    std::string name;    // target layer

    std::size_t rank() const noexcept { return a.rows(); }
    std::size_t out_dim() const noexcept { return b.rows(); }
    std::size_t in_dim() const noexcept { return a.cols(); }

    void validate() const {
        if (a.rows() == 0 || a.rows() != b.cols())
            throw ShapeError("adapter '" + name + "': A is " + a.shape_str() + ", B is " + b.shape_str());
    }

    friend bool operator==(const LoraAdapter&, const LoraAdapter&) = default;
};

// Adapters for every layer of a model, in layer order.
using LayerAdapters = std::vector<LoraAdapter>;

struct Layer {
    std::string name;
    Matrix weight;

    friend bool operator==(const Layer&, const Layer&) = default;
};

// Frozen model weights: named layers in a fixed order.
class BaseWeights {
public:
    BaseWeights() = default;
    explicit BaseWeights(std::vector<Layer> layers) : layers_(std::move(layers)) {
        for (std::size_t i = 0; i < layers_.size(); ++i)
            for (std::size_t j = i + 1; j < layers_.size(); ++j)
                if (layers_[i].name == layers_[j].name)
                    throw ConfigError("duplicate layer name '" + layers_[i].name + "'");
    }

    std::size_t size() const noexcept { return layers_.size(); }
    const Layer& operator[](std::size_t i) const { return layers_[i]; }
    Matrix& weight(std::size_t i) { return layers_[i].weight; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }

    const Layer* find(std::string_view name) const {
        for (const auto& l : layers_)
            if (l.name == name) return &l;
        return nullptr;
    }

    friend bool operator==(const BaseWeights&, const BaseWeights&) = default;

private:
    std::vector<Layer> layers_;
};

inline double default_std_a(std::size_t r) { return 1.0 / std::sqrt(static_cast<double>(r)); }

namespace detail {
inline void check_rank(std::size_t m, std::size_t n, std::size_t r) {
    if (r < 1 || r > std::min(m, n))
        throw ConfigError("adapter rank " + std::to_string(r) + " outside [1, min(" + std::to_string(m) +
                          ", " + std::to_string(n) + ")]");
}
} // namespace detail

// A ~ N(0, std_a^2), B = 0, so the adapter starts as an exact no-op.
inline LoraAdapter init_standard(Rng& rng, std::size_t m, std::size_t n, std::size_t r, double std_a,
                                 double scale = 1.0, std::string name = {}) {
    detail::check_rank(m, n, r);
    return LoraAdapter{randn_matrix(rng, r, n, std_a), Matrix(m, r), scale, std::move(name)};
}

enum class OrthMode {
    project, // A = G (I - Q^T Q), Q spanning the row space of the accumulated A
    svd_min, // every row of A along the least right singular vector
};

inline std::string_view to_string(OrthMode m) { return m == OrthMode::project ? "project" : "svd_min"; }

inline OrthMode parse_orth_mode(std::string_view s) {
    if (s == "project") return OrthMode::project;
    if (s == "svd_min") return OrthMode::svd_min;
    throw ConfigError("unknown orthogonal init mode '" + std::string(s) + "'");
}

// Fresh adapter whose A rows are orthogonal to every row of `acc_a`
// (the elementwise sum of all previous tasks' A factors). B = 0.
//
// Neither mode is a literal transcription of a per-column procedure: `project`
// removes the whole accumulated row space from a gaussian draw, `svd_min`
// aligns all rows with the single least-significant right singular vector.
inline LoraAdapter init_orthogonal(Rng& rng, const Matrix& acc_a, std::size_t m, std::size_t n, std::size_t r,
                                   double std_a, OrthMode mode, double scale = 1.0, std::string name = {}) {
    detail::check_rank(m, n, r);
    if (acc_a.rows() != r || acc_a.cols() != n)
        throw ShapeError("init_orthogonal: accumulated A is " + acc_a.shape_str() + ", expected " +
                         std::to_string(r) + "x" + std::to_string(n));

    if (mode == OrthMode::project) {
        const Matrix q = orthonormal_rowspace_basis(acc_a);
        if (q.rows() >= n) throw NumericError("init_orthogonal: accumulated A spans R^n, complement is empty");
        Matrix a = randn_matrix(rng, r, n, std_a);
        // Two projection passes; the second removes what roundoff left behind.
        for (int pass = 0; pass < 2 && q.rows() > 0; ++pass) a -= matmul(matmul(a, transpose(q)), q);
        return LoraAdapter{std::move(a), Matrix(m, r), scale, std::move(name)};
    }

    const Svd s = svd(acc_a);
    if (numerical_rank(s.sigma, acc_a.rows(), acc_a.cols()) >= n)
        throw NumericError("init_orthogonal: accumulated A spans R^n, complement is empty");
    // Last column of V = last row of V^T, the least singular direction. For
    // r < n its singular value is an implicit zero.
    Matrix a(r, n);
    for (std::size_t i = 0; i < r; ++i) {
        const double g = std_a * rng.normal();
        for (std::size_t j = 0; j < n; ++j) a(i, j) = g * s.v(j, n - 1);
    }
    return LoraAdapter{std::move(a), Matrix(m, r), scale, std::move(name)};
}

inline Matrix delta(const LoraAdapter& ad) {
    ad.validate();
    Matrix d = matmul(ad.b, ad.a);
    d *= ad.scale;
    return d;
}

inline bool is_noop(const LoraAdapter& ad) {
    if (ad.scale == 0.0) return true;
    for (double v : ad.b.values())
        if (v != 0.0) return false;
    return true;
}

inline Matrix merge(const Matrix& base, const LoraAdapter& ad) {
    ad.validate();
    if (base.rows() != ad.out_dim() || base.cols() != ad.in_dim())
        throw ShapeError("merge: base '" + ad.name + "' is " + base.shape_str() + ", adapter delta is " +
                         std::to_string(ad.out_dim()) + "x" + std::to_string(ad.in_dim()));
    if (is_noop(ad)) return base;
    return base + delta(ad);
}

// Layer-wise merge. Adapters are matched to layers by position.
inline BaseWeights merge(const BaseWeights& base, const LayerAdapters& adapters) {
    if (adapters.size() != base.size())
        throw ShapeError("merge: " + std::to_string(base.size()) + " layers but " +
                         std::to_string(adapters.size()) + " adapters");
    std::vector<Layer> out;
    out.reserve(base.size());
    for (std::size_t i = 0; i < base.size(); ++i) out.push_back({base[i].name, merge(base[i].weight, adapters[i])});
    return BaseWeights(std::move(out));
}

} // namespace lora_cl
