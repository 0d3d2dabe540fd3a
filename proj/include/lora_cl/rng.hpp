#pragma once

// Seedable random streams.
//
// Generator: std::mt19937_64, whose output sequence is fixed by the C++
// standard, so streams are identical across compilers and platforms.
// Uniforms: top 53 bits of one draw, mapped to (0, 1].
// Normals: Box-Muller on two uniforms; both outputs of a pair are used, the
// second one cached for the next call.
//
// std::normal_distribution is deliberately avoided: its algorithm is
// implementation-defined.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <random>

#include "lora_cl/matrix.hpp"

namespace lora_cl {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives a child seed from an ordered tuple of integers:
//   h = splitmix64(tag_0); h = splitmix64(h ^ splitmix64(tag_i)) for i > 0.
// Used to give every (master, ordering, run, task) cell its own stream.
inline constexpr std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) noexcept {
    std::uint64_t h = 0x6C6F72615F636CULL; // "lora_cl"
    for (std::uint64_t p : parts) h = splitmix64(h ^ splitmix64(p));
    return h;
}

class Rng {
public:
    static constexpr const char* algorithm = "mt19937_64+box_muller";

    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in (0, 1].
    double uniform() {
        return (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u1 = uniform();
        const double u2 = uniform();
        const double radius = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        spare_ = radius * std::sin(theta);
        has_spare_ = true;
        return radius * std::cos(theta);
    }

    // Uniform integer in [0, bound), rejection sampled so there is no modulo bias.
    std::uint64_t below(std::uint64_t bound) {
        if (bound == 0) return 0;
        const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
        std::uint64_t x;
        do {
            x = engine_();
        } while (x >= limit);
        return x % bound;
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

inline Matrix randn_matrix(Rng& rng, std::size_t rows, std::size_t cols, double std_dev) {
    if (!(std_dev >= 0.0)) throw ConfigError("randn_matrix: std must be >= 0");
    Matrix m(rows, cols);
    // Draws are consumed even for std 0 so the stream position does not
    // depend on the scale.
    for (double& v : m.values()) v = std_dev * rng.normal();
    if (std_dev == 0.0)
        for (double& v : m.values()) v = 0.0;
    return m;
}

inline std::vector<double> randn_vector(Rng& rng, std::size_t n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    return v;
}

} // namespace lora_cl
