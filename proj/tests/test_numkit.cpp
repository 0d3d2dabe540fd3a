#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lora_cl/linalg.hpp"
#include "lora_cl/rng.hpp"
#include "support.hpp"

using namespace lora_cl;
using testing_support::max_abs_diff;
using testing_support::random_matrix;
using testing_support::triple_loop;

namespace {

// max |M^T M - I| over all entries.
double orthonormality_error(const Matrix& m) {
    Matrix g = triple_loop(transpose(m), m);
    double e = 0.0;
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j) e = std::max(e, std::abs(g(i, j) - (i == j ? 1.0 : 0.0)));
    return e;
}

double reconstruction_error(const Matrix& m, const Svd& s) {
    Matrix us(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < s.sigma.size(); ++k) acc += s.u(i, k) * s.sigma[k] * s.v(j, k);
            us(i, j) = acc;
        }
    return frobenius_norm(us - m) / std::max(frobenius_norm(m), 1e-300);
}

} // namespace

TEST(Matmul, IdentityLeavesMatrixUnchanged) {
    Matrix m{{1, 2, 3}, {4, 5, 6}};
    EXPECT_EQ(matmul(Matrix::identity(2), m), m);
}

TEST(Matmul, HandExample) {
    EXPECT_EQ(matmul(Matrix{{1, 2}, {3, 4}}, Matrix{{0}, {1}}), (Matrix{{2}, {4}}));
}

TEST(Matmul, MatchesTripleLoop) {
    std::mt19937 gen(7);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a = random_matrix(gen, 8, 4);
        Matrix b = random_matrix(gen, 4, 8);
        EXPECT_LE(max_abs_diff(matmul(a, b), triple_loop(a, b)), 1e-14);
    }
}

TEST(Matmul, ShapeMismatchThrows) {
    EXPECT_THROW(matmul(Matrix(2, 3), Matrix(2, 3)), ShapeError);
}

TEST(Matmul, Associative) {
    std::mt19937 gen(11);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a = random_matrix(gen, 5, 7), b = random_matrix(gen, 7, 3), c = random_matrix(gen, 3, 6);
        Matrix l = matmul(matmul(a, b), c);
        Matrix r = matmul(a, matmul(b, c));
        EXPECT_LE(frobenius_norm(l - r) / frobenius_norm(l), 1e-10);
    }
}

TEST(MatrixBasics, ConstructorChecksLength) {
    EXPECT_THROW(Matrix(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW((Matrix{{1, 2}, {3}}), ShapeError);
}

TEST(MatrixBasics, ElementwiseOps) {
    Matrix a{{1, 2}, {3, 4}};
    Matrix b{{4, 3}, {2, 1}};
    EXPECT_EQ(a + b, (Matrix{{5, 5}, {5, 5}}));
    EXPECT_EQ(a - b, (Matrix{{-3, -1}, {1, 3}}));
    EXPECT_EQ(a * 2.0, (Matrix{{2, 4}, {6, 8}}));
    EXPECT_EQ(transpose(a), (Matrix{{1, 3}, {2, 4}}));
    EXPECT_THROW(a += Matrix(2, 3), ShapeError);
}

TEST(MatrixBasics, FrobeniusNorm) {
    EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3, 0}, {0, 4}}), 5.0);
    EXPECT_EQ(frobenius_norm(Matrix(3, 3)), 0.0);
    // Scaled accumulation survives values whose squares overflow.
    EXPECT_DOUBLE_EQ(frobenius_norm(Matrix{{3e200, 4e200}}), 5e200);
}

TEST(Svd, Identity) {
    const Svd s = svd(Matrix::identity(3));
    ASSERT_EQ(s.sigma.size(), 3u);
    for (double v : s.sigma) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Svd, DiagonalWithNegativeEntry) {
    const Matrix m{{3, 0}, {0, -2}};
    const Svd s = svd(m);
    EXPECT_NEAR(s.sigma[0], 3.0, 1e-15);
    EXPECT_NEAR(s.sigma[1], 2.0, 1e-15);
    EXPECT_LE(reconstruction_error(m, s), 1e-15);
}

TEST(Svd, Random4x16) {
    std::mt19937 gen(3);
    const Matrix m = random_matrix(gen, 4, 16);
    const Svd s = svd(m);
    EXPECT_EQ(s.u.rows(), 4u);
    EXPECT_EQ(s.v.rows(), 16u);
    EXPECT_EQ(s.v.cols(), 16u);
    EXPECT_LE(reconstruction_error(m, s), 1e-10);
    EXPECT_LE(orthonormality_error(s.v), 1e-10);
    EXPECT_LE(orthonormality_error(s.u), 1e-10);
}

TEST(Svd, PropertiesOverRandomShapes) {
    std::mt19937 gen(2024);
    std::uniform_int_distribution<std::size_t> rows(1, 64), cols(1, 256);
    for (int trial = 0; trial < 200; ++trial) {
        const std::size_t r = rows(gen), c = cols(gen);
        Matrix m = random_matrix(gen, r, c);
        // Every fourth case is rank deficient: duplicate the first row.
        if (trial % 4 == 0 && r > 1)
            for (std::size_t j = 0; j < c; ++j) m(r - 1, j) = m(0, j);
        const Svd s = svd(m);
        SCOPED_TRACE(m.shape_str());
        ASSERT_EQ(s.u.rows(), r);
        ASSERT_EQ(s.u.cols(), r);
        ASSERT_EQ(s.v.rows(), c);
        ASSERT_EQ(s.v.cols(), c);
        EXPECT_LE(orthonormality_error(s.u), 1e-10);
        EXPECT_LE(orthonormality_error(s.v), 1e-10);
        EXPECT_LE(reconstruction_error(m, s), 1e-10);
        for (std::size_t k = 0; k + 1 < s.sigma.size(); ++k) EXPECT_GE(s.sigma[k], s.sigma[k + 1]);
        for (double v : s.sigma) EXPECT_GE(v, 0.0);
    }
}

TEST(Svd, ZeroMatrix) {
    const Svd s = svd(Matrix(3, 5));
    for (double v : s.sigma) EXPECT_EQ(v, 0.0);
    EXPECT_LE(orthonormality_error(s.u), 1e-12);
    EXPECT_LE(orthonormality_error(s.v), 1e-12);
}

TEST(Svd, RejectsNonFinite) {
    Matrix m(2, 2);
    m(0, 1) = std::nan("");
    EXPECT_THROW(svd(m), NumericError);
}

TEST(Svd, NumericalRank) {
    EXPECT_EQ(numerical_rank(Matrix{{1, 2, 3}, {2, 4, 6}}), 1u);
    EXPECT_EQ(numerical_rank(Matrix::identity(4)), 4u);
    EXPECT_EQ(numerical_rank(Matrix(2, 2)), 0u);
}

TEST(RowspaceBasis, SingleRowIsNormalized) {
    const Matrix q = orthonormal_rowspace_basis(Matrix{{2, 0, 0}});
    ASSERT_EQ(q.rows(), 1u);
    EXPECT_NEAR(std::abs(q(0, 0)), 1.0, 1e-15);
    EXPECT_NEAR(q(0, 1), 0.0, 1e-15);
    EXPECT_NEAR(q(0, 2), 0.0, 1e-15);
}

TEST(RowspaceBasis, IdenticalRowsGiveOneRow) {
    EXPECT_EQ(orthonormal_rowspace_basis(Matrix{{1, 2, 3, 4}, {1, 2, 3, 4}}).rows(), 1u);
}

TEST(RowspaceBasis, ZeroMatrixGivesEmptyBasis) {
    const Matrix q = orthonormal_rowspace_basis(Matrix(4, 8));
    EXPECT_EQ(q.rows(), 0u);
    EXPECT_EQ(q.cols(), 8u);
}

TEST(RowspaceBasis, Random4x32ProjectsRowsBack) {
    std::mt19937 gen(5);
    const Matrix m = random_matrix(gen, 4, 32);
    const Matrix q = orthonormal_rowspace_basis(m);
    ASSERT_EQ(q.rows(), 4u);
    EXPECT_LE(orthonormality_error(transpose(q)), 1e-10);
    // Projection of every row of m onto span(q) reproduces the row.
    const Matrix proj = triple_loop(triple_loop(m, transpose(q)), q);
    EXPECT_LE(max_abs_diff(proj, m), 1e-10);
}

TEST(Rng, ZeroStdGivesZeros) {
    Rng rng(1);
    const Matrix m = randn_matrix(rng, 5, 5, 0.0);
    for (double v : m.values()) EXPECT_EQ(v, 0.0);
}

TEST(Rng, NegativeStdRejected) {
    Rng rng(1);
    EXPECT_THROW(randn_matrix(rng, 2, 2, -1.0), ConfigError);
}

TEST(Rng, NormalMoments) {
    Rng rng(42);
    const Matrix m = randn_matrix(rng, 1000, 1000, 1.0);
    double sum = 0.0, sq = 0.0;
    for (double v : m.values()) {
        sum += v;
        sq += v * v;
    }
    const double n = 1e6;
    const double mean = sum / n;
    const double sd = std::sqrt(sq / n - mean * mean);
    EXPECT_NEAR(mean, 0.0, 0.01);
    EXPECT_NEAR(sd, 1.0, 0.01);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(99), b(99);
    EXPECT_EQ(randn_matrix(a, 30, 30, 0.5), randn_matrix(b, 30, 30, 0.5));
    Rng c(100);
    Rng d(99);
    EXPECT_FALSE(randn_matrix(c, 3, 3, 1.0) == randn_matrix(d, 3, 3, 1.0));
}

TEST(Rng, MatchesStandardReferenceValue) {
    // Guards the documented generator against silent changes: mt19937_64's
    // 10000th output for the default seed is fixed by the C++ standard.
    Rng rng(5489u);
    for (int i = 0; i < 9999; ++i) (void)rng.next_u64();
    EXPECT_EQ(rng.next_u64(), 9981545732273789042ULL);
}

TEST(Rng, BelowStaysInRange) {
    Rng rng(8);
    std::vector<int> hist(7, 0);
    for (int i = 0; i < 7000; ++i) {
        const auto v = rng.below(7);
        ASSERT_LT(v, 7u);
        ++hist[v];
    }
    for (int h : hist) EXPECT_GT(h, 800);
}

TEST(Rng, DeriveSeedSeparatesParts) {
    EXPECT_NE(derive_seed({1, 2}), derive_seed({2, 1}));
    EXPECT_NE(derive_seed({0}), derive_seed({0, 0}));
    EXPECT_EQ(derive_seed({3, 4, 5}), derive_seed({3, 4, 5}));
}

TEST(Cosine, Basic) {
    const std::vector<double> v{1.5, -2.0, 0.25};
    std::vector<double> neg = v;
    for (double& x : neg) x = -x;
    EXPECT_NEAR(cosine_similarity(v, v).value, 1.0, 1e-15);
    EXPECT_NEAR(cosine_similarity(v, neg).value, -1.0, 1e-15);
    EXPECT_NEAR(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{1, 1}).value, 0.7071, 1e-4);
}

TEST(Cosine, ZeroVectorIsFlagged) {
    const auto c = cosine_similarity(std::vector<double>{0, 0}, std::vector<double>{1, 1});
    EXPECT_EQ(c.value, 0.0);
    EXPECT_TRUE(c.degenerate);
    EXPECT_FALSE(cosine_similarity(std::vector<double>{1, 0}, std::vector<double>{0, 1}).degenerate);
}
