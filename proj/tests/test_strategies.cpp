#include <gtest/gtest.h>

#include <random>

#include "lora_cl/strategies.hpp"
#include "support.hpp"

using namespace lora_cl;
using testing_support::max_abs_diff;
using testing_support::random_matrix;
using testing_support::triple_loop;

namespace {

Matrix brute_select(const Matrix& prev, const Matrix& next) {
    Matrix out(prev.rows(), prev.cols());
    for (std::size_t i = 0; i < prev.rows(); ++i)
        for (std::size_t j = 0; j < prev.cols(); ++j) {
            const double p = prev(i, j), n = next(i, j);
            out(i, j) = std::abs(n) > std::abs(p) ? n : p;
        }
    return out;
}

// Random matrix where roughly a third of the entries copy `like` exactly or
// with flipped sign, to exercise ties.
Matrix with_ties(std::mt19937& gen, const Matrix& like) {
    Matrix m = random_matrix(gen, like.rows(), like.cols());
    std::uniform_int_distribution<int> pick(0, 5);
    for (std::size_t k = 0; k < m.values().size(); ++k) {
        const int p = pick(gen);
        if (p == 0) m.values()[k] = like.values()[k];
        if (p == 1) m.values()[k] = -like.values()[k];
    }
    return m;
}

struct Fixture {
    std::mt19937 gen{42};
    BaseWeights base{{{"layer0", Matrix()}}};
    StrategyOptions opt{2, 0.5, 1.0, OrthMode::project};

    explicit Fixture(std::size_t m = 6, std::size_t n = 8) {
        base = BaseWeights({{"layer0", random_matrix(gen, m, n)}});
    }

    // Simulated training: random factors of the right shape.
    LayerAdapters trained(const TrainContext& ctx) {
        LayerAdapters out = ctx.trainable;
        for (auto& ad : out) {
            ad.a = random_matrix(gen, ad.rank(), ad.in_dim());
            ad.b = random_matrix(gen, ad.out_dim(), ad.rank());
        }
        return out;
    }
};

} // namespace

TEST(MagmaxSelect, Examples) {
    EXPECT_EQ(magmax_select(Matrix{{1, -3}}, Matrix{{2, 1}}), (Matrix{{2, -3}}));
    const Matrix x{{0.5, -2, 0}, {1, 1, -1}};
    EXPECT_EQ(magmax_select(x, x), x);
}

TEST(MagmaxSelect, TieKeepsPrevious) {
    EXPECT_EQ(magmax_select(Matrix{{2, -2}}, Matrix{{-2, 2}}), (Matrix{{2, -2}}));
}

TEST(MagmaxSelect, MatchesBruteForce) {
    std::mt19937 gen(3);
    for (int trial = 0; trial < 20; ++trial) {
        const Matrix p = random_matrix(gen, 64, 64);
        const Matrix n = with_ties(gen, p);
        EXPECT_EQ(magmax_select(p, n), brute_select(p, n));
    }
}

TEST(MagmaxSelect, Associative) {
    std::mt19937 gen(4);
    for (int trial = 0; trial < 50; ++trial) {
        const Matrix x = random_matrix(gen, 5, 5);
        const Matrix y = trial % 2 ? with_ties(gen, x) : random_matrix(gen, 5, 5);
        const Matrix z = with_ties(gen, y);
        EXPECT_EQ(magmax_select(magmax_select(x, y), z), magmax_select(x, magmax_select(y, z)));
    }
}

TEST(MagmaxSelect, ShapeMismatch) {
    EXPECT_THROW(magmax_select(Matrix(2, 2), Matrix(2, 3)), ShapeError);
}

TEST(StrategyNames, RoundTrip) {
    for (StrategyKind k : all_strategies) EXPECT_EQ(parse_strategy(to_string(k)), k);
    EXPECT_THROW(parse_strategy("ewc"), ConfigError);
}

TEST(Strategies, FirstTaskIsIdenticalForAllKinds) {
    for (StrategyKind k : all_strategies) {
        Fixture f;
        StrategyState st(k, f.base, f.opt);
        Rng rng(5);
        const TrainContext ctx = st.begin_task(rng);
        EXPECT_EQ(ctx.effective_base, f.base) << to_string(k);
        EXPECT_EQ(merge(ctx.effective_base, ctx.trainable), f.base) << to_string(k);
    }
}

TEST(Strategies, SingleTaskFinalWeightsAgree) {
    Fixture f;
    Rng rng(1);
    StrategyState probe(StrategyKind::naive, f.base, f.opt);
    const LayerAdapters trained = f.trained(probe.begin_task(rng));
    std::optional<BaseWeights> first;
    for (StrategyKind k : all_strategies) {
        StrategyState st(k, f.base, f.opt);
        Rng r(1);
        st.begin_task(r);
        st.end_task(trained);
        const BaseWeights w = st.final_weights();
        if (!first) first = w;
        EXPECT_LE(max_abs_diff(w[0].weight, (*first)[0].weight), 1e-15) << to_string(k);
    }
}

TEST(Strategies, NaiveCarriesAdapterWithoutReinit) {
    Fixture f;
    StrategyState st(StrategyKind::naive, f.base, f.opt);
    Rng rng(2);
    const LayerAdapters t1 = f.trained(st.begin_task(rng));
    st.end_task(t1);
    const TrainContext ctx = st.begin_task(rng);
    EXPECT_EQ(ctx.trainable, t1);
    EXPECT_EQ(ctx.effective_base, f.base);
    st.end_task(f.trained(ctx));
    EXPECT_EQ(st.base(), f.base);
}

TEST(Strategies, MergeInitSumsDeltas) {
    Fixture f;
    StrategyState st(StrategyKind::merge_init, f.base, f.opt);
    Rng rng(3);
    Matrix oracle = f.base[0].weight;
    for (int t = 0; t < 2; ++t) {
        const LayerAdapters tr = f.trained(st.begin_task(rng));
        oracle = oracle + triple_loop(tr[0].b, tr[0].a);
        st.end_task(tr);
    }
    EXPECT_LE(max_abs_diff(st.final_weights()[0].weight, oracle), 1e-12);
}

TEST(Strategies, MergeInitZeroBLeavesBase) {
    Fixture f;
    StrategyState st(StrategyKind::merge_init, f.base, f.opt);
    Rng rng(4);
    st.end_task(st.begin_task(rng).trainable);
    EXPECT_EQ(st.final_weights(), f.base);
}

TEST(Strategies, MergeOrthAccumulatesA) {
    Fixture f(6, 40);
    StrategyState st(StrategyKind::merge_orth, f.base, f.opt);
    Rng rng(5);
    const LayerAdapters t1 = f.trained(st.begin_task(rng));
    st.end_task(t1);
    const LayerAdapters t2 = f.trained(st.begin_task(rng));
    st.end_task(t2);
    EXPECT_EQ((*st.accumulator())[0].a, t1[0].a + t2[0].a);

    // Task 3 starts orthogonal to A1 + A2.
    const TrainContext ctx = st.begin_task(rng);
    const Matrix sum = t1[0].a + t2[0].a;
    EXPECT_LE(max_abs_diff(triple_loop(ctx.trainable[0].a, transpose(sum)), Matrix(2, 2)), 1e-9);
    for (double v : ctx.trainable[0].b.values()) EXPECT_EQ(v, 0.0);
}

TEST(Strategies, MagmaxFirstTaskAdoptsTrained) {
    Fixture f;
    StrategyState st(StrategyKind::magmax, f.base, f.opt);
    Rng rng(6);
    const LayerAdapters tr = f.trained(st.begin_task(rng));
    st.end_task(tr);
    EXPECT_EQ((*st.accumulator())[0].a, tr[0].a);
    EXPECT_EQ((*st.accumulator())[0].b, tr[0].b);
}

TEST(Strategies, MagmaxSelectsFactorsNotDeltas) {
    // 2x2, rank 1: the selected factors multiply into something other than
    // the sum of the two task deltas.
    const BaseWeights base({{"w", Matrix(2, 2)}});
    StrategyState st(StrategyKind::magmax, base, {1, 0.5, 1.0, OrthMode::project});
    Rng rng(7);
    LayerAdapters t1 = st.begin_task(rng).trainable;
    t1[0].a = Matrix{{1, 0}};
    t1[0].b = Matrix{{1}, {0}};
    st.end_task(t1);
    LayerAdapters t2 = st.begin_task(rng).trainable;
    t2[0].a = Matrix{{0, 2}};
    t2[0].b = Matrix{{0}, {2}};
    st.end_task(t2);
    const Matrix got = st.final_weights()[0].weight;
    // A = [1, 2], B = [1; 2] after selection.
    EXPECT_EQ(got, (Matrix{{1, 2}, {2, 4}}));
    const Matrix sum_of_deltas{{1, 0}, {0, 4}};
    EXPECT_GT(max_abs_diff(got, sum_of_deltas), 0.5);
}

TEST(Strategies, MagmaxEffectiveBaseIsTemporary) {
    Fixture f;
    StrategyState st(StrategyKind::magmax, f.base, f.opt);
    Rng rng(8);
    const LayerAdapters t1 = f.trained(st.begin_task(rng));
    st.end_task(t1);
    const TrainContext ctx = st.begin_task(rng);
    EXPECT_EQ(ctx.effective_base, merge(f.base, t1));
    EXPECT_EQ(st.base(), f.base);
}

TEST(Strategies, MagmaxAccumulatorMagnitudeIsMonotone) {
    Fixture f;
    StrategyState st(StrategyKind::magmax, f.base, f.opt);
    Rng rng(9);
    LayerAdapters prev = *st.accumulator();
    for (int t = 0; t < 10; ++t) {
        st.end_task(f.trained(st.begin_task(rng)));
        const LayerAdapters& acc = *st.accumulator();
        for (std::size_t k = 0; k < acc[0].a.size(); ++k)
            EXPECT_GE(std::abs(acc[0].a.values()[k]), std::abs(prev[0].a.values()[k]));
        for (std::size_t k = 0; k < acc[0].b.size(); ++k)
            EXPECT_GE(std::abs(acc[0].b.values()[k]), std::abs(prev[0].b.values()[k]));
        prev = acc;
    }
}

TEST(Strategies, NoopTrainingKeepsBase) {
    for (StrategyKind k : {StrategyKind::merge_init, StrategyKind::merge_orth, StrategyKind::magmax}) {
        Fixture f(6, 40);
        StrategyState st(k, f.base, f.opt);
        Rng rng(10);
        for (int t = 0; t < 5; ++t) st.end_task(st.begin_task(rng).trainable);
        EXPECT_EQ(st.final_weights(), f.base) << to_string(k);
    }
}

TEST(Strategies, CallOrderContract) {
    Fixture f;
    StrategyState st(StrategyKind::merge_init, f.base, f.opt);
    Rng rng(11);
    EXPECT_THROW(st.final_weights(), ContractError);
    EXPECT_THROW(st.end_task(LayerAdapters{}), ContractError);
    const TrainContext ctx = st.begin_task(rng);
    EXPECT_THROW(st.begin_task(rng), ContractError);
    st.end_task(ctx.trainable);
    EXPECT_THROW(st.end_task(ctx.trainable), ContractError);
    EXPECT_EQ(st.completed_tasks(), 1u);
}

TEST(Strategies, EndTaskChecksShapes) {
    Fixture f;
    StrategyState st(StrategyKind::naive, f.base, f.opt);
    Rng rng(12);
    LayerAdapters tr = st.begin_task(rng).trainable;
    tr[0].a = Matrix(3, 8);
    tr[0].b = Matrix(6, 3);
    EXPECT_THROW(st.end_task(tr), ShapeError);
}

TEST(Strategies, StateHoldsOnlyWhatTheKindNeeds) {
    Fixture f;
    for (StrategyKind k : all_strategies) {
        StrategyState st(k, f.base, f.opt);
        Rng rng(13);
        for (int t = 0; t < 3; ++t) st.end_task(f.trained(st.begin_task(rng)));
        const bool merged = k == StrategyKind::merge_init || k == StrategyKind::merge_orth;
        const bool acc = k == StrategyKind::merge_orth || k == StrategyKind::magmax;
        EXPECT_EQ(st.merged().has_value(), merged) << to_string(k);
        EXPECT_EQ(st.accumulator().has_value(), acc) << to_string(k);
        EXPECT_EQ(st.live_adapters().has_value(), k == StrategyKind::naive) << to_string(k);
        if (acc) {
            EXPECT_EQ(st.accumulator()->size(), 1u);
        }
        EXPECT_EQ(st.completed_tasks(), 3u);
    }
}
