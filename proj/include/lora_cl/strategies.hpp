#pragma once

// The four continual personalization strategies as one state machine:
//
//   begin_task(rng) -> TrainContext   (caller trains ctx.trainable)
//   end_task(trained)
//   ...
//   final_weights()
//
// Between tasks the state never holds more than the frozen base, one merged
// copy of the weights and one adapter per layer.

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "lora_cl/adapter.hpp"

namespace lora_cl {

enum class StrategyKind { naive, merge_init, merge_orth, magmax };

inline constexpr StrategyKind all_strategies[] = {StrategyKind::naive, StrategyKind::merge_init,
                                                  StrategyKind::merge_orth, StrategyKind::magmax};

inline std::string_view to_string(StrategyKind k) {
    switch (k) {
    case StrategyKind::naive: return "naive";
    case StrategyKind::merge_init: return "merge_init";
    case StrategyKind::merge_orth: return "merge_orth";
    case StrategyKind::magmax: return "magmax";
    }
    return "?";
}

inline StrategyKind parse_strategy(std::string_view s) {
    for (StrategyKind k : all_strategies)
        if (to_string(k) == s) return k;
    throw ConfigError("unknown strategy '" + std::string(s) + "' (expected naive, merge_init, merge_orth or magmax)");
}

// Elementwise pick of the larger magnitude, sign kept from the chosen side.
// Equal magnitudes keep `prev`.
inline Matrix magmax_select(const Matrix& prev, const Matrix& next) {
    if (!prev.same_shape(next))
        throw ShapeError("magmax_select: " + prev.shape_str() + " vs " + next.shape_str());
    Matrix out = prev;
    auto o = out.values();
    auto n = next.values();
    for (std::size_t k = 0; k < o.size(); ++k)
        if (std::abs(n[k]) > std::abs(o[k])) o[k] = n[k];
    return out;
}

struct StrategyOptions {
    std::size_t rank = 4;
    double std_a = 0.5;
    double scale = 1.0;
    OrthMode orth_mode = OrthMode::project;
};

struct TrainContext {
    BaseWeights effective_base; // frozen while the task trains
    LayerAdapters trainable;    // one adapter per layer
};

class StrategyState {
public:
    StrategyState(StrategyKind kind, BaseWeights base, StrategyOptions opt)
        : kind_(kind), base_(std::move(base)), opt_(opt) {
        if (base_.size() == 0) throw ConfigError("strategy needs at least one layer");
        for (const auto& l : base_.layers()) detail::check_rank(l.weight.rows(), l.weight.cols(), opt_.rank);
        switch (kind_) {
        case StrategyKind::naive: break;
        case StrategyKind::merge_init: merged_ = base_; break;
        case StrategyKind::merge_orth:
            merged_ = base_;
            acc_ = zero_adapters();
            break;
        case StrategyKind::magmax: acc_ = zero_adapters(); break;
        }
        check_invariants();
    }

    StrategyKind kind() const noexcept { return kind_; }
    std::size_t completed_tasks() const noexcept { return task_index_; }
    bool in_task() const noexcept { return in_task_; }
    const BaseWeights& base() const noexcept { return base_; }
    const std::optional<BaseWeights>& merged() const noexcept { return merged_; }
    const std::optional<LayerAdapters>& live_adapters() const noexcept { return live_; }
    const std::optional<LayerAdapters>& accumulator() const noexcept { return acc_; }

    TrainContext begin_task(Rng& rng) {
        if (in_task_) throw ContractError("begin_task called twice without end_task");
        check_invariants();
        TrainContext ctx;
        switch (kind_) {
        case StrategyKind::naive:
            ctx.effective_base = base_;
            ctx.trainable = live_ ? *live_ : fresh_standard(rng);
            break;
        case StrategyKind::merge_init:
            ctx.effective_base = *merged_;
            ctx.trainable = fresh_standard(rng);
            break;
        case StrategyKind::merge_orth:
            ctx.effective_base = *merged_;
            ctx.trainable = task_index_ == 0 ? fresh_standard(rng) : fresh_orthogonal(rng);
            break;
        case StrategyKind::magmax:
            // Selected adapter merged only for the duration of this task.
            ctx.effective_base = merge(base_, *acc_);
            ctx.trainable = fresh_standard(rng);
            break;
        }
        in_task_ = true;
        return ctx;
    }

    void end_task(const LayerAdapters& trained) {
        if (!in_task_) throw ContractError("end_task called without a matching begin_task");
        check_shapes(trained);
        switch (kind_) {
        case StrategyKind::naive: live_ = trained; break;
        case StrategyKind::merge_init: *merged_ = merge(*merged_, trained); break;
        case StrategyKind::merge_orth:
            *merged_ = merge(*merged_, trained);
            for (std::size_t i = 0; i < trained.size(); ++i) (*acc_)[i].a += trained[i].a;
            break;
        case StrategyKind::magmax:
            for (std::size_t i = 0; i < trained.size(); ++i) {
                (*acc_)[i].a = magmax_select((*acc_)[i].a, trained[i].a);
                (*acc_)[i].b = magmax_select((*acc_)[i].b, trained[i].b);
            }
            break;
        }
        in_task_ = false;
        ++task_index_;
        check_invariants();
    }

    // Model after all completed tasks. Does not change the state, so it also
    // serves for evaluation at intermediate task boundaries.
    BaseWeights final_weights() const {
        if (task_index_ == 0) throw ContractError("final_weights needs at least one completed task");
        switch (kind_) {
        case StrategyKind::naive: return merge(base_, *live_);
        case StrategyKind::merge_init:
        case StrategyKind::merge_orth: return *merged_;
        case StrategyKind::magmax: return merge(base_, *acc_);
        }
        throw ContractError("unreachable strategy kind");
    }

private:
    LayerAdapters zero_adapters() const {
        LayerAdapters out;
        for (const auto& l : base_.layers())
            out.push_back({Matrix(opt_.rank, l.weight.cols()), Matrix(l.weight.rows(), opt_.rank), opt_.scale, l.name});
        return out;
    }

    LayerAdapters fresh_standard(Rng& rng) const {
        LayerAdapters out;
        for (const auto& l : base_.layers())
            out.push_back(init_standard(rng, l.weight.rows(), l.weight.cols(), opt_.rank, opt_.std_a, opt_.scale, l.name));
        return out;
    }

    LayerAdapters fresh_orthogonal(Rng& rng) const {
        LayerAdapters out;
        for (std::size_t i = 0; i < base_.size(); ++i) {
            const auto& l = base_[i];
            out.push_back(init_orthogonal(rng, (*acc_)[i].a, l.weight.rows(), l.weight.cols(), opt_.rank, opt_.std_a,
                                          opt_.orth_mode, opt_.scale, l.name));
        }
        return out;
    }

    void check_shapes(const LayerAdapters& trained) const {
        if (trained.size() != base_.size())
            throw ShapeError("end_task: " + std::to_string(trained.size()) + " adapters for " +
                             std::to_string(base_.size()) + " layers");
        for (std::size_t i = 0; i < trained.size(); ++i) {
            const auto& t = trained[i];
            const auto& w = base_[i].weight;
            t.validate();
            if (t.rank() != opt_.rank || t.out_dim() != w.rows() || t.in_dim() != w.cols())
                throw ShapeError("end_task: adapter for layer '" + base_[i].name + "' has A " + t.a.shape_str() +
                                 ", B " + t.b.shape_str() + " against weight " + w.shape_str());
        }
    }

    void check_invariants() const {
        const bool want_merged = kind_ == StrategyKind::merge_init || kind_ == StrategyKind::merge_orth;
        const bool want_acc = kind_ == StrategyKind::merge_orth || kind_ == StrategyKind::magmax;
        const bool want_live = kind_ == StrategyKind::naive && task_index_ > 0;
        if (merged_.has_value() != want_merged || acc_.has_value() != want_acc ||
            (kind_ == StrategyKind::naive ? live_.has_value() != want_live : live_.has_value()))
            throw ContractError(std::string("state does not match strategy ") + std::string(to_string(kind_)));
    }

    StrategyKind kind_;
    BaseWeights base_;
    StrategyOptions opt_;
    std::optional<BaseWeights> merged_;
    std::optional<LayerAdapters> live_;
    std::optional<LayerAdapters> acc_;
    std::size_t task_index_ = 0;
    bool in_task_ = false;
};

} // namespace lora_cl
