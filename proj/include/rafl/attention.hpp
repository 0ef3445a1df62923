#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "rafl/autodiff.hpp"

namespace rafl {

/// How a layer's raw scores are merged with the scores handed up from the
/// layer below.
enum class ResidualMode { none, sum, running_mean };

struct ScoreCombine {
    ResidualMode mode = ResidualMode::sum;
    /// 1-based depth of the layer doing the combining; drives running_mean.
    std::size_t layer_index = 1;
    /// Fold the mask bias into the propagated scores (ablation; off by default).
    bool include_mask = false;
};

struct DropoutSpec {
    double rate = 0.0;
    Rng* rng = nullptr;
    bool training = false;
};

struct AttentionParams {
    std::vector<Var> wq, wk, wv;  // one [H, d] projection per head
    Var wo;                       // [heads·d_v, H]
    std::size_t heads = 0;
    std::size_t d_k = 0;
    std::size_t d_v = 0;
};

struct AttentionResult {
    Var context;  // probs·V
    Var raw;      // QKᵀ/√d_k
    Var scores;   // raw combined with prev; never carries the mask unless include_mask
    Var probs;    // softmax output before attention dropout
};

/// Scaled dot-product attention over [..., from, d] queries and [..., to, d]
/// keys/values, optionally on top of prev scores shaped [..., from, to]. The
/// mask is an additive bias broadcastable to [..., from, to].
AttentionResult scaled_dot_attention(Var q, Var k, Var v, const Tensor* mask, std::optional<Var> prev,
                                     const ScoreCombine& combine = {}, const DropoutSpec& dropout = {});

struct MultiHeadResult {
    Var output;  // [B, S, H]
    Var scores;  // [B, heads, S, S], the stream passed to the next layer
    Var probs;   // [B, heads, S, S]
    Var raw;     // [B, heads, S, S]
};

/// Multi-head attention on [B, S, H] (or [S, H]) inputs. prev, when given,
/// must be [B, heads, S, S] (or [heads, S, S]).
MultiHeadResult multi_head(Var q, Var k, Var v, const AttentionParams& params, const Tensor* mask,
                           std::optional<Var> prev, const ScoreCombine& combine = {},
                           const DropoutSpec& dropout = {});

/// [B, S] 0/1 input mask -> [B, 1, 1, S] additive bias.
Tensor attention_bias(const std::vector<int>& input_mask, std::size_t batch, std::size_t seq);

} // namespace rafl
