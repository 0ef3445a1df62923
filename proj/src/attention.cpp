#include "rafl/attention.hpp"

#include <cmath>

#include "rafl/errors.hpp"

namespace rafl {

AttentionResult scaled_dot_attention(Var q, Var k, Var v, const Tensor* mask, std::optional<Var> prev,
                                     const ScoreCombine& combine, const DropoutSpec& dropout) {
    const Shape& qs = q.shape();
    const Shape& ks = k.shape();
    if (qs.size() < 2 || qs.back() != ks.back()) {
        throw DimensionError("attention: query " + to_string(qs) + " and key " + to_string(ks) + " widths differ");
    }
    const double d_k = static_cast<double>(qs.back());
    Var raw = ops::scale(ops::matmul(q, ops::transpose_last2(k)), 1.0 / std::sqrt(d_k));

    Var scores = raw;
    if (prev) {
        if (prev->shape() != raw.shape()) {
            throw DimensionError("attention: prev scores " + to_string(prev->shape()) + " do not match " +
                                 to_string(raw.shape()));
        }
        if (combine.layer_index < 2) throw UsageError("attention: prev scores given to the first layer");
        switch (combine.mode) {
            case ResidualMode::sum:
                scores = ops::add(raw, *prev);
                break;
            case ResidualMode::running_mean: {
                const double n = static_cast<double>(combine.layer_index);
                scores = ops::scale(ops::add(ops::scale(*prev, n - 1.0), raw), 1.0 / n);
                break;
            }
            case ResidualMode::none:
                throw UsageError("attention: prev scores given with residual mode none");
        }
    }

    Var probs = ops::softmax_rows(scores, mask);
    if (combine.include_mask && mask) {
        scores = ops::add(scores, q.tape->constant(broadcast_to(*mask, scores.shape())));
    }
    Var attended = ops::dropout(probs, dropout.rate, dropout.rng, dropout.training);
    Var context = ops::matmul(attended, v);
    return {context, raw, scores, probs};
}

namespace {

// [B, S, heads·d] -> [B, heads, S, d]
Var split_heads(Var x, std::size_t heads) {
    const Shape& s = x.shape();
    return ops::swap_axes_12(ops::reshape(x, {s[0], s[1], heads, s[2] / heads}));
}

// [B, heads, S, d] -> [B, S, heads·d]
Var merge_heads(Var x) {
    Var swapped = ops::swap_axes_12(x);
    const Shape& s = swapped.shape();
    return ops::reshape(swapped, {s[0], s[1], s[2] * s[3]});
}

} // namespace

MultiHeadResult multi_head(Var q, Var k, Var v, const AttentionParams& params, const Tensor* mask,
                           std::optional<Var> prev, const ScoreCombine& combine, const DropoutSpec& dropout) {
    const std::size_t h = params.heads;
    if (h == 0 || params.wq.size() != h || params.wk.size() != h || params.wv.size() != h) {
        throw DimensionError("multi_head: expected " + std::to_string(h) + " per-head projections");
    }
    if (params.wo.shape() != Shape{h * params.d_v, params.wo.shape().back()}) {
        throw DimensionError("multi_head: output projection " + to_string(params.wo.shape()) + " needs " +
                             std::to_string(h * params.d_v) + " input rows");
    }
    const bool unbatched = q.shape().size() == 2;
    auto batched = [](Var x) { return x.shape().size() == 2 ? ops::reshape(x, {1, x.shape()[0], x.shape()[1]}) : x; };
    q = batched(q);
    k = batched(k);
    v = batched(v);
    if (prev) {
        if (prev->shape().size() == 3 && unbatched) {
            const Shape ps = prev->shape();
            prev = ops::reshape(*prev, {1, ps[0], ps[1], ps[2]});
        }
        const Shape& ps = prev->shape();
        if (ps.size() != 4 || ps[1] != h) {
            throw DimensionError("multi_head: prev scores " + to_string(ps) + " need " + std::to_string(h) + " heads");
        }
    }

    Var qp = split_heads(ops::matmul(q, ops::concat_last(params.wq)), h);
    Var kp = split_heads(ops::matmul(k, ops::concat_last(params.wk)), h);
    Var vp = split_heads(ops::matmul(v, ops::concat_last(params.wv)), h);

    AttentionResult head = scaled_dot_attention(qp, kp, vp, mask, prev, combine, dropout);
    Var output = ops::matmul(merge_heads(head.context), params.wo);

    if (unbatched) {
        auto drop_batch = [](Var x) {
            Shape s = x.shape();
            s.erase(s.begin());
            return ops::reshape(x, s);
        };
        return {drop_batch(output), drop_batch(head.scores), drop_batch(head.probs), drop_batch(head.raw)};
    }
    return {output, head.scores, head.probs, head.raw};
}

Tensor attention_bias(const std::vector<int>& input_mask, std::size_t batch, std::size_t seq) {
    if (input_mask.size() != batch * seq) {
        throw DimensionError("attention_bias: mask has " + std::to_string(input_mask.size()) + " entries, expected " +
                             std::to_string(batch * seq));
    }
    Tensor bias({batch, 1, 1, seq});
    for (std::size_t i = 0; i < input_mask.size(); ++i) bias[i] = input_mask[i] ? 0.0 : kMaskBias;
    return bias;
}

} // namespace rafl
