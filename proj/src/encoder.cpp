#include "rafl/encoder.hpp"

#include <algorithm>

#include "rafl/errors.hpp"

namespace rafl {

Var ffn(Var x, const FfnParams& params) {
    const std::size_t width = x.shape().back();
    if (params.w1.shape().size() != 2 || params.w1.shape()[0] != width || params.w2.shape().size() != 2 ||
        params.w2.shape()[0] != params.w1.shape()[1] || params.w2.shape()[1] != width) {
        throw DimensionError("ffn: weights " + to_string(params.w1.shape()) + " / " + to_string(params.w2.shape()) +
                             " do not fit input " + to_string(x.shape()));
    }
    Var hidden = ops::add_bias(ops::matmul(x, params.w1), params.b1);
    hidden = params.activation == Activation::gelu ? ops::gelu(hidden) : ops::relu(hidden);
    return ops::add_bias(ops::matmul(hidden, params.w2), params.b2);
}

namespace {

void check_input(Var x, const LayerParams& params) {
    const Shape& s = x.shape();
    const std::size_t width = params.attn_ln_gamma.value().size();
    if ((s.size() != 2 && s.size() != 3) || s.back() != width) {
        throw DimensionError("layer input " + to_string(s) + " does not match hidden size " + std::to_string(width));
    }
}

LayerOutput post_ln_block(Var x, std::optional<Var> prev, const LayerParams& params, const LayerContext& ctx,
                          const ScoreCombine& combine) {
    check_input(x, params);
    MultiHeadResult attn = multi_head(x, x, x, params.attention, ctx.mask, prev, combine, ctx.dropout());
    Var h = ops::layer_norm(ops::add(x, ops::dropout(attn.output, ctx.dropout_rate, ctx.rng, ctx.training)),
                            params.attn_ln_gamma, params.attn_ln_beta, ctx.ln_eps);
    Var f = ops::dropout(ffn(h, params.ffn), ctx.dropout_rate, ctx.rng, ctx.training);
    Var out = ops::layer_norm(ops::add(h, f), params.ffn_ln_gamma, params.ffn_ln_beta, ctx.ln_eps);
    return {out, attn.scores, attn.probs, attn.raw};
}

} // namespace

LayerOutput post_ln_layer(Var x, const LayerParams& params, const LayerContext& ctx) {
    return post_ln_block(x, std::nullopt, params, ctx, {ResidualMode::none, 1, false});
}

LayerOutput pre_ln_layer(Var x, const LayerParams& params, const LayerContext& ctx) {
    check_input(x, params);
    Var normed = ops::layer_norm(x, params.attn_ln_gamma, params.attn_ln_beta, ctx.ln_eps);
    MultiHeadResult attn = multi_head(normed, normed, normed, params.attention, ctx.mask, std::nullopt,
                                      {ResidualMode::none, 1, false}, ctx.dropout());
    Var h = ops::add(x, ops::dropout(attn.output, ctx.dropout_rate, ctx.rng, ctx.training));
    Var f = ffn(ops::layer_norm(h, params.ffn_ln_gamma, params.ffn_ln_beta, ctx.ln_eps), params.ffn);
    Var out = ops::add(h, ops::dropout(f, ctx.dropout_rate, ctx.rng, ctx.training));
    return {out, attn.scores, attn.probs, attn.raw};
}

LayerOutput realformer_layer(Var x, std::optional<Var> prev, const LayerParams& params, const LayerContext& ctx,
                             ResidualMode mode, std::size_t layer_index) {
    if (layer_index == 0) throw UsageError("realformer_layer: layer_index is 1-based");
    if (prev.has_value() != (layer_index > 1)) {
        throw UsageError(layer_index == 1 ? "realformer_layer: prev scores given to layer 1"
                                          : "realformer_layer: layer " + std::to_string(layer_index) +
                                                " needs prev scores");
    }
    if (mode == ResidualMode::none) throw ConfigError("realformer_layer: residual mode must be sum or running_mean");
    return post_ln_block(x, prev, params, ctx, {mode, layer_index, ctx.residual_includes_mask});
}

Tensor EncoderOutput::stacked_probs(std::size_t b) const {
    if (probs.empty()) throw UsageError("stacked_probs on an empty encoder output");
    const Shape& s = probs.front().shape();  // [B, heads, S, S]
    if (b >= s[0]) throw DimensionError("stacked_probs: batch row out of range");
    const std::size_t block = s[1] * s[2] * s[3];
    Tensor out({probs.size(), s[1], s[2], s[3]});
    for (std::size_t l = 0; l < probs.size(); ++l) {
        const auto src = probs[l].value().data().subspan(b * block, block);
        std::copy(src.begin(), src.end(), out.data().begin() + static_cast<std::ptrdiff_t>(l * block));
    }
    return out;
}

EncoderOutput encoder_forward(Var x, const EncoderSpec& spec, std::span<const LayerParams> layers,
                              const LayerContext& ctx, std::optional<FinalNorm> final_norm) {
    if (layers.empty()) throw ConfigError("encoder_forward: no layers");
    if (final_norm.has_value() != (spec.variant == Variant::pre_ln)) {
        throw ConfigError("encoder_forward: a final LN is required for Pre-LN and only for Pre-LN");
    }
    if (x.shape().size() == 2) x = ops::reshape(x, {1, x.shape()[0], x.shape()[1]});

    EncoderOutput out;
    std::optional<Var> prev;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        LayerOutput layer;
        switch (spec.variant) {
            case Variant::post_ln:
                layer = post_ln_layer(x, layers[i], ctx);
                break;
            case Variant::pre_ln:
                layer = pre_ln_layer(x, layers[i], ctx);
                break;
            case Variant::realformer: {
                std::optional<Var> incoming = prev;
                if (incoming && spec.zero_residual_edge) {
                    incoming = x.tape->constant(Tensor::zeros(incoming->shape()));
                }
                layer = realformer_layer(x, incoming, layers[i], ctx, spec.residual_mode, i + 1);
                break;
            }
        }
        x = layer.hidden;
        prev = layer.scores;
        out.probs.push_back(layer.probs);
        out.scores.push_back(layer.scores);
        out.raw.push_back(layer.raw);
    }
    if (final_norm) x = ops::layer_norm(x, final_norm->gamma, final_norm->beta, ctx.ln_eps);
    out.hidden = x;
    return out;
}

} // namespace rafl
