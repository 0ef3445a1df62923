#pragma once

#include <optional>
#include <span>
#include <vector>

#include "rafl/attention.hpp"

namespace rafl {

enum class Variant { post_ln, pre_ln, realformer };
enum class Activation { gelu, relu };

struct FfnParams {
    Var w1, b1;  // [H, I], [I]
    Var w2, b2;  // [I, H], [H]
    Activation activation = Activation::gelu;
};

struct LayerParams {
    AttentionParams attention;
    Var attn_ln_gamma, attn_ln_beta;
    FfnParams ffn;
    Var ffn_ln_gamma, ffn_ln_beta;
};

/// Per-forward settings shared by every layer.
struct LayerContext {
    const Tensor* mask = nullptr;  // additive bias broadcastable to [B, heads, S, S]
    double ln_eps = 1e-12;
    double dropout_rate = 0.0;
    Rng* rng = nullptr;
    bool training = false;
    bool residual_includes_mask = false;

    DropoutSpec dropout() const { return {dropout_rate, rng, training}; }
};

struct LayerOutput {
    Var hidden;
    Var scores;  // propagated attention scores
    Var probs;
    Var raw;
};

/// Position-wise σ(x·W1 + b1)·W2 + b2.
Var ffn(Var x, const FfnParams& params);

LayerOutput post_ln_layer(Var x, const LayerParams& params, const LayerContext& ctx);
LayerOutput pre_ln_layer(Var x, const LayerParams& params, const LayerContext& ctx);
/// Post-LN wiring whose attention adds prev scores before the softmax. prev
/// must be absent exactly when layer_index (1-based) is 1.
LayerOutput realformer_layer(Var x, std::optional<Var> prev, const LayerParams& params, const LayerContext& ctx,
                             ResidualMode mode, std::size_t layer_index);

struct EncoderSpec {
    Variant variant = Variant::post_ln;
    ResidualMode residual_mode = ResidualMode::none;
    /// Feed zeros instead of the real score stream (equivalence checks).
    bool zero_residual_edge = false;
};

struct FinalNorm {
    Var gamma, beta;
};

struct EncoderOutput {
    Var hidden;
    std::vector<Var> probs;   // per layer, [B, heads, S, S]
    std::vector<Var> scores;  // per layer, propagated scores
    std::vector<Var> raw;     // per layer, QKᵀ/√d_k

    /// Attention probabilities of batch row b stacked as [L, heads, S, S].
    Tensor stacked_probs(std::size_t b = 0) const;
};

/// Runs the variant's layer stack. Pre-LN needs final_norm, applied to the top
/// output; the other variants must not pass one.
EncoderOutput encoder_forward(Var x, const EncoderSpec& spec, std::span<const LayerParams> layers,
                              const LayerContext& ctx, std::optional<FinalNorm> final_norm = std::nullopt);

} // namespace rafl
