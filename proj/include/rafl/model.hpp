#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "rafl/encoder.hpp"
#include "rafl/tokens.hpp"

namespace rafl {

struct ModelConfig {
    std::size_t layers = 2;        // L
    std::size_t hidden = 16;       // H
    std::size_t heads = 2;         // A
    std::size_t intermediate = 32; // I
    Variant variant = Variant::realformer;
    ResidualMode residual_mode = ResidualMode::sum;
    std::size_t vocab_size = 32;
    std::size_t max_seq_len = 32;
    std::size_t type_vocab_size = 2;
    double dropout_rate = 0.1;
    Activation activation = Activation::gelu;
    std::uint64_t seed = 0;
    bool residual_includes_mask = false;
    /// Reserved for a sentence-pair head; no such head is built.
    bool next_sentence = false;
    double ln_eps = 1e-12;
    double init_std = 0.02;

    /// Throws ConfigError on any violated invariant.
    void validate() const;
    /// residual_mode for RealFormer, none for the baselines.
    ResidualMode effective_residual_mode() const;
    std::size_t head_width() const { return hidden / heads; }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// sum up to 24 layers, running_mean beyond.
ResidualMode default_residual_mode(std::size_t layers);

/// Architecture presets: small/base/large/xlarge follow the published BERT
/// sizes; tiny and desk are desk-scale sizes for tests and quick runs.
ModelConfig preset(std::string_view name);

std::string_view to_string(Variant v);
std::string_view to_string(ResidualMode m);
std::string_view to_string(Activation a);
Variant parse_variant(std::string_view s);
ResidualMode parse_residual_mode(std::string_view s);
Activation parse_activation(std::string_view s);

/// Flat key=value view of a config, used by config files, checkpoints and
/// provenance echoes.
std::vector<std::pair<std::string, std::string>> to_key_values(const ModelConfig& config);
/// Applies one key=value; returns false if the key is not a model key.
bool apply_setting(ModelConfig& config, std::string_view key, std::string_view value);

nlohmann::json to_json(const ModelConfig& config);
ModelConfig config_from_json(const nlohmann::json& j);

/// Named tensors in insertion order.
class ParameterStore {
public:
    struct Entry {
        std::string path;
        Tensor value;
        friend bool operator==(const Entry&, const Entry&) = default;
    };

    void add(std::string path, Tensor value);
    bool contains(std::string_view path) const;
    const Tensor& at(std::string_view path) const;
    Tensor& at(std::string_view path);

    std::span<const Entry> entries() const { return entries_; }
    std::span<Entry> entries() { return entries_; }
    std::size_t size() const { return entries_.size(); }
    /// Total scalar count.
    std::size_t parameter_count() const;

    friend bool operator==(const ParameterStore& a, const ParameterStore& b) { return a.entries_ == b.entries_; }

private:
    std::vector<Entry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Canonical (path, shape) list for a config, in store order.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& config);
std::size_t parameter_count(const ModelConfig& config);

/// Truncated normal (±2 std) weights, zero biases and LN betas, unit LN
/// gammas. Pre-LN scales the residual-branch output projections by 1/√(2L).
ParameterStore init_parameters(const ModelConfig& config);

/// Parameters placed on a tape as named leaves.
struct BoundModel {
    Var token_embedding, position_embedding, segment_embedding;
    Var embed_ln_gamma, embed_ln_beta;
    std::vector<LayerParams> layers;
    std::optional<FinalNorm> final_norm;
    Var mlm_weight, mlm_bias, mlm_ln_gamma, mlm_ln_beta, mlm_output_bias;
};

BoundModel bind_parameters(Tape& tape, const ParameterStore& store, const ModelConfig& config);

/// Packed batch of sequences, row-major [batch, seq].
struct ModelInput {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::vector<TokenId> token_ids;
    std::vector<TokenId> segment_ids;
    std::vector<int> input_mask;
};

struct RunOptions {
    bool training = false;
    Rng* rng = nullptr;
    bool zero_residual_edge = false;
};

/// Token + position + segment embeddings, LN, dropout. Returns [B, S, H].
Var embed(const BoundModel& model, const ModelConfig& config, const ModelInput& input, const RunOptions& run);

/// MLM head over flat positions (row b·S + s of the [B, S, H] hidden states):
/// dense, activation, LN, then the tied token embedding plus output bias.
Var mlm_logits(const BoundModel& model, const ModelConfig& config, Var hidden,
               std::span<const std::size_t> positions);

struct ModelOutput {
    Var hidden;  // [B, S, H]
    EncoderOutput encoder;
};

ModelOutput encode(const BoundModel& model, const ModelConfig& config, const ModelInput& input,
                   const RunOptions& run);

} // namespace rafl
