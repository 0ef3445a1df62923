#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "rafl/checkpoint.hpp"
#include "rafl/corpus.hpp"
#include "rafl/model.hpp"

namespace rafl {

struct MaskedSequence {
    std::vector<TokenId> token_ids;    // after replacement
    std::vector<std::size_t> positions;  // ascending
    std::vector<TokenId> labels;       // original ids at positions
};

/// Selects ⌈rate·maskable⌉ regular (id ≥ 5) tokens. Each selected token
/// becomes [MASK] with probability 0.8, a random regular id with 0.1, and is
/// left alone otherwise.
MaskedSequence mask_tokens(std::span<const TokenId> token_ids, Rng& rng, double mask_rate, std::size_t vocab_size);

struct TrainingBatch {
    ModelInput input;
    std::vector<std::size_t> masked_positions;  // flat b·seq + s
    std::vector<TokenId> masked_labels;
};

TrainingBatch make_batch(const Corpus& corpus, std::span<const std::size_t> sequence_indices, std::size_t seq_len,
                         Rng& rng, double mask_rate);

struct MlmLoss {
    Var loss;
    double accuracy = 0.0;
    std::size_t correct = 0;
    std::size_t count = 0;
};

/// Mean cross-entropy over masked rows, plus argmax accuracy.
MlmLoss mlm_loss(Var logits, std::span<const TokenId> labels);

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.01;
    double peak_lr = 1e-4;
    std::uint64_t warmup_steps = 0;
    std::uint64_t total_steps = 0;
};

struct OptimizerState {
    AdamWConfig hyper;
    std::uint64_t t = 0;
    ParameterStore m;
    ParameterStore v;
};

/// Linear warmup from 0 to peak over warmup_steps, then linear decay to 0 at
/// total_steps; 0 beyond.
double lr_at(std::uint64_t step, const AdamWConfig& hyper);
inline double lr_at(std::uint64_t step, const OptimizerState& state) { return lr_at(step, state.hyper); }

/// LayerNorm parameters and biases are exempt from weight decay.
bool is_decay_exempt(std::string_view path);

/// One bias-corrected Adam update with decoupled weight decay at the given
/// learning rate. Non-finite gradients abort before any parameter changes.
void adamw_step(ParameterStore& params, const GradientMap& grads, OptimizerState& state, double lr);
/// Same, with lr taken from the schedule at the incremented step.
void adamw_step(ParameterStore& params, const GradientMap& grads, OptimizerState& state);

struct TrainOptions {
    std::uint64_t steps = 0;
    std::uint64_t eval_every = 100;
    std::size_t batch_size = 8;
    std::size_t seq_len = 32;
    double mask_rate = 0.15;
    AdamWConfig adam;  // total_steps is taken from steps
    std::uint64_t data_seed = 0;
    /// Independent masking draws per evaluation sequence.
    std::size_t eval_rounds = 1;
    /// Evaluate on the training split ("held-in") instead of dev.
    bool eval_on_train = false;
    std::uint64_t checkpoint_every = 0;
    std::filesystem::path out_dir;  // empty: write nothing
    std::size_t divergence_window = 50;
};

struct MetricRow {
    std::uint64_t step = 0;
    double lr = 0.0;
    double train_loss = 0.0;
    double dev_loss = 0.0;
    double dev_mlm_acc = 0.0;
    bool diverged = false;
};

/// Everything needed to continue a run bit-exactly.
struct TrainState {
    ModelConfig config;
    ParameterStore params;
    OptimizerState optimizer;
    Rng data_rng;
    Rng dropout_rng;
    std::uint64_t step = 0;
    double initial_loss = std::numeric_limits<double>::quiet_NaN();
    std::uint64_t above_initial = 0;
    bool diverged = false;
    std::uint64_t diverged_at = 0;
    double window_loss = 0.0;
    std::uint64_t window_steps = 0;
};

TrainState init_train_state(const ModelConfig& config, const TrainOptions& options);
Checkpoint to_checkpoint(const TrainState& state);
TrainState from_checkpoint(const Checkpoint& ckpt, const TrainOptions& options);

struct EvalResult {
    double loss = 0.0;
    double accuracy = 0.0;
    std::size_t count = 0;
};

/// Inference-mode MLM metrics over the given sequences with a fixed masking
/// seed, so repeated calls see identical masks.
EvalResult evaluate(const ModelConfig& config, const ParameterStore& params, const Corpus& corpus,
                    std::span<const std::size_t> indices, const TrainOptions& options);

/// Loss of one batch in inference mode (no parameter updates).
double batch_loss(const ModelConfig& config, const ParameterStore& params, const TrainingBatch& batch);

struct TrainResult {
    std::vector<MetricRow> log;
    TrainState state;
};

/// Runs until state.step reaches options.steps. Logs every eval_every steps
/// and at the last step. Divergence (loss above the first step's loss for
/// divergence_window consecutive steps, or any non-finite loss) is flagged,
/// not fatal; a non-finite loss ends the run early.
TrainResult train(const Corpus& corpus, const TrainOptions& options, TrainState state);
TrainResult train(const ModelConfig& config, const Corpus& corpus, const TrainOptions& options);

inline constexpr const char* kMetricsHeader = "step,lr,train_loss,dev_loss,dev_mlm_acc,diverged";
std::string metrics_csv(std::span<const MetricRow> log);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> log);

} // namespace rafl
