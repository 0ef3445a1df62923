#include "rafl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "rafl/errors.hpp"
#include "rafl/text.hpp"

namespace rafl {

MaskedSequence mask_tokens(std::span<const TokenId> token_ids, Rng& rng, double mask_rate, std::size_t vocab_size) {
    if (!(mask_rate > 0.0 && mask_rate < 1.0)) throw ConfigError("mask rate must lie in (0, 1)");
    if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) throw ConfigError("vocab has no regular tokens");
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] >= kFirstRegularToken) maskable.push_back(i);
    }
    if (maskable.empty()) throw DataError("sequence has no maskable tokens");
    // The epsilon keeps products like 0.15·20 = 3.0000000000000004 from rounding up.
    const auto want = static_cast<std::size_t>(std::ceil(mask_rate * static_cast<double>(maskable.size()) - 1e-9));
    const std::size_t count = std::clamp<std::size_t>(want, 1, maskable.size());
    for (std::size_t i = 0; i < count; ++i) std::swap(maskable[i], maskable[i + rng.below(maskable.size() - i)]);
    maskable.resize(count);
    std::sort(maskable.begin(), maskable.end());

    MaskedSequence out;
    out.token_ids.assign(token_ids.begin(), token_ids.end());
    out.positions = maskable;
    const std::size_t regular = vocab_size - kFirstRegularToken;
    for (auto pos : maskable) {
        out.labels.push_back(token_ids[pos]);
        const double u = rng.uniform();
        if (u < 0.8) {
            out.token_ids[pos] = kMask;
        } else if (u < 0.9) {
            out.token_ids[pos] = static_cast<TokenId>(kFirstRegularToken + rng.below(regular));
        }
    }
    return out;
}

TrainingBatch make_batch(const Corpus& corpus, std::span<const std::size_t> sequence_indices, std::size_t seq_len,
                         Rng& rng, double mask_rate) {
    if (sequence_indices.empty()) throw DataError("empty batch");
    TrainingBatch batch;
    batch.input.batch = sequence_indices.size();
    batch.input.seq = seq_len;
    for (std::size_t b = 0; b < sequence_indices.size(); ++b) {
        const auto& seq = corpus.sequences.at(sequence_indices[b]);
        Encoded e = encode_ids(seq, {}, seq_len);
        MaskedSequence m = mask_tokens(e.token_ids, rng, mask_rate, corpus.vocab_size);
        batch.input.token_ids.insert(batch.input.token_ids.end(), m.token_ids.begin(), m.token_ids.end());
        batch.input.segment_ids.insert(batch.input.segment_ids.end(), e.segment_ids.begin(), e.segment_ids.end());
        batch.input.input_mask.insert(batch.input.input_mask.end(), e.input_mask.begin(), e.input_mask.end());
        for (std::size_t i = 0; i < m.positions.size(); ++i) {
            batch.masked_positions.push_back(b * seq_len + m.positions[i]);
            batch.masked_labels.push_back(m.labels[i]);
        }
    }
    return batch;
}

MlmLoss mlm_loss(Var logits, std::span<const TokenId> labels) {
    if (labels.empty()) throw DataError("mlm_loss: no masked positions");
    const Tensor& z = logits.value();
    if (z.rank() != 2 || z.dim(0) != labels.size()) {
        throw DimensionError("mlm_loss: logits " + to_string(z.shape()) + " for " + std::to_string(labels.size()) +
                             " labels");
    }
    std::vector<std::size_t> targets(labels.size());
    std::size_t correct = 0;
    const std::size_t classes = z.dim(1);
    for (std::size_t r = 0; r < labels.size(); ++r) {
        if (labels[r] < 0) throw DataError("mlm_loss: negative label");
        targets[r] = static_cast<std::size_t>(labels[r]);
        const double* row = z.data().data() + r * classes;
        const auto best = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
        if (best == targets[r]) ++correct;
    }
    MlmLoss out;
    out.loss = ops::cross_entropy(logits, targets);
    out.correct = correct;
    out.count = labels.size();
    out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    return out;
}

double lr_at(std::uint64_t step, const AdamWConfig& h) {
    if (step > h.total_steps) return 0.0;
    const auto s = static_cast<double>(step);
    if (step <= h.warmup_steps) {
        return h.warmup_steps == 0 ? h.peak_lr : h.peak_lr * s / static_cast<double>(h.warmup_steps);
    }
    const auto span = static_cast<double>(h.total_steps - h.warmup_steps);
    return h.peak_lr * static_cast<double>(h.total_steps - step) / span;
}

bool is_decay_exempt(std::string_view path) {
    const auto dot = path.rfind('.');
    const std::string_view leaf = dot == std::string_view::npos ? path : path.substr(dot + 1);
    return leaf == "gamma" || leaf == "beta" || leaf == "bias" || leaf == "b1" || leaf == "b2" ||
           leaf == "output_bias";
}

void adamw_step(ParameterStore& params, const GradientMap& grads, OptimizerState& state, double lr) {
    for (const auto& e : params.entries()) {
        auto it = grads.find(e.path);
        if (it == grads.end()) throw UsageError("adamw_step: no gradient for " + e.path);
        if (it->second.shape() != e.value.shape()) {
            throw DimensionError("adamw_step: gradient of " + e.path + " has shape " + to_string(it->second.shape()));
        }
        for (double g : it->second.data()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + e.path);
        }
    }
    const AdamWConfig& h = state.hyper;
    ++state.t;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (auto& e : params.entries()) {
        if (!state.m.contains(e.path)) {
            state.m.add(e.path, Tensor::zeros(e.value.shape()));
            state.v.add(e.path, Tensor::zeros(e.value.shape()));
        }
        Tensor& m = state.m.at(e.path);
        Tensor& v = state.v.at(e.path);
        const Tensor& g = grads.at(e.path);
        const double decay = is_decay_exempt(e.path) ? 0.0 : h.weight_decay;
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps);
            e.value[i] -= lr * (update + decay * e.value[i]);
        }
    }
}

void adamw_step(ParameterStore& params, const GradientMap& grads, OptimizerState& state) {
    adamw_step(params, grads, state, lr_at(state.t + 1, state.hyper));
}

namespace {

AdamWConfig schedule_for(const TrainOptions& options) {
    AdamWConfig h = options.adam;
    h.total_steps = options.steps;
    return h;
}

void check_options(const TrainOptions& o) {
    if (o.batch_size == 0) throw ConfigError("batch size must be positive");
    if (o.seq_len < 3) throw ConfigError("sequence length must be at least 3");
    if (o.eval_rounds == 0) throw ConfigError("eval rounds must be positive");
    if (o.adam.warmup_steps > o.steps && o.steps > 0) throw ConfigError("warmup exceeds total steps");
}

} // namespace

TrainState init_train_state(const ModelConfig& config, const TrainOptions& options) {
    config.validate();
    if (options.seq_len > config.max_seq_len) {
        throw ConfigError("sequence length " + std::to_string(options.seq_len) + " exceeds max_seq_len " +
                          std::to_string(config.max_seq_len));
    }
    TrainState s;
    s.config = config;
    s.params = init_parameters(config);
    s.optimizer.hyper = schedule_for(options);
    s.data_rng = Rng(derive_seed(options.data_seed, 0xDA7A));
    s.dropout_rng = Rng(derive_seed(config.seed, 0xD209));
    return s;
}

Checkpoint to_checkpoint(const TrainState& s) {
    Checkpoint c;
    c.config = s.config;
    c.step = s.step;
    c.params = s.params;
    for (const auto& e : s.optimizer.m.entries()) c.optimizer.add("m/" + e.path, e.value);
    for (const auto& e : s.optimizer.v.entries()) c.optimizer.add("v/" + e.path, e.value);
    c.state = {
        {"data_rng", s.data_rng.state()},
        {"dropout_rng", s.dropout_rng.state()},
        {"adam_t", s.optimizer.t},
        {"initial_loss", format_double(s.initial_loss)},
        {"above_initial", s.above_initial},
        {"diverged", s.diverged},
        {"diverged_at", s.diverged_at},
        {"window_loss", format_double(s.window_loss)},
        {"window_steps", s.window_steps},
    };
    return c;
}

TrainState from_checkpoint(const Checkpoint& c, const TrainOptions& options) {
    TrainState s;
    s.config = c.config;
    s.params = c.params;
    s.step = c.step;
    s.optimizer.hyper = schedule_for(options);
    for (const auto& e : c.optimizer.entries()) {
        if (e.path.starts_with("m/")) {
            s.optimizer.m.add(e.path.substr(2), e.value);
        } else if (e.path.starts_with("v/")) {
            s.optimizer.v.add(e.path.substr(2), e.value);
        }
    }
    try {
        const auto& st = c.state;
        s.data_rng.restore(st.at("data_rng").get<std::string>());
        s.dropout_rng.restore(st.at("dropout_rng").get<std::string>());
        s.optimizer.t = st.at("adam_t").get<std::uint64_t>();
        const auto initial = st.at("initial_loss").get<std::string>();
        s.initial_loss = initial == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_double(initial, "initial_loss");
        s.above_initial = st.at("above_initial").get<std::uint64_t>();
        s.diverged = st.at("diverged").get<bool>();
        s.diverged_at = st.at("diverged_at").get<std::uint64_t>();
        s.window_loss = parse_double(st.at("window_loss").get<std::string>(), "window_loss");
        s.window_steps = st.at("window_steps").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointError::Kind::malformed, std::string("checkpoint lacks training state: ") + e.what());
    }
    return s;
}

double batch_loss(const ModelConfig& config, const ParameterStore& params, const TrainingBatch& batch) {
    Tape tape;
    BoundModel model = bind_parameters(tape, params, config);
    ModelOutput out = encode(model, config, batch.input, {});
    Var logits = mlm_logits(model, config, out.hidden, batch.masked_positions);
    return mlm_loss(logits, batch.masked_labels).loss.value().item();
}

EvalResult evaluate(const ModelConfig& config, const ParameterStore& params, const Corpus& corpus,
                    std::span<const std::size_t> indices, const TrainOptions& options) {
    EvalResult r;
    if (indices.empty()) return r;
    Rng rng(derive_seed(options.data_seed, 0xE7A1));
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t round = 0; round < options.eval_rounds; ++round) {
        for (std::size_t start = 0; start < indices.size(); start += options.batch_size) {
            const auto chunk = indices.subspan(start, std::min(options.batch_size, indices.size() - start));
            TrainingBatch batch = make_batch(corpus, chunk, options.seq_len, rng, options.mask_rate);
            Tape tape;
            BoundModel model = bind_parameters(tape, params, config);
            ModelOutput out = encode(model, config, batch.input, {});
            MlmLoss l = mlm_loss(mlm_logits(model, config, out.hidden, batch.masked_positions), batch.masked_labels);
            loss_sum += l.loss.value().item() * static_cast<double>(l.count);
            correct += l.correct;
            r.count += l.count;
        }
    }
    r.loss = loss_sum / static_cast<double>(r.count);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(r.count);
    return r;
}

TrainResult train(const Corpus& corpus, const TrainOptions& options, TrainState state) {
    check_options(options);
    if (corpus.train.empty()) throw DataError("training split is empty");
    if (corpus.vocab_size > state.config.vocab_size) {
        throw ConfigError("corpus vocabulary (" + std::to_string(corpus.vocab_size) + ") exceeds model vocab_size (" +
                          std::to_string(state.config.vocab_size) + ")");
    }
    state.optimizer.hyper = schedule_for(options);
    const ModelConfig& config = state.config;
    const auto& eval_indices = (options.eval_on_train || corpus.dev.empty()) ? corpus.train : corpus.dev;
    if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

    TrainResult result;
    auto write_checkpoint = [&](const std::string& name) {
        if (!options.out_dir.empty()) save_checkpoint(to_checkpoint(state), options.out_dir / name);
    };

    std::vector<std::size_t> picks(options.batch_size);
    while (state.step < options.steps) {
        const std::uint64_t t = state.step + 1;
        for (auto& p : picks) p = corpus.train[state.data_rng.below(corpus.train.size())];
        TrainingBatch batch = make_batch(corpus, picks, options.seq_len, state.data_rng, options.mask_rate);

        Tape tape;
        BoundModel model = bind_parameters(tape, state.params, config);
        ModelOutput out = encode(model, config, batch.input, {true, &state.dropout_rng, false});
        MlmLoss l = mlm_loss(mlm_logits(model, config, out.hidden, batch.masked_positions), batch.masked_labels);
        const double loss = l.loss.value().item();
        const double lr = lr_at(t, state.optimizer.hyper);

        bool halted = !std::isfinite(loss);
        if (!halted) {
            GradientMap grads = tape.backward(l.loss);
            try {
                adamw_step(state.params, grads, state.optimizer, lr);
            } catch (const NumericError&) {
                halted = true;
            }
        }
        state.step = t;
        if (halted) {
            if (!state.diverged) state.diverged_at = t;
            state.diverged = true;
            result.log.push_back({t, lr, loss, std::nan(""), std::nan(""), true});
            break;
        }

        if (std::isnan(state.initial_loss)) state.initial_loss = loss;
        state.above_initial = loss > state.initial_loss ? state.above_initial + 1 : 0;
        if (!state.diverged && state.above_initial >= options.divergence_window) {
            state.diverged = true;
            state.diverged_at = t;
        }
        state.window_loss += loss;
        ++state.window_steps;

        if (t % options.eval_every == 0 || t == options.steps) {
            const EvalResult dev = evaluate(config, state.params, corpus, eval_indices, options);
            result.log.push_back({t, lr, state.window_loss / static_cast<double>(state.window_steps), dev.loss,
                                  dev.accuracy, state.diverged});
            state.window_loss = 0.0;
            state.window_steps = 0;
        }
        if (options.checkpoint_every && t % options.checkpoint_every == 0) {
            write_checkpoint("ckpt-" + std::to_string(t) + ".rafl");
        }
    }
    write_checkpoint("final.rafl");
    if (!options.out_dir.empty()) write_metrics_csv(options.out_dir / "metrics.csv", result.log);
    result.state = std::move(state);
    return result;
}

TrainResult train(const ModelConfig& config, const Corpus& corpus, const TrainOptions& options) {
    return train(corpus, options, init_train_state(config, options));
}

std::string metrics_csv(std::span<const MetricRow> log) {
    std::string out = std::string(kMetricsHeader) + "\n";
    for (const auto& r : log) {
        out += std::to_string(r.step) + "," + format_double(r.lr) + "," + format_double(r.train_loss) + "," +
               format_double(r.dev_loss) + "," + format_double(r.dev_mlm_acc) + "," + (r.diverged ? "1" : "0") + "\n";
    }
    return out;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricRow> log) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << metrics_csv(log);
}

} // namespace rafl
