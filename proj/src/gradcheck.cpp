#include "rafl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "rafl/errors.hpp"

namespace rafl {

TrainingBatch gradcheck_batch(const ModelConfig& config, const GradcheckOptions& options) {
    if (options.seq_len < 4 || options.seq_len > config.max_seq_len) {
        throw ConfigError("gradcheck sequence length must lie in [4, max_seq_len]");
    }
    Rng rng(derive_seed(options.data_seed, 0x6C));
    Corpus corpus;
    corpus.vocab_size = config.vocab_size;
    const std::size_t regular = config.vocab_size - kFirstRegularToken;
    std::vector<std::size_t> rows;
    for (std::size_t b = 0; b < options.batch; ++b) {
        // Every other row is shorter than the window so padding is exercised.
        const std::size_t len = options.seq_len - 2 - (b % 2 == 1 ? options.seq_len / 3 : 0);
        std::vector<TokenId> seq(len);
        for (auto& t : seq) t = static_cast<TokenId>(kFirstRegularToken + rng.below(regular));
        corpus.sequences.push_back(std::move(seq));
        rows.push_back(b);
    }
    return make_batch(corpus, rows, options.seq_len, rng, 0.3);
}

GradcheckReport gradcheck(const ModelConfig& config, const ParameterStore& params, const TrainingBatch& batch,
                          const GradcheckOptions& options) {
    GradcheckReport report;
    GradientMap grads;
    {
        Tape tape;
        BoundModel model = bind_parameters(tape, params, config);
        ModelOutput out = encode(model, config, batch.input, {});
        MlmLoss l = mlm_loss(mlm_logits(model, config, out.hidden, batch.masked_positions), batch.masked_labels);
        report.loss = l.loss.value().item();
        grads = tape.backward(l.loss);
    }
    ParameterStore probe = params;
    for (auto& e : probe.entries()) {
        const Tensor& analytic = grads.at(e.path);
        for (std::size_t i = 0; i < e.value.size(); ++i) {
            const double orig = e.value[i];
            auto at = [&](double offset) {
                e.value[i] = orig + offset;
                return batch_loss(config, probe, batch);
            };
            // Five-point central stencils at h and h/2 with one Richardson
            // step (O(h⁶) truncation), so h can be large enough that rounding
            // in the loss stays far below the tolerance.
            auto stencil = [&](double h) { return (at(-2 * h) - 8 * at(-h) + 8 * at(h) - at(2 * h)) / (12 * h); };
            const double coarse = stencil(options.step);
            const double numeric = (16 * stencil(options.step / 2) - coarse) / 15;
            e.value[i] = orig;
            const double a = analytic[i];
            const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
            ++report.checked;
            if (!(err <= report.max_rel_err)) {
                report.max_rel_err = err;
                report.worst_path = e.path;
                report.worst_index = i;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options) {
    ModelConfig c = config;
    c.dropout_rate = 0.0;
    return gradcheck(c, init_parameters(c), gradcheck_batch(c, options), options);
}

} // namespace rafl
