#pragma once

#include <cstdint>
#include <string>

#include "rafl/model.hpp"
#include "rafl/training.hpp"

namespace rafl {

struct GradcheckOptions {
    double step = 2e-3;
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error.
    double floor = 1e-7;
    std::size_t batch = 2;
    std::size_t seq_len = 8;
    std::uint64_t data_seed = 7;
};

struct GradcheckReport {
    double max_rel_err = 0.0;
    std::string worst_path;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    double loss = 0.0;
};

/// A fixed padded MLM batch drawn from random regular tokens.
TrainingBatch gradcheck_batch(const ModelConfig& config, const GradcheckOptions& options);

/// Compares tape gradients of the MLM loss (dropout off) with central
/// differences for every scalar of every parameter.
GradcheckReport gradcheck(const ModelConfig& config, const GradcheckOptions& options = {});
GradcheckReport gradcheck(const ModelConfig& config, const ParameterStore& params, const TrainingBatch& batch,
                          const GradcheckOptions& options);

} // namespace rafl
