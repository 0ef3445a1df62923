#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "rafl/corpus.hpp"
#include "rafl/model.hpp"

namespace rafl {

/// Shannon entropy in nats; 0·ln 0 = 0. Rejects negative entries and sums
/// further than 1e-6 from 1.
double entropy(std::span<const double> probs);

/// Jensen–Shannon divergence in nats, bounded by ln 2.
double jsd(std::span<const double> p, std::span<const double> q);

struct AnalysisRecord {
    std::size_t example_id = 0;
    std::size_t token_index = 0;
    std::size_t layer = 0;  // 0-based; for JSD the upper layer of the pair
    std::size_t head = 0;
    double value = 0.0;

    friend bool operator==(const AnalysisRecord&, const AnalysisRecord&) = default;
};

/// Records for one example from its attention probabilities [L, A, S, S].
/// Query rows and keys with input_mask 0 are dropped and each remaining row
/// is renormalised over the unpadded keys.
std::vector<AnalysisRecord> entropy_records(const Tensor& probs, std::span<const int> input_mask,
                                            std::size_t example_id);
/// Head i of layer l against head i of layer l−1, for l ≥ 1.
std::vector<AnalysisRecord> jsd_records(const Tensor& probs, std::span<const int> input_mask,
                                        std::size_t example_id);

/// Inference-mode attention probabilities of each example, [L, A, S, S].
std::vector<Tensor> attention_maps(const ModelConfig& config, const ParameterStore& params,
                                   std::span<const Encoded> examples);

std::vector<AnalysisRecord> collect_entropy(const ModelConfig& config, const ParameterStore& params,
                                            std::span<const Encoded> examples);
std::vector<AnalysisRecord> collect_jsd(const ModelConfig& config, const ParameterStore& params,
                                        std::span<const Encoded> examples);

enum class Metric { entropy, jsd };
enum class Color { blue, yellow, red };

std::string_view to_string(Metric m);
std::string_view to_string(Color c);

struct Thresholds {
    double blue_below;
    double red_above;
};

Thresholds thresholds(Metric m);
Color color_for(double median, Metric m);

struct HeadSummary {
    std::size_t layer = 0;
    std::size_t head = 0;         // column after sorting by median
    std::size_t source_head = 0;  // head index in the model
    double median = 0.0;
    double q1 = 0.0;
    double q3 = 0.0;
    Color color = Color::blue;
};

/// Linear-interpolation quantile of sorted values (q in [0, 1]).
double quantile(std::span<const double> sorted, double q);

/// Per (layer, head) median and quartiles; heads ordered by ascending median
/// within each layer, ties keeping head order.
std::vector<HeadSummary> summarize(std::span<const AnalysisRecord> records, Metric metric);

inline constexpr const char* kRecordsHeader = "example_id,token_index,layer,head,value";
inline constexpr const char* kSummaryHeader = "layer,head,median,q1,q3,color";

std::string records_csv(std::span<const AnalysisRecord> records);
std::string summaries_csv(std::span<const HeadSummary> summaries);
std::vector<AnalysisRecord> parse_records_csv(std::string_view text);

void export_records(std::span<const AnalysisRecord> records, const std::filesystem::path& path);
void export_summaries(std::span<const HeadSummary> summaries, const std::filesystem::path& path);

struct SidecarInfo {
    std::string checkpoint_crc32;
    std::size_t example_count = 0;
    std::size_t seq_len = 0;
};

void write_sidecar(const SidecarInfo& info, const std::filesystem::path& path);

} // namespace rafl
