#include "rafl/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "rafl/errors.hpp"
#include "rafl/text.hpp"

namespace rafl {

namespace {

void check_distribution(std::span<const double> p, std::string_view what) {
    if (p.empty()) throw DataError(std::string(what) + ": empty distribution");
    double sum = 0.0;
    for (double x : p) {
        if (!(x >= 0.0)) throw DataError(std::string(what) + ": negative or NaN probability");
        sum += x;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw DataError(std::string(what) + ": probabilities sum to " + format_double(sum));
    }
}

double kl_to_mixture(std::span<const double> p, std::span<const double> q) {
    double kl = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (p[i] > 0.0) kl += p[i] * std::log(p[i] / (0.5 * (p[i] + q[i])));
    }
    return kl;
}

// Row (layer, head, query) of [L, A, S, S] restricted to unpadded keys and renormalised.
void masked_row(const Tensor& probs, std::size_t l, std::size_t h, std::size_t s, std::span<const int> mask,
                std::vector<double>& out) {
    const std::size_t S = probs.dim(2);
    const double* row = probs.data().data() + ((l * probs.dim(1) + h) * S + s) * S;
    out.clear();
    double total = 0.0;
    for (std::size_t k = 0; k < S; ++k) {
        if (mask[k]) {
            out.push_back(row[k]);
            total += row[k];
        }
    }
    if (!(total > 0.0)) throw DataError("attention row has no mass on unpadded keys");
    for (double& x : out) x /= total;
}

void check_maps(const Tensor& probs, std::span<const int> mask) {
    if (probs.rank() != 4 || probs.dim(2) != probs.dim(3)) {
        throw DimensionError("attention maps must be [L, A, S, S], got " + to_string(probs.shape()));
    }
    if (mask.size() != probs.dim(2)) {
        throw DimensionError("input mask has " + std::to_string(mask.size()) + " entries for sequence length " +
                             std::to_string(probs.dim(2)));
    }
}

} // namespace

double entropy(std::span<const double> probs) {
    check_distribution(probs, "entropy");
    double h = 0.0;
    for (double p : probs) {
        if (p > 0.0) h -= p * std::log(p);
    }
    return std::max(h, 0.0);
}

double jsd(std::span<const double> p, std::span<const double> q) {
    if (p.size() != q.size()) {
        throw DimensionError("jsd: supports differ (" + std::to_string(p.size()) + " vs " + std::to_string(q.size()) +
                             ")");
    }
    check_distribution(p, "jsd");
    check_distribution(q, "jsd");
    return std::max(0.5 * kl_to_mixture(p, q) + 0.5 * kl_to_mixture(q, p), 0.0);
}

std::vector<AnalysisRecord> entropy_records(const Tensor& probs, std::span<const int> input_mask,
                                            std::size_t example_id) {
    check_maps(probs, input_mask);
    std::vector<AnalysisRecord> out;
    std::vector<double> row;
    for (std::size_t s = 0; s < probs.dim(2); ++s) {
        if (!input_mask[s]) continue;
        for (std::size_t l = 0; l < probs.dim(0); ++l) {
            for (std::size_t h = 0; h < probs.dim(1); ++h) {
                masked_row(probs, l, h, s, input_mask, row);
                out.push_back({example_id, s, l, h, entropy(row)});
            }
        }
    }
    return out;
}

std::vector<AnalysisRecord> jsd_records(const Tensor& probs, std::span<const int> input_mask,
                                        std::size_t example_id) {
    check_maps(probs, input_mask);
    if (probs.dim(0) < 2) throw UsageError("JSD between adjacent layers needs at least two layers");
    std::vector<AnalysisRecord> out;
    std::vector<double> upper, lower;
    for (std::size_t s = 0; s < probs.dim(2); ++s) {
        if (!input_mask[s]) continue;
        for (std::size_t l = 1; l < probs.dim(0); ++l) {
            for (std::size_t h = 0; h < probs.dim(1); ++h) {
                masked_row(probs, l, h, s, input_mask, upper);
                masked_row(probs, l - 1, h, s, input_mask, lower);
                out.push_back({example_id, s, l, h, jsd(upper, lower)});
            }
        }
    }
    return out;
}

std::vector<Tensor> attention_maps(const ModelConfig& config, const ParameterStore& params,
                                   std::span<const Encoded> examples) {
    std::vector<Tensor> maps;
    maps.reserve(examples.size());
    for (const auto& ex : examples) {
        Tape tape;
        BoundModel model = bind_parameters(tape, params, config);
        ModelInput input{1, ex.token_ids.size(), ex.token_ids, ex.segment_ids, ex.input_mask};
        ModelOutput out = encode(model, config, input, {});
        maps.push_back(out.encoder.stacked_probs(0));
    }
    return maps;
}

std::vector<AnalysisRecord> collect_entropy(const ModelConfig& config, const ParameterStore& params,
                                            std::span<const Encoded> examples) {
    std::vector<AnalysisRecord> out;
    const auto maps = attention_maps(config, params, examples);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        auto r = entropy_records(maps[i], examples[i].input_mask, i);
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

std::vector<AnalysisRecord> collect_jsd(const ModelConfig& config, const ParameterStore& params,
                                        std::span<const Encoded> examples) {
    if (config.layers < 2) throw UsageError("JSD between adjacent layers needs at least two layers");
    std::vector<AnalysisRecord> out;
    const auto maps = attention_maps(config, params, examples);
    for (std::size_t i = 0; i < maps.size(); ++i) {
        auto r = jsd_records(maps[i], examples[i].input_mask, i);
        out.insert(out.end(), r.begin(), r.end());
    }
    return out;
}

std::string_view to_string(Metric m) { return m == Metric::entropy ? "entropy" : "jsd"; }

std::string_view to_string(Color c) {
    switch (c) {
    case Color::blue: return "BLUE";
    case Color::yellow: return "YELLOW";
    case Color::red: return "RED";
    }
    return "?";
}

Thresholds thresholds(Metric m) { return m == Metric::entropy ? Thresholds{1.5, 4.5} : Thresholds{0.25, 0.75}; }

Color color_for(double median, Metric m) {
    const Thresholds t = thresholds(m);
    if (median < t.blue_below) return Color::blue;
    if (median > t.red_above) return Color::red;
    return Color::yellow;
}

double quantile(std::span<const double> sorted, double q) {
    if (sorted.empty()) throw DataError("quantile of an empty sample");
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

std::vector<HeadSummary> summarize(std::span<const AnalysisRecord> records, Metric metric) {
    if (records.empty()) throw DataError("summarize: no records");
    std::map<std::pair<std::size_t, std::size_t>, std::vector<double>> groups;
    for (const auto& r : records) groups[{r.layer, r.head}].push_back(r.value);

    std::vector<HeadSummary> out;
    for (auto& [key, values] : groups) {
        std::sort(values.begin(), values.end());
        HeadSummary s;
        s.layer = key.first;
        s.source_head = key.second;
        s.median = quantile(values, 0.5);
        s.q1 = quantile(values, 0.25);
        s.q3 = quantile(values, 0.75);
        s.color = color_for(s.median, metric);
        out.push_back(s);
    }
    // groups iterate by (layer, head), so each layer is a contiguous run in head order.
    for (auto begin = out.begin(); begin != out.end();) {
        auto end = std::find_if(begin, out.end(), [&](const HeadSummary& s) { return s.layer != begin->layer; });
        std::stable_sort(begin, end, [](const HeadSummary& a, const HeadSummary& b) { return a.median < b.median; });
        for (auto it = begin; it != end; ++it) it->head = static_cast<std::size_t>(it - begin);
        begin = end;
    }
    return out;
}

std::string records_csv(std::span<const AnalysisRecord> records) {
    std::string out = std::string(kRecordsHeader) + "\n";
    for (const auto& r : records) {
        out += std::to_string(r.example_id) + "," + std::to_string(r.token_index) + "," + std::to_string(r.layer) +
               "," + std::to_string(r.head) + "," + format_double(r.value) + "\n";
    }
    return out;
}

std::string summaries_csv(std::span<const HeadSummary> summaries) {
    std::string out = std::string(kSummaryHeader) + "\n";
    for (const auto& s : summaries) {
        out += std::to_string(s.layer) + "," + std::to_string(s.head) + "," + format_double(s.median) + "," +
               format_double(s.q1) + "," + format_double(s.q3) + "," + std::string(to_string(s.color)) + "\n";
    }
    return out;
}

std::vector<AnalysisRecord> parse_records_csv(std::string_view text) {
    std::vector<AnalysisRecord> out;
    bool header = true;
    for (const auto& line : split(text, '\n')) {
        const auto row = trim(line);
        if (row.empty()) continue;
        if (header) {
            if (row != kRecordsHeader) throw DataError("unexpected records header: " + std::string(row));
            header = false;
            continue;
        }
        const auto f = split(row, ',');
        if (f.size() != 5) throw DataError("malformed record row: " + std::string(row));
        out.push_back({parse_u64(f[0], "example_id"), parse_u64(f[1], "token_index"), parse_u64(f[2], "layer"),
                       parse_u64(f[3], "head"), parse_double(f[4], "value")});
    }
    if (header) throw DataError("records file has no header");
    return out;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace

void export_records(std::span<const AnalysisRecord> records, const std::filesystem::path& path) {
    write_text(path, records_csv(records));
}

void export_summaries(std::span<const HeadSummary> summaries, const std::filesystem::path& path) {
    write_text(path, summaries_csv(summaries));
}

void write_sidecar(const SidecarInfo& info, const std::filesystem::path& path) {
    nlohmann::json j;
    j["checkpoint_crc32"] = info.checkpoint_crc32;
    j["example_count"] = info.example_count;
    j["seq_len"] = info.seq_len;
    j["units"] = "nats";
    for (Metric m : {Metric::entropy, Metric::jsd}) {
        const Thresholds t = thresholds(m);
        j["thresholds"][std::string(to_string(m))] = {{"blue_below", t.blue_below}, {"red_above", t.red_above}};
    }
    j["note"] = "Bucket thresholds are calibrated for sequence length 512 and applied unscaled; at short "
                "sequence lengths the maximum entropy ln(seq_len) can sit below the RED threshold.";
    write_text(path, j.dump(2) + "\n");
}

} // namespace rafl
