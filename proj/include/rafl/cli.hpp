#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "rafl/corpus.hpp"
#include "rafl/model.hpp"
#include "rafl/training.hpp"

namespace rafl {

/// Model plus run settings after applying preset, config file and flags.
struct RunSettings {
    std::string preset = "desk";
    ModelConfig model;
    TrainOptions train;
    std::string corpus = "synth:copy";
    std::size_t corpus_size = 2000;
    double dev_fraction = 0.1;
    std::size_t seeds = 3;
    std::size_t examples = 64;  // analyze
};

using SettingMap = std::map<std::string, std::string>;

/// key=value lines; '#' starts a comment.
SettingMap parse_settings_file(std::string_view text);

/// Preset first, then the file settings, then the flag settings. The preset
/// itself may be named in either layer.
RunSettings resolve_settings(const SettingMap& file, const SettingMap& flags);

/// Every effective key=value, one per line, in a fixed order.
std::string describe_settings(const RunSettings& settings);

/// Builds the corpus named by settings.corpus: "synth:copy", "synth:bigram",
/// or comma-separated text files (vocabulary capped at the model vocab size).
Corpus load_corpus(const RunSettings& settings);

/// Examples for analysis: the dev split (the train split when dev is empty),
/// encoded at the run's sequence length.
std::vector<Encoded> analysis_examples(const Corpus& corpus, std::size_t seq_len, std::size_t count);

struct CompareRun {
    Variant variant;
    std::size_t seed_index = 0;
    std::uint64_t init_seed = 0;
    std::uint64_t data_seed = 0;
    TrainResult result;
};

/// All three variants × settings.seeds. Runs at the same seed index share
/// the data seed; init seeds are model.seed + index.
std::vector<CompareRun> run_compare(const RunSettings& settings, const Corpus& corpus, std::size_t threads);

/// Threads for compare: RAFL_THREADS if set, else the hardware count.
std::size_t compare_threads();

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

} // namespace rafl
