#include "rafl/cli.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "rafl/analysis.hpp"
#include "rafl/checkpoint.hpp"
#include "rafl/errors.hpp"
#include "rafl/gradcheck.hpp"
#include "rafl/text.hpp"

namespace rafl {

SettingMap parse_settings_file(std::string_view text) {
    SettingMap out;
    std::size_t line_no = 0;
    for (const auto& raw : split(text, '\n')) {
        ++line_no;
        std::string_view line = raw;
        if (auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
        }
        std::string key(trim(line.substr(0, eq)));
        std::replace(key.begin(), key.end(), '-', '_');
        out[key] = std::string(trim(line.substr(eq + 1)));
    }
    return out;
}

namespace {

bool apply_run_setting(RunSettings& s, const std::string& key, const std::string& value) {
    TrainOptions& t = s.train;
    if (key == "steps") t.steps = parse_u64(value, key);
    else if (key == "warmup") t.adam.warmup_steps = parse_u64(value, key);
    else if (key == "lr") t.adam.peak_lr = parse_double(value, key);
    else if (key == "weight_decay") t.adam.weight_decay = parse_double(value, key);
    else if (key == "batch") t.batch_size = parse_u64(value, key);
    else if (key == "seq_len") t.seq_len = parse_u64(value, key);
    else if (key == "eval_every") t.eval_every = parse_u64(value, key);
    else if (key == "eval_rounds") t.eval_rounds = parse_u64(value, key);
    else if (key == "eval_on_train") t.eval_on_train = parse_bool(value, key);
    else if (key == "checkpoint_every") t.checkpoint_every = parse_u64(value, key);
    else if (key == "mask_rate") t.mask_rate = parse_double(value, key);
    else if (key == "divergence_window") t.divergence_window = parse_u64(value, key);
    else if (key == "data_seed") t.data_seed = parse_u64(value, key);
    else if (key == "out_dir") t.out_dir = value;
    else if (key == "corpus") s.corpus = value;
    else if (key == "corpus_size") s.corpus_size = parse_u64(value, key);
    else if (key == "dev_fraction") s.dev_fraction = parse_double(value, key);
    else if (key == "seeds") s.seeds = parse_u64(value, key);
    else if (key == "examples") s.examples = parse_u64(value, key);
    else return false;
    return true;
}

void apply_layer(RunSettings& s, const SettingMap& layer) {
    for (const auto& [key, value] : layer) {
        if (key == "preset") continue;
        if (!apply_setting(s.model, key, value) && !apply_run_setting(s, key, value)) {
            throw ConfigError("unknown setting '" + key + "'");
        }
    }
}

} // namespace

RunSettings resolve_settings(const SettingMap& file, const SettingMap& flags) {
    RunSettings s;
    if (auto it = flags.find("preset"); it != flags.end()) s.preset = it->second;
    else if (auto it2 = file.find("preset"); it2 != file.end()) s.preset = it2->second;
    s.model = preset(s.preset);
    s.train.steps = 1000;
    s.train.eval_every = 100;
    s.train.batch_size = 8;
    s.train.seq_len = std::min<std::size_t>(24, s.model.max_seq_len);
    s.train.adam.peak_lr = 1e-3;
    apply_layer(s, file);
    apply_layer(s, flags);
    // A layer that changes the depth but not the mode gets the depth's default.
    const bool mode_given = file.contains("residual_mode") || flags.contains("residual_mode");
    if (!mode_given) s.model.residual_mode = default_residual_mode(s.model.layers);
    const bool warmup_given = file.contains("warmup") || flags.contains("warmup");
    if (!warmup_given) s.train.adam.warmup_steps = s.train.steps / 10;
    s.train.adam.total_steps = s.train.steps;
    if (s.train.eval_every == 0) throw ConfigError("eval_every must be positive");
    if (s.seeds == 0) throw ConfigError("seeds must be positive");
    if (!(s.dev_fraction >= 0.0 && s.dev_fraction < 1.0)) throw ConfigError("dev_fraction must lie in [0, 1)");
    s.model.validate();
    if (s.train.seq_len > s.model.max_seq_len) {
        throw ConfigError("seq_len " + std::to_string(s.train.seq_len) + " exceeds max_seq_len " +
                          std::to_string(s.model.max_seq_len));
    }
    return s;
}

std::string describe_settings(const RunSettings& s) {
    std::ostringstream out;
    out << "preset=" << s.preset << "\n";
    for (const auto& [k, v] : to_key_values(s.model)) out << k << "=" << v << "\n";
    const TrainOptions& t = s.train;
    out << "steps=" << t.steps << "\n"
        << "warmup=" << t.adam.warmup_steps << "\n"
        << "lr=" << format_double(t.adam.peak_lr) << "\n"
        << "weight_decay=" << format_double(t.adam.weight_decay) << "\n"
        << "batch=" << t.batch_size << "\n"
        << "seq_len=" << t.seq_len << "\n"
        << "eval_every=" << t.eval_every << "\n"
        << "eval_rounds=" << t.eval_rounds << "\n"
        << "eval_on_train=" << (t.eval_on_train ? "true" : "false") << "\n"
        << "checkpoint_every=" << t.checkpoint_every << "\n"
        << "mask_rate=" << format_double(t.mask_rate) << "\n"
        << "divergence_window=" << t.divergence_window << "\n"
        << "data_seed=" << t.data_seed << "\n"
        << "corpus=" << s.corpus << "\n"
        << "corpus_size=" << s.corpus_size << "\n"
        << "dev_fraction=" << format_double(s.dev_fraction) << "\n"
        << "seeds=" << s.seeds << "\n"
        << "examples=" << s.examples << "\n";
    return out.str();
}

Corpus load_corpus(const RunSettings& s) {
    const std::string prefix = "synth:";
    if (s.corpus.starts_with(prefix)) {
        SynthOptions opts;
        opts.dev_fraction = s.dev_fraction;
        return synth_corpus(parse_synth_kind(s.corpus.substr(prefix.size())), s.corpus_size, s.train.data_seed,
                            s.model.vocab_size, opts);
    }
    std::vector<std::filesystem::path> files;
    for (const auto& f : split(s.corpus, ',')) {
        if (!trim(f).empty()) files.emplace_back(std::string(trim(f)));
    }
    if (files.empty()) throw ConfigError("no corpus given");
    const Vocab vocab = Vocab::build(files, s.model.vocab_size);
    return load_text_corpus(files, vocab, s.dev_fraction, s.train.data_seed);
}

std::vector<Encoded> analysis_examples(const Corpus& corpus, std::size_t seq_len, std::size_t count) {
    const auto& pool = corpus.dev.empty() ? corpus.train : corpus.dev;
    std::vector<Encoded> out;
    for (std::size_t i = 0; i < pool.size() && out.size() < count; ++i) {
        out.push_back(encode_ids(corpus.sequences[pool[i]], {}, seq_len));
    }
    if (out.empty()) throw DataError("no examples to analyze");
    return out;
}

std::size_t compare_threads() {
    std::size_t n = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("RAFL_THREADS"); env && *env) {
        n = parse_u64(env, "RAFL_THREADS");
        if (n == 0) throw ConfigError("RAFL_THREADS must be positive");
    }
    return n;
}

std::vector<CompareRun> run_compare(const RunSettings& s, const Corpus& corpus, std::size_t threads) {
    std::vector<CompareRun> runs;
    for (std::size_t i = 0; i < s.seeds; ++i) {
        for (Variant v : {Variant::post_ln, Variant::pre_ln, Variant::realformer}) {
            CompareRun r;
            r.variant = v;
            r.seed_index = i;
            r.init_seed = s.model.seed + i;
            r.data_seed = s.train.data_seed + i;
            runs.push_back(std::move(r));
        }
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (std::size_t k = next++; k < runs.size(); k = next++) {
            try {
                CompareRun& r = runs[k];
                ModelConfig config = s.model;
                config.variant = r.variant;
                config.seed = r.init_seed;
                TrainOptions options = s.train;
                options.data_seed = r.data_seed;
                if (!options.out_dir.empty()) {
                    options.out_dir /= std::string(to_string(r.variant)) + "-" + std::to_string(r.seed_index);
                }
                r.result = train(config, corpus, options);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const std::size_t n = std::clamp<std::size_t>(threads, 1, runs.size());
    std::vector<std::thread> pool;
    for (std::size_t i = 1; i < n; ++i) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
    return runs;
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void prepare_out_dir(const RunSettings& s) {
    if (s.train.out_dir.empty()) return;
    std::filesystem::create_directories(s.train.out_dir);
    write_file(s.train.out_dir / "config.txt", describe_settings(s));
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return quantile(v, 0.5);
}

const MetricRow& last_row(const TrainResult& r) {
    if (r.log.empty()) throw UsageError("run produced no metrics; steps must be positive");
    return r.log.back();
}

int cmd_pretrain(const RunSettings& s, const std::filesystem::path& resume, std::ostream& out) {
    prepare_out_dir(s);
    const Corpus corpus = load_corpus(s);
    TrainState state = resume.empty() ? init_train_state(s.model, s.train)
                                      : from_checkpoint(load_checkpoint(resume), s.train);
    TrainResult r = train(corpus, s.train, std::move(state));
    if (s.train.out_dir.empty()) out << metrics_csv(r.log);
    if (!r.log.empty()) {
        const MetricRow& last = r.log.back();
        out << "step=" << last.step << " train_loss=" << format_double(last.train_loss)
            << " dev_loss=" << format_double(last.dev_loss) << " dev_mlm_acc=" << format_double(last.dev_mlm_acc)
            << "\n";
    }
    if (r.state.diverged) {
        out << "diverged at step " << r.state.diverged_at << "\n";
        return 3;
    }
    return 0;
}

int cmd_eval(RunSettings s, const std::filesystem::path& ckpt_path, std::ostream& out) {
    if (ckpt_path.empty()) throw UsageError("eval needs --checkpoint");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    s.model = ckpt.config;
    const Corpus corpus = load_corpus(s);
    const auto& indices = (s.train.eval_on_train || corpus.dev.empty()) ? corpus.train : corpus.dev;
    const EvalResult r = evaluate(ckpt.config, ckpt.params, corpus, indices, s.train);
    out << "step=" << ckpt.step << " dev_loss=" << format_double(r.loss)
        << " dev_mlm_acc=" << format_double(r.accuracy) << " masked=" << r.count << "\n";
    return 0;
}

int cmd_analyze(RunSettings s, const std::filesystem::path& ckpt_path, std::ostream& out) {
    if (ckpt_path.empty()) throw UsageError("analyze needs --checkpoint");
    if (s.train.out_dir.empty()) throw UsageError("analyze needs --out-dir");
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    s.model = ckpt.config;
    prepare_out_dir(s);
    const Corpus corpus = load_corpus(s);
    const auto examples = analysis_examples(corpus, s.train.seq_len, s.examples);
    const auto& dir = s.train.out_dir;

    const auto ent = collect_entropy(ckpt.config, ckpt.params, examples);
    export_records(ent, dir / "entropy_records.csv");
    export_summaries(summarize(ent, Metric::entropy), dir / "entropy_summary.csv");
    std::size_t jsd_count = 0;
    if (ckpt.config.layers >= 2) {
        const auto div = collect_jsd(ckpt.config, ckpt.params, examples);
        export_records(div, dir / "jsd_records.csv");
        export_summaries(summarize(div, Metric::jsd), dir / "jsd_summary.csv");
        jsd_count = div.size();
    }
    write_sidecar({file_crc32_hex(ckpt_path), examples.size(), s.train.seq_len}, dir / "analysis.json");
    out << "examples=" << examples.size() << " entropy_records=" << ent.size() << " jsd_records=" << jsd_count
        << "\n";
    return 0;
}

int cmd_gradcheck(const RunSettings& s, std::ostream& out) {
    GradcheckOptions opts;
    opts.data_seed = s.train.data_seed;
    const GradcheckReport r = gradcheck(s.model, opts);
    const bool ok = r.max_rel_err < 1e-4;
    out << "variant=" << to_string(s.model.variant) << " residual_mode=" << to_string(s.model.residual_mode)
        << " checked=" << r.checked << " max_rel_err=" << format_double(r.max_rel_err) << " at " << r.worst_path
        << "[" << r.worst_index << "] " << (ok ? "ok" : "FAILED") << "\n";
    return ok ? 0 : 3;
}

int cmd_compare(const RunSettings& s, std::ostream& out) {
    prepare_out_dir(s);
    const Corpus corpus = load_corpus(s);
    const auto runs = run_compare(s, corpus, compare_threads());

    std::string all = "variant,seed," + std::string(kMetricsHeader) + "\n";
    std::string table = "variant,seed,init_seed,data_seed,final_step,final_dev_loss,final_dev_mlm_acc,diverged,"
                        "diverged_at\n";
    std::map<Variant, std::vector<double>> finals;
    std::map<Variant, std::size_t> diverged;
    for (const auto& r : runs) {
        const std::string prefix = std::string(to_string(r.variant)) + "," + std::to_string(r.seed_index) + ",";
        const auto rows = metrics_csv(r.result.log);
        for (const auto& line : split(rows, '\n')) {
            if (!line.empty() && line != kMetricsHeader) all += prefix + line + "\n";
        }
        const MetricRow& last = last_row(r.result);
        const TrainState& st = r.result.state;
        table += prefix + std::to_string(r.init_seed) + "," + std::to_string(r.data_seed) + "," +
                 std::to_string(last.step) + "," + format_double(last.dev_loss) + "," +
                 format_double(last.dev_mlm_acc) + "," + (st.diverged ? "1" : "0") + "," +
                 std::to_string(st.diverged_at) + "\n";
        finals[r.variant].push_back(last.dev_mlm_acc);
        diverged[r.variant] += st.diverged ? 1 : 0;
    }

    std::vector<std::pair<Variant, double>> ranking;
    for (const auto& [v, accs] : finals) ranking.emplace_back(v, median(accs));
    std::stable_sort(ranking.begin(), ranking.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::string winner = "rank,variant,median_final_dev_mlm_acc,runs,diverged_runs\n";
    for (std::size_t i = 0; i < ranking.size(); ++i) {
        const Variant v = ranking[i].first;
        winner += std::to_string(i + 1) + "," + std::string(to_string(v)) + "," + format_double(ranking[i].second) +
                  "," + std::to_string(finals[v].size()) + "," + std::to_string(diverged[v]) + "\n";
    }

    if (!s.train.out_dir.empty()) {
        write_file(s.train.out_dir / "runs.csv", all);
        write_file(s.train.out_dir / "compare.csv", table);
        write_file(s.train.out_dir / "winner.csv", winner);
    }
    out << table << "\n" << winner;
    return 0;
}

// Flags shared by every subcommand; each stores into the flag layer under
// its config-file key.
void add_setting_flags(CLI::App& app, SettingMap& flags) {
    struct Flag {
        const char* name;
        const char* key;
        const char* help;
    };
    static constexpr Flag table[] = {
        {"--preset", "preset", "tiny, desk, small, base, large, xlarge"},
        {"--variant", "variant", "post_ln, pre_ln, realformer"},
        {"--residual-mode", "residual_mode", "sum or running_mean"},
        {"--steps", "steps", "training steps"},
        {"--warmup", "warmup", "warmup steps (default steps/10)"},
        {"--lr", "lr", "peak learning rate"},
        {"--batch", "batch", "sequences per step"},
        {"--seq-len", "seq_len", "tokens per sequence including [CLS]/[SEP]"},
        {"--dropout", "dropout", "dropout rate"},
        {"--seed", "seed", "model init seed"},
        {"--data-seed", "data_seed", "corpus, split, batching and masking seed"},
        {"--corpus", "corpus", "synth:copy, synth:bigram, or text files (comma separated)"},
        {"--corpus-size", "corpus_size", "synthetic corpus size"},
        {"--dev-fraction", "dev_fraction", "fraction of sequences held out"},
        {"--eval-every", "eval_every", "steps between metric rows"},
        {"--eval-on-train", "eval_on_train", "evaluate on the training split"},
        {"--checkpoint-every", "checkpoint_every", "steps between checkpoints (0: final only)"},
        {"--out-dir", "out_dir", "output directory"},
        {"--seeds", "seeds", "seeds per variant (compare)"},
        {"--examples", "examples", "examples to analyze"},
    };
    for (const auto& f : table) {
        const std::string key = f.key;
        app.add_option_function<std::string>(
            f.name, [&flags, key](const std::string& v) { flags[key] = v; }, f.help);
    }
}

} // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"RealFormer / Post-LN / Pre-LN masked language model toolkit", "rafl"};
    app.require_subcommand(1);
    SettingMap flags;
    std::string config_file;
    std::string checkpoint;

    auto* pretrain = app.add_subcommand("pretrain", "train a model and write checkpoints and metrics.csv");
    auto* eval = app.add_subcommand("eval", "MLM loss and accuracy of a checkpoint");
    auto* analyze = app.add_subcommand("analyze", "attention entropy and adjacent-layer JSD of a checkpoint");
    auto* grad = app.add_subcommand("gradcheck", "compare gradients against central differences");
    auto* compare = app.add_subcommand("compare", "train every variant over several seeds");
    for (auto* sub : {pretrain, eval, analyze, grad, compare}) {
        add_setting_flags(*sub, flags);
        sub->add_option("--config", config_file, "key=value settings file");
    }
    pretrain->add_option("--checkpoint", checkpoint, "resume from this checkpoint");
    eval->add_option("--checkpoint", checkpoint, "checkpoint to evaluate");
    analyze->add_option("--checkpoint", checkpoint, "checkpoint to analyze");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        const SettingMap file = config_file.empty() ? SettingMap{} : parse_settings_file(read_file(config_file));
        const RunSettings settings = resolve_settings(file, flags);
        if (pretrain->parsed()) return cmd_pretrain(settings, checkpoint, out);
        if (eval->parsed()) return cmd_eval(settings, checkpoint, out);
        if (analyze->parsed()) return cmd_analyze(settings, checkpoint, out);
        if (grad->parsed()) return cmd_gradcheck(settings, out);
        return cmd_compare(settings, out);
    } catch (const UsageError& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    } catch (const NumericError& e) {
        err << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }
}

} // namespace rafl
