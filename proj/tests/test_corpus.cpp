#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "rafl/corpus.hpp"
#include "rafl/errors.hpp"

using namespace rafl;
namespace fs = std::filesystem;

namespace {

fs::path write_temp(const std::string& name, const std::string& text) {
    fs::path dir = fs::temp_directory_path() / "rafl_test_corpus";
    fs::create_directories(dir);
    std::ofstream(dir / name, std::ios::binary | std::ios::trunc) << text;
    return dir / name;
}

} // namespace

TEST_CASE("tokenize") {
    CHECK(tokenize("Hello, World!  it's") ==
          std::vector<std::string>{"hello", ",", "world", "!", "it", "'", "s"});
    CHECK(tokenize("   ").empty());
}

TEST_CASE("vocabulary ordering") {
    const std::string texts[] = {"a b b"};
    Vocab v = Vocab::build_from_texts(texts, 7);
    CHECK(v.size() == 7);
    CHECK(v.token(0) == "[PAD]");
    CHECK(v.token(1) == "[UNK]");
    CHECK(v.token(2) == "[CLS]");
    CHECK(v.token(3) == "[SEP]");
    CHECK(v.token(4) == "[MASK]");
    CHECK(v.token(5) == "b");
    CHECK(v.token(6) == "a");
    CHECK(Vocab::build_from_texts(texts, 7) == v);

    const std::string tie[] = {"y x"};
    Vocab t = Vocab::build_from_texts(tie, 10);
    CHECK(t.id("x") == 5);
    CHECK(t.id("y") == 6);
    CHECK(t.id("zzz") == kUnk);

    const std::string many[] = {"c c c b b a"};
    CHECK(Vocab::build_from_texts(many, 6).size() == 6);  // cap keeps only "c"
    CHECK_THROWS_AS(Vocab::build_from_texts(many, 4), ConfigError);
    const std::string none[] = {"   "};
    CHECK_THROWS_AS(Vocab::build_from_texts(none, 10), DataError);
}

TEST_CASE("vocabulary from files, save and load") {
    const fs::path f = write_temp("v.txt", "the cat . the dog .\n");
    const fs::path files[] = {f};
    Vocab v = Vocab::build(files, 20);
    CHECK(v.id(".") == 5);  // tie on count, lexicographic
    CHECK(v.id("the") == 6);
    const fs::path saved = write_temp("vocab.txt", "");
    v.save(saved);
    CHECK(Vocab::load(saved) == v);
    const fs::path missing[] = {fs::temp_directory_path() / "rafl_no_such_file.txt"};
    CHECK_THROWS_AS(Vocab::build(missing, 20), IoError);
}

TEST_CASE("encode layouts") {
    const std::string texts[] = {"the cat sat on the mat"};
    Vocab v = Vocab::build_from_texts(texts, 30);
    Encoded single = encode("the cat", "", v, 6);
    CHECK(single.token_ids == std::vector<TokenId>{kCls, v.id("the"), v.id("cat"), kSep, kPad, kPad});
    CHECK(single.segment_ids == std::vector<TokenId>{0, 0, 0, 0, 0, 0});
    CHECK(single.input_mask == std::vector<int>{1, 1, 1, 1, 0, 0});

    Encoded pair = encode("the cat sat on", "the mat", v, 7);
    CHECK(pair.token_ids.size() == 7);
    CHECK(std::count(pair.input_mask.begin(), pair.input_mask.end(), 1) == 7);
    CHECK(pair.token_ids.front() == kCls);
    CHECK(pair.token_ids.back() == kSep);
    // the longer first segment was trimmed to fit
    CHECK(pair.token_ids == std::vector<TokenId>{kCls, v.id("the"), v.id("cat"), kSep, v.id("the"), v.id("mat"), kSep});
    CHECK(pair.segment_ids == std::vector<TokenId>{0, 0, 0, 0, 1, 1, 1});

    CHECK(decode(encode("the cat sat", "", v, 8).token_ids, v) == std::vector<std::string>{"the", "cat", "sat"});
    CHECK(decode(encode("the dog", "", v, 8).token_ids, v) == std::vector<std::string>{"the", "[UNK]"});
}

TEST_CASE("text corpus split") {
    std::string text;
    for (int i = 0; i < 20; ++i) text += "line " + std::to_string(i) + " here\n";
    const fs::path files[] = {write_temp("c.txt", text)};
    Vocab v = Vocab::build(files, 40);
    Corpus c = load_text_corpus(files, v, 0.25, 3);
    CHECK(c.sequences.size() == 20);
    CHECK(c.dev.size() == 5);
    CHECK(c.train.size() == 15);
    std::vector<std::size_t> all = c.train;
    all.insert(all.end(), c.dev.begin(), c.dev.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < 20; ++i) CHECK(all[i] == i);
    for (const auto& s : c.sequences)
        for (TokenId t : s) CHECK(static_cast<std::size_t>(t) < c.vocab_size);
    CHECK(load_text_corpus(files, v, 0.25, 3).dev == c.dev);
    CHECK(load_text_corpus(files, v, 0.0, 3).dev.empty());
}

TEST_CASE("copy corpus") {
    Corpus a = synth_corpus(SynthKind::copy, 500, 9, 64);
    Corpus b = synth_corpus(SynthKind::copy, 500, 9, 64);
    CHECK(a.sequences == b.sequences);
    CHECK(a.dev == b.dev);
    CHECK(a.source_hash == b.source_hash);
    CHECK_FALSE(synth_corpus(SynthKind::copy, 500, 10, 64).sequences == a.sequences);

    std::map<TokenId, std::size_t> freq;
    std::size_t total = 0;
    for (const auto& s : a.sequences) {
        REQUIRE(s.size() == 21);
        for (std::size_t i = 0; i < 7; ++i) {
            CHECK(s[i] == s[i + 7]);
            CHECK(s[i] == s[i + 14]);
        }
        for (TokenId t : s) {
            CHECK(t >= kFirstRegularToken);
            CHECK(t < 64);
            ++freq[t];
            ++total;
        }
    }
    // Without the twins the best guess is the most frequent token.
    std::size_t top = 0;
    for (const auto& [t, n] : freq) top = std::max(top, n);
    CHECK(static_cast<double>(top) / static_cast<double>(total) < 2.0 / 64.0);
    CHECK_THROWS_AS(synth_corpus(SynthKind::copy, 10, 1, 5), ConfigError);
}

TEST_CASE("bigram corpus follows its transition matrix") {
    const std::size_t vocab = 64;
    const auto p = bigram_transitions(4, vocab);
    for (std::size_t i = kFirstRegularToken; i < vocab; ++i) {
        double row = 0;
        for (double x : p[i]) row += x;
        CHECK(std::abs(row - 1.0) < 1e-12);
    }
    Corpus c = synth_corpus(SynthKind::bigram, 100000, 4, vocab);
    std::vector<std::vector<double>> counts(vocab, std::vector<double>(vocab, 0.0));
    for (const auto& s : c.sequences)
        for (std::size_t i = 1; i < s.size(); ++i) counts[s[i - 1]][s[i]] += 1;
    // Relative error is only meaningful where 5% is well outside sampling
    // noise; rarely visited rows are held to a z-score instead.
    double worst = 0, worst_z = 0;
    std::size_t resolved = 0, nonzero = 0;
    for (std::size_t i = kFirstRegularToken; i < vocab; ++i) {
        double row = 0;
        for (double n : counts[i]) row += n;
        for (std::size_t j = 0; j < vocab; ++j) {
            if (p[i][j] == 0.0) {
                CHECK(counts[i][j] == 0.0);
                continue;
            }
            ++nonzero;
            const double d = std::abs(counts[i][j] / row - p[i][j]);
            const double se = std::sqrt(p[i][j] * (1 - p[i][j]) / row);
            worst_z = std::max(worst_z, d / se);
            if (0.05 * p[i][j] >= 4 * se) {
                ++resolved;
                worst = std::max(worst, d / p[i][j]);
            }
        }
    }
    CHECK(resolved * 2 > nonzero);
    CHECK(worst < 0.05);
    CHECK(worst_z < 5.0);
    CHECK(synth_corpus(SynthKind::bigram, 50, 4, vocab).sequences == synth_corpus(SynthKind::bigram, 50, 4, vocab).sequences);
    CHECK(parse_synth_kind("bigram") == SynthKind::bigram);
    CHECK_THROWS_AS(parse_synth_kind("zipf"), ConfigError);
}
