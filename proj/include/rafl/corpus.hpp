#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "rafl/tokens.hpp"

namespace rafl {

/// Lowercases and splits on whitespace; every ASCII punctuation character
/// becomes a token of its own.
std::vector<std::string> tokenize(std::string_view text);

class Vocab {
public:
    /// Only the reserved tokens.
    Vocab();

    /// Keeps the cap−5 most frequent tokens of the files, ties broken
    /// lexicographically, after the five reserved ids.
    static Vocab build(std::span<const std::filesystem::path> files, std::size_t cap);
    static Vocab build_from_texts(std::span<const std::string> texts, std::size_t cap);
    /// Reserved ids plus placeholder tokens "w5", "w6", ... up to size.
    static Vocab synthetic(std::size_t size);

    /// kUnk for unknown tokens.
    TokenId id(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }
    std::span<const std::string> tokens() const { return tokens_; }

    void save(const std::filesystem::path& path) const;
    static Vocab load(const std::filesystem::path& path);

    friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

private:
    void push(std::string token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

struct Encoded {
    std::vector<TokenId> token_ids;
    std::vector<TokenId> segment_ids;
    std::vector<int> input_mask;
};

/// [CLS] a [SEP] (b [SEP]), truncating the longer segment first, padded with
/// [PAD] to max_len.
Encoded encode_ids(std::span<const TokenId> a, std::span<const TokenId> b, std::size_t max_len);
Encoded encode(std::string_view a, std::string_view b, const Vocab& vocab, std::size_t max_len);
/// Tokens of the non-special ids.
std::vector<std::string> decode(std::span<const TokenId> ids, const Vocab& vocab);

struct Corpus {
    std::vector<std::vector<TokenId>> sequences;  // without special tokens
    std::vector<std::size_t> train;
    std::vector<std::size_t> dev;
    std::size_t vocab_size = 0;
    std::string source_hash;
};

/// Shuffles sequence indices with the seed and assigns ⌈fraction·n⌉ to dev.
void split_corpus(Corpus& corpus, double dev_fraction, std::uint64_t seed);

/// One sequence per non-empty line.
Corpus load_text_corpus(std::span<const std::filesystem::path> files, const Vocab& vocab, double dev_fraction,
                        std::uint64_t seed);

enum class SynthKind { copy, bigram };

SynthKind parse_synth_kind(std::string_view s);

struct SynthOptions {
    std::size_t length = 21;   // tokens per sequence
    std::size_t copies = 3;    // copy kind: repetitions of the base block
    std::size_t successors = 3;  // bigram kind: nonzero entries per row
    double dev_fraction = 0.1;
};

/// copy: a random block of length/copies tokens repeated copies times, so a
/// masked token can be read off its twins. bigram: walks of a fixed random
/// Markov chain over the regular ids.
Corpus synth_corpus(SynthKind kind, std::size_t size, std::uint64_t seed, std::size_t vocab_size,
                    const SynthOptions& options = {});

/// Row-stochastic transition matrix used by the bigram kind, [vocab, vocab];
/// rows and columns of reserved ids are zero.
std::vector<std::vector<double>> bigram_transitions(std::uint64_t seed, std::size_t vocab_size,
                                                    std::size_t successors = 3);

} // namespace rafl
