#include "rafl/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <zlib.h>

#include "rafl/errors.hpp"
#include "rafl/rng.hpp"

namespace rafl {

std::vector<std::string> tokenize(std::string_view text) {
    std::vector<std::string> out;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) out.push_back(std::move(current));
        current.clear();
    };
    for (char ch : text) {
        const auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (c < 128 && std::ispunct(c)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            current.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
    return out;
}

Vocab::Vocab() {
    for (const char* t : {"[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"}) push(t);
}

void Vocab::push(std::string token) {
    if (ids_.contains(token)) throw DataError("duplicate vocabulary token '" + token + "'");
    ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(std::move(token));
}

Vocab Vocab::build_from_texts(std::span<const std::string> texts, std::size_t cap) {
    if (cap < static_cast<std::size_t>(kFirstRegularToken)) {
        throw ConfigError("vocabulary cap must be at least " + std::to_string(kFirstRegularToken));
    }
    std::map<std::string, std::size_t> counts;
    for (const auto& text : texts) {
        for (auto& tok : tokenize(text)) ++counts[tok];
    }
    if (counts.empty()) throw DataError("corpus contains no tokens");
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    // counts is ordered by token, so a stable sort on frequency keeps ties lexicographic
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    Vocab v;
    const std::size_t keep = std::min(ranked.size(), cap - kFirstRegularToken);
    for (std::size_t i = 0; i < keep; ++i) {
        if (v.ids_.contains(ranked[i].first)) continue;  // a literal "[MASK]" etc. in the text
        v.push(ranked[i].first);
    }
    return v;
}

namespace {

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string crc_hex(std::string_view bytes, uLong crc = crc32(0L, Z_NULL, 0)) {
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
    char buf[9];
    std::snprintf(buf, sizeof buf, "%08lx", crc & 0xffffffffUL);
    return buf;
}

} // namespace

Vocab Vocab::build(std::span<const std::filesystem::path> files, std::size_t cap) {
    if (files.empty()) throw DataError("no corpus files given");
    std::vector<std::string> texts;
    for (const auto& f : files) texts.push_back(read_text(f));
    return build_from_texts(texts, cap);
}

Vocab Vocab::synthetic(std::size_t size) {
    if (size <= static_cast<std::size_t>(kFirstRegularToken)) throw ConfigError("synthetic vocab needs more than 5 ids");
    Vocab v;
    for (std::size_t i = kFirstRegularToken; i < size; ++i) v.push("w" + std::to_string(i));
    return v;
}

TokenId Vocab::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocab::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw DataError("token id " + std::to_string(id) + " outside vocabulary");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocab::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
}

Vocab Vocab::load(const std::filesystem::path& path) {
    std::istringstream in(read_text(path));
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    Vocab v;
    if (lines.size() < v.size()) throw DataError("vocabulary file " + path.string() + " lacks the reserved tokens");
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (lines[i] != v.tokens_[i]) throw DataError("vocabulary file " + path.string() + " has wrong reserved tokens");
    }
    for (std::size_t i = v.size(); i < lines.size(); ++i) v.push(lines[i]);
    return v;
}

Encoded encode_ids(std::span<const TokenId> a, std::span<const TokenId> b, std::size_t max_len) {
    if (max_len < 3) throw ConfigError("encode: max_len must be at least 3");
    const bool pair = !b.empty();
    const std::size_t specials = pair ? 3 : 2;
    if (pair && max_len < 5) throw ConfigError("encode: a sentence pair needs max_len >= 5");
    std::size_t len_a = a.size(), len_b = b.size();
    while (len_a + len_b + specials > max_len) {
        if (len_a > len_b) {
            --len_a;
        } else {
            --len_b;
        }
    }
    Encoded e;
    e.token_ids.push_back(kCls);
    e.token_ids.insert(e.token_ids.end(), a.begin(), a.begin() + static_cast<std::ptrdiff_t>(len_a));
    e.token_ids.push_back(kSep);
    e.segment_ids.assign(e.token_ids.size(), 0);
    if (pair) {
        e.token_ids.insert(e.token_ids.end(), b.begin(), b.begin() + static_cast<std::ptrdiff_t>(len_b));
        e.token_ids.push_back(kSep);
        e.segment_ids.resize(e.token_ids.size(), 1);
    }
    e.input_mask.assign(e.token_ids.size(), 1);
    e.token_ids.resize(max_len, kPad);
    e.segment_ids.resize(max_len, 0);
    e.input_mask.resize(max_len, 0);
    return e;
}

Encoded encode(std::string_view a, std::string_view b, const Vocab& vocab, std::size_t max_len) {
    auto ids = [&](std::string_view text) {
        std::vector<TokenId> out;
        for (const auto& t : tokenize(text)) out.push_back(vocab.id(t));
        return out;
    };
    return encode_ids(ids(a), ids(b), max_len);
}

std::vector<std::string> decode(std::span<const TokenId> ids, const Vocab& vocab) {
    std::vector<std::string> out;
    for (TokenId id : ids) {
        if (id >= kFirstRegularToken || id == kUnk) out.push_back(vocab.token(id));
    }
    return out;
}

void split_corpus(Corpus& corpus, double dev_fraction, std::uint64_t seed) {
    if (!(dev_fraction >= 0.0 && dev_fraction < 1.0)) throw ConfigError("dev fraction must lie in [0, 1)");
    const std::size_t n = corpus.sequences.size();
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(derive_seed(seed, 0x5171));
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    const auto n_dev = static_cast<std::size_t>(std::ceil(dev_fraction * static_cast<double>(n) - 1e-9));
    corpus.dev.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_dev));
    corpus.train.assign(order.begin() + static_cast<std::ptrdiff_t>(n_dev), order.end());
    std::sort(corpus.dev.begin(), corpus.dev.end());
    std::sort(corpus.train.begin(), corpus.train.end());
    if (corpus.train.empty()) throw DataError("corpus split left no training sequences");
}

Corpus load_text_corpus(std::span<const std::filesystem::path> files, const Vocab& vocab, double dev_fraction,
                        std::uint64_t seed) {
    if (files.empty()) throw DataError("no corpus files given");
    Corpus c;
    c.vocab_size = vocab.size();
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const auto& f : files) {
        const std::string text = read_text(f);
        crc = crc32(crc, reinterpret_cast<const Bytef*>(text.data()), static_cast<uInt>(text.size()));
        std::istringstream in(text);
        for (std::string line; std::getline(in, line);) {
            std::vector<TokenId> ids;
            for (const auto& t : tokenize(line)) ids.push_back(vocab.id(t));
            if (!ids.empty()) c.sequences.push_back(std::move(ids));
        }
    }
    if (c.sequences.empty()) throw DataError("corpus contains no sentences");
    c.source_hash = crc_hex({}, crc);
    split_corpus(c, dev_fraction, seed);
    return c;
}

SynthKind parse_synth_kind(std::string_view s) {
    if (s == "copy") return SynthKind::copy;
    if (s == "bigram") return SynthKind::bigram;
    throw ConfigError("unknown synthetic corpus kind '" + std::string(s) + "' (copy, bigram)");
}

std::vector<std::vector<double>> bigram_transitions(std::uint64_t seed, std::size_t vocab_size, std::size_t successors) {
    if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) throw ConfigError("bigram corpus needs vocab_size > 5");
    const std::size_t regular = vocab_size - kFirstRegularToken;
    successors = std::min(successors, regular);
    if (successors == 0) throw ConfigError("bigram corpus needs at least one successor per token");
    Rng rng(derive_seed(seed, 0xB16));
    std::vector<std::vector<double>> p(vocab_size, std::vector<double>(vocab_size, 0.0));
    std::vector<std::size_t> pool(regular);
    for (std::size_t from = kFirstRegularToken; from < vocab_size; ++from) {
        for (std::size_t i = 0; i < regular; ++i) pool[i] = kFirstRegularToken + i;
        double total = 0.0;
        std::vector<std::pair<std::size_t, double>> picks;
        for (std::size_t s = 0; s < successors; ++s) {
            const std::size_t j = s + rng.below(regular - s);
            std::swap(pool[s], pool[j]);
            const double w = 0.2 + rng.uniform();
            picks.emplace_back(pool[s], w);
            total += w;
        }
        for (const auto& [to, w] : picks) p[from][to] = w / total;
    }
    return p;
}

Corpus synth_corpus(SynthKind kind, std::size_t size, std::uint64_t seed, std::size_t vocab_size,
                    const SynthOptions& options) {
    if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) throw ConfigError("synthetic corpus needs vocab_size > 5");
    if (size == 0) throw ConfigError("synthetic corpus size must be positive");
    if (options.length == 0) throw ConfigError("synthetic sequence length must be positive");
    const std::size_t regular = vocab_size - kFirstRegularToken;
    Rng rng(derive_seed(seed, kind == SynthKind::copy ? 0xC0B1 : 0xB1C0));
    Corpus c;
    c.vocab_size = vocab_size;
    c.sequences.reserve(size);

    if (kind == SynthKind::copy) {
        if (options.copies < 2 || options.length < options.copies) {
            throw ConfigError("copy corpus needs copies >= 2 and length >= copies");
        }
        const std::size_t block = options.length / options.copies;
        for (std::size_t n = 0; n < size; ++n) {
            std::vector<TokenId> base(block);
            for (auto& t : base) t = static_cast<TokenId>(kFirstRegularToken + rng.below(regular));
            std::vector<TokenId> seq;
            for (std::size_t r = 0; r < options.copies; ++r) seq.insert(seq.end(), base.begin(), base.end());
            c.sequences.push_back(std::move(seq));
        }
    } else {
        const auto p = bigram_transitions(seed, vocab_size, options.successors);
        for (std::size_t n = 0; n < size; ++n) {
            std::vector<TokenId> seq;
            std::size_t cur = kFirstRegularToken + rng.below(regular);
            seq.push_back(static_cast<TokenId>(cur));
            while (seq.size() < options.length) {
                double u = rng.uniform();
                std::size_t next = cur;
                for (std::size_t j = kFirstRegularToken; j < vocab_size; ++j) {
                    if (p[cur][j] == 0.0) continue;
                    next = j;
                    if (u < p[cur][j]) break;
                    u -= p[cur][j];
                }
                cur = next;
                seq.push_back(static_cast<TokenId>(cur));
            }
            c.sequences.push_back(std::move(seq));
        }
    }
    const std::string tag = std::string(kind == SynthKind::copy ? "copy" : "bigram") + ":" + std::to_string(size) + ":" +
                            std::to_string(seed) + ":" + std::to_string(vocab_size) + ":" +
                            std::to_string(options.length) + ":" + std::to_string(options.copies) + ":" +
                            std::to_string(options.successors);
    c.source_hash = crc_hex(tag);
    split_corpus(c, options.dev_fraction, seed);
    return c;
}

} // namespace rafl
