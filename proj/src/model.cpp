#include "rafl/model.hpp"

#include <cmath>

#include "rafl/errors.hpp"
#include "rafl/text.hpp"

namespace rafl {

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigError("model config: " + msg); };
    if (layers == 0) fail("layers must be >= 1");
    if (hidden == 0 || heads == 0 || intermediate == 0) fail("hidden, heads and intermediate must be positive");
    if (hidden % heads != 0) {
        fail("hidden size " + std::to_string(hidden) + " is not divisible by " + std::to_string(heads) + " heads");
    }
    if (max_seq_len < 1) fail("max_seq_len must be >= 1");
    if (vocab_size <= static_cast<std::size_t>(kFirstRegularToken)) fail("vocab_size must exceed the reserved ids");
    if (type_vocab_size < 1) fail("type_vocab_size must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) fail("dropout rate must lie in [0, 1)");
    if (!(ln_eps > 0.0)) fail("ln_eps must be positive");
    if (!(init_std > 0.0)) fail("init_std must be positive");
    if (variant == Variant::realformer && residual_mode == ResidualMode::none) {
        fail("RealFormer needs residual mode sum or running_mean");
    }
}

ResidualMode ModelConfig::effective_residual_mode() const {
    return variant == Variant::realformer ? residual_mode : ResidualMode::none;
}

ResidualMode default_residual_mode(std::size_t layers) {
    return layers > 24 ? ResidualMode::running_mean : ResidualMode::sum;
}

ModelConfig preset(std::string_view name) {
    struct Dims {
        std::string_view name;
        std::size_t l, h, a, i, vocab, seq;
    };
    static constexpr Dims table[] = {
        {"tiny", 2, 16, 2, 32, 32, 32},
        {"desk", 4, 64, 4, 256, 64, 64},
        {"small", 4, 512, 8, 2048, 30000, 512},
        {"base", 12, 768, 12, 3072, 30000, 512},
        {"large", 24, 1024, 16, 4096, 30000, 512},
        {"xlarge", 36, 1536, 24, 6144, 30000, 512},
    };
    for (const auto& d : table) {
        if (d.name != name) continue;
        ModelConfig c;
        c.layers = d.l;
        c.hidden = d.h;
        c.heads = d.a;
        c.intermediate = d.i;
        c.vocab_size = d.vocab;
        c.max_seq_len = d.seq;
        c.residual_mode = default_residual_mode(d.l);
        return c;
    }
    throw ConfigError("unknown preset '" + std::string(name) + "' (tiny, desk, small, base, large, xlarge)");
}

std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::post_ln: return "post_ln";
        case Variant::pre_ln: return "pre_ln";
        case Variant::realformer: return "realformer";
    }
    return "?";
}

std::string_view to_string(ResidualMode m) {
    switch (m) {
        case ResidualMode::none: return "none";
        case ResidualMode::sum: return "sum";
        case ResidualMode::running_mean: return "running_mean";
    }
    return "?";
}

std::string_view to_string(Activation a) { return a == Activation::gelu ? "gelu" : "relu"; }

Variant parse_variant(std::string_view s) {
    if (s == "post_ln" || s == "post-ln") return Variant::post_ln;
    if (s == "pre_ln" || s == "pre-ln") return Variant::pre_ln;
    if (s == "realformer") return Variant::realformer;
    throw ConfigError("unknown variant '" + std::string(s) + "' (post_ln, pre_ln, realformer)");
}

ResidualMode parse_residual_mode(std::string_view s) {
    if (s == "none") return ResidualMode::none;
    if (s == "sum") return ResidualMode::sum;
    if (s == "running_mean" || s == "running-mean" || s == "mean") return ResidualMode::running_mean;
    throw ConfigError("unknown residual mode '" + std::string(s) + "' (none, sum, running_mean)");
}

Activation parse_activation(std::string_view s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    throw ConfigError("unknown activation '" + std::string(s) + "' (gelu, relu)");
}

std::vector<std::pair<std::string, std::string>> to_key_values(const ModelConfig& c) {
    return {
        {"layers", std::to_string(c.layers)},
        {"hidden", std::to_string(c.hidden)},
        {"heads", std::to_string(c.heads)},
        {"intermediate", std::to_string(c.intermediate)},
        {"variant", std::string(to_string(c.variant))},
        {"residual_mode", std::string(to_string(c.residual_mode))},
        {"vocab_size", std::to_string(c.vocab_size)},
        {"max_seq_len", std::to_string(c.max_seq_len)},
        {"type_vocab_size", std::to_string(c.type_vocab_size)},
        {"dropout", format_double(c.dropout_rate)},
        {"activation", std::string(to_string(c.activation))},
        {"seed", std::to_string(c.seed)},
        {"residual_includes_mask", c.residual_includes_mask ? "true" : "false"},
        {"next_sentence", c.next_sentence ? "true" : "false"},
        {"ln_eps", format_double(c.ln_eps)},
        {"init_std", format_double(c.init_std)},
    };
}

bool apply_setting(ModelConfig& c, std::string_view key, std::string_view value) {
    value = trim(value);
    if (key == "layers") c.layers = parse_u64(value, key);
    else if (key == "hidden") c.hidden = parse_u64(value, key);
    else if (key == "heads") c.heads = parse_u64(value, key);
    else if (key == "intermediate") c.intermediate = parse_u64(value, key);
    else if (key == "variant") c.variant = parse_variant(value);
    else if (key == "residual_mode") c.residual_mode = parse_residual_mode(value);
    else if (key == "vocab_size") c.vocab_size = parse_u64(value, key);
    else if (key == "max_seq_len") c.max_seq_len = parse_u64(value, key);
    else if (key == "type_vocab_size") c.type_vocab_size = parse_u64(value, key);
    else if (key == "dropout") c.dropout_rate = parse_double(value, key);
    else if (key == "activation") c.activation = parse_activation(value);
    else if (key == "seed") c.seed = parse_u64(value, key);
    else if (key == "residual_includes_mask") c.residual_includes_mask = parse_bool(value, key);
    else if (key == "next_sentence") c.next_sentence = parse_bool(value, key);
    else if (key == "ln_eps") c.ln_eps = parse_double(value, key);
    else if (key == "init_std") c.init_std = parse_double(value, key);
    else return false;
    return true;
}

nlohmann::json to_json(const ModelConfig& config) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [k, v] : to_key_values(config)) j[k] = v;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    ModelConfig c;
    for (const auto& [k, v] : j.items()) {
        if (!v.is_string() || !apply_setting(c, k, v.get<std::string>())) {
            throw ConfigError("unrecognized config entry '" + k + "'");
        }
    }
    return c;
}

void ParameterStore::add(std::string path, Tensor value) {
    if (index_.contains(path)) throw UsageError("duplicate parameter path " + path);
    index_.emplace(path, entries_.size());
    entries_.push_back({std::move(path), std::move(value)});
}

bool ParameterStore::contains(std::string_view path) const { return index_.contains(std::string(path)); }

const Tensor& ParameterStore::at(std::string_view path) const {
    auto it = index_.find(std::string(path));
    if (it == index_.end()) throw UsageError("no parameter named " + std::string(path));
    return entries_[it->second].value;
}

Tensor& ParameterStore::at(std::string_view path) {
    return const_cast<Tensor&>(static_cast<const ParameterStore&>(*this).at(path));
}

std::size_t ParameterStore::parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
}

namespace {

std::string layer_prefix(std::size_t i) { return "layer." + std::to_string(i) + "."; }

} // namespace

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& c) {
    c.validate();
    const std::size_t h = c.hidden, d = c.head_width();
    std::vector<std::pair<std::string, Shape>> shapes = {
        {"embeddings.token", {c.vocab_size, h}},
        {"embeddings.position", {c.max_seq_len, h}},
        {"embeddings.segment", {c.type_vocab_size, h}},
        {"embeddings.ln.gamma", {h}},
        {"embeddings.ln.beta", {h}},
    };
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string p = layer_prefix(l);
        for (const char* proj : {"wq", "wk", "wv"}) {
            for (std::size_t head = 0; head < c.heads; ++head) {
                shapes.push_back({p + "attention." + proj + ".head." + std::to_string(head), {h, d}});
            }
        }
        shapes.push_back({p + "attention.wo", {c.heads * d, h}});
        shapes.push_back({p + "attention.ln.gamma", {h}});
        shapes.push_back({p + "attention.ln.beta", {h}});
        shapes.push_back({p + "ffn.w1", {h, c.intermediate}});
        shapes.push_back({p + "ffn.b1", {c.intermediate}});
        shapes.push_back({p + "ffn.w2", {c.intermediate, h}});
        shapes.push_back({p + "ffn.b2", {h}});
        shapes.push_back({p + "ffn.ln.gamma", {h}});
        shapes.push_back({p + "ffn.ln.beta", {h}});
    }
    if (c.variant == Variant::pre_ln) {
        shapes.push_back({"final_ln.gamma", {h}});
        shapes.push_back({"final_ln.beta", {h}});
    }
    shapes.push_back({"mlm.transform.weight", {h, h}});
    shapes.push_back({"mlm.transform.bias", {h}});
    shapes.push_back({"mlm.ln.gamma", {h}});
    shapes.push_back({"mlm.ln.beta", {h}});
    shapes.push_back({"mlm.output_bias", {c.vocab_size}});
    return shapes;
}

std::size_t parameter_count(const ModelConfig& config) {
    std::size_t n = 0;
    for (const auto& [path, shape] : parameter_shapes(config)) n += element_count(shape);
    return n;
}

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

} // namespace

ParameterStore init_parameters(const ModelConfig& config) {
    Rng rng(derive_seed(config.seed, 0x1417));
    const double residual_scale = config.variant == Variant::pre_ln
                                      ? 1.0 / std::sqrt(2.0 * static_cast<double>(config.layers))
                                      : 1.0;
    ParameterStore store;
    for (auto& [path, shape] : parameter_shapes(config)) {
        Tensor t(shape);
        if (ends_with(path, ".gamma")) {
            t = Tensor::ones(shape);
        } else if (shape.size() == 2) {
            const bool residual_output = ends_with(path, "attention.wo") || ends_with(path, "ffn.w2");
            const double std = config.init_std * (residual_output ? residual_scale : 1.0);
            for (auto& v : t.data()) v = rng.truncated_normal(std, 2.0);
        }
        store.add(path, std::move(t));
    }
    return store;
}

BoundModel bind_parameters(Tape& tape, const ParameterStore& store, const ModelConfig& config) {
    const auto shapes = parameter_shapes(config);
    for (const auto& [path, shape] : shapes) {
        if (!store.contains(path)) throw ConfigError("parameter store lacks " + path);
        if (store.at(path).shape() != shape) {
            throw DimensionError("parameter " + path + " has shape " + to_string(store.at(path).shape()) +
                                 ", config expects " + to_string(shape));
        }
    }
    auto leaf = [&](const std::string& path) { return tape.leaf(store.at(path), path); };

    BoundModel m;
    m.token_embedding = leaf("embeddings.token");
    m.position_embedding = leaf("embeddings.position");
    m.segment_embedding = leaf("embeddings.segment");
    m.embed_ln_gamma = leaf("embeddings.ln.gamma");
    m.embed_ln_beta = leaf("embeddings.ln.beta");
    for (std::size_t l = 0; l < config.layers; ++l) {
        const std::string p = layer_prefix(l);
        LayerParams layer;
        AttentionParams& attn = layer.attention;
        attn.heads = config.heads;
        attn.d_k = attn.d_v = config.head_width();
        for (std::size_t head = 0; head < config.heads; ++head) {
            const std::string suffix = ".head." + std::to_string(head);
            attn.wq.push_back(leaf(p + "attention.wq" + suffix));
        }
        for (std::size_t head = 0; head < config.heads; ++head) {
            attn.wk.push_back(leaf(p + "attention.wk.head." + std::to_string(head)));
        }
        for (std::size_t head = 0; head < config.heads; ++head) {
            attn.wv.push_back(leaf(p + "attention.wv.head." + std::to_string(head)));
        }
        attn.wo = leaf(p + "attention.wo");
        layer.attn_ln_gamma = leaf(p + "attention.ln.gamma");
        layer.attn_ln_beta = leaf(p + "attention.ln.beta");
        layer.ffn = {leaf(p + "ffn.w1"), leaf(p + "ffn.b1"), leaf(p + "ffn.w2"), leaf(p + "ffn.b2"), config.activation};
        layer.ffn_ln_gamma = leaf(p + "ffn.ln.gamma");
        layer.ffn_ln_beta = leaf(p + "ffn.ln.beta");
        m.layers.push_back(std::move(layer));
    }
    if (config.variant == Variant::pre_ln) m.final_norm = FinalNorm{leaf("final_ln.gamma"), leaf("final_ln.beta")};
    m.mlm_weight = leaf("mlm.transform.weight");
    m.mlm_bias = leaf("mlm.transform.bias");
    m.mlm_ln_gamma = leaf("mlm.ln.gamma");
    m.mlm_ln_beta = leaf("mlm.ln.beta");
    m.mlm_output_bias = leaf("mlm.output_bias");
    return m;
}

namespace {

void check_input(const ModelConfig& config, const ModelInput& in) {
    const std::size_t n = in.batch * in.seq;
    if (n == 0) throw DataError("empty model input");
    if (in.token_ids.size() != n || in.segment_ids.size() != n || in.input_mask.size() != n) {
        throw DataError("model input arrays do not match batch x seq = " + std::to_string(n));
    }
    if (in.seq > config.max_seq_len) {
        throw DataError("sequence length " + std::to_string(in.seq) + " exceeds max_seq_len " +
                        std::to_string(config.max_seq_len));
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (in.token_ids[i] < 0 || static_cast<std::size_t>(in.token_ids[i]) >= config.vocab_size) {
            throw DataError("token id " + std::to_string(in.token_ids[i]) + " out of range for vocab of " +
                            std::to_string(config.vocab_size));
        }
        if (in.segment_ids[i] < 0 || static_cast<std::size_t>(in.segment_ids[i]) >= config.type_vocab_size) {
            throw DataError("segment id " + std::to_string(in.segment_ids[i]) + " out of range");
        }
    }
}

} // namespace

Var embed(const BoundModel& model, const ModelConfig& config, const ModelInput& input, const RunOptions& run) {
    check_input(config, input);
    const std::size_t n = input.batch * input.seq;
    std::vector<std::size_t> tokens(n), positions(n), segments(n);
    for (std::size_t i = 0; i < n; ++i) {
        tokens[i] = static_cast<std::size_t>(input.token_ids[i]);
        positions[i] = i % input.seq;
        segments[i] = static_cast<std::size_t>(input.segment_ids[i]);
    }
    Var x = ops::add(ops::add(ops::take_rows(model.token_embedding, tokens), ops::take_rows(model.position_embedding, positions)),
                     ops::take_rows(model.segment_embedding, segments));
    x = ops::layer_norm(x, model.embed_ln_gamma, model.embed_ln_beta, config.ln_eps);
    x = ops::dropout(x, config.dropout_rate, run.rng, run.training);
    return ops::reshape(x, {input.batch, input.seq, config.hidden});
}

Var mlm_logits(const BoundModel& model, const ModelConfig& config, Var hidden, std::span<const std::size_t> positions) {
    const std::size_t rows = hidden.value().size() / config.hidden;
    for (auto p : positions) {
        if (p >= rows) throw DataError("masked position " + std::to_string(p) + " outside " + std::to_string(rows) + " tokens");
    }
    Var flat = ops::reshape(hidden, {rows, config.hidden});
    Var h = ops::add_bias(ops::matmul(ops::take_rows(flat, positions), model.mlm_weight), model.mlm_bias);
    h = config.activation == Activation::gelu ? ops::gelu(h) : ops::relu(h);
    h = ops::layer_norm(h, model.mlm_ln_gamma, model.mlm_ln_beta, config.ln_eps);
    return ops::add_bias(ops::matmul(h, ops::transpose_last2(model.token_embedding)), model.mlm_output_bias);
}

ModelOutput encode(const BoundModel& model, const ModelConfig& config, const ModelInput& input, const RunOptions& run) {
    Var x = embed(model, config, input, run);
    const Tensor mask = attention_bias(input.input_mask, input.batch, input.seq);
    LayerContext ctx;
    ctx.mask = &mask;
    ctx.ln_eps = config.ln_eps;
    ctx.dropout_rate = config.dropout_rate;
    ctx.rng = run.rng;
    ctx.training = run.training;
    ctx.residual_includes_mask = config.residual_includes_mask;
    EncoderSpec spec{config.variant, config.effective_residual_mode(), run.zero_residual_edge};
    EncoderOutput enc = encoder_forward(x, spec, model.layers, ctx, model.final_norm);
    return {enc.hidden, std::move(enc)};
}

} // namespace rafl
