#include <doctest.h>

#include <cmath>

#include "rafl/errors.hpp"
#include "rafl/model.hpp"
#include "rafl/training.hpp"
#include "support.hpp"

using namespace rafl;

TEST_CASE("presets") {
    ModelConfig s = preset("small");
    CHECK(s.layers == 4);
    CHECK(s.hidden == 512);
    CHECK(s.heads == 8);
    CHECK(s.intermediate == 2048);
    ModelConfig b = preset("base");
    CHECK(b.layers == 12);
    CHECK(b.hidden == 768);
    CHECK(b.heads == 12);
    CHECK(b.intermediate == 3072);
    ModelConfig l = preset("large");
    CHECK(l.layers == 24);
    CHECK(l.hidden == 1024);
    CHECK(l.heads == 16);
    CHECK(l.intermediate == 4096);
    CHECK(l.residual_mode == ResidualMode::sum);
    ModelConfig x = preset("xlarge");
    CHECK(x.layers == 36);
    CHECK(x.hidden == 1536);
    CHECK(x.heads == 24);
    CHECK(x.intermediate == 6144);
    CHECK(x.residual_mode == ResidualMode::running_mean);
    CHECK(preset("tiny").layers == 2);
    CHECK(preset("desk").hidden == 64);
    CHECK_THROWS_AS(preset("huge"), ConfigError);
}

TEST_CASE("parameter count of small matches a hand count") {
    // embeddings: token 30000·512, position 512·512, segment 2·512, LN 2·512
    // per layer: Q,K,V,O 4·512², two LNs 4·512, FFN 512·2048 + 2048 + 2048·512 + 512
    // head: transform 512² + 512, LN 2·512, output bias 30000
    CHECK(parameter_count(preset("small")) == 28519216u);
    CHECK(parameter_count(preset("tiny")) == init_parameters(preset("tiny")).parameter_count());
    ModelConfig pre = preset("tiny");
    pre.variant = Variant::pre_ln;
    CHECK(parameter_count(pre) == parameter_count(preset("tiny")) + 32);  // final LN
}

TEST_CASE("config validation") {
    ModelConfig c = preset("tiny");
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = preset("tiny");
    c.dropout_rate = 1.0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = preset("tiny");
    c.max_seq_len = 0;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = preset("tiny");
    c.residual_mode = ResidualMode::none;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c.variant = Variant::post_ln;
    CHECK_NOTHROW(c.validate());
}

TEST_CASE("config key=value and json round trips") {
    ModelConfig c = preset("desk");
    c.variant = Variant::pre_ln;
    c.activation = Activation::relu;
    c.dropout_rate = 0.25;
    c.seed = 77;
    ModelConfig d = preset("tiny");
    for (const auto& [k, v] : to_key_values(c)) CHECK(apply_setting(d, k, v));
    CHECK(d == c);
    CHECK(config_from_json(to_json(c)) == c);
    CHECK_FALSE(apply_setting(d, "bogus", "1"));
    CHECK_THROWS_AS(apply_setting(d, "layers", "two"), ConfigError);
    CHECK_THROWS_AS(apply_setting(d, "variant", "transformer"), ConfigError);
}

TEST_CASE("initialisation") {
    ModelConfig c = preset("tiny");
    c.seed = 4;
    ParameterStore a = init_parameters(c), b = init_parameters(c);
    CHECK(a == b);
    c.seed = 5;
    CHECK_FALSE(init_parameters(c) == a);
    for (const auto& e : a.entries()) {
        if (!e.path.ends_with("gamma")) for (double v : e.value.data()) CHECK(std::abs(v) <= 0.04);
        if (e.path.ends_with("gamma")) CHECK(e.value == Tensor::ones(e.value.shape()));
        if (e.path.ends_with("beta") || e.path.ends_with("b1") || e.path.ends_with("b2") || e.path.ends_with("bias")) {
            CHECK(e.value == Tensor::zeros(e.value.shape()));
        }
    }

    // One wide matrix gives 131072 draws; truncation at ±2σ shrinks the std by 0.8796256610.
    ModelConfig wide = preset("tiny");
    wide.layers = 1;
    wide.hidden = 64;
    wide.heads = 1;
    wide.intermediate = 2048;
    const Tensor w1 = init_parameters(wide).at("layer.0.ffn.w1");
    double mean = 0, var = 0;
    for (double v : w1.data()) mean += v / static_cast<double>(w1.size());
    for (double v : w1.data()) var += (v - mean) * (v - mean) / static_cast<double>(w1.size());
    const double expected = 0.02 * 0.87962566103423975041;
    CHECK(std::abs(std::sqrt(var) - expected) / expected < 0.03);
}

TEST_CASE("pre-LN scales residual output projections") {
    ModelConfig c = preset("desk");
    c.variant = Variant::pre_ln;
    ParameterStore pre = init_parameters(c);
    c.variant = Variant::post_ln;
    ParameterStore post = init_parameters(c);
    const double factor = 1.0 / std::sqrt(8.0);
    for (const char* path : {"layer.2.attention.wo", "layer.3.ffn.w2"}) {
        const Tensor& a = pre.at(path);
        const Tensor& b = post.at(path);
        for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i] * factor).epsilon(1e-15));
    }
    CHECK(pre.at("layer.0.ffn.w1") == post.at("layer.0.ffn.w1"));
    CHECK(pre.contains("final_ln.gamma"));
    CHECK_FALSE(post.contains("final_ln.gamma"));
}

namespace {

ModelInput one_row(std::vector<TokenId> ids) {
    ModelInput in;
    in.batch = 1;
    in.seq = ids.size();
    in.token_ids = ids;
    in.segment_ids.assign(ids.size(), 0);
    in.input_mask.assign(ids.size(), 1);
    return in;
}

} // namespace

TEST_CASE("embeddings") {
    ModelConfig c = preset("tiny");
    c.dropout_rate = 0.0;
    ParameterStore p = init_parameters(c);
    {
        ParameterStore z = p;
        for (auto* path : {"embeddings.token", "embeddings.position", "embeddings.segment"}) {
            z.at(path) = Tensor::zeros(z.at(path).shape());
        }
        Tape tape;
        BoundModel m = bind_parameters(tape, z, c);
        CHECK(embed(m, c, one_row({2, 7, 9, 3}), {}).value() == Tensor::zeros({1, 4, 16}));
    }
    Tape tape;
    BoundModel m = bind_parameters(tape, p, c);
    Tensor a = embed(m, c, one_row({2, 7, 9, 3}), {}).value();
    CHECK(bitwise_equal(a, embed(m, c, one_row({2, 7, 9, 3}), {}).value()));
    Tensor b = embed(m, c, one_row({2, 7, 11, 3}), {}).value();
    for (std::size_t s = 0; s < 4; ++s) {
        bool same = true;
        for (std::size_t i = 0; i < 16; ++i) same = same && a[s * 16 + i] == b[s * 16 + i];
        CHECK(same == (s != 2));
    }
    CHECK_THROWS_AS(embed(m, c, one_row({2, 40, 3}), {}), DataError);
    CHECK_THROWS_AS(embed(m, c, one_row(std::vector<TokenId>(33, 5)), {}), DataError);
}

TEST_CASE("mlm head") {
    ModelConfig c = preset("tiny");
    ParameterStore p = init_parameters(c);
    Tape tape;
    BoundModel m = bind_parameters(tape, p, c);
    const std::size_t positions[] = {0, 2, 5};
    Var logits = mlm_logits(m, c, tape.constant(Tensor::zeros({2, 3, 16})), positions);
    CHECK(logits.shape() == Shape{3, 32});
    CHECK(logits.value() == Tensor::zeros({3, 32}));
    const std::size_t bad[] = {6};
    CHECK_THROWS(mlm_logits(m, c, tape.constant(Tensor::zeros({2, 3, 16})), bad));
}

TEST_CASE("tied embedding gets gradient from both uses") {
    ModelConfig c = preset("tiny");
    c.dropout_rate = 0.0;
    c.init_std = 0.3;
    ParameterStore p = init_parameters(c);
    ModelInput in = one_row({2, 7, 4, 9, 3});
    const std::size_t positions[] = {2};
    const TokenId labels[] = {8};

    auto loss_at = [&](const ParameterStore& ps) {
        Tape tape;
        BoundModel m = bind_parameters(tape, ps, c);
        ModelOutput out = encode(m, c, in, {});
        return mlm_loss(mlm_logits(m, c, out.hidden, positions), labels).loss.value().item();
    };
    Tape tape;
    BoundModel m = bind_parameters(tape, p, c);
    ModelOutput out = encode(m, c, in, {});
    GradientMap g = tape.backward(mlm_loss(mlm_logits(m, c, out.hidden, positions), labels).loss);
    const Tensor& gt = g.at("embeddings.token");
    // row 7 is used by both the input and the decoder, row 20 only by the decoder
    for (std::size_t row : {7u, 20u, 8u}) {
        for (std::size_t col : {0u, 5u, 11u}) {
            ParameterStore q = p;
            const std::size_t at = row * 16 + col;
            q.at("embeddings.token")[at] += 1e-5;
            const double up = loss_at(q);
            q.at("embeddings.token")[at] -= 2e-5;
            const double down = loss_at(q);
            const double numeric = (up - down) / 2e-5;
            CHECK(std::abs(numeric - gt[at]) / std::max({std::abs(numeric), std::abs(gt[at]), 1e-8}) < 1e-5);
            CHECK(gt[at] != 0.0);
        }
    }
}

TEST_CASE("seed and config determine the initial loss") {
    ModelConfig c = preset("tiny");
    c.seed = 12;
    ModelInput in = one_row({2, 7, 4, 9, 3});
    const std::size_t positions[] = {2};
    const TokenId labels[] = {8};
    auto loss = [&] {
        ParameterStore p = init_parameters(c);
        Tape tape;
        BoundModel m = bind_parameters(tape, p, c);
        return mlm_loss(mlm_logits(m, c, encode(m, c, in, {}).hidden, positions), labels).loss.value().item();
    };
    const double a = loss();
    CHECK(a == loss());
    CHECK(std::abs(a - std::log(32.0)) < 0.1);
}

TEST_CASE("bind rejects mismatched stores") {
    ModelConfig c = preset("tiny");
    ParameterStore p = init_parameters(c);
    ModelConfig d = c;
    d.hidden = 32;
    Tape tape;
    CHECK_THROWS(bind_parameters(tape, p, d));
}
