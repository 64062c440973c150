#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dkgen/model.hpp"
#include "dkgen/tokenizer.hpp"
#include "grad_check.hpp"

using namespace dkgen;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.hidden_dim = 8;
    cfg.num_encoder_layers = 1;
    cfg.num_decoder_layers = 1;
    cfg.num_heads = 2;
    cfg.ffn_dim = 16;
    cfg.max_positions = 16;
    cfg.dropout = 0.0;
    return cfg;
}

}  // namespace

TEST_CASE("config validation rejects bad extents") {
    ModelConfig cfg = tiny_config();
    cfg.hidden_dim = 9;  // not divisible by 2 heads
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = tiny_config();
    cfg.vocab_size = 3;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    cfg = tiny_config();
    cfg.alpha = 1.5;
    CHECK_THROWS_AS(cfg.validate(), DataError);
    CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("encode shapes and pooling at the last unpadded position") {
    Rng rng(1);
    TransformerModel m(tiny_config(), rng);
    const std::vector<int> ids = {1, 7, 8, 2, 0, 0};  // BOS a b EOS PAD PAD
    auto enc = m.encode(ids);
    REQUIRE(enc.hidden.shape() == Shape{6, 8});
    REQUIRE(enc.pooled.shape() == Shape{1, 8});
    CHECK(enc.unpadded_len == 4);
    for (std::size_t c = 0; c < 8; ++c) {
        CHECK(enc.pooled.at(0, c) == enc.hidden.at(3, c));
    }
}

TEST_CASE("padding does not influence unpadded encoder states") {
    Rng rng(2);
    TransformerModel m(tiny_config(), rng);
    const std::vector<int> short_ids = {1, 7, 8, 2};
    const std::vector<int> padded = {1, 7, 8, 2, 0, 0, 0};
    auto a = m.encode(short_ids);
    auto b = m.encode(padded);
    for (std::size_t r = 0; r < 4; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            CHECK(a.hidden.at(r, c) == doctest::Approx(b.hidden.at(r, c)).epsilon(1e-12));
        }
    }
    CHECK(b.unpadded_len == 4);
}

TEST_CASE("same seed gives identical parameters; eval forward is deterministic") {
    Rng r1(9), r2(9);
    TransformerModel m1(tiny_config(), r1), m2(tiny_config(), r2);
    REQUIRE(m1.params().size() == m2.params().size());
    for (const auto& [name, t] : m1.params()) {
        const auto& u = m2.params().at(name);
        REQUIRE(t.shape() == u.shape());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(t.data()[i] == u.data()[i]);
    }
    const std::vector<int> ids = {1, 5, 6, 2};
    auto e1 = m1.encode(ids);
    auto e2 = m1.encode(ids);
    for (std::size_t i = 0; i < e1.hidden.size(); ++i) {
        CHECK(e1.hidden.data()[i] == e2.hidden.data()[i]);
    }
}

TEST_CASE("dropout changes activations only when an rng is supplied") {
    ModelConfig cfg = tiny_config();
    cfg.dropout = 0.5;
    Rng init(3);
    TransformerModel m(cfg, init);
    const std::vector<int> ids = {1, 5, 6, 2};
    auto eval1 = m.encode(ids);
    auto eval2 = m.encode(ids);
    bool eval_same = true;
    for (std::size_t i = 0; i < eval1.hidden.size(); ++i) {
        eval_same = eval_same && eval1.hidden.data()[i] == eval2.hidden.data()[i];
    }
    CHECK(eval_same);
    Rng drop(4);
    auto train = m.encode(ids, &drop);
    bool differs = false;
    for (std::size_t i = 0; i < eval1.hidden.size(); ++i) {
        differs = differs || eval1.hidden.data()[i] != train.hidden.data()[i];
    }
    CHECK(differs);
}

TEST_CASE("memory concatenation produces cumulative offsets") {
    Rng rng(5);
    TransformerModel m(tiny_config(), rng);
    auto ctx = m.encode({1, 5, 2});                 // len 3
    auto p1 = m.encode({4, 6, 7, 2});               // len 4
    auto p2 = m.encode({4, 8, 9, 10, 2});           // len 5
    auto mem = concat_memory(&ctx, {p1, p2});
    CHECK(mem.offsets == std::vector<std::size_t>{0, 3, 7, 12});
    CHECK(mem.has_context);
    CHECK(mem.num_blocks() == 3);
    CHECK(mem.num_passages() == 2);
    CHECK(mem.total_len() == 12);
    CHECK(mem.states.shape() == Shape{12, 8});
    CHECK(mem.unpadded == std::vector<std::size_t>{3, 4, 5});

    auto no_ctx = concat_memory(nullptr, {p1, p2});
    CHECK(no_ctx.offsets == std::vector<std::size_t>{0, 4, 9});
    CHECK(!no_ctx.has_context);
    CHECK(no_ctx.num_passages() == 2);
}

TEST_CASE("decoder is causal: later prefix tokens cannot affect earlier logits") {
    Rng rng(6);
    TransformerModel m(tiny_config(), rng);
    auto p1 = m.encode({4, 6, 7, 2});
    auto mem = concat_memory(nullptr, {p1});
    auto a = m.decode({1, 5, 6, 7}, mem);
    auto b = m.decode({1, 5, 9, 11}, mem);
    REQUIRE(a.logits.shape() == Shape{4, 12});
    for (std::size_t c = 0; c < 12; ++c) {
        CHECK(a.logits.at(0, c) == doctest::Approx(b.logits.at(0, c)).epsilon(1e-12));
        CHECK(a.logits.at(1, c) == doctest::Approx(b.logits.at(1, c)).epsilon(1e-12));
    }
    bool row2_differs = false;
    for (std::size_t c = 0; c < 12; ++c) {
        row2_differs = row2_differs || a.logits.at(2, c) != b.logits.at(2, c);
    }
    CHECK(row2_differs);
}

TEST_CASE("recorded cross-attention rows are distributions over kept memory") {
    Rng rng(7);
    TransformerModel m(tiny_config(), rng);
    auto p1 = m.encode({4, 6, 7, 2, 0});  // one padded position
    auto p2 = m.encode({4, 8, 2});
    auto mem = concat_memory(nullptr, {p1, p2});
    auto res = m.decode({1, 5, 6}, mem);
    REQUIRE(res.attn.weights.size() == res.attn.layers * res.attn.heads);
    CHECK(res.attn.out_len == 3);
    CHECK(res.attn.mem_len == 8);
    for (const auto& w : res.attn.weights) {
        REQUIRE(w.shape() == Shape{3, 8});
        for (std::size_t r = 0; r < 3; ++r) {
            double row = 0.0;
            for (std::size_t c = 0; c < 8; ++c) row += w.at(r, c);
            CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
            CHECK(w.at(r, 4) == 0.0);  // padded key of the first passage
        }
    }
}

TEST_CASE("decode_step matches the last row of a full decode") {
    Rng rng(8);
    TransformerModel m(tiny_config(), rng);
    auto p1 = m.encode({4, 6, 7, 2});
    auto mem = concat_memory(nullptr, {p1});
    auto full = m.decode({1, 5, 6}, mem);
    auto [logits, attn] = m.decode_step({1, 5, 6}, mem);
    REQUIRE(logits.shape() == Shape{12});
    for (std::size_t c = 0; c < 12; ++c) {
        CHECK(logits.at(c) == doctest::Approx(full.logits.at(2, c)).epsilon(1e-12));
    }
    CHECK(attn.out_len == 3);
}

TEST_CASE("passage attention pooling matches a hand-computed average") {
    // Two passages of stored lengths 3 and 4 (unpadded 2 and 3), no context.
    Memory mem;
    mem.states = Tensor::zeros({7, 4});
    mem.offsets = {0, 3, 7};
    mem.unpadded = {2, 3};
    mem.keep = {1, 1, 0, 1, 1, 1, 0};
    mem.has_context = false;

    CrossAttentionRecord rec;
    rec.layers = 1;
    rec.heads = 2;
    rec.out_len = 2;
    rec.mem_len = 7;
    // head 0: row pattern [.1 .2 0 .3 .2 .2 0], head 1: [.4 .1 0 .1 .2 .2 0]
    rec.weights.push_back(Tensor::from(
        {2, 7}, {0.1, 0.2, 0.0, 0.3, 0.2, 0.2, 0.0,
                 0.1, 0.2, 0.0, 0.3, 0.2, 0.2, 0.0}));
    rec.weights.push_back(Tensor::from(
        {2, 7}, {0.4, 0.1, 0.0, 0.1, 0.2, 0.2, 0.0,
                 0.4, 0.1, 0.0, 0.1, 0.2, 0.2, 0.0}));
    Tensor pooled = extract_passage_attention(rec, mem);
    REQUIRE(pooled.shape() == Shape{2});
    // passage 0: head0 mean(.1,.2)= .15, head1 mean(.4,.1)= .25 -> .2
    CHECK(pooled.at(0) == doctest::Approx(0.2));
    // passage 1: head0 mean(.3,.2,.2)=.2333..., head1 mean(.1,.2,.2)=.1666... -> .2
    CHECK(pooled.at(1) == doctest::Approx(0.2));
}

TEST_CASE("passage attention pooling skips the context block") {
    Memory mem;
    mem.states = Tensor::zeros({5, 4});
    mem.offsets = {0, 2, 5};
    mem.unpadded = {2, 3};
    mem.keep = {1, 1, 1, 1, 1};
    mem.has_context = true;  // first block is context, one passage remains

    CrossAttentionRecord rec;
    rec.layers = 1;
    rec.heads = 1;
    rec.out_len = 1;
    rec.mem_len = 5;
    rec.weights.push_back(Tensor::from({1, 5}, {0.9, 0.05, 0.01, 0.02, 0.02}));
    Tensor pooled = extract_passage_attention(rec, mem);
    REQUIRE(pooled.shape() == Shape{1});
    CHECK(pooled.at(0) == doctest::Approx((0.01 + 0.02 + 0.02) / 3.0));
}

TEST_CASE("gradients through encode, decode and the score head match finite differences") {
    Rng rng(10);
    TransformerModel m(tiny_config(), rng);
    const std::vector<int> passage_ids = {4, 6, 7, 2};
    const std::vector<int> prefix = {1, 5, 6};

    auto loss_value = [&]() {
        auto p1 = m.encode(passage_ids);
        auto mem = concat_memory(nullptr, {p1});
        auto res = m.decode(prefix, mem);
        Tensor attn_pool = extract_passage_attention(res.attn, mem);
        Tensor l = add(add(sum(res.logits), m.score_head(p1.pooled)), sum(attn_pool));
        return l;
    };

    AdamW::zero_grads(m.params());
    loss_value().backward();

    ParamMap probe;
    for (const char* name : {"emb.tok", "enc.0.attn.q.w", "enc.0.ln1.g", "enc.0.ffn.1.w",
                             "dec.0.self.k.w", "dec.0.cross.v.w", "dec.0.ln3.b", "out.w",
                             "score.1.w", "score.2.b"}) {
        probe.emplace(name, m.params().at(name));
    }
    auto res = testing::grad_check(probe, [&]() { return loss_value().item(); });
    CAPTURE(res.worst);
    CHECK(res.checked > 0);
    CHECK(res.max_rel_err < 1e-4);
    CHECK(res.max_abs_err_tiny < 1e-8);
}

TEST_CASE("checkpoint round trip preserves config and every tensor") {
    namespace fs = std::filesystem;
    const std::string path = fs::temp_directory_path() / "dkgen_model_rt.bin";
    Rng rng(11);
    ModelConfig cfg = tiny_config();
    cfg.alpha = 0.25;
    cfg.gamma = 0.6;
    TransformerModel m(cfg, rng);
    m.save_checkpoint(path);
    auto loaded = TransformerModel::load_checkpoint(path);
    CHECK(loaded.config().vocab_size == cfg.vocab_size);
    CHECK(loaded.config().alpha == cfg.alpha);
    CHECK(loaded.config().gamma == cfg.gamma);
    REQUIRE(loaded.params().size() == m.params().size());
    for (const auto& [name, t] : m.params()) {
        const auto& u = loaded.params().at(name);
        REQUIRE(u.shape() == t.shape());
        for (std::size_t i = 0; i < t.size(); ++i) CHECK(u.data()[i] == t.data()[i]);
    }
    auto e1 = m.encode({1, 5, 2});
    auto e2 = loaded.encode({1, 5, 2});
    for (std::size_t i = 0; i < e1.hidden.size(); ++i) {
        CHECK(e1.hidden.data()[i] == e2.hidden.data()[i]);
    }
    fs::remove(path);
}

TEST_CASE("corrupt or truncated checkpoints are rejected") {
    namespace fs = std::filesystem;
    const std::string path = fs::temp_directory_path() / "dkgen_model_bad.bin";
    Rng rng(12);
    TransformerModel m(tiny_config(), rng);
    m.save_checkpoint(path);
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("NOPE", 4);
    }
    CHECK_THROWS_AS(TransformerModel::load_checkpoint(path), IoError);
    m.save_checkpoint(path);
    const auto full_size = fs::file_size(path);
    fs::resize_file(path, full_size / 2);
    CHECK_THROWS_AS(TransformerModel::load_checkpoint(path), IoError);
    fs::remove(path);
}

TEST_CASE("length limits and malformed inputs raise errors") {
    Rng rng(13);
    TransformerModel m(tiny_config(), rng);
    std::vector<int> too_long(17, 5);
    CHECK_THROWS_WITH_AS(m.encode(too_long), doctest::Contains("max positions"), Error);
    CHECK_THROWS_AS(m.encode({}), ShapeError);
    CHECK_THROWS_AS(m.encode({0, 0, 0}), Error);  // fully padded
    CHECK_THROWS_AS(m.encode({1, 2}, std::vector<uint8_t>{1}), ShapeError);
    auto p1 = m.encode({4, 6, 2});
    auto mem = concat_memory(nullptr, {p1});
    CHECK_THROWS_AS(m.decode({}, mem), Error);
    CHECK_THROWS_AS(concat_memory(nullptr, {}), ShapeError);
    CHECK_THROWS_AS(m.score_head(Tensor::zeros({1, 4})), ShapeError);
}
