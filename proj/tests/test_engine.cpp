#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "dkgen/engine.hpp"

using namespace dkgen;

namespace {

struct World {
    SyntheticData data;
    Vocabulary vocab;
    InvertedIndex index;
    TransformerModel model;
    std::vector<TrainingSample> samples;
};

World make_world(std::uint64_t seed, std::size_t n_docs = 6) {
    Rng rng(seed);
    SyntheticData data = generate_synthetic(n_docs, rng);
    std::vector<std::string> texts;
    for (const auto& p : data.corpus) texts.push_back(p.text);
    for (const auto& d : data.docs) {
        texts.push_back(d.target_text);
        texts.push_back(d.query);
    }
    Vocabulary vocab = Vocabulary::build(texts, 2000);
    InvertedIndex index = InvertedIndex::build(data.corpus);
    ModelConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.hidden_dim = 16;
    cfg.num_encoder_layers = 1;
    cfg.num_decoder_layers = 1;
    cfg.num_heads = 2;
    cfg.ffn_dim = 32;
    cfg.max_positions = 96;
    cfg.dropout = 0.0;
    TransformerModel model(cfg, rng);
    std::vector<TrainingSample> samples;
    for (const auto& d : data.docs) {
        auto s = build_training_samples(d, rng);
        samples.insert(samples.end(), s.begin(), s.end());
    }
    return {std::move(data), std::move(vocab), std::move(index), std::move(model),
            std::move(samples)};
}

EngineConfig fast_engine() {
    EngineConfig cfg;
    cfg.k = 8;
    cfg.max_sentence_tokens = 10;
    cfg.max_passage_tokens = 24;
    cfg.max_context_tokens = 40;
    return cfg;
}

}  // namespace

TEST_CASE("sample loss components are finite and mix exactly") {
    auto w = make_world(1);
    REQUIRE(!w.samples.empty());
    for (double alpha : {0.0, 0.5, 1.0}) {
        auto loss = compute_sample_loss(w.model, w.vocab, w.samples[0], alpha, true,
                                        24, 40);
        CHECK(std::isfinite(loss.total.item()));
        CHECK(loss.l_gen.item() >= 0.0);
        CHECK(loss.l_rank.item() >= 0.0);
        CHECK(loss.l_kd.item() >= -1e-12);
        CHECK(loss.total.item() ==
              doctest::Approx(alpha * loss.l_gen.item() +
                              (1 - alpha) * (loss.l_rank.item() + loss.l_kd.item()))
                  .epsilon(1e-12));
    }
}

TEST_CASE("generation-only weighting leaves the scoring head untouched") {
    auto w = make_world(2);
    AdamW::zero_grads(w.model.params());
    auto loss =
        compute_sample_loss(w.model, w.vocab, w.samples[0], 1.0, true, 24, 40);
    loss.total.backward();
    const auto& head = w.model.params().at("score.2.w");
    double head_norm = 0.0;
    for (double g : head.grad()) head_norm += std::fabs(g);
    CHECK(head_norm == 0.0);
    const auto& emb = w.model.params().at("emb.tok");
    double emb_norm = 0.0;
    for (double g : emb.grad()) emb_norm += std::fabs(g);
    CHECK(emb_norm > 0.0);
}

TEST_CASE("training is reproducible and its loss decreases on a tiny set") {
    auto w1 = make_world(3);
    auto w2 = make_world(3);
    std::vector<TrainingSample> subset(w1.samples.begin(), w1.samples.begin() + 4);
    TrainConfig cfg;
    cfg.epochs = 5;
    cfg.seed = 7;
    cfg.optim.lr = 3e-3;
    auto r1 = train(subset, w1.model, w1.vocab, cfg);
    auto r2 = train(subset, w2.model, w2.vocab, cfg);
    REQUIRE(r1.log.size() == r2.log.size());
    REQUIRE(r1.log.size() == 20);
    for (std::size_t i = 0; i < r1.log.size(); ++i) {
        CHECK(r1.log[i].total == r2.log[i].total);
        CHECK(r1.log[i].step == i);
    }
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        first += r1.log[i].total;
        last += r1.log[r1.log.size() - 1 - i].total;
    }
    CHECK(last < first);
}

TEST_CASE("divergence aborts with the failing step index") {
    auto w = make_world(4);
    auto bad = w.model.params().at("out.b").mutable_data();
    for (auto& v : bad) v = std::numeric_limits<double>::infinity();
    std::vector<TrainingSample> subset(w.samples.begin(), w.samples.begin() + 2);
    TrainConfig cfg;
    cfg.epochs = 1;
    try {
        train(subset, w.model, w.vocab, cfg);
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.step == 0);
        CHECK(std::string(e.what()).find("step 0") != std::string::npos);
    }
}

TEST_CASE("training writes per-epoch checkpoints and a parseable step log") {
    namespace fs = std::filesystem;
    const auto dir = fs::temp_directory_path() / "dkgen_train_out";
    fs::remove_all(dir);
    auto w = make_world(5);
    std::vector<TrainingSample> subset(w.samples.begin(), w.samples.begin() + 3);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.checkpoint_dir = dir.string();
    cfg.log_path = (dir / "log.jsonl").string();
    fs::create_directories(dir);
    auto result = train(subset, w.model, w.vocab, cfg);
    CHECK(fs::exists(dir / "epoch_1.ckpt"));
    CHECK(fs::exists(dir / "epoch_2.ckpt"));
    auto loaded = TransformerModel::load_checkpoint((dir / "epoch_2.ckpt").string());
    CHECK(loaded.config().vocab_size == w.model.config().vocab_size);

    std::ifstream log(cfg.log_path);
    std::string line;
    std::size_t lines = 0;
    while (std::getline(log, line)) {
        auto j = nlohmann::json::parse(line);
        CHECK(j["step"].get<std::size_t>() == lines);
        CHECK(j.contains("l_gen"));
        CHECK(j.contains("l_rank"));
        CHECK(j.contains("l_kd"));
        CHECK(j.contains("total"));
        ++lines;
    }
    CHECK(lines == result.log.size());
    fs::remove_all(dir);
}

TEST_CASE("rigged selection scores yield the documented marks") {
    auto w = make_world(6);
    EngineConfig cfg = fast_engine();
    cfg.max_iterations = 2;
    GenerateHooks hooks;
    hooks.combined_override = [](std::size_t iteration,
                                 const std::vector<double>& combined) {
        std::vector<double> rigged(combined.size(), 0.01);
        if (iteration == 1) {
            rigged[0] = 1.0;
            rigged[1] = 0.9;
        } else {
            rigged[2] = 1.0;
        }
        return rigged;
    };
    auto trace =
        generate(w.data.docs[0].query, w.index, w.model, w.vocab, cfg, &hooks);
    REQUIRE(trace.iterations.size() == 2);
    CHECK(trace.iterations[0].selected == std::vector<std::size_t>{0, 1});
    CHECK(trace.iterations[1].selected == std::vector<std::size_t>{2});
    CHECK(trace.iterations[0].marked_sentence.ends_with(" [1] [2]"));
    CHECK(trace.iterations[1].marked_sentence.ends_with(" [3]"));
    CHECK(trace.utilized == std::set<std::size_t>{0, 1, 2});
    CHECK(trace.prob_query_invocations == 1);
    // concatenation identity
    std::string joined;
    for (const auto& rec : trace.iterations) {
        if (!joined.empty()) joined += " ";
        joined += rec.marked_sentence;
    }
    CHECK(trace.text == joined);
}

TEST_CASE("utilized passages grow each iteration and respect the bound") {
    auto w = make_world(7);
    EngineConfig cfg = fast_engine();
    auto trace = generate(w.data.docs[1].query, w.index, w.model, w.vocab, cfg);
    std::size_t seen = 0;
    for (const auto& rec : trace.iterations) {
        std::set<std::size_t> upto;
        for (const auto& r2 : trace.iterations) {
            if (r2.iteration > rec.iteration) break;
            upto.insert(r2.selected.begin(), r2.selected.end());
        }
        CHECK(upto.size() > seen);
        seen = upto.size();
    }
    CHECK(trace.utilized.size() <= cfg.max_utilized);
    CHECK(!trace.stop_reason.empty());
}

TEST_CASE("ablations reshape the decoder memory and the selection") {
    auto w = make_world(8);
    EngineConfig cfg = fast_engine();
    cfg.max_iterations = 3;

    cfg.no_pg = true;
    auto no_pg = generate(w.data.docs[2].query, w.index, w.model, w.vocab, cfg);
    for (const auto& rec : no_pg.iterations) {
        CHECK(!rec.memory_has_context);
        CHECK(rec.memory_offsets.size() == rec.selected.size() + 1);
    }

    cfg.no_pg = false;
    cfg.no_ds = true;
    auto no_ds = generate(w.data.docs[2].query, w.index, w.model, w.vocab, cfg);
    REQUIRE(!no_ds.iterations.empty());
    for (const auto& rec : no_ds.iterations) {
        CHECK(rec.selected == no_ds.iterations[0].selected);
    }

    cfg.no_ds = false;
    cfg.no_rp = true;
    auto no_rp = generate(w.data.docs[2].query, w.index, w.model, w.vocab, cfg);
    // without context relevance, every iteration scores with prob_query alone
    for (std::size_t i = 1; i < no_rp.iterations.size(); ++i) {
        CHECK(no_rp.iterations[i].combined == no_rp.iterations[0].combined);
    }
}

TEST_CASE("iterations with context carry a context block in memory") {
    auto w = make_world(9);
    EngineConfig cfg = fast_engine();
    cfg.max_iterations = 2;
    auto trace = generate(w.data.docs[0].query, w.index, w.model, w.vocab, cfg);
    if (trace.iterations.size() >= 2) {
        CHECK(!trace.iterations[0].memory_has_context);
        CHECK(trace.iterations[1].memory_has_context);
        CHECK(trace.iterations[1].memory_offsets.size() ==
              trace.iterations[1].selected.size() + 2);
    }
}

TEST_CASE("empty retrieval is an error") {
    auto w = make_world(10);
    CHECK_THROWS_AS(generate("   ", w.index, w.model, w.vocab, fast_engine()),
                    DataError);
}

TEST_CASE("beam decoding produces a valid trace") {
    auto w = make_world(11);
    EngineConfig cfg = fast_engine();
    cfg.strategy = DecodeStrategy::beam;
    cfg.beam_width = 2;
    cfg.max_iterations = 1;
    auto trace = generate(w.data.docs[0].query, w.index, w.model, w.vocab, cfg);
    CHECK(trace.prob_query_invocations == 1);
    if (!trace.iterations.empty()) {
        CHECK(!trace.iterations[0].sentence.empty());
    }
}

TEST_CASE("traces serialize to parseable structured text") {
    namespace fs = std::filesystem;
    const std::string path = fs::temp_directory_path() / "dkgen_trace.json";
    auto w = make_world(12);
    EngineConfig cfg = fast_engine();
    cfg.max_iterations = 2;
    auto trace = generate(w.data.docs[0].query, w.index, w.model, w.vocab, cfg);
    write_trace(trace, path);
    std::ifstream in(path);
    auto j = nlohmann::json::parse(in);
    CHECK(j["query"] == trace.query);
    CHECK(j["iterations"].size() == trace.iterations.size());
    CHECK(j["prob_query_invocations"] == 1);
    fs::remove(path);
}

TEST_CASE("latency measurement validates inputs and returns medians") {
    auto w = make_world(13, 12);
    EngineConfig cfg = fast_engine();
    cfg.max_sentence_tokens = 3;
    std::vector<std::string> queries;
    for (const auto& d : w.data.docs) queries.push_back(d.query);
    CHECK_THROWS_AS(measure_latency({"a", "b"}, w.index, w.model, w.vocab, cfg,
                                    LatencyMode::iterative),
                    DataError);
    auto iter = measure_latency(queries, w.index, w.model, w.vocab, cfg,
                                LatencyMode::iterative, 1);
    auto single = measure_latency(queries, w.index, w.model, w.vocab, cfg,
                                  LatencyMode::single_pass, 1);
    REQUIRE(iter.size() == queries.size());
    REQUIRE(single.size() == queries.size());
    for (double v : iter) CHECK(v > 0.0);
    for (double v : single) CHECK(v > 0.0);
}
