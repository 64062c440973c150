#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dkgen/engine.hpp"
#include "dkgen/eval.hpp"

namespace {

using namespace dkgen;

std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(line);
    }
    return lines;
}

struct ModelFlags {
    std::size_t hidden_dim = 64;
    std::size_t enc_layers = 2;
    std::size_t dec_layers = 2;
    std::size_t heads = 4;
    std::size_t ffn_dim = 256;
    std::size_t max_positions = 256;
    double dropout = 0.1;
    double alpha = 0.5;
    double gamma = 0.8;
};

void add_model_flags(CLI::App& cmd, ModelFlags& m) {
    cmd.add_option("--hidden-dim", m.hidden_dim, "Model width d")
        ->capture_default_str();
    cmd.add_option("--encoder-layers", m.enc_layers, "Encoder depth")
        ->capture_default_str();
    cmd.add_option("--decoder-layers", m.dec_layers, "Decoder depth")
        ->capture_default_str();
    cmd.add_option("--heads", m.heads, "Attention heads")->capture_default_str();
    cmd.add_option("--ffn-dim", m.ffn_dim, "Feed-forward width")->capture_default_str();
    cmd.add_option("--max-positions", m.max_positions, "Longest supported sequence")
        ->capture_default_str();
    cmd.add_option("--dropout", m.dropout, "Training dropout rate")
        ->capture_default_str();
    cmd.add_option("--alpha", m.alpha, "Generation loss weight in the total loss")
        ->capture_default_str();
    cmd.add_option("--gamma", m.gamma, "Runner-up selection ratio threshold")
        ->capture_default_str();
}

void add_engine_flags(CLI::App& cmd, EngineConfig& e) {
    cmd.add_option("--k", e.k, "Passages retrieved per query")->capture_default_str();
    cmd.add_option("--gamma", e.gamma, "Runner-up selection ratio threshold")
        ->capture_default_str();
    cmd.add_option("--max-sentence-tokens", e.max_sentence_tokens,
                   "Per-sentence decoding budget")
        ->capture_default_str();
    cmd.add_option("--max-utilized", e.max_utilized,
                   "Stop after this many distinct passages are used")
        ->capture_default_str();
    cmd.add_option("--max-iterations", e.max_iterations, "Hard iteration cap")
        ->capture_default_str();
    cmd.add_option("--max-passage-tokens", e.max_passage_tokens,
                   "Encoder budget for [query] q [ref] p [EOS]")
        ->capture_default_str();
    cmd.add_option("--max-context-tokens", e.max_context_tokens,
                   "Encoder budget for [context] T [EOS]")
        ->capture_default_str();
    cmd.add_option("--beam-width", e.beam_width, "Beam width when --beam is set")
        ->capture_default_str();
    cmd.add_flag_callback(
        "--beam", [&e]() { e.strategy = DecodeStrategy::beam; },
        "Beam search instead of greedy decoding");
    cmd.add_flag("--no-ds", e.no_ds, "Ablation: static passage subset (no dynamic selection)");
    cmd.add_flag("--no-pg", e.no_pg, "Ablation: drop previously generated text from memory");
    cmd.add_flag("--no-rp", e.no_rp, "Ablation: ignore context relevance in selection");
    cmd.add_option("--seed", e.seed, "Random seed")->capture_default_str();
}

int run(int argc, char** argv) {
    CLI::App app{"Iterative knowledge-selected text generation pipeline"};
    app.require_subcommand(1);
    app.set_config("--config", "",
                   "key=value configuration file with [subcommand] sections; "
                   "command-line flags override it");
    app.allow_config_extras(false);

    // index
    auto* cmd_index = app.add_subcommand("index", "Build a BM25 index from a corpus");
    std::string corpus_path, index_out;
    cmd_index->add_option("--corpus", corpus_path, "NDJSON corpus path")->required();
    cmd_index->add_option("--out", index_out, "Index output path")->required();

    // synth
    auto* cmd_synth =
        app.add_subcommand("synth", "Generate a synthetic dataset and corpus");
    std::size_t synth_n = 50;
    std::uint64_t synth_seed = 0;
    std::string synth_out, synth_corpus_out;
    cmd_synth->add_option("--n", synth_n, "Number of documents")->capture_default_str();
    cmd_synth->add_option("--seed", synth_seed, "Random seed")->capture_default_str();
    cmd_synth->add_option("--out", synth_out, "Dataset NDJSON output")->required();
    cmd_synth->add_option("--corpus-out", synth_corpus_out, "Corpus NDJSON output")
        ->required();

    // train
    auto* cmd_train = app.add_subcommand("train", "Train a model on a dataset");
    std::string train_data, train_out, train_vocab_out, train_ckpt_dir, train_log;
    std::size_t train_epochs = 5;
    double train_lr = 1e-3;
    std::uint64_t train_seed = 0;
    bool train_no_di = false;
    std::size_t vocab_max = 20000;
    ModelFlags mf;
    cmd_train->add_option("--data", train_data, "Dataset NDJSON path")->required();
    cmd_train->add_option("--out", train_out, "Final checkpoint path")->required();
    cmd_train->add_option("--vocab-out", train_vocab_out,
                          "Vocabulary output path (default: <out>.vocab)");
    cmd_train->add_option("--checkpoint-dir", train_ckpt_dir,
                          "Directory for per-epoch checkpoints");
    cmd_train->add_option("--log", train_log, "JSON-lines training log path");
    cmd_train->add_option("--epochs", train_epochs, "Training epochs")
        ->capture_default_str();
    cmd_train->add_option("--lr", train_lr, "AdamW learning rate")
        ->capture_default_str();
    cmd_train->add_option("--seed", train_seed, "Random seed")->capture_default_str();
    cmd_train->add_option("--vocab-size", vocab_max, "Vocabulary size cap")
        ->capture_default_str();
    cmd_train->add_flag("--no-di", train_no_di,
                        "Ablation: drop the distillation loss term");
    add_model_flags(*cmd_train, mf);

    // generate
    auto* cmd_generate =
        app.add_subcommand("generate", "Generate marked text for queries");
    std::string gen_query, gen_query_file, gen_index, gen_ckpt, gen_vocab, gen_out;
    EngineConfig gen_cfg;
    cmd_generate->add_option("--query", gen_query, "Single query string");
    cmd_generate->add_option("--query-file", gen_query_file, "File with one query per line");
    cmd_generate->add_option("--index", gen_index, "BM25 index path")->required();
    cmd_generate->add_option("--checkpoint", gen_ckpt, "Model checkpoint path")
        ->required();
    cmd_generate->add_option("--vocab", gen_vocab, "Vocabulary path")->required();
    cmd_generate->add_option("--out", gen_out,
                             "Trace output path (suffix -N added per extra query)");
    add_engine_flags(*cmd_generate, gen_cfg);

    // eval
    auto* cmd_eval = app.add_subcommand("eval", "Score generations against targets");
    std::string eval_generations, eval_targets;
    cmd_eval->add_option("--generations", eval_generations,
                         "File with one generation per line")
        ->required();
    cmd_eval->add_option("--targets", eval_targets, "File with one target per line")
        ->required();

    // bench
    auto* cmd_bench =
        app.add_subcommand("bench", "Compare iterative and single-pass latency");
    std::string bench_queries, bench_index, bench_ckpt, bench_vocab;
    std::size_t bench_repeats = 3;
    EngineConfig bench_cfg;
    cmd_bench->add_option("--queries", bench_queries, "File with one query per line")
        ->required();
    cmd_bench->add_option("--index", bench_index, "BM25 index path")->required();
    cmd_bench->add_option("--checkpoint", bench_ckpt, "Model checkpoint path")
        ->required();
    cmd_bench->add_option("--vocab", bench_vocab, "Vocabulary path")->required();
    cmd_bench->add_option("--repeats", bench_repeats, "Timing repetitions per query")
        ->capture_default_str();
    add_engine_flags(*cmd_bench, bench_cfg);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    if (cmd_index->parsed()) {
        auto corpus = load_corpus(corpus_path);
        InvertedIndex::build(std::move(corpus)).save(index_out);
        std::cout << "indexed -> " << index_out << "\n";
        return 0;
    }

    if (cmd_synth->parsed()) {
        Rng rng(synth_seed);
        auto data = generate_synthetic(synth_n, rng);
        write_dataset(data.docs, synth_out);
        write_corpus(data.corpus, synth_corpus_out);
        std::cout << data.docs.size() << " documents -> " << synth_out << ", "
                  << data.corpus.size() << " passages -> " << synth_corpus_out << "\n";
        return 0;
    }

    if (cmd_train->parsed()) {
        auto docs = load_dataset(train_data);
        std::vector<std::string> texts;
        for (const auto& d : docs) {
            texts.push_back(d.query);
            texts.push_back(d.target_text);
            for (const auto& r : d.references) texts.push_back(r.passage.text);
        }
        Vocabulary vocab = Vocabulary::build(texts, vocab_max);
        if (train_vocab_out.empty()) train_vocab_out = train_out + ".vocab";
        vocab.save(train_vocab_out);

        ModelConfig mc;
        mc.vocab_size = vocab.size();
        mc.hidden_dim = mf.hidden_dim;
        mc.num_encoder_layers = mf.enc_layers;
        mc.num_decoder_layers = mf.dec_layers;
        mc.num_heads = mf.heads;
        mc.ffn_dim = mf.ffn_dim;
        mc.max_positions = mf.max_positions;
        mc.dropout = mf.dropout;
        mc.alpha = mf.alpha;
        mc.gamma = mf.gamma;
        Rng init_rng(train_seed);
        TransformerModel model(mc, init_rng);

        Rng sample_rng(train_seed + 1);
        std::vector<TrainingSample> samples;
        SampleBuildStats stats;
        for (const auto& d : docs) {
            auto s = build_training_samples(d, sample_rng, &stats);
            samples.insert(samples.end(), s.begin(), s.end());
        }
        std::cout << samples.size() << " training samples ("
                  << stats.skipped_sentences << " sentences skipped)\n";

        TrainConfig tc;
        tc.epochs = train_epochs;
        tc.optim.lr = train_lr;
        tc.seed = train_seed;
        tc.alpha = mf.alpha;
        tc.no_di = train_no_di;
        tc.checkpoint_dir = train_ckpt_dir;
        tc.log_path = train_log;
        auto result = train(samples, model, vocab, tc);
        model.save_checkpoint(train_out);
        const auto& last = result.log.back();
        std::cout << "final step " << last.step << ": l_gen " << last.l_gen
                  << " l_rank " << last.l_rank << " l_kd " << last.l_kd << " total "
                  << last.total << "\n";
        std::cout << "checkpoint -> " << train_out << ", vocabulary -> "
                  << train_vocab_out << "\n";
        return 0;
    }

    if (cmd_generate->parsed()) {
        if (gen_query.empty() == gen_query_file.empty()) {
            std::cerr << "generate: exactly one of --query / --query-file is required\n";
            return 2;
        }
        std::vector<std::string> queries =
            gen_query.empty() ? read_lines(gen_query_file)
                              : std::vector<std::string>{gen_query};
        auto index = InvertedIndex::load(gen_index);
        auto model = TransformerModel::load_checkpoint(gen_ckpt);
        auto vocab = Vocabulary::load(gen_vocab);
        for (std::size_t i = 0; i < queries.size(); ++i) {
            auto trace = generate(queries[i], index, model, vocab, gen_cfg);
            std::cout << trace.text << "\n";
            if (!gen_out.empty()) {
                std::string path = gen_out;
                if (queries.size() > 1) path += "-" + std::to_string(i + 1);
                write_trace(trace, path);
            }
        }
        return 0;
    }

    if (cmd_eval->parsed()) {
        auto generations = read_lines(eval_generations);
        auto targets = read_lines(eval_targets);
        if (generations.size() != targets.size()) {
            throw DataError("eval: " + std::to_string(generations.size()) +
                            " generations vs " + std::to_string(targets.size()) +
                            " targets");
        }
        std::cout << evaluate(generations, targets).table_row() << "\n";
        return 0;
    }

    if (cmd_bench->parsed()) {
        auto queries = read_lines(bench_queries);
        auto index = InvertedIndex::load(bench_index);
        auto model = TransformerModel::load_checkpoint(bench_ckpt);
        auto vocab = Vocabulary::load(bench_vocab);
        auto median_of = [](std::vector<double> v) {
            std::sort(v.begin(), v.end());
            return v[v.size() / 2];
        };
        auto iter = measure_latency(queries, index, model, vocab, bench_cfg,
                                    LatencyMode::iterative, bench_repeats);
        auto single = measure_latency(queries, index, model, vocab, bench_cfg,
                                      LatencyMode::single_pass, bench_repeats);
        std::cout << "iterative " << median_of(iter) << " ms/query, single_pass "
                  << median_of(single) << " ms/query (medians over "
                  << queries.size() << " queries)\n";
        return 0;
    }

    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const dkgen::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
