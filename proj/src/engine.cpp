#include "dkgen/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace dkgen {

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point start) {
    return std::chrono::duration<double, std::milli>(Clock::now() - start).count();
}

bool is_special(int id) {
    return id >= 0 && id < static_cast<int>(Vocabulary::kNumSpecials);
}

// Greedy or beam sentence decoding over a fixed memory. Special tokens other
// than EOS are never emitted. Returns token ids without BOS/EOS.
std::vector<int> decode_sentence(const TransformerModel& model, const Memory& memory,
                                 const EngineConfig& cfg) {
    NoGradGuard ng;
    if (cfg.strategy == DecodeStrategy::greedy) {
        std::vector<int> prefix = {Vocabulary::kBos};
        std::vector<int> out;
        for (std::size_t step = 0; step < cfg.max_sentence_tokens; ++step) {
            auto [logits, record] = model.decode_step(prefix, memory);
            int best = Vocabulary::kEos;
            double best_score = logits.at(Vocabulary::kEos);
            for (std::size_t v = Vocabulary::kNumSpecials; v < logits.dim(0); ++v) {
                if (logits.at(v) > best_score) {
                    best_score = logits.at(v);
                    best = static_cast<int>(v);
                }
            }
            if (best == Vocabulary::kEos) break;
            out.push_back(best);
            prefix.push_back(best);
        }
        return out;
    }

    struct Beam {
        std::vector<int> ids;
        double logp = 0.0;
        bool finished = false;
    };
    std::vector<Beam> beams = {{{}, 0.0, false}};
    for (std::size_t step = 0; step < cfg.max_sentence_tokens; ++step) {
        bool any_open = false;
        std::vector<Beam> next;
        for (const auto& beam : beams) {
            if (beam.finished) {
                next.push_back(beam);
                continue;
            }
            any_open = true;
            std::vector<int> prefix = {Vocabulary::kBos};
            prefix.insert(prefix.end(), beam.ids.begin(), beam.ids.end());
            auto [logits, record] = model.decode_step(prefix, memory);
            const Tensor logp = log_softmax(logits);
            std::vector<std::size_t> cand = {Vocabulary::kEos};
            for (std::size_t v = Vocabulary::kNumSpecials; v < logp.dim(0); ++v) {
                cand.push_back(v);
            }
            std::partial_sort(cand.begin(),
                              cand.begin() + std::min(cfg.beam_width, cand.size()),
                              cand.end(), [&](std::size_t a, std::size_t b) {
                                  return logp.at(a) > logp.at(b);
                              });
            for (std::size_t c = 0; c < std::min(cfg.beam_width, cand.size()); ++c) {
                Beam child = beam;
                child.logp += logp.at(cand[c]);
                if (static_cast<int>(cand[c]) == Vocabulary::kEos) {
                    child.finished = true;
                } else {
                    child.ids.push_back(static_cast<int>(cand[c]));
                }
                next.push_back(std::move(child));
            }
        }
        if (!any_open) break;
        std::sort(next.begin(), next.end(),
                  [](const Beam& a, const Beam& b) { return a.logp > b.logp; });
        if (next.size() > cfg.beam_width) next.resize(cfg.beam_width);
        beams = std::move(next);
    }
    const Beam* best = nullptr;
    for (const auto& beam : beams) {
        if (beam.finished && (!best || beam.logp > best->logp)) best = &beam;
    }
    if (!best) best = &beams.front();
    return best->ids;
}

std::vector<double> snapshot(const Tensor& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
}

}  // namespace

void EngineConfig::validate() const {
    if (k == 0 || max_sentence_tokens == 0 || max_utilized == 0 ||
        max_iterations == 0 || max_passage_tokens == 0 || max_context_tokens == 0 ||
        beam_width == 0) {
        throw DataError("engine config: all bounds must be >= 1");
    }
    if (gamma <= 0.0 || gamma > 1.0) throw DataError("engine config: gamma outside (0,1]");
}

LossBreakdown compute_sample_loss(const TransformerModel& model,
                                  const Vocabulary& vocab,
                                  const TrainingSample& sample, double alpha,
                                  bool include_kd, std::size_t max_passage_tokens,
                                  std::size_t max_context_tokens, Rng* dropout_rng) {
    const auto ctx_ids = vocab.format_context(sample.context, max_context_tokens);
    const auto pos_ids =
        vocab.format_passage(sample.query, sample.positive.text, max_passage_tokens);
    const auto neg_ids =
        vocab.format_passage(sample.query, sample.negative.text, max_passage_tokens);
    const auto ctx = model.encode(ctx_ids, dropout_rng);
    const auto pos = model.encode(pos_ids, dropout_rng);
    const auto neg = model.encode(neg_ids, dropout_rng);
    const Memory memory = concat_memory(&ctx, {pos, neg});

    std::vector<int> sentence_ids = vocab.encode(sample.sentence);
    if (sentence_ids.empty()) {
        throw DataError("training sample " + std::to_string(sample.sentence_index) +
                        ": sentence encodes to no tokens");
    }
    if (sentence_ids.size() + 1 > model.config().max_positions) {
        sentence_ids.resize(model.config().max_positions - 1);
    }
    std::vector<int> prefix = {Vocabulary::kBos};
    prefix.insert(prefix.end(), sentence_ids.begin(), sentence_ids.end());
    std::vector<int> targets = sentence_ids;
    targets.push_back(Vocabulary::kEos);

    DecodeResult decoded = model.decode(prefix, memory, dropout_rng);
    const Tensor l_gen = nll_loss(decoded.logits, targets);

    const Tensor s_pos = combined_raw_score(model, pos.pooled, &ctx.pooled);
    const Tensor s_neg = combined_raw_score(model, neg.pooled, &ctx.pooled);
    const Tensor l_rank = pairwise_rank_loss(s_pos, s_neg);

    // teacher distribution over the (positive, negative) pair, held constant
    const double a = s_pos.item(), b = s_neg.item();
    const double mx = std::max(a, b);
    const double ea = std::exp(a - mx), eb = std::exp(b - mx);
    const std::vector<double> s_rel = {ea / (ea + eb), eb / (ea + eb)};
    const Tensor s_att = extract_passage_attention(decoded.attn, memory);
    const Tensor l_kd = kd_loss(s_rel, s_att);

    return total_loss(l_gen, l_rank, l_kd, alpha, include_kd);
}

TrainResult train(const std::vector<TrainingSample>& samples, TransformerModel& model,
                  const Vocabulary& vocab, const TrainConfig& cfg) {
    if (samples.empty()) throw DataError("train: empty sample list");
    Rng rng(cfg.seed);
    AdamW optimizer(cfg.optim);
    TrainResult result;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    const bool use_dropout = model.config().dropout > 0.0;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t idx : order) {
            AdamW::zero_grads(model.params());
            LossBreakdown loss = compute_sample_loss(
                model, vocab, samples[idx], cfg.alpha, !cfg.no_di,
                cfg.max_passage_tokens, cfg.max_context_tokens,
                use_dropout ? &rng : nullptr);
            const double total = loss.total.item();
            if (!std::isfinite(total)) {
                throw TrainingDiverged(
                    "non-finite loss at step " + std::to_string(step), step);
            }
            loss.total.backward();
            optimizer.step(model.params());
            result.log.push_back({step, loss.l_gen.item(), loss.l_rank.item(),
                                  loss.l_kd.item(), total});
            ++step;
        }
        if (!cfg.checkpoint_dir.empty()) {
            std::filesystem::create_directories(cfg.checkpoint_dir);
            model.save_checkpoint(cfg.checkpoint_dir + "/epoch_" +
                                  std::to_string(epoch + 1) + ".ckpt");
        }
    }
    if (!cfg.log_path.empty()) {
        std::ofstream out(cfg.log_path);
        if (!out) throw IoError("train: cannot write log " + cfg.log_path);
        for (const auto& r : result.log) {
            nlohmann::json j{{"step", r.step},
                             {"l_gen", r.l_gen},
                             {"l_rank", r.l_rank},
                             {"l_kd", r.l_kd},
                             {"total", r.total}};
            out << j.dump() << "\n";
        }
    }
    return result;
}

GenerationTrace generate(const std::string& query, const InvertedIndex& index,
                         const TransformerModel& model, const Vocabulary& vocab,
                         const EngineConfig& cfg, const GenerateHooks* hooks) {
    cfg.validate();
    NoGradGuard ng;
    GenerationTrace trace;
    trace.query = query;
    const auto hits = index.search(query, cfg.k);
    if (hits.empty()) {
        throw DataError("generate: retrieval returned no passages for '" + query + "'");
    }
    for (const auto& h : hits) trace.retrieved.push_back(index.passage(h.ordinal));

    // passages are encoded once and their states reused across iterations
    std::vector<EncodedSequence> encoded;
    std::vector<Tensor> pooled;
    for (const auto& p : trace.retrieved) {
        encoded.push_back(
            model.encode(vocab.format_passage(query, p.text, cfg.max_passage_tokens)));
        pooled.push_back(encoded.back().pooled);
    }
    RelevanceScores scores = query_relevance(model, pooled);
    ++trace.prob_query_invocations;

    std::vector<std::string> plain_sentences;
    std::vector<std::string> marked_sentences;
    std::vector<std::size_t> static_selection;  // no_ds subset, fixed at iteration 1
    trace.stop_reason = "max_iterations";
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        const auto iter_start = Clock::now();
        std::string context_text;
        for (const auto& s : plain_sentences) {
            if (!context_text.empty()) context_text += " ";
            context_text += s;
        }
        EncodedSequence ctx;
        const bool have_context = !context_text.empty();
        if (have_context) {
            ctx = model.encode(vocab.format_context(context_text, cfg.max_context_tokens));
        }

        RelevanceScores iter_scores = scores;
        if (have_context && !cfg.no_rp) {
            add_context_relevance(iter_scores, pooled, ctx.pooled);
        }
        std::vector<double> combined =
            snapshot(combined_relevance(iter_scores, !cfg.no_rp));
        if (hooks && hooks->combined_override) {
            combined = hooks->combined_override(it, combined);
        }

        std::vector<std::size_t> selected;
        if (cfg.no_ds) {
            if (static_selection.empty()) {
                static_selection = select_subset(combined, {}, cfg.gamma);
            }
            selected = static_selection;
        } else {
            try {
                selected = select_subset(combined, trace.utilized, cfg.gamma);
            } catch (const SelectionExhausted&) {
                trace.stop_reason = "selection_exhausted";
                break;
            }
            // never carry the utilized count past its stop bound
            const std::size_t room = cfg.max_utilized - trace.utilized.size();
            if (selected.size() > room) selected.resize(room);
        }

        std::vector<EncodedSequence> memory_passages;
        for (std::size_t s : selected) memory_passages.push_back(encoded[s]);
        const bool with_context = have_context && !cfg.no_pg;
        const Memory memory =
            concat_memory(with_context ? &ctx : nullptr, memory_passages);

        const std::vector<int> sentence_ids = decode_sentence(model, memory, cfg);
        if (sentence_ids.empty()) {
            trace.stop_reason = "empty_sentence";
            break;
        }
        const std::string sentence = vocab.decode(sentence_ids);

        std::vector<int> prefix = {Vocabulary::kBos};
        prefix.insert(prefix.end(), sentence_ids.begin(), sentence_ids.end());
        const DecodeResult decoded = model.decode(prefix, memory);
        const Tensor attn_pool = extract_passage_attention(decoded.attn, memory);

        IterationRecord rec;
        rec.iteration = it;
        rec.combined = combined;
        rec.selected = selected;
        rec.sentence = sentence;
        rec.marked_sentence = sentence;
        for (std::size_t s : selected) {
            rec.marked_sentence += " [" + std::to_string(s + 1) + "]";
        }
        rec.pooled_attention = snapshot(attn_pool);
        rec.memory_has_context = memory.has_context;
        rec.memory_offsets = memory.offsets;
        rec.millis = ms_since(iter_start);
        plain_sentences.push_back(sentence);
        marked_sentences.push_back(rec.marked_sentence);
        trace.iterations.push_back(std::move(rec));
        for (std::size_t s : selected) trace.utilized.insert(s);
        if (trace.utilized.size() >= cfg.max_utilized) {
            trace.stop_reason = "max_utilized";
            break;
        }
    }

    for (const auto& s : marked_sentences) {
        if (!trace.text.empty()) trace.text += " ";
        trace.text += s;
    }

    // post-conditions on the trace
    std::set<std::size_t> selected_union;
    for (const auto& rec : trace.iterations) {
        for (std::size_t s : rec.selected) selected_union.insert(s);
    }
    if (selected_union != trace.utilized) {
        throw Error("generate: utilized set diverged from iteration selections");
    }
    if (!cfg.no_ds && trace.utilized.size() > cfg.max_utilized) {
        throw Error("generate: utilized passages exceed the stop bound");
    }
    return trace;
}

void write_trace(const GenerationTrace& trace, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("trace: cannot write " + path);
    nlohmann::json iters = nlohmann::json::array();
    for (const auto& rec : trace.iterations) {
        iters.push_back({{"iteration", rec.iteration},
                         {"combined", rec.combined},
                         {"selected", rec.selected},
                         {"sentence", rec.sentence},
                         {"marked_sentence", rec.marked_sentence},
                         {"pooled_attention", rec.pooled_attention},
                         {"memory_has_context", rec.memory_has_context},
                         {"memory_offsets", rec.memory_offsets},
                         {"millis", rec.millis}});
    }
    nlohmann::json retrieved = nlohmann::json::array();
    for (const auto& p : trace.retrieved) retrieved.push_back(p.id);
    nlohmann::json j{{"query", trace.query},
                     {"retrieved", retrieved},
                     {"iterations", iters},
                     {"text", trace.text},
                     {"utilized", std::vector<std::size_t>(trace.utilized.begin(),
                                                           trace.utilized.end())},
                     {"prob_query_invocations", trace.prob_query_invocations},
                     {"stop_reason", trace.stop_reason}};
    out << j.dump(2) << "\n";
}

std::vector<double> measure_latency(const std::vector<std::string>& queries,
                                    const InvertedIndex& index,
                                    const TransformerModel& model,
                                    const Vocabulary& vocab, const EngineConfig& cfg,
                                    LatencyMode mode, std::size_t repeats) {
    cfg.validate();
    if (queries.size() < 10) {
        throw DataError("measure_latency: need at least 10 queries");
    }
    if (repeats == 0) throw DataError("measure_latency: repeats must be >= 1");
    NoGradGuard ng;

    // fixed decoding budgets keep both modes comparable under early EOS
    auto decode_budget = [&](const Memory& memory, std::size_t budget) {
        std::vector<int> prefix = {Vocabulary::kBos};
        for (std::size_t step = 0; step < budget; ++step) {
            auto [logits, record] = model.decode_step(prefix, memory);
            int best = static_cast<int>(Vocabulary::kNumSpecials);
            double best_score = logits.at(best);
            for (std::size_t v = Vocabulary::kNumSpecials; v < logits.dim(0); ++v) {
                if (logits.at(v) > best_score) {
                    best_score = logits.at(v);
                    best = static_cast<int>(v);
                }
            }
            prefix.push_back(best);
        }
        return prefix;
    };

    std::vector<double> out;
    for (const auto& query : queries) {
        std::vector<double> runs;
        for (std::size_t r = 0; r < repeats; ++r) {
            const auto start = Clock::now();
            const auto hits = index.search(query, cfg.k);
            if (hits.empty()) {
                throw DataError("measure_latency: no passages for '" + query + "'");
            }
            std::vector<EncodedSequence> encoded;
            std::vector<Tensor> pooled;
            for (const auto& h : hits) {
                encoded.push_back(model.encode(vocab.format_passage(
                    query, index.passage(h.ordinal).text, cfg.max_passage_tokens)));
                pooled.push_back(encoded.back().pooled);
            }
            if (mode == LatencyMode::iterative) {
                RelevanceScores scores = query_relevance(model, pooled);
                std::set<std::size_t> utilized;
                std::string context_text;
                for (std::size_t it = 0; it < cfg.max_utilized; ++it) {
                    EncodedSequence ctx;
                    const bool have_context = !context_text.empty();
                    RelevanceScores iter_scores = scores;
                    if (have_context) {
                        ctx = model.encode(
                            vocab.format_context(context_text, cfg.max_context_tokens));
                        add_context_relevance(iter_scores, pooled, ctx.pooled);
                    }
                    const auto combined =
                        snapshot(combined_relevance(iter_scores, true));
                    std::vector<std::size_t> selected;
                    try {
                        selected = select_subset(combined, utilized, cfg.gamma);
                    } catch (const SelectionExhausted&) {
                        utilized.clear();
                        selected = select_subset(combined, utilized, cfg.gamma);
                    }
                    std::vector<EncodedSequence> blocks;
                    for (std::size_t s : selected) blocks.push_back(encoded[s]);
                    const Memory memory =
                        concat_memory(have_context ? &ctx : nullptr, blocks);
                    const auto prefix = decode_budget(memory, cfg.max_sentence_tokens);
                    std::vector<int> ids(prefix.begin() + 1, prefix.end());
                    const std::string sentence = vocab.decode(ids);
                    if (!context_text.empty()) context_text += " ";
                    context_text += sentence;
                    for (std::size_t s : selected) utilized.insert(s);
                }
            } else {
                std::vector<EncodedSequence> blocks;
                for (std::size_t s = 0;
                     s < std::min(cfg.max_utilized, encoded.size()); ++s) {
                    blocks.push_back(encoded[s]);
                }
                const Memory memory = concat_memory(nullptr, blocks);
                const std::size_t budget =
                    std::min(4 * cfg.max_sentence_tokens,
                             model.config().max_positions - 1);
                decode_budget(memory, budget);
            }
            runs.push_back(ms_since(start));
        }
        std::sort(runs.begin(), runs.end());
        out.push_back(runs[runs.size() / 2]);
    }
    return out;
}

}  // namespace dkgen
