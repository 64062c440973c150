#pragma once

#include <functional>
#include <set>
#include <string>
#include <vector>

#include "dkgen/data.hpp"
#include "dkgen/losses.hpp"
#include "dkgen/model.hpp"
#include "dkgen/retriever.hpp"
#include "dkgen/selection.hpp"
#include "dkgen/tokenizer.hpp"

namespace dkgen {

enum class DecodeStrategy { greedy, beam };

struct EngineConfig {
    std::size_t k = 20;                  // retrieval depth
    double gamma = 0.8;                  // runner-up selection ratio
    std::size_t max_sentence_tokens = 64;
    std::size_t max_utilized = 5;
    std::size_t max_iterations = 10;
    std::size_t max_passage_tokens = 64;   // [query] q [ref] p [EOS] budget
    std::size_t max_context_tokens = 128;  // [context] T [EOS] budget
    DecodeStrategy strategy = DecodeStrategy::greedy;
    std::size_t beam_width = 4;
    bool no_ds = false;  // static passage subset every iteration
    bool no_pg = false;  // drop the generated-so-far block from decoder memory
    bool no_rp = false;  // ignore context relevance when selecting
    std::uint64_t seed = 0;

    void validate() const;
};

struct TrainConfig {
    std::size_t epochs = 5;
    AdamWOptions optim;
    std::uint64_t seed = 0;
    double alpha = 0.5;
    bool no_di = false;  // drop the distillation loss term
    std::size_t max_passage_tokens = 64;
    std::size_t max_context_tokens = 128;
    std::string checkpoint_dir;  // per-epoch checkpoints when non-empty
    std::string log_path;        // JSON-lines step log when non-empty
};

struct LossRecord {
    std::size_t step = 0;
    double l_gen = 0.0;
    double l_rank = 0.0;
    double l_kd = 0.0;
    double total = 0.0;
};

struct TrainResult {
    std::vector<LossRecord> log;
};

// One teacher-forced forward pass over a training sample: decoder memory is
// [context; positive; negative], with the empty-context encoding used when the
// sample has no preceding sentences.
LossBreakdown compute_sample_loss(const TransformerModel& model,
                                  const Vocabulary& vocab,
                                  const TrainingSample& sample, double alpha,
                                  bool include_kd, std::size_t max_passage_tokens,
                                  std::size_t max_context_tokens,
                                  Rng* dropout_rng = nullptr);

// Epoch-shuffled AdamW training. Throws TrainingDiverged (with the step index)
// on a non-finite loss.
TrainResult train(const std::vector<TrainingSample>& samples, TransformerModel& model,
                  const Vocabulary& vocab, const TrainConfig& cfg);

struct IterationRecord {
    std::size_t iteration = 0;            // 1-based
    std::vector<double> combined;         // relevance snapshot over the k passages
    std::vector<std::size_t> selected;    // retrieval-rank ordinals, best first
    std::string sentence;                 // decoded text without marks
    std::string marked_sentence;
    std::vector<double> pooled_attention;  // one value per selected passage
    bool memory_has_context = false;
    std::vector<std::size_t> memory_offsets;
    double millis = 0.0;
};

struct GenerationTrace {
    std::string query;
    std::vector<Passage> retrieved;  // rank order
    std::vector<IterationRecord> iterations;
    std::string text;  // marked sentences joined by single spaces
    std::set<std::size_t> utilized;
    std::size_t prob_query_invocations = 0;
    std::string stop_reason;
};

// Test seam: replaces the combined relevance snapshot before selection.
struct GenerateHooks {
    std::function<std::vector<double>(std::size_t iteration,
                                      const std::vector<double>& combined)>
        combined_override;
};

GenerationTrace generate(const std::string& query, const InvertedIndex& index,
                         const TransformerModel& model, const Vocabulary& vocab,
                         const EngineConfig& cfg,
                         const GenerateHooks* hooks = nullptr);

void write_trace(const GenerationTrace& trace, const std::string& path);

enum class LatencyMode { iterative, single_pass };

// Median wall-clock milliseconds per query over `repeats` runs. Both modes
// decode to a fixed token budget (iterations x sentence budget for iterative,
// one 4x-sentence-budget pass over max_utilized passages for single_pass) so
// the comparison is not skewed by early stopping.
std::vector<double> measure_latency(const std::vector<std::string>& queries,
                                    const InvertedIndex& index,
                                    const TransformerModel& model,
                                    const Vocabulary& vocab, const EngineConfig& cfg,
                                    LatencyMode mode, std::size_t repeats = 3);

}  // namespace dkgen
