#pragma once

#include <set>
#include <vector>

#include "dkgen/model.hpp"

namespace dkgen {

// Relevance of each candidate passage to the query and to the text generated
// so far. Raw scores are gradient-tracked; probabilities are softmaxes over
// the k candidates.
struct RelevanceScores {
    Tensor raw_query;     // [k] score-head outputs
    Tensor prob_query;    // [k]
    Tensor raw_context;   // [k] scaled dot products (only when has_context)
    Tensor prob_context;  // [k]
    bool has_context = false;
};

// Raw score per passage via the model's scoring head, softmaxed over k.
RelevanceScores query_relevance(const TransformerModel& model,
                                const std::vector<Tensor>& pooled_passages);

// Adds context scores raw_i = dot(pooled_i, pooled_context) / sqrt(d).
void add_context_relevance(RelevanceScores& scores,
                           const std::vector<Tensor>& pooled_passages,
                           const Tensor& pooled_context);

// prob_query + prob_context, or prob_query alone when context is absent or
// disabled.
Tensor combined_relevance(const RelevanceScores& scores, bool use_context);

// Raw (pre-softmax) query + context score for one passage, used by the
// ranking loss. Falls back to the query score alone without context.
Tensor combined_raw_score(const TransformerModel& model, const Tensor& pooled_passage,
                          const Tensor* pooled_context);

// Picks the best non-utilized passage, plus the runner-up when its combined
// score is within a factor gamma of the best. Throws SelectionExhausted when
// every passage has been utilized.
std::vector<std::size_t> select_subset(const std::vector<double>& combined,
                                       const std::set<std::size_t>& utilized,
                                       double gamma);

}  // namespace dkgen
