#include "dkgen/selection.hpp"

#include <algorithm>
#include <cmath>

namespace dkgen {

namespace {

Tensor scaled_dot(const Tensor& a, const Tensor& b, double inv_sqrt_d) {
    return reshape(scale(matmul(a, transpose(b)), inv_sqrt_d), {1});
}

}  // namespace

RelevanceScores query_relevance(const TransformerModel& model,
                                const std::vector<Tensor>& pooled_passages) {
    if (pooled_passages.empty()) throw DataError("query_relevance: no passages");
    std::vector<Tensor> raw;
    raw.reserve(pooled_passages.size());
    for (const auto& p : pooled_passages) raw.push_back(model.score_head(p));
    RelevanceScores out;
    out.raw_query = stack_scalars(raw);
    out.prob_query = softmax(out.raw_query);
    return out;
}

void add_context_relevance(RelevanceScores& scores,
                           const std::vector<Tensor>& pooled_passages,
                           const Tensor& pooled_context) {
    if (pooled_passages.empty()) throw DataError("context_relevance: no passages");
    const std::size_t d = pooled_context.dim(1);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<Tensor> raw;
    raw.reserve(pooled_passages.size());
    for (const auto& p : pooled_passages) {
        if (p.dim(1) != d) {
            throw ShapeError("context_relevance: passage dim " + std::to_string(p.dim(1)) +
                             " vs context dim " + std::to_string(d));
        }
        raw.push_back(scaled_dot(p, pooled_context, inv_sqrt_d));
    }
    scores.raw_context = stack_scalars(raw);
    scores.prob_context = softmax(scores.raw_context);
    scores.has_context = true;
}

Tensor combined_relevance(const RelevanceScores& scores, bool use_context) {
    if (!use_context || !scores.has_context) return scores.prob_query;
    return add(scores.prob_query, scores.prob_context);
}

Tensor combined_raw_score(const TransformerModel& model, const Tensor& pooled_passage,
                          const Tensor* pooled_context) {
    Tensor s = model.score_head(pooled_passage);
    if (!pooled_context) return s;
    const double inv_sqrt_d =
        1.0 / std::sqrt(static_cast<double>(model.config().hidden_dim));
    return add(s, scaled_dot(pooled_passage, *pooled_context, inv_sqrt_d));
}

std::vector<std::size_t> select_subset(const std::vector<double>& combined,
                                       const std::set<std::size_t>& utilized,
                                       double gamma) {
    std::vector<std::size_t> candidates;
    for (std::size_t i = 0; i < combined.size(); ++i) {
        if (!utilized.count(i)) candidates.push_back(i);
    }
    if (candidates.empty()) {
        throw SelectionExhausted("select_subset: all passages utilized");
    }
    std::sort(candidates.begin(), candidates.end(), [&](std::size_t a, std::size_t b) {
        if (combined[a] != combined[b]) return combined[a] > combined[b];
        return a < b;
    });
    std::vector<std::size_t> out = {candidates[0]};
    if (candidates.size() > 1 && combined[candidates[0]] > 0.0 &&
        combined[candidates[1]] / combined[candidates[0]] > gamma) {
        out.push_back(candidates[1]);
    }
    return out;
}

}  // namespace dkgen
