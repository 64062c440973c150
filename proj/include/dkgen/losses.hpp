#pragma once

#include <vector>

#include "dkgen/numerics.hpp"

namespace dkgen {

struct LossBreakdown {
    Tensor l_gen;
    Tensor l_rank;
    Tensor l_kd;
    Tensor total;
    double alpha = 0.5;
};

// Summed negative log-likelihood of the targets under per-step logits
// [steps x vocab]. PAD targets are excluded from the sum.
Tensor nll_loss(const Tensor& logits, const std::vector<int>& target_ids);

// Logistic pairwise loss ln(1 + exp(-(s_pos - s_neg))) over raw scores.
Tensor pairwise_rank_loss(const Tensor& raw_score_pos, const Tensor& raw_score_neg);

// KL(s_rel || softmax(pooled_attention)). s_rel is a fixed probability vector
// (the relevance branch is not differentiated through); pooled_attention is a
// gradient-tracked [j] tensor of raw scalars.
Tensor kd_loss(const std::vector<double>& s_rel, const Tensor& pooled_attention);

// alpha * l_gen + (1 - alpha) * (l_rank + l_kd). Pass include_kd = false to
// drop the distillation term.
LossBreakdown total_loss(const Tensor& l_gen, const Tensor& l_rank, const Tensor& l_kd,
                         double alpha, bool include_kd = true);

}  // namespace dkgen
