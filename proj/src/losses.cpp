#include "dkgen/losses.hpp"

#include <cmath>

#include "dkgen/tokenizer.hpp"

namespace dkgen {

Tensor nll_loss(const Tensor& logits, const std::vector<int>& target_ids) {
    if (logits.rank() != 2 || logits.dim(0) != target_ids.size()) {
        throw ShapeError("nll_loss: " + std::to_string(target_ids.size()) +
                         " targets vs logits " + shape_str(logits.shape()));
    }
    const Tensor logp = log_softmax(logits);
    std::vector<Tensor> picked;
    for (std::size_t i = 0; i < target_ids.size(); ++i) {
        const int t = target_ids[i];
        if (t == Vocabulary::kPad) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= logits.dim(1)) {
            throw DataError("nll_loss: target id " + std::to_string(t) +
                            " outside vocab of " + std::to_string(logits.dim(1)));
        }
        picked.push_back(reshape(
            slice_cols(slice_rows(logp, i, i + 1), t, t + 1), {1}));
    }
    if (picked.empty()) return Tensor::scalar(0.0);
    return neg(sum(stack_scalars(picked)));
}

Tensor pairwise_rank_loss(const Tensor& raw_score_pos, const Tensor& raw_score_neg) {
    if (raw_score_pos.size() != 1 || raw_score_neg.size() != 1) {
        throw ShapeError("pairwise_rank_loss: scores must be scalars");
    }
    return softplus(neg(sub(raw_score_pos, raw_score_neg)));
}

Tensor kd_loss(const std::vector<double>& s_rel, const Tensor& pooled_attention) {
    if (s_rel.empty()) throw DataError("kd_loss: empty relevance vector");
    if (pooled_attention.rank() != 1 || pooled_attention.dim(0) != s_rel.size()) {
        throw ShapeError("kd_loss: " + std::to_string(s_rel.size()) +
                         " relevance entries vs attention " +
                         shape_str(pooled_attention.shape()));
    }
    double total = 0.0;
    double entropy_term = 0.0;  // sum s_rel ln s_rel, with 0 ln 0 = 0
    for (double v : s_rel) {
        if (v < 0.0) throw DataError("kd_loss: negative relevance probability");
        total += v;
        if (v > 0.0) entropy_term += v * std::log(v);
    }
    if (std::fabs(total - 1.0) > 1e-6) {
        throw DataError("kd_loss: relevance vector sums to " + std::to_string(total));
    }
    const Tensor log_s_att = log_softmax(pooled_attention);
    const Tensor weights = Tensor::from({s_rel.size()}, std::vector<double>(s_rel));
    return add_scalar(neg(sum(mul(weights, log_s_att))), entropy_term);
}

LossBreakdown total_loss(const Tensor& l_gen, const Tensor& l_rank, const Tensor& l_kd,
                         double alpha, bool include_kd) {
    if (alpha < 0.0 || alpha > 1.0) throw DataError("total_loss: alpha outside [0,1]");
    LossBreakdown out;
    out.alpha = alpha;
    out.l_gen = l_gen;
    out.l_rank = l_rank;
    out.l_kd = include_kd ? l_kd : Tensor::scalar(0.0);
    out.total = add(scale(l_gen, alpha),
                    scale(add(l_rank, out.l_kd), 1.0 - alpha));
    return out;
}

}  // namespace dkgen
