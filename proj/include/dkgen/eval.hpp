#pragma once

#include <string>
#include <vector>

#include "dkgen/common.hpp"

namespace dkgen {

struct MetricReport {
    double bleu1 = 0.0;    // corpus-level, in [0,1]
    double bleu4 = 0.0;
    double rouge_l = 0.0;  // mean of per-example F1
    std::vector<double> rouge_l_per_example;

    std::string table_row() const;  // "BLEU-1 xx.x  BLEU-4 xx.x  ROUGE-L xx.x"
};

// Removes generated reference marks like " [3]" from text before scoring.
std::string strip_reference_marks(const std::string& text);

// Token-level longest common subsequence length.
std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b);

// Corpus BLEU with uniform weights over 1..max_n, brevity penalty, and
// epsilon-smoothed precisions. Reference marks are stripped first.
double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::string>& references, std::size_t max_n);

// LCS F-measure with beta = 1.2.
double rouge_l(const std::string& candidate, const std::string& reference);

MetricReport evaluate(const std::vector<std::string>& candidates,
                      const std::vector<std::string>& references);

}  // namespace dkgen
