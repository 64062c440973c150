#include "dkgen/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <regex>
#include <sstream>

#include "dkgen/tokenizer.hpp"

namespace dkgen {

namespace {

constexpr double kEps = 1e-9;
constexpr double kRougeBeta = 1.2;

using NGramCounts = std::map<std::vector<std::string>, std::size_t>;

NGramCounts count_ngrams(const std::vector<std::string>& tokens, std::size_t n) {
    NGramCounts counts;
    if (tokens.size() < n) return counts;
    for (std::size_t i = 0; i + n <= tokens.size(); ++i) {
        ++counts[std::vector<std::string>(tokens.begin() + i, tokens.begin() + i + n)];
    }
    return counts;
}

}  // namespace

std::string strip_reference_marks(const std::string& text) {
    static const std::regex mark(R"( ?\[[0-9]+\])");
    return std::regex_replace(text, mark, "");
}

std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1
                                          : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double bleu(const std::vector<std::string>& candidates,
            const std::vector<std::string>& references, std::size_t max_n) {
    if (candidates.empty()) throw DataError("bleu: empty candidate list");
    if (candidates.size() != references.size()) {
        throw DataError("bleu: " + std::to_string(candidates.size()) +
                        " candidates vs " + std::to_string(references.size()) +
                        " references");
    }
    if (max_n < 1 || max_n > 4) throw DataError("bleu: max_n must be in 1..4");
    std::vector<double> matched(max_n, 0.0), total(max_n, 0.0);
    double cand_len = 0.0, ref_len = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto cand = normalize_words(strip_reference_marks(candidates[i]));
        const auto ref = normalize_words(strip_reference_marks(references[i]));
        cand_len += static_cast<double>(cand.size());
        ref_len += static_cast<double>(ref.size());
        for (std::size_t n = 1; n <= max_n; ++n) {
            const auto cc = count_ngrams(cand, n);
            const auto rc = count_ngrams(ref, n);
            for (const auto& [gram, count] : cc) {
                total[n - 1] += static_cast<double>(count);
                auto it = rc.find(gram);
                if (it != rc.end()) {
                    matched[n - 1] += static_cast<double>(std::min(count, it->second));
                }
            }
        }
    }
    double log_prec = 0.0;
    for (std::size_t n = 0; n < max_n; ++n) {
        const double p = total[n] > 0.0 ? matched[n] / total[n] : 0.0;
        log_prec += std::log(std::max(p, kEps)) / static_cast<double>(max_n);
    }
    double bp = 1.0;
    if (cand_len == 0.0) return 0.0;
    if (cand_len < ref_len) bp = std::exp(1.0 - ref_len / cand_len);
    return bp * std::exp(log_prec);
}

double rouge_l(const std::string& candidate, const std::string& reference) {
    const auto cand = normalize_words(strip_reference_marks(candidate));
    const auto ref = normalize_words(strip_reference_marks(reference));
    if (cand.empty() || ref.empty()) return 0.0;
    const double lcs = static_cast<double>(lcs_length(cand, ref));
    if (lcs == 0.0) return 0.0;
    const double p = lcs / static_cast<double>(cand.size());
    const double r = lcs / static_cast<double>(ref.size());
    const double b2 = kRougeBeta * kRougeBeta;
    return (1.0 + b2) * p * r / (r + b2 * p);
}

MetricReport evaluate(const std::vector<std::string>& candidates,
                      const std::vector<std::string>& references) {
    MetricReport report;
    report.bleu1 = bleu(candidates, references, 1);
    report.bleu4 = bleu(candidates, references, 4);
    double sum = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        report.rouge_l_per_example.push_back(rouge_l(candidates[i], references[i]));
        sum += report.rouge_l_per_example.back();
    }
    report.rouge_l = candidates.empty() ? 0.0 : sum / candidates.size();
    return report;
}

std::string MetricReport::table_row() const {
    std::ostringstream out;
    out.setf(std::ios::fixed);
    out.precision(2);
    out << "BLEU-1 " << bleu1 * 100.0 << "  BLEU-4 " << bleu4 * 100.0 << "  ROUGE-L "
        << rouge_l * 100.0;
    return out.str();
}

}  // namespace dkgen
