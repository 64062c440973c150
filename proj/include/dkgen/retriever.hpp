#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dkgen/common.hpp"

namespace dkgen {

struct Passage {
    std::string id;
    std::string text;
    std::optional<std::string> source_title;
};

struct SearchHit {
    std::size_t ordinal = 0;  // position in the indexed corpus
    double score = 0.0;
};

// Inverted index over tokenizer-normalized terms with Okapi BM25 scoring
// (k1 = 1.2, b = 0.75, idf = ln((N - df + 0.5)/(df + 0.5) + 1)).
class InvertedIndex {
  public:
    struct Posting {
        std::uint32_t doc = 0;
        std::uint32_t tf = 0;
    };

    static constexpr double kK1 = 1.2;
    static constexpr double kB = 0.75;

    static InvertedIndex build(std::vector<Passage> corpus);

    // Descending BM25 score, ties broken by ascending passage id. Zero-score
    // passages fill the tail so that k >= corpus size returns everything.
    // An empty (post-normalization) query yields an empty result.
    std::vector<SearchHit> search(const std::string& query, std::size_t k) const;

    double bm25_score(const std::string& query, std::size_t ordinal) const;

    const Passage& passage(std::size_t ordinal) const { return passages_.at(ordinal); }
    std::size_t num_passages() const { return passages_.size(); }
    double avg_length() const { return avg_len_; }
    std::uint32_t length(std::size_t ordinal) const { return lengths_.at(ordinal); }
    const std::vector<Posting>* postings(const std::string& term) const;

    // Versioned little-endian binary file: magic, version, passages,
    // vocabulary+postings, lengths.
    void save(const std::string& path) const;
    static InvertedIndex load(const std::string& path);

  private:
    std::map<std::string, std::vector<Posting>> postings_;
    std::vector<std::uint32_t> lengths_;
    std::vector<Passage> passages_;
    double avg_len_ = 0.0;

    double term_doc_score(const std::vector<Posting>& plist, std::size_t ordinal) const;
};

// Newline-delimited JSON corpus: {"id": ..., "text": ..., "source_title"?: ...}
std::vector<Passage> load_corpus(const std::string& path);
void write_corpus(const std::vector<Passage>& corpus, const std::string& path);

}  // namespace dkgen
