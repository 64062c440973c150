#pragma once

#include <array>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dkgen/common.hpp"

namespace dkgen {

// Lowercases and splits text into word tokens; punctuation characters become
// single-character tokens. Whitespace is discarded.
std::vector<std::string> normalize_words(const std::string& text);

// Rule-based sentence splitter: breaks after '.', '!' or '?' followed by
// whitespace or end of input, with a small abbreviation guard list. Terminal
// punctuation stays with its sentence.
std::vector<std::string> split_sentences(const std::string& text);

// Word-level vocabulary. Specials occupy the lowest id range and are never
// produced by normal-text tokenization.
class Vocabulary {
  public:
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kUnk = 3;
    static constexpr int kQuery = 4;
    static constexpr int kRef = 5;
    static constexpr int kContext = 6;
    static constexpr std::size_t kNumSpecials = 7;
    static const std::array<const char*, kNumSpecials>& special_names();

    // Word tokens ranked by frequency (desc) then lexicographic order,
    // truncated to max_size including the specials.
    static Vocabulary build(std::span<const std::string> corpus_texts,
                            std::size_t max_size);

    // Plain text format: one token per line, line number == id, specials first.
    static Vocabulary load(const std::string& path);
    void save(const std::string& path) const;

    std::size_t size() const { return tokens_.size(); }
    int id(const std::string& token) const;  // kUnk when absent
    const std::string& token(int id) const;  // throws on out-of-range

    std::vector<int> encode(const std::string& text) const;
    std::string decode(std::span<const int> ids) const;

    // [query] q [ref] p [EOS]; truncation always preserves the single [ref]
    // marker and the trailing [EOS].
    std::vector<int> format_passage(const std::string& query,
                                    const std::string& passage,
                                    std::size_t max_len) const;
    // [context] T [EOS]; when over-long the most recent context tokens win.
    std::vector<int> format_context(const std::string& prev_text,
                                    std::size_t max_len) const;

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
    void index_tokens();
};

}  // namespace dkgen
