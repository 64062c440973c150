#include "dkgen/tokenizer.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>

namespace dkgen {

namespace {

bool is_word_char(unsigned char c) { return std::isalnum(c) != 0; }

const std::array<const char*, 5> kAbbreviations = {"e.g.", "i.e.", "etc.", "mr.",
                                                   "dr."};

// True when the text ending at `pos` (inclusive of the '.') terminates one of
// the guarded abbreviations.
bool ends_with_abbreviation(const std::string& text, std::size_t pos) {
    for (const char* abbr : kAbbreviations) {
        const std::size_t len = std::string(abbr).size();
        if (pos + 1 < len) continue;
        const std::size_t start = pos + 1 - len;
        if (start > 0 && !std::isspace(static_cast<unsigned char>(text[start - 1]))) {
            continue;
        }
        bool match = true;
        for (std::size_t i = 0; i < len; ++i) {
            if (std::tolower(static_cast<unsigned char>(text[start + i])) != abbr[i]) {
                match = false;
                break;
            }
        }
        if (match) return true;
    }
    return false;
}

std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

}  // namespace

std::vector<std::string> normalize_words(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
        if (is_word_char(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else {
            if (!cur.empty()) {
                out.push_back(cur);
                cur.clear();
            }
            if (!std::isspace(c)) out.push_back(std::string(1, static_cast<char>(c)));
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

std::vector<std::string> split_sentences(const std::string& text) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c != '.' && c != '!' && c != '?') continue;
        const bool boundary =
            i + 1 == text.size() ||
            std::isspace(static_cast<unsigned char>(text[i + 1]));
        if (!boundary) continue;
        if (c == '.' && ends_with_abbreviation(text, i)) continue;
        std::string sent = trim(text.substr(start, i - start + 1));
        if (!sent.empty()) out.push_back(sent);
        start = i + 1;
    }
    std::string tail = trim(text.substr(start));
    if (!tail.empty()) out.push_back(tail);
    return out;
}

const std::array<const char*, Vocabulary::kNumSpecials>& Vocabulary::special_names() {
    static const std::array<const char*, kNumSpecials> names = {
        "<pad>", "<bos>", "<eos>", "<unk>", "[query]", "[ref]", "[context]"};
    return names;
}

void Vocabulary::index_tokens() {
    ids_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        ids_[tokens_[i]] = static_cast<int>(i);
    }
}

Vocabulary Vocabulary::build(std::span<const std::string> corpus_texts,
                             std::size_t max_size) {
    if (max_size <= kNumSpecials) {
        throw DataError("build_vocab: max_size must exceed the " +
                        std::to_string(kNumSpecials) + " special tokens");
    }
    if (corpus_texts.empty()) throw DataError("build_vocab: empty corpus");
    std::map<std::string, std::size_t> freq;
    for (const auto& text : corpus_texts) {
        for (const auto& w : normalize_words(text)) ++freq[w];
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    Vocabulary v;
    for (const char* s : special_names()) v.tokens_.emplace_back(s);
    for (const auto& [word, n] : ranked) {
        if (v.tokens_.size() >= max_size) break;
        v.tokens_.push_back(word);
    }
    v.index_tokens();
    return v;
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("vocabulary: cannot open " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) v.tokens_.push_back(line);
    for (std::size_t i = 0; i < kNumSpecials; ++i) {
        if (i >= v.tokens_.size() || v.tokens_[i] != special_names()[i]) {
            throw DataError("vocabulary: " + path + " missing special token at line " +
                            std::to_string(i + 1));
        }
    }
    v.index_tokens();
    return v;
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw IoError("vocabulary: cannot write " + path);
    for (const auto& t : tokens_) out << t << "\n";
}

int Vocabulary::id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(const std::string& text) const {
    std::vector<int> out;
    for (const auto& w : normalize_words(text)) {
        auto it = ids_.find(w);
        // Words never map into the special range: specials contain brackets,
        // which normalization splits apart.
        out.push_back(it == ids_.end() ? kUnk : it->second);
    }
    return out;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        const std::string& t = token(id);
        if (!out.empty()) out.push_back(' ');
        out += t;
    }
    return out;
}

std::vector<int> Vocabulary::format_passage(const std::string& query,
                                            const std::string& passage,
                                            std::size_t max_len) const {
    if (max_len < 3) throw DataError("format_passage: max_len must be >= 3");
    std::vector<int> q = encode(query);
    std::vector<int> p = encode(passage);
    std::size_t budget = max_len - 3;  // [query], [ref], [EOS]
    if (q.size() > budget) q.resize(budget);
    budget -= q.size();
    if (p.size() > budget) p.resize(budget);
    std::vector<int> out;
    out.reserve(q.size() + p.size() + 3);
    out.push_back(kQuery);
    out.insert(out.end(), q.begin(), q.end());
    out.push_back(kRef);
    out.insert(out.end(), p.begin(), p.end());
    out.push_back(kEos);
    return out;
}

std::vector<int> Vocabulary::format_context(const std::string& prev_text,
                                            std::size_t max_len) const {
    if (max_len < 3) throw DataError("format_context: max_len must be >= 3");
    std::vector<int> t = encode(prev_text);
    const std::size_t budget = max_len - 2;  // [context], [EOS]
    if (t.size() > budget) {
        // keep the most recent tokens
        t.erase(t.begin(), t.end() - static_cast<std::ptrdiff_t>(budget));
    }
    std::vector<int> out;
    out.reserve(t.size() + 2);
    out.push_back(kContext);
    out.insert(out.end(), t.begin(), t.end());
    out.push_back(kEos);
    return out;
}

}  // namespace dkgen
