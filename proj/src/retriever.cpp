#include "dkgen/retriever.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <unordered_set>

#include <json.hpp>

#include "dkgen/binio.hpp"
#include "dkgen/tokenizer.hpp"

namespace dkgen {

namespace {

constexpr char kMagic[4] = {'D', 'K', 'I', 'X'};
constexpr std::uint32_t kFormatVersion = 1;

using binio::read_le;
using binio::read_string;
using binio::write_le;
using binio::write_string;

}  // namespace

InvertedIndex InvertedIndex::build(std::vector<Passage> corpus) {
    if (corpus.empty()) throw DataError("build_index: empty corpus");
    std::unordered_set<std::string> seen;
    for (const auto& p : corpus) {
        if (!seen.insert(p.id).second) {
            throw DataError("build_index: duplicate passage id '" + p.id + "'");
        }
        if (p.text.empty()) {
            throw DataError("build_index: passage '" + p.id + "' has empty text");
        }
    }
    InvertedIndex idx;
    idx.passages_ = std::move(corpus);
    double total = 0.0;
    for (std::size_t d = 0; d < idx.passages_.size(); ++d) {
        auto terms = normalize_words(idx.passages_[d].text);
        idx.lengths_.push_back(static_cast<std::uint32_t>(terms.size()));
        total += static_cast<double>(terms.size());
        std::map<std::string, std::uint32_t> tf;
        for (const auto& t : terms) ++tf[t];
        for (const auto& [term, n] : tf) {
            idx.postings_[term].push_back({static_cast<std::uint32_t>(d), n});
        }
    }
    idx.avg_len_ = total / static_cast<double>(idx.passages_.size());
    return idx;
}

const std::vector<InvertedIndex::Posting>* InvertedIndex::postings(
    const std::string& term) const {
    auto it = postings_.find(term);
    return it == postings_.end() ? nullptr : &it->second;
}

double InvertedIndex::term_doc_score(const std::vector<Posting>& plist,
                                     std::size_t ordinal) const {
    const double n = static_cast<double>(num_passages());
    const double df = static_cast<double>(plist.size());
    const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
    auto it = std::lower_bound(plist.begin(), plist.end(), ordinal,
                               [](const Posting& p, std::size_t d) { return p.doc < d; });
    if (it == plist.end() || it->doc != ordinal) return 0.0;
    const double tf = static_cast<double>(it->tf);
    const double norm = 1.0 - kB + kB * static_cast<double>(lengths_[ordinal]) / avg_len_;
    return idf * tf * (kK1 + 1.0) / (tf + kK1 * norm);
}

double InvertedIndex::bm25_score(const std::string& query, std::size_t ordinal) const {
    std::set<std::string> terms;
    for (const auto& t : normalize_words(query)) terms.insert(t);
    double score = 0.0;
    for (const auto& t : terms) {
        if (const auto* plist = postings(t)) score += term_doc_score(*plist, ordinal);
    }
    return score;
}

std::vector<SearchHit> InvertedIndex::search(const std::string& query,
                                             std::size_t k) const {
    if (k == 0) throw DataError("bm25_search: k must be >= 1");
    std::set<std::string> terms;
    for (const auto& t : normalize_words(query)) terms.insert(t);
    if (terms.empty()) return {};
    std::vector<double> scores(num_passages(), 0.0);
    for (const auto& t : terms) {
        const auto* plist = postings(t);
        if (!plist) continue;
        const double n = static_cast<double>(num_passages());
        const double df = static_cast<double>(plist->size());
        const double idf = std::log((n - df + 0.5) / (df + 0.5) + 1.0);
        for (const auto& post : *plist) {
            const double tf = static_cast<double>(post.tf);
            const double norm =
                1.0 - kB + kB * static_cast<double>(lengths_[post.doc]) / avg_len_;
            scores[post.doc] += idf * tf * (kK1 + 1.0) / (tf + kK1 * norm);
        }
    }
    std::vector<std::size_t> order(num_passages());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return passages_[a].id < passages_[b].id;
    });
    if (order.size() > k) order.resize(k);
    std::vector<SearchHit> hits;
    hits.reserve(order.size());
    for (std::size_t d : order) hits.push_back({d, scores[d]});
    return hits;
}

void InvertedIndex::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("index: cannot write " + path);
    out.write(kMagic, 4);
    write_le<std::uint32_t>(out, kFormatVersion);
    // passages
    write_le<std::uint64_t>(out, passages_.size());
    for (const auto& p : passages_) {
        write_string(out, p.id);
        write_string(out, p.text);
        write_le<std::uint8_t>(out, p.source_title ? 1 : 0);
        if (p.source_title) write_string(out, *p.source_title);
    }
    // vocabulary + postings
    write_le<std::uint64_t>(out, postings_.size());
    for (const auto& [term, plist] : postings_) {
        write_string(out, term);
        write_le<std::uint64_t>(out, plist.size());
        for (const auto& p : plist) {
            write_le<std::uint32_t>(out, p.doc);
            write_le<std::uint32_t>(out, p.tf);
        }
    }
    // lengths
    write_le<std::uint64_t>(out, lengths_.size());
    for (auto l : lengths_) write_le<std::uint32_t>(out, l);
}

InvertedIndex InvertedIndex::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("index: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) {
        throw IoError("index: bad magic in " + path);
    }
    const auto version = read_le<std::uint32_t>(in);
    if (version != kFormatVersion) {
        throw IoError("index: unsupported format version " + std::to_string(version));
    }
    InvertedIndex idx;
    const auto np = read_le<std::uint64_t>(in);
    idx.passages_.reserve(np);
    for (std::uint64_t i = 0; i < np; ++i) {
        Passage p;
        p.id = read_string(in);
        p.text = read_string(in);
        if (read_le<std::uint8_t>(in)) p.source_title = read_string(in);
        idx.passages_.push_back(std::move(p));
    }
    const auto nt = read_le<std::uint64_t>(in);
    for (std::uint64_t i = 0; i < nt; ++i) {
        std::string term = read_string(in);
        const auto nl = read_le<std::uint64_t>(in);
        std::vector<Posting> plist(nl);
        for (auto& post : plist) {
            post.doc = read_le<std::uint32_t>(in);
            post.tf = read_le<std::uint32_t>(in);
        }
        idx.postings_.emplace(std::move(term), std::move(plist));
    }
    const auto ndoc = read_le<std::uint64_t>(in);
    idx.lengths_.resize(ndoc);
    double total = 0.0;
    for (auto& l : idx.lengths_) {
        l = read_le<std::uint32_t>(in);
        total += l;
    }
    if (ndoc != np) throw IoError("index: length section disagrees with passages");
    idx.avg_len_ = total / static_cast<double>(ndoc);
    return idx;
}

std::vector<Passage> load_corpus(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("corpus: cannot open " + path);
    std::vector<Passage> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError("corpus: line " + std::to_string(lineno) + ": " + e.what());
        }
        Passage p;
        if (!j.contains("id") || !j["id"].is_string()) {
            throw DataError("corpus: line " + std::to_string(lineno) +
                            ": missing required field 'id'");
        }
        if (!j.contains("text") || !j["text"].is_string()) {
            throw DataError("corpus: line " + std::to_string(lineno) +
                            ": missing required field 'text'");
        }
        p.id = j["id"].get<std::string>();
        p.text = j["text"].get<std::string>();
        if (j.contains("source_title")) {
            p.source_title = j["source_title"].get<std::string>();
        }
        out.push_back(std::move(p));
    }
    return out;
}

void write_corpus(const std::vector<Passage>& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("corpus: cannot write " + path);
    for (const auto& p : corpus) {
        nlohmann::json j{{"id", p.id}, {"text", p.text}};
        if (p.source_title) j["source_title"] = *p.source_title;
        out << j.dump() << "\n";
    }
}

}  // namespace dkgen
