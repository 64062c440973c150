#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "dkgen/numerics.hpp"
#include "dkgen/retriever.hpp"
#include "dkgen/tokenizer.hpp"

using namespace dkgen;

namespace {

// Independent per-document BM25 scorer used as the ranking oracle.
double brute_bm25(const std::vector<Passage>& corpus, const std::string& query,
                  std::size_t doc) {
    std::vector<std::vector<std::string>> docs;
    double total_len = 0.0;
    for (const auto& p : corpus) {
        docs.push_back(normalize_words(p.text));
        total_len += static_cast<double>(docs.back().size());
    }
    const double avg = total_len / static_cast<double>(corpus.size());
    std::set<std::string> qterms;
    for (const auto& t : normalize_words(query)) qterms.insert(t);
    double score = 0.0;
    for (const auto& term : qterms) {
        std::size_t df = 0;
        for (const auto& d : docs) {
            if (std::count(d.begin(), d.end(), term) > 0) ++df;
        }
        const double idf = std::log(
            (static_cast<double>(corpus.size()) - df + 0.5) / (df + 0.5) + 1.0);
        const double tf =
            static_cast<double>(std::count(docs[doc].begin(), docs[doc].end(), term));
        if (tf == 0.0) continue;
        const double norm = 1.0 - 0.75 + 0.75 * docs[doc].size() / avg;
        score += idf * tf * (1.2 + 1.0) / (tf + 1.2 * norm);
    }
    return score;
}

std::vector<SearchHit> brute_rank(const std::vector<Passage>& corpus,
                                  const std::string& query, std::size_t k) {
    std::vector<SearchHit> hits;
    for (std::size_t d = 0; d < corpus.size(); ++d) {
        hits.push_back({d, brute_bm25(corpus, query, d)});
    }
    std::sort(hits.begin(), hits.end(), [&](const SearchHit& a, const SearchHit& b) {
        if (a.score != b.score) return a.score > b.score;
        return corpus[a.ordinal].id < corpus[b.ordinal].id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

std::vector<Passage> random_corpus(std::size_t n, Rng& rng) {
    const std::vector<std::string> words = {"red",   "blue", "fox",  "river", "stone",
                                            "tower", "wind", "moon", "iron",  "leaf"};
    std::vector<Passage> out;
    for (std::size_t i = 0; i < n; ++i) {
        std::string text;
        const std::size_t len = 3 + rng.uniform_index(12);
        for (std::size_t j = 0; j < len; ++j) {
            if (!text.empty()) text += " ";
            text += words[rng.uniform_index(words.size())];
        }
        out.push_back({"p" + std::to_string(1000 + i), text, std::nullopt});
    }
    return out;
}

}  // namespace

TEST_CASE("postings and average length by definition") {
    auto idx = InvertedIndex::build({{"p0", "a b a", std::nullopt}});
    const auto* pa = idx.postings("a");
    REQUIRE(pa != nullptr);
    REQUIRE(pa->size() == 1);
    CHECK((*pa)[0].doc == 0);
    CHECK((*pa)[0].tf == 2);
    const auto* pb = idx.postings("b");
    REQUIRE(pb != nullptr);
    CHECK((*pb)[0].tf == 1);

    auto idx2 = InvertedIndex::build(
        {{"p0", "a b", std::nullopt}, {"p1", "a b c d", std::nullopt}});
    CHECK(idx2.avg_length() == doctest::Approx(3.0));
}

TEST_CASE("duplicate passage id is rejected by name") {
    std::vector<Passage> corpus = {{"dup", "a", std::nullopt}, {"dup", "b", std::nullopt}};
    CHECK_THROWS_WITH_AS(InvertedIndex::build(corpus), doctest::Contains("dup"),
                         DataError);
}

TEST_CASE("rebuild produces byte-identical serialized index") {
    Rng rng(21);
    auto corpus = random_corpus(30, rng);
    namespace fs = std::filesystem;
    const std::string p1 = fs::temp_directory_path() / "dkgen_idx1.bin";
    const std::string p2 = fs::temp_directory_path() / "dkgen_idx2.bin";
    InvertedIndex::build(corpus).save(p1);
    InvertedIndex::build(corpus).save(p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string b1((std::istreambuf_iterator<char>(f1)), {});
    std::string b2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(b1 == b2);
    CHECK(!b1.empty());
    fs::remove(p1);
    fs::remove(p2);
}

TEST_CASE("absent query term contributes zero") {
    auto idx = InvertedIndex::build(
        {{"p0", "a b", std::nullopt}, {"p1", "c d", std::nullopt}});
    const double with = idx.bm25_score("a", 0);
    const double with_ghost = idx.bm25_score("a zzz", 0);
    CHECK(with == doctest::Approx(with_ghost));
    CHECK(idx.bm25_score("zzz", 0) == 0.0);
}

TEST_CASE("ranking matches the brute-force oracle on a toy corpus") {
    std::vector<Passage> corpus = {{"a", "red fox red", std::nullopt},
                                   {"b", "blue fox", std::nullopt},
                                   {"c", "red river stone stone", std::nullopt}};
    auto idx = InvertedIndex::build(corpus);
    auto got = idx.search("red fox", 3);
    auto want = brute_rank(corpus, "red fox", 3);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].ordinal == want[i].ordinal);
        CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-9));
    }
}

TEST_CASE("ranking matches the oracle on random corpora and queries") {
    Rng rng(33);
    auto corpus = random_corpus(40, rng);
    auto idx = InvertedIndex::build(corpus);
    const std::vector<std::string> queries = {"red fox", "stone river wind", "moon",
                                              "iron leaf blue", "tower tower"};
    for (const auto& q : queries) {
        auto got = idx.search(q, 40);
        auto want = brute_rank(corpus, q, 40);
        REQUIRE(got.size() == want.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            CHECK(got[i].ordinal == want[i].ordinal);
            CHECK(std::fabs(got[i].score - want[i].score) < 1e-9);
        }
    }
}

TEST_CASE("k larger than corpus returns all passages; empty query is empty") {
    auto idx = InvertedIndex::build(
        {{"p0", "a b", std::nullopt}, {"p1", "c d", std::nullopt}});
    CHECK(idx.search("a", 10).size() == 2);
    CHECK(idx.search("  ", 5).empty());
}

TEST_CASE("duplicating a query term occurrence never decreases the score") {
    Rng rng(55);
    for (int t = 0; t < 20; ++t) {
        auto corpus = random_corpus(10, rng);
        const std::string term = "fox";
        const double before = [&] {
            auto idx = InvertedIndex::build(corpus);
            return idx.bm25_score(term, 4);
        }();
        corpus[4].text += " " + term;
        const double after = [&] {
            auto idx = InvertedIndex::build(corpus);
            return idx.bm25_score(term, 4);
        }();
        CHECK(after >= before - 1e-12);
    }
}

TEST_CASE("index serialization round trip and corrupt magic") {
    Rng rng(77);
    auto corpus = random_corpus(12, rng);
    namespace fs = std::filesystem;
    const std::string path = fs::temp_directory_path() / "dkgen_idx_rt.bin";
    auto idx = InvertedIndex::build(corpus);
    idx.save(path);
    auto loaded = InvertedIndex::load(path);
    auto a = idx.search("fox river", 12);
    auto b = loaded.search("fox river", 12);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].ordinal == b[i].ordinal);
        CHECK(a[i].score == doctest::Approx(b[i].score));
    }
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXX", 4);
    }
    CHECK_THROWS_AS(InvertedIndex::load(path), IoError);
    fs::remove(path);
}

TEST_CASE("corpus ndjson round trip and error line numbers") {
    namespace fs = std::filesystem;
    const std::string path = fs::temp_directory_path() / "dkgen_corpus.ndjson";
    std::vector<Passage> corpus = {{"x", "hello", std::string("Title")},
                                   {"y", "world", std::nullopt}};
    write_corpus(corpus, path);
    auto loaded = load_corpus(path);
    REQUIRE(loaded.size() == 2);
    CHECK(loaded[0].id == "x");
    CHECK(loaded[0].source_title.value() == "Title");

    std::ofstream bad(path);
    bad << R"({"id":"ok","text":"fine"})" << "\n";
    bad << R"({"text":"missing id"})" << "\n";
    bad.close();
    CHECK_THROWS_WITH_AS(load_corpus(path), doctest::Contains("line 2"), DataError);
    fs::remove(path);
}
