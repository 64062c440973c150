#pragma once

#include <string>
#include <vector>

#include "dkgen/numerics.hpp"
#include "dkgen/retriever.hpp"

namespace dkgen {

// One reference passage plus the indices of the target sentences it supports.
struct Reference {
    Passage passage;
    std::vector<std::size_t> supports;
};

struct DocumentSample {
    std::string query;
    std::string target_text;
    std::vector<Reference> references;

    // Throws DataError on dangling support indices or an empty reference set.
    void validate() const;
};

// Sentence-level tuple (query, positive, negative, preceding text, sentence).
struct TrainingSample {
    std::string query;
    Passage positive;
    Passage negative;
    std::string context;  // sentences 1..i-1 joined by single spaces
    std::string sentence;
    std::size_t sentence_index = 0;
};

struct SampleBuildStats {
    std::size_t skipped_sentences = 0;  // no supporting or no negative candidate
};

// One sample per supported target sentence. The positive is the supporting
// reference (first by id when several); the negative is drawn uniformly from
// `negative_pool` when given, otherwise from the document's own non-supporting
// references.
std::vector<TrainingSample> build_training_samples(
    const DocumentSample& doc, Rng& rng, SampleBuildStats* stats = nullptr,
    const std::vector<Passage>* negative_pool = nullptr);

std::vector<DocumentSample> load_dataset(const std::string& path);
void write_dataset(const std::vector<DocumentSample>& docs, const std::string& path);

struct SyntheticData {
    std::vector<Passage> corpus;       // all references across documents
    std::vector<DocumentSample> docs;
};

// Templated entity-attribute documents: 3-6 facts per entity, each sentence
// paraphrasing exactly one reference passage, plus 2-10 distractor passages
// about entities from a disjoint name pool. Seed-deterministic.
SyntheticData generate_synthetic(std::size_t n_docs, Rng& rng);

}  // namespace dkgen
