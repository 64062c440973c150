#include "dkgen/data.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include <json.hpp>

#include "dkgen/tokenizer.hpp"

namespace dkgen {

namespace {

std::string join_sentences(const std::vector<std::string>& sentences, std::size_t n) {
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!out.empty()) out += " ";
        out += sentences[i];
    }
    return out;
}

const std::vector<std::string>& attributes() {
    static const std::vector<std::string> a = {"anthem", "banner",  "craft",
                                               "dialect", "emblem", "festival"};
    return a;
}

const std::vector<std::vector<std::string>>& attribute_values() {
    // One disjoint 5-value set per attribute, aligned with attributes().
    static const std::vector<std::vector<std::string>> v = {
        {"silver", "amber", "crimson", "ivory", "cobalt"},
        {"striped", "checkered", "plain", "braided", "quartered"},
        {"pottery", "weaving", "glasswork", "carving", "smithing"},
        {"lowland", "upland", "coastal", "valley", "ridge"},
        {"falcon", "stag", "otter", "heron", "badger"},
        {"harvest", "lantern", "solstice", "river", "frost"},
    };
    return v;
}

std::string entity_name(std::size_t index, bool distractor) {
    static const std::vector<std::string> query_first = {
        "bren", "cal", "dor", "fen", "gar", "hol", "jor", "kel", "mar", "nor"};
    static const std::vector<std::string> distractor_first = {
        "pim", "quil", "rusk", "sorn", "tev", "ulm", "vox", "wren", "yar", "zeb"};
    static const std::vector<std::string> second = {
        "dale", "ford", "gate", "haven", "mere", "port", "stead", "ton", "vale", "wick"};
    const auto& first = distractor ? distractor_first : query_first;
    const std::size_t combos = first.size() * second.size();
    std::string name = first[(index / second.size()) % first.size()] +
                       second[index % second.size()];
    if (index >= combos) name += std::to_string(index / combos + 1);
    return name;
}

std::string fact_passage_text(const std::string& entity, const std::string& attr,
                              const std::string& value) {
    return "the " + attr + " of " + entity + " is " + value + " .";
}

std::string fact_sentence(const std::string& entity, const std::string& attr,
                          const std::string& value, const std::string* prev_attr) {
    if (!prev_attr) {
        return entity + " is renowned for its " + value + " " + attr + " .";
    }
    return "after the " + *prev_attr + " , the " + attr + " of " + entity + " is now " +
           value + " .";
}

}  // namespace

void DocumentSample::validate() const {
    if (query.empty()) throw DataError("document: empty query");
    if (references.empty()) {
        throw DataError("document '" + query + "': no references");
    }
    const std::size_t n = split_sentences(target_text).size();
    if (n == 0) throw DataError("document '" + query + "': empty target text");
    for (const auto& ref : references) {
        for (std::size_t s : ref.supports) {
            if (s >= n) {
                throw DataError("document '" + query + "': reference '" +
                                ref.passage.id + "' supports sentence " +
                                std::to_string(s) + " but target has only " +
                                std::to_string(n) + " sentences");
            }
        }
    }
}

std::vector<TrainingSample> build_training_samples(
    const DocumentSample& doc, Rng& rng, SampleBuildStats* stats,
    const std::vector<Passage>* negative_pool) {
    doc.validate();
    const auto sentences = split_sentences(doc.target_text);
    std::vector<TrainingSample> out;
    for (std::size_t i = 0; i < sentences.size(); ++i) {
        const Reference* positive = nullptr;
        for (const auto& ref : doc.references) {
            if (std::find(ref.supports.begin(), ref.supports.end(), i) ==
                ref.supports.end()) {
                continue;
            }
            if (!positive || ref.passage.id < positive->passage.id) positive = &ref;
        }
        if (!positive) {
            if (stats) ++stats->skipped_sentences;
            continue;
        }
        std::vector<const Passage*> negatives;
        if (negative_pool) {
            for (const auto& p : *negative_pool) {
                if (p.id != positive->passage.id) negatives.push_back(&p);
            }
        } else {
            for (const auto& ref : doc.references) {
                if (std::find(ref.supports.begin(), ref.supports.end(), i) ==
                    ref.supports.end()) {
                    negatives.push_back(&ref.passage);
                }
            }
        }
        if (negatives.empty()) {
            if (stats) ++stats->skipped_sentences;
            continue;
        }
        TrainingSample sample;
        sample.query = doc.query;
        sample.positive = positive->passage;
        sample.negative = *negatives[rng.uniform_index(negatives.size())];
        sample.context = join_sentences(sentences, i);
        sample.sentence = sentences[i];
        sample.sentence_index = i;
        out.push_back(std::move(sample));
    }
    return out;
}

std::vector<DocumentSample> load_dataset(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("dataset: cannot open " + path);
    std::vector<DocumentSample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = "dataset: line " + std::to_string(lineno) + ": ";
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(where + e.what());
        }
        for (const char* field : {"query", "target", "references"}) {
            if (!j.contains(field)) {
                throw DataError(where + "missing required field '" + field + "'");
            }
        }
        DocumentSample doc;
        if (!j["query"].is_string() || !j["target"].is_string() ||
            !j["references"].is_array()) {
            throw DataError(where + "wrong field type");
        }
        doc.query = j["query"].get<std::string>();
        doc.target_text = j["target"].get<std::string>();
        for (const auto& r : j["references"]) {
            if (!r.contains("id") || !r.contains("text") || !r.contains("supports")) {
                throw DataError(where + "reference missing id, text or supports");
            }
            Reference ref;
            ref.passage.id = r["id"].get<std::string>();
            ref.passage.text = r["text"].get<std::string>();
            if (r.contains("source_title")) {
                ref.passage.source_title = r["source_title"].get<std::string>();
            }
            ref.supports = r["supports"].get<std::vector<std::size_t>>();
            doc.references.push_back(std::move(ref));
        }
        try {
            doc.validate();
        } catch (const DataError& e) {
            throw DataError(where + e.what());
        }
        out.push_back(std::move(doc));
    }
    return out;
}

void write_dataset(const std::vector<DocumentSample>& docs, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw IoError("dataset: cannot write " + path);
    for (const auto& doc : docs) {
        nlohmann::json refs = nlohmann::json::array();
        for (const auto& ref : doc.references) {
            nlohmann::json r{{"id", ref.passage.id},
                             {"text", ref.passage.text},
                             {"supports", ref.supports}};
            if (ref.passage.source_title) r["source_title"] = *ref.passage.source_title;
            refs.push_back(std::move(r));
        }
        nlohmann::json j{
            {"query", doc.query}, {"target", doc.target_text}, {"references", refs}};
        out << j.dump() << "\n";
    }
}

SyntheticData generate_synthetic(std::size_t n_docs, Rng& rng) {
    if (n_docs == 0) throw DataError("synthetic: n_docs must be >= 1");
    SyntheticData out;
    std::set<std::string> used_ids;
    std::size_t distractor_serial = 0;
    for (std::size_t d = 0; d < n_docs; ++d) {
        const std::string entity = entity_name(d, false);
        DocumentSample doc;
        doc.query = entity;

        std::vector<std::size_t> attr_order(attributes().size());
        for (std::size_t i = 0; i < attr_order.size(); ++i) attr_order[i] = i;
        rng.shuffle(attr_order);
        const std::size_t n_facts = 3 + rng.uniform_index(4);
        attr_order.resize(n_facts);

        std::vector<std::size_t> value_of_attr(attributes().size(), 0);
        std::vector<std::string> sentences;
        const std::string* prev_attr = nullptr;
        for (std::size_t i = 0; i < n_facts; ++i) {
            const std::size_t a = attr_order[i];
            const std::size_t v = rng.uniform_index(attribute_values()[a].size());
            value_of_attr[a] = v;
            const std::string& attr = attributes()[a];
            const std::string& value = attribute_values()[a][v];
            sentences.push_back(fact_sentence(entity, attr, value, prev_attr));
            Reference ref;
            ref.passage.id = entity + "-" + attr;
            ref.passage.text = fact_passage_text(entity, attr, value);
            ref.supports = {i};
            doc.references.push_back(std::move(ref));
            prev_attr = &attributes()[a];
        }
        doc.target_text = join_sentences(sentences, sentences.size());

        const std::size_t n_distractors = 2 + rng.uniform_index(9);
        for (std::size_t i = 0; i < n_distractors; ++i) {
            const std::string other =
                entity_name(rng.uniform_index(100), true);
            const std::size_t a = rng.uniform_index(attributes().size());
            std::size_t v = rng.uniform_index(attribute_values()[a].size());
            // keep distractor facts distinct from this document's facts
            if (std::find(attr_order.begin(), attr_order.end(), a) != attr_order.end() &&
                v == value_of_attr[a]) {
                v = (v + 1) % attribute_values()[a].size();
            }
            Reference ref;
            ref.passage.id =
                other + "-" + attributes()[a] + "-x" + std::to_string(distractor_serial++);
            ref.passage.text =
                fact_passage_text(other, attributes()[a], attribute_values()[a][v]);
            doc.references.push_back(std::move(ref));
        }
        for (const auto& ref : doc.references) {
            if (used_ids.insert(ref.passage.id).second) {
                out.corpus.push_back(ref.passage);
            }
        }
        out.docs.push_back(std::move(doc));
    }
    return out;
}

}  // namespace dkgen
