#pragma once
// Triple files, vocabularies and the filtered-ranking index.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace convmr {

using EntityId = std::int32_t;
using RelationId = std::int32_t;

// Raised for malformed input files and unknown labels. `line` is 1-based,
// 0 when the failure is not tied to a line.
class DataError : public std::runtime_error {
public:
    DataError(const std::string& what, std::size_t line = 0)
        : std::runtime_error(what), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct RawTriple {
    std::string subject;
    std::string relation;
    std::string object;
    std::size_t line = 0;  // source line, 0 for synthetic triples

    friend bool operator==(const RawTriple& a, const RawTriple& b) {
        return a.subject == b.subject && a.relation == b.relation && a.object == b.object;
    }
};

struct Triple {
    EntityId s = 0;
    RelationId r = 0;
    EntityId o = 0;

    friend bool operator==(const Triple&, const Triple&) = default;
    friend auto operator<=>(const Triple&, const Triple&) = default;
};

class Vocabulary {
public:
    // Returns the existing id or assigns the next dense one.
    EntityId add_entity(const std::string& label);
    RelationId add_relation(const std::string& label);

    EntityId entity_id(const std::string& label) const;      // throws DataError
    RelationId relation_id(const std::string& label) const;  // throws DataError
    bool has_entity(const std::string& label) const { return entity_to_id_.contains(label); }
    bool has_relation(const std::string& label) const { return relation_to_id_.contains(label); }

    const std::string& entity(EntityId id) const { return id_to_entity_.at(static_cast<std::size_t>(id)); }
    const std::string& relation(RelationId id) const { return id_to_relation_.at(static_cast<std::size_t>(id)); }

    std::size_t num_entities() const { return id_to_entity_.size(); }
    std::size_t num_relations() const { return id_to_relation_.size(); }

    // FNV-1a over all labels in id order; identifies the id assignment in checkpoints.
    std::uint64_t hash() const;

private:
    std::unordered_map<std::string, EntityId> entity_to_id_;
    std::vector<std::string> id_to_entity_;
    std::unordered_map<std::string, RelationId> relation_to_id_;
    std::vector<std::string> id_to_relation_;
};

struct Dataset {
    std::string name;
    Vocabulary vocab;
    std::vector<Triple> train;
    std::vector<Triple> valid;
    std::vector<Triple> test;
};

struct DatasetStats {
    std::string name;
    std::size_t entities = 0;
    std::size_t relations = 0;
    std::size_t train = 0;
    std::size_t valid = 0;
    std::size_t test = 0;

    friend bool operator==(const DatasetStats&, const DatasetStats&) = default;
};

// Known triples of all splits, keyed by (relation, fixed entity).
class FilterIndex {
public:
    void insert(const Triple& t);

    bool contains(const Triple& t) const;
    // Objects o with (s, r, o) known; nullptr when none.
    const std::unordered_set<EntityId>* objects(RelationId r, EntityId s) const;
    // Subjects s with (s, r, o) known; nullptr when none.
    const std::unordered_set<EntityId>* subjects(RelationId r, EntityId o) const;

    std::size_t num_rs_keys() const { return objects_.size(); }
    std::size_t num_ro_keys() const { return subjects_.size(); }
    std::size_t num_triples() const { return count_; }

private:
    static std::uint64_t key(std::int32_t a, std::int32_t b) {
        return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
               static_cast<std::uint32_t>(b);
    }

    std::unordered_map<std::uint64_t, std::unordered_set<EntityId>> objects_;
    std::unordered_map<std::uint64_t, std::unordered_set<EntityId>> subjects_;
    std::size_t count_ = 0;
};

// Reads "subject<TAB>relation<TAB>object" lines; blank lines are skipped,
// CRLF endings and surrounding spaces are tolerated.
std::vector<RawTriple> load_triples(const std::filesystem::path& path);
std::vector<RawTriple> parse_triples(const std::string& text, const std::string& source = "<memory>");

// Ids in order of first appearance, splits scanned in the given order and
// each triple as subject, relation, object.
Vocabulary build_vocabulary(std::span<const std::vector<RawTriple>> splits);

std::vector<Triple> encode(const Vocabulary& vocab, std::span<const RawTriple> raw);
std::vector<RawTriple> decode(const Vocabulary& vocab, std::span<const Triple> triples);

// Loads train.txt, valid.txt and test.txt from `dir`; the vocabulary covers all splits.
Dataset load_dataset(const std::filesystem::path& dir);
Dataset make_dataset(std::string name, const std::vector<RawTriple>& train,
                     const std::vector<RawTriple>& valid, const std::vector<RawTriple>& test);

FilterIndex build_filter_index(const Dataset& dataset);

DatasetStats dataset_stats(const Dataset& dataset);
std::string stats_csv_header();
std::string to_csv_row(const DatasetStats& stats);

}  // namespace convmr
