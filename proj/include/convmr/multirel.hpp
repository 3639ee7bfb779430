#pragma once
// Multi-relation instances: every distinct relation linking one (s, o) pair
// folded into a single training example.

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "convmr/kg_data.hpp"

namespace convmr {

struct MultiRelationInstance {
    EntityId s = 0;
    std::vector<RelationId> relations;  // ascending, duplicate-free, non-empty
    EntityId o = 0;

    std::size_t size() const { return relations.size(); }
    friend bool operator==(const MultiRelationInstance&, const MultiRelationInstance&) = default;
};

MultiRelationInstance as_instance(const Triple& t);

// One instance per (s, o) pair with more than one distinct relation, in order
// of the pair's first appearance.
std::vector<MultiRelationInstance> generate(std::span<const Triple> triples);

// Originals (as singleton instances) followed by the multi-relation instances.
std::vector<MultiRelationInstance> merge_training_set(std::span<const Triple> triples,
                                                      std::span<const MultiRelationInstance> multi);

struct RelationSetCount {
    std::vector<RelationId> relations;
    std::size_t count = 0;
};

struct MultiRelStats {
    std::map<std::size_t, std::size_t> size_histogram;
    // Count descending, ties by lexicographic relation ids ascending.
    std::vector<RelationSetCount> ranking;
};

MultiRelStats multirel_stats(std::span<const MultiRelationInstance> multi);

// "s<TAB>r1,r2,...<TAB>o" with vocabulary labels.
std::string to_tsv_line(const Vocabulary& vocab, const MultiRelationInstance& inst);

}  // namespace convmr
