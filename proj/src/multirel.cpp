#include "convmr/multirel.hpp"

#include <algorithm>
#include <unordered_map>

namespace convmr {

MultiRelationInstance as_instance(const Triple& t) { return {t.s, {t.r}, t.o}; }

std::vector<MultiRelationInstance> generate(std::span<const Triple> triples) {
    struct PairEntry {
        EntityId s;
        EntityId o;
        std::vector<RelationId> relations;
    };
    std::unordered_map<std::uint64_t, std::size_t> slot;
    std::vector<PairEntry> pairs;
    for (const auto& t : triples) {
        const std::uint64_t key = (static_cast<std::uint64_t>(static_cast<std::uint32_t>(t.s)) << 32) |
                                  static_cast<std::uint32_t>(t.o);
        auto [it, inserted] = slot.try_emplace(key, pairs.size());
        if (inserted) pairs.push_back({t.s, t.o, {}});
        auto& rels = pairs[it->second].relations;
        if (std::find(rels.begin(), rels.end(), t.r) == rels.end()) rels.push_back(t.r);
    }

    std::vector<MultiRelationInstance> out;
    for (auto& p : pairs) {
        if (p.relations.size() < 2) continue;
        std::sort(p.relations.begin(), p.relations.end());
        out.push_back({p.s, std::move(p.relations), p.o});
    }
    return out;
}

std::vector<MultiRelationInstance> merge_training_set(std::span<const Triple> triples,
                                                      std::span<const MultiRelationInstance> multi) {
    std::vector<MultiRelationInstance> out;
    out.reserve(triples.size() + multi.size());
    for (const auto& t : triples) out.push_back(as_instance(t));
    out.insert(out.end(), multi.begin(), multi.end());
    return out;
}

MultiRelStats multirel_stats(std::span<const MultiRelationInstance> multi) {
    MultiRelStats stats;
    std::map<std::vector<RelationId>, std::size_t> by_set;
    for (const auto& inst : multi) {
        ++stats.size_histogram[inst.size()];
        ++by_set[inst.relations];
    }
    stats.ranking.reserve(by_set.size());
    for (auto& [rels, count] : by_set) stats.ranking.push_back({rels, count});
    // by_set is already in lexicographic order, so a stable sort on count keeps the tie rule.
    std::stable_sort(stats.ranking.begin(), stats.ranking.end(),
                     [](const RelationSetCount& a, const RelationSetCount& b) { return a.count > b.count; });
    return stats;
}

std::string to_tsv_line(const Vocabulary& vocab, const MultiRelationInstance& inst) {
    std::string line = vocab.entity(inst.s);
    line += '\t';
    for (std::size_t i = 0; i < inst.relations.size(); ++i) {
        if (i > 0) line += ',';
        line += vocab.relation(inst.relations[i]);
    }
    line += '\t';
    line += vocab.entity(inst.o);
    return line;
}

}  // namespace convmr
