#pragma once
// Filtered link prediction (mean rank, Hits@10), relation-category
// breakdown and attention inspection.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "convmr/kg_data.hpp"
#include "convmr/model.hpp"

namespace convmr {

enum class Side { subject, object };

struct RankSummary {
    std::size_t queries = 0;
    double mean_rank = 0.0;
    double hits_at_10 = 0.0;  // percent

    static RankSummary from_ranks(std::span<const std::size_t> ranks);
};

struct EvalResult {
    RankSummary overall;  // both sides pooled
    RankSummary subject_side;
    RankSummary object_side;
};

// Filtered rank of the gold entity on `side`. Candidates forming a known
// triple (other than the gold one) are dropped; every surviving candidate
// scoring lower than or equal to the gold triple pushes the rank down.
std::size_t rank_triple(const Triple& triple, const ModelParams& params, const FilterIndex& filter, Side side);

// Ranks both sides of every triple; queries run on `threads` workers.
std::vector<std::pair<std::size_t, std::size_t>> rank_all(std::span<const Triple> triples, const ModelParams& params,
                                                          const FilterIndex& filter, int threads = 1);

EvalResult evaluate(std::span<const Triple> triples, const ModelParams& params, const FilterIndex& filter,
                    int threads = 1);

enum class RelationCategory { one_to_one, one_to_many, many_to_one, many_to_many };

std::string_view to_string(RelationCategory c);

struct RelationCardinality {
    double n_s = 0.0;  // triples per distinct object: average subjects per object
    double n_o = 0.0;  // triples per distinct subject: average objects per subject
    RelationCategory category = RelationCategory::one_to_one;
};

inline constexpr double category_threshold = 1.5;

RelationCategory classify(double n_s, double n_o);

std::map<RelationId, RelationCardinality> categorize_relations(std::span<const Triple> triples);

// Test triples partitioned by their relation's category; categories with no
// triples are absent. Relations missing from `categories` are classified from
// `fallback` (usually train plus valid).
std::map<RelationCategory, EvalResult> evaluate_by_category(std::span<const Triple> triples, const ModelParams& params,
                                                            const FilterIndex& filter,
                                                            const std::map<RelationId, RelationCardinality>& categories,
                                                            std::span<const Triple> fallback = {}, int threads = 1);

// Share of `triples` falling in each category, in percent.
std::map<RelationCategory, double> category_shares(std::span<const Triple> triples,
                                                   const std::map<RelationId, RelationCardinality>& categories);

struct AttentionWeight {
    std::string relation;
    double weight = 0.0;
};

// Weights the attention encoder assigns to the given relation set, heaviest first.
std::vector<AttentionWeight> inspect_attention(std::span<const std::string> relations, const ModelParams& params,
                                               const Vocabulary& vocab);

std::string results_csv_header();
std::string to_csv_row(const std::string& split, const std::string& category, const std::string& side,
                       const RankSummary& summary);

}  // namespace convmr
