#include "convmr/evaluator.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <set>
#include <sstream>
#include <thread>

namespace convmr {

RankSummary RankSummary::from_ranks(std::span<const std::size_t> ranks) {
    RankSummary s;
    s.queries = ranks.size();
    if (ranks.empty()) return s;
    double total = 0.0;
    std::size_t hits = 0;
    for (std::size_t r : ranks) {
        total += static_cast<double>(r);
        if (r <= 10) ++hits;
    }
    s.mean_rank = total / static_cast<double>(ranks.size());
    s.hits_at_10 = 100.0 * static_cast<double>(hits) / static_cast<double>(ranks.size());
    return s;
}

namespace {

// Entity rows laid out contiguously (one column per entity).
struct RankContext {
    const ModelParams& params;
    Matrix entity_t;

    explicit RankContext(const ModelParams& p) : params(p), entity_t(p.entity.transpose()) {}

    const double* entity(EntityId e) const { return entity_t.col(e).data(); }
};

std::size_t rank_with(const RankContext& ctx, const Triple& t, Side side, const FilterIndex& filter) {
    const auto n = static_cast<EntityId>(ctx.params.num_entities());
    if (t.s < 0 || t.s >= n || t.o < 0 || t.o >= n)
        throw DataError("rank_triple: entity id outside the vocabulary");
    if (t.r < 0 || static_cast<std::size_t>(t.r) >= ctx.params.num_relations())
        throw DataError("rank_triple: relation id outside the vocabulary");

    const RelationId rel[] = {t.r};
    const Vector vr = encode_value(rel, ctx.params);
    const EntityId gold = side == Side::object ? t.o : t.s;
    const std::unordered_set<EntityId>* known = side == Side::object ? filter.objects(t.r, t.s) : filter.subjects(t.r, t.o);

    auto score_candidate = [&](EntityId c) {
        return side == Side::object ? conv_score(ctx.params, ctx.entity(t.s), ctx.entity(c), vr.data())
                                    : conv_score(ctx.params, ctx.entity(c), ctx.entity(t.o), vr.data());
    };
    const double gold_score = score_candidate(gold);

    std::size_t rank = 1;
    for (EntityId c = 0; c < n; ++c) {
        if (c == gold) continue;
        if (known != nullptr && known->contains(c)) continue;
        if (score_candidate(c) <= gold_score) ++rank;
    }
    return rank;
}

}  // namespace

std::size_t rank_triple(const Triple& triple, const ModelParams& params, const FilterIndex& filter, Side side) {
    const RankContext ctx(params);
    return rank_with(ctx, triple, side, filter);
}

std::vector<std::pair<std::size_t, std::size_t>> rank_all(std::span<const Triple> triples, const ModelParams& params,
                                                          const FilterIndex& filter, int threads) {
    const RankContext ctx(params);
    std::vector<std::pair<std::size_t, std::size_t>> ranks(triples.size());
    auto one = [&](std::size_t i) {
        ranks[i] = {rank_with(ctx, triples[i], Side::subject, filter), rank_with(ctx, triples[i], Side::object, filter)};
    };
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), triples.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < triples.size(); ++i) one(i);
        return ranks;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(workers);
    {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (std::size_t i = next++; i < triples.size(); i = next++) one(i);
                } catch (...) {
                    errors[w] = std::current_exception();
                }
            });
        }
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);
    return ranks;
}

EvalResult evaluate(std::span<const Triple> triples, const ModelParams& params, const FilterIndex& filter,
                    int threads) {
    const auto ranks = rank_all(triples, params, filter, threads);
    std::vector<std::size_t> subj, obj, both;
    subj.reserve(ranks.size());
    obj.reserve(ranks.size());
    both.reserve(2 * ranks.size());
    for (const auto& [rs, ro] : ranks) {
        subj.push_back(rs);
        obj.push_back(ro);
        both.push_back(rs);
        both.push_back(ro);
    }
    return {RankSummary::from_ranks(both), RankSummary::from_ranks(subj), RankSummary::from_ranks(obj)};
}

std::string_view to_string(RelationCategory c) {
    switch (c) {
    case RelationCategory::one_to_one: return "1-1";
    case RelationCategory::one_to_many: return "1-M";
    case RelationCategory::many_to_one: return "M-1";
    case RelationCategory::many_to_many: return "M-M";
    }
    return "?";
}

RelationCategory classify(double n_s, double n_o) {
    const bool many_subjects = n_s > category_threshold;
    const bool many_objects = n_o > category_threshold;
    if (!many_subjects && !many_objects) return RelationCategory::one_to_one;
    if (!many_subjects) return RelationCategory::one_to_many;
    if (!many_objects) return RelationCategory::many_to_one;
    return RelationCategory::many_to_many;
}

std::map<RelationId, RelationCardinality> categorize_relations(std::span<const Triple> triples) {
    struct Counts {
        std::size_t triples = 0;
        std::set<EntityId> subjects;
        std::set<EntityId> objects;
    };
    std::map<RelationId, Counts> counts;
    for (const auto& t : triples) {
        auto& c = counts[t.r];
        ++c.triples;
        c.subjects.insert(t.s);
        c.objects.insert(t.o);
    }
    std::map<RelationId, RelationCardinality> out;
    for (const auto& [r, c] : counts) {
        RelationCardinality card;
        card.n_s = static_cast<double>(c.triples) / static_cast<double>(c.objects.size());
        card.n_o = static_cast<double>(c.triples) / static_cast<double>(c.subjects.size());
        card.category = classify(card.n_s, card.n_o);
        out.emplace(r, card);
    }
    return out;
}

namespace {

RelationCategory category_of(RelationId r, const std::map<RelationId, RelationCardinality>& categories,
                             const std::map<RelationId, RelationCardinality>& fallback) {
    if (auto it = categories.find(r); it != categories.end()) return it->second.category;
    if (auto it = fallback.find(r); it != fallback.end()) return it->second.category;
    throw DataError("no category for relation id " + std::to_string(r));
}

}  // namespace

std::map<RelationCategory, EvalResult> evaluate_by_category(std::span<const Triple> triples, const ModelParams& params,
                                                            const FilterIndex& filter,
                                                            const std::map<RelationId, RelationCardinality>& categories,
                                                            std::span<const Triple> fallback, int threads) {
    const auto fallback_categories = categorize_relations(fallback);
    std::map<RelationCategory, std::vector<Triple>> parts;
    for (const auto& t : triples) parts[category_of(t.r, categories, fallback_categories)].push_back(t);
    std::map<RelationCategory, EvalResult> out;
    for (const auto& [c, part] : parts) out.emplace(c, evaluate(part, params, filter, threads));
    return out;
}

std::map<RelationCategory, double> category_shares(std::span<const Triple> triples,
                                                   const std::map<RelationId, RelationCardinality>& categories) {
    std::map<RelationCategory, double> out;
    if (triples.empty()) return out;
    for (const auto& t : triples) {
        auto it = categories.find(t.r);
        if (it == categories.end()) throw DataError("no category for relation id " + std::to_string(t.r));
        out[it->second.category] += 1.0;
    }
    for (auto& [c, v] : out) v = 100.0 * v / static_cast<double>(triples.size());
    return out;
}

std::vector<AttentionWeight> inspect_attention(std::span<const std::string> relations, const ModelParams& params,
                                               const Vocabulary& vocab) {
    if (params.encoder != EncoderKind::attn_average)
        throw std::invalid_argument("attention weights need an attn_average model, this one is " +
                                    std::string(to_string(params.encoder)));
    std::vector<RelationId> ids;
    for (const auto& label : relations) ids.push_back(vocab.relation_id(label));
    const Vector w = attention_weights(ids, params);
    std::vector<AttentionWeight> out;
    for (std::size_t i = 0; i < ids.size(); ++i) out.push_back({relations[i], w(static_cast<Eigen::Index>(i))});
    std::stable_sort(out.begin(), out.end(), [](const AttentionWeight& a, const AttentionWeight& b) {
        return a.weight != b.weight ? a.weight > b.weight : a.relation < b.relation;
    });
    return out;
}

std::string results_csv_header() { return "split,category,side,queries,mean_rank,hits_at_10"; }

std::string to_csv_row(const std::string& split, const std::string& category, const std::string& side,
                       const RankSummary& s) {
    std::ostringstream os;
    os.precision(10);
    os << split << ',' << category << ',' << side << ',' << s.queries << ',' << s.mean_rank << ',' << s.hits_at_10;
    return os.str();
}

}  // namespace convmr
