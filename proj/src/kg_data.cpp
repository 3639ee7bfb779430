#include "convmr/kg_data.hpp"

#include <fstream>
#include <sstream>
#include <string_view>

namespace convmr {

namespace {

std::string_view trim(std::string_view s) {
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
    while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
    while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
    return s;
}

constexpr std::uint64_t fnv_offset = 1469598103934665603ULL;
constexpr std::uint64_t fnv_prime = 1099511628211ULL;

void fnv_mix(std::uint64_t& h, std::string_view bytes) {
    for (unsigned char c : bytes) {
        h ^= c;
        h *= fnv_prime;
    }
}

}  // namespace

EntityId Vocabulary::add_entity(const std::string& label) {
    auto [it, inserted] = entity_to_id_.try_emplace(label, static_cast<EntityId>(id_to_entity_.size()));
    if (inserted) id_to_entity_.push_back(label);
    return it->second;
}

RelationId Vocabulary::add_relation(const std::string& label) {
    auto [it, inserted] = relation_to_id_.try_emplace(label, static_cast<RelationId>(id_to_relation_.size()));
    if (inserted) id_to_relation_.push_back(label);
    return it->second;
}

EntityId Vocabulary::entity_id(const std::string& label) const {
    auto it = entity_to_id_.find(label);
    if (it == entity_to_id_.end()) throw DataError("unknown entity \"" + label + "\"");
    return it->second;
}

RelationId Vocabulary::relation_id(const std::string& label) const {
    auto it = relation_to_id_.find(label);
    if (it == relation_to_id_.end()) throw DataError("unknown relation \"" + label + "\"");
    return it->second;
}

std::uint64_t Vocabulary::hash() const {
    std::uint64_t h = fnv_offset;
    for (const auto& e : id_to_entity_) {
        fnv_mix(h, e);
        fnv_mix(h, std::string_view("\0", 1));
    }
    fnv_mix(h, std::string_view("\x1e", 1));
    for (const auto& r : id_to_relation_) {
        fnv_mix(h, r);
        fnv_mix(h, std::string_view("\0", 1));
    }
    return h;
}

void FilterIndex::insert(const Triple& t) {
    const bool fresh = objects_[key(t.r, t.s)].insert(t.o).second;
    subjects_[key(t.r, t.o)].insert(t.s);
    if (fresh) ++count_;
}

bool FilterIndex::contains(const Triple& t) const {
    const auto* objs = objects(t.r, t.s);
    return objs != nullptr && objs->contains(t.o);
}

const std::unordered_set<EntityId>* FilterIndex::objects(RelationId r, EntityId s) const {
    auto it = objects_.find(key(r, s));
    return it == objects_.end() ? nullptr : &it->second;
}

const std::unordered_set<EntityId>* FilterIndex::subjects(RelationId r, EntityId o) const {
    auto it = subjects_.find(key(r, o));
    return it == subjects_.end() ? nullptr : &it->second;
}

std::vector<RawTriple> parse_triples(const std::string& text, const std::string& source) {
    std::vector<RawTriple> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        std::string_view view = trim(line);
        if (view.empty()) continue;

        std::string_view fields[3];
        std::size_t count = 0;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = view.find('\t', start);
            const std::string_view field =
                view.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start);
            if (count < 3) fields[count] = field;
            ++count;
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        if (count != 3) {
            throw DataError(source + ":" + std::to_string(line_no) + ": expected 3 tab-separated fields, found " +
                                std::to_string(count),
                            line_no);
        }
        RawTriple t{std::string(trim(fields[0])), std::string(trim(fields[1])), std::string(trim(fields[2])),
                    line_no};
        if (t.subject.empty() || t.relation.empty() || t.object.empty()) {
            throw DataError(source + ":" + std::to_string(line_no) + ": empty field", line_no);
        }
        out.push_back(std::move(t));
    }
    return out;
}

std::vector<RawTriple> load_triples(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    if (in.bad()) throw DataError("read failure on " + path.string());
    return parse_triples(buf.str(), path.string());
}

Vocabulary build_vocabulary(std::span<const std::vector<RawTriple>> splits) {
    Vocabulary vocab;
    bool any = false;
    for (const auto& split : splits) {
        for (const auto& t : split) {
            vocab.add_entity(t.subject);
            vocab.add_relation(t.relation);
            vocab.add_entity(t.object);
            any = true;
        }
    }
    if (!any) throw DataError("cannot build a vocabulary from zero triples");
    return vocab;
}

std::vector<Triple> encode(const Vocabulary& vocab, std::span<const RawTriple> raw) {
    std::vector<Triple> out;
    out.reserve(raw.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const RawTriple& t = raw[i];
        const std::size_t line = t.line != 0 ? t.line : i + 1;
        try {
            out.push_back({vocab.entity_id(t.subject), vocab.relation_id(t.relation), vocab.entity_id(t.object)});
        } catch (const DataError& e) {
            throw DataError(std::string(e.what()) + " at line " + std::to_string(line), line);
        }
    }
    return out;
}

std::vector<RawTriple> decode(const Vocabulary& vocab, std::span<const Triple> triples) {
    std::vector<RawTriple> out;
    out.reserve(triples.size());
    for (const auto& t : triples) out.push_back({vocab.entity(t.s), vocab.relation(t.r), vocab.entity(t.o)});
    return out;
}

Dataset make_dataset(std::string name, const std::vector<RawTriple>& train, const std::vector<RawTriple>& valid,
                     const std::vector<RawTriple>& test) {
    Dataset ds;
    ds.name = std::move(name);
    const std::vector<RawTriple> splits[] = {train, valid, test};
    ds.vocab = build_vocabulary(splits);
    ds.train = encode(ds.vocab, train);
    ds.valid = encode(ds.vocab, valid);
    ds.test = encode(ds.vocab, test);
    return ds;
}

Dataset load_dataset(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
    auto name = dir.filename().string();
    if (name.empty()) name = dir.parent_path().filename().string();
    return make_dataset(name, load_triples(dir / "train.txt"), load_triples(dir / "valid.txt"),
                        load_triples(dir / "test.txt"));
}

FilterIndex build_filter_index(const Dataset& dataset) {
    FilterIndex index;
    for (const auto* split : {&dataset.train, &dataset.valid, &dataset.test})
        for (const auto& t : *split) index.insert(t);
    return index;
}

DatasetStats dataset_stats(const Dataset& dataset) {
    return {dataset.name,        dataset.vocab.num_entities(), dataset.vocab.num_relations(),
            dataset.train.size(), dataset.valid.size(),        dataset.test.size()};
}

std::string stats_csv_header() { return "dataset,entities,relations,train,valid,test"; }

std::string to_csv_row(const DatasetStats& s) {
    std::ostringstream os;
    os << s.name << ',' << s.entities << ',' << s.relations << ',' << s.train << ',' << s.valid << ',' << s.test;
    return os.str();
}

}  // namespace convmr
