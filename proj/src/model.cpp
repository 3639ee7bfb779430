#include "convmr/model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace convmr {

std::string_view to_string(EncoderKind kind) {
    switch (kind) {
    case EncoderKind::attn_average: return "attn_average";
    case EncoderKind::average: return "average";
    case EncoderKind::gru: return "gru";
    case EncoderKind::bigru: return "bigru";
    }
    return "unknown";
}

EncoderKind parse_encoder_kind(std::string_view name) {
    if (name == "attn_average") return EncoderKind::attn_average;
    if (name == "average") return EncoderKind::average;
    if (name == "gru") return EncoderKind::gru;
    if (name == "bigru") return EncoderKind::bigru;
    throw std::invalid_argument("unknown encoder kind \"" + std::string(name) + "\"");
}

std::string_view to_string(InitStrategy s) { return s == InitStrategy::random ? "random" : "pretrained"; }

InitStrategy parse_init_strategy(std::string_view name) {
    if (name == "random") return InitStrategy::random;
    if (name == "pretrained") return InitStrategy::pretrained;
    throw std::invalid_argument("unknown init strategy \"" + std::string(name) + "\"");
}

GruParams GruParams::zeros(int k) {
    const Matrix sq = Matrix::Zero(k, k);
    const Matrix b = Matrix::Zero(k, 1);
    return {sq, sq, b, sq, sq, b, sq, sq, b};
}

namespace {

template <typename G, typename F>
void for_each_gru(G& g, const std::string& prefix, F&& f) {
    f(prefix + ".w_z", g.w_z);
    f(prefix + ".u_z", g.u_z);
    f(prefix + ".b_z", g.b_z);
    f(prefix + ".w_r", g.w_r);
    f(prefix + ".u_r", g.u_r);
    f(prefix + ".b_r", g.b_r);
    f(prefix + ".w_n", g.w_n);
    f(prefix + ".u_n", g.u_n);
    f(prefix + ".b_n", g.b_n);
}

template <typename P, typename M>
std::vector<std::pair<std::string, M*>> collect_dense(P& p) {
    std::vector<std::pair<std::string, M*>> out{{"attn_w", &p.attn_w}, {"filters", &p.filters}, {"score_w", &p.score_w}};
    auto push = [&](const std::string& name, M& m) { out.emplace_back(name, &m); };
    if (p.gru_forward) for_each_gru(*p.gru_forward, "gru_forward", push);
    if (p.gru_backward) for_each_gru(*p.gru_backward, "gru_backward", push);
    return out;
}

bool uses_gru(EncoderKind kind) { return kind == EncoderKind::gru || kind == EncoderKind::bigru; }

}  // namespace

std::vector<std::pair<std::string, Matrix*>> ModelParams::dense_blocks() {
    return collect_dense<ModelParams, Matrix>(*this);
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::dense_blocks() const {
    return collect_dense<const ModelParams, const Matrix>(*this);
}

std::vector<std::pair<std::string, const Matrix*>> ModelParams::named_tensors() const {
    std::vector<std::pair<std::string, const Matrix*>> out{{"entity", &entity}, {"relation", &relation}};
    for (auto& block : dense_blocks()) out.push_back(block);
    return out;
}

void ModelParams::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid model parameters: " + what); };
    if (k < 1 || tau < 1) fail("k and tau must be positive");
    if (entity.cols() != k || relation.cols() != k) fail("embedding width differs from k");
    if (attn_w.rows() != 1 || attn_w.cols() != k) fail("attn_w must be 1 x k");
    if (filters.rows() != tau || filters.cols() != 3) fail("filters must be tau x 3");
    if (score_w.rows() != static_cast<Eigen::Index>(tau) * k || score_w.cols() != 1) fail("score_w must be tau*k x 1");
    if (uses_gru(encoder) != gru_forward.has_value()) fail("forward GRU block presence does not match encoder");
    if ((encoder == EncoderKind::bigru) != gru_backward.has_value()) fail("backward GRU block presence does not match encoder");
    for (const auto& [name, m] : named_tensors()) {
        if (name.starts_with("gru")) {
            const bool is_bias = name.ends_with(".b_z") || name.ends_with(".b_r") || name.ends_with(".b_n");
            if (m->rows() != k || m->cols() != (is_bias ? 1 : k)) fail(name + " has the wrong shape");
        }
        if (!m->allFinite()) fail(name + " contains non-finite values");
    }
}

bool operator==(const ModelParams& a, const ModelParams& b) {
    if (a.k != b.k || a.tau != b.tau || a.encoder != b.encoder || a.attn_divide_by_n != b.attn_divide_by_n) return false;
    const auto ta = a.named_tensors();
    const auto tb = b.named_tensors();
    if (ta.size() != tb.size()) return false;
    for (std::size_t i = 0; i < ta.size(); ++i) {
        if (ta[i].first != tb[i].first) return false;
        const Matrix& x = *ta[i].second;
        const Matrix& y = *tb[i].second;
        if (x.rows() != y.rows() || x.cols() != y.cols() || x != y) return false;
    }
    return true;
}

double init_bound(int k) { return 6.0 / std::sqrt(static_cast<double>(k)); }

ModelParams init_params(const InitOptions& options) {
    if (options.k < 1 || options.tau < 1) throw std::invalid_argument("init_params: k and tau must be positive");
    const int k = options.k;
    ModelParams p;
    p.k = k;
    p.tau = options.tau;
    p.encoder = options.encoder;
    p.attn_divide_by_n = options.attn_divide_by_n;

    std::mt19937_64 rng(options.seed);
    std::uniform_real_distribution<double> unif(-init_bound(k), init_bound(k));
    auto fill = [&](Matrix& m, Eigen::Index rows, Eigen::Index cols) {
        m.resize(rows, cols);
        // Row-major draw order so the stream does not depend on storage order.
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = unif(rng);
    };

    fill(p.entity, static_cast<Eigen::Index>(options.num_entities), k);
    fill(p.relation, static_cast<Eigen::Index>(options.num_relations), k);
    fill(p.attn_w, 1, k);
    fill(p.filters, options.tau, 3);
    p.score_w = Matrix::Zero(static_cast<Eigen::Index>(options.tau) * k, 1);
    auto fill_gru = [&](GruParams& g) {
        for_each_gru(g, "", [&](const std::string&, Matrix& m) {
            const Eigen::Index cols = m.cols();
            fill(m, k, cols);
        });
    };
    if (uses_gru(options.encoder)) {
        p.gru_forward = GruParams::zeros(k);
        fill_gru(*p.gru_forward);
    }
    if (options.encoder == EncoderKind::bigru) {
        p.gru_backward = GruParams::zeros(k);
        fill_gru(*p.gru_backward);
    }

    if (options.strategy == InitStrategy::pretrained) {
        const TensorFile file = read_tensor_file(options.pretrained_path);
        const Matrix* ent = file.find("entity");
        const Matrix* rel = file.find("relation");
        if (ent == nullptr || rel == nullptr)
            throw CheckpointError(options.pretrained_path.string() + ": missing entity/relation tensors");
        if (ent->cols() != k || rel->cols() != k)
            throw CheckpointError(options.pretrained_path.string() + ": embedding dimension " +
                                  std::to_string(ent->cols()) + " does not match k=" + std::to_string(k));
        if (static_cast<std::size_t>(ent->rows()) != options.num_entities ||
            static_cast<std::size_t>(rel->rows()) != options.num_relations)
            throw CheckpointError(options.pretrained_path.string() + ": vocabulary size mismatch");
        p.entity = *ent;
        p.relation = *rel;
    }
    return p;
}

void Gradients::accumulate(const Gradients& other) {
    for (const auto& [id, g] : other.entity_rows) {
        auto [it, inserted] = entity_rows.try_emplace(id, g);
        if (!inserted) it->second += g;
    }
    for (const auto& [id, g] : other.relation_rows) {
        auto [it, inserted] = relation_rows.try_emplace(id, g);
        if (!inserted) it->second += g;
    }
    if (dense.empty()) {
        dense = other.dense;
    } else {
        if (dense.size() != other.dense.size()) throw std::invalid_argument("Gradients::accumulate: block count mismatch");
        for (std::size_t i = 0; i < dense.size(); ++i) dense[i] += other.dense[i];
    }
}

namespace {

ParamBinding::GruVars bind_gru(std::span<const Var> vars) {
    return {vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], vars[8]};
}

}  // namespace

ParamBinding::ParamBinding(Tape& tape, const ModelParams& params) : tape_(tape), params_(params) {
    for (const auto& [name, m] : params.dense_blocks()) dense_.push_back(tape.leaf(*m));
    if (params.gru_forward) gru_forward_ = bind_gru(std::span<const Var>(dense_).subspan(3, 9));
    if (params.gru_backward) gru_backward_ = bind_gru(std::span<const Var>(dense_).subspan(12, 9));
}

ParamBinding::ParamBinding(Tape& tape, const ModelParams& params, std::span<const Var> tensors)
    : tape_(tape), params_(params) {
    const std::size_t expected = params.named_tensors().size();
    if (tensors.size() != expected)
        throw std::invalid_argument("ParamBinding: expected " + std::to_string(expected) + " tensors, got " +
                                    std::to_string(tensors.size()));
    entity_table_ = tensors[0];
    relation_table_ = tensors[1];
    dense_.assign(tensors.begin() + 2, tensors.end());
    if (params.gru_forward) gru_forward_ = bind_gru(std::span<const Var>(dense_).subspan(3, 9));
    if (params.gru_backward) gru_backward_ = bind_gru(std::span<const Var>(dense_).subspan(12, 9));
}

Var ParamBinding::entity(EntityId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= params_.num_entities())
        throw std::out_of_range("unknown entity id " + std::to_string(id));
    auto it = entity_rows_.find(id);
    if (it != entity_rows_.end()) return it->second;
    const Var v = entity_table_ ? ad::lookup(*entity_table_, id) : tape_.leaf(params_.entity.row(id).transpose());
    entity_rows_.emplace(id, v);
    return v;
}

Var ParamBinding::relation(RelationId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= params_.num_relations())
        throw std::out_of_range("unknown relation id " + std::to_string(id));
    auto it = relation_rows_.find(id);
    if (it != relation_rows_.end()) return it->second;
    const Var v =
        relation_table_ ? ad::lookup(*relation_table_, id) : tape_.leaf(params_.relation.row(id).transpose());
    relation_rows_.emplace(id, v);
    return v;
}

const ParamBinding::GruVars& ParamBinding::gru(bool backward_direction) const {
    const auto& g = backward_direction ? gru_backward_ : gru_forward_;
    if (!g) throw std::logic_error("model has no GRU parameters for this direction");
    return *g;
}

Gradients ParamBinding::gradients() const {
    Gradients out;
    if (entity_table_) {
        for (const auto& [id, v] : entity_rows_) out.entity_rows.emplace(id, entity_table_->grad().row(id).transpose());
        for (const auto& [id, v] : relation_rows_)
            out.relation_rows.emplace(id, relation_table_->grad().row(id).transpose());
    } else {
        for (const auto& [id, v] : entity_rows_) out.entity_rows.emplace(id, v.grad());
        for (const auto& [id, v] : relation_rows_) out.relation_rows.emplace(id, v.grad());
    }
    out.dense.reserve(dense_.size());
    for (const auto& v : dense_) out.dense.push_back(v.grad());
    return out;
}

namespace {

void require_relations(std::span<const RelationId> relations) {
    if (relations.empty()) throw std::invalid_argument("relation set must not be empty");
}

Var stack_relations(std::span<const RelationId> relations, ParamBinding& binding) {
    std::vector<Var> cols;
    cols.reserve(relations.size());
    for (RelationId r : relations) cols.push_back(binding.relation(r));
    return ad::concat_cols<double>(cols);
}

Var gru_step(const ParamBinding::GruVars& g, const Var& x, const Var& h) {
    using ad::matmul;
    const Var z = ad::sigmoid(matmul(g.w_z, x) + matmul(g.u_z, h) + g.b_z);
    const Var r = ad::sigmoid(matmul(g.w_r, x) + matmul(g.u_r, h) + g.b_r);
    const Var n = ad::tanh(matmul(g.w_n, x) + matmul(g.u_n, ad::mul(r, h)) + g.b_n);
    return n + ad::mul(z, h - n);
}

Var run_gru(const ParamBinding::GruVars& g, std::span<const RelationId> relations, bool reversed,
            ParamBinding& binding) {
    Var h = binding.tape().constant(Matrix::Zero(binding.params().k, 1));
    const std::size_t n = relations.size();
    for (std::size_t i = 0; i < n; ++i) h = gru_step(g, binding.relation(relations[reversed ? n - 1 - i : i]), h);
    return h;
}

}  // namespace

AttnEncoding encode_attn_average(std::span<const RelationId> relations, ParamBinding& binding) {
    require_relations(relations);
    const Var h = stack_relations(relations, binding);                          // k x N
    const Var weights = ad::softmax(ad::tanh(ad::matmul(binding.attn_w(), h)));  // 1 x N
    Var v = ad::matmul(h, ad::transpose(weights));                              // k x 1
    if (binding.params().attn_divide_by_n) v = ad::scale(v, 1.0 / static_cast<double>(relations.size()));
    return {v, weights};
}

Var encode_average(std::span<const RelationId> relations, ParamBinding& binding) {
    require_relations(relations);
    Var total = binding.relation(relations[0]);
    for (std::size_t i = 1; i < relations.size(); ++i) total = total + binding.relation(relations[i]);
    return ad::scale(total, 1.0 / static_cast<double>(relations.size()));
}

Var encode_gru(std::span<const RelationId> relations, ParamBinding& binding) {
    require_relations(relations);
    return run_gru(binding.gru(false), relations, false, binding);
}

Var encode_bigru(std::span<const RelationId> relations, ParamBinding& binding) {
    require_relations(relations);
    const Var fwd = run_gru(binding.gru(false), relations, false, binding);
    const Var bwd = run_gru(binding.gru(true), relations, true, binding);
    return ad::scale(fwd + bwd, 0.5);
}

Var encode_relations(EncoderKind kind, std::span<const RelationId> relations, ParamBinding& binding) {
    switch (kind) {
    case EncoderKind::attn_average: return encode_attn_average(relations, binding).vector;
    case EncoderKind::average: return encode_average(relations, binding);
    case EncoderKind::gru: return encode_gru(relations, binding);
    case EncoderKind::bigru: return encode_bigru(relations, binding);
    }
    throw std::invalid_argument("unknown encoder kind");
}

Var score(EntityId s, std::span<const RelationId> relations, EntityId o, ParamBinding& binding) {
    const ModelParams& p = binding.params();
    if (binding.score_w().rows() != static_cast<Eigen::Index>(p.tau) * p.k)
        throw ad::ShapeError("score: score_w has " + std::to_string(binding.score_w().rows()) +
                             " entries, expected tau*k = " + std::to_string(p.tau * p.k));
    const Var vr = encode_relations(p.encoder, relations, binding);
    const Var t = ad::concat_cols({binding.entity(s), binding.entity(o), vr});  // k x 3
    const Var features = ad::flatten(ad::relu(ad::conv1x3(t, binding.filters())));
    return ad::dot(binding.score_w(), features);
}

Vector encode_value(std::span<const RelationId> relations, const ModelParams& params) {
    Tape tape;
    ParamBinding binding(tape, params);
    return encode_relations(params.encoder, relations, binding).value();
}

Vector attention_weights(std::span<const RelationId> relations, const ModelParams& params) {
    Tape tape;
    ParamBinding binding(tape, params);
    return encode_attn_average(relations, binding).weights.value().transpose();
}

double conv_score(const ModelParams& params, const double* subject, const double* object, const double* relation) {
    const int k = params.k;
    const double* w = params.score_w.data();
    double acc = 0.0;
    for (int f = 0; f < params.tau; ++f) {
        const double w0 = params.filters(f, 0);
        const double w1 = params.filters(f, 1);
        const double w2 = params.filters(f, 2);
        for (int i = 0; i < k; ++i) {
            const double pre = (w0 * subject[i] + w1 * object[i]) + w2 * relation[i];
            acc += w[f * k + i] * std::max(pre, 0.0);
        }
    }
    return acc;
}

double score_value(EntityId s, std::span<const RelationId> relations, EntityId o, const ModelParams& params) {
    const Vector vr = encode_value(relations, params);
    const Vector vs = params.entity.row(s).transpose();
    const Vector vo = params.entity.row(o).transpose();
    return conv_score(params, vs.data(), vo.data(), vr.data());
}

}  // namespace convmr
