#include <algorithm>
#include <numeric>

#include "convmr/trainer.hpp"

namespace convmr {

void to_json(nlohmann::json& j, const TransEConfig& c) {
    j = nlohmann::json{{"k", c.k}, {"epochs", c.epochs}, {"lr", c.lr}, {"margin", c.margin}, {"seed", c.seed}};
}

namespace {

Vector translation_residual(const TransEEmbeddings& emb, EntityId s, RelationId r, EntityId o) {
    return (emb.entity.row(s) + emb.relation.row(r) - emb.entity.row(o)).transpose();
}

void normalize_rows(Matrix& m) {
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        const double n = m.row(i).norm();
        if (n > 0) m.row(i) /= n;
    }
}

}  // namespace

double transe_distance(const TransEEmbeddings& emb, EntityId s, RelationId r, EntityId o) {
    return translation_residual(emb, s, r, o).norm();
}

double transe_pair_step(TransEEmbeddings& emb, const Triple& positive, const Triple& negative, double margin,
                        double lr) {
    const Vector pos = translation_residual(emb, positive.s, positive.r, positive.o);
    const Vector neg = translation_residual(emb, negative.s, negative.r, negative.o);
    const double d_pos = pos.norm();
    const double d_neg = neg.norm();
    const double hinge = margin + d_pos - d_neg;
    if (hinge <= 0) return 0.0;

    // d ||x|| / dx = x / ||x||, taken as zero at the origin.
    const Vector g_pos = d_pos > 0 ? Vector(pos / d_pos) : Vector::Zero(pos.size());
    const Vector g_neg = d_neg > 0 ? Vector(neg / d_neg) : Vector::Zero(neg.size());
    emb.entity.row(positive.s) -= lr * g_pos.transpose();
    emb.relation.row(positive.r) -= lr * g_pos.transpose();
    emb.entity.row(positive.o) += lr * g_pos.transpose();
    emb.entity.row(negative.s) += lr * g_neg.transpose();
    emb.relation.row(negative.r) += lr * g_neg.transpose();
    emb.entity.row(negative.o) -= lr * g_neg.transpose();
    return hinge;
}

TransEEmbeddings pretrain_transe(std::span<const Triple> train, std::size_t num_entities, std::size_t num_relations,
                                 const TransEConfig& config) {
    if (config.k < 1) throw std::invalid_argument("pretrain_transe: k must be positive");
    if (config.epochs < 0) throw std::invalid_argument("pretrain_transe: negative epoch count");

    Rng rng(config.seed);
    const double bound = init_bound(config.k);
    std::uniform_real_distribution<double> unif(-bound, bound);
    TransEEmbeddings emb;
    emb.entity.resize(static_cast<Eigen::Index>(num_entities), config.k);
    emb.relation.resize(static_cast<Eigen::Index>(num_relations), config.k);
    for (Matrix* m : {&emb.entity, &emb.relation})
        for (Eigen::Index i = 0; i < m->rows(); ++i)
            for (Eigen::Index j = 0; j < m->cols(); ++j) (*m)(i, j) = unif(rng);
    normalize_rows(emb.relation);
    normalize_rows(emb.entity);

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t idx : order) {
            const Triple& pos = train[idx];
            const auto corrupted = sample_negatives(as_instance(pos), num_entities, rng, 1).front();
            const Triple neg{corrupted.s, pos.r, corrupted.o};
            transe_pair_step(emb, pos, neg, config.margin, config.lr);
        }
        normalize_rows(emb.entity);
    }
    return emb;
}

void save_embeddings(const TransEEmbeddings& emb, std::uint64_t vocab_hash, const std::filesystem::path& path) {
    TensorFile file;
    file.k = static_cast<int>(emb.entity.cols());
    file.tau = 0;
    file.encoder_kind = "transe";
    file.vocab_hash = vocab_hash;
    file.tensors.emplace_back("entity", emb.entity);
    file.tensors.emplace_back("relation", emb.relation);
    write_tensor_file(file, path);
}

}  // namespace convmr
