#include <doctest.h>

#include <cmath>
#include <json.hpp>
#include <numbers>

#include "convmr/trainer.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace convmr;
using convmr::testing::TempDir;

namespace {

ModelParams toy_params(EncoderKind kind, int k, int tau, std::uint64_t seed, std::size_t entities = 8,
                       std::size_t relations = 4) {
    InitOptions o;
    o.seed = seed;
    o.k = k;
    o.tau = tau;
    o.encoder = kind;
    o.num_entities = entities;
    o.num_relations = relations;
    ModelParams p = init_params(o);
    std::mt19937_64 rng(seed * 31 + 7);
    std::normal_distribution<double> g(0.0, 0.3);
    for (Eigen::Index i = 0; i < p.score_w.size(); ++i) p.score_w(i) = g(rng);
    return p;
}

double softplus_ref(double z) { return std::log1p(std::exp(z)); }

// Straight-line loss: encodes with the library, convolves and sums by hand.
double loss_oracle(const ModelParams& p, const std::vector<MultiRelationInstance>& pos,
                   const std::vector<MultiRelationInstance>& neg, double lambda) {
    auto f = [&](const MultiRelationInstance& inst) {
        const Vector r = encode_value(inst.relations, p);
        double total = 0.0;
        for (int filt = 0; filt < p.tau; ++filt)
            for (int i = 0; i < p.k; ++i) {
                const double pre = p.filters(filt, 0) * p.entity(inst.s, i) + p.filters(filt, 1) * p.entity(inst.o, i) +
                                   p.filters(filt, 2) * r(i);
                total += p.score_w(filt * p.k + i) * std::max(pre, 0.0);
            }
        return total;
    };
    double l = 0.0;
    for (const auto& x : pos) l += softplus_ref(f(x));
    for (const auto& x : neg) l += softplus_ref(-f(x));
    return l + 0.5 * lambda * p.score_w.squaredNorm();
}

std::vector<RawTriple> small_kg() {
    return {{"a", "p", "b"}, {"a", "q", "b"}, {"b", "p", "c"}, {"c", "q", "d"}, {"c", "r", "d"},
            {"d", "p", "e"}, {"e", "r", "a"}, {"e", "p", "a"}, {"b", "r", "e"}, {"a", "r", "c"}};
}

}  // namespace

TEST_CASE("two entities force the only alternative") {
    Rng rng(1);
    const MultiRelationInstance inst{0, {2}, 1};
    int subject_side = 0;
    for (int i = 0; i < 200; ++i) {
        const auto negs = sample_negatives(inst, 2, rng);
        REQUIRE(negs.size() == 1);
        const auto& n = negs[0];
        CHECK(n.relations == inst.relations);
        CHECK(((n.s == 1 && n.o == 1) || (n.s == 0 && n.o == 0)));
        subject_side += n.s == 1;
    }
    CHECK(subject_side > 0);
    CHECK(subject_side < 200);
}

TEST_CASE("corruption never touches relations and always changes one side") {
    Rng rng(2);
    const MultiRelationInstance inst{4, {0, 3, 5}, 9};
    for (const auto& n : sample_negatives(inst, 20, rng, 500)) {
        CHECK(n.relations == inst.relations);
        CHECK((n.s != inst.s) != (n.o != inst.o));
        CHECK(n.s >= 0);
        CHECK(n.o < 20);
    }
}

TEST_CASE("replaced side is a fair coin within three sigma") {
    Rng rng(3);
    const MultiRelationInstance inst{10, {1}, 20};
    const int n = 10000;
    int subject = 0;
    for (const auto& neg : sample_negatives(inst, 100, rng, n)) subject += neg.s != inst.s;
    const double sigma = std::sqrt(n * 0.25);
    CHECK(std::abs(subject - n / 2.0) < 3.0 * sigma);
}

TEST_CASE("zero score weights give B log 2") {
    ModelParams p = toy_params(EncoderKind::attn_average, 6, 3, 1);
    p.score_w.setZero();
    const std::vector<MultiRelationInstance> pos = {{0, {1}, 2}, {3, {0, 2}, 4}, {5, {3}, 6}};
    const std::vector<MultiRelationInstance> neg = {{1, {1}, 2}, {3, {0, 2}, 7}};
    Tape tape;
    ParamBinding b(tape, p);
    CHECK(loss(pos, neg, b, 0.0).scalar() == doctest::Approx(5.0 * std::numbers::ln2).epsilon(1e-15));
}

TEST_CASE("positive scored at -10 contributes softplus(-10)") {
    ModelParams p = toy_params(EncoderKind::average, 4, 1, 2);
    p.filters << 1, 0, 0;
    p.entity.row(0).setOnes();
    p.score_w.setConstant(-2.5);  // f = -2.5 * 4 = -10
    const std::vector<MultiRelationInstance> pos = {{0, {0}, 1}};
    Tape tape;
    ParamBinding b(tape, p);
    CHECK(loss(pos, {}, b, 0.0).scalar() == doctest::Approx(4.5398899216870535e-05).epsilon(1e-12));
}

TEST_CASE("loss matches the straight-line oracle") {
    for (EncoderKind kind : {EncoderKind::attn_average, EncoderKind::average, EncoderKind::gru, EncoderKind::bigru}) {
        const ModelParams p = toy_params(kind, 8, 4, 3);
        const std::vector<MultiRelationInstance> pos = {{0, {0, 1, 3}, 1}, {2, {2}, 3}, {4, {1, 2}, 5}};
        const std::vector<MultiRelationInstance> neg = {{6, {0, 1, 3}, 1}, {2, {2}, 7}, {4, {1, 2}, 0}};
        Tape tape;
        ParamBinding b(tape, p);
        const double got = loss(pos, neg, b, 0.01).scalar();
        CHECK(std::abs(got - loss_oracle(p, pos, neg, 0.01)) < 1e-12);
    }
}

TEST_CASE("loss is non-negative and positive under l2") {
    ModelParams p = toy_params(EncoderKind::attn_average, 6, 2, 4);
    p.score_w *= 100.0;
    const std::vector<MultiRelationInstance> pos = {{0, {0}, 1}};
    Tape t1;
    ParamBinding b1(t1, p);
    CHECK(loss(pos, {}, b1, 0.0).scalar() >= 0.0);
    Tape t2;
    ParamBinding b2(t2, p);
    CHECK(loss(pos, {}, b2, 1e-3).scalar() > 0.0);
}

TEST_CASE("empty batch and non-finite scores are rejected") {
    ModelParams p = toy_params(EncoderKind::average, 4, 2, 5);
    Tape tape;
    ParamBinding b(tape, p);
    CHECK_THROWS_AS(loss({}, {}, b, 0.0), std::invalid_argument);
    p.entity(0, 0) = std::numeric_limits<double>::quiet_NaN();
    Tape t2;
    ParamBinding b2(t2, p);
    const std::vector<MultiRelationInstance> pos = {{0, {0}, 1}};
    CHECK_THROWS_AS(loss(pos, {}, b2, 0.0), NumericalError);
}

TEST_CASE("full loss gradients pass the finite-difference check") {
    for (EncoderKind kind : {EncoderKind::attn_average, EncoderKind::average, EncoderKind::gru, EncoderKind::bigru})
        for (int n : {1, 2, 3, 4}) {
            const auto report = check_loss_gradients(kind, 8, 4, n, 1);
            CAPTURE(to_string(kind));
            CAPTURE(n);
            CHECK(report.checked > 0);
            CHECK(report.max_rel_error < 1e-4);
        }
}

TEST_CASE("adagrad first step with unit gradient") {
    ModelParams p = toy_params(EncoderKind::average, 4, 2, 6);
    const ModelParams before = p;
    AdaGradState st = AdaGradState::zeros_like(p);
    Gradients g;
    g.entity_rows[1] = Vector::Ones(4);
    for (const auto& [name, m] : std::as_const(p).dense_blocks()) g.dense.push_back(Matrix::Ones(m->rows(), m->cols()));
    adagrad_step(p, g, st, 0.01);
    const double delta = -0.01 / (1.0 + 1e-8);
    for (int i = 0; i < 4; ++i) CHECK(p.entity(1, i) == doctest::Approx(before.entity(1, i) + delta).epsilon(1e-15));
    CHECK(p.filters(0, 0) == doctest::Approx(before.filters(0, 0) + delta).epsilon(1e-15));
    // Rows without a gradient are left alone, bit for bit.
    CHECK(p.entity.row(0) == before.entity.row(0));
    CHECK(p.relation == before.relation);
    CHECK(st.entity_acc.row(0).isZero(0.0));
}

TEST_CASE("zero gradient changes nothing") {
    ModelParams p = toy_params(EncoderKind::average, 4, 2, 7);
    const ModelParams before = p;
    AdaGradState st = AdaGradState::zeros_like(p);
    Gradients g;
    g.relation_rows[2] = Vector::Zero(4);
    for (const auto& [name, m] : std::as_const(p).dense_blocks()) g.dense.push_back(Matrix::Zero(m->rows(), m->cols()));
    adagrad_step(p, g, st, 0.01);
    CHECK(p == before);
    CHECK(st.relation_acc.isZero(0.0));
}

TEST_CASE("two adagrad steps follow the hand-rolled recurrence") {
    ModelParams p = toy_params(EncoderKind::average, 3, 1, 8);
    AdaGradState st = AdaGradState::zeros_like(p);
    const double g1[3] = {0.5, -2.0, 0.0}, g2[3] = {1.5, 1.0, -0.25};
    const double lr1 = 0.01, lr2 = 0.001, eps = 1e-8;
    double expect[3], acc[3] = {0, 0, 0};
    for (int i = 0; i < 3; ++i) expect[i] = p.entity(2, i);
    for (auto [g, lr] : {std::pair{g1, lr1}, std::pair{g2, lr2}}) {
        Gradients grads;
        grads.entity_rows[2] = Vector(3);
        for (int i = 0; i < 3; ++i) grads.entity_rows[2](i) = g[i];
        for (const auto& [name, m] : std::as_const(p).dense_blocks())
            grads.dense.push_back(Matrix::Zero(m->rows(), m->cols()));
        adagrad_step(p, grads, st, lr);
        for (int i = 0; i < 3; ++i) {
            acc[i] += g[i] * g[i];
            expect[i] -= lr * g[i] / (std::sqrt(acc[i]) + eps);
        }
    }
    for (int i = 0; i < 3; ++i) {
        CHECK(p.entity(2, i) == doctest::Approx(expect[i]).epsilon(1e-15));
        CHECK(st.entity_acc(2, i) == doctest::Approx(acc[i]).epsilon(1e-15));
    }
}

TEST_CASE("learning-rate schedule") {
    TrainConfig c;
    CHECK(lr_schedule(0, c) == 0.01);
    for (int e = 0; e < 5; ++e) CHECK(lr_schedule(e, c) == doctest::Approx(0.01).epsilon(1e-15));
    for (int e = 5; e < 10; ++e) CHECK(lr_schedule(e, c) == doctest::Approx(0.001).epsilon(1e-15));
    c.lr_decay_factor = 1.0;
    CHECK(lr_schedule(17, c) == 0.01);
}

TEST_CASE("batch gradients do not depend on the thread count") {
    const ModelParams p = toy_params(EncoderKind::attn_average, 6, 3, 9, 30, 4);
    Rng rng(10);
    std::uniform_int_distribution<int> e(0, 29), r(0, 3);
    std::vector<MultiRelationInstance> pos, neg;
    for (int i = 0; i < 150; ++i) {
        std::vector<RelationId> rels = {r(rng)};
        if (i % 3 == 0 && rels[0] != 3) rels.push_back(3);
        pos.push_back({e(rng), rels, e(rng)});
        for (auto& n : sample_negatives(pos.back(), 30, rng)) neg.push_back(n);
    }
    Gradients g1, g4;
    const double l1 = batch_loss_and_gradients(p, pos, neg, 0.001, 1, g1);
    const double l4 = batch_loss_and_gradients(p, pos, neg, 0.001, 4, g4);
    CHECK(l1 == l4);
    CHECK(g1.entity_rows == g4.entity_rows);
    CHECK(g1.relation_rows == g4.relation_rows);
    REQUIRE(g1.dense.size() == g4.dense.size());
    for (std::size_t i = 0; i < g1.dense.size(); ++i) CHECK(g1.dense[i] == g4.dense[i]);

    // One tape over the whole batch agrees to rounding.
    Tape tape;
    ParamBinding b(tape, p);
    const Var total = loss(pos, neg, b, 0.001);
    CHECK(total.scalar() == doctest::Approx(l1).epsilon(1e-12));
}

TEST_CASE("training set sizes") {
    const Dataset ds = make_dataset("toy", small_kg(), {}, {});
    TrainConfig c;
    c.multirel = false;
    CHECK(training_set(ds, c).size() == ds.train.size());
    c.multirel = true;
    CHECK(training_set(ds, c).size() == ds.train.size() + generate(ds.train).size());
}

TEST_CASE("identical seeds give identical runs") {
    const Dataset ds = make_dataset("toy", small_kg(), {}, {});
    TrainConfig c;
    c.k = 6;
    c.tau = 3;
    c.epochs = 6;
    c.num_batches = 3;
    c.seed = 42;
    const TrainResult a = train(ds, c), b = train(ds, c);
    CHECK(a.params == b.params);
    REQUIRE(a.log.size() == 6);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].mean_loss == b.log[i].mean_loss);
        CHECK(a.log[i].lr == b.log[i].lr);
    }
    c.threads = 3;
    CHECK(train(ds, c).params == a.params);
    c.threads = 1;
    c.seed = 43;
    CHECK_FALSE(train(ds, c).params == a.params);
}

TEST_CASE("entities outside a batch keep their embeddings") {
    ModelParams p = toy_params(EncoderKind::attn_average, 6, 3, 11, 10, 4);
    const ModelParams before = p;
    const std::vector<MultiRelationInstance> pos = {{0, {0, 1}, 1}, {2, {3}, 3}};
    const std::vector<MultiRelationInstance> neg = {{0, {0, 1}, 4}, {5, {3}, 3}};
    Gradients g;
    batch_loss_and_gradients(p, pos, neg, 0.001, 1, g);
    AdaGradState st = AdaGradState::zeros_like(p);
    adagrad_step(p, g, st, 0.01);
    for (Eigen::Index e = 6; e < 10; ++e) CHECK(p.entity.row(e) == before.entity.row(e));
    CHECK(p.relation.row(2) == before.relation.row(2));
    CHECK_FALSE(p.entity.row(0) == before.entity.row(0));
}

TEST_CASE("toy KG overfits with a near-monotone loss") {
    const Dataset ds = make_dataset("toy", convmr::testing::one_to_one_toy_kg(7), {}, {});
    TrainConfig c;
    c.k = 32;
    c.tau = 16;
    c.num_batches = 10;
    c.initial_lr = 0.1;
    c.lr_decay_every = 1000;
    c.negatives_per_positive = 4;
    c.epochs = 200;
    const TrainResult r = train(ds, c);
    CHECK(r.log.back().mean_loss < 0.05);
    // Fresh negatives every epoch make single epochs noisy; the trend is
    // judged on consecutive 10-epoch means after epoch 20.
    int violations = 0;
    double previous = std::numeric_limits<double>::infinity();
    for (std::size_t start = 20; start + 10 <= r.log.size(); start += 10) {
        double mean = 0.0;
        for (std::size_t e = start; e < start + 10; ++e) mean += r.log[e].mean_loss / 10.0;
        violations += mean > previous;
        previous = mean;
    }
    CHECK(violations <= 2);
}

TEST_CASE("config json round trip and strictness") {
    TrainConfig c;
    c.k = 12;
    c.encoder = EncoderKind::bigru;
    c.init = InitStrategy::pretrained;
    c.pretrained_path = "x.bin";
    c.multirel = false;
    const nlohmann::json j = c;
    TrainConfig d;
    from_json(j, d);
    CHECK(nlohmann::json(d) == j);
    CHECK_THROWS_AS(from_json(nlohmann::json{{"epoch", 3}}, d), std::invalid_argument);
    TrainConfig bad;
    bad.num_batches = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("transe rows are unit length after every epoch") {
    const Dataset ds = make_dataset("toy", small_kg(), {}, {});
    for (int epochs : {1, 2, 5}) {
        TransEConfig c;
        c.k = 10;
        c.epochs = epochs;
        const auto emb = pretrain_transe(ds.train, ds.vocab.num_entities(), ds.vocab.num_relations(), c);
        for (Eigen::Index i = 0; i < emb.entity.rows(); ++i)
            CHECK(std::abs(emb.entity.row(i).norm() - 1.0) < 1e-9);
    }
}

TEST_CASE("transe separates a chain") {
    const std::vector<RawTriple> chain = {{"a", "next", "b"}, {"b", "next", "c"}};
    const Dataset ds = make_dataset("chain", chain, {}, {});
    TransEConfig c;
    c.k = 16;
    c.epochs = 300;
    c.lr = 0.05;
    const auto emb = pretrain_transe(ds.train, 3, 1, c);
    CHECK(transe_distance(emb, 0, 0, 1) < transe_distance(emb, 0, 0, 2));
}

TEST_CASE("transe hinge at rest moves nothing") {
    TransEEmbeddings emb;
    emb.entity = Matrix::Zero(3, 4);
    emb.relation = Matrix::Zero(1, 4);
    emb.entity(0, 0) = 1.0;
    emb.entity(1, 0) = 1.0;
    emb.entity(2, 0) = 1.0;
    const TransEEmbeddings before = emb;
    const double h = transe_pair_step(emb, {0, 0, 1}, {0, 0, 2}, 0.0, 0.1);
    CHECK(h == 0.0);
    CHECK(emb.entity == before.entity);
    CHECK(emb.relation == before.relation);
}

TEST_CASE("transe embeddings feed pretrained init") {
    TempDir dir("trainer_transe");
    const Dataset ds = make_dataset("toy", small_kg(), {}, {});
    TransEConfig tc;
    tc.k = 6;
    tc.epochs = 3;
    const auto emb = pretrain_transe(ds.train, ds.vocab.num_entities(), ds.vocab.num_relations(), tc);
    save_embeddings(emb, ds.vocab.hash(), dir / "t.bin");
    InitOptions o;
    o.strategy = InitStrategy::pretrained;
    o.pretrained_path = dir / "t.bin";
    o.k = 6;
    o.tau = 2;
    o.num_entities = ds.vocab.num_entities();
    o.num_relations = ds.vocab.num_relations();
    const ModelParams p = init_params(o);
    CHECK(p.entity == emb.entity);
    CHECK(p.relation == emb.relation);
}
