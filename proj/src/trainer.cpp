#include "convmr/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <numeric>
#include <sstream>
#include <thread>

namespace convmr {

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw std::invalid_argument("invalid training config: " + what); };
    if (epochs < 1) fail("epochs must be positive");
    if (k < 1) fail("k must be positive");
    if (tau < 1) fail("tau must be positive");
    if (num_batches < 1) fail("num_batches must be positive");
    if (negatives_per_positive < 1) fail("negatives_per_positive must be positive");
    if (lr_decay_every < 1) fail("lr_decay_every must be positive");
    if (!(initial_lr > 0)) fail("initial_lr must be positive");
    if (!(lr_decay_factor > 0)) fail("lr_decay_factor must be positive");
    if (!(lambda >= 0)) fail("lambda must be non-negative");
    if (threads < 1) fail("threads must be positive");
    if (init == InitStrategy::pretrained && pretrained_path.empty()) fail("pretrained init needs pretrained_path");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"epochs", c.epochs},
                       {"k", c.k},
                       {"num_batches", c.num_batches},
                       {"initial_lr", c.initial_lr},
                       {"lr_decay_factor", c.lr_decay_factor},
                       {"lr_decay_every", c.lr_decay_every},
                       {"lambda", c.lambda},
                       {"tau", c.tau},
                       {"negatives_per_positive", c.negatives_per_positive},
                       {"seed", c.seed},
                       {"encoder", std::string(to_string(c.encoder))},
                       {"init", std::string(to_string(c.init))},
                       {"pretrained_path", c.pretrained_path},
                       {"multirel", c.multirel},
                       {"attn_divide_by_n", c.attn_divide_by_n},
                       {"threads", c.threads}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    if (!j.is_object()) throw std::invalid_argument("training config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        if (key == "epochs") c.epochs = value.get<int>();
        else if (key == "k") c.k = value.get<int>();
        else if (key == "num_batches") c.num_batches = value.get<int>();
        else if (key == "initial_lr") c.initial_lr = value.get<double>();
        else if (key == "lr_decay_factor") c.lr_decay_factor = value.get<double>();
        else if (key == "lr_decay_every") c.lr_decay_every = value.get<int>();
        else if (key == "lambda") c.lambda = value.get<double>();
        else if (key == "tau") c.tau = value.get<int>();
        else if (key == "negatives_per_positive") c.negatives_per_positive = value.get<int>();
        else if (key == "seed") c.seed = value.get<std::uint64_t>();
        else if (key == "encoder") c.encoder = parse_encoder_kind(value.get<std::string>());
        else if (key == "init") c.init = parse_init_strategy(value.get<std::string>());
        else if (key == "pretrained_path") c.pretrained_path = value.get<std::string>();
        else if (key == "multirel") c.multirel = value.get<bool>();
        else if (key == "attn_divide_by_n") c.attn_divide_by_n = value.get<bool>();
        else if (key == "threads") c.threads = value.get<int>();
        else throw std::invalid_argument("unknown training config key \"" + key + "\"");
    }
}

std::vector<MultiRelationInstance> sample_negatives(const MultiRelationInstance& instance, std::size_t num_entities,
                                                    Rng& rng, int count) {
    if (num_entities < 2) throw std::invalid_argument("sample_negatives: need at least two entities");
    std::vector<MultiRelationInstance> out;
    out.reserve(static_cast<std::size_t>(count));
    std::bernoulli_distribution pick_subject(0.5);
    std::uniform_int_distribution<EntityId> other(0, static_cast<EntityId>(num_entities) - 2);
    for (int n = 0; n < count; ++n) {
        MultiRelationInstance neg = instance;
        EntityId& side = pick_subject(rng) ? neg.s : neg.o;
        // Uniform over the |E| - 1 entities that differ from the current one.
        EntityId e = other(rng);
        if (e >= side) ++e;
        side = e;
        out.push_back(std::move(neg));
    }
    return out;
}

Var loss(std::span<const MultiRelationInstance> positives, std::span<const MultiRelationInstance> negatives,
         ParamBinding& binding, double lambda) {
    if (positives.empty() && negatives.empty()) throw std::invalid_argument("loss: empty batch");
    std::vector<Var> terms;
    terms.reserve(positives.size() + negatives.size() + 1);
    auto add_term = [&](const MultiRelationInstance& inst, double label) {
        const Var f = score(inst.s, inst.relations, inst.o, binding);
        if (!std::isfinite(f.scalar())) throw NumericalError("non-finite score");
        terms.push_back(ad::softplus(label > 0 ? f : ad::scale(f, -1.0)));
    };
    for (const auto& p : positives) add_term(p, 1.0);
    for (const auto& n : negatives) add_term(n, -1.0);
    if (lambda > 0) terms.push_back(ad::scale(ad::l2_norm_sq(binding.score_w()), lambda / 2.0));
    Var total = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
    return total;
}

AdaGradState AdaGradState::zeros_like(const ModelParams& params) {
    AdaGradState s;
    s.entity_acc = Matrix::Zero(params.entity.rows(), params.entity.cols());
    s.relation_acc = Matrix::Zero(params.relation.rows(), params.relation.cols());
    for (const auto& [name, m] : params.dense_blocks()) s.dense_acc.push_back(Matrix::Zero(m->rows(), m->cols()));
    return s;
}

namespace {

template <typename P, typename A, typename G>
void adagrad_update(P&& param, A&& acc, const G& g, double lr, double eps) {
    acc.array() += g.array().square();
    param.array() -= lr * g.array() / (acc.array().sqrt() + eps);
}

}  // namespace

void adagrad_step(ModelParams& params, const Gradients& grads, AdaGradState& state, double lr) {
    for (const auto& [id, g] : grads.entity_rows)
        adagrad_update(params.entity.row(id), state.entity_acc.row(id), g.transpose(), lr, state.eps);
    for (const auto& [id, g] : grads.relation_rows)
        adagrad_update(params.relation.row(id), state.relation_acc.row(id), g.transpose(), lr, state.eps);
    auto blocks = params.dense_blocks();
    if (grads.dense.empty()) return;
    if (grads.dense.size() != blocks.size() || state.dense_acc.size() != blocks.size())
        throw std::invalid_argument("adagrad_step: dense block count mismatch");
    for (std::size_t i = 0; i < blocks.size(); ++i)
        adagrad_update(*blocks[i].second, state.dense_acc[i], grads.dense[i], lr, state.eps);
}

double lr_schedule(int epoch, const TrainConfig& config) {
    if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
    return config.initial_lr * std::pow(config.lr_decay_factor, epoch / config.lr_decay_every);
}

std::vector<MultiRelationInstance> training_set(const Dataset& dataset, const TrainConfig& config) {
    if (!config.multirel) return merge_training_set(dataset.train, {});
    const auto multi = generate(dataset.train);
    return merge_training_set(dataset.train, multi);
}

namespace {

constexpr std::size_t chunk_size = 32;

struct Chunk {
    std::span<const MultiRelationInstance> positives;
    std::span<const MultiRelationInstance> negatives;
    double lambda = 0.0;
};

struct ChunkResult {
    double loss = 0.0;
    Gradients grads;
    std::exception_ptr error;
};

ChunkResult run_chunk(const ModelParams& params, const Chunk& chunk) {
    ChunkResult r;
    Tape tape;
    ParamBinding binding(tape, params);
    const Var total = loss(chunk.positives, chunk.negatives, binding, chunk.lambda);
    r.loss = total.scalar();
    tape.backward(total);
    r.grads = binding.gradients();
    return r;
}

}  // namespace

double batch_loss_and_gradients(const ModelParams& params, std::span<const MultiRelationInstance> positives,
                                std::span<const MultiRelationInstance> negatives, double lambda, int threads,
                                Gradients& grads) {
    std::vector<Chunk> chunks;
    for (std::size_t i = 0; i < positives.size(); i += chunk_size)
        chunks.push_back({positives.subspan(i, std::min(chunk_size, positives.size() - i)), {}, 0.0});
    for (std::size_t i = 0; i < negatives.size(); i += chunk_size)
        chunks.push_back({{}, negatives.subspan(i, std::min(chunk_size, negatives.size() - i)), 0.0});
    if (chunks.empty()) throw std::invalid_argument("batch_loss_and_gradients: empty batch");
    chunks.front().lambda = lambda;

    std::vector<ChunkResult> results(chunks.size());
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), chunks.size());
    if (workers <= 1) {
        for (std::size_t i = 0; i < chunks.size(); ++i) results[i] = run_chunk(params, chunks[i]);
    } else {
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i = next++; i < chunks.size(); i = next++) {
                try {
                    results[i] = run_chunk(params, chunks[i]);
                } catch (...) {
                    results[i].error = std::current_exception();
                }
            }
        };
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        pool.clear();
        for (const auto& r : results)
            if (r.error) std::rethrow_exception(r.error);
    }

    grads = Gradients{};
    double total = 0.0;
    for (const auto& r : results) {
        total += r.loss;
        grads.accumulate(r.grads);
    }
    return total;
}

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainHooks& hooks) {
    config.validate();
    TrainResult result;
    const auto instances = training_set(dataset, config);
    result.training_set_size = instances.size();
    if (instances.empty()) throw std::invalid_argument("train: empty training set");

    InitOptions init;
    init.strategy = config.init;
    init.seed = config.seed;
    init.k = config.k;
    init.tau = config.tau;
    init.encoder = config.encoder;
    init.attn_divide_by_n = config.attn_divide_by_n;
    init.num_entities = dataset.vocab.num_entities();
    init.num_relations = dataset.vocab.num_relations();
    init.pretrained_path = config.pretrained_path;
    result.params = init_params(init);
    ModelParams& params = result.params;

    AdaGradState state = AdaGradState::zeros_like(params);
    std::seed_seq seq{config.seed, std::uint64_t{0x7261696eu}};
    Rng rng(seq);

    std::vector<std::size_t> order(instances.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t batches = static_cast<std::size_t>(config.num_batches);
    const std::size_t batch_size = (instances.size() + batches - 1) / batches;

    std::vector<MultiRelationInstance> positives;
    std::vector<MultiRelationInstance> negatives;
    Gradients grads;
    long batch_counter = 0;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        const double lr = lr_schedule(epoch, config);
        std::shuffle(order.begin(), order.end(), rng);

        double mean_sum = 0.0;
        std::size_t batch_count = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size, ++batch_counter) {
            const std::size_t end = std::min(order.size(), begin + batch_size);
            positives.clear();
            negatives.clear();
            for (std::size_t i = begin; i < end; ++i) {
                const auto& inst = instances[order[i]];
                positives.push_back(inst);
                for (auto& neg : sample_negatives(inst, params.num_entities(), rng, config.negatives_per_positive))
                    negatives.push_back(std::move(neg));
            }

            double batch_loss = 0.0;
            try {
                batch_loss = batch_loss_and_gradients(params, positives, negatives, config.lambda, config.threads, grads);
            } catch (const NumericalError& e) {
                throw NumericalError(std::string(e.what()) + " in batch " + std::to_string(batch_counter), batch_counter);
            }
            if (!std::isfinite(batch_loss))
                throw NumericalError("non-finite loss in batch " + std::to_string(batch_counter), batch_counter);
            adagrad_step(params, grads, state, lr);

            const std::size_t count = positives.size() + negatives.size();
            mean_sum += batch_loss / static_cast<double>(count);
            ++batch_count;
            if (hooks.on_batch) hooks.on_batch({epoch, batch_count - 1, count, batch_loss});
        }

        EpochLog entry;
        entry.epoch = epoch;
        entry.mean_loss = mean_sum / static_cast<double>(batch_count);
        entry.lr = lr;
        entry.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.log.push_back(entry);
        if (hooks.on_epoch) hooks.on_epoch(entry);
    }
    return result;
}

ad::GradCheckReport<double> check_loss_gradients(EncoderKind encoder, int k, int tau, int n, std::uint64_t seed,
                                                 double step) {
    if (n < 1) throw std::invalid_argument("check_loss_gradients: n must be positive");
    InitOptions init;
    init.seed = seed;
    init.k = k;
    init.tau = tau;
    init.encoder = encoder;
    init.num_entities = 6;
    init.num_relations = static_cast<std::size_t>(std::max(n, 3));
    ModelParams params = init_params(init);
    Rng rng(seed + 17);
    std::uniform_real_distribution<double> unif(-1.0, 1.0);
    params.score_w = params.score_w.unaryExpr([&](double) { return unif(rng); });

    MultiRelationInstance multi{0, {}, 1};
    for (int i = 0; i < n; ++i) multi.relations.push_back(i);
    const std::vector<MultiRelationInstance> positives{multi, {2, {static_cast<RelationId>(n > 1 ? 1 : 0)}, 3}};
    std::vector<MultiRelationInstance> negatives;
    for (const auto& p : positives)
        for (auto& neg : sample_negatives(p, params.num_entities(), rng, 1)) negatives.push_back(std::move(neg));

    std::vector<Matrix> tensors;
    for (const auto& [name, m] : params.named_tensors()) tensors.push_back(*m);
    auto build = [&](Tape& tape, std::span<const Var> leaves) {
        ParamBinding binding(tape, params, leaves);
        return loss(positives, negatives, binding, 0.01);
    };
    return ad::grad_check(build, tensors, step);
}

std::string train_log_csv_header() { return "epoch,mean_loss,lr,seconds"; }

std::string to_csv_row(const EpochLog& log) {
    std::ostringstream os;
    os.precision(17);
    os << log.epoch << ',' << log.mean_loss << ',' << log.lr << ',';
    os.precision(6);
    os << log.seconds;
    return os.str();
}

}  // namespace convmr
