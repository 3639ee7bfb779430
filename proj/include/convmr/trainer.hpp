#pragma once
// Negative sampling, the softplus loss, AdaGrad and the training loop, plus
// the TransE pretrainer that supplies initial embeddings.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "convmr/kg_data.hpp"
#include "convmr/model.hpp"
#include "convmr/multirel.hpp"

namespace convmr {

class NumericalError : public std::runtime_error {
public:
    NumericalError(const std::string& what, long batch = -1) : std::runtime_error(what), batch_(batch) {}
    long batch() const { return batch_; }

private:
    long batch_;
};

using Rng = std::mt19937_64;

struct TrainConfig {
    int epochs = 20;
    int k = 100;
    int num_batches = 800;
    double initial_lr = 0.01;
    double lr_decay_factor = 0.1;
    int lr_decay_every = 5;
    double lambda = 0.001;
    int tau = 64;
    int negatives_per_positive = 1;
    std::uint64_t seed = 1;
    EncoderKind encoder = EncoderKind::attn_average;
    InitStrategy init = InitStrategy::random;
    std::string pretrained_path;
    bool multirel = true;
    bool attn_divide_by_n = true;
    int threads = 1;

    // Throws std::invalid_argument.
    void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Missing keys keep their current value; unknown keys are rejected.
void from_json(const nlohmann::json& j, TrainConfig& c);

// Samples `count` corruptions: each replaces the subject or the object (equal
// odds) by a uniformly drawn different entity. Relations are never touched.
std::vector<MultiRelationInstance> sample_negatives(const MultiRelationInstance& instance, std::size_t num_entities,
                                                    Rng& rng, int count = 1);

// sum over instances of softplus(l * f) + lambda/2 * ||score_w||^2 with l = +1
// for positives and -1 for negatives.
Var loss(std::span<const MultiRelationInstance> positives, std::span<const MultiRelationInstance> negatives,
         ParamBinding& binding, double lambda);

struct AdaGradState {
    Matrix entity_acc;
    Matrix relation_acc;
    std::vector<Matrix> dense_acc;
    double eps = 1e-8;

    static AdaGradState zeros_like(const ModelParams& params);
};

// acc += g^2; p -= lr * g / (sqrt(acc) + eps), only for the rows present in `grads`.
void adagrad_step(ModelParams& params, const Gradients& grads, AdaGradState& state, double lr);

double lr_schedule(int epoch, const TrainConfig& config);

struct EpochLog {
    int epoch = 0;
    double mean_loss = 0.0;  // mean over batches of (batch loss / instances in batch)
    double lr = 0.0;
    double seconds = 0.0;
};

struct BatchEvent {
    int epoch = 0;
    std::size_t batch = 0;
    std::size_t instances = 0;  // positives plus negatives
    double loss = 0.0;          // summed loss including the L2 term
};

struct TrainResult {
    ModelParams params;
    std::vector<EpochLog> log;
    std::size_t training_set_size = 0;
};

struct TrainHooks {
    std::function<void(const BatchEvent&)> on_batch;
    std::function<void(const EpochLog&)> on_epoch;
};

// Training instances: the train split as singleton instances, followed by
// the generated multi-relation instances when config.multirel is set.
std::vector<MultiRelationInstance> training_set(const Dataset& dataset, const TrainConfig& config);

// Summed batch loss; fills `grads` with the gradient of that sum. Instances
// are processed in fixed chunks, optionally on several threads, and merged in
// chunk order so the result does not depend on the thread count.
double batch_loss_and_gradients(const ModelParams& params, std::span<const MultiRelationInstance> positives,
                                std::span<const MultiRelationInstance> negatives, double lambda, int threads,
                                Gradients& grads);

TrainResult train(const Dataset& dataset, const TrainConfig& config, const TrainHooks& hooks = {});

// Finite-difference check of the full loss on a small random model: one
// positive carrying `n` relations, one singleton positive, one corruption of
// each, lambda = 0.01 and a random (non-zero) score_w.
ad::GradCheckReport<double> check_loss_gradients(EncoderKind encoder, int k, int tau, int n, std::uint64_t seed,
                                                 double step = 1e-5);

std::string train_log_csv_header();
std::string to_csv_row(const EpochLog& log);

struct TransEConfig {
    int k = 100;
    int epochs = 50;
    double lr = 0.01;
    double margin = 1.0;
    std::uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const TransEConfig& c);

struct TransEEmbeddings {
    Matrix entity;    // |E| x k
    Matrix relation;  // |R| x k
};

double transe_distance(const TransEEmbeddings& emb, EntityId s, RelationId r, EntityId o);

// One hinge-loss SGD update on a (positive, negative) pair; returns the hinge
// value max(0, margin + d(pos) - d(neg)). Nothing moves when it is zero.
double transe_pair_step(TransEEmbeddings& emb, const Triple& positive, const Triple& negative, double margin,
                        double lr);

// Margin ranking with L2 distance, one corrupted triple per positive, entity
// rows renormalised to unit length after every epoch.
TransEEmbeddings pretrain_transe(std::span<const Triple> train, std::size_t num_entities, std::size_t num_relations,
                                 const TransEConfig& config);

void save_embeddings(const TransEEmbeddings& emb, std::uint64_t vocab_hash, const std::filesystem::path& path);

}  // namespace convmr
