#pragma once
// Relation encoders, the convolutional triple score and model parameters.
//
// Score of (s, H, o): T = [v_s, v_o, v_r'] is k x 3, every 1x3 filter slides
// down its rows, relu is applied, the tau feature maps are concatenated
// (filter-major) and dotted with score_w. Lower scores mean more plausible
// triples: the loss pushes valid triples towards f -> -inf.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "convmr/autodiff.hpp"
#include "convmr/kg_data.hpp"

namespace convmr {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Tape = ad::Tape<double>;
using Var = ad::Var<double>;

enum class EncoderKind { attn_average, average, gru, bigru };

std::string_view to_string(EncoderKind kind);
EncoderKind parse_encoder_kind(std::string_view name);  // throws std::invalid_argument

enum class InitStrategy { random, pretrained };

std::string_view to_string(InitStrategy s);
InitStrategy parse_init_strategy(std::string_view name);

// Cho et al. GRU cell; input and hidden size are both k, biases are k x 1.
//   z = sigmoid(w_z x + u_z h + b_z)
//   r = sigmoid(w_r x + u_r h + b_r)
//   n = tanh(w_n x + u_n (r . h) + b_n)
//   h' = (1 - z) . n + z . h
struct GruParams {
    Matrix w_z, u_z, b_z;
    Matrix w_r, u_r, b_r;
    Matrix w_n, u_n, b_n;

    static GruParams zeros(int k);
};

struct ModelParams {
    int k = 0;
    int tau = 0;
    EncoderKind encoder = EncoderKind::attn_average;
    // Divide the attention-weighted sum by N as the encoder is written; off
    // gives a plain convex combination.
    bool attn_divide_by_n = true;

    Matrix entity;    // |E| x k
    Matrix relation;  // |R| x k
    Matrix attn_w;    // 1 x k
    Matrix filters;   // tau x 3
    Matrix score_w;   // tau*k x 1
    std::optional<GruParams> gru_forward;
    std::optional<GruParams> gru_backward;  // bigru only

    std::size_t num_entities() const { return static_cast<std::size_t>(entity.rows()); }
    std::size_t num_relations() const { return static_cast<std::size_t>(relation.rows()); }

    // Every parameter block except the two embedding tables, in a fixed order.
    std::vector<std::pair<std::string, Matrix*>> dense_blocks();
    std::vector<std::pair<std::string, const Matrix*>> dense_blocks() const;
    // Embedding tables followed by dense_blocks().
    std::vector<std::pair<std::string, const Matrix*>> named_tensors() const;

    // Throws std::invalid_argument on inconsistent shapes or non-finite values.
    void validate() const;
};

bool operator==(const ModelParams& a, const ModelParams& b);

struct InitOptions {
    InitStrategy strategy = InitStrategy::random;
    std::uint64_t seed = 1;
    int k = 100;
    int tau = 64;
    EncoderKind encoder = EncoderKind::attn_average;
    bool attn_divide_by_n = true;
    std::size_t num_entities = 0;
    std::size_t num_relations = 0;
    std::filesystem::path pretrained_path;  // pretrained strategy only
};

// Uniform in [-6/sqrt(k), 6/sqrt(k)] for everything except score_w, which
// starts at zero. Pretrained init takes the embedding tables from a tensor file.
ModelParams init_params(const InitOptions& options);

double init_bound(int k);

// Gradients of one loss evaluation: sparse rows for the embedding tables,
// dense matrices parallel to ModelParams::dense_blocks().
struct Gradients {
    std::map<EntityId, Vector> entity_rows;
    std::map<RelationId, Vector> relation_rows;
    std::vector<Matrix> dense;

    // Adds `other` into this; dense blocks are adopted when this is empty.
    void accumulate(const Gradients& other);
};

// Exposes model parameters as tape variables. In the default (sparse) mode
// each embedding row becomes its own leaf the first time it is used, so only
// touched rows carry gradients. In dense mode the caller supplies variables
// for every tensor (named_tensors() order) and rows are read via lookup().
class ParamBinding {
public:
    ParamBinding(Tape& tape, const ModelParams& params);
    ParamBinding(Tape& tape, const ModelParams& params, std::span<const Var> tensors);

    Tape& tape() { return tape_; }
    const ModelParams& params() const { return params_; }

    Var entity(EntityId id);
    Var relation(RelationId id);
    Var attn_w() const { return dense_[0]; }
    Var filters() const { return dense_[1]; }
    Var score_w() const { return dense_[2]; }

    struct GruVars {
        Var w_z, u_z, b_z, w_r, u_r, b_r, w_n, u_n, b_n;
    };
    const GruVars& gru(bool backward_direction) const;

    // Call after tape.backward().
    Gradients gradients() const;

private:
    Tape& tape_;
    const ModelParams& params_;
    std::optional<Var> entity_table_;
    std::optional<Var> relation_table_;
    std::map<EntityId, Var> entity_rows_;
    std::map<RelationId, Var> relation_rows_;
    std::vector<Var> dense_;
    std::optional<GruVars> gru_forward_;
    std::optional<GruVars> gru_backward_;
};

struct AttnEncoding {
    Var vector;   // k x 1
    Var weights;  // 1 x N
};

AttnEncoding encode_attn_average(std::span<const RelationId> relations, ParamBinding& binding);
Var encode_average(std::span<const RelationId> relations, ParamBinding& binding);
Var encode_gru(std::span<const RelationId> relations, ParamBinding& binding);
Var encode_bigru(std::span<const RelationId> relations, ParamBinding& binding);
Var encode_relations(EncoderKind kind, std::span<const RelationId> relations, ParamBinding& binding);

// Scalar score node f(s, H, o) using the binding's encoder kind.
Var score(EntityId s, std::span<const RelationId> relations, EntityId o, ParamBinding& binding);

// Tape-free evaluation.
Vector encode_value(std::span<const RelationId> relations, const ModelParams& params);
Vector attention_weights(std::span<const RelationId> relations, const ModelParams& params);

// Straight-line evaluation of the convolutional score on plain vectors.
// Accumulates filter-major, row-minor: sum_f sum_i w[f*k+i] * relu((w_f0*s_i + w_f1*o_i) + w_f2*r_i).
double conv_score(const ModelParams& params, const double* subject, const double* object, const double* relation);
double score_value(EntityId s, std::span<const RelationId> relations, EntityId o, const ModelParams& params);

// Checkpoint container
//   bytes 0..7   magic "CONVMRCK"
//   bytes 8..11  format version, uint32 little endian
//   bytes 12..19 header length in bytes, uint64 little endian
//   header       UTF-8 JSON: format_version, k, tau, encoder_kind,
//                attn_divide_by_n, vocab_hash (16 hex digits), tensors[{name, rows, cols}]
//   payload      each tensor in header order, row-major float64 little endian
inline constexpr std::uint32_t checkpoint_format_version = 1;

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TensorFile {
    int k = 0;
    int tau = 0;
    std::string encoder_kind;
    bool attn_divide_by_n = true;
    std::uint64_t vocab_hash = 0;
    std::vector<std::pair<std::string, Matrix>> tensors;

    const Matrix* find(std::string_view name) const;
};

void write_tensor_file(const TensorFile& file, const std::filesystem::path& path);
TensorFile read_tensor_file(const std::filesystem::path& path);

void save_checkpoint(const ModelParams& params, std::uint64_t vocab_hash, const std::filesystem::path& path);

struct LoadedCheckpoint {
    ModelParams params;
    std::uint64_t vocab_hash = 0;
    bool vocab_hash_matches = true;
};

// A vocab-hash mismatch is reported through `vocab_hash_matches` and a
// warning on stderr; it does not fail the load.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path,
                                 std::optional<std::uint64_t> expected_vocab_hash = std::nullopt);

}  // namespace convmr
