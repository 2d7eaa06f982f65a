#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "egam/attention.hpp"
#include "egam/problems.hpp"

namespace egam {

struct EgamConfig {
  std::size_t d_model = 128;
  std::size_t heads = 8;
  std::size_t d_key = 16;  // d_q = d_k = d_v
  std::size_t d_ff = 512;
  std::size_t encoder_layers = 4;
  std::size_t decoder_layers = 1;
  double clip = 10.0;
  bool node_only = false;
  bool directed = false;

  AttentionDims dims() const { return {d_model, heads, d_key, d_key, d_ff}; }
  void validate() const;  // throws Error
  // key=value lines, stable order; used for checkpoint headers and config files.
  std::string to_text() const;
  bool operator==(const EgamConfig&) const = default;
};

// Sets one field from its text form. Returns false for an unknown key; throws Error on a bad value.
bool set_config_field(EgamConfig& config, const std::string& key, const std::string& value);
EgamConfig parse_model_config(const std::string& text);

// Config value parsers; errors name the key.
std::size_t parse_size_field(const std::string& key, const std::string& value);
double parse_real_field(const std::string& key, const std::string& value);
bool parse_bool_field(const std::string& key, const std::string& value);

struct DecoderLayerParams {
  MhaParams node_node;
  MhaParams node_edge;  // unused when node_only
  FeedForwardParams ff;
};

// Precomputed per-encoding tensors reused at every decoding step.
struct Encoding {
  std::size_t batch = 0;
  std::size_t nodes = 0;
  Var node_emb;  // [B, N, d]
  Var edge_emb;  // [B, N, N, d] (node_only: the initial edge embeddings are not built)
  Var context_table;  // [B*N (+2 placeholders for TSP), d]
  struct LayerCache {
    Var nn_keys, nn_values;  // [B, N*h*d_k]
    Var ne_keys, ne_values;  // [B*N*N, h*d_k]
  };
  std::vector<LayerCache> layers;
  Var out_keys;  // [B*N*N, d], or [B*N, d] when node_only
};

enum class Decoding { Greedy, Sample };

// One decoding query for step_logits(): trajectory of encoding `b` sitting at `current`.
struct StepQuery {
  std::size_t b = 0;
  std::size_t current = DecodeState::kNone;
  std::size_t start = DecodeState::kNone;
  std::vector<double> scalars;
};

struct TrajectorySpec {
  std::size_t instance = 0;  // index into the encoded batch
  // TSP only: forced first node. Empty = the model chooses it with placeholder context.
  std::optional<std::size_t> start;
  std::uint64_t rng_seed = 0;
  // Teacher forcing: the decisions to replay (fixed-start nodes excluded).
  const std::vector<std::size_t>* forced = nullptr;
};

struct Rollout {
  std::vector<DecodeState> states;
  std::vector<double> log_prob;                 // Σ_t log p(π_t | π_<t), start term excluded
  std::vector<std::vector<double>> step_log_probs;
  // Per decoding call: the log-prob Var [active] and which trajectory each row belongs to.
  struct Step {
    Var log_prob;
    std::vector<std::size_t> trajectories;
  };
  std::vector<Step> steps;
};

class Policy {
 public:
  Policy() = default;
  Policy(const EgamConfig& config, ProblemKind kind, std::uint64_t seed);

  const EgamConfig& config() const { return config_; }
  ProblemKind kind() const { return kind_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  std::size_t node_dim() const { return node_feature_dim(kind_); }

  // Encodes a batch of same-size instances of this policy's kind.
  Encoding encode(Tape& tape, const std::vector<const Instance*>& batch) const;
  // Unclipped-then-clipped logits u [Q, N] for the queries; `mask` is [Q, N].
  Var step_logits(const Encoding& enc, const std::vector<StepQuery>& queries, const Mask& mask) const;

  // Decodes every trajectory in lockstep until termination.
  Rollout rollout(const Encoding& enc, const std::vector<const Instance*>& batch,
                  const std::vector<TrajectorySpec>& specs, Decoding mode) const;

 private:
  Var p(Tape& tape, Param* param) const { return tape.param(*param); }
  void build(std::uint64_t seed);

  EgamConfig config_;
  ProblemKind kind_ = ProblemKind::TSP;
  // ParamStore owns params; mutable pointers let a const Policy feed them to a tape.
  mutable ParamStore params_;
  Param *init_node_w_ = nullptr, *init_node_b_ = nullptr;
  Param *init_depot_w_ = nullptr, *init_depot_b_ = nullptr;
  Param *init_edge_w_ = nullptr, *init_edge_b_ = nullptr;
  std::vector<EncoderLayerParams> encoder_;
  Param *ctx_w_ = nullptr, *ctx_b_ = nullptr;
  Param *placeholder_cur_ = nullptr, *placeholder_start_ = nullptr;
  std::vector<DecoderLayerParams> decoder_;
  Param *out_q_ = nullptr, *out_k_ = nullptr;

 public:
  Policy(const Policy& other);
  Policy& operator=(const Policy& other);
  Policy(Policy&&) noexcept = default;
  Policy& operator=(Policy&&) noexcept = default;
};

struct Solution {
  std::vector<std::size_t> sequence;
  SolutionCost cost;
  double log_prob = 0.0;
  std::vector<double> step_log_probs;
};

Solution to_solution(const DecodeState& state, const Instance& inst, double log_prob,
                     std::vector<double> step_log_probs, const EnvConfig& env = {});

// Single-instance conveniences (own tape, no gradients kept).
Solution rollout_one(const Policy& policy, const Instance& inst, Decoding mode, std::uint64_t rng_seed = 0,
                     std::optional<std::size_t> tsp_start = std::size_t{0}, const EnvConfig& env = {});
// Σ log p of `sequence` replayed with teacher forcing. For TSP the first entry is the start;
// its term is excluded unless `model_start` is set.
double log_prob_of_tour(const Policy& policy, const Instance& inst, const std::vector<std::size_t>& sequence,
                        bool model_start = false);
// Same, but on a caller-owned tape so gradients can flow.
Var log_prob_of_tour_var(Tape& tape, const Policy& policy, const Instance& inst,
                         const std::vector<std::size_t>& sequence, bool model_start = false);

// Probability rows [Q, N] for step queries on one instance (tests / probability-law checks).
Tensor decoder_probabilities(const Policy& policy, const Instance& inst, const std::vector<DecodeState>& states);

// Binary checkpoint: magic, format version, config echo, kind, F_n, F_e, named tensors.
void save_checkpoint(const Policy& policy, const std::string& path);
std::string checkpoint_bytes(const Policy& policy);
Policy load_checkpoint(const std::string& path);
Policy load_checkpoint_bytes(const std::string& bytes);

}  // namespace egam
