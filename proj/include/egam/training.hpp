#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "egam/inference.hpp"
#include "egam/model.hpp"

namespace egam {

struct TrainConfig {
  ProblemKind kind = ProblemKind::TSP;
  std::size_t nodes = 50;
  std::size_t batch_size = 128;
  std::size_t batches_per_epoch = 2500;
  std::size_t epochs = 100;
  double lr = 1e-4;
  // The last `lr_decay_fraction` of epochs (rounded, at least one when positive) run at lr * lr_decay.
  double lr_decay = 0.1;
  double lr_decay_fraction = 0.1;
  std::size_t augmentations = 4;  // m
  std::size_t samples = 4;        // n per augmentation
  std::uint64_t seed = 1;
  std::size_t checkpoint_every = 1;  // epochs; 0 = final checkpoint only
  std::size_t validation_size = 0;   // greedy validation instances evaluated after every epoch
  std::size_t chunk = 16;            // source instances per tape
  std::size_t workers = 1;           // 0 = hardware threads

  void validate() const;  // throws Error
  double lr_at(std::size_t epoch) const;  // epoch counts from 0
};

// Everything a run needs; the flat config file lists every field of all three.
struct RunConfig {
  TrainConfig train;
  EgamConfig model;
  EnvConfig env;

  std::string to_text() const;
  void validate() const;
};

// "toy", "small" or "paper". Throws Error for anything else.
RunConfig profile(const std::string& name);
// Applies key=value lines on top of `config`. '#' starts a comment. Unknown keys throw.
void apply_config_text(RunConfig& config, const std::string& text);
// Single field; returns false for an unknown key.
bool set_run_field(RunConfig& config, const std::string& key, const std::string& value);

// Mean of all m x n costs.
double compute_baseline(std::span<const double> costs);

// scale * (C - b(s)) for consecutive groups of `per_source` costs, b(s) the group mean.
// Throws NumericalError on a non-finite advantage.
std::vector<double> reinforce_weights(std::span<const double> costs, std::size_t per_source, double scale,
                                      std::vector<double>* baselines = nullptr);

// Sum over decoding steps of w[trajectory] * log p(step). Backpropagating this scalar
// accumulates sum_t w_t * grad log p(pi_t).
Var reinforce_surrogate(Tape& tape, const Rollout& rollout, std::span<const double> weights);

// Sampled rollouts for a group of source instances, m transforms x n samples each.
struct BatchRollouts {
  std::size_t sources = 0;
  std::size_t augmentations = 0;
  std::size_t samples = 0;
  std::vector<double> costs;  // [source][transform][sample], costed on the transformed copy
  std::vector<double> log_probs;
  std::vector<std::uint8_t> feasible;
  std::vector<double> baselines;  // per source
  std::vector<std::vector<std::size_t>> sequences;

  std::size_t per_source() const { return augmentations * samples; }
  // C - b(s) for every trajectory.
  std::vector<double> advantages() const;
};

// What a training step draws from its RNG: one plan per source instance.
struct SourcePlan {
  Instance instance;
  std::vector<int> transforms;  // 0 first, then distinct draws from 1..7
  std::vector<std::optional<std::size_t>> starts;  // [transform][sample], TSP only
  std::vector<std::uint64_t> rng_seeds;
};

std::vector<SourcePlan> draw_batch(const TrainConfig& config, const EnvConfig& env, std::uint64_t batch_seed);

// Samples the plans on `tape`, fills `out`, and backpropagates
// scale * sum (C - b) grad log p into the tape's gradient sink.
void reinforce_chunk(Tape& tape, const Policy& policy, std::span<const SourcePlan> plans, std::size_t samples,
                     double scale, const EnvConfig& env, BatchRollouts& out);

struct BatchStats {
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double mean_cost = 0.0;
  double baseline = 0.0;
  double grad_norm = 0.0;
  double feasible_rate = 0.0;
  double wallclock_s = 0.0;
  bool skipped = false;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_cost = 0.0;
  double mean_baseline = 0.0;
  double grad_norm = 0.0;
  double feasible_rate = 0.0;
  std::size_t skipped = 0;
  std::optional<double> validation_cost;
};

std::string train_log_header();
std::string train_log_row(const BatchStats& s);

class Trainer {
 public:
  explicit Trainer(const RunConfig& config);
  Trainer(const RunConfig& config, Policy policy);

  const RunConfig& config() const { return config_; }
  Policy& policy() { return policy_; }
  const Policy& policy() const { return policy_; }
  std::size_t skipped_batches() const { return skipped_; }
  const std::vector<Instance>& validation_set() const { return validation_; }

  // Deterministic in (seed, epoch, batch) and independent of the worker count.
  BatchStats train_batch(std::size_t epoch, std::size_t batch);
  EpochStats train_epoch(std::size_t epoch, const std::function<void(const BatchStats&)>& on_batch = {});
  double validate() const;

 private:
  RunConfig config_;
  Policy policy_;
  Adam adam_;
  std::vector<Instance> validation_;
  std::size_t skipped_ = 0;
  double started_ = 0.0;
};

struct TrainOutputs {
  std::string checkpoint_dir;  // empty = no checkpoints
  std::string log_path;        // empty = no CSV log
  std::ostream* progress = nullptr;
};

// Full run: every epoch, the CSV log is rewritten atomically and checkpoints follow the cadence.
std::vector<EpochStats> train(Trainer& trainer, const TrainOutputs& outputs);

}  // namespace egam
