#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "egam/model.hpp"

namespace egam {

// Feasible beats infeasible at any cost; otherwise lower cost wins. Ties keep `b`.
bool better_than(const SolutionCost& a, const SolutionCost& b);

struct InferenceOptions {
  EnvConfig env;
  std::size_t workers = 1;
  std::size_t chunk = 32;  // instances per encoded batch
};

// Argmax decoding; TSP starts at node 0.
Solution greedy_solve(const Policy& policy, const Instance& inst, const EnvConfig& env = {});
// Best of k sampled rollouts from one encoding. TSP starts are drawn uniformly.
Solution sample_solve(const Policy& policy, const Instance& inst, std::size_t k, std::uint64_t seed,
                      const EnvConfig& env = {});
// n samples on each of the first m dihedral transforms; the winner's sequence is
// re-costed on the original instance.
Solution augmented_solve(const Policy& policy, const Instance& inst, std::size_t m, std::size_t n,
                         std::uint64_t seed, const EnvConfig& env = {});

struct DecodeMode {
  enum class Kind { Greedy, Sample, Augmented } kind = Kind::Greedy;
  std::size_t samples = 1;        // K for sample, n for aug
  std::size_t augmentations = 1;  // m for aug
  std::string to_string() const;
};
// "greedy", "sample:K", "aug:MxN". Throws Error.
DecodeMode parse_mode(const std::string& text);

// Per-instance seeds are derived from (seed, index), so results do not depend on chunking.
std::vector<Solution> solve_dataset(const Policy& policy, const std::vector<Instance>& data, const DecodeMode& mode,
                                    std::uint64_t seed, const InferenceOptions& options = {});

struct Reference {
  double cost = 0.0;
  bool feasible = true;
  std::string method;
  std::vector<std::size_t> sequence;
};

struct Metrics {
  std::string method;
  std::string kind;
  std::size_t n = 0;
  std::string mode;
  double mean_cost = 0.0;
  // Mean of (C - C_ref) / C_ref over pairs where both are feasible; empty when undefined.
  std::optional<double> gap;
  std::size_t gap_pairs = 0;
  double infeasible_rate = 0.0;
  double wallclock_s = 0.0;
  std::uint64_t seed = 0;
  std::string checkpoint;
};

Metrics compute_metrics(const std::vector<SolutionCost>& costs, const std::vector<Reference>* refs);

Metrics evaluate_dataset(const Policy& policy, const std::vector<Instance>& data, const DecodeMode& mode,
                         std::uint64_t seed, const std::vector<Reference>* refs, const InferenceOptions& options = {});

std::string metrics_csv_header();
// Gap is written as a fraction; an undefined gap is written as "nan".
std::string metrics_csv_row(const Metrics& m);

// JSONL: {"index", "cost", "feasible", "method", "sequence"}.
std::string reference_to_json(std::size_t index, const Reference& r);
std::vector<Reference> read_references_file(const std::string& path);
void write_references_file(const std::string& path, const std::vector<Reference>& refs);

}  // namespace egam
