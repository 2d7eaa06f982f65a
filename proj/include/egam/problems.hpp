#pragma once

#include <array>
#include <cstdint>
#include <initializer_list>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "egam/tensor.hpp"

namespace egam {

enum class ProblemKind { TSP, CVRP, PCTSP, TSPTW, VRPTW, TSPDL };

std::string kind_name(ProblemKind kind);
ProblemKind parse_kind(const std::string& name);  // throws Error

// Depot kinds start and end at node 0 and may return to it mid-route.
bool has_depot_returns(ProblemKind kind);
// Node 0 is the fixed first node (depot or port) and gets its own embedding.
bool has_depot(ProblemKind kind);
std::size_t node_feature_dim(ProblemKind kind);
constexpr std::size_t kEdgeFeatureDim = 1;
// Number of scalar context components appended to the current-node embedding.
std::size_t context_scalar_dim(ProblemKind kind);

class InvalidTransition : public Error {
 public:
  using Error::Error;
};

using Point = std::array<double, 2>;

struct Instance {
  ProblemKind kind = ProblemKind::TSP;
  std::uint64_t seed = 0;
  std::vector<Point> coords;
  std::vector<double> demand;            // CVRP: normalized by capacity. TSPDL: integer units
  std::vector<std::array<double, 2>> tw;  // TSPTW / VRPTW
  std::vector<double> draft;             // TSPDL
  std::vector<double> prize;             // PCTSP
  std::vector<double> penalty;           // PCTSP
  double threshold = 0.0;                // PCTSP

  std::size_t size() const { return coords.size(); }
  double dist(std::size_t i, std::size_t j) const;
  // TSPTW/VRPTW time scale used to normalize window features and the clock context.
  double time_scale() const;
  double total_demand() const;
};

struct EnvConfig {
  double beta = 10.0;           // violation weight for TSPTW / TSPDL
  double vrptw_horizon = 2.0;
  double tsptw_slack = 0.2;     // u, v ~ U(0, slack * mean arrival]
  double tspdl_hard_frac = 0.5; // fraction of ports with a binding draft
};

// Mixes the parts through std::seed_seq into one 64-bit seed.
std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts);

Instance generate_instance(ProblemKind kind, std::size_t n, std::uint64_t seed, const EnvConfig& env = {});
// Instance i is generate_instance(kind, n, derive_seed({seed, i})).
std::vector<Instance> generate_dataset(ProblemKind kind, std::size_t n, std::size_t count, std::uint64_t seed,
                                       const EnvConfig& env = {});
void validate_instance(const Instance& inst);  // throws Error on schema violations

// Node features [N, F_n] and edge features [N, N, 1] (Euclidean length, 0 on the diagonal).
Tensor node_features(const Instance& inst);
Tensor edge_features(const Instance& inst);

struct DecodeState {
  std::vector<std::uint8_t> visited;
  std::vector<std::size_t> sequence;
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t start = kNone;
  std::size_t current = kNone;
  std::size_t served = 0;  // non-depot nodes visited
  double length = 0.0;
  double clock = 0.0;
  double load = 0.0;       // CVRP remaining capacity, TSPDL cargo on board
  double prize = 0.0;
  int n_out = 0;
  double t_out = 0.0;
  double d_out = 0.0;
  bool terminated = false;
};

// TSP starts empty (the first choice is the start node); every other kind starts at node 0.
DecodeState initial_state(const Instance& inst);
// Throws InvalidTransition if `node` is masked or the state is terminated.
void update_state(DecodeState& state, std::size_t node, const Instance& inst);
// 1 = infeasible. Throws Error if every node ends up masked.
std::vector<std::uint8_t> feasible_mask(const DecodeState& state, const Instance& inst);
// Scalar context components, normalized to [0, 1] (empty for TSP).
std::vector<double> context_scalars(const DecodeState& state, const Instance& inst);
// Upper bound on decisions per rollout.
std::size_t step_budget(const Instance& inst);

struct SolutionCost {
  double length = 0.0;
  double cost = 0.0;
  bool feasible = true;
  int n_out = 0;
  double t_out = 0.0;
  double d_out = 0.0;
  std::size_t unvisited = 0;
};

// Replays `sequence` from scratch through update_state. Throws InvalidTransition on a
// masked step and Error on a sequence that ends before termination.
SolutionCost solution_cost(const Instance& inst, const std::vector<std::size_t>& sequence,
                           const EnvConfig& env = {});
SolutionCost state_cost(const DecodeState& state, const Instance& inst, const EnvConfig& env = {});

// k in 0..7: k = 4 f + r, reflect across y = x when f = 1, then r quarter turns about the centre.
Point dihedral_point(Point p, int k);
Instance dihedral_transform(const Instance& inst, int k);

// JSONL, one instance per line.
std::string instance_to_json(const Instance& inst);
Instance instance_from_json(const std::string& line);  // validates
std::vector<Instance> read_dataset(std::istream& in);
void write_dataset(std::ostream& out, const std::vector<Instance>& data);
std::vector<Instance> read_dataset_file(const std::string& path);
void write_dataset_file(const std::string& path, const std::vector<Instance>& data);

// Writes to a temporary sibling then renames over `path`.
void atomic_write(const std::string& path, const std::string& contents);

}  // namespace egam
