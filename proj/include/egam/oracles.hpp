#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "egam/inference.hpp"
#include "egam/model.hpp"

namespace egam {

constexpr std::size_t kHeldKarpMaxNodes = 16;
constexpr std::size_t kExhaustiveMaxNodes = 9;

// Optimal closed TSP tour starting at node 0 by dynamic programming over subsets.
Solution held_karp(const Instance& inst);

struct ExhaustiveResult {
  Solution best;        // lowest-cost feasible solution, or lowest-cost overall if none is feasible
  bool feasible_found = false;
  std::size_t leaves = 0;  // complete sequences evaluated
};

// Depth-first enumeration over update_state / feasible_mask with cost bounding.
// TSP fixes the start at node 0.
ExhaustiveResult exhaustive_constrained(const Instance& inst, const EnvConfig& env = {});

// Always moves to the nearest unmasked node (lowest index on ties); TSP starts at node 0.
Solution nearest_neighbor(const Instance& inst, const EnvConfig& env = {});

// "auto" picks held_karp for TSP up to 16 nodes, exhaustive up to 9 nodes, else nearest_neighbor.
// Other methods: "held_karp", "exhaustive", "nearest_neighbor".
Reference reference_solution(const Instance& inst, const std::string& method = "auto", const EnvConfig& env = {});
std::vector<Reference> reference_solutions(const std::vector<Instance>& data, const std::string& method = "auto",
                                           const EnvConfig& env = {}, std::size_t workers = 1);

}  // namespace egam
