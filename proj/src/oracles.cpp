#include "egam/oracles.hpp"

#include <algorithm>
#include <limits>

#include "egam/parallel.hpp"

namespace egam {

Solution held_karp(const Instance& inst) {
  if (inst.kind != ProblemKind::TSP) throw Error("held_karp expects a TSP instance");
  const std::size_t n = inst.size();
  if (n == 0) throw Error("held_karp: empty instance");
  if (n > kHeldKarpMaxNodes) throw Error("held_karp supports at most " + std::to_string(kHeldKarpMaxNodes) + " nodes");
  std::vector<std::size_t> tour{0};
  if (n > 1) {
    // Subsets of nodes 1..n-1; dp[S][j] = shortest path 0 -> ... -> j covering S (j in S),
    // accumulated left to right exactly like update_state.
    const std::size_t m = n - 1, full = (std::size_t{1} << m) - 1;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> dp((full + 1) * m, inf);
    std::vector<std::uint8_t> parent((full + 1) * m, 0);
    for (std::size_t j = 0; j < m; ++j) dp[(std::size_t{1} << j) * m + j] = inst.dist(0, j + 1);
    for (std::size_t S = 1; S <= full; ++S)
      for (std::size_t j = 0; j < m; ++j) {
        if (!(S >> j & 1)) continue;
        const double base = dp[S * m + j];
        if (base == inf) continue;
        for (std::size_t k = 0; k < m; ++k) {
          if (S >> k & 1) continue;
          const std::size_t T = S | (std::size_t{1} << k);
          const double v = base + inst.dist(j + 1, k + 1);
          if (v < dp[T * m + k]) {
            dp[T * m + k] = v;
            parent[T * m + k] = static_cast<std::uint8_t>(j);
          }
        }
      }
    std::size_t last = 0;
    double best = inf;
    for (std::size_t j = 0; j < m; ++j) {
      const double v = dp[full * m + j] + inst.dist(j + 1, 0);
      if (v < best) {
        best = v;
        last = j;
      }
    }
    std::vector<std::size_t> path;
    for (std::size_t S = full, j = last;;) {
      path.push_back(j + 1);
      const std::size_t prev = S == (std::size_t{1} << j) ? m : parent[S * m + j];
      S &= ~(std::size_t{1} << j);
      if (prev == m) break;
      j = prev;
    }
    tour.insert(tour.end(), path.rbegin(), path.rend());
  }
  Solution s;
  s.sequence = tour;
  s.cost = solution_cost(inst, tour);
  return s;
}

namespace {

struct Search {
  const Instance& inst;
  const EnvConfig& env;
  ExhaustiveResult result;
  bool have = false;

  // Lower bound on the final cost of any completion of `s`.
  double bound(const DecodeState& s) const {
    if (inst.kind != ProblemKind::VRPTW) return s.length;
    // A customer whose window is already closed from here stays unreachable: the
    // clock never decreases and travel obeys the triangle inequality.
    double lost = 0.0;
    for (std::size_t i = 1; i < inst.size(); ++i)
      if (!s.visited[i] && s.clock + inst.dist(s.current, i) > inst.tw[i][1]) lost += 1.0;
    return lost;
  }

  void visit(const DecodeState& s) {
    if (s.terminated) {
      ++result.leaves;
      const SolutionCost c = state_cost(s, inst, env);
      if (!have || better_than(c, result.best.cost)) {
        result.best.sequence = s.sequence;
        result.best.cost = c;
        have = true;
      }
      return;
    }
    if (have && result.best.cost.feasible && bound(s) >= result.best.cost.cost) return;
    const auto mask = feasible_mask(s, inst);
    for (std::size_t i = 0; i < inst.size(); ++i) {
      if (mask[i]) continue;
      if (inst.kind == ProblemKind::TSP && s.current == DecodeState::kNone && i != 0) continue;
      DecodeState next = s;
      update_state(next, i, inst);
      visit(next);
    }
  }
};

}  // namespace

ExhaustiveResult exhaustive_constrained(const Instance& inst, const EnvConfig& env) {
  if (inst.size() > kExhaustiveMaxNodes)
    throw Error("exhaustive search supports at most " + std::to_string(kExhaustiveMaxNodes) + " nodes");
  Search search{inst, env, {}, false};
  search.visit(initial_state(inst));
  if (!search.have) throw Error("exhaustive search found no complete sequence");
  search.result.feasible_found = search.result.best.cost.feasible;
  return search.result;
}

Solution nearest_neighbor(const Instance& inst, const EnvConfig& env) {
  DecodeState s = initial_state(inst);
  if (inst.kind == ProblemKind::TSP) update_state(s, 0, inst);
  std::size_t steps = 0;
  while (!s.terminated) {
    if (++steps > step_budget(inst)) throw Error("nearest neighbor exceeded the step budget");
    const auto mask = feasible_mask(s, inst);
    std::size_t pick = inst.size();
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < inst.size(); ++i) {
      if (mask[i]) continue;
      const double d = inst.dist(s.current, i);
      if (d < best) {
        best = d;
        pick = i;
      }
    }
    update_state(s, pick, inst);
  }
  return to_solution(s, inst, 0.0, {}, env);
}

Reference reference_solution(const Instance& inst, const std::string& method, const EnvConfig& env) {
  std::string m = method;
  if (m == "auto") {
    if (inst.kind == ProblemKind::TSP && inst.size() <= kHeldKarpMaxNodes) m = "held_karp";
    else if (inst.size() <= kExhaustiveMaxNodes) m = "exhaustive";
    else m = "nearest_neighbor";
  }
  Solution s;
  if (m == "held_karp") s = held_karp(inst);
  else if (m == "exhaustive") s = exhaustive_constrained(inst, env).best;
  else if (m == "nearest_neighbor") s = nearest_neighbor(inst, env);
  else throw Error("unknown reference method '" + method + "'");
  return {s.cost.cost, s.cost.feasible, m, s.sequence};
}

std::vector<Reference> reference_solutions(const std::vector<Instance>& data, const std::string& method,
                                           const EnvConfig& env, std::size_t workers) {
  std::vector<Reference> out(data.size());
  parallel_for(data.size(), workers, [&](std::size_t i) { out[i] = reference_solution(data[i], method, env); });
  return out;
}

}  // namespace egam
