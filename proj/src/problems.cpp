#include "egam/problems.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include <unistd.h>

#include "json.hpp"

namespace egam {

namespace {

constexpr double kTol = 1e-9;

struct KindInfo {
  ProblemKind kind;
  const char* name;
};
constexpr KindInfo kKinds[] = {{ProblemKind::TSP, "tsp"},     {ProblemKind::CVRP, "cvrp"},
                               {ProblemKind::PCTSP, "pctsp"}, {ProblemKind::TSPTW, "tsptw"},
                               {ProblemKind::VRPTW, "vrptw"}, {ProblemKind::TSPDL, "tspdl"}};

std::size_t customers(const Instance& inst) { return inst.size() - 1; }

bool all_customers_served(const DecodeState& s, const Instance& inst) { return s.served == customers(inst); }

// Closes a visit-all tour back to its start once every node has been visited.
void close_tour(DecodeState& s, const Instance& inst) {
  const double d = inst.dist(s.current, s.start);
  s.length += d;
  if (inst.kind == ProblemKind::TSPTW) {
    s.clock += d;
    const double b = inst.tw[s.start][1];
    if (s.clock > b) {
      s.n_out += 1;
      s.t_out += s.clock - b;
    }
  }
  s.terminated = true;
}

}  // namespace

std::string kind_name(ProblemKind kind) {
  for (const auto& k : kKinds)
    if (k.kind == kind) return k.name;
  throw Error("unknown problem kind");
}

ProblemKind parse_kind(const std::string& name) {
  for (const auto& k : kKinds)
    if (name == k.name) return k.kind;
  throw Error("unknown problem kind '" + name + "'");
}

bool has_depot_returns(ProblemKind kind) {
  return kind == ProblemKind::CVRP || kind == ProblemKind::PCTSP || kind == ProblemKind::VRPTW;
}

bool has_depot(ProblemKind kind) { return kind != ProblemKind::TSP; }

std::size_t node_feature_dim(ProblemKind kind) {
  switch (kind) {
    case ProblemKind::TSP: return 2;
    case ProblemKind::CVRP: return 3;
    default: return 4;
  }
}

std::size_t context_scalar_dim(ProblemKind kind) { return kind == ProblemKind::TSP ? 0 : 1; }

double Instance::dist(std::size_t i, std::size_t j) const {
  const double dx = coords[i][0] - coords[j][0];
  const double dy = coords[i][1] - coords[j][1];
  return std::sqrt(dx * dx + dy * dy);
}

double Instance::time_scale() const {
  double h = 0.0;
  for (std::size_t i = 1; i < tw.size(); ++i) h = std::max(h, tw[i][1]);
  return h > 0.0 ? h : 1.0;
}

double Instance::total_demand() const { return std::accumulate(demand.begin(), demand.end(), 0.0); }

std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t(out[0]) << 32) | out[1];
}

std::vector<Instance> generate_dataset(ProblemKind kind, std::size_t n, std::size_t count, std::uint64_t seed,
                                       const EnvConfig& env) {
  std::vector<Instance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_instance(kind, n, derive_seed({seed, i}), env));
  return out;
}

Instance generate_instance(ProblemKind kind, std::size_t n, std::uint64_t seed, const EnvConfig& env) {
  if (n < 2) throw Error("instance size must be at least 2");
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(kind) + 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Instance inst;
  inst.kind = kind;
  inst.seed = seed;
  inst.coords.resize(n);
  for (auto& p : inst.coords) {
    p[0] = unit(rng);
    p[1] = unit(rng);
  }

  switch (kind) {
    case ProblemKind::TSP: break;
    case ProblemKind::CVRP: {
      const double cap = n - 1 <= 10 ? 20.0 : n - 1 <= 20 ? 30.0 : n - 1 <= 50 ? 40.0 : 50.0;
      std::uniform_int_distribution<int> d(1, 9);
      inst.demand.assign(n, 0.0);
      for (std::size_t i = 1; i < n; ++i) inst.demand[i] = d(rng) / cap;
      break;
    }
    case ProblemKind::PCTSP: {
      const double max_len = n - 1 <= 20 ? 2.0 : n - 1 <= 50 ? 3.0 : 4.0;
      inst.threshold = 1.0;
      inst.prize.assign(n, 0.0);
      inst.penalty.assign(n, 0.0);
      do {
        for (std::size_t i = 1; i < n; ++i) {
          inst.prize[i] = unit(rng) * 4.0 / static_cast<double>(n - 1);
          inst.penalty[i] = unit(rng) * max_len * 3.0 / static_cast<double>(n - 1);
        }
      } while (std::accumulate(inst.prize.begin(), inst.prize.end(), 0.0) < inst.threshold);
      break;
    }
    case ProblemKind::TSPTW: {
      std::vector<std::size_t> order(n - 1);
      std::iota(order.begin(), order.end(), 1);
      std::shuffle(order.begin(), order.end(), rng);
      std::vector<double> arrival(n, 0.0);
      double t = 0.0, sum = 0.0;
      std::size_t prev = 0;
      for (auto i : order) {
        t += inst.dist(prev, i);
        arrival[i] = t;
        sum += t;
        prev = i;
      }
      const double spread = env.tsptw_slack * sum / static_cast<double>(n - 1);
      std::uniform_real_distribution<double> slack(0.0, spread);
      inst.tw.assign(n, {0.0, 0.0});
      double latest = 0.0;
      for (std::size_t i = 1; i < n; ++i) {
        const double u = slack(rng), v = slack(rng);
        inst.tw[i] = {std::max(0.0, arrival[i] - u), arrival[i] + v};
        latest = std::max(latest, inst.tw[i][1]);
      }
      inst.tw[0] = {0.0, latest + 2.0 * static_cast<double>(n)};
      break;
    }
    case ProblemKind::VRPTW: {
      const double h = env.vrptw_horizon;
      inst.tw.assign(n, {0.0, 0.0});
      for (std::size_t i = 1; i < n; ++i) {
        const double w = (0.1 + 0.2 * unit(rng)) * h;
        const double a = unit(rng) * (h - w);
        inst.tw[i] = {a, std::max(a + w, inst.dist(0, i))};
      }
      inst.tw[0] = {0.0, h + 2.0 * static_cast<double>(n)};
      break;
    }
    case ProblemKind::TSPDL: {
      const double total = static_cast<double>(n - 1);
      inst.demand.assign(n, 1.0);
      inst.demand[0] = 0.0;
      inst.draft.assign(n, total);
      std::uniform_int_distribution<int> draft(1, static_cast<int>(n - 1));
      for (std::size_t i = 1; i < n; ++i)
        if (unit(rng) < env.tspdl_hard_frac) inst.draft[i] = draft(rng);
      std::vector<std::size_t> order(n - 1);
      std::iota(order.begin(), order.end(), 1);
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return inst.draft[a] > inst.draft[b]; });
      // The k-th port served in descending-draft order arrives carrying total - k units.
      for (std::size_t k = 0; k < order.size(); ++k)
        inst.draft[order[k]] = std::max(inst.draft[order[k]], total - static_cast<double>(k));
      break;
    }
  }
  return inst;
}

void validate_instance(const Instance& inst) {
  const std::size_t n = inst.size();
  if (n < 2) throw Error("instance needs at least 2 nodes");
  for (const auto& p : inst.coords)
    if (!(p[0] >= 0.0 && p[0] <= 1.0 && p[1] >= 0.0 && p[1] <= 1.0))
      throw Error("coordinates must lie in the unit square");
  auto need = [&](bool ok, const char* field) {
    if (!ok) throw Error(std::string("field '") + field + "' missing or wrong length for kind " + kind_name(inst.kind));
  };
  auto forbid = [&](bool present, const char* field) {
    if (present) throw Error(std::string("field '") + field + "' not allowed for kind " + kind_name(inst.kind));
  };
  const bool uses_demand = inst.kind == ProblemKind::CVRP || inst.kind == ProblemKind::TSPDL;
  const bool uses_tw = inst.kind == ProblemKind::TSPTW || inst.kind == ProblemKind::VRPTW;
  const bool pctsp = inst.kind == ProblemKind::PCTSP;
  if (uses_demand) need(inst.demand.size() == n, "demand"); else forbid(!inst.demand.empty(), "demand");
  if (uses_tw) need(inst.tw.size() == n, "tw"); else forbid(!inst.tw.empty(), "tw");
  if (inst.kind == ProblemKind::TSPDL) need(inst.draft.size() == n, "draft"); else forbid(!inst.draft.empty(), "draft");
  if (pctsp) {
    need(inst.prize.size() == n, "prize");
    need(inst.penalty.size() == n, "penalty");
  } else {
    forbid(!inst.prize.empty(), "prize");
    forbid(!inst.penalty.empty(), "penalty");
    forbid(inst.threshold != 0.0, "threshold");
  }
  for (double d : inst.demand)
    if (!(d >= 0.0)) throw Error("demands must be non-negative");
  if (inst.kind == ProblemKind::CVRP)
    for (double d : inst.demand)
      if (d > 1.0 + kTol) throw Error("CVRP demand exceeds vehicle capacity");
  for (const auto& w : inst.tw)
    if (!(w[0] >= 0.0 && w[1] >= w[0])) throw Error("time windows must satisfy 0 <= a <= b");
  if (inst.kind == ProblemKind::TSPDL) {
    for (std::size_t i = 0; i < n; ++i)
      if (!(inst.draft[i] > 0.0)) throw Error("draft limits must be positive");
  }
  if (pctsp) {
    if (!(inst.threshold > 0.0)) throw Error("PCTSP threshold must be positive");
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!(inst.prize[i] >= 0.0 && inst.penalty[i] >= 0.0)) throw Error("prizes and penalties must be non-negative");
      total += inst.prize[i];
    }
    if (total < inst.threshold - kTol) throw Error("total prize below threshold");
  }
}

Tensor node_features(const Instance& inst) {
  const std::size_t n = inst.size(), f = node_feature_dim(inst.kind);
  Tensor out({n, f});
  const double total = inst.kind == ProblemKind::TSPDL ? std::max(inst.total_demand(), 1.0) : 1.0;
  const double horizon = inst.time_scale();
  for (std::size_t i = 0; i < n; ++i) {
    Real* row = out.ptr() + i * f;
    row[0] = static_cast<Real>(inst.coords[i][0]);
    row[1] = static_cast<Real>(inst.coords[i][1]);
    switch (inst.kind) {
      case ProblemKind::TSP: break;
      case ProblemKind::CVRP: row[2] = static_cast<Real>(inst.demand[i]); break;
      case ProblemKind::PCTSP:
        row[2] = static_cast<Real>(inst.prize[i]);
        row[3] = static_cast<Real>(inst.penalty[i]);
        break;
      case ProblemKind::TSPTW:
      case ProblemKind::VRPTW:
        row[2] = static_cast<Real>(std::min(inst.tw[i][0] / horizon, 1.0));
        row[3] = static_cast<Real>(std::min(inst.tw[i][1] / horizon, 1.0));
        break;
      case ProblemKind::TSPDL:
        row[2] = static_cast<Real>(inst.demand[i] / total);
        row[3] = static_cast<Real>(inst.draft[i] / total);
        break;
    }
  }
  return out;
}

Tensor edge_features(const Instance& inst) {
  const std::size_t n = inst.size();
  Tensor out({n, n, 1});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = i == j ? Real(0) : static_cast<Real>(inst.dist(i, j));
  return out;
}

DecodeState initial_state(const Instance& inst) {
  DecodeState s;
  s.visited.assign(inst.size(), 0);
  if (inst.kind == ProblemKind::TSP) return s;
  s.start = s.current = 0;
  switch (inst.kind) {
    case ProblemKind::TSPTW:
    case ProblemKind::TSPDL:
      s.visited[0] = 1;
      s.sequence.push_back(0);
      if (inst.kind == ProblemKind::TSPDL) s.load = inst.total_demand();
      break;
    case ProblemKind::CVRP: s.load = 1.0; break;
    default: break;
  }
  return s;
}

std::vector<std::uint8_t> feasible_mask(const DecodeState& s, const Instance& inst) {
  const std::size_t n = inst.size();
  std::vector<std::uint8_t> mask(n, 1);
  if (s.terminated) throw Error("feasible_mask called on a terminated state");
  switch (inst.kind) {
    case ProblemKind::TSP:
    case ProblemKind::TSPTW:
    case ProblemKind::TSPDL:
      for (std::size_t i = 0; i < n; ++i) mask[i] = s.visited[i];
      break;
    case ProblemKind::CVRP:
      for (std::size_t i = 1; i < n; ++i) mask[i] = s.visited[i] || inst.demand[i] > s.load + kTol;
      mask[0] = s.current == 0 && !all_customers_served(s, inst);
      break;
    case ProblemKind::PCTSP:
      for (std::size_t i = 1; i < n; ++i) mask[i] = s.visited[i];
      mask[0] = s.prize < inst.threshold - kTol && !all_customers_served(s, inst);
      break;
    case ProblemKind::VRPTW: {
      bool any = false;
      for (std::size_t i = 1; i < n; ++i) {
        mask[i] = s.visited[i] || s.clock + inst.dist(s.current, i) > inst.tw[i][1];
        any = any || !mask[i];
      }
      mask[0] = !(s.served >= 1 || !any);
      break;
    }
  }
  if (std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; }))
    throw Error("environment invariant violated: every node is masked");
  return mask;
}

void update_state(DecodeState& s, std::size_t node, const Instance& inst) {
  if (s.terminated) throw InvalidTransition("transition from a terminated state");
  if (node >= inst.size()) throw InvalidTransition("node index out of range");
  if (feasible_mask(s, inst)[node]) throw InvalidTransition("node " + std::to_string(node) + " is masked");
  s.sequence.push_back(node);
  if (s.current == DecodeState::kNone) {
    s.start = s.current = node;
    s.visited[node] = 1;
    s.served = 1;
    if (inst.size() == 1) s.terminated = true;
    return;
  }
  const double d = inst.dist(s.current, node);
  s.length += d;
  s.current = node;

  switch (inst.kind) {
    case ProblemKind::TSP:
    case ProblemKind::TSPTW:
    case ProblemKind::TSPDL: {
      s.visited[node] = 1;
      s.served += 1;
      if (inst.kind == ProblemKind::TSPTW) {
        s.clock = std::max(s.clock + d, inst.tw[node][0]);
        if (s.clock > inst.tw[node][1]) {
          s.n_out += 1;
          s.t_out += s.clock - inst.tw[node][1];
        }
      } else if (inst.kind == ProblemKind::TSPDL) {
        if (s.load > inst.draft[node]) {
          s.n_out += 1;
          s.d_out += s.load - inst.draft[node];
        }
        s.load -= inst.demand[node];
      }
      const std::size_t target = inst.kind == ProblemKind::TSP ? inst.size() : customers(inst);
      if (s.served == target) close_tour(s, inst);
      break;
    }
    case ProblemKind::CVRP:
      if (node == 0) {
        s.load = 1.0;
        if (all_customers_served(s, inst)) s.terminated = true;
      } else {
        s.visited[node] = 1;
        s.served += 1;
        s.load = std::max(0.0, s.load - inst.demand[node]);
      }
      break;
    case ProblemKind::PCTSP:
      if (node == 0) {
        s.terminated = true;
      } else {
        s.visited[node] = 1;
        s.served += 1;
        s.prize += inst.prize[node];
      }
      break;
    case ProblemKind::VRPTW:
      if (node == 0) {
        s.clock += d;
        s.terminated = true;
      } else {
        s.visited[node] = 1;
        s.served += 1;
        s.clock = std::max(s.clock + d, inst.tw[node][0]);
      }
      break;
  }
}

std::vector<double> context_scalars(const DecodeState& s, const Instance& inst) {
  switch (inst.kind) {
    case ProblemKind::TSP: return {};
    case ProblemKind::CVRP: return {s.load};
    case ProblemKind::PCTSP: return {std::max(0.0, inst.threshold - s.prize) / inst.threshold};
    case ProblemKind::TSPTW:
    case ProblemKind::VRPTW: return {s.clock / inst.time_scale()};
    case ProblemKind::TSPDL: return {s.load / std::max(inst.total_demand(), 1.0)};
  }
  return {};
}

std::size_t step_budget(const Instance& inst) { return 2 * inst.size() + 2; }

SolutionCost state_cost(const DecodeState& s, const Instance& inst, const EnvConfig& env) {
  SolutionCost c;
  c.length = s.length;
  c.n_out = s.n_out;
  c.t_out = s.t_out;
  c.d_out = s.d_out;
  c.unvisited = customers(inst) - std::min(s.served, customers(inst));
  if (inst.kind == ProblemKind::TSP) c.unvisited = inst.size() - s.served;
  switch (inst.kind) {
    case ProblemKind::TSP:
    case ProblemKind::CVRP: c.cost = s.length; break;
    case ProblemKind::PCTSP: {
      c.cost = s.length;
      for (std::size_t i = 1; i < inst.size(); ++i)
        if (!s.visited[i]) c.cost += inst.penalty[i];
      c.feasible = s.prize >= inst.threshold - kTol;
      break;
    }
    case ProblemKind::TSPTW:
      c.cost = s.length + env.beta * (s.n_out + s.t_out);
      c.feasible = s.n_out == 0;
      break;
    case ProblemKind::TSPDL:
      c.cost = s.length + env.beta * (s.n_out + s.d_out);
      c.feasible = s.n_out == 0;
      break;
    case ProblemKind::VRPTW: c.cost = static_cast<double>(c.unvisited); break;
  }
  return c;
}

SolutionCost solution_cost(const Instance& inst, const std::vector<std::size_t>& sequence, const EnvConfig& env) {
  DecodeState s = initial_state(inst);
  std::size_t i = 0;
  // Fixed-start kinds may list the start node explicitly.
  if (!s.sequence.empty() && !sequence.empty() && sequence[0] == s.sequence[0] &&
      inst.kind != ProblemKind::TSP)
    i = 1;
  for (; i < sequence.size(); ++i) {
    if (s.terminated) throw Error("sequence continues after the route terminated");
    update_state(s, sequence[i], inst);
  }
  if (!s.terminated) throw Error("sequence ends before the route terminates");
  return state_cost(s, inst, env);
}

Point dihedral_point(Point p, int k) {
  if (k < 0 || k > 7) throw Error("dihedral index must be in 0..7");
  if (k >= 4) std::swap(p[0], p[1]);
  for (int r = 0; r < k % 4; ++r) p = {1.0 - p[1], p[0]};
  return p;
}

Instance dihedral_transform(const Instance& inst, int k) {
  Instance out = inst;
  for (auto& p : out.coords) p = dihedral_point(p, k);
  return out;
}

std::string instance_to_json(const Instance& inst) {
  nlohmann::ordered_json j;
  j["kind"] = kind_name(inst.kind);
  j["seed"] = inst.seed;
  j["coords"] = inst.coords;
  if (!inst.demand.empty()) j["demand"] = inst.demand;
  if (!inst.tw.empty()) j["tw"] = inst.tw;
  if (!inst.draft.empty()) j["draft"] = inst.draft;
  if (!inst.prize.empty()) j["prize"] = inst.prize;
  if (!inst.penalty.empty()) j["penalty"] = inst.penalty;
  if (inst.kind == ProblemKind::PCTSP) j["threshold"] = inst.threshold;
  return j.dump();
}

Instance instance_from_json(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw Error("instance must be a JSON object");
  static const char* kFields[] = {"kind", "seed", "coords", "demand", "tw", "draft", "prize", "penalty", "threshold"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find_if(std::begin(kFields), std::end(kFields), [&](const char* f) { return it.key() == f; }) ==
        std::end(kFields))
      throw Error("unknown field '" + it.key() + "'");
  Instance inst;
  try {
    if (!j.contains("kind") || !j.contains("coords")) throw Error("instance needs 'kind' and 'coords'");
    inst.kind = parse_kind(j.at("kind").get<std::string>());
    if (j.contains("seed")) inst.seed = j.at("seed").get<std::uint64_t>();
    inst.coords = j.at("coords").get<std::vector<Point>>();
    if (j.contains("demand")) inst.demand = j.at("demand").get<std::vector<double>>();
    if (j.contains("tw")) inst.tw = j.at("tw").get<std::vector<std::array<double, 2>>>();
    if (j.contains("draft")) inst.draft = j.at("draft").get<std::vector<double>>();
    if (j.contains("prize")) inst.prize = j.at("prize").get<std::vector<double>>();
    if (j.contains("penalty")) inst.penalty = j.at("penalty").get<std::vector<double>>();
    if (j.contains("threshold")) inst.threshold = j.at("threshold").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(std::string("schema violation: ") + e.what());
  }
  validate_instance(inst);
  return inst;
}

std::vector<Instance> read_dataset(std::istream& in) {
  std::vector<Instance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(instance_from_json(line));
    } catch (const Error& e) {
      throw Error("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(std::ostream& out, const std::vector<Instance>& data) {
  for (const auto& inst : data) out << instance_to_json(inst) << '\n';
}

std::vector<Instance> read_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open dataset '" + path + "'");
  return read_dataset(in);
}

void write_dataset_file(const std::string& path, const std::vector<Instance>& data) {
  std::ostringstream os;
  write_dataset(os, data);
  atomic_write(path, os.str());
}

void atomic_write(const std::string& path, const std::string& contents) {
  const std::string tmp = path + ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write '" + tmp + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw Error("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error("cannot rename onto '" + path + "'");
  }
}

}  // namespace egam
