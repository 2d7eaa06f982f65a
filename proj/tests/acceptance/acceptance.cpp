// Acceptance run: one PASS/FAIL line per criterion. Exit status 0 only if every selected
// criterion passes. `--only 2,5` restricts the run; `--workers` sets thread count; `--report`
// also writes the summary to a file.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "egam/attention.hpp"
#include "egam/inference.hpp"
#include "egam/model.hpp"
#include "egam/oracles.hpp"
#include "egam/parallel.hpp"
#include "egam/training.hpp"

using namespace egam;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v << "%";
  return os.str();
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::size_t g_workers = 1;
constexpr std::uint64_t kHeldOutSeed = 777001;
constexpr std::size_t kHeldOut = 500;

// ----- independent helpers (no library cost code)

double euclid(const Point& a, const Point& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1];
  return std::sqrt(dx * dx + dy * dy);
}

double closed_tour_length(const Instance& inst, const std::vector<std::size_t>& tour) {
  double s = 0.0;
  for (std::size_t i = 0; i < tour.size(); ++i) s += euclid(inst.coords[tour[i]], inst.coords[tour[(i + 1) % tour.size()]]);
  return s;
}

// Rotates to start at 0 and orients so the second node is smaller than the last.
std::vector<std::size_t> canonical_cycle(std::vector<std::size_t> t) {
  std::rotate(t.begin(), std::find(t.begin(), t.end(), 0), t.end());
  if (t.size() > 2 && t[1] > t.back()) std::reverse(t.begin() + 1, t.end());
  return t;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

struct Eval {
  double mean_cost = 0.0;
  double infeasible_rate = 0.0;
  std::optional<double> gap;
  std::size_t gap_pairs = 0;
};

// Gap recomputed here from raw costs; only mutually feasible pairs count.
Eval evaluate(const std::vector<Solution>& sols, const std::vector<Reference>& refs) {
  Eval e;
  std::vector<double> costs, gaps;
  std::size_t infeasible = 0;
  for (std::size_t i = 0; i < sols.size(); ++i) {
    costs.push_back(sols[i].cost.cost);
    infeasible += !sols[i].cost.feasible;
    if (sols[i].cost.feasible && refs[i].feasible) gaps.push_back((sols[i].cost.cost - refs[i].cost) / refs[i].cost);
  }
  e.mean_cost = mean(costs);
  e.infeasible_rate = double(infeasible) / double(sols.size());
  if (!gaps.empty()) e.gap = mean(gaps);
  e.gap_pairs = gaps.size();
  return e;
}

std::vector<Solution> decode(const Policy& policy, const std::vector<Instance>& data, const std::string& mode,
                             std::uint64_t seed = 1) {
  InferenceOptions opt;
  opt.workers = resolve_workers(g_workers);
  opt.chunk = 50;
  return solve_dataset(policy, data, parse_mode(mode), seed, opt);
}

// ----- toy training runs shared by criteria 7-10

struct ToyRun {
  Policy untrained;
  Policy trained;
  std::vector<EpochStats> epochs;
  double wallclock_s = 0.0;
  std::size_t skipped = 0;
};

RunConfig toy_config(ProblemKind kind, std::uint64_t seed, bool node_only) {
  RunConfig rc = profile("toy");
  rc.train.kind = kind;
  rc.train.seed = seed;
  rc.train.workers = g_workers;
  rc.train.validation_size = 0;
  rc.model.node_only = node_only;
  rc.validate();
  return rc;
}

std::map<std::string, ToyRun> g_runs;

const ToyRun& toy_run(ProblemKind kind, std::uint64_t seed, bool node_only) {
  const std::string key = kind_name(kind) + "/" + std::to_string(seed) + (node_only ? "/node_only" : "/full");
  auto it = g_runs.find(key);
  if (it != g_runs.end()) return it->second;
  const RunConfig rc = toy_config(kind, seed, node_only);
  Trainer trainer(rc);
  ToyRun run{trainer.policy(), Policy(), {}, 0.0, 0};
  std::cout << "  training " << key << " (" << rc.train.epochs << " epochs x " << rc.train.batches_per_epoch
            << " batches x " << rc.train.batch_size << ", m=" << rc.train.augmentations << ", n=" << rc.train.samples
            << ")" << std::endl;
  const auto start = Clock::now();
  for (std::size_t e = 0; e < rc.train.epochs; ++e) {
    run.epochs.push_back(trainer.train_epoch(e));
    std::cout << "    epoch " << std::setw(2) << e + 1 << " mean_cost " << fmt(run.epochs.back().mean_cost, 6)
              << " feasible " << fmt(run.epochs.back().feasible_rate, 4) << " elapsed " << fmt(seconds_since(start), 5)
              << " s" << std::endl;
  }
  run.wallclock_s = seconds_since(start);
  run.skipped = trainer.skipped_batches();
  run.trained = trainer.policy();
  return g_runs.emplace(key, std::move(run)).first->second;
}

const std::vector<Instance>& held_out(ProblemKind kind) {
  static std::map<ProblemKind, std::vector<Instance>> cache;
  auto it = cache.find(kind);
  if (it == cache.end()) it = cache.emplace(kind, generate_dataset(kind, 8, kHeldOut, kHeldOutSeed)).first;
  return it->second;
}

const std::vector<Reference>& held_out_refs(ProblemKind kind) {
  static std::map<ProblemKind, std::vector<Reference>> cache;
  auto it = cache.find(kind);
  if (it == cache.end()) {
    const std::string method = kind == ProblemKind::TSP ? "held_karp" : "exhaustive";
    it = cache.emplace(kind, reference_solutions(held_out(kind), method, {}, resolve_workers(g_workers))).first;
  }
  return it->second;
}

// ----- criteria

Verdict criterion1() {
  return {true,
          "declared: full-scale tables (100 epochs x 2500 batches x 128 on 4 GPUs) are not reproduced; "
          "criteria 7-10 are the desk-scale substitutes"};
}

// Grad-checks `op` applied to random inputs by contracting its output with fixed random weights.
double check_primitive(const std::function<Var(std::vector<Var>&)>& op, const std::vector<Shape>& shapes,
                       std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ParamStore store;
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Param& p = store.add("p" + std::to_string(i), shapes[i]);
    for (auto& v : p.value.storage()) v = u(rng);
  }
  Tensor probe;
  auto f = [&](Tape& t) {
    std::vector<Var> in;
    for (std::size_t i = 0; i < store.size(); ++i) in.push_back(t.param(store[i]));
    Var out = op(in);
    if (probe.size() != out.value().size()) {
      std::mt19937_64 wrng(seed + 99);
      probe = Tensor(out.shape());
      for (auto& v : probe.storage()) v = u(wrng);
    }
    return ad::weighted_sum(out, probe);
  };
  auto params = store.all();
  return grad_check(f, params).max_rel_error;
}

Verdict criterion2() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](const std::string& name, double err) {
    if (err >= worst) {
      worst = err;
      worst_name = name;
    }
  };
  Mask am(4 * 6, 0);
  am[1] = am[7] = am[8] = am[23] = 1;
  Mask sm(4 * 6, 0);
  sm[0] = sm[5] = sm[13] = 1;
  const std::vector<std::tuple<std::string, std::function<Var(std::vector<Var>&)>, std::vector<Shape>>> prims = {
      {"add", [](std::vector<Var>& v) { return ad::add(v[0], v[1]); }, {{4, 6}, {4, 6}}},
      {"scale", [](std::vector<Var>& v) { return ad::scale(v[0], -1.7); }, {{4, 6}}},
      {"relu", [](std::vector<Var>& v) { return ad::relu(v[0]); }, {{4, 6, 8}}},
      {"linear", [](std::vector<Var>& v) { return ad::linear(v[0], v[1], v[2]); }, {{4, 6, 8}, {5, 8}, {5}}},
      {"concat", [](std::vector<Var>& v) { const Var p[] = {v[0], v[1]}; return ad::concat(p, 1); }, {{4, 3}, {4, 5}}},
      {"gather_rows", [](std::vector<Var>& v) { return ad::gather_rows(v[0], {3, 0, 3, 1}); }, {{4, 6}}},
      {"instance_norm", [](std::vector<Var>& v) { return ad::instance_norm(v[0], v[1], v[2]); }, {{4, 6, 8}, {8}, {8}}},
      {"attention", [&](std::vector<Var>& v) { return ad::attention(v[0], v[1], v[2], 2, &am); },
       {{4, 3, 8}, {4, 6, 8}, {4, 6, 4}}},
      {"row_dot", [](std::vector<Var>& v) { return ad::row_dot(v[0], v[1]); }, {{4, 8}, {4, 6, 8}}},
      {"softmax_masked", [&](std::vector<Var>& v) { return ad::softmax_masked(v[0], sm); }, {{4, 6}}},
      {"log_softmax_pick", [&](std::vector<Var>& v) { return ad::log_softmax_pick(v[0], sm, {2, 4, 0, 5}); }, {{4, 6}}},
  };
  for (const auto& [name, op, shapes] : prims)
    for (std::uint64_t seed = 1; seed <= 2; ++seed) note(name, check_primitive(op, shapes, seed));
  note("tanh_clip", check_primitive([](std::vector<Var>& v) { return ad::tanh_clip(v[0], 10); }, {{4, 6}}, 1, -2, 2));

  {
    ParamStore store;
    std::mt19937_64 rng(17);
    const AttentionDims dims{8, 2, 4, 4, 16};
    EncoderLayerParams p = make_encoder_layer(store, "L", dims, false, false, rng);
    DirectedEdgeParams dp = make_directed(store, "D", 8, rng);
    std::uniform_real_distribution<double> u(-1, 1);
    Param& n = store.add("n", {1, 3, 8});
    for (auto& v : n.value.storage()) v = u(rng);
    Param& e = store.add("e", {1, 3, 3, 8});
    for (auto& v : e.value.storage()) v = u(rng);
    Tensor wn({1, 3, 8}), we({1, 3, 3, 8});
    for (auto& v : wn.storage()) v = u(rng);
    for (auto& v : we.storage()) v = u(rng);
    auto params = store.all();
    const Mask m{0, 1, 0, 0, 0, 1, 1, 0, 0};
    const std::vector<std::pair<std::string, std::function<Var(Tape&)>>> layers = {
        {"node_node", [&](Tape& t) { return ad::weighted_sum(node_node(t.param(n), p.node_node), wn); }},
        {"node_edge", [&](Tape& t) { return ad::weighted_sum(node_edge(t.param(n), t.param(e), p.node_edge, &m), wn); }},
        {"edge_node", [&](Tape& t) { return ad::weighted_sum(edge_node(t.param(e), t.param(n), p.edge_node), we); }},
        {"edge_node_directed",
         [&](Tape& t) { return ad::weighted_sum(edge_node(t.param(e), t.param(n), p.edge_node, &dp), we); }},
        {"ff_residual", [&](Tape& t) { return ad::weighted_sum(ff_residual(t.param(n), p.node_ff), wn); }},
        {"encoder_layer",
         [&](Tape& t) {
           auto [no, eo] = encoder_layer(t.param(n), t.param(e), p);
           return ad::add(ad::weighted_sum(no, wn), ad::weighted_sum(eo, we));
         }},
    };
    for (const auto& [name, f] : layers) note(name, grad_check(f, params).max_rel_error);
  }

  // Full model: TSP-5, d_m = 8, 2 heads, 2 encoder layers, 1 decoder layer.
  EgamConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_key = 4;
  cfg.d_ff = 16;
  cfg.encoder_layers = 2;
  cfg.decoder_layers = 1;
  Policy policy(cfg, ProblemKind::TSP, 3);
  const Instance inst = generate_instance(ProblemKind::TSP, 5, 3);
  const auto tour = rollout_one(policy, inst, Decoding::Sample, 9).sequence;
  auto params = policy.params().all();
  const GradCheckResult full = grad_check(
      [&](Tape& tape) { return log_prob_of_tour_var(tape, policy, inst, tour, true); }, params, 1e-3,
      Stencil::FivePoint);
  const double elapsed = seconds_since(start);
  const bool pass = worst < 1e-5 && full.passed(1e-5) && elapsed < 60.0;
  return {pass, "layers/primitives max rel err " + fmt(worst, 3) + " (" + worst_name + ")" +
                    "; full log_prob_of_tour max rel err " + fmt(full.max_rel_error_active, 3) + " over " +
                    std::to_string(full.coordinates - full.stationary - full.kinked) + " coords, stationary " +
                    std::to_string(full.stationary) + " within noise " + fmt(full.noise_bound, 3) +
                    ", literal metric " + fmt(full.max_rel_error, 3) + "; < 1e-5 required; " + fmt(elapsed, 3) +
                    " s (< 60)"};
}

Verdict criterion3() {
  const ProblemKind kinds[] = {ProblemKind::TSP,   ProblemKind::CVRP,  ProblemKind::PCTSP,
                               ProblemKind::TSPTW, ProblemKind::VRPTW, ProblemKind::TSPDL};
  std::mt19937_64 rng(31);
  std::size_t calls = 0, bad_rows = 0, bad_masked = 0, bad_logits = 0;
  double worst_row = 0.0, max_logit = 0.0;
  EgamConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.d_key = 8;
  cfg.d_ff = 32;
  cfg.encoder_layers = 2;
  for (std::uint64_t r = 0; calls < 10000; ++r) {
    const ProblemKind kind = kinds[r % 6];
    const Policy policy(cfg, kind, 1000 + r);
    const Instance inst = generate_instance(kind, 5 + r % 6, 2000 + r);
    std::vector<DecodeState> states;
    while (states.size() < 50) {
      DecodeState s = initial_state(inst);
      const std::size_t steps = std::uniform_int_distribution<std::size_t>(0, inst.size())(rng);
      for (std::size_t t = 0; t < steps && !s.terminated; ++t) {
        const auto m = feasible_mask(s, inst);
        std::vector<std::size_t> open;
        for (std::size_t i = 0; i < m.size(); ++i)
          if (!m[i]) open.push_back(i);
        update_state(s, open[std::uniform_int_distribution<std::size_t>(0, open.size() - 1)(rng)], inst);
      }
      if (!s.terminated) states.push_back(s);
    }
    const Tensor probs = decoder_probabilities(policy, inst, states);
    Tape tape;
    tape.set_grad_enabled(false);
    const Encoding enc = policy.encode(tape, {&inst});
    std::vector<StepQuery> queries;
    Mask mask;
    for (const auto& s : states) {
      queries.push_back({0, s.current, s.start, context_scalars(s, inst)});
      const auto m = feasible_mask(s, inst);
      mask.insert(mask.end(), m.begin(), m.end());
    }
    const Tensor u = policy.step_logits(enc, queries, mask).value();
    const std::size_t n = inst.size();
    for (std::size_t q = 0; q < states.size(); ++q, ++calls) {
      double total = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double p = probs[q * n + j];
        if (mask[q * n + j]) {
          bad_masked += p != 0.0;
        } else {
          max_logit = std::max(max_logit, std::abs(double(u[q * n + j])));
          bad_logits += !(std::abs(u[q * n + j]) < 10.0);
        }
        total += p;
      }
      worst_row = std::max(worst_row, std::abs(total - 1.0));
      bad_rows += std::abs(total - 1.0) > 1e-12;
    }
  }
  // Exhaustive TSP-4: fixed start 0 and model-chosen start.
  double worst_sum = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Policy policy(cfg, ProblemKind::TSP, seed);
    const Instance inst = generate_instance(ProblemKind::TSP, 4, seed);
    std::vector<std::size_t> p{0, 1, 2, 3};
    double model_start = 0.0, fixed_start = 0.0;
    do {
      model_start += std::exp(log_prob_of_tour(policy, inst, p, true));
      if (p[0] == 0) fixed_start += std::exp(log_prob_of_tour(policy, inst, p));
    } while (std::next_permutation(p.begin(), p.end()));
    worst_sum = std::max({worst_sum, std::abs(model_start - 1.0), std::abs(fixed_start - 1.0)});
  }
  const bool pass = bad_rows == 0 && bad_masked == 0 && bad_logits == 0 && worst_sum <= 1e-9;
  return {pass, std::to_string(calls) + " decoder steps: max |row sum - 1| " + fmt(worst_row, 3) +
                    " (<= 1e-12), masked nonzero " + std::to_string(bad_masked) + ", max |logit| " +
                    fmt(max_logit, 6) + " (< 10); TSP-4 exhaustive sum max err " + fmt(worst_sum, 3) + " (<= 1e-9)"};
}

// Exact policy gradient of E[C] over all TSP-4 tours against the probability-weighted estimator.
Verdict criterion4() {
  EgamConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_key = 4;
  cfg.d_ff = 16;
  cfg.encoder_layers = 2;
  double worst = 0.0;
  for (bool model_start : {false, true}) {
    for (std::uint64_t seed : {1, 3}) {
      Policy policy(cfg, ProblemKind::TSP, seed);
      const Instance inst = generate_instance(ProblemKind::TSP, 4, 10 + seed);
      std::vector<std::vector<std::size_t>> tours, decisions;
      std::vector<std::size_t> p{0, 1, 2, 3};
      do {
        if (!model_start && p[0] != 0) continue;
        tours.push_back(p);
        decisions.emplace_back(model_start ? p.begin() : p.begin() + 1, p.end());
      } while (std::next_permutation(p.begin(), p.end()));
      std::vector<double> costs;
      for (const auto& t : tours) costs.push_back(closed_tour_length(inst, t));

      auto forced = [&](Tape& tape, std::vector<TrajectorySpec>& specs) {
        const std::vector<const Instance*> batch{&inst};
        Encoding enc = policy.encode(tape, batch);
        specs.assign(decisions.size(), {});
        for (std::size_t t = 0; t < decisions.size(); ++t) {
          if (!model_start) specs[t].start = 0;
          specs[t].forced = &decisions[t];
        }
        return policy.rollout(enc, batch, specs, Decoding::Greedy);
      };
      GradBuffer sink(policy.params());
      Tape tape(&sink);
      std::vector<TrajectorySpec> specs;
      const Rollout r = forced(tape, specs);
      double expected = 0.0;
      for (std::size_t t = 0; t < tours.size(); ++t) expected += std::exp(r.log_prob[t]) * costs[t];
      std::vector<double> weights(tours.size());
      for (std::size_t t = 0; t < tours.size(); ++t) weights[t] = std::exp(r.log_prob[t]) * (costs[t] - expected);
      tape.backward(reinforce_surrogate(tape, r, weights));
      std::vector<double> estimator;
      for (std::size_t i = 0; i < sink.size(); ++i)
        estimator.insert(estimator.end(), sink.at(i).data().begin(), sink.at(i).data().end());

      auto expected_cost = [&]() {
        Tape probe;
        probe.set_grad_enabled(false);
        std::vector<TrajectorySpec> s;
        const Rollout pr = forced(probe, s);
        double e = 0.0;
        for (std::size_t t = 0; t < tours.size(); ++t) e += std::exp(pr.log_prob[t]) * costs[t];
        return e;
      };
      auto five_point = [&](Real& x, double h) {
        const double x0 = x;
        double f[4];
        const double steps[4] = {-2 * h, -h, h, 2 * h};
        for (int s = 0; s < 4; ++s) {
          x = x0 + steps[s];
          f[s] = expected_cost();
        }
        x = x0;
        return (f[0] - 8 * f[1] + 8 * f[2] - f[3]) / (12 * h);
      };
      // Relu kinks can sit within a step: shrink h until two stencils agree.
      std::vector<double> numeric;
      for (std::size_t i = 0; i < policy.params().size(); ++i) {
        auto& v = policy.params()[i].value;
        for (std::size_t k = 0; k < v.size(); ++k) {
          double h = 1e-4, coarse = five_point(v[k], h);
          for (; h > 1e-7; h /= 10) {
            const double fine = five_point(v[k], h / 10);
            if (std::abs(coarse - fine) <= 1e-9 + 1e-7 * std::abs(coarse)) break;
            coarse = fine;
          }
          numeric.push_back(coarse);
        }
      }
      double diff = 0.0, norm = 0.0;
      for (std::size_t i = 0; i < numeric.size(); ++i) {
        diff += (estimator[i] - numeric[i]) * (estimator[i] - numeric[i]);
        norm += numeric[i] * numeric[i];
      }
      worst = std::max(worst, std::sqrt(diff / norm));
    }
  }
  return {worst < 1e-6, "TSP-4, 4 parameter draws (fixed and model start): max relative error " + fmt(worst, 3) +
                            " (< 1e-6)"};
}

// Replays a sequence from raw instance fields.
struct Replay {
  double length = 0.0, t_out = 0.0, d_out = 0.0;
  int n_out = 0;
};

Replay replay(const Instance& inst, std::vector<std::size_t> seq) {
  Replay r;
  double clock = 0.0, load = 0.0;
  if (inst.kind == ProblemKind::TSPDL) load = std::accumulate(inst.demand.begin(), inst.demand.end(), 0.0);
  seq.push_back(0);
  for (std::size_t t = 1; t < seq.size(); ++t) {
    const std::size_t a = seq[t - 1], b = seq[t];
    const double d = euclid(inst.coords[a], inst.coords[b]);
    r.length += d;
    if (inst.kind == ProblemKind::TSPTW) {
      clock += d;
      if (b != 0 && clock < inst.tw[b][0]) clock = inst.tw[b][0];
      if (clock > inst.tw[b][1]) {
        r.n_out += 1;
        r.t_out += clock - inst.tw[b][1];
      }
    } else if (inst.kind == ProblemKind::TSPDL && b != 0) {
      if (load > inst.draft[b]) {
        r.n_out += 1;
        r.d_out += load - inst.draft[b];
      }
      load -= inst.demand[b];
    }
  }
  return r;
}

Verdict criterion5() {
  const ProblemKind kinds[] = {ProblemKind::TSP,   ProblemKind::CVRP,  ProblemKind::PCTSP,
                               ProblemKind::TSPTW, ProblemKind::TSPDL, ProblemKind::VRPTW};
  EgamConfig cfg;
  cfg.d_model = 16;
  cfg.heads = 2;
  cfg.d_key = 8;
  cfg.d_ff = 32;
  cfg.encoder_layers = 1;
  std::ostringstream detail;
  bool pass = true;
  const std::size_t per_kind = 10000, instances = 100, per_instance = per_kind / instances;
  for (ProblemKind kind : kinds) {
    const Policy policy(cfg, kind, 5);
    std::size_t ok = 0, feasible = 0, max_steps = 0;
    const std::size_t n = 8;
    for (std::size_t i = 0; i < instances; ++i) {
      const Instance inst = generate_instance(kind, n, 50000 + i);
      Tape tape;
      tape.set_grad_enabled(false);
      const Encoding enc = policy.encode(tape, {&inst});
      std::vector<TrajectorySpec> specs(per_instance);
      for (std::size_t t = 0; t < per_instance; ++t) {
        specs[t].rng_seed = derive_seed({static_cast<std::uint64_t>(kind), i, t});
        if (kind == ProblemKind::TSP) specs[t].start = t % n;
      }
      const Rollout r = policy.rollout(enc, {&inst}, specs, Decoding::Sample);
      for (const DecodeState& s : r.states) {
        bool good = s.terminated;
        const SolutionCost c = state_cost(s, inst);
        max_steps = std::max(max_steps, s.sequence.size());
        feasible += c.feasible;
        std::vector<std::size_t> sorted = s.sequence;
        std::sort(sorted.begin(), sorted.end());
        switch (kind) {
          case ProblemKind::TSP:
          case ProblemKind::TSPTW:
          case ProblemKind::TSPDL: {
            // Structurally a permutation; violations match an independent replay.
            std::vector<std::size_t> all(n);
            std::iota(all.begin(), all.end(), 0);
            good = good && sorted == all;
            if (kind != ProblemKind::TSP) {
              const Replay rp = replay(inst, s.sequence);
              good = good && rp.n_out == c.n_out && std::abs(rp.t_out - c.t_out) <= 1e-12 &&
                     std::abs(rp.d_out - c.d_out) <= 1e-12 && std::abs(rp.length - c.length) <= 1e-12;
              good = good && c.feasible == (c.n_out == 0);
            }
            break;
          }
          case ProblemKind::CVRP: {
            double room = 1.0;
            for (auto v : s.sequence) {
              room = v == 0 ? 1.0 : room - inst.demand[v];
              good = good && room >= -1e-9;
            }
            good = good && s.sequence.back() == 0 && std::adjacent_find(sorted.begin(), sorted.end(), [](auto a, auto b) {
                                                        return a == b && a != 0;
                                                      }) == sorted.end();
            good = good && std::count_if(sorted.begin(), sorted.end(), [](auto v) { return v != 0; }) ==
                               std::ptrdiff_t(n - 1);
            break;
          }
          case ProblemKind::PCTSP: {
            double prize = 0.0;
            for (auto v : s.sequence)
              if (v) prize += inst.prize[v];
            good = good && s.sequence.back() == 0 &&
                   (prize >= inst.threshold - 1e-12 || std::ptrdiff_t(s.sequence.size()) == std::ptrdiff_t(n));
            break;
          }
          case ProblemKind::VRPTW:
            good = good && s.sequence.size() <= 2 * n + 2 && s.sequence.back() == 0;
            break;
        }
        ok += good;
      }
    }
    const std::size_t total = instances * per_instance;
    const bool must_be_feasible = kind == ProblemKind::TSP || kind == ProblemKind::CVRP || kind == ProblemKind::PCTSP;
    const bool kind_pass = ok == total && (!must_be_feasible || feasible == total);
    pass = pass && kind_pass;
    detail << kind_name(kind) << " " << ok << "/" << total << " valid";
    if (must_be_feasible) detail << ", " << feasible << " feasible";
    else if (kind == ProblemKind::VRPTW) detail << ", max steps " << max_steps << " (<= " << 2 * n + 2 << ")";
    else detail << ", violations replayed";
    detail << "; ";
  }
  return {pass, detail.str()};
}

Verdict criterion6() {
  double worst_iso = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Instance inst = generate_instance(ProblemKind::TSP, 20, 900 + seed);
    for (int k = 0; k < 8; ++k) {
      const Instance t = dihedral_transform(inst, k);
      for (std::size_t i = 0; i < inst.size(); ++i)
        for (std::size_t j = 0; j < inst.size(); ++j)
          worst_iso = std::max(worst_iso, std::abs(euclid(t.coords[i], t.coords[j]) - euclid(inst.coords[i], inst.coords[j])));
    }
  }
  // Seeded training batch: per-source advantages sum to zero.
  RunConfig rc = profile("toy");
  rc.train.batch_size = 8;
  const auto plans = draw_batch(rc.train, rc.env, 12345);
  const Policy policy(rc.model, ProblemKind::TSP, 3);
  GradBuffer sink(policy.params());
  Tape tape(&sink);
  BatchRollouts out;
  reinforce_chunk(tape, policy, plans, rc.train.samples, 1.0, rc.env, out);
  const auto adv = out.advantages();
  const std::size_t per = out.per_source();
  double worst_sum = 0.0;
  for (std::size_t s = 0; s < adv.size() / per; ++s)
    worst_sum = std::max(worst_sum, std::abs(std::accumulate(adv.begin() + s * per, adv.begin() + (s + 1) * per, 0.0)));

  // Cost shift: dyadic costs, integer shift, groups of 8 keep every baseline operation exact.
  EgamConfig cfg;
  cfg.d_model = 8;
  cfg.heads = 2;
  cfg.d_key = 4;
  cfg.d_ff = 16;
  cfg.encoder_layers = 2;
  const Policy small(cfg, ProblemKind::TSP, 4);
  const Instance inst = generate_instance(ProblemKind::TSP, 5, 2);
  std::vector<std::vector<std::size_t>> decisions;
  std::vector<std::size_t> p{1, 2, 3, 4};
  do decisions.push_back(p);
  while (std::next_permutation(p.begin(), p.end()));
  auto grads_for = [&](const std::vector<double>& costs) {
    GradBuffer g(small.params());
    Tape t(&g);
    const std::vector<const Instance*> batch{&inst};
    Encoding enc = small.encode(t, batch);
    std::vector<TrajectorySpec> specs(decisions.size());
    for (std::size_t i = 0; i < decisions.size(); ++i) {
      specs[i].start = 0;
      specs[i].forced = &decisions[i];
    }
    const Rollout r = small.rollout(enc, batch, specs, Decoding::Greedy);
    t.backward(reinforce_surrogate(t, r, reinforce_weights(costs, 8, 1.0 / 24.0)));
    std::vector<double> flat;
    for (std::size_t i = 0; i < g.size(); ++i) flat.insert(flat.end(), g.at(i).data().begin(), g.at(i).data().end());
    return flat;
  };
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> q(0, 1 << 20);
  std::vector<double> costs(decisions.size()), shifted(decisions.size());
  for (std::size_t i = 0; i < costs.size(); ++i) {
    costs[i] = std::ldexp(double(q(rng)), -18);
    shifted[i] = costs[i] + 37.0;
  }
  const bool identical = grads_for(costs) == grads_for(shifted);
  const bool pass = worst_iso <= 1e-12 && worst_sum <= 1e-9 && identical;
  return {pass, "dihedral distance error max " + fmt(worst_iso, 3) + " (<= 1e-12); advantage sum max " +
                    fmt(worst_sum, 3) + " (<= 1e-9); cost-shifted gradients " +
                    (identical ? "bit-identical" : "DIFFER")};
}

Verdict criterion7() {
  const ToyRun& run = toy_run(ProblemKind::TSP, 1, false);
  const auto& data = held_out(ProblemKind::TSP);
  const auto& refs = held_out_refs(ProblemKind::TSP);
  const Eval before = evaluate(decode(run.untrained, data, "greedy"), refs);
  const Eval after = evaluate(decode(run.trained, data, "greedy"), refs);
  const double first = run.epochs.front().mean_cost, last = run.epochs.back().mean_cost;
  const double ratio = *before.gap / std::max(*after.gap, 1e-300);
  const bool pass = *after.gap < 0.08 && ratio >= 5.0 && run.wallclock_s <= 3600.0 && last < first;
  return {pass, "TSP-8 held-out " + std::to_string(data.size()) + ": greedy gap " + pct(*after.gap) +
                    " (< 8%), untrained " + pct(*before.gap) + " (ratio " + fmt(ratio, 3) + ", >= 5); training " +
                    fmt(run.wallclock_s / 60.0, 3) + " min (<= 60); epoch mean cost " + fmt(first, 5) + " -> " +
                    fmt(last, 5) + "; skipped batches " + std::to_string(run.skipped)};
}

Verdict criterion8() {
  const ToyRun& run = toy_run(ProblemKind::TSP, 1, false);
  const auto& data = held_out(ProblemKind::TSP);
  const auto& refs = held_out_refs(ProblemKind::TSP);
  const Eval greedy = evaluate(decode(run.trained, data, "greedy"), refs);
  const Eval sampled = evaluate(decode(run.trained, data, "sample:128", 5), refs);
  const Eval aug = evaluate(decode(run.trained, data, "aug:8x16", 5), refs);
  return {sampled.mean_cost <= greedy.mean_cost,
          "best-of-128 mean cost " + fmt(sampled.mean_cost, 6) + " (gap " + pct(*sampled.gap) + ") <= greedy " +
              fmt(greedy.mean_cost, 6) + " (gap " + pct(*greedy.gap) + "); reported only: aug 8x16 " +
              fmt(aug.mean_cost, 6) + " (gap " + pct(*aug.gap) + ")"};
}

Verdict criterion9() {
  const ToyRun& run = toy_run(ProblemKind::TSPDL, 1, false);
  const auto& data = held_out(ProblemKind::TSPDL);
  const auto& refs = held_out_refs(ProblemKind::TSPDL);
  std::size_t ref_feasible = 0;
  for (const auto& r : refs) ref_feasible += r.feasible;
  const Eval sampled = evaluate(decode(run.trained, data, "sample:128", 7), refs);
  const Eval greedy = evaluate(decode(run.trained, data, "greedy"), refs);
  const bool pass = sampled.infeasible_rate < 0.02 && sampled.gap && *sampled.gap <= 0.15;
  return {pass, "TSPDL-8 held-out " + std::to_string(data.size()) + " (exhaustive optimum feasible on " +
                    std::to_string(ref_feasible) + "): sampled k=128 infeasible " + pct(sampled.infeasible_rate) +
                    " (< 2%), feasible-cost gap " + (sampled.gap ? pct(*sampled.gap) : std::string("undefined")) +
                    " over " + std::to_string(sampled.gap_pairs) + " pairs (<= 15%); greedy infeasible " +
                    pct(greedy.infeasible_rate) + ", gap " + (greedy.gap ? pct(*greedy.gap) : std::string("undefined"))};
}

Verdict criterion10() {
  const auto& data = held_out(ProblemKind::TSPDL);
  std::vector<double> full, ablation;
  std::ostringstream per_seed;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Eval f = evaluate(decode(toy_run(ProblemKind::TSPDL, seed, false).trained, data, "greedy"),
                            held_out_refs(ProblemKind::TSPDL));
    const Eval a = evaluate(decode(toy_run(ProblemKind::TSPDL, seed, true).trained, data, "greedy"),
                            held_out_refs(ProblemKind::TSPDL));
    full.push_back(f.mean_cost);
    ablation.push_back(a.mean_cost);
    per_seed << " seed " << seed << ": full " << fmt(f.mean_cost, 6) << " (infeasible " << pct(f.infeasible_rate)
             << ") vs node_only " << fmt(a.mean_cost, 6) << " (infeasible " << pct(a.infeasible_rate) << ");";
  }
  const double mf = mean(full), ma = mean(ablation);
  return {mf <= ma, "TSPDL-8 greedy mean cost over 3 seeds: full " + fmt(mf, 6) + " <= node_only " + fmt(ma, 6) + ";" +
                        per_seed.str()};
}

Verdict criterion11() {
  std::size_t equal = 0;
  double worst = 0.0;
  for (std::uint64_t i = 0; i < 100; ++i) {
    const Instance inst = generate_instance(ProblemKind::TSP, 9, 424242 + i);
    std::vector<std::size_t> perm{1, 2, 3, 4, 5, 6, 7, 8}, best_tour;
    double best = std::numeric_limits<double>::infinity();
    do {
      std::vector<std::size_t> tour{0};
      tour.insert(tour.end(), perm.begin(), perm.end());
      const double c = closed_tour_length(inst, canonical_cycle(tour));
      if (c < best) {
        best = c;
        best_tour = canonical_cycle(tour);
      }
    } while (std::next_permutation(perm.begin(), perm.end()));
    const Solution hk = held_karp(inst);
    const double hk_cost = closed_tour_length(inst, canonical_cycle(hk.sequence));
    worst = std::max(worst, std::abs(hk_cost - best));
    equal += hk_cost == best && canonical_cycle(hk.sequence) == best_tour;
  }
  return {equal == 100, std::to_string(equal) + "/100 TSP-9 instances: held_karp tour and cost equal the 8! "
                                                 "enumeration exactly (max |diff| " + fmt(worst, 3) + ")"};
}

Verdict criterion12() {
  RunConfig rc = profile("toy");
  rc.train.epochs = 2;
  rc.train.batches_per_epoch = 10;
  rc.train.batch_size = 16;
  rc.train.workers = g_workers;
  rc.train.seed = 99;
  const fs::path dir = fs::temp_directory_path() / ("egam_accept_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  auto run_once = [&](const std::string& name) {
    Trainer trainer(rc);
    train(trainer, {(dir / name).string(), (dir / name / "log.csv").string(), nullptr});
    std::ifstream in(dir / name / "log.csv");
    std::string line, out;
    while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + '\n';
    return std::make_pair(out, trainer.policy());
  };
  const auto [log_a, policy_a] = run_once("a");
  const auto [log_b, policy_b] = run_once("b");
  const bool logs_equal = log_a == log_b && !log_a.empty();
  const bool ckpt_equal = checkpoint_bytes(policy_a) == checkpoint_bytes(policy_b);

  const std::string path = (dir / "round_trip.egam").string();
  save_checkpoint(policy_a, path);
  const Policy loaded = load_checkpoint(path);
  const auto data = generate_dataset(ProblemKind::TSP, 8, 100, 31337);
  const auto before = decode(policy_a, data, "greedy");
  const auto after = decode(loaded, data, "greedy");
  std::size_t same = 0;
  for (std::size_t i = 0; i < data.size(); ++i)
    same += before[i].cost.cost == after[i].cost.cost && before[i].sequence == after[i].sequence;
  fs::remove_all(dir);
  const bool pass = logs_equal && ckpt_equal && same == data.size();
  return {pass, std::string("train log (wallclock column excluded) ") + (logs_equal ? "bit-identical" : "DIFFERS") +
                    ", final checkpoints " + (ckpt_equal ? "identical" : "DIFFER") + "; save->load greedy costs equal on " +
                    std::to_string(same) + "/100"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  std::string report;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    } else if (a == "--report" && i + 1 < argc) {
      report = argv[++i];
    } else if (a == "--workers" && i + 1 < argc) {
      g_workers = std::stoul(argv[++i]);
    } else {
      std::cerr << "usage: acceptance [--only 1,2,...] [--workers N] [--report file]\n";
      return 2;
    }
  }
  const std::vector<std::pair<int, std::function<Verdict()>>> criteria = {
      {1, criterion1}, {2, criterion2}, {3, criterion3},  {4, criterion4},   {5, criterion5},   {6, criterion6},
      {7, criterion7}, {8, criterion8}, {9, criterion9}, {10, criterion10}, {11, criterion11}, {12, criterion12},
  };
  int failed = 0;
  const auto start = Clock::now();
  std::vector<std::string> summary;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::ostringstream line;
    line << "criterion " << std::setw(2) << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail << "  ["
         << fmt(seconds_since(t0), 4) << " s]";
    std::cout << line.str() << std::endl;
    summary.push_back(line.str());
  }
  std::ostringstream tail;
  tail << "summary (" << fmt(seconds_since(start) / 60.0, 4) << " min)\n";
  for (const auto& s : summary) tail << s << '\n';
  tail << (failed ? std::to_string(failed) + " criteria failed" : std::string("all selected criteria passed")) << '\n';
  std::cout << '\n' << tail.str() << std::flush;
  if (!report.empty()) std::ofstream(report) << tail.str();
  return failed ? 1 : 0;
}
