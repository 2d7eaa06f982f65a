#include "egam/inference.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "json.hpp"

#include "egam/parallel.hpp"

namespace egam {

bool better_than(const SolutionCost& a, const SolutionCost& b) {
  if (a.feasible != b.feasible) return a.feasible;
  return a.cost < b.cost;
}

namespace {

struct Candidate {
  std::size_t transform = 0;
  std::optional<std::size_t> start;
  std::uint64_t rng_seed = 0;
};

// Sampling plan for one source instance: `per` trajectories on each of `m` transforms.
std::vector<Candidate> plan(const Instance& inst, std::size_t m, std::size_t per, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> start(0, inst.size() - 1);
  std::vector<Candidate> out;
  out.reserve(m * per);
  for (std::size_t t = 0; t < m; ++t)
    for (std::size_t j = 0; j < per; ++j) {
      Candidate c;
      c.transform = t;
      if (inst.kind == ProblemKind::TSP) c.start = start(rng);
      c.rng_seed = rng();
      out.push_back(c);
    }
  return out;
}

// Decodes the candidates of every source in one tape and returns each source's winner.
std::vector<Solution> solve_sources(const Policy& policy, const std::vector<const Instance*>& sources,
                                    const DecodeMode& mode, const std::vector<std::uint64_t>& seeds,
                                    const EnvConfig& env) {
  const std::size_t S = sources.size();
  const bool greedy = mode.kind == DecodeMode::Kind::Greedy;
  const std::size_t m = mode.kind == DecodeMode::Kind::Augmented ? mode.augmentations : 1;
  const std::size_t per = greedy ? 1 : mode.samples;
  if (m < 1 || m > 8) throw Error("augmentations must be in 1..8");
  if (per < 1) throw Error("sample count must be at least 1");

  std::vector<Instance> transformed;
  transformed.reserve(S * m);
  for (const Instance* src : sources)
    for (std::size_t t = 0; t < m; ++t) transformed.push_back(t == 0 ? *src : dihedral_transform(*src, int(t)));
  std::vector<const Instance*> batch;
  for (const auto& inst : transformed) batch.push_back(&inst);

  std::vector<std::vector<Candidate>> plans(S);
  std::vector<TrajectorySpec> specs;
  for (std::size_t s = 0; s < S; ++s) {
    if (greedy) {
      Candidate c;
      if (sources[s]->kind == ProblemKind::TSP) c.start = 0;
      plans[s] = {c};
    } else {
      plans[s] = plan(*sources[s], m, per, seeds[s]);
    }
    for (const auto& c : plans[s]) {
      TrajectorySpec spec;
      spec.instance = s * m + c.transform;
      spec.start = c.start;
      spec.rng_seed = c.rng_seed;
      specs.push_back(spec);
    }
  }

  Tape tape;
  tape.set_grad_enabled(false);
  Encoding enc = policy.encode(tape, batch);
  Rollout r = policy.rollout(enc, batch, specs, greedy ? Decoding::Greedy : Decoding::Sample);

  std::vector<Solution> out(S);
  std::size_t t = 0;
  for (std::size_t s = 0; s < S; ++s) {
    std::size_t best = t;
    SolutionCost best_cost;
    for (std::size_t j = 0; j < plans[s].size(); ++j, ++t) {
      // Costs are always taken on the untransformed instance.
      const SolutionCost c = m == 1 ? state_cost(r.states[t], *sources[s], env)
                                    : solution_cost(*sources[s], r.states[t].sequence, env);
      if (j == 0 || better_than(c, best_cost)) {
        best = t;
        best_cost = c;
      }
    }
    out[s].sequence = r.states[best].sequence;
    out[s].cost = best_cost;
    out[s].log_prob = r.log_prob[best];
    out[s].step_log_probs = std::move(r.step_log_probs[best]);
  }
  return out;
}

}  // namespace

Solution greedy_solve(const Policy& policy, const Instance& inst, const EnvConfig& env) {
  return solve_sources(policy, {&inst}, DecodeMode{}, {0}, env)[0];
}

Solution sample_solve(const Policy& policy, const Instance& inst, std::size_t k, std::uint64_t seed,
                      const EnvConfig& env) {
  return solve_sources(policy, {&inst}, {DecodeMode::Kind::Sample, k, 1}, {seed}, env)[0];
}

Solution augmented_solve(const Policy& policy, const Instance& inst, std::size_t m, std::size_t n, std::uint64_t seed,
                         const EnvConfig& env) {
  return solve_sources(policy, {&inst}, {DecodeMode::Kind::Augmented, n, m}, {seed}, env)[0];
}

std::string DecodeMode::to_string() const {
  switch (kind) {
    case Kind::Greedy: return "greedy";
    case Kind::Sample: return "sample:" + std::to_string(samples);
    case Kind::Augmented: return "aug:" + std::to_string(augmentations) + "x" + std::to_string(samples);
  }
  return "greedy";
}

namespace {

std::size_t parse_count(const std::string& text, const std::string& what) {
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos)
    throw Error("bad " + what + " '" + text + "' in decode mode");
  const std::size_t v = std::stoul(text);
  if (v == 0) throw Error(what + " must be positive");
  return v;
}

}  // namespace

DecodeMode parse_mode(const std::string& text) {
  DecodeMode m;
  if (text == "greedy") return m;
  if (text.rfind("sample:", 0) == 0) {
    m.kind = DecodeMode::Kind::Sample;
    m.samples = parse_count(text.substr(7), "sample count");
    return m;
  }
  if (text.rfind("aug:", 0) == 0) {
    const std::string rest = text.substr(4);
    const auto x = rest.find('x');
    if (x == std::string::npos) throw Error("aug mode must look like aug:MxN");
    m.kind = DecodeMode::Kind::Augmented;
    m.augmentations = parse_count(rest.substr(0, x), "augmentation count");
    m.samples = parse_count(rest.substr(x + 1), "sample count");
    if (m.augmentations > 8) throw Error("augmentation count must be at most 8");
    return m;
  }
  throw Error("unknown decode mode '" + text + "' (greedy, sample:K, aug:MxN)");
}

std::vector<Solution> solve_dataset(const Policy& policy, const std::vector<Instance>& data, const DecodeMode& mode,
                                    std::uint64_t seed, const InferenceOptions& options) {
  const std::size_t chunk = std::max<std::size_t>(1, options.chunk);
  std::vector<Solution> out(data.size());
  // Chunks only group instances of one size; a size change starts a new chunk.
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t i = 0; i < data.size();) {
    std::size_t j = i + 1;
    while (j < data.size() && j - i < chunk && data[j].size() == data[i].size()) ++j;
    ranges.emplace_back(i, j);
    i = j;
  }
  parallel_for(ranges.size(), options.workers, [&](std::size_t c) {
    const auto [lo, hi] = ranges[c];
    std::vector<const Instance*> sources;
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = lo; i < hi; ++i) {
      sources.push_back(&data[i]);
      seeds.push_back(derive_seed({seed, i}));
    }
    auto sols = solve_sources(policy, sources, mode, seeds, options.env);
    for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(sols[i - lo]);
  });
  return out;
}

Metrics compute_metrics(const std::vector<SolutionCost>& costs, const std::vector<Reference>* refs) {
  if (refs && refs->size() != costs.size()) throw Error("reference count does not match the dataset");
  Metrics m;
  if (costs.empty()) return m;
  double total = 0.0, gap = 0.0;
  std::size_t infeasible = 0;
  for (std::size_t i = 0; i < costs.size(); ++i) {
    total += costs[i].cost;
    if (!costs[i].feasible) ++infeasible;
    if (refs && costs[i].feasible && (*refs)[i].feasible) {
      gap += (costs[i].cost - (*refs)[i].cost) / (*refs)[i].cost;
      ++m.gap_pairs;
    }
  }
  m.mean_cost = total / double(costs.size());
  m.infeasible_rate = double(infeasible) / double(costs.size());
  if (m.gap_pairs > 0) m.gap = gap / double(m.gap_pairs);
  return m;
}

Metrics evaluate_dataset(const Policy& policy, const std::vector<Instance>& data, const DecodeMode& mode,
                         std::uint64_t seed, const std::vector<Reference>* refs, const InferenceOptions& options) {
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Solution> sols = solve_dataset(policy, data, mode, seed, options);
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::vector<SolutionCost> costs;
  costs.reserve(sols.size());
  for (const auto& s : sols) costs.push_back(s.cost);
  Metrics m = compute_metrics(costs, refs);
  m.method = policy.config().node_only ? "gam" : "egam";
  m.kind = kind_name(policy.kind());
  m.n = data.empty() ? 0 : data[0].size();
  m.mode = mode.to_string();
  m.wallclock_s = elapsed;
  m.seed = seed;
  return m;
}

std::string metrics_csv_header() {
  return "method,kind,n,mode,mean_cost,gap,infeasible_rate,wallclock_s,seed,checkpoint\n";
}

std::string metrics_csv_row(const Metrics& m) {
  std::ostringstream os;
  os << std::setprecision(10) << m.method << ',' << m.kind << ',' << m.n << ',' << m.mode << ',' << m.mean_cost << ',';
  if (m.gap) os << *m.gap;
  else os << "nan";
  os << ',' << m.infeasible_rate << ',' << m.wallclock_s << ',' << m.seed << ',' << m.checkpoint << '\n';
  return os.str();
}

std::string reference_to_json(std::size_t index, const Reference& r) {
  nlohmann::json j;
  j["index"] = index;
  j["cost"] = r.cost;
  j["feasible"] = r.feasible;
  j["method"] = r.method;
  j["sequence"] = r.sequence;
  return j.dump();
}

std::vector<Reference> read_references_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open reference file '" + path + "'");
  std::vector<Reference> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const std::size_t index = j.at("index").get<std::size_t>();
      if (index != out.size()) throw Error("indices must be consecutive from 0");
      Reference r;
      r.cost = j.at("cost").get<double>();
      r.feasible = j.at("feasible").get<bool>();
      r.method = j.value("method", std::string());
      r.sequence = j.value("sequence", std::vector<std::size_t>());
      if (!std::isfinite(r.cost)) throw Error("cost must be finite");
      out.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(path + " line " + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(path + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_references_file(const std::string& path, const std::vector<Reference>& refs) {
  std::string text;
  for (std::size_t i = 0; i < refs.size(); ++i) text += reference_to_json(i, refs[i]) + '\n';
  atomic_write(path, text);
}

}  // namespace egam
