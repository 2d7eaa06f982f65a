#include "egam/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>

#include "egam/parallel.hpp"

namespace egam {

namespace {

constexpr std::uint64_t kValidationStream = 0x76616C6964ULL;

std::size_t decay_epochs(const TrainConfig& c) {
  if (c.lr_decay_fraction <= 0.0) return 0;
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(double(c.epochs) * c.lr_decay_fraction)));
}

}  // namespace

void TrainConfig::validate() const {
  if (nodes < 2) throw Error("nodes must be at least 2");
  if (batch_size == 0 || batches_per_epoch == 0 || epochs == 0) throw Error("batch size, batches and epochs must be positive");
  if (augmentations < 1 || augmentations > 8) throw Error("augmentations (m) must be in 1..8");
  if (samples < 1) throw Error("samples (n) must be at least 1");
  if (augmentations * samples < 2) throw Error("m * n must be at least 2 for the mean baseline");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("lr must be positive");
  if (!(lr_decay > 0.0) || lr_decay_fraction < 0.0 || lr_decay_fraction > 1.0)
    throw Error("lr_decay must be positive and lr_decay_fraction in [0, 1]");
  if (chunk == 0) throw Error("chunk must be positive");
}

double TrainConfig::lr_at(std::size_t epoch) const {
  return epoch + decay_epochs(*this) >= epochs ? lr * lr_decay : lr;
}

void RunConfig::validate() const {
  train.validate();
  model.validate();
  if (!(env.beta >= 0.0)) throw Error("beta must be non-negative");
}

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  const TrainConfig& t = train;
  os << "kind=" << kind_name(t.kind) << '\n'
     << "nodes=" << t.nodes << '\n'
     << "batch_size=" << t.batch_size << '\n'
     << "batches_per_epoch=" << t.batches_per_epoch << '\n'
     << "epochs=" << t.epochs << '\n'
     << "lr=" << t.lr << '\n'
     << "lr_decay=" << t.lr_decay << '\n'
     << "lr_decay_fraction=" << t.lr_decay_fraction << '\n'
     << "augmentations=" << t.augmentations << '\n'
     << "samples=" << t.samples << '\n'
     << "seed=" << t.seed << '\n'
     << "checkpoint_every=" << t.checkpoint_every << '\n'
     << "validation_size=" << t.validation_size << '\n'
     << "chunk=" << t.chunk << '\n'
     << "workers=" << t.workers << '\n'
     << model.to_text()
     << "beta=" << env.beta << '\n'
     << "vrptw_horizon=" << env.vrptw_horizon << '\n'
     << "tsptw_slack=" << env.tsptw_slack << '\n'
     << "tspdl_hard_frac=" << env.tspdl_hard_frac << '\n';
  return os.str();
}

bool set_run_field(RunConfig& c, const std::string& key, const std::string& value) {
  TrainConfig& t = c.train;
  if (key == "kind") t.kind = parse_kind(value);
  else if (key == "nodes") t.nodes = parse_size_field(key, value);
  else if (key == "batch_size") t.batch_size = parse_size_field(key, value);
  else if (key == "batches_per_epoch") t.batches_per_epoch = parse_size_field(key, value);
  else if (key == "epochs") t.epochs = parse_size_field(key, value);
  else if (key == "lr") t.lr = parse_real_field(key, value);
  else if (key == "lr_decay") t.lr_decay = parse_real_field(key, value);
  else if (key == "lr_decay_fraction") t.lr_decay_fraction = parse_real_field(key, value);
  else if (key == "augmentations" || key == "m") t.augmentations = parse_size_field(key, value);
  else if (key == "samples" || key == "n") t.samples = parse_size_field(key, value);
  else if (key == "seed") t.seed = parse_size_field(key, value);
  else if (key == "checkpoint_every") t.checkpoint_every = parse_size_field(key, value);
  else if (key == "validation_size") t.validation_size = parse_size_field(key, value);
  else if (key == "chunk") t.chunk = parse_size_field(key, value);
  else if (key == "workers") t.workers = parse_size_field(key, value);
  else if (key == "beta") c.env.beta = parse_real_field(key, value);
  else if (key == "vrptw_horizon") c.env.vrptw_horizon = parse_real_field(key, value);
  else if (key == "tsptw_slack") c.env.tsptw_slack = parse_real_field(key, value);
  else if (key == "tspdl_hard_frac") c.env.tspdl_hard_frac = parse_real_field(key, value);
  else return set_config_field(c.model, key, value);
  return true;
}

void apply_config_text(RunConfig& config, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return std::string();
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (!set_run_field(config, key, value))
      throw Error("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
  }
}

RunConfig profile(const std::string& name) {
  RunConfig c;
  if (name == "paper") return c;
  if (name == "toy") {
    c.train.nodes = 8;
    c.train.batch_size = 64;
    c.train.batches_per_epoch = 200;
    c.train.epochs = 20;
    c.train.lr = 1e-3;
    c.train.checkpoint_every = 5;
    c.train.validation_size = 200;
    c.model.d_model = 32;
    c.model.heads = 4;
    c.model.d_key = 8;
    c.model.d_ff = 128;
    c.model.encoder_layers = 2;
    return c;
  }
  if (name == "small") {
    c.train.nodes = 10;
    c.train.batch_size = 64;
    c.train.batches_per_epoch = 250;
    c.train.epochs = 20;
    c.train.lr = 1e-3;
    c.train.checkpoint_every = 5;
    c.train.validation_size = 200;
    c.model.d_model = 64;
    c.model.heads = 8;
    c.model.d_key = 8;
    c.model.d_ff = 256;
    c.model.encoder_layers = 3;
    return c;
  }
  throw Error("unknown profile '" + name + "' (toy, small, paper)");
}

double compute_baseline(std::span<const double> costs) {
  if (costs.empty()) throw Error("baseline needs at least one cost");
  // Offset by the first cost so identical costs give exactly that cost back.
  double s = 0.0;
  for (double c : costs) s += c - costs[0];
  return costs[0] + s / double(costs.size());
}

std::vector<double> BatchRollouts::advantages() const {
  std::vector<double> a(costs.size());
  const std::size_t per = per_source();
  for (std::size_t i = 0; i < costs.size(); ++i) a[i] = costs[i] - baselines[i / per];
  return a;
}

std::vector<double> reinforce_weights(std::span<const double> costs, std::size_t per_source, double scale,
                                      std::vector<double>* baselines) {
  if (per_source == 0 || costs.size() % per_source != 0) throw DimensionError("costs do not split into groups");
  const std::size_t groups = costs.size() / per_source;
  std::vector<double> w(costs.size());
  if (baselines) baselines->resize(groups);
  for (std::size_t s = 0; s < groups; ++s) {
    const double b = compute_baseline(costs.subspan(s * per_source, per_source));
    if (baselines) (*baselines)[s] = b;
    for (std::size_t j = s * per_source; j < (s + 1) * per_source; ++j) {
      const double adv = costs[j] - b;
      if (!std::isfinite(adv)) throw NumericalError("non-finite advantage");
      w[j] = scale * adv;
    }
  }
  return w;
}

Var reinforce_surrogate(Tape& tape, const Rollout& rollout, std::span<const double> weights) {
  if (weights.size() != rollout.states.size()) throw DimensionError("one weight per trajectory is required");
  Var total;
  for (const auto& step : rollout.steps) {
    Tensor w({step.trajectories.size()});
    for (std::size_t a = 0; a < step.trajectories.size(); ++a) w[a] = static_cast<Real>(weights[step.trajectories[a]]);
    Var part = ad::weighted_sum(step.log_prob, std::move(w));
    total = total.valid() ? ad::add(total, part) : part;
  }
  return total.valid() ? total : tape.constant(Tensor({}, Real(0)));
}

std::vector<SourcePlan> draw_batch(const TrainConfig& config, const EnvConfig& env, std::uint64_t batch_seed) {
  std::mt19937_64 rng(batch_seed);
  std::uniform_int_distribution<std::size_t> start(0, config.nodes - 1);
  std::vector<SourcePlan> plans(config.batch_size);
  for (auto& p : plans) {
    p.instance = generate_instance(config.kind, config.nodes, rng(), env);
    std::vector<int> pool{1, 2, 3, 4, 5, 6, 7};
    p.transforms = {0};
    for (std::size_t t = 1; t < config.augmentations; ++t) {
      std::uniform_int_distribution<std::size_t> pick(t - 1, pool.size() - 1);
      std::swap(pool[t - 1], pool[pick(rng)]);
      p.transforms.push_back(pool[t - 1]);
    }
    for (std::size_t t = 0; t < config.augmentations; ++t)
      for (std::size_t j = 0; j < config.samples; ++j) {
        p.starts.push_back(config.kind == ProblemKind::TSP ? std::optional<std::size_t>(start(rng)) : std::nullopt);
        p.rng_seeds.push_back(rng());
      }
  }
  return plans;
}

void reinforce_chunk(Tape& tape, const Policy& policy, std::span<const SourcePlan> plans, std::size_t samples,
                     double scale, const EnvConfig& env, BatchRollouts& out) {
  if (plans.empty()) throw Error("reinforce_chunk: no instances");
  const std::size_t m = plans[0].transforms.size(), per = m * samples;
  std::vector<Instance> copies;
  copies.reserve(plans.size() * m);
  for (const auto& p : plans) {
    if (p.transforms.size() != m || p.rng_seeds.size() != per) throw DimensionError("inconsistent sampling plan");
    for (int k : p.transforms) copies.push_back(k == 0 ? p.instance : dihedral_transform(p.instance, k));
  }
  std::vector<const Instance*> batch;
  for (const auto& c : copies) batch.push_back(&c);
  std::vector<TrajectorySpec> specs;
  specs.reserve(plans.size() * per);
  for (std::size_t s = 0; s < plans.size(); ++s)
    for (std::size_t j = 0; j < per; ++j) {
      TrajectorySpec spec;
      spec.instance = s * m + j / samples;
      spec.start = plans[s].starts[j];
      spec.rng_seed = plans[s].rng_seeds[j];
      specs.push_back(spec);
    }

  Encoding enc = policy.encode(tape, batch);
  Rollout r = policy.rollout(enc, batch, specs, Decoding::Sample);

  out.sources = plans.size();
  out.augmentations = m;
  out.samples = samples;
  out.costs.resize(specs.size());
  out.log_probs = r.log_prob;
  out.feasible.resize(specs.size());
  out.sequences.resize(specs.size());
  for (std::size_t t = 0; t < specs.size(); ++t) {
    const SolutionCost c = state_cost(r.states[t], *batch[specs[t].instance], env);
    out.costs[t] = c.cost;
    out.feasible[t] = c.feasible;
    out.sequences[t] = r.states[t].sequence;
  }
  const std::vector<double> weights = reinforce_weights(out.costs, per, scale, &out.baselines);
  tape.backward(reinforce_surrogate(tape, r, weights));
}

std::string train_log_header() { return "epoch,batch,mean_cost,baseline,grad_norm,feasible_rate,wallclock_s\n"; }

std::string train_log_row(const BatchStats& s) {
  std::ostringstream os;
  os << std::setprecision(17) << s.epoch << ',' << s.batch << ',' << s.mean_cost << ',' << s.baseline << ',';
  if (s.skipped) os << "nan";
  else os << s.grad_norm;
  os << ',' << s.feasible_rate << ',' << std::setprecision(6) << std::fixed << s.wallclock_s << '\n';
  return os.str();
}

namespace {

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

std::vector<Instance> validation_instances(const RunConfig& c) {
  std::vector<Instance> out;
  for (std::size_t i = 0; i < c.train.validation_size; ++i)
    out.push_back(generate_instance(c.train.kind, c.train.nodes, derive_seed({c.train.seed, kValidationStream, i}), c.env));
  return out;
}

}  // namespace

Trainer::Trainer(const RunConfig& config)
    : Trainer(config, Policy(config.model, config.train.kind, derive_seed({config.train.seed, 0}))) {}

Trainer::Trainer(const RunConfig& config, Policy policy) : config_(config), policy_(std::move(policy)) {
  config_.validate();
  if (policy_.kind() != config_.train.kind) throw Error("policy kind does not match the training kind");
  if (!(policy_.config() == config_.model)) throw Error("policy config does not match the run config");
  adam_ = Adam(policy_.params());
  validation_ = validation_instances(config_);
  started_ = now_s();
}

BatchStats Trainer::train_batch(std::size_t epoch, std::size_t batch) {
  const TrainConfig& tc = config_.train;
  const std::vector<SourcePlan> plans = draw_batch(tc, config_.env, derive_seed({tc.seed, 1, epoch, batch}));
  const std::size_t chunks = (plans.size() + tc.chunk - 1) / tc.chunk;
  const double scale = 1.0 / double(tc.augmentations * tc.samples * tc.batch_size);
  std::vector<GradBuffer> buffers(chunks, GradBuffer(policy_.params()));
  std::vector<BatchRollouts> rollouts(chunks);

  BatchStats stats;
  stats.epoch = epoch;
  stats.batch = batch;
  bool failed = false;
  try {
    parallel_for(chunks, tc.workers, [&](std::size_t c) {
      const std::size_t lo = c * tc.chunk, hi = std::min(plans.size(), lo + tc.chunk);
      Tape tape(&buffers[c]);
      reinforce_chunk(tape, policy_, std::span<const SourcePlan>(plans).subspan(lo, hi - lo), tc.samples, scale,
                      config_.env, rollouts[c]);
    });
  } catch (const NumericalError& e) {
    std::cerr << "warning: epoch " << epoch << " batch " << batch << " skipped: " << e.what() << '\n';
    failed = true;
  }

  if (!failed) {
    double cost = 0.0, base = 0.0, feasible = 0.0;
    std::size_t count = 0;
    for (const auto& r : rollouts) {
      for (std::size_t t = 0; t < r.costs.size(); ++t) {
        cost += r.costs[t];
        feasible += r.feasible[t];
      }
      for (double b : r.baselines) base += b;
      count += r.costs.size();
    }
    stats.mean_cost = cost / double(count);
    stats.baseline = base / double(plans.size());
    stats.feasible_rate = feasible / double(count);

    ParamStore& store = policy_.params();
    store.zero_grad();
    for (const auto& b : buffers) b.add_into(store);
    stats.grad_norm = store.grad_norm();
    if (!std::isfinite(stats.grad_norm)) {
      std::cerr << "warning: epoch " << epoch << " batch " << batch << " skipped: non-finite gradient\n";
      failed = true;
    } else {
      adam_.step(store, static_cast<Real>(tc.lr_at(epoch)));
    }
  }
  if (failed) {
    policy_.params().zero_grad();
    stats.skipped = true;
    ++skipped_;
  }
  stats.wallclock_s = now_s() - started_;
  return stats;
}

EpochStats Trainer::train_epoch(std::size_t epoch, const std::function<void(const BatchStats&)>& on_batch) {
  EpochStats e;
  e.epoch = epoch;
  std::size_t used = 0;
  for (std::size_t b = 0; b < config_.train.batches_per_epoch; ++b) {
    const BatchStats s = train_batch(epoch, b);
    if (on_batch) on_batch(s);
    if (s.skipped) {
      ++e.skipped;
      continue;
    }
    e.mean_cost += s.mean_cost;
    e.mean_baseline += s.baseline;
    e.grad_norm += s.grad_norm;
    e.feasible_rate += s.feasible_rate;
    ++used;
  }
  if (used > 0) {
    e.mean_cost /= double(used);
    e.mean_baseline /= double(used);
    e.grad_norm /= double(used);
    e.feasible_rate /= double(used);
  }
  if (!validation_.empty()) e.validation_cost = validate();
  return e;
}

double Trainer::validate() const {
  if (validation_.empty()) throw Error("no validation set configured");
  InferenceOptions opt;
  opt.env = config_.env;
  opt.workers = config_.train.workers;
  opt.chunk = 64;
  const auto sols = solve_dataset(policy_, validation_, DecodeMode{}, 0, opt);
  double s = 0.0;
  for (const auto& x : sols) s += x.cost.cost;
  return s / double(sols.size());
}

std::vector<EpochStats> train(Trainer& trainer, const TrainOutputs& outputs) {
  namespace fs = std::filesystem;
  const TrainConfig& tc = trainer.config().train;
  if (!outputs.checkpoint_dir.empty()) fs::create_directories(outputs.checkpoint_dir);
  std::string log = train_log_header();
  std::vector<EpochStats> history;
  for (std::size_t e = 0; e < tc.epochs; ++e) {
    EpochStats s = trainer.train_epoch(e, [&](const BatchStats& b) { log += train_log_row(b); });
    if (!outputs.log_path.empty()) atomic_write(outputs.log_path, log);
    if (!outputs.checkpoint_dir.empty() && tc.checkpoint_every > 0 && (e + 1) % tc.checkpoint_every == 0) {
      std::ostringstream name;
      name << "epoch_" << std::setw(3) << std::setfill('0') << e + 1 << ".egam";
      save_checkpoint(trainer.policy(), (fs::path(outputs.checkpoint_dir) / name.str()).string());
    }
    if (outputs.progress) {
      *outputs.progress << "epoch " << e + 1 << "/" << tc.epochs << " mean_cost " << s.mean_cost << " baseline "
                        << s.mean_baseline << " grad_norm " << s.grad_norm << " feasible " << s.feasible_rate;
      if (s.validation_cost) *outputs.progress << " val_greedy " << *s.validation_cost;
      if (s.skipped) *outputs.progress << " skipped " << s.skipped;
      *outputs.progress << std::endl;
    }
    history.push_back(s);
  }
  if (!outputs.checkpoint_dir.empty())
    save_checkpoint(trainer.policy(), (fs::path(outputs.checkpoint_dir) / "final.egam").string());
  return history;
}

}  // namespace egam
