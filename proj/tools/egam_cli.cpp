#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "egam/inference.hpp"
#include "egam/model.hpp"
#include "egam/oracles.hpp"
#include "egam/parallel.hpp"
#include "egam/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace egam;

namespace {

constexpr int kExitData = 1;
constexpr int kExitNumerical = 3;

std::uint64_t default_seed() {
  if (const char* s = std::getenv("EGAM_SEED")) {
    try {
      std::size_t used = 0;
      const unsigned long long v = std::stoull(s, &used);
      if (used == std::string(s).size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(std::string("EGAM_SEED is not an unsigned integer: '") + s + "'");
  }
  return 1;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

json solution_json(const Solution& s, const Instance& inst, const std::string& mode) {
  return {{"kind", kind_name(inst.kind)},
          {"n", inst.size()},
          {"mode", mode},
          {"sequence", s.sequence},
          {"cost", s.cost.cost},
          {"length", s.cost.length},
          {"feasible", s.cost.feasible},
          {"n_out", s.cost.n_out},
          {"t_out", s.cost.t_out},
          {"d_out", s.cost.d_out},
          {"unvisited", s.cost.unvisited},
          {"log_prob", s.log_prob}};
}

void print_pretty(std::ostream& os, const Solution& s, const Instance& inst, const std::string& mode) {
  os << kind_name(inst.kind) << '-' << inst.size() << "  mode " << mode << '\n';
  os << "  sequence ";
  for (std::size_t i = 0; i < s.sequence.size(); ++i) os << (i ? " " : "") << s.sequence[i];
  os << '\n' << std::setprecision(10);
  os << "  cost     " << s.cost.cost << '\n';
  os << "  length   " << s.cost.length << '\n';
  os << "  feasible " << (s.cost.feasible ? "yes" : "no") << '\n';
  if (inst.kind == ProblemKind::TSPTW || inst.kind == ProblemKind::TSPDL) {
    os << "  n_out    " << s.cost.n_out << '\n';
    os << "  " << (inst.kind == ProblemKind::TSPTW ? "t_out    " : "d_out    ")
       << (inst.kind == ProblemKind::TSPTW ? s.cost.t_out : s.cost.d_out) << '\n';
  }
  if (inst.kind == ProblemKind::VRPTW) os << "  unvisited " << s.cost.unvisited << '\n';
}

// Appends one metrics row, writing the header first when the file is new.
void append_metrics(const std::string& path, const Metrics& m) {
  std::string contents;
  if (fs::exists(path)) {
    contents = read_file(path);
    if (contents.rfind(metrics_csv_header(), 0) != 0) throw Error(path + " is not a metrics CSV");
  } else {
    contents = metrics_csv_header();
  }
  atomic_write(path, contents + metrics_csv_row(m));
}

struct GenArgs {
  std::string kind = "tsp";
  std::size_t n = 8;
  std::size_t count = 1000;
  std::uint64_t seed = 1;
  std::string out;
};

int run_gen(const GenArgs& a) {
  const auto data = generate_dataset(parse_kind(a.kind), a.n, a.count, a.seed);
  write_dataset_file(a.out, data);
  std::cerr << "wrote " << data.size() << " instances to " << a.out << '\n';
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string profile = "toy";
  std::string out = "ckpt";
  std::string log;
  std::vector<std::string> sets;
  std::string kind;
  std::size_t n = 0, epochs = 0, batches = 0, batch_size = 0;
  double lr = 0.0;
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::size_t workers = 0;
  bool node_only = false;
  bool quiet = false;
};

RunConfig resolve_run_config(const TrainArgs& a) {
  RunConfig rc = profile(a.profile);
  rc.train.seed = default_seed();
  if (!a.config.empty()) apply_config_text(rc, read_file(a.config));
  if (!a.kind.empty()) rc.train.kind = parse_kind(a.kind);
  if (a.n) rc.train.nodes = a.n;
  if (a.epochs) rc.train.epochs = a.epochs;
  if (a.batches) rc.train.batches_per_epoch = a.batches;
  if (a.batch_size) rc.train.batch_size = a.batch_size;
  if (a.lr > 0.0) rc.train.lr = a.lr;
  if (a.seed_given) rc.train.seed = a.seed;
  if (a.node_only) rc.model.node_only = true;
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Error("--set expects key=value, got '" + kv + "'");
    if (!set_run_field(rc, kv.substr(0, eq), kv.substr(eq + 1))) throw Error("unknown config key '" + kv.substr(0, eq) + "'");
  }
  rc.train.workers = a.workers;
  rc.validate();
  return rc;
}

int run_train(const TrainArgs& a) {
  const RunConfig rc = resolve_run_config(a);
  fs::create_directories(a.out);
  atomic_write((fs::path(a.out) / "config.txt").string(), rc.to_text());
  Trainer trainer(rc);
  TrainOutputs outputs;
  outputs.checkpoint_dir = a.out;
  outputs.log_path = a.log.empty() ? (fs::path(a.out) / "train.csv").string() : a.log;
  outputs.progress = a.quiet ? nullptr : &std::cerr;
  const auto epochs = train(trainer, outputs);
  if (!epochs.empty() && epochs.back().validation_cost)
    std::cout << "final validation greedy cost " << std::setprecision(10) << *epochs.back().validation_cost << '\n';
  std::cout << "checkpoint " << (fs::path(a.out) / "final.egam").string() << '\n';
  if (trainer.skipped_batches() > 0) std::cerr << "skipped batches: " << trainer.skipped_batches() << '\n';
  return 0;
}

struct EvalArgs {
  std::string ckpt, data, mode = "greedy", ref = "none", out, solutions;
  std::uint64_t seed = 1;
  std::size_t workers = 0;
};

int run_eval(const EvalArgs& a, bool seed_given) {
  const auto data = read_dataset_file(a.data);
  if (data.empty()) throw Error(a.data + " holds no instances");
  const std::uint64_t seed = seed_given ? a.seed : default_seed();
  std::vector<Reference> refs;
  if (a.ref == "oracle") refs = reference_solutions(data, "auto", {}, resolve_workers(a.workers));
  else if (a.ref == "nn") refs = reference_solutions(data, "nearest_neighbor", {}, resolve_workers(a.workers));
  else if (a.ref != "none") refs = read_references_file(a.ref);
  if (!refs.empty() && refs.size() != data.size())
    throw Error("reference count " + std::to_string(refs.size()) + " does not match dataset size " +
                std::to_string(data.size()));
  const std::vector<Reference>* ref_ptr = refs.empty() ? nullptr : &refs;

  Metrics m;
  if (!a.solutions.empty()) {
    // Scores stored solutions instead of a model; every cost is recomputed from its sequence.
    const auto given = read_references_file(a.solutions);
    if (given.size() != data.size()) throw Error("solution count does not match dataset size");
    std::vector<SolutionCost> costs;
    for (std::size_t i = 0; i < data.size(); ++i) costs.push_back(solution_cost(data[i], given[i].sequence));
    m = compute_metrics(costs, ref_ptr);
    m.method = given.front().method;
    m.kind = kind_name(data.front().kind);
    m.n = data.front().size();
    m.mode = "file";
    m.seed = seed;
    m.checkpoint = a.solutions;
  } else {
    if (a.ckpt.empty()) throw Error("eval needs --ckpt or --solutions");
    const Policy policy = load_checkpoint(a.ckpt);
    for (const auto& inst : data)
      if (inst.kind != policy.kind())
        throw Error("dataset kind " + kind_name(inst.kind) + " does not match checkpoint kind " + kind_name(policy.kind()));
    InferenceOptions opt;
    opt.workers = resolve_workers(a.workers);
    m = evaluate_dataset(policy, data, parse_mode(a.mode), seed, ref_ptr, opt);
    m.checkpoint = a.ckpt;
  }
  if (!a.ref.empty() && a.ref != "none" && !m.gap) std::cerr << "warning: gap undefined (no mutually feasible pairs)\n";
  if (!a.out.empty()) append_metrics(a.out, m);
  std::cout << metrics_csv_header() << metrics_csv_row(m);
  return 0;
}

struct SolveArgs {
  std::string ckpt, instance_json, instance_file, mode = "greedy";
  std::uint64_t seed = 1;
  bool pretty = false;
};

int run_solve(const SolveArgs& a, bool seed_given) {
  if (a.instance_json.empty() == a.instance_file.empty())
    throw Error("solve needs exactly one of --instance-json or --instance");
  std::string text = a.instance_json;
  if (!a.instance_file.empty()) {
    text = read_file(a.instance_file);
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  }
  const Instance inst = instance_from_json(text);
  const Policy policy = load_checkpoint(a.ckpt);
  if (inst.kind != policy.kind()) throw Error("instance kind does not match checkpoint kind");
  const DecodeMode mode = parse_mode(a.mode);
  const std::uint64_t seed = seed_given ? a.seed : default_seed();
  const Solution s = solve_dataset(policy, {inst}, mode, seed).front();
  if (a.pretty) print_pretty(std::cout, s, inst, mode.to_string());
  else std::cout << solution_json(s, inst, mode.to_string()).dump() << '\n';
  return 0;
}

struct GradcheckArgs {
  std::string kind = "tsp";
  std::size_t n = 5, dm = 8, heads = 2, layers = 2, decoder_layers = 1;
  std::uint64_t seed = 3;
  double h = 1e-3;
  double tol = 1e-4;
  bool two_point = false, node_only = false;
};

int run_gradcheck(const GradcheckArgs& a, bool seed_given) {
  const ProblemKind kind = parse_kind(a.kind);
  if (a.heads == 0 || a.dm % a.heads != 0) throw Error("--dm must be a positive multiple of --heads");
  EgamConfig cfg;
  cfg.d_model = a.dm;
  cfg.heads = a.heads;
  cfg.d_key = a.dm / a.heads;
  cfg.d_ff = 2 * a.dm;
  cfg.encoder_layers = a.layers;
  cfg.decoder_layers = a.decoder_layers;
  cfg.node_only = a.node_only;
  cfg.validate();
  const std::uint64_t seed = seed_given ? a.seed : default_seed();
  Policy policy(cfg, kind, seed);
  const Instance inst = generate_instance(kind, a.n, seed);
  const auto tour = rollout_one(policy, inst, Decoding::Sample, seed).sequence;
  auto params = policy.params().all();
  const GradCheckResult r = grad_check(
      [&](Tape& tape) { return log_prob_of_tour_var(tape, policy, inst, tour); }, params, a.h,
      a.two_point ? Stencil::TwoPoint : Stencil::FivePoint);
  std::cout << std::setprecision(6) << "max_rel_error " << r.max_rel_error_active << '\n'
            << "worst_param " << r.worst_active_param << '\n'
            << "coordinates " << r.coordinates << " stationary " << r.stationary << " kinked " << r.kinked << '\n'
            << "stationary_max " << r.max_stationary_numeric << " noise_bound " << r.noise_bound << '\n'
            << "literal_max_rel_error " << r.max_rel_error << '\n';
  const bool ok = r.passed(a.tol);
  std::cout << (ok ? "PASS" : "FAIL") << '\n';
  return ok ? 0 : kExitNumerical;
}

struct OracleArgs {
  std::string data, out, method = "auto";
  std::size_t workers = 0;
};

int run_oracle(const OracleArgs& a) {
  const auto data = read_dataset_file(a.data);
  const auto refs = reference_solutions(data, a.method, {}, resolve_workers(a.workers));
  write_references_file(a.out, refs);
  double total = 0.0;
  std::size_t feasible = 0;
  for (const auto& r : refs) {
    total += r.cost;
    feasible += r.feasible;
  }
  std::cout << "instances " << refs.size() << " mean_cost " << std::setprecision(10)
            << (refs.empty() ? 0.0 : total / double(refs.size())) << " feasible " << feasible << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Edge-aware graph attention policies for routing problems"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a JSONL dataset");
  gen_cmd->add_option("--kind", gen.kind, "tsp|cvrp|pctsp|tsptw|tspdl|vrptw")->required();
  gen_cmd->add_option("--n", gen.n, "Nodes per instance (depot included)")->required()->check(CLI::Range(2, 100000));
  gen_cmd->add_option("--count", gen.count, "Number of instances")->check(CLI::PositiveNumber);
  auto* gen_seed = gen_cmd->add_option("--seed", gen.seed, "Dataset seed (default EGAM_SEED or 1)");
  gen_cmd->add_option("--out", gen.out, "Output path")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a policy with the symmetric REINFORCE baseline");
  train_cmd->add_option("--config", tr.config, "key=value config file applied over the profile");
  train_cmd->add_option("--profile", tr.profile, "toy|small|paper")->check(CLI::IsMember({"toy", "small", "paper"}));
  train_cmd->add_option("--out", tr.out, "Checkpoint directory");
  train_cmd->add_option("--log", tr.log, "Training log CSV (default <out>/train.csv)");
  train_cmd->add_option("--kind", tr.kind, "Problem kind");
  train_cmd->add_option("--n", tr.n, "Nodes per instance");
  train_cmd->add_option("--epochs", tr.epochs, "Epochs");
  train_cmd->add_option("--batches", tr.batches, "Batches per epoch");
  train_cmd->add_option("--batch-size", tr.batch_size, "Source instances per batch");
  train_cmd->add_option("--lr", tr.lr, "Base learning rate");
  train_cmd->add_option("--seed", tr.seed, "Run seed (default EGAM_SEED or 1)");
  train_cmd->add_flag("--node-only", tr.node_only, "Node-only ablation");
  train_cmd->add_option("--set", tr.sets, "Override any config key (key=value, repeatable)");
  train_cmd->add_option("--workers", tr.workers, "Worker threads (0 = all cores)");
  train_cmd->add_flag("--quiet", tr.quiet, "No per-epoch progress on stderr");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", ev.ckpt, "Checkpoint file");
  eval_cmd->add_option("--data", ev.data, "JSONL dataset")->required();
  eval_cmd->add_option("--mode", ev.mode, "greedy|sample:K|aug:MxN");
  eval_cmd->add_option("--ref", ev.ref, "oracle|nn|none|<references.jsonl>");
  eval_cmd->add_option("--solutions", ev.solutions, "Score stored solutions (references JSONL) instead of a model");
  auto* eval_seed = eval_cmd->add_option("--seed", ev.seed, "Sampling seed (default EGAM_SEED or 1)");
  eval_cmd->add_option("--out", ev.out, "Metrics CSV to append to");
  eval_cmd->add_option("--workers", ev.workers, "Worker threads (0 = all cores)");

  SolveArgs so;
  auto* solve_cmd = app.add_subcommand("solve", "Solve one instance, JSON on stdout");
  solve_cmd->add_option("--ckpt", so.ckpt, "Checkpoint file")->required();
  solve_cmd->add_option("--instance-json", so.instance_json, "Instance as one JSON object");
  solve_cmd->add_option("--instance", so.instance_file, "File holding one JSON instance");
  solve_cmd->add_option("--mode", so.mode, "greedy|sample:K|aug:MxN");
  auto* solve_seed = solve_cmd->add_option("--seed", so.seed, "Sampling seed (default EGAM_SEED or 1)");
  solve_cmd->add_flag("--pretty", so.pretty, "Human-readable output");

  GradcheckArgs gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full tour log-probability");
  gc_cmd->add_option("--kind", gc.kind, "Problem kind");
  gc_cmd->add_option("--n", gc.n, "Nodes")->check(CLI::Range(2, 64));
  gc_cmd->add_option("--dm", gc.dm, "Model width")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--heads", gc.heads, "Attention heads")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--layers", gc.layers, "Encoder layers");
  gc_cmd->add_option("--decoder-layers", gc.decoder_layers, "Decoder layers");
  auto* gc_seed = gc_cmd->add_option("--seed", gc.seed, "Parameter and instance seed");
  gc_cmd->add_option("--step", gc.h, "Finite-difference step")->check(CLI::PositiveNumber);
  gc_cmd->add_option("--tol", gc.tol, "Failure threshold")->check(CLI::PositiveNumber);
  gc_cmd->add_flag("--two-point", gc.two_point, "Two-point instead of five-point stencil");
  gc_cmd->add_flag("--node-only", gc.node_only, "Node-only ablation");

  OracleArgs orc;
  auto* oracle_cmd = app.add_subcommand("oracle", "Reference solutions for a dataset");
  oracle_cmd->add_option("--data", orc.data, "JSONL dataset")->required();
  oracle_cmd->add_option("--out", orc.out, "References JSONL")->required();
  oracle_cmd->add_option("--method", orc.method, "auto|held_karp|exhaustive|nearest_neighbor");
  oracle_cmd->add_option("--workers", orc.workers, "Worker threads (0 = all cores)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (app.exit(e) == 0) return 0;
    std::cerr << app.help();
    return 2;
  }

  try {
    if (*gen_cmd) {
      if (!*gen_seed) gen.seed = default_seed();
      return run_gen(gen);
    }
    if (*train_cmd) {
      tr.seed_given = train_cmd->count("--seed") > 0;
      return run_train(tr);
    }
    if (*eval_cmd) return run_eval(ev, eval_seed->count() > 0);
    if (*solve_cmd) return run_solve(so, solve_seed->count() > 0);
    if (*gc_cmd) return run_gradcheck(gc, gc_seed->count() > 0);
    if (*oracle_cmd) return run_oracle(orc);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitData;
}
