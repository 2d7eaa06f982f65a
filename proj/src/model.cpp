#include "egam/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <tuple>

namespace egam {

std::size_t parse_size_field(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw Error("config field '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
}

double parse_real_field(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw Error("config field '" + key + "' expects a number, got '" + value + "'");
  }
}

bool parse_bool_field(const std::string& key, const std::string& value) {
  if (value == "1" || value == "true") return true;
  if (value == "0" || value == "false") return false;
  throw Error("config field '" + key + "' expects true/false, got '" + value + "'");
}


void EgamConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_key == 0 || d_ff == 0) throw Error("model dimensions must be positive");
  if (heads * d_key != d_model) throw Error("heads * d_key must equal d_model");
  if (decoder_layers < 1) throw Error("at least one decoder layer is required");
  if (!(clip > 0.0)) throw Error("clip must be positive");
}

std::string EgamConfig::to_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "d_model=" << d_model << '\n'
     << "heads=" << heads << '\n'
     << "d_key=" << d_key << '\n'
     << "d_ff=" << d_ff << '\n'
     << "encoder_layers=" << encoder_layers << '\n'
     << "decoder_layers=" << decoder_layers << '\n'
     << "clip=" << clip << '\n'
     << "node_only=" << (node_only ? "true" : "false") << '\n'
     << "directed=" << (directed ? "true" : "false") << '\n'
     << "precision=" << (sizeof(Real) == 8 ? "double" : "single") << '\n';
  return os.str();
}

bool set_config_field(EgamConfig& c, const std::string& key, const std::string& value) {
  if (key == "d_model") c.d_model = parse_size_field(key, value);
  else if (key == "heads") c.heads = parse_size_field(key, value);
  else if (key == "d_key") c.d_key = parse_size_field(key, value);
  else if (key == "d_ff") c.d_ff = parse_size_field(key, value);
  else if (key == "encoder_layers") c.encoder_layers = parse_size_field(key, value);
  else if (key == "decoder_layers") c.decoder_layers = parse_size_field(key, value);
  else if (key == "clip") c.clip = parse_real_field(key, value);
  else if (key == "node_only") c.node_only = parse_bool_field(key, value);
  else if (key == "directed") c.directed = parse_bool_field(key, value);
  else if (key == "precision") {
    const std::string built = sizeof(Real) == 8 ? "double" : "single";
    if (value != built) throw Error("precision '" + value + "' requested but this build uses " + built);
  } else {
    return false;
  }
  return true;
}

EgamConfig parse_model_config(const std::string& text) {
  EgamConfig c;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("malformed config line '" + line + "'");
    if (!set_config_field(c, line.substr(0, eq), line.substr(eq + 1)))
      throw Error("unknown model config key '" + line.substr(0, eq) + "'");
  }
  return c;
}

// ---------------------------------------------------------------- Policy

Policy::Policy(const EgamConfig& config, ProblemKind kind, std::uint64_t seed) : config_(config), kind_(kind) {
  config_.validate();
  build(seed);
}

Policy::Policy(const Policy& other) : config_(other.config_), kind_(other.kind_) {
  build(0);
  for (std::size_t i = 0; i < params_.size(); ++i) params_[i].value = other.params_[i].value;
}

Policy& Policy::operator=(const Policy& other) {
  if (this != &other) {
    Policy copy(other);
    *this = std::move(copy);
  }
  return *this;
}

void Policy::build(std::uint64_t seed) {
  params_ = ParamStore();
  encoder_.clear();
  decoder_.clear();
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d_model, fn = node_dim();
  const AttentionDims dims = config_.dims();
  init_node_w_ = &params_.add_uniform("init.node.w", {d, fn}, fn, rng);
  init_node_b_ = &params_.add_uniform("init.node.b", {d}, fn, rng);
  if (has_depot(kind_)) {
    init_depot_w_ = &params_.add_uniform("init.depot.w", {d, fn}, fn, rng);
    init_depot_b_ = &params_.add_uniform("init.depot.b", {d}, fn, rng);
  }
  if (!config_.node_only) {
    init_edge_w_ = &params_.add_uniform("init.edge.w", {d, kEdgeFeatureDim}, kEdgeFeatureDim, rng);
    init_edge_b_ = &params_.add_uniform("init.edge.b", {d}, kEdgeFeatureDim, rng);
  }
  for (std::size_t l = 0; l < config_.encoder_layers; ++l)
    encoder_.push_back(
        make_encoder_layer(params_, "enc." + std::to_string(l), dims, config_.node_only, config_.directed, rng));
  const std::size_t ctx_in = kind_ == ProblemKind::TSP ? 2 * d : d + context_scalar_dim(kind_);
  ctx_w_ = &params_.add_uniform("ctx.w", {d, ctx_in}, ctx_in, rng);
  ctx_b_ = &params_.add_uniform("ctx.b", {d}, ctx_in, rng);
  if (kind_ == ProblemKind::TSP) {
    placeholder_cur_ = &params_.add_uniform("ctx.placeholder_current", {1, d}, d, rng);
    placeholder_start_ = &params_.add_uniform("ctx.placeholder_start", {1, d}, d, rng);
  }
  for (std::size_t k = 0; k < config_.decoder_layers; ++k) {
    const std::string prefix = "dec." + std::to_string(k);
    DecoderLayerParams layer;
    layer.node_node = make_mha(params_, prefix + ".node_node", dims, rng);
    if (!config_.node_only) layer.node_edge = make_mha(params_, prefix + ".node_edge", dims, rng);
    layer.ff = make_ff(params_, prefix + ".ff", dims, rng);
    decoder_.push_back(layer);
  }
  out_q_ = &params_.add_uniform("out.wq", {d, d}, d, rng);
  out_k_ = &params_.add_uniform("out.wk", {d, d}, d, rng);
}

Encoding Policy::encode(Tape& tape, const std::vector<const Instance*>& batch) const {
  if (batch.empty()) throw Error("encode: empty batch");
  const std::size_t B = batch.size(), N = batch[0]->size(), d = config_.d_model, fn = node_dim();
  Tensor nf({B * N, fn});
  Tensor ef({B * N * N, kEdgeFeatureDim});
  for (std::size_t b = 0; b < B; ++b) {
    const Instance& inst = *batch[b];
    if (inst.kind != kind_) throw DimensionError("encode: instance kind does not match the policy");
    if (inst.size() != N) throw DimensionError("encode: instances in a batch must share one size");
    const Tensor x = node_features(inst);
    if (x.cols() != fn) throw DimensionError("encode: node feature width mismatch");
    std::copy(x.data().begin(), x.data().end(), nf.ptr() + b * N * fn);
    if (!config_.node_only) {
      const Tensor e = edge_features(inst);
      std::copy(e.data().begin(), e.data().end(), ef.ptr() + b * N * N);
    }
  }
  Var feats = tape.constant(std::move(nf));
  Var nodes = ad::linear(feats, p(tape, init_node_w_), p(tape, init_node_b_));
  if (has_depot(kind_)) {
    std::vector<std::size_t> depot_rows(B);
    for (std::size_t b = 0; b < B; ++b) depot_rows[b] = b * N;
    Var depot = ad::linear(ad::gather_rows(feats, depot_rows), p(tape, init_depot_w_), p(tape, init_depot_b_));
    const Var parts[] = {nodes, depot};
    std::vector<std::size_t> rows(B * N);
    for (std::size_t r = 0; r < B * N; ++r) rows[r] = r % N == 0 ? B * N + r / N : r;
    nodes = ad::gather_rows(ad::concat(parts, 0), std::move(rows));
  }
  nodes = ad::reshape(nodes, {B, N, d});
  Var edges;
  if (!config_.node_only)
    edges = ad::reshape(ad::linear(tape.constant(std::move(ef)), p(tape, init_edge_w_), p(tape, init_edge_b_)),
                        {B, N, N, d});
  for (const auto& layer : encoder_) std::tie(nodes, edges) = encoder_layer(nodes, edges, layer, config_.node_only);

  Encoding enc;
  enc.batch = B;
  enc.nodes = N;
  enc.node_emb = nodes;
  enc.edge_emb = edges;
  Var node_flat = ad::reshape(nodes, {B * N, d});
  if (kind_ == ProblemKind::TSP) {
    const Var parts[] = {node_flat, p(tape, placeholder_cur_), p(tape, placeholder_start_)};
    enc.context_table = ad::concat(parts, 0);
  } else {
    enc.context_table = node_flat;
  }
  const std::size_t hk = config_.heads * config_.d_key;
  for (const auto& layer : decoder_) {
    Encoding::LayerCache cache;
    cache.nn_keys = ad::reshape(ad::linear(nodes, p(tape, layer.node_node.wk)), {B, N * hk});
    cache.nn_values = ad::reshape(ad::linear(nodes, p(tape, layer.node_node.wv)), {B, N * hk});
    if (!config_.node_only) {
      cache.ne_keys = ad::reshape(ad::linear(edges, p(tape, layer.node_edge.wk)), {B * N * N, hk});
      cache.ne_values = ad::reshape(ad::linear(edges, p(tape, layer.node_edge.wv)), {B * N * N, hk});
    }
    enc.layers.push_back(cache);
  }
  enc.out_keys = config_.node_only ? ad::linear(node_flat, p(tape, out_k_))
                                   : ad::reshape(ad::linear(edges, p(tape, out_k_)), {B * N * N, d});
  return enc;
}

Var Policy::step_logits(const Encoding& enc, const std::vector<StepQuery>& queries, const Mask& mask) const {
  Tape& tape = *enc.node_emb.tape();
  const std::size_t Q = queries.size(), N = enc.nodes, B = enc.batch, d = config_.d_model;
  const std::size_t hk = config_.heads * config_.d_key;
  if (mask.size() != Q * N) throw DimensionError("step_logits: mask must be [queries, nodes]");
  constexpr std::size_t none = DecodeState::kNone;

  std::vector<std::size_t> cur_rows(Q), batch_rows(Q), edge_rows(Q * N), node_rows(Q * N);
  for (std::size_t q = 0; q < Q; ++q) {
    const StepQuery& s = queries[q];
    if (s.b >= B) throw DimensionError("step_logits: query refers to a missing encoding");
    batch_rows[q] = s.b;
    cur_rows[q] = s.current == none ? B * N : s.b * N + s.current;
    for (std::size_t j = 0; j < N; ++j) {
      const std::size_t from = s.current == none ? j : s.current;
      edge_rows[q * N + j] = (s.b * N + from) * N + j;
      node_rows[q * N + j] = s.b * N + j;
    }
  }

  Var raw;
  if (kind_ == ProblemKind::TSP) {
    std::vector<std::size_t> start_rows(Q);
    for (std::size_t q = 0; q < Q; ++q)
      start_rows[q] = queries[q].start == none ? B * N + 1 : queries[q].b * N + queries[q].start;
    const Var parts[] = {ad::gather_rows(enc.context_table, cur_rows),
                         ad::gather_rows(enc.context_table, std::move(start_rows))};
    raw = ad::concat(parts, 1);
  } else {
    const std::size_t ns = context_scalar_dim(kind_);
    Tensor scalars({Q, ns});
    for (std::size_t q = 0; q < Q; ++q) {
      if (queries[q].scalars.size() != ns) throw DimensionError("step_logits: context scalar width mismatch");
      for (std::size_t i = 0; i < ns; ++i) scalars[q * ns + i] = static_cast<Real>(queries[q].scalars[i]);
    }
    const Var parts[] = {ad::gather_rows(enc.context_table, cur_rows), tape.constant(std::move(scalars))};
    raw = ad::concat(parts, 1);
  }
  Var c = ad::reshape(ad::linear(raw, p(tape, ctx_w_), p(tape, ctx_b_)), {Q, 1, d});

  for (std::size_t k = 0; k < decoder_.size(); ++k) {
    const DecoderLayerParams& layer = decoder_[k];
    const Encoding::LayerCache& cache = enc.layers[k];
    Var kn = ad::reshape(ad::gather_rows(cache.nn_keys, batch_rows), {Q, N, hk});
    Var vn = ad::reshape(ad::gather_rows(cache.nn_values, batch_rows), {Q, N, hk});
    c = ad::add(c, mha_projected(c, kn, vn, layer.node_node, &mask));
    if (!config_.node_only) {
      Var ke = ad::reshape(ad::gather_rows(cache.ne_keys, edge_rows), {Q, N, hk});
      Var ve = ad::reshape(ad::gather_rows(cache.ne_values, edge_rows), {Q, N, hk});
      c = ad::add(c, mha_projected(c, ke, ve, layer.node_edge, &mask));
    }
    c = ff_residual(c, layer.ff);
  }
  Var q = ad::linear(ad::reshape(c, {Q, d}), p(tape, out_q_));
  Var keys = ad::reshape(ad::gather_rows(enc.out_keys, config_.node_only ? node_rows : edge_rows), {Q, N, d});
  Var u = ad::scale(ad::row_dot(q, keys), static_cast<Real>(1.0 / std::sqrt(static_cast<double>(d))));
  return ad::tanh_clip(u, static_cast<Real>(config_.clip));
}

Rollout Policy::rollout(const Encoding& enc, const std::vector<const Instance*>& batch,
                        const std::vector<TrajectorySpec>& specs, Decoding mode) const {
  const std::size_t T = specs.size(), N = enc.nodes;
  if (batch.size() != enc.batch) throw DimensionError("rollout: batch does not match encoding");
  Rollout out;
  out.states.resize(T);
  out.log_prob.assign(T, 0.0);
  out.step_log_probs.resize(T);
  std::vector<std::mt19937_64> rngs;
  rngs.reserve(T);
  std::vector<std::size_t> cursor(T, 0);
  std::vector<std::size_t> decisions(T, 0);
  for (std::size_t t = 0; t < T; ++t) {
    const TrajectorySpec& s = specs[t];
    if (s.instance >= batch.size()) throw Error("rollout: trajectory refers to a missing instance");
    const Instance& inst = *batch[s.instance];
    out.states[t] = initial_state(inst);
    if (kind_ == ProblemKind::TSP && s.start) update_state(out.states[t], *s.start, inst);
    rngs.emplace_back(s.rng_seed);
  }

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::uint8_t> row_mask;
  std::vector<double> probs(N);
  for (;;) {
    std::vector<std::size_t> active;
    std::vector<StepQuery> queries;
    Mask mask;
    for (std::size_t t = 0; t < T; ++t) {
      DecodeState& st = out.states[t];
      if (st.terminated) continue;
      const Instance& inst = *batch[specs[t].instance];
      if (++decisions[t] > step_budget(inst)) throw Error("runaway decode: step budget exceeded");
      row_mask = feasible_mask(st, inst);
      const std::size_t open = static_cast<std::size_t>(std::count(row_mask.begin(), row_mask.end(), 0));
      if (open == 1) {
        // A forced move has probability exactly 1 and contributes log 1 = 0.
        const std::size_t only = static_cast<std::size_t>(std::find(row_mask.begin(), row_mask.end(), 0) - row_mask.begin());
        if (specs[t].forced) {
          const auto& f = *specs[t].forced;
          if (cursor[t] >= f.size() || f[cursor[t]] != only) throw InvalidTransition("forced tour violates the mask");
          ++cursor[t];
        }
        update_state(st, only, inst);
        out.step_log_probs[t].push_back(0.0);
        continue;
      }
      active.push_back(t);
      queries.push_back({specs[t].instance, st.current, st.start, context_scalars(st, inst)});
      mask.insert(mask.end(), row_mask.begin(), row_mask.end());
    }
    if (active.empty()) {
      if (std::all_of(out.states.begin(), out.states.end(), [](const DecodeState& s) { return s.terminated; })) break;
      continue;
    }

    Var logits = step_logits(enc, queries, mask);
    const Tensor& u = logits.value();
    std::vector<std::size_t> picks(active.size());
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t t = active[a];
      const Real* row = u.ptr() + a * N;
      const std::uint8_t* m = mask.data() + a * N;
      std::size_t pick = N;
      if (specs[t].forced) {
        const auto& f = *specs[t].forced;
        if (cursor[t] >= f.size()) throw InvalidTransition("forced tour ends before the route terminates");
        pick = f[cursor[t]++];
        if (pick >= N || m[pick]) throw InvalidTransition("forced tour violates the mask");
      } else if (mode == Decoding::Greedy) {
        for (std::size_t j = 0; j < N; ++j)
          if (!m[j] && (pick == N || row[j] > row[pick])) pick = j;
      } else {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < N; ++j)
          if (!m[j]) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
          probs[j] = m[j] ? 0.0 : std::exp(static_cast<double>(row[j]) - mx);
          z += probs[j];
        }
        const double r = unit(rngs[t]) * z;
        double acc = 0.0;
        for (std::size_t j = 0; j < N; ++j) {
          if (m[j]) continue;
          pick = j;
          acc += probs[j];
          if (r < acc) break;
        }
      }
      picks[a] = pick;
    }
    Var lp = ad::log_softmax_pick(logits, mask, picks);
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t t = active[a];
      const double v = static_cast<double>(lp.value()[a]);
      out.log_prob[t] += v;
      out.step_log_probs[t].push_back(v);
      update_state(out.states[t], picks[a], *batch[specs[t].instance]);
    }
    out.steps.push_back({lp, std::move(active)});
  }
  for (std::size_t t = 0; t < T; ++t)
    if (specs[t].forced && cursor[t] != specs[t].forced->size())
      throw InvalidTransition("forced tour continues after the route terminated");
  return out;
}

// ---------------------------------------------------------------- conveniences

Solution to_solution(const DecodeState& state, const Instance& inst, double log_prob,
                     std::vector<double> step_log_probs, const EnvConfig& env) {
  Solution s;
  s.sequence = state.sequence;
  s.cost = state_cost(state, inst, env);
  s.log_prob = log_prob;
  s.step_log_probs = std::move(step_log_probs);
  return s;
}

Solution rollout_one(const Policy& policy, const Instance& inst, Decoding mode, std::uint64_t rng_seed,
                     std::optional<std::size_t> tsp_start, const EnvConfig& env) {
  Tape tape;
  tape.set_grad_enabled(false);
  const std::vector<const Instance*> batch{&inst};
  Encoding enc = policy.encode(tape, batch);
  TrajectorySpec spec;
  spec.rng_seed = rng_seed;
  if (inst.kind == ProblemKind::TSP) spec.start = tsp_start;
  Rollout r = policy.rollout(enc, batch, {spec}, mode);
  return to_solution(r.states[0], inst, r.log_prob[0], std::move(r.step_log_probs[0]), env);
}

namespace {

struct ForcedTour {
  std::optional<std::size_t> start;
  std::vector<std::size_t> decisions;
};

ForcedTour split_tour(const Instance& inst, const std::vector<std::size_t>& sequence, bool model_start) {
  ForcedTour f;
  if (inst.kind == ProblemKind::TSP) {
    if (sequence.empty()) throw InvalidTransition("empty tour");
    if (model_start) {
      f.decisions = sequence;
    } else {
      f.start = sequence[0];
      f.decisions.assign(sequence.begin() + 1, sequence.end());
    }
  } else if ((inst.kind == ProblemKind::TSPTW || inst.kind == ProblemKind::TSPDL) && !sequence.empty() &&
             sequence[0] == 0) {
    f.decisions.assign(sequence.begin() + 1, sequence.end());
  } else {
    f.decisions = sequence;
  }
  return f;
}

}  // namespace

Var log_prob_of_tour_var(Tape& tape, const Policy& policy, const Instance& inst,
                         const std::vector<std::size_t>& sequence, bool model_start) {
  const ForcedTour f = split_tour(inst, sequence, model_start);
  const std::vector<const Instance*> batch{&inst};
  Encoding enc = policy.encode(tape, batch);
  TrajectorySpec spec;
  spec.start = f.start;
  spec.forced = &f.decisions;
  Rollout r = policy.rollout(enc, batch, {spec}, Decoding::Greedy);
  if (r.steps.empty()) return tape.constant(Tensor({}, Real(0)));
  std::vector<Var> parts;
  for (const auto& s : r.steps) parts.push_back(s.log_prob);
  Var total = ad::sum(parts[0]);
  for (std::size_t i = 1; i < parts.size(); ++i) total = ad::add(total, ad::sum(parts[i]));
  return total;
}

double log_prob_of_tour(const Policy& policy, const Instance& inst, const std::vector<std::size_t>& sequence,
                        bool model_start) {
  const ForcedTour f = split_tour(inst, sequence, model_start);
  Tape tape;
  tape.set_grad_enabled(false);
  const std::vector<const Instance*> batch{&inst};
  Encoding enc = policy.encode(tape, batch);
  TrajectorySpec spec;
  spec.start = f.start;
  spec.forced = &f.decisions;
  return policy.rollout(enc, batch, {spec}, Decoding::Greedy).log_prob[0];
}

Tensor decoder_probabilities(const Policy& policy, const Instance& inst, const std::vector<DecodeState>& states) {
  Tape tape;
  tape.set_grad_enabled(false);
  const std::vector<const Instance*> batch{&inst};
  Encoding enc = policy.encode(tape, batch);
  std::vector<StepQuery> queries;
  Mask mask;
  for (const auto& st : states) {
    queries.push_back({0, st.current, st.start, context_scalars(st, inst)});
    const auto m = feasible_mask(st, inst);
    mask.insert(mask.end(), m.begin(), m.end());
  }
  return ad::softmax_masked(policy.step_logits(enc, queries, mask), mask).value();
}

// ---------------------------------------------------------------- checkpoints

namespace {

constexpr char kMagic[4] = {'E', 'G', 'A', 'M'};
constexpr std::uint32_t kFormatVersion = 1;

template <typename T>
void put(std::string& out, T v) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw Error("checkpoint truncated");
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string checkpoint_bytes(const Policy& policy) {
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kFormatVersion);
  const std::string cfg = policy.config().to_text();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cfg.size()));
  out += cfg;
  const std::string kind = kind_name(policy.kind());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kind.size()));
  out += kind;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(policy.node_dim()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(kEdgeFeatureDim));
  const ParamStore& ps = policy.params();
  put<std::uint64_t>(out, ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Param& prm = ps[i];
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.name.size()));
    out += prm.name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(prm.value.rank()));
    for (auto dim : prm.value.shape()) put<std::uint64_t>(out, dim);
    for (Real v : prm.value.data()) put<double>(out, static_cast<double>(v));
  }
  return out;
}

void save_checkpoint(const Policy& policy, const std::string& path) { atomic_write(path, checkpoint_bytes(policy)); }

Policy load_checkpoint_bytes(const std::string& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw Error("not a checkpoint file (bad magic)");
  const auto version = r.get<std::uint32_t>();
  if (version != kFormatVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  const EgamConfig config = parse_model_config(r.str(r.get<std::uint32_t>()));
  const ProblemKind kind = parse_kind(r.str(r.get<std::uint32_t>()));
  Policy policy(config, kind, 0);
  if (r.get<std::uint32_t>() != policy.node_dim()) throw Error("checkpoint node feature width mismatch");
  if (r.get<std::uint32_t>() != kEdgeFeatureDim) throw Error("checkpoint edge feature width mismatch");
  ParamStore& ps = policy.params();
  if (r.get<std::uint64_t>() != ps.size()) throw Error("checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Param& prm = ps[i];
    const std::string name = r.str(r.get<std::uint32_t>());
    if (name != prm.name) throw Error("checkpoint parameter '" + name + "' where '" + prm.name + "' was expected");
    Shape shape(r.get<std::uint32_t>());
    for (auto& dim : shape) dim = static_cast<std::size_t>(r.get<std::uint64_t>());
    if (shape != prm.value.shape())
      throw Error("checkpoint shape " + shape_string(shape) + " for '" + name + "' does not match " +
                  shape_string(prm.value.shape()));
    for (Real& v : prm.value.data()) v = static_cast<Real>(r.get<double>());
    prm.value.check_finite("checkpoint load");
  }
  if (!r.done()) throw Error("trailing bytes after checkpoint payload");
  return policy;
}

Policy load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return load_checkpoint_bytes(os.str());
}

}  // namespace egam
