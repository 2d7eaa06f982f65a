#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "egam/tensor.hpp"

namespace egam {

// Trainable tensor with its gradient slot.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
  std::size_t index = 0;  // position inside the owning ParamStore

  void zero_grad() { grad.fill(Real(0)); }
};

// Owns parameters in registration order; references stay valid for its lifetime.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore& other);
  ParamStore& operator=(const ParamStore& other);
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Param& add(std::string name, Shape shape, Real fill = Real(0));
  // Uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
  Param& add_uniform(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng);

  std::size_t size() const { return params_.size(); }
  std::size_t scalar_count() const;
  Param& operator[](std::size_t i) { return *params_[i]; }
  const Param& operator[](std::size_t i) const { return *params_[i]; }
  Param* find(const std::string& name);
  const Param* find(const std::string& name) const;
  std::vector<Param*> all();

  void zero_grad();
  double grad_norm() const;

 private:
  std::vector<std::unique_ptr<Param>> params_;
};

// Per-graph gradient destination, merged into Param::grad at a synchronization point.
class GradBuffer {
 public:
  GradBuffer() = default;
  explicit GradBuffer(const ParamStore& store);

  Tensor& at(std::size_t index) { return grads_[index]; }
  const Tensor& at(std::size_t index) const { return grads_[index]; }
  std::size_t size() const { return grads_.size(); }
  void zero();
  void add_into(ParamStore& store) const;

 private:
  std::vector<Tensor> grads_;
};

// 1 = masked (excluded from softmax / attention).
using Mask = std::vector<std::uint8_t>;

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

// Reverse-mode computation graph. One tape is built and consumed by a single
// worker; parameters are read through pointers and never written here.
class Tape {
 public:
  using Backward = std::function<void(Tape&, int)>;

  // Parameter gradients go to `sink` when given, otherwise to Param::grad.
  explicit Tape(GradBuffer* sink = nullptr) : sink_(sink) {}
  // With gradients disabled, parameters enter as constants and no backward closures are kept.
  void set_grad_enabled(bool enabled) { grad_enabled_ = enabled; }
  bool grad_enabled() const { return grad_enabled_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(Param& p);

  // Seeds d(root)/d(root) = 1 for a scalar root.
  void backward(Var root);
  void backward(Var root, const Tensor& seed);

  const Tensor& value(int id) const;
  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  // Gradient slot, allocated as zeros on first access.
  Tensor& grad(int id);
  bool has_grad(int id) const { return !nodes_[id].grad.empty(); }

  // Records an op output. `backward` is dropped when no input needs a gradient.
  Var record(Tensor value, std::span<const Var> inputs, Backward backward, const char* name);
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward, const char* name) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward), name);
  }

  std::size_t node_count() const { return nodes_.size(); }
  // Hash of every relu's active pattern on this tape; equal hashes mean the same
  // smooth piece of the function.
  std::uint64_t kink_signature() const { return kink_signature_; }
  void mix_kink_signature(std::uint64_t h) { kink_signature_ = (kink_signature_ ^ h) * 0x100000001B3ULL; }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Tensor grad;
    Param* param = nullptr;
    Backward backward;
    bool requires_grad = false;
  };

  void flush_param_grads();

  std::vector<Node> nodes_;
  std::vector<std::pair<const Param*, int>> param_nodes_;
  GradBuffer* sink_ = nullptr;
  bool grad_enabled_ = true;
  std::uint64_t kink_signature_ = 0xCBF29CE484222325ULL;
};

namespace ad {

Var add(Var a, Var b);
Var scale(Var x, Real c);
Var relu(Var x);
// y = x W^T + b over the trailing axis; W is [out, in].
Var linear(Var x, Var weight, Var bias);
Var linear(Var x, Var weight);
Var reshape(Var x, Shape shape);
Var concat(std::span<const Var> parts, std::size_t axis);
// Rows along axis 0, in the given order (repeats allowed).
Var gather_rows(Var x, std::vector<std::size_t> rows);
// x is [batch, set, d]; normalizes over the set axis per (batch, channel).
Var instance_norm(Var x, Var gamma, Var beta, Real eps = Real(1e-5));
// q [G, M, H*dk], k [G, S, H*dk], v [G, S, H*dv]; mask [G, S] or null.
// Per head: softmax(q k^T / sqrt(dk)) v. Output [G, M, H*dv].
Var attention(Var q, Var k, Var v, std::size_t heads, const Mask* mask = nullptr);
// q [G, d], k [G, S, d] -> [G, S] dot products.
Var row_dot(Var q, Var k);
// alpha * tanh(x)
Var tanh_clip(Var x, Real alpha);
// Softmax over the trailing axis with masked entries exactly zero.
Var softmax_masked(Var x, const Mask& mask);
// log softmax_masked(x)[r, pick[r]] for every row r -> [rows].
Var log_softmax_pick(Var x, const Mask& mask, std::vector<std::size_t> pick);
Var sum(Var x);
// sum_i x_i * w_i with constant weights.
Var weighted_sum(Var x, Tensor weights);

}  // namespace ad

struct AdamConfig {
  Real beta1 = Real(0.9);
  Real beta2 = Real(0.999);
  Real eps = Real(1e-8);
};

// First/second moments per parameter plus the shared step counter.
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore& store, AdamConfig config = {});

  // Bias-corrected update from Param::grad, then zeroes the grads.
  void step(ParamStore& store, Real lr);

  std::size_t steps() const { return steps_; }
  const AdamConfig& config() const { return config_; }
  const Tensor& first_moment(std::size_t i) const { return m_[i]; }
  const Tensor& second_moment(std::size_t i) const { return v_[i]; }

 private:
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::size_t steps_ = 0;
};

struct GradCheckResult {
  // Over every coordinate, with the max(1e-8, ...) floor.
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  // Coordinates whose analytic gradient is zero up to rounding in f. Their finite
  // difference is pure rounding noise, so only an absolute bound is meaningful.
  std::size_t stationary = 0;
  double max_stationary_numeric = 0.0;
  double noise_bound = 0.0;
  // Coordinates where even the smallest step crossed a relu kink.
  std::size_t kinked = 0;
  // Same as max_rel_error, restricted to smooth non-stationary coordinates.
  double max_rel_error_active = 0.0;
  std::string worst_active_param;

  bool passed(double tol) const { return max_rel_error_active < tol && max_stationary_numeric <= noise_bound; }
};

enum class Stencil { TwoPoint, FivePoint };

// Compares backward() against central differences for every coordinate of
// `params`: (f(p+h) - f(p-h)) / 2h, or the O(h^4) five-point
// (f(p-2h) - 8 f(p-h) + 8 f(p+h) - f(p+2h)) / 12h. Error per coordinate is
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|). When a stencil point
// lands on a different relu pattern the step is divided by 4, up to 6 times.
// `f` must build a scalar on the given tape and be deterministic.
GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Param* const> params,
                           double h = 1e-5, Stencil stencil = Stencil::TwoPoint);

}  // namespace egam
