#include "egam/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace egam {

namespace {

using MatR = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapR = Eigen::Map<MatR>;
using CMapR = Eigen::Map<const MatR>;
using VecR = Eigen::Matrix<Real, 1, Eigen::Dynamic>;

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

void accumulate(Tensor& dst, const Tensor& src) {
  Real* d = dst.ptr();
  const Real* s = src.ptr();
  const std::size_t n = src.size();
  for (std::size_t i = 0; i < n; ++i) d[i] += s[i];
}

}  // namespace

// ---------------------------------------------------------------- ParamStore

ParamStore::ParamStore(const ParamStore& other) { *this = other; }

ParamStore& ParamStore::operator=(const ParamStore& other) {
  if (this == &other) return *this;
  params_.clear();
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Param>(*p));
  return *this;
}

Param& ParamStore::add(std::string name, Shape shape, Real fill) {
  if (find(name)) throw Error("duplicate parameter name: " + name);
  auto p = std::make_unique<Param>();
  p->name = std::move(name);
  p->value = Tensor(shape, fill);
  p->grad = Tensor(std::move(shape));
  p->index = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

Param& ParamStore::add_uniform(std::string name, Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  Param& p = add(std::move(name), std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : p.value.storage()) v = static_cast<Real>(dist(rng));
  return p;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

Param* ParamStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Param* ParamStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

std::vector<Param*> ParamStore::all() {
  std::vector<Param*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

double ParamStore::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_)
    for (Real g : p->grad.data()) s += static_cast<double>(g) * g;
  return std::sqrt(s);
}

// ---------------------------------------------------------------- GradBuffer

GradBuffer::GradBuffer(const ParamStore& store) {
  grads_.reserve(store.size());
  for (std::size_t i = 0; i < store.size(); ++i) grads_.emplace_back(store[i].value.shape());
}

void GradBuffer::zero() {
  for (auto& g : grads_) g.fill(Real(0));
}

void GradBuffer::add_into(ParamStore& store) const {
  if (store.size() != grads_.size()) throw DimensionError("gradient buffer does not match parameter store");
  for (std::size_t i = 0; i < grads_.size(); ++i) accumulate(store[i].grad, grads_[i]);
}

// ---------------------------------------------------------------- Tape

const Tensor& Var::value() const { return tape_->value(id_); }

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_[id];
  return n.external ? *n.external : n.value;
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(value(id).shape());
  return n.grad;
}

Var Tape::constant(Tensor value) {
  value.check_finite("constant");
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::param(Param& p) {
  for (const auto& [ptr, id] : param_nodes_)
    if (ptr == &p) return Var(this, id);
  Node n;
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  const int id = static_cast<int>(nodes_.size() - 1);
  param_nodes_.emplace_back(&p, id);
  return Var(this, id);
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward, const char* name) {
  value.check_finite(name);
  Node n;
  n.value = std::move(value);
  for (const Var& v : inputs) {
    if (v.tape() != this) throw Error(std::string("operand of ") + name + " belongs to another tape");
    n.requires_grad = n.requires_grad || nodes_[v.id()].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

void Tape::backward(Var root) {
  if (root.value().size() != 1) throw DimensionError("backward() needs a scalar root");
  backward(root, Tensor(root.shape(), Real(1)));
}

void Tape::backward(Var root, const Tensor& seed) {
  if (seed.shape() != root.shape()) throw DimensionError("backward seed shape mismatch");
  accumulate(grad(root.id()), seed);
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.backward && !n.grad.empty()) {
      n.grad.check_finite("backward pass");
      n.backward(*this, id);
    }
  }
  flush_param_grads();
}

void Tape::flush_param_grads() {
  for (auto& [ptr, id] : param_nodes_) {
    Node& n = nodes_[id];
    if (n.grad.empty()) continue;
    n.grad.check_finite("parameter gradient");
    Tensor& dst = sink_ ? sink_->at(ptr->index) : n.param->grad;
    accumulate(dst, n.grad);
    n.grad.fill(Real(0));
  }
}

// ---------------------------------------------------------------- primitives

namespace ad {

Var add(Var a, Var b) {
  require(a.shape() == b.shape(), "add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor out = a.value();
  accumulate(out, b.value());
  const int ia = a.id(), ib = b.id();
  return a.tape()->record(
      std::move(out), {a, b},
      [ia, ib](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        if (t.requires_grad(ia)) accumulate(t.grad(ia), g);
        if (t.requires_grad(ib)) accumulate(t.grad(ib), g);
      },
      "add");
}

Var scale(Var x, Real c) {
  Tensor out = x.value();
  for (auto& v : out.storage()) v *= c;
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, c](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += c * g[i];
      },
      "scale");
}

Var relu(Var x) {
  Tensor out = x.value();
  std::uint64_t pattern = 0;
  std::size_t i = 0;
  for (auto& v : out.storage()) {
    if (v > Real(0)) pattern += (i + 1) * 0x9E3779B97F4A7C15ULL;
    else v = Real(0);
    ++i;
  }
  x.tape()->mix_kink_signature(pattern);
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& xv = t.value(ix);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xv[i] > Real(0)) gx[i] += g[i];
      },
      "relu");
}

namespace {

Var linear_impl(Var x, Var w, const Var* b) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  require(wv.rank() == 2, "linear: weight must be [out, in]");
  const std::size_t in = wv.dim(1), out_dim = wv.dim(0);
  require(xv.rank() >= 1 && xv.cols() == in,
          "linear: input " + shape_string(xv.shape()) + " does not match weight " + shape_string(wv.shape()));
  if (b) require(b->value().size() == out_dim, "linear: bias extent mismatch");
  const std::size_t rows = xv.rows();
  Shape shape = xv.shape();
  shape.back() = out_dim;
  Tensor out(shape);
  MapR y(out.ptr(), rows, out_dim);
  CMapR X(xv.ptr(), rows, in);
  CMapR W(wv.ptr(), out_dim, in);
  y.noalias() = X * W.transpose();
  if (b) {
    Eigen::Map<const VecR> bias(b->value().ptr(), out_dim);
    y.rowwise() += bias;
  }
  const int ix = x.id(), iw = w.id(), ib = b ? b->id() : -1;
  auto backward = [ix, iw, ib, rows, in, out_dim](Tape& t, int self) {
    CMapR G(t.grad(self).ptr(), rows, out_dim);
    if (t.requires_grad(ix)) {
      MapR gx(t.grad(ix).ptr(), rows, in);
      CMapR W(t.value(iw).ptr(), out_dim, in);
      gx.noalias() += G * W;
    }
    if (t.requires_grad(iw)) {
      MapR gw(t.grad(iw).ptr(), out_dim, in);
      CMapR X(t.value(ix).ptr(), rows, in);
      gw.noalias() += G.transpose() * X;
    }
    if (ib >= 0 && t.requires_grad(ib)) {
      Eigen::Map<VecR> gb(t.grad(ib).ptr(), out_dim);
      gb += G.colwise().sum();
    }
  };
  if (b) return x.tape()->record(std::move(out), {x, w, *b}, std::move(backward), "linear");
  return x.tape()->record(std::move(out), {x, w}, std::move(backward), "linear");
}

}  // namespace

Var linear(Var x, Var weight, Var bias) { return linear_impl(x, weight, &bias); }
Var linear(Var x, Var weight) { return linear_impl(x, weight, nullptr); }

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x}, [ix](Tape& t, int self) { accumulate(t.grad(ix), t.grad(self)); }, "reshape");
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  require(!parts.empty(), "concat: no operands");
  const Shape& first = parts[0].shape();
  require(axis < first.size(), "concat: axis out of range");
  std::size_t outer = 1;
  for (std::size_t a = 0; a < axis; ++a) outer *= first[a];
  std::size_t inner_tail = 1;
  for (std::size_t a = axis + 1; a < first.size(); ++a) inner_tail *= first[a];
  Shape shape = first;
  shape[axis] = 0;
  std::vector<std::size_t> chunk;  // contiguous block per outer index
  std::vector<int> ids;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    require(s.size() == first.size(), "concat: rank mismatch");
    for (std::size_t a = 0; a < s.size(); ++a)
      if (a != axis) require(s[a] == first[a], "concat: extent mismatch off the concat axis");
    shape[axis] += s[axis];
    chunk.push_back(s[axis] * inner_tail);
    ids.push_back(p.id());
  }
  const std::size_t row = std::accumulate(chunk.begin(), chunk.end(), std::size_t{0});
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const Real* src = parts[k].value().ptr() + o * chunk[k];
      std::copy(src, src + chunk[k], out.ptr() + o * row + off);
      off += chunk[k];
    }
  }
  Tape* tape = parts[0].tape();
  auto backward = [ids, chunk, outer, row](Tape& t, int self) {
    const Tensor& g = t.grad(self);
    std::size_t off = 0;
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (t.requires_grad(ids[k])) {
        Tensor& gk = t.grad(ids[k]);
        for (std::size_t o = 0; o < outer; ++o) {
          const Real* src = g.ptr() + o * row + off;
          Real* dst = gk.ptr() + o * chunk[k];
          for (std::size_t i = 0; i < chunk[k]; ++i) dst[i] += src[i];
        }
      }
      off += chunk[k];
    }
  };
  return tape->record(std::move(out), parts, std::move(backward), "concat");
}

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  const Tensor& xv = x.value();
  require(xv.rank() >= 1, "gather_rows: scalar input");
  const std::size_t n_rows = xv.dim(0);
  const std::size_t width = n_rows == 0 ? 0 : xv.size() / n_rows;
  Shape shape = xv.shape();
  shape[0] = rows.size();
  Tensor out(shape);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    require(rows[r] < n_rows, "gather_rows: row index out of range");
    const Real* src = xv.ptr() + rows[r] * width;
    std::copy(src, src + width, out.ptr() + r * width);
  }
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, rows = std::move(rows), width](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows.size(); ++r) {
          const Real* src = g.ptr() + r * width;
          Real* dst = gx.ptr() + rows[r] * width;
          for (std::size_t i = 0; i < width; ++i) dst[i] += src[i];
        }
      },
      "gather_rows");
}

Var instance_norm(Var x, Var gamma, Var beta, Real eps) {
  const Tensor& xv = x.value();
  require(xv.rank() == 3, "instance_norm: expected [batch, set, d], got " + shape_string(xv.shape()));
  const std::size_t B = xv.dim(0), S = xv.dim(1), D = xv.dim(2);
  require(S >= 1, "instance_norm: empty set axis");
  require(gamma.value().size() == D && beta.value().size() == D, "instance_norm: affine extent mismatch");
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<Real>>(B * D);
  Tensor out(xv.shape());
  const Real* g = gamma.value().ptr();
  const Real* be = beta.value().ptr();
  std::vector<double> mean(D), var(D);
  for (std::size_t b = 0; b < B; ++b) {
    const Real* xb = xv.ptr() + b * S * D;
    std::fill(mean.begin(), mean.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < D; ++c) mean[c] += xb[s * D + c];
    for (std::size_t c = 0; c < D; ++c) mean[c] /= static_cast<double>(S);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < D; ++c) {
        const double d = xb[s * D + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < D; ++c) (*inv_std)[b * D + c] = static_cast<Real>(1.0 / std::sqrt(var[c] / S + eps));
    Real* hb = xhat->ptr() + b * S * D;
    Real* ob = out.ptr() + b * S * D;
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t c = 0; c < D; ++c) {
        const Real h = static_cast<Real>((xb[s * D + c] - mean[c]) * (*inv_std)[b * D + c]);
        hb[s * D + c] = h;
        ob[s * D + c] = g[c] * h + be[c];
      }
  }
  const int ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape()->record(
      std::move(out), {x, gamma, beta},
      [ix, ig, ib, B, S, D, xhat, inv_std](Tape& t, int self) {
        const Tensor& dy = t.grad(self);
        if (t.requires_grad(ig) || t.requires_grad(ib)) {
          Tensor& dg = t.grad(ig);
          Tensor& db = t.grad(ib);
          for (std::size_t i = 0; i < B * S; ++i)
            for (std::size_t c = 0; c < D; ++c) {
              dg[c] += dy[i * D + c] * (*xhat)[i * D + c];
              db[c] += dy[i * D + c];
            }
        }
        if (!t.requires_grad(ix)) return;
        const Real* gam = t.value(ig).ptr();
        Tensor& dx = t.grad(ix);
        std::vector<double> s1(D), s2(D);
        for (std::size_t b = 0; b < B; ++b) {
          std::fill(s1.begin(), s1.end(), 0.0);
          std::fill(s2.begin(), s2.end(), 0.0);
          const std::size_t base = b * S * D;
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t c = 0; c < D; ++c) {
              const double dh = static_cast<double>(dy[base + s * D + c]) * gam[c];
              s1[c] += dh;
              s2[c] += dh * (*xhat)[base + s * D + c];
            }
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t c = 0; c < D; ++c) {
              const double dh = static_cast<double>(dy[base + s * D + c]) * gam[c];
              const double h = (*xhat)[base + s * D + c];
              dx[base + s * D + c] +=
                  static_cast<Real>((*inv_std)[b * D + c] * (dh - s1[c] / S - h * s2[c] / S));
            }
        }
      },
      "instance_norm");
}

Var attention(Var q, Var k, Var v, std::size_t heads, const Mask* mask) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  require(qv.rank() == 3 && kv.rank() == 3 && vv.rank() == 3, "attention: operands must be rank 3");
  const std::size_t G = qv.dim(0), M = qv.dim(1), S = kv.dim(1);
  require(kv.dim(0) == G && vv.dim(0) == G, "attention: group extent mismatch");
  require(vv.dim(1) == S, "attention: key/value set extent mismatch");
  require(heads >= 1 && qv.dim(2) % heads == 0 && vv.dim(2) % heads == 0, "attention: widths not divisible by heads");
  require(qv.dim(2) == kv.dim(2), "attention: query/key width mismatch");
  const std::size_t HK = qv.dim(2), HV = vv.dim(2), dk = HK / heads, dv = HV / heads;
  if (mask) require(mask->size() == G * S, "attention: mask must be [groups, keys]");
  std::shared_ptr<const Mask> m = mask ? std::make_shared<const Mask>(*mask) : nullptr;
  const Real inv = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(dk)));
  auto probs = std::make_shared<std::vector<Real>>(G * heads * M * S);
  Tensor out({G, M, HV});
  std::vector<Real> sc(S);
  for (std::size_t g = 0; g < G; ++g) {
    const std::uint8_t* mg = m ? m->data() + g * S : nullptr;
    if (mg && std::all_of(mg, mg + S, [](std::uint8_t b) { return b != 0; }))
      throw DegenerateMaskError("attention: every key of a group is masked");
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < M; ++i) {
        const Real* qi = qv.ptr() + (g * M + i) * HK + h * dk;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (std::size_t s = 0; s < S; ++s) {
          if (mg && mg[s]) continue;
          const Real* ks = kv.ptr() + (g * S + s) * HK + h * dk;
          Real d = 0;
          for (std::size_t c = 0; c < dk; ++c) d += qi[c] * ks[c];
          sc[s] = d * inv;
          mx = std::max(mx, sc[s]);
        }
        Real z = 0;
        Real* p = probs->data() + ((g * heads + h) * M + i) * S;
        for (std::size_t s = 0; s < S; ++s) {
          p[s] = (mg && mg[s]) ? Real(0) : std::exp(sc[s] - mx);
          z += p[s];
        }
        Real* o = out.ptr() + (g * M + i) * HV + h * dv;
        for (std::size_t s = 0; s < S; ++s) {
          p[s] /= z;
          if (p[s] == Real(0)) continue;
          const Real* vs = vv.ptr() + (g * S + s) * HV + h * dv;
          for (std::size_t c = 0; c < dv; ++c) o[c] += p[s] * vs[c];
        }
      }
  }
  const int iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape()->record(
      std::move(out), {q, k, v},
      [=](Tape& t, int self) {
        const Tensor& dO = t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        const Tensor& vv = t.value(iv);
        const bool need_q = t.requires_grad(iq), need_k = t.requires_grad(ik), need_v = t.requires_grad(iv);
        Real* dq = need_q ? t.grad(iq).ptr() : nullptr;
        Real* dk_ = need_k ? t.grad(ik).ptr() : nullptr;
        Real* dv_ = need_v ? t.grad(iv).ptr() : nullptr;
        std::vector<Real> dp(S);
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t i = 0; i < M; ++i) {
              const Real* p = probs->data() + ((g * heads + h) * M + i) * S;
              const Real* go = dO.ptr() + (g * M + i) * HV + h * dv;
              Real dot = 0;
              for (std::size_t s = 0; s < S; ++s) {
                dp[s] = 0;
                if (p[s] == Real(0)) continue;
                const Real* vs = vv.ptr() + (g * S + s) * HV + h * dv;
                Real d = 0;
                for (std::size_t c = 0; c < dv; ++c) d += go[c] * vs[c];
                dp[s] = d;
                dot += p[s] * d;
                if (dv_) {
                  Real* gv = dv_ + (g * S + s) * HV + h * dv;
                  for (std::size_t c = 0; c < dv; ++c) gv[c] += p[s] * go[c];
                }
              }
              const Real* qi = qv.ptr() + (g * M + i) * HK + h * dk;
              Real* gq = dq ? dq + (g * M + i) * HK + h * dk : nullptr;
              for (std::size_t s = 0; s < S; ++s) {
                if (p[s] == Real(0)) continue;
                const Real ds = p[s] * (dp[s] - dot) * inv;
                const Real* ks = kv.ptr() + (g * S + s) * HK + h * dk;
                if (gq)
                  for (std::size_t c = 0; c < dk; ++c) gq[c] += ds * ks[c];
                if (dk_) {
                  Real* gk = dk_ + (g * S + s) * HK + h * dk;
                  for (std::size_t c = 0; c < dk; ++c) gk[c] += ds * qi[c];
                }
              }
            }
      },
      "attention");
}

Var row_dot(Var q, Var k) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  require(qv.rank() == 2 && kv.rank() == 3 && kv.dim(0) == qv.dim(0) && kv.dim(2) == qv.dim(1),
          "row_dot: expected q [G, d] and k [G, S, d]");
  const std::size_t G = qv.dim(0), S = kv.dim(1), D = qv.dim(1);
  Tensor out({G, S});
  for (std::size_t g = 0; g < G; ++g)
    for (std::size_t s = 0; s < S; ++s) {
      const Real* a = qv.ptr() + g * D;
      const Real* b = kv.ptr() + (g * S + s) * D;
      Real d = 0;
      for (std::size_t c = 0; c < D; ++c) d += a[c] * b[c];
      out[g * S + s] = d;
    }
  const int iq = q.id(), ik = k.id();
  return q.tape()->record(
      std::move(out), {q, k},
      [iq, ik, G, S, D](Tape& t, int self) {
        const Tensor& g_ = t.grad(self);
        const Tensor& qv = t.value(iq);
        const Tensor& kv = t.value(ik);
        Real* gq = t.requires_grad(iq) ? t.grad(iq).ptr() : nullptr;
        Real* gk = t.requires_grad(ik) ? t.grad(ik).ptr() : nullptr;
        for (std::size_t g = 0; g < G; ++g)
          for (std::size_t s = 0; s < S; ++s) {
            const Real w = g_[g * S + s];
            if (w == Real(0)) continue;
            if (gq)
              for (std::size_t c = 0; c < D; ++c) gq[g * D + c] += w * kv[(g * S + s) * D + c];
            if (gk)
              for (std::size_t c = 0; c < D; ++c) gk[(g * S + s) * D + c] += w * qv[g * D + c];
          }
      },
      "row_dot");
}

Var tanh_clip(Var x, Real alpha) {
  if (!(alpha > Real(0))) throw Error("tanh_clip: alpha must be positive");
  Tensor out = x.value();
  for (auto& v : out.storage()) v = alpha * std::tanh(v);
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, alpha](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& y = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const Real th = y[i] / alpha;
          gx[i] += g[i] * alpha * (Real(1) - th * th);
        }
      },
      "tanh_clip");
}

namespace {

void check_softmax_rows(const Tensor& x, const Mask& mask, const char* where) {
  require(x.rank() >= 1 && mask.size() == x.size(), std::string(where) + ": mask must match logits");
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const std::uint8_t* m = mask.data() + r * n;
    if (std::all_of(m, m + n, [](std::uint8_t b) { return b != 0; }))
      throw DegenerateMaskError(std::string(where) + ": row " + std::to_string(r) + " is fully masked");
  }
}

// Writes normalized probabilities for one row; returns log of the partition
// function relative to the row max.
Real softmax_row(const Real* x, const std::uint8_t* m, std::size_t n, Real* p, Real& mx) {
  mx = -std::numeric_limits<Real>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (!m[j]) mx = std::max(mx, x[j]);
  Real z = 0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = m[j] ? Real(0) : std::exp(x[j] - mx);
    z += p[j];
  }
  for (std::size_t j = 0; j < n; ++j) p[j] /= z;
  return std::log(z);
}

}  // namespace

Var softmax_masked(Var x, const Mask& mask) {
  const Tensor& xv = x.value();
  check_softmax_rows(xv, mask, "softmax_masked");
  const std::size_t n = xv.cols(), rows = xv.rows();
  Tensor out(xv.shape());
  Real mx;
  for (std::size_t r = 0; r < rows; ++r) softmax_row(xv.ptr() + r * n, mask.data() + r * n, n, out.ptr() + r * n, mx);
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, n, rows](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        const Tensor& p = t.value(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          Real dot = 0;
          for (std::size_t j = 0; j < n; ++j) dot += p[r * n + j] * g[r * n + j];
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += p[r * n + j] * (g[r * n + j] - dot);
        }
      },
      "softmax_masked");
}

Var log_softmax_pick(Var x, const Mask& mask, std::vector<std::size_t> pick) {
  const Tensor& xv = x.value();
  check_softmax_rows(xv, mask, "log_softmax_pick");
  const std::size_t n = xv.cols(), rows = xv.rows();
  require(pick.size() == rows, "log_softmax_pick: one pick per row required");
  auto probs = std::make_shared<std::vector<Real>>(rows * n);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    require(pick[r] < n, "log_softmax_pick: pick out of range");
    if (mask[r * n + pick[r]]) throw Error("log_softmax_pick: picked entry is masked");
    Real mx;
    const Real logz = softmax_row(xv.ptr() + r * n, mask.data() + r * n, n, probs->data() + r * n, mx);
    out[r] = (xv[r * n + pick[r]] - mx) - logz;
  }
  const int ix = x.id();
  return x.tape()->record(
      std::move(out), {x},
      [ix, n, rows, probs, pick = std::move(pick)](Tape& t, int self) {
        const Tensor& g = t.grad(self);
        Tensor& gx = t.grad(ix);
        for (std::size_t r = 0; r < rows; ++r) {
          if (g[r] == Real(0)) continue;
          const Real* p = probs->data() + r * n;
          for (std::size_t j = 0; j < n; ++j) gx[r * n + j] -= g[r] * p[j];
          gx[r * n + pick[r]] += g[r];
        }
      },
      "log_softmax_pick");
}

Var sum(Var x) {
  Real s = 0;
  for (Real v : x.value().data()) s += v;
  const int ix = x.id();
  return x.tape()->record(
      Tensor({1}, std::vector<Real>{s}), {x},
      [ix](Tape& t, int self) {
        const Real g = t.grad(self)[0];
        for (auto& v : t.grad(ix).storage()) v += g;
      },
      "sum");
}

Var weighted_sum(Var x, Tensor weights) {
  require(weights.size() == x.value().size(), "weighted_sum: weight count mismatch");
  weights.check_finite("weighted_sum weights");
  Real s = 0;
  const Tensor& xv = x.value();
  for (std::size_t i = 0; i < xv.size(); ++i) s += xv[i] * weights[i];
  const int ix = x.id();
  return x.tape()->record(
      Tensor({1}, std::vector<Real>{s}), {x},
      [ix, w = std::move(weights)](Tape& t, int self) {
        const Real g = t.grad(self)[0];
        Tensor& gx = t.grad(ix);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g * w[i];
      },
      "weighted_sum");
}

}  // namespace ad

// ---------------------------------------------------------------- Adam

Adam::Adam(const ParamStore& store, AdamConfig config) : config_(config) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    m_.emplace_back(store[i].value.shape());
    v_.emplace_back(store[i].value.shape());
  }
}

void Adam::step(ParamStore& store, Real lr) {
  if (store.size() != m_.size()) throw DimensionError("Adam state does not match parameter store");
  for (std::size_t i = 0; i < store.size(); ++i)
    for (Real g : store[i].grad.data())
      if (!std::isfinite(g)) throw NumericalError("training divergence: non-finite gradient in " + store[i].name);
  ++steps_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < store.size(); ++i) {
    Param& p = store[i];
    Real* m = m_[i].ptr();
    Real* v = v_[i].ptr();
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const double g = p.grad[j];
      m[j] = static_cast<Real>(b1 * m[j] + (1.0 - b1) * g);
      v[j] = static_cast<Real>(b2 * v[j] + (1.0 - b2) * g * g);
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      p.value[j] -= static_cast<Real>(lr * mhat / (std::sqrt(vhat) + config_.eps));
    }
    p.zero_grad();
  }
}

// ---------------------------------------------------------------- grad_check

GradCheckResult grad_check(const std::function<Var(Tape&)>& f, std::span<Param* const> params, double h,
                           Stencil stencil) {
  for (Param* p : params) p->zero_grad();
  double f0 = 0.0;
  std::uint64_t sig0 = 0;
  {
    Tape tape;
    Var y = f(tape);
    f0 = static_cast<double>(y.value()[0]);
    sig0 = tape.kink_signature();
    tape.backward(y);
  }
  const double eps = std::numeric_limits<Real>::epsilon();
  const double scale = std::max(1.0, std::abs(f0));
  GradCheckResult res;
  res.noise_bound = 16.0 * eps * scale / h;
  for (Param* p : params) {
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const Real saved = p->value[j];
      bool smooth = true;
      auto at = [&](double offset) {
        p->value[j] = static_cast<Real>(saved + offset);
        Tape tape;
        const double v = static_cast<double>(f(tape).value()[0]);
        smooth = smooth && tape.kink_signature() == sig0;
        return v;
      };
      double numeric = 0.0, step = h;
      for (int attempt = 0; attempt < 7; ++attempt, step /= 4.0) {
        smooth = true;
        numeric = stencil == Stencil::FivePoint
                      ? (at(-2 * step) - 8.0 * at(-step) + 8.0 * at(step) - at(2 * step)) / (12.0 * step)
                      : (at(step) - at(-step)) / (2.0 * step);
        if (smooth) break;
      }
      p->value[j] = saved;
      const double analytic = p->grad[j];
      const double err = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      ++res.coordinates;
      if (res.coordinates == 1 || err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p->name;
        res.worst_index = j;
        res.analytic = analytic;
        res.numeric = numeric;
      }
      if (!smooth) {
        ++res.kinked;
      } else if (std::abs(analytic) <= 64.0 * eps * scale) {
        ++res.stationary;
        res.max_stationary_numeric = std::max(res.max_stationary_numeric, std::abs(numeric) * step / h);
      } else if (err > res.max_rel_error_active) {
        res.max_rel_error_active = err;
        res.worst_active_param = p->name;
      }
    }
    p->zero_grad();
  }
  return res;
}

}  // namespace egam
