#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "egam/autodiff.hpp"

namespace egam::testing {

inline Tensor random_tensor(const Shape& shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor t(shape);
  for (auto& v : t.storage()) v = static_cast<Real>(u(rng));
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

// Plain row-major loops over std::vector, independent of the library primitives.
using Mat = std::vector<std::vector<double>>;

inline Mat to_mat(const Tensor& t, std::size_t rows, std::size_t cols, std::size_t offset = 0) {
  Mat m(rows, std::vector<double>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m[r][c] = t[offset + r * cols + c];
  return m;
}

// y = x W^T (+ b)
inline Mat naive_linear(const Mat& x, const Mat& w, const std::vector<double>* b = nullptr) {
  Mat y(x.size(), std::vector<double>(w.size(), 0.0));
  for (std::size_t r = 0; r < x.size(); ++r)
    for (std::size_t o = 0; o < w.size(); ++o) {
      double s = b ? (*b)[o] : 0.0;
      for (std::size_t i = 0; i < x[r].size(); ++i) s += w[o][i] * x[r][i];
      y[r][o] = s;
    }
  return y;
}

// softmax(q k^T / sqrt(dk)) v for one head; mask entries true = excluded.
inline Mat naive_attention(const Mat& q, const Mat& k, const Mat& v, const std::vector<bool>* mask = nullptr) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(q[0].size()));
  Mat out(q.size(), std::vector<double>(v[0].size(), 0.0));
  for (std::size_t i = 0; i < q.size(); ++i) {
    std::vector<double> w(k.size(), 0.0);
    double mx = -1e300, z = 0.0;
    for (std::size_t s = 0; s < k.size(); ++s) {
      if (mask && (*mask)[s]) continue;
      double d = 0.0;
      for (std::size_t c = 0; c < q[i].size(); ++c) d += q[i][c] * k[s][c];
      w[s] = d * scale;
      mx = std::max(mx, w[s]);
    }
    for (std::size_t s = 0; s < k.size(); ++s) {
      w[s] = (mask && (*mask)[s]) ? 0.0 : std::exp(w[s] - mx);
      z += w[s];
    }
    for (std::size_t s = 0; s < k.size(); ++s)
      for (std::size_t c = 0; c < v[s].size(); ++c) out[i][c] += w[s] / z * v[s][c];
  }
  return out;
}

inline Mat columns(const Mat& m, std::size_t from, std::size_t count) {
  Mat out(m.size(), std::vector<double>(count));
  for (std::size_t r = 0; r < m.size(); ++r)
    for (std::size_t c = 0; c < count; ++c) out[r][c] = m[r][from + c];
  return out;
}

// Multi-head reference: per head slice the projections, attend, concatenate, project by Wo.
inline Mat naive_mha(const Mat& x, const Mat& yz, const Mat& wq, const Mat& wk, const Mat& wv, const Mat& wo,
                     std::size_t heads, const std::vector<bool>* mask = nullptr) {
  const Mat q = naive_linear(x, wq), k = naive_linear(yz, wk), v = naive_linear(yz, wv);
  const std::size_t dk = wq.size() / heads, dv = wv.size() / heads;
  Mat cat(x.size(), std::vector<double>(heads * dv));
  for (std::size_t h = 0; h < heads; ++h) {
    const Mat o = naive_attention(columns(q, h * dk, dk), columns(k, h * dk, dk), columns(v, h * dv, dv), mask);
    for (std::size_t r = 0; r < x.size(); ++r)
      for (std::size_t c = 0; c < dv; ++c) cat[r][h * dv + c] = o[r][c];
  }
  return naive_linear(cat, wo);
}

inline Mat mat_of(const Param& p) { return to_mat(p.value, p.value.dim(0), p.value.size() / p.value.dim(0)); }

inline std::vector<double> vec_of(const Param& p) { return {p.value.data().begin(), p.value.data().end()}; }

}  // namespace egam::testing
