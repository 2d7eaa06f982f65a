#include "egam/attention.hpp"

#include <vector>

namespace egam {

namespace {

Var p_(Var like, Param* p) { return like.tape()->param(*p); }

}  // namespace

MhaParams make_mha(ParamStore& store, const std::string& prefix, const AttentionDims& dims, std::mt19937_64& rng) {
  const std::size_t hk = dims.heads * dims.d_key, hv = dims.heads * dims.d_value;
  MhaParams p;
  p.heads = dims.heads;
  p.wq = &store.add_uniform(prefix + ".wq", {hk, dims.d_model}, dims.d_model, rng);
  p.wk = &store.add_uniform(prefix + ".wk", {hk, dims.d_model}, dims.d_model, rng);
  p.wv = &store.add_uniform(prefix + ".wv", {hv, dims.d_model}, dims.d_model, rng);
  p.wo = &store.add_uniform(prefix + ".wo", {dims.d_model, hv}, hv, rng);
  return p;
}

FeedForwardParams make_ff(ParamStore& store, const std::string& prefix, const AttentionDims& dims,
                          std::mt19937_64& rng, bool output_bias) {
  FeedForwardParams p;
  p.w1 = &store.add_uniform(prefix + ".w1", {dims.d_ff, dims.d_model}, dims.d_model, rng);
  p.b1 = &store.add_uniform(prefix + ".b1", {dims.d_ff}, dims.d_model, rng);
  p.w2 = &store.add_uniform(prefix + ".w2", {dims.d_model, dims.d_ff}, dims.d_ff, rng);
  if (output_bias) p.b2 = &store.add_uniform(prefix + ".b2", {dims.d_model}, dims.d_ff, rng);
  return p;
}

NormParams make_norm(ParamStore& store, const std::string& prefix, std::size_t d_model) {
  return {&store.add(prefix + ".gamma", {d_model}, Real(1)), &store.add(prefix + ".beta", {d_model}, Real(0))};
}

DirectedEdgeParams make_directed(ParamStore& store, const std::string& prefix, std::size_t d_model,
                                 std::mt19937_64& rng) {
  DirectedEdgeParams p;
  p.ws = &store.add_uniform(prefix + ".ws", {d_model, d_model}, d_model, rng);
  p.bs = &store.add_uniform(prefix + ".bs", {d_model}, d_model, rng);
  p.we = &store.add_uniform(prefix + ".we", {d_model, d_model}, d_model, rng);
  p.be = &store.add_uniform(prefix + ".be", {d_model}, d_model, rng);
  return p;
}

EncoderLayerParams make_encoder_layer(ParamStore& store, const std::string& prefix, const AttentionDims& dims,
                                      bool node_only, bool directed, std::mt19937_64& rng) {
  // A constant shift right before instance norm is cancelled exactly, so encoder FFs carry no b2.
  EncoderLayerParams p;
  p.node_node = make_mha(store, prefix + ".node_node", dims, rng);
  if (!node_only) {
    p.edge_node = make_mha(store, prefix + ".edge_node", dims, rng);
    if (directed) p.directed = make_directed(store, prefix + ".edge_node", dims.d_model, rng);
    p.node_edge = make_mha(store, prefix + ".node_edge", dims, rng);
    p.edge_norm_in = make_norm(store, prefix + ".edge_norm_in", dims.d_model);
    p.edge_ff = make_ff(store, prefix + ".edge_ff", dims, rng, false);
    p.edge_norm_out = make_norm(store, prefix + ".edge_norm_out", dims.d_model);
  }
  p.node_norm_in = make_norm(store, prefix + ".node_norm_in", dims.d_model);
  p.node_ff = make_ff(store, prefix + ".node_ff", dims, rng, false);
  p.node_norm_out = make_norm(store, prefix + ".node_norm_out", dims.d_model);
  return p;
}

Var attention_core(Var q, Var k, Var v, const Mask* mask) {
  if (q.shape().size() == 2) {
    const Shape qs = q.shape(), ks = k.shape(), vs = v.shape();
    Var out = ad::attention(ad::reshape(q, {1, qs[0], qs[1]}), ad::reshape(k, {1, ks[0], ks[1]}),
                            ad::reshape(v, {1, vs[0], vs[1]}), 1, mask);
    return ad::reshape(out, {qs[0], vs[1]});
  }
  return ad::attention(q, k, v, 1, mask);
}

Var mha_projected(Var x, Var keys, Var values, const MhaParams& p, const Mask* mask) {
  Var q = ad::linear(x, p_(x, p.wq));
  Var heads = ad::attention(q, keys, values, p.heads, mask);
  return ad::linear(heads, p_(x, p.wo));
}

Var mha(Var x, Var yz, const MhaParams& p, const Mask* mask) {
  return mha_projected(x, ad::linear(yz, p_(x, p.wk)), ad::linear(yz, p_(x, p.wv)), p, mask);
}

Var node_node(Var nodes, const MhaParams& p, const Mask* mask) { return mha(nodes, nodes, p, mask); }

Var node_edge(Var nodes, Var edges, const MhaParams& p, const Mask* mask) {
  const Shape ns = nodes.shape();
  const Shape es = edges.shape();
  if (ns.size() != 3 || es.size() != 4 || es[0] != ns[0] || es[1] != ns[1] || es[2] != ns[1] || es[3] != ns[2])
    throw DimensionError("node_edge: expected nodes [B,N,d] and edges [B,N,N,d]");
  const std::size_t B = ns[0], N = ns[1], d = ns[2];
  Var q = ad::reshape(nodes, {B * N, 1, d});
  Var kv = ad::reshape(edges, {B * N, N, d});
  Var out = mha(q, kv, p, mask);
  return ad::reshape(out, {B, N, d});
}

Var edge_node(Var edges, Var nodes, const MhaParams& p, const DirectedEdgeParams* directed) {
  const Shape ns = nodes.shape();
  const Shape es = edges.shape();
  if (ns.size() != 3 || es.size() != 4 || es[0] != ns[0] || es[1] != ns[1] || es[2] != ns[1] || es[3] != ns[2])
    throw DimensionError("edge_node: expected edges [B,N,N,d] and nodes [B,N,d]");
  const std::size_t B = ns[0], N = ns[1], d = ns[2];
  Var start = nodes, end = nodes;
  if (directed) {
    start = ad::linear(nodes, p_(nodes, directed->ws), p_(nodes, directed->bs));
    end = ad::linear(nodes, p_(nodes, directed->we), p_(nodes, directed->be));
  }
  // Project once per node, then gather the {i, j} pair for every edge.
  Var ks = ad::reshape(ad::linear(start, p_(nodes, p.wk)), {B * N, p.wk->value.dim(0)});
  Var vs = ad::reshape(ad::linear(start, p_(nodes, p.wv)), {B * N, p.wv->value.dim(0)});
  std::vector<std::size_t> rows(B * N * N * 2);
  std::size_t end_offset = 0;
  Var kall = ks, vall = vs;
  if (directed) {
    Var ke = ad::reshape(ad::linear(end, p_(nodes, p.wk)), {B * N, p.wk->value.dim(0)});
    Var ve = ad::reshape(ad::linear(end, p_(nodes, p.wv)), {B * N, p.wv->value.dim(0)});
    const Var kparts[] = {ks, ke};
    const Var vparts[] = {vs, ve};
    kall = ad::concat(kparts, 0);
    vall = ad::concat(vparts, 0);
    end_offset = B * N;
  }
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < N; ++j) {
        const std::size_t e = (b * N + i) * N + j;
        rows[2 * e] = b * N + i;
        rows[2 * e + 1] = end_offset + b * N + j;
      }
  const std::size_t hk = p.wk->value.dim(0), hv = p.wv->value.dim(0);
  Var keys = ad::reshape(ad::gather_rows(kall, rows), {B * N * N, 2, hk});
  Var values = ad::reshape(ad::gather_rows(vall, std::move(rows)), {B * N * N, 2, hv});
  Var q = ad::reshape(edges, {B * N * N, 1, d});
  Var out = mha_projected(q, keys, values, p);
  return ad::reshape(out, {B, N, N, d});
}

Var ff_residual(Var x, const FeedForwardParams& p) {
  Var hidden = ad::relu(ad::linear(x, p_(x, p.w1), p_(x, p.b1)));
  Var out = p.b2 ? ad::linear(hidden, p_(x, p.w2), p_(x, p.b2)) : ad::linear(hidden, p_(x, p.w2));
  return ad::add(x, out);
}

Var norm(Var x, const NormParams& p) { return ad::instance_norm(x, p_(x, p.gamma), p_(x, p.beta)); }

std::pair<Var, Var> encoder_layer(Var nodes, Var edges, const EncoderLayerParams& p, bool node_only) {
  const Shape ns = nodes.shape();
  const std::size_t B = ns.at(0), N = ns.at(1), d = ns.at(2);
  Var n_hat = ad::add(nodes, node_node(nodes, p.node_node));
  Var n_tilde = n_hat;
  Var e_out = edges;
  if (!node_only) {
    Var e_tilde = ad::add(edges, edge_node(edges, n_hat, p.edge_node, p.directed ? &*p.directed : nullptr));
    n_tilde = ad::add(n_hat, node_edge(n_hat, e_tilde, p.node_edge));
    Var e = ad::reshape(e_tilde, {B, N * N, d});
    e = norm(ff_residual(norm(e, p.edge_norm_in), p.edge_ff), p.edge_norm_out);
    e_out = ad::reshape(e, {B, N, N, d});
  }
  Var n_out = norm(ff_residual(norm(n_tilde, p.node_norm_in), p.node_ff), p.node_norm_out);
  return {n_out, e_out};
}

}  // namespace egam
