#pragma once

#include <optional>
#include <random>
#include <string>
#include <utility>

#include "egam/autodiff.hpp"

namespace egam {

struct AttentionDims {
  std::size_t d_model = 128;
  std::size_t heads = 8;
  std::size_t d_key = 16;    // d_q = d_k
  std::size_t d_value = 16;
  std::size_t d_ff = 512;
};

// Per-head projections stacked row-wise: head i owns rows [i*d_k, (i+1)*d_k).
struct MhaParams {
  Param* wq = nullptr;  // [h*d_k, d_m]
  Param* wk = nullptr;  // [h*d_k, d_m]
  Param* wv = nullptr;  // [h*d_v, d_m]
  Param* wo = nullptr;  // [d_m, h*d_v]
  std::size_t heads = 1;
};

struct FeedForwardParams {
  Param* w1 = nullptr;  // [d_ff, d_m]
  Param* b1 = nullptr;
  Param* w2 = nullptr;  // [d_m, d_ff]
  Param* b2 = nullptr;  // null when a normalization follows and would cancel it
};

struct NormParams {
  Param* gamma = nullptr;
  Param* beta = nullptr;
};

// Separate start/end node transforms for directed Edge-Node attention.
struct DirectedEdgeParams {
  Param* ws = nullptr;
  Param* bs = nullptr;
  Param* we = nullptr;
  Param* be = nullptr;
};

struct EncoderLayerParams {
  MhaParams node_node;
  MhaParams edge_node;
  MhaParams node_edge;
  std::optional<DirectedEdgeParams> directed;
  FeedForwardParams node_ff;
  FeedForwardParams edge_ff;
  NormParams node_norm_in, node_norm_out;
  NormParams edge_norm_in, edge_norm_out;
};

MhaParams make_mha(ParamStore& store, const std::string& prefix, const AttentionDims& dims, std::mt19937_64& rng);
FeedForwardParams make_ff(ParamStore& store, const std::string& prefix, const AttentionDims& dims,
                          std::mt19937_64& rng, bool output_bias = true);
NormParams make_norm(ParamStore& store, const std::string& prefix, std::size_t d_model);
DirectedEdgeParams make_directed(ParamStore& store, const std::string& prefix, std::size_t d_model,
                                 std::mt19937_64& rng);
// `node_only` layers skip the edge stream entirely and register no edge parameters.
EncoderLayerParams make_encoder_layer(ParamStore& store, const std::string& prefix, const AttentionDims& dims,
                                      bool node_only, bool directed, std::mt19937_64& rng);

// softmax(Q K^T / sqrt(d_k)) V for Q [M, d_k] (or [G, M, d_k]), K [S, d_k], V [S, d_v].
Var attention_core(Var q, Var k, Var v, const Mask* mask = nullptr);

// x [G, M, d_m] attends over yz [G, S, d_m]; residual left to the caller.
Var mha(Var x, Var yz, const MhaParams& p, const Mask* mask = nullptr);
// Same as mha() with keys/values already projected by p.wk / p.wv ([G, S, h*d_k], [G, S, h*d_v]).
Var mha_projected(Var x, Var keys, Var values, const MhaParams& p, const Mask* mask = nullptr);

// nodes [B, N, d]: every node attends over all nodes of its instance.
Var node_node(Var nodes, const MhaParams& p, const Mask* mask = nullptr);
// nodes [B, N, d], edges [B, N, N, d]: node i attends over edge row e_{i,*} (self-loop included).
Var node_edge(Var nodes, Var edges, const MhaParams& p, const Mask* mask = nullptr);
// edges [B, N, N, d], nodes [B, N, d]: e_ij attends over {n_i, n_j}, or over
// {W_s n_i + b_s, W_e n_j + b_e} when directed params are supplied.
Var edge_node(Var edges, Var nodes, const MhaParams& p, const DirectedEdgeParams* directed = nullptr);

// x + W2 relu(W1 x + b1) + b2 (b2 omitted when null)
Var ff_residual(Var x, const FeedForwardParams& p);
// x [B, S, d]
Var norm(Var x, const NormParams& p);

// One encoder layer: Node-Node, Edge-Node (with updated nodes), Node-Edge (with
// updated edges), each with a residual, then Norm -> FF-residual -> Norm per stream.
std::pair<Var, Var> encoder_layer(Var nodes, Var edges, const EncoderLayerParams& p, bool node_only = false);

}  // namespace egam
