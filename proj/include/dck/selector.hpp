#pragma once

#include <string>
#include <vector>

#include "dck/optim.hpp"
#include "dck/tensor.hpp"

namespace dck::selector {

// Multi-head attention block: linear Q/K/V projections, per-head scaled
// dot-product attention, output projection, then residual+norm, position-wise
// FFN (inner dim 2x width) and a second residual+norm.
struct AttentionBlockParams {
  Tensor q_proj, k_proj, v_proj, out_proj;  // [width x width]
  Tensor q_bias, k_bias, v_bias, out_bias;  // [width]
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
  int heads = 3;
  int width = 0;
  double ln_eps = 1e-6;
};

AttentionBlockParams make_attention_block(ParameterStore& store, const std::string& prefix,
                                          int width, int heads, double ln_eps, Rng& rng);

// softmax(Q K^T / sqrt(d_k)) V with masked key positions receiving zero
// weight. Throws EmptySupport when every key is masked.
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& key_mask);

Tensor attention_block(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& key_mask,
                       const AttentionBlockParams& p);

Tensor self_attend(const Tensor& u, const Tensor& mask, const AttentionBlockParams& p);

// Fusion scalar alpha (init 0.5, unconstrained) and the hop-combination
// vector pi (init 1/m).
struct SelectorParams {
  Tensor alpha;
  Tensor pi;
  int hops = 3;
};

SelectorParams make_selector_params(ParameterStore& store, const std::string& prefix, int hops);

struct HopQuery {
  Tensor matrix;  // [l_q x width]
  Tensor mask;    // [l_q], 1 where at least one contributing utterance has a token
};

// Position-wise masked mean over the last min(m, available) self-attended
// utterance matrices; the sequences may have ragged lengths.
HopQuery hop_query(const std::vector<Tensor>& units_hat, const std::vector<Tensor>& masks, int m);

// Relevance of each unit to the query: per-unit similarity matrices scaled by
// sqrt(width), max over the query axis, then masked max/mean over unit tokens
// fused by alpha and normalized over real units.
Tensor unit_scores(const HopQuery& query, const std::vector<Tensor>& units_hat,
                   const std::vector<Tensor>& unit_masks, const Tensor& alpha);

// s_bar = [s^(1) .. s^(m)] . pi, no renormalization.
Tensor fuse_hops(const std::vector<Tensor>& hop_scores, const Tensor& pi);

struct SelectionResult {
  std::vector<Tensor> reweighted;  // (1 + s_bar(i)) * U_i
  std::vector<Tensor> units_hat;   // self-attended units
  Tensor fused;                    // s_bar, [n]
  std::vector<Tensor> per_hop;     // each [n], a distribution over real units
};

// Self-attends each unit, scores it against the multi-hop query built from
// `query_hat` (pass an empty list to use the units' own transforms, i.e. the
// context selector), and reweights the ORIGINAL encoder outputs.
SelectionResult select_units(const std::vector<Tensor>& units,
                             const std::vector<Tensor>& token_masks,
                             const AttentionBlockParams& self_block,
                             const std::vector<Tensor>& query_hat,
                             const std::vector<Tensor>& query_masks, const SelectorParams& sel);

}  // namespace dck::selector
