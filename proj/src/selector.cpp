#include "dck/selector.hpp"

#include <cmath>

namespace dck::selector {

AttentionBlockParams make_attention_block(ParameterStore& store, const std::string& prefix,
                                          int width, int heads, double ln_eps, Rng& rng) {
  if (width % heads != 0)
    throw Error(ErrorCode::bad_config, "attention block: width must be divisible by head count");
  AttentionBlockParams p;
  p.heads = heads;
  p.width = width;
  p.ln_eps = ln_eps;
  auto mat = [&](const std::string& name, int r, int c) {
    const double s = std::sqrt(3.0 / r);  // variance 1/fan_in
    return store.create_uniform(prefix + name, {r, c}, -s, s, rng);
  };
  auto vec = [&](const std::string& name, int n, double v) {
    return store.create(prefix + name, {n}, std::vector<double>(static_cast<size_t>(n), v));
  };
  p.q_proj = mat(".q_proj", width, width);
  p.k_proj = mat(".k_proj", width, width);
  p.v_proj = mat(".v_proj", width, width);
  p.out_proj = mat(".out_proj", width, width);
  p.q_bias = vec(".q_bias", width, 0.0);
  p.k_bias = vec(".k_bias", width, 0.0);
  p.v_bias = vec(".v_bias", width, 0.0);
  p.out_bias = vec(".out_bias", width, 0.0);
  p.ffn_w1 = mat(".ffn_w1", width, 2 * width);
  p.ffn_b1 = vec(".ffn_b1", 2 * width, 0.0);
  p.ffn_w2 = mat(".ffn_w2", 2 * width, width);
  p.ffn_b2 = vec(".ffn_b2", width, 0.0);
  p.ln1_gain = vec(".ln1_gain", width, 1.0);
  p.ln1_bias = vec(".ln1_bias", width, 0.0);
  p.ln2_gain = vec(".ln2_gain", width, 1.0);
  p.ln2_bias = vec(".ln2_bias", width, 0.0);
  return p;
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            const Tensor& key_mask) {
  if (q.cols() != k.cols())
    throw Error(ErrorCode::shape_mismatch, "scaled_dot_attention: key dim mismatch");
  if (k.rows() != v.rows())
    throw Error(ErrorCode::shape_mismatch, "scaled_dot_attention: key/value length mismatch");
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(q.cols())));
  Tensor weights = masked_softmax(scores, key_mask, 1, /*strict=*/true);
  return matmul(weights, v);
}

Tensor attention_block(const Tensor& q, const Tensor& k, const Tensor& v, const Tensor& key_mask,
                       const AttentionBlockParams& p) {
  Tensor qp = add_rowwise(matmul(q, p.q_proj), p.q_bias);
  Tensor kp = add_rowwise(matmul(k, p.k_proj), p.k_bias);
  Tensor vp = add_rowwise(matmul(v, p.v_proj), p.v_bias);
  const int dh = p.width / p.heads;
  std::vector<Tensor> heads;
  heads.reserve(static_cast<size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    Tensor qh = slice_cols(qp, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(kp, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(vp, h * dh, (h + 1) * dh);
    heads.push_back(scaled_dot_attention(qh, kh, vh, key_mask));
  }
  Tensor attended = add_rowwise(matmul(concat_cols(heads), p.out_proj), p.out_bias);
  Tensor normed = layer_norm(add(q, attended), p.ln1_gain, p.ln1_bias, p.ln_eps);
  Tensor inner = relu_op(add_rowwise(matmul(normed, p.ffn_w1), p.ffn_b1));
  Tensor ffn = add_rowwise(matmul(inner, p.ffn_w2), p.ffn_b2);
  return layer_norm(add(normed, ffn), p.ln2_gain, p.ln2_bias, p.ln_eps);
}

Tensor self_attend(const Tensor& u, const Tensor& mask, const AttentionBlockParams& p) {
  return attention_block(u, u, u, mask, p);
}

SelectorParams make_selector_params(ParameterStore& store, const std::string& prefix, int hops) {
  SelectorParams sp;
  sp.hops = hops;
  sp.alpha = store.create(prefix + ".alpha", {1}, {0.5});
  sp.pi = store.create(prefix + ".pi", {hops},
                       std::vector<double>(static_cast<size_t>(hops), 1.0 / hops));
  return sp;
}

HopQuery hop_query(const std::vector<Tensor>& units_hat, const std::vector<Tensor>& masks, int m) {
  if (units_hat.empty()) throw Error(ErrorCode::empty_context, "hop_query: no utterances");
  const int n = static_cast<int>(units_hat.size());
  const int take = std::min(std::max(m, 1), n);
  const int first = n - take;
  int max_len = 0;
  const int width = units_hat[0].cols();
  for (int i = first; i < n; ++i) max_len = std::max(max_len, units_hat[static_cast<size_t>(i)].rows());

  std::vector<double> counts(static_cast<size_t>(max_len), 0.0);
  Tensor acc;
  for (int i = first; i < n; ++i) {
    const Tensor& u = units_hat[static_cast<size_t>(i)];
    const Tensor& msk = masks[static_cast<size_t>(i)];
    std::vector<double> w(static_cast<size_t>(max_len), 0.0);
    for (int t = 0; t < u.rows(); ++t) {
      w[static_cast<size_t>(t)] = msk.at(t);
      counts[static_cast<size_t>(t)] += msk.at(t);
    }
    Tensor padded = u.rows() == max_len
                        ? u
                        : concat_rows({u, Tensor::zeros({max_len - u.rows(), width})});
    Tensor weighted = mul_rows_const(padded, w);
    acc = acc.defined() ? add(acc, weighted) : weighted;
  }
  std::vector<double> inv(static_cast<size_t>(max_len), 0.0), qmask(static_cast<size_t>(max_len), 0.0);
  for (int t = 0; t < max_len; ++t) {
    if (counts[static_cast<size_t>(t)] > 0.0) {
      inv[static_cast<size_t>(t)] = 1.0 / counts[static_cast<size_t>(t)];
      qmask[static_cast<size_t>(t)] = 1.0;
    }
  }
  HopQuery q;
  q.matrix = mul_rows_const(acc, inv);
  q.mask = Tensor::from_data({max_len}, std::move(qmask));
  return q;
}

Tensor unit_scores(const HopQuery& query, const std::vector<Tensor>& units_hat,
                   const std::vector<Tensor>& unit_masks, const Tensor& alpha) {
  const int n = static_cast<int>(units_hat.size());
  if (n == 0) throw Error(ErrorCode::empty_support, "unit_scores: no units");
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(query.matrix.cols()));
  std::vector<Tensor> s1_parts, s2_parts;
  std::vector<double> unit_mask(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    const Tensor& u = units_hat[static_cast<size_t>(i)];
    const Tensor& msk = unit_masks[static_cast<size_t>(i)];
    double support = 0.0;
    for (int t = 0; t < msk.shape()[0]; ++t) support += msk.at(t);
    unit_mask[static_cast<size_t>(i)] = support > 0.0 ? 1.0 : 0.0;
    if (support == 0.0) {
      s1_parts.push_back(Tensor::zeros({1}));
      s2_parts.push_back(Tensor::zeros({1}));
      continue;
    }
    Tensor sim = scale(matmul(query.matrix, transpose(u)), scale_factor);  // [l_q x l_p]
    Tensor best_per_token = masked_max_rows(sim, query.mask);              // [l_p]
    s1_parts.push_back(masked_max_vec(best_per_token, msk));
    s2_parts.push_back(masked_mean_vec(best_per_token, msk));
  }
  Tensor s1 = concat_vec(s1_parts);
  Tensor s2 = concat_vec(s2_parts);
  Tensor one_minus_alpha = sub(Tensor::constant({1}, 1.0), alpha);
  Tensor fused = add(scale_by(s1, alpha), scale_by(s2, one_minus_alpha));
  return masked_softmax(fused, Tensor::from_data({n}, std::move(unit_mask)), 0, /*strict=*/true);
}

Tensor fuse_hops(const std::vector<Tensor>& hop_scores, const Tensor& pi) {
  if (pi.dim() != 1 || pi.shape()[0] != static_cast<int>(hop_scores.size()))
    throw Error(ErrorCode::length_mismatch, "fuse_hops: pi length must equal hop count");
  Tensor acc;
  for (size_t j = 0; j < hop_scores.size(); ++j) {
    Tensor term = scale_by(hop_scores[j], element(pi, static_cast<int>(j)));
    acc = acc.defined() ? add(acc, term) : term;
  }
  return acc;
}

SelectionResult select_units(const std::vector<Tensor>& units,
                             const std::vector<Tensor>& token_masks,
                             const AttentionBlockParams& self_block,
                             const std::vector<Tensor>& query_hat,
                             const std::vector<Tensor>& query_masks, const SelectorParams& sel) {
  SelectionResult result;
  const int n = static_cast<int>(units.size());
  result.units_hat.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const Tensor& msk = token_masks[static_cast<size_t>(i)];
    double support = 0.0;
    for (int t = 0; t < msk.shape()[0]; ++t) support += msk.at(t);
    // A fully padded unit would have no attention support; carry it through.
    result.units_hat.push_back(support > 0.0
                                   ? self_attend(units[static_cast<size_t>(i)], msk, self_block)
                                   : units[static_cast<size_t>(i)]);
  }
  const auto& qh = query_hat.empty() ? result.units_hat : query_hat;
  const auto& qm = query_hat.empty() ? token_masks : query_masks;

  for (int j = 1; j <= sel.hops; ++j) {
    HopQuery q = hop_query(qh, qm, j);
    result.per_hop.push_back(unit_scores(q, result.units_hat, token_masks, sel.alpha));
  }
  result.fused = fuse_hops(result.per_hop, sel.pi);
  for (int i = 0; i < n; ++i) {
    Tensor weight = element(result.fused, i);
    result.reweighted.push_back(
        add(units[static_cast<size_t>(i)], scale_by(units[static_cast<size_t>(i)], weight)));
  }
  return result;
}

}  // namespace dck::selector
