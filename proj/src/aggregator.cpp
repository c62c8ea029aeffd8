#include "dck/aggregator.hpp"

namespace dck::agg {

namespace {

int last_real_index(const Tensor& mask) {
  for (int t = mask.shape()[0] - 1; t >= 0; --t)
    if (mask.at(t) != 0.0) return t;
  return -1;
}

}  // namespace

Tensor sentence_aggregate(const Tensor& features, const Tensor& mask,
                          const encoder::BiLstmParams& p) {
  const int last = last_real_index(mask);
  if (last < 0) return Tensor::zeros({4 * p.hidden});
  Tensor states = encoder::bilstm_encode(features, mask, p);
  return concat_vec({masked_max_rows(states, mask), row(states, last)});
}

Tensor session_aggregate(const std::vector<Tensor>& utterance_features,
                         const std::vector<double>& unit_mask, const encoder::BiLstmParams& p) {
  bool any = false;
  for (double m : unit_mask) any = any || m != 0.0;
  if (utterance_features.empty() || !any)
    throw Error(ErrorCode::empty_context, "session_aggregate: no real utterance");
  std::vector<Tensor> rows;
  rows.reserve(utterance_features.size());
  for (const auto& f : utterance_features) rows.push_back(reshape(f, {1, f.shape()[0]}));
  Tensor stacked = concat_rows(rows);
  Tensor mask = Tensor::from_data({static_cast<int>(unit_mask.size())}, unit_mask);
  Tensor states = encoder::bilstm_encode(stacked, mask, p);
  return concat_vec({masked_max_rows(states, mask), row(states, last_real_index(mask))});
}

PostSelection knowledge_post_select(const std::vector<Tensor>& knowledge_features,
                                    const std::vector<double>& entry_mask, const Tensor& query,
                                    bool mean_pool) {
  const int n = static_cast<int>(knowledge_features.size());
  double support = 0.0;
  for (double m : entry_mask) support += m;
  if (n == 0 || support == 0.0)
    throw Error(ErrorCode::empty_knowledge, "knowledge_post_select: no real entry");

  std::vector<Tensor> rows;
  rows.reserve(static_cast<size_t>(n));
  for (const auto& k : knowledge_features) rows.push_back(reshape(k, {1, k.shape()[0]}));
  Tensor stacked = concat_rows(rows);
  Tensor mask = Tensor::from_data({n}, entry_mask);

  PostSelection out;
  if (mean_pool) {
    std::vector<double> uniform(static_cast<size_t>(n), 0.0);
    for (int i = 0; i < n; ++i)
      if (entry_mask[static_cast<size_t>(i)] != 0.0) uniform[static_cast<size_t>(i)] = 1.0 / support;
    out.gamma = Tensor::from_data({n}, uniform);
    out.fused = masked_mean_rows(stacked, mask);
    return out;
  }
  std::vector<Tensor> logits;
  logits.reserve(static_cast<size_t>(n));
  for (const auto& k : knowledge_features) logits.push_back(dot(k, query));
  out.gamma = masked_softmax(concat_vec(logits), mask, 0, /*strict=*/true);
  Tensor combined = matmul(reshape(out.gamma, {1, n}), stacked);
  out.fused = reshape(combined, {combined.cols()});
  return out;
}

Tensor assemble_final(const Tensor& m_c, const Tensor& m_k, const Tensor& m_r, const Tensor& m_rc,
                      bool zero_context, bool zero_knowledge) {
  auto piece = [](const Tensor& t, bool zero) {
    return zero ? Tensor::zeros(t.shape()) : t;
  };
  return concat_vec({piece(m_c, zero_context), piece(m_k, zero_knowledge),
                     piece(m_r, zero_context), piece(m_rc, zero_knowledge)});
}

}  // namespace dck::agg
