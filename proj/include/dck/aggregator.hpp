#pragma once

#include <vector>

#include "dck/encoder.hpp"
#include "dck/tensor.hpp"

namespace dck::agg {

// BiLSTM over the feature rows, then [masked max ; state at the last real
// position]; output width 4x the hidden size. All-masked input yields zeros.
Tensor sentence_aggregate(const Tensor& features, const Tensor& mask,
                          const encoder::BiLstmParams& p);

// Same pooling over a sequence of per-utterance feature vectors. Throws
// EmptyContext when no utterance is real.
Tensor session_aggregate(const std::vector<Tensor>& utterance_features,
                         const std::vector<double>& unit_mask, const encoder::BiLstmParams& p);

struct PostSelection {
  Tensor fused;   // M_k, [4h]
  Tensor gamma;   // [n_k], distribution over real entries
};

// gamma_i = softmax(<K_i, query>) over real entries; fused = sum gamma_i K_i.
// With mean_pool set the weights are uniform over real entries instead.
PostSelection knowledge_post_select(const std::vector<Tensor>& knowledge_features,
                                    const std::vector<double>& entry_mask, const Tensor& query,
                                    bool mean_pool);

// [M_c; M_k; M_r; M_rc] with zeroed slices where a component is ablated, so
// the head input width never changes.
Tensor assemble_final(const Tensor& m_c, const Tensor& m_k, const Tensor& m_r, const Tensor& m_rc,
                      bool zero_context, bool zero_knowledge);

}  // namespace dck::agg
