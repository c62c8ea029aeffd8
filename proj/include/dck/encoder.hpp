#pragma once

#include <string>
#include <utility>

#include "dck/optim.hpp"
#include "dck/tensor.hpp"

namespace dck::encoder {

struct GateParams {
  Tensor w_x;  // [input_dim x hidden]
  Tensor w_h;  // [hidden x hidden]
  Tensor b;    // [hidden]
};

struct LstmDirection {
  GateParams input, forget, output, cell;
};

struct BiLstmParams {
  LstmDirection fwd, bwd;
  int input_dim = 0;
  int hidden = 0;
};

// uniform(-0.08, 0.08) weights, zero biases except forget bias +1.
BiLstmParams make_bilstm(ParameterStore& store, const std::string& prefix, int input_dim,
                         int hidden, Rng& rng);

// One recurrence step; x is [input_dim], states are [hidden].
std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                                    const LstmDirection& p);

// [len x input_dim] -> [len x 2*hidden], forward and backward halves
// concatenated per position. Masked steps pass state through unchanged and
// produce zero output rows, so trailing padding can never leak into real
// positions from either direction.
Tensor bilstm_encode(const Tensor& seq, const Tensor& mask, const BiLstmParams& p);

}  // namespace dck::encoder
