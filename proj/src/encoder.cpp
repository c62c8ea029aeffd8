#include "dck/encoder.hpp"

#include <cmath>

namespace dck::encoder {

namespace {

// Uniform with variance 1/fan_in; the step's fan-in spans both matrices.
// Keeps activations at a working scale across widths (a fixed constant
// collapses the signal at desk-scale dims and starves the gradient oracle).
GateParams make_gate(ParameterStore& store, const std::string& prefix, int input_dim, int hidden,
                     double bias_init, Rng& rng) {
  const double s = std::sqrt(3.0 / (input_dim + hidden));
  GateParams g;
  g.w_x = store.create_uniform(prefix + ".w_x", {input_dim, hidden}, -s, s, rng);
  g.w_h = store.create_uniform(prefix + ".w_h", {hidden, hidden}, -s, s, rng);
  g.b = store.create(prefix + ".b", {hidden}, std::vector<double>(static_cast<size_t>(hidden), bias_init));
  return g;
}

LstmDirection make_direction(ParameterStore& store, const std::string& prefix, int input_dim,
                             int hidden, Rng& rng) {
  LstmDirection d;
  d.input = make_gate(store, prefix + ".input", input_dim, hidden, 0.0, rng);
  d.forget = make_gate(store, prefix + ".forget", input_dim, hidden, 1.0, rng);
  d.output = make_gate(store, prefix + ".output", input_dim, hidden, 0.0, rng);
  d.cell = make_gate(store, prefix + ".cell", input_dim, hidden, 0.0, rng);
  return d;
}

}  // namespace

BiLstmParams make_bilstm(ParameterStore& store, const std::string& prefix, int input_dim,
                         int hidden, Rng& rng) {
  BiLstmParams p;
  p.input_dim = input_dim;
  p.hidden = hidden;
  p.fwd = make_direction(store, prefix + ".fwd", input_dim, hidden, rng);
  p.bwd = make_direction(store, prefix + ".bwd", input_dim, hidden, rng);
  return p;
}

std::pair<Tensor, Tensor> lstm_cell(const Tensor& x, const Tensor& h_prev, const Tensor& c_prev,
                                    const LstmDirection& p) {
  const int d = x.shape()[0];
  const int h = h_prev.shape()[0];
  Tensor xr = reshape(x, {1, d});
  Tensor hr = reshape(h_prev, {1, h});
  Tensor cr = reshape(c_prev, {1, h});
  auto gate = [&](const GateParams& g) {
    return add_rowwise(add(matmul(xr, g.w_x), matmul(hr, g.w_h)), g.b);
  };
  Tensor i = sigmoid_op(gate(p.input));
  Tensor f = sigmoid_op(gate(p.forget));
  Tensor o = sigmoid_op(gate(p.output));
  Tensor g = tanh_op(gate(p.cell));
  Tensor c = add(mul(i, g), mul(f, cr));
  Tensor hn = mul(o, tanh_op(c));
  return {reshape(hn, {h}), reshape(c, {h})};
}

namespace {

// One direction over the sequence. Gate input projections for every position
// are batched into single matmuls; the recurrent part runs step by step.
std::vector<Tensor> run_direction(const Tensor& seq, const std::vector<double>& mask,
                                  const LstmDirection& dir, int hidden, bool reverse) {
  const int len = seq.rows();
  Tensor xi = add_rowwise(matmul(seq, dir.input.w_x), dir.input.b);
  Tensor xf = add_rowwise(matmul(seq, dir.forget.w_x), dir.forget.b);
  Tensor xo = add_rowwise(matmul(seq, dir.output.w_x), dir.output.b);
  Tensor xg = add_rowwise(matmul(seq, dir.cell.w_x), dir.cell.b);

  Tensor h = Tensor::zeros({1, hidden});
  Tensor c = Tensor::zeros({1, hidden});
  std::vector<Tensor> out(static_cast<size_t>(len));
  for (int step = 0; step < len; ++step) {
    const int t = reverse ? len - 1 - step : step;
    if (mask[static_cast<size_t>(t)] == 0.0) {
      out[static_cast<size_t>(t)] = Tensor::zeros({1, hidden});
      continue;  // state passes through the padded step untouched
    }
    Tensor i = sigmoid_op(add(slice_rows(xi, t, t + 1), matmul(h, dir.input.w_h)));
    Tensor f = sigmoid_op(add(slice_rows(xf, t, t + 1), matmul(h, dir.forget.w_h)));
    Tensor o = sigmoid_op(add(slice_rows(xo, t, t + 1), matmul(h, dir.output.w_h)));
    Tensor g = tanh_op(add(slice_rows(xg, t, t + 1), matmul(h, dir.cell.w_h)));
    c = add(mul(i, g), mul(f, c));
    h = mul(o, tanh_op(c));
    out[static_cast<size_t>(t)] = h;
  }
  return out;
}

}  // namespace

Tensor bilstm_encode(const Tensor& seq, const Tensor& mask, const BiLstmParams& p) {
  if (seq.dim() != 2 || seq.cols() != p.input_dim)
    throw Error(ErrorCode::shape_mismatch, "bilstm_encode: input width mismatch");
  if (mask.dim() != 1 || mask.shape()[0] != seq.rows())
    throw Error(ErrorCode::shape_mismatch, "bilstm_encode: mask extent mismatch");
  auto fwd = run_direction(seq, mask.data(), p.fwd, p.hidden, false);
  auto bwd = run_direction(seq, mask.data(), p.bwd, p.hidden, true);
  return concat_cols({concat_rows(fwd), concat_rows(bwd)});
}

}  // namespace dck::encoder
