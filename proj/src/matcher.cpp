#include "dck/matcher.hpp"

namespace dck::matcher {

LongSequence flatten_units(const std::vector<Tensor>& units, const std::vector<Tensor>& masks) {
  if (units.empty() || units.size() != masks.size())
    throw Error(ErrorCode::shape_mismatch, "flatten_units: bad unit list");
  LongSequence out;
  int at = 0;
  std::vector<double> mask_data;
  for (size_t i = 0; i < units.size(); ++i) {
    const int l = units[i].rows();
    out.segments.emplace_back(at, at + l);
    at += l;
    for (int t = 0; t < l; ++t) mask_data.push_back(masks[i].at(t));
  }
  out.matrix = units.size() == 1 ? units[0] : concat_rows(units);
  out.mask = Tensor::from_data({at}, std::move(mask_data));
  return out;
}

CrossAttention cross_attend(const Tensor& x, const Tensor& x_mask, const Tensor& r,
                            const Tensor& r_mask) {
  if (x.cols() != r.cols()) throw Error(ErrorCode::shape_mismatch, "cross_attend: width mismatch");
  double x_support = 0.0, r_support = 0.0;
  for (int i = 0; i < x_mask.shape()[0]; ++i) x_support += x_mask.at(i);
  for (int j = 0; j < r_mask.shape()[0]; ++j) r_support += r_mask.at(j);
  if (x_support == 0.0 || r_support == 0.0)
    throw Error(ErrorCode::empty_support, "cross_attend: one side is fully masked");

  CrossAttention out;
  out.scores = matmul(x, transpose(r));
  Tensor row_weights = masked_softmax(out.scores, r_mask, 1);  // per x token over response
  Tensor col_weights = masked_softmax(out.scores, x_mask, 0);  // per response token over x
  out.x_aligned = matmul(row_weights, r);
  out.r_aligned = matmul(transpose(col_weights), x);
  return out;
}

Tensor enrich(const Tensor& x, const Tensor& x_hat) {
  if (x.shape() != x_hat.shape()) throw Error(ErrorCode::shape_mismatch, "enrich: shape mismatch");
  return concat_cols({x, x_hat, sub(x, x_hat), mul(x, x_hat)});
}

MatchResult match_pair(const std::vector<Tensor>& units, const std::vector<Tensor>& masks,
                       const Tensor& response, const Tensor& response_mask) {
  MatchResult out;
  out.seq = flatten_units(units, masks);
  CrossAttention ca = cross_attend(out.seq.matrix, out.seq.mask, response, response_mask);
  out.side = enrich(out.seq.matrix, ca.x_aligned);
  out.response = enrich(response, ca.r_aligned);
  return out;
}

}  // namespace dck::matcher
