#pragma once

#include <utility>
#include <vector>

#include "dck/tensor.hpp"

namespace dck::matcher {

struct LongSequence {
  Tensor matrix;  // [L x width]
  Tensor mask;    // [L]
  std::vector<std::pair<int, int>> segments;  // per-unit row ranges, half-open
};

// Concatenate unit matrices into one sequence, preserving token order within
// and across units.
LongSequence flatten_units(const std::vector<Tensor>& units, const std::vector<Tensor>& masks);

struct CrossAttention {
  Tensor x_aligned;  // each x_i's view of R, [L x width]
  Tensor r_aligned;  // each r_j's view of X, [l_r x width]
  Tensor scores;     // raw dot products E, [L x l_r]
};

// E_ij = <x_i, r_j>; rows of E softmaxed over response positions (masked by
// r_mask) give X's alignment, columns softmaxed over sequence positions
// (masked by x_mask) give R's. Throws EmptySupport when a side is fully
// masked.
CrossAttention cross_attend(const Tensor& x, const Tensor& x_mask, const Tensor& r,
                            const Tensor& r_mask);

// [X, X_hat, X - X_hat, X o X_hat], width 4x input.
Tensor enrich(const Tensor& x, const Tensor& x_hat);

struct MatchResult {
  Tensor side;      // enriched long-sequence features, [L x 4*width]
  Tensor response;  // enriched response features, [l_r x 4*width]
  LongSequence seq;
};

MatchResult match_pair(const std::vector<Tensor>& units, const std::vector<Tensor>& masks,
                       const Tensor& response, const Tensor& response_mask);

}  // namespace dck::matcher
