#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "dck/util.hpp"

namespace dck {

using Shape = std::vector<int>;

struct Node;
using NodePtr = std::shared_ptr<Node>;

// Gradients of leaf (parameter) nodes are collected here instead of being
// written into the node, so concurrent backward passes over graphs that share
// parameters never touch shared state.
using GradMap = std::unordered_map<const Node*, std::vector<double>>;

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // interior nodes only, sized lazily during backward
  bool requires_grad = false;
  bool leaf = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&, GradMap&)> backward;

  int64_t size() const { return static_cast<int64_t>(value.size()); }
};

int64_t shape_size(const Shape& s);

// Value-semantics handle to a graph node. All arithmetic runs in 64-bit.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s);
  static Tensor constant(const Shape& s, double v);
  static Tensor from_data(const Shape& s, std::vector<double> data);
  // Trainable leaf: requires_grad, gradients routed to the GradMap.
  static Tensor param(const Shape& s, std::vector<double> data);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return node_->size(); }
  int rows() const { return node_->shape.at(0); }
  int cols() const { return node_->shape.at(1); }
  int dim() const { return static_cast<int>(node_->shape.size()); }

  const std::vector<double>& data() const { return node_->value; }
  // In-place mutation is for initialization and optimizer updates only,
  // never on tensors that are part of a live graph.
  std::vector<double>& mutable_data() { return node_->value; }

  double at(int i) const { return node_->value[static_cast<size_t>(i)]; }
  double at(int r, int c) const {
    return node_->value[static_cast<size_t>(r) * node_->shape[1] + c];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Node* node() const { return node_.get(); }
  NodePtr node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

// Scoped switch: while disabled, ops do not record parents/backward closures.
// Used during evaluation to keep memory flat.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- primitive operations -------------------------------------------------
// The substrate is a closed set: matmul, transpose, concat/slice/gather,
// elementwise (+,-,hadamard,tanh,sigmoid,relu,exp,log), masked softmax,
// layer norm, masked max/mean pooling, log-sum-exp, scalar broadcast.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k]x[k,n]
Tensor transpose(const Tensor& a);                // 2-D

Tensor add(const Tensor& a, const Tensor& b);  // same shape
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // hadamard
Tensor add_rowwise(const Tensor& x, const Tensor& bias);  // [m,n] + [n]
Tensor scale(const Tensor& x, double c);
// x * s where s is a 1-element tensor (gradient flows into s as well).
Tensor scale_by(const Tensor& x, const Tensor& s);
// Row r of x scaled by constant w[r]; w carries no gradient.
Tensor mul_rows_const(const Tensor& x, const std::vector<double>& w);

Tensor tanh_op(const Tensor& x);
Tensor sigmoid_op(const Tensor& x);
Tensor relu_op(const Tensor& x);
Tensor exp_op(const Tensor& x);
Tensor log_op(const Tensor& x);

Tensor concat_rows(const std::vector<Tensor>& parts);  // stack along axis 0
Tensor concat_cols(const std::vector<Tensor>& parts);  // along axis 1
Tensor concat_vec(const std::vector<Tensor>& parts);   // 1-D concat
Tensor slice_rows(const Tensor& x, int r0, int r1);
Tensor slice_cols(const Tensor& x, int c0, int c1);
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
Tensor element(const Tensor& x, int i);        // 1-D -> [1]
Tensor row(const Tensor& x, int r);            // 2-D -> 1-D view copy
Tensor reshape(const Tensor& x, const Shape& s);

// Softmax along `axis` with a binary mask. Mask may have the full shape of
// `logits`, or — for 2-D inputs — be a vector covering just the softmax axis.
// Masked positions are exactly 0. A slice with empty support throws
// EmptySupport in strict mode and yields all-zeros otherwise.
Tensor masked_softmax(const Tensor& logits, const Tensor& mask, int axis, bool strict = false);

// Normalization over the last axis; gain/bias match the last-axis extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// Pool over rows of [m,n] keeping columns; mask is [m]. Rows with mask 0 are
// excluded. With no real row the result is all-zeros.
Tensor masked_max_rows(const Tensor& x, const Tensor& mask);
Tensor masked_mean_rows(const Tensor& x, const Tensor& mask);
// 1-D pooling variants -> [1].
Tensor masked_max_vec(const Tensor& x, const Tensor& mask);
Tensor masked_mean_vec(const Tensor& x, const Tensor& mask);

Tensor dot(const Tensor& a, const Tensor& b);  // 1-D -> [1]
Tensor sum_vec(const Tensor& x);               // 1-D -> [1]
Tensor mean_vec(const Tensor& x);
Tensor log_sum_exp(const Tensor& x);           // 1-D -> [1], grad = softmax

// Reverse-mode pass from a scalar. Returns the gradients of every leaf
// parameter encountered; interior gradients stay on their nodes.
GradMap backward(const Tensor& scalar_loss);

bool all_finite(const Tensor& t);

}  // namespace dck
