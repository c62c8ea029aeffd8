#include "dck/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace dck {

namespace {

thread_local bool t_grad_enabled = true;

NodePtr make_node(Shape s, std::vector<double> v) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(s);
  n->value = std::move(v);
  return n;
}

// Target buffer for a parent's gradient: leaves collect into the map,
// interior nodes on themselves.
std::vector<double>& grad_buf(Node* p, GradMap& sink) {
  if (p->leaf) {
    auto& g = sink[p];
    if (g.empty()) g.assign(p->value.size(), 0.0);
    return g;
  }
  if (p->grad.empty()) p->grad.assign(p->value.size(), 0.0);
  return p->grad;
}

void check_2d(const Tensor& t, const char* who) {
  if (t.dim() != 2) throw Error(ErrorCode::shape_mismatch, std::string(who) + ": expected 2-D");
}

}  // namespace

std::string hex64(uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

int64_t shape_size(const Shape& s) {
  int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

Tensor Tensor::zeros(const Shape& s) {
  return Tensor(make_node(s, std::vector<double>(static_cast<size_t>(shape_size(s)), 0.0)));
}

Tensor Tensor::constant(const Shape& s, double v) {
  return Tensor(make_node(s, std::vector<double>(static_cast<size_t>(shape_size(s)), v)));
}

Tensor Tensor::from_data(const Shape& s, std::vector<double> data) {
  if (shape_size(s) != static_cast<int64_t>(data.size()))
    throw Error(ErrorCode::shape_mismatch, "from_data: shape/data size mismatch");
  return Tensor(make_node(s, std::move(data)));
}

Tensor Tensor::param(const Shape& s, std::vector<double> data) {
  Tensor t = from_data(s, std::move(data));
  t.node()->requires_grad = true;
  t.node()->leaf = true;
  return t;
}

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }
bool grad_enabled() { return t_grad_enabled; }

namespace {

// Wires the result node to its parents when gradients are wanted.
Tensor finish(NodePtr out, std::initializer_list<Tensor> parents,
              std::function<void(Node&, GradMap&)> back) {
  bool need = false;
  if (t_grad_enabled) {
    for (const auto& p : parents)
      if (p.defined() && p.node()->requires_grad) need = true;
  }
  if (need) {
    out->requires_grad = true;
    for (const auto& p : parents)
      if (p.defined()) out->parents.push_back(p.node_ptr());
    out->backward = std::move(back);
  }
  return Tensor(out);
}

Tensor finish(NodePtr out, const std::vector<Tensor>& parents,
              std::function<void(Node&, GradMap&)> back) {
  bool need = false;
  if (t_grad_enabled) {
    for (const auto& p : parents)
      if (p.node()->requires_grad) need = true;
  }
  if (need) {
    out->requires_grad = true;
    for (const auto& p : parents) out->parents.push_back(p.node_ptr());
    out->backward = std::move(back);
  }
  return Tensor(out);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) throw Error(ErrorCode::shape_mismatch, "matmul: inner extents differ");
  auto out = make_node({m, n}, std::vector<double>(static_cast<size_t>(m) * n, 0.0));
  const double* A = a.data().data();
  const double* B = b.data().data();
  double* C = out->value.data();
  for (int i = 0; i < m; ++i) {
    const double* ai = A + static_cast<size_t>(i) * k;
    double* ci = C + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = B + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
  Node* na = a.node();
  Node* nb = b.node();
  return finish(out, {a, b}, [na, nb, m, k, n](Node& self, GradMap& sink) {
    const double* G = self.grad.data();
    const double* A = na->value.data();
    const double* B = nb->value.data();
    if (na->requires_grad) {
      double* dA = grad_buf(na, sink).data();
      // dA = G * B^T
      for (int i = 0; i < m; ++i) {
        const double* gi = G + static_cast<size_t>(i) * n;
        double* dai = dA + static_cast<size_t>(i) * k;
        for (int p = 0; p < k; ++p) {
          const double* bp = B + static_cast<size_t>(p) * n;
          double acc = 0.0;
          for (int j = 0; j < n; ++j) acc += gi[j] * bp[j];
          dai[p] += acc;
        }
      }
    }
    if (nb->requires_grad) {
      double* dB = grad_buf(nb, sink).data();
      // dB = A^T * G
      for (int i = 0; i < m; ++i) {
        const double* ai = A + static_cast<size_t>(i) * k;
        const double* gi = G + static_cast<size_t>(i) * n;
        for (int p = 0; p < k; ++p) {
          const double av = ai[p];
          if (av == 0.0) continue;
          double* dbp = dB + static_cast<size_t>(p) * n;
          for (int j = 0; j < n; ++j) dbp[j] += av * gi[j];
        }
      }
    }
  });
}

Tensor transpose(const Tensor& a) {
  check_2d(a, "transpose");
  const int m = a.rows(), n = a.cols();
  auto out = make_node({n, m}, std::vector<double>(static_cast<size_t>(m) * n));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<size_t>(j) * m + i] = a.data()[static_cast<size_t>(i) * n + j];
  Node* na = a.node();
  return finish(out, {a}, [na, m, n](Node& self, GradMap& sink) {
    double* dA = grad_buf(na, sink).data();
    const double* G = self.grad.data();
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        dA[static_cast<size_t>(i) * n + j] += G[static_cast<size_t>(j) * m + i];
  });
}

namespace {

Tensor binary_same_shape(const Tensor& a, const Tensor& b, const char* who,
                         double (*fwd)(double, double), int mode /*0:add 1:sub 2:mul*/) {
  if (a.shape() != b.shape()) throw Error(ErrorCode::shape_mismatch, std::string(who) + ": shape mismatch");
  auto out = make_node(a.shape(), std::vector<double>(a.data().size()));
  const size_t n = a.data().size();
  for (size_t i = 0; i < n; ++i) out->value[i] = fwd(a.data()[i], b.data()[i]);
  Node* na = a.node();
  Node* nb = b.node();
  return finish(out, {a, b}, [na, nb, mode, n](Node& self, GradMap& sink) {
    const double* G = self.grad.data();
    if (na->requires_grad) {
      double* dA = grad_buf(na, sink).data();
      if (mode == 2) {
        const double* B = nb->value.data();
        for (size_t i = 0; i < n; ++i) dA[i] += G[i] * B[i];
      } else {
        for (size_t i = 0; i < n; ++i) dA[i] += G[i];
      }
    }
    if (nb->requires_grad) {
      double* dB = grad_buf(nb, sink).data();
      if (mode == 2) {
        const double* A = na->value.data();
        for (size_t i = 0; i < n; ++i) dB[i] += G[i] * A[i];
      } else if (mode == 1) {
        for (size_t i = 0; i < n; ++i) dB[i] -= G[i];
      } else {
        for (size_t i = 0; i < n; ++i) dB[i] += G[i];
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "add", [](double x, double y) { return x + y; }, 0);
}
Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "sub", [](double x, double y) { return x - y; }, 1);
}
Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_same_shape(a, b, "mul", [](double x, double y) { return x * y; }, 2);
}

Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
  check_2d(x, "add_rowwise");
  if (bias.dim() != 1 || bias.shape()[0] != x.cols())
    throw Error(ErrorCode::shape_mismatch, "add_rowwise: bias extent mismatch");
  const int m = x.rows(), n = x.cols();
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<size_t>(i) * n + j] = x.data()[static_cast<size_t>(i) * n + j] + bias.data()[static_cast<size_t>(j)];
  Node* nx = x.node();
  Node* nb = bias.node();
  return finish(out, {x, bias}, [nx, nb, m, n](Node& self, GradMap& sink) {
    const double* G = self.grad.data();
    if (nx->requires_grad) {
      double* dX = grad_buf(nx, sink).data();
      for (size_t i = 0; i < static_cast<size_t>(m) * n; ++i) dX[i] += G[i];
    }
    if (nb->requires_grad) {
      double* dB = grad_buf(nb, sink).data();
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) dB[j] += G[static_cast<size_t>(i) * n + j];
    }
  });
}

Tensor scale(const Tensor& x, double c) {
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  for (size_t i = 0; i < x.data().size(); ++i) out->value[i] = x.data()[i] * c;
  Node* nx = x.node();
  return finish(out, {x}, [nx, c](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (size_t i = 0; i < self.grad.size(); ++i) dX[i] += self.grad[i] * c;
  });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw Error(ErrorCode::shape_mismatch, "scale_by: scalar expected");
  const double sv = s.at(0);
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  for (size_t i = 0; i < x.data().size(); ++i) out->value[i] = x.data()[i] * sv;
  Node* nx = x.node();
  Node* ns = s.node();
  return finish(out, {x, s}, [nx, ns, sv](Node& self, GradMap& sink) {
    if (nx->requires_grad) {
      double* dX = grad_buf(nx, sink).data();
      for (size_t i = 0; i < self.grad.size(); ++i) dX[i] += self.grad[i] * sv;
    }
    if (ns->requires_grad) {
      double acc = 0.0;
      for (size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * nx->value[i];
      grad_buf(ns, sink)[0] += acc;
    }
  });
}

Tensor mul_rows_const(const Tensor& x, const std::vector<double>& w) {
  check_2d(x, "mul_rows_const");
  if (static_cast<int>(w.size()) != x.rows())
    throw Error(ErrorCode::shape_mismatch, "mul_rows_const: weight extent mismatch");
  const int m = x.rows(), n = x.cols();
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->value[static_cast<size_t>(i) * n + j] = x.data()[static_cast<size_t>(i) * n + j] * w[static_cast<size_t>(i)];
  Node* nx = x.node();
  std::vector<double> wc = w;
  return finish(out, {x}, [nx, wc = std::move(wc), m, n](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    const double* G = self.grad.data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        dX[static_cast<size_t>(i) * n + j] += G[static_cast<size_t>(i) * n + j] * wc[static_cast<size_t>(i)];
  });
}

namespace {

Tensor unary(const Tensor& x, double (*f)(double), int kind /*0 tanh 1 sigm 2 relu 3 exp 4 log*/) {
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  for (size_t i = 0; i < x.data().size(); ++i) out->value[i] = f(x.data()[i]);
  Node* nx = x.node();
  return finish(out, {x}, [nx, kind](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    const double* G = self.grad.data();
    const double* Y = self.value.data();
    const double* X = nx->value.data();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double d = 0.0;
      switch (kind) {
        case 0: d = 1.0 - Y[i] * Y[i]; break;
        case 1: d = Y[i] * (1.0 - Y[i]); break;
        case 2: d = X[i] > 0.0 ? 1.0 : 0.0; break;
        case 3: d = Y[i]; break;
        case 4: d = 1.0 / X[i]; break;
      }
      dX[i] += G[i] * d;
    }
  });
}

}  // namespace

Tensor tanh_op(const Tensor& x) { return unary(x, [](double v) { return std::tanh(v); }, 0); }
Tensor sigmoid_op(const Tensor& x) {
  return unary(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, 1);
}
Tensor relu_op(const Tensor& x) { return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, 2); }
Tensor exp_op(const Tensor& x) { return unary(x, [](double v) { return std::exp(v); }, 3); }
Tensor log_op(const Tensor& x) { return unary(x, [](double v) { return std::log(v); }, 4); }

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat_rows: empty");
  const int n = parts[0].cols();
  int m = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_rows");
    if (p.cols() != n) throw Error(ErrorCode::shape_mismatch, "concat_rows: column mismatch");
    m += p.rows();
  }
  auto out = make_node({m, n}, std::vector<double>(static_cast<size_t>(m) * n));
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out->value.data() + off, p.data().data(), p.data().size() * sizeof(double));
    off += p.data().size();
  }
  std::vector<Node*> srcs;
  for (const auto& p : parts) srcs.push_back(p.node());
  return finish(out, parts, [srcs](Node& self, GradMap& sink) {
    size_t off = 0;
    for (Node* s : srcs) {
      if (s->requires_grad) {
        double* d = grad_buf(s, sink).data();
        for (size_t i = 0; i < s->value.size(); ++i) d[i] += self.grad[off + i];
      }
      off += s->value.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat_cols: empty");
  const int m = parts[0].rows();
  int n = 0;
  for (const auto& p : parts) {
    check_2d(p, "concat_cols");
    if (p.rows() != m) throw Error(ErrorCode::shape_mismatch, "concat_cols: row mismatch");
    n += p.cols();
  }
  auto out = make_node({m, n}, std::vector<double>(static_cast<size_t>(m) * n));
  int coff = 0;
  for (const auto& p : parts) {
    const int pc = p.cols();
    for (int i = 0; i < m; ++i)
      std::memcpy(out->value.data() + static_cast<size_t>(i) * n + coff,
                  p.data().data() + static_cast<size_t>(i) * pc, static_cast<size_t>(pc) * sizeof(double));
    coff += pc;
  }
  std::vector<Node*> srcs;
  for (const auto& p : parts) srcs.push_back(p.node());
  return finish(out, parts, [srcs, m, n](Node& self, GradMap& sink) {
    int coff = 0;
    for (Node* s : srcs) {
      const int pc = s->shape[1];
      if (s->requires_grad) {
        double* d = grad_buf(s, sink).data();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < pc; ++j)
            d[static_cast<size_t>(i) * pc + j] += self.grad[static_cast<size_t>(i) * n + coff + j];
      }
      coff += pc;
    }
  });
}

Tensor concat_vec(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw Error(ErrorCode::shape_mismatch, "concat_vec: empty");
  int n = 0;
  for (const auto& p : parts) {
    if (p.dim() != 1) throw Error(ErrorCode::shape_mismatch, "concat_vec: expected 1-D");
    n += p.shape()[0];
  }
  auto out = make_node({n}, std::vector<double>(static_cast<size_t>(n)));
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out->value.data() + off, p.data().data(), p.data().size() * sizeof(double));
    off += p.data().size();
  }
  std::vector<Node*> srcs;
  for (const auto& p : parts) srcs.push_back(p.node());
  return finish(out, parts, [srcs](Node& self, GradMap& sink) {
    size_t off = 0;
    for (Node* s : srcs) {
      if (s->requires_grad) {
        double* d = grad_buf(s, sink).data();
        for (size_t i = 0; i < s->value.size(); ++i) d[i] += self.grad[off + i];
      }
      off += s->value.size();
    }
  });
}

Tensor slice_rows(const Tensor& x, int r0, int r1) {
  check_2d(x, "slice_rows");
  if (r0 < 0 || r1 > x.rows() || r0 >= r1)
    throw Error(ErrorCode::shape_mismatch, "slice_rows: bad range");
  const int n = x.cols();
  auto out = make_node({r1 - r0, n}, std::vector<double>(static_cast<size_t>(r1 - r0) * n));
  std::memcpy(out->value.data(), x.data().data() + static_cast<size_t>(r0) * n,
              out->value.size() * sizeof(double));
  Node* nx = x.node();
  return finish(out, {x}, [nx, r0, n](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (size_t i = 0; i < self.grad.size(); ++i)
      dX[static_cast<size_t>(r0) * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, int c0, int c1) {
  check_2d(x, "slice_cols");
  if (c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw Error(ErrorCode::shape_mismatch, "slice_cols: bad range");
  const int m = x.rows(), n = x.cols(), w = c1 - c0;
  auto out = make_node({m, w}, std::vector<double>(static_cast<size_t>(m) * w));
  for (int i = 0; i < m; ++i)
    std::memcpy(out->value.data() + static_cast<size_t>(i) * w,
                x.data().data() + static_cast<size_t>(i) * n + c0, static_cast<size_t>(w) * sizeof(double));
  Node* nx = x.node();
  return finish(out, {x}, [nx, c0, m, n, w](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        dX[static_cast<size_t>(i) * n + c0 + j] += self.grad[static_cast<size_t>(i) * w + j];
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  check_2d(x, "gather_rows");
  const int n = x.cols();
  for (int i : idx)
    if (i < 0 || i >= x.rows()) throw Error(ErrorCode::id_out_of_range, "gather_rows: index out of range");
  auto out = make_node({static_cast<int>(idx.size()), n},
                       std::vector<double>(idx.size() * static_cast<size_t>(n)));
  for (size_t r = 0; r < idx.size(); ++r)
    std::memcpy(out->value.data() + r * n, x.data().data() + static_cast<size_t>(idx[r]) * n,
                static_cast<size_t>(n) * sizeof(double));
  Node* nx = x.node();
  std::vector<int> ic = idx;
  return finish(out, {x}, [nx, ic = std::move(ic), n](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (size_t r = 0; r < ic.size(); ++r)
      for (int j = 0; j < n; ++j)
        dX[static_cast<size_t>(ic[r]) * n + j] += self.grad[r * n + j];
  });
}

Tensor element(const Tensor& x, int i) {
  if (x.dim() != 1) throw Error(ErrorCode::shape_mismatch, "element: expected 1-D");
  if (i < 0 || i >= x.shape()[0]) throw Error(ErrorCode::id_out_of_range, "element: out of range");
  auto out = make_node({1}, {x.at(i)});
  Node* nx = x.node();
  return finish(out, {x}, [nx, i](Node& self, GradMap& sink) {
    grad_buf(nx, sink)[static_cast<size_t>(i)] += self.grad[0];
  });
}

Tensor row(const Tensor& x, int r) {
  check_2d(x, "row");
  if (r < 0 || r >= x.rows()) throw Error(ErrorCode::id_out_of_range, "row: out of range");
  const int n = x.cols();
  auto out = make_node({n}, std::vector<double>(static_cast<size_t>(n)));
  std::memcpy(out->value.data(), x.data().data() + static_cast<size_t>(r) * n,
              static_cast<size_t>(n) * sizeof(double));
  Node* nx = x.node();
  return finish(out, {x}, [nx, r, n](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (int j = 0; j < n; ++j) dX[static_cast<size_t>(r) * n + j] += self.grad[static_cast<size_t>(j)];
  });
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (shape_size(s) != x.size()) throw Error(ErrorCode::shape_mismatch, "reshape: size mismatch");
  auto out = make_node(s, x.data());
  Node* nx = x.node();
  return finish(out, {x}, [nx](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (size_t i = 0; i < self.grad.size(); ++i) dX[i] += self.grad[i];
  });
}

namespace {

// Resolves mask lookup for 2-D masked softmax: mask may be full-shape or a
// vector along the softmax axis.
struct MaskView {
  const std::vector<double>* m;
  int rows, cols;
  bool full;
  int axis;
  double operator()(int i, int j) const {
    if (full) return (*m)[static_cast<size_t>(i) * cols + j];
    return axis == 1 ? (*m)[static_cast<size_t>(j)] : (*m)[static_cast<size_t>(i)];
  }
};

}  // namespace

Tensor masked_softmax(const Tensor& logits, const Tensor& mask, int axis, bool strict) {
  if (logits.dim() == 1) {
    if (axis != 0) throw Error(ErrorCode::shape_mismatch, "masked_softmax: 1-D axis must be 0");
    if (mask.dim() != 1 || mask.shape() != logits.shape())
      throw Error(ErrorCode::shape_mismatch, "masked_softmax: mask shape mismatch");
    const int n = logits.shape()[0];
    auto out = make_node(logits.shape(), std::vector<double>(static_cast<size_t>(n), 0.0));
    double mx = -HUGE_VAL;
    int support = 0;
    for (int i = 0; i < n; ++i)
      if (mask.at(i) != 0.0) {
        mx = std::max(mx, logits.at(i));
        ++support;
      }
    if (support == 0) {
      if (strict) throw Error(ErrorCode::empty_support, "masked_softmax: empty support");
    } else {
      double z = 0.0;
      for (int i = 0; i < n; ++i)
        if (mask.at(i) != 0.0) {
          out->value[static_cast<size_t>(i)] = std::exp(logits.at(i) - mx);
          z += out->value[static_cast<size_t>(i)];
        }
      for (int i = 0; i < n; ++i) out->value[static_cast<size_t>(i)] /= z;
      for (int i = 0; i < n; ++i)
        if (mask.at(i) == 0.0) out->value[static_cast<size_t>(i)] = 0.0;
    }
    Node* nx = logits.node();
    Node* nm = mask.node();
    return finish(out, {logits, mask}, [nx, nm, n](Node& self, GradMap& sink) {
      if (!nx->requires_grad) return;
      double* dX = grad_buf(nx, sink).data();
      const double* Y = self.value.data();
      const double* G = self.grad.data();
      double dotgy = 0.0;
      for (int i = 0; i < n; ++i) dotgy += G[i] * Y[i];
      for (int i = 0; i < n; ++i)
        if (nm->value[static_cast<size_t>(i)] != 0.0) dX[i] += Y[i] * (G[i] - dotgy);
    });
  }

  check_2d(logits, "masked_softmax");
  const int m = logits.rows(), n = logits.cols();
  bool full_mask;
  if (mask.dim() == 2 && mask.rows() == m && mask.cols() == n) {
    full_mask = true;
  } else if (mask.dim() == 1 && mask.shape()[0] == (axis == 1 ? n : m)) {
    full_mask = false;
  } else {
    throw Error(ErrorCode::shape_mismatch, "masked_softmax: mask shape mismatch");
  }
  MaskView mv{&mask.data(), m, n, full_mask, axis};
  auto out = make_node(logits.shape(), std::vector<double>(static_cast<size_t>(m) * n, 0.0));
  const double* X = logits.data().data();
  double* Y = out->value.data();
  const int slices = axis == 1 ? m : n;
  const int extent = axis == 1 ? n : m;
  auto idx = [&](int s, int t) {
    return axis == 1 ? static_cast<size_t>(s) * n + t : static_cast<size_t>(t) * n + s;
  };
  auto mval = [&](int s, int t) { return axis == 1 ? mv(s, t) : mv(t, s); };
  for (int s = 0; s < slices; ++s) {
    double mx = -HUGE_VAL;
    int support = 0;
    for (int t = 0; t < extent; ++t)
      if (mval(s, t) != 0.0) {
        mx = std::max(mx, X[idx(s, t)]);
        ++support;
      }
    if (support == 0) {
      if (strict) throw Error(ErrorCode::empty_support, "masked_softmax: empty support");
      continue;  // slice stays all-zero
    }
    double z = 0.0;
    for (int t = 0; t < extent; ++t)
      if (mval(s, t) != 0.0) {
        Y[idx(s, t)] = std::exp(X[idx(s, t)] - mx);
        z += Y[idx(s, t)];
      }
    for (int t = 0; t < extent; ++t)
      if (mval(s, t) != 0.0) Y[idx(s, t)] /= z;
  }
  Node* nx = logits.node();
  Node* nm = mask.node();
  const bool fm = full_mask;
  return finish(out, {logits, mask}, [nx, nm, m, n, axis, fm](Node& self, GradMap& sink) {
    if (!nx->requires_grad) return;
    MaskView mv{&nm->value, m, n, fm, axis};
    auto mval = [&](int s, int t) { return axis == 1 ? mv(s, t) : mv(t, s); };
    double* dX = grad_buf(nx, sink).data();
    const double* Y = self.value.data();
    const double* G = self.grad.data();
    const int slices = axis == 1 ? m : n;
    const int extent = axis == 1 ? n : m;
    auto idx = [&](int s, int t) {
      return axis == 1 ? static_cast<size_t>(s) * n + t : static_cast<size_t>(t) * n + s;
    };
    for (int s = 0; s < slices; ++s) {
      double dotgy = 0.0;
      for (int t = 0; t < extent; ++t) dotgy += G[idx(s, t)] * Y[idx(s, t)];
      for (int t = 0; t < extent; ++t)
        if (mval(s, t) != 0.0) dX[idx(s, t)] += Y[idx(s, t)] * (G[idx(s, t)] - dotgy);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const bool vec = x.dim() == 1;
  const int m = vec ? 1 : x.rows();
  const int n = vec ? x.shape()[0] : x.cols();
  if (gain.dim() != 1 || gain.shape()[0] != n || bias.dim() != 1 || bias.shape()[0] != n)
    throw Error(ErrorCode::shape_mismatch, "layer_norm: gain/bias extent mismatch");
  auto out = make_node(x.shape(), std::vector<double>(x.data().size()));
  std::vector<double> mu(static_cast<size_t>(m)), is(static_cast<size_t>(m));
  const double* X = x.data().data();
  for (int i = 0; i < m; ++i) {
    const double* xi = X + static_cast<size_t>(i) * n;
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += xi[j];
    const double mean = s / n;
    double v = 0.0;
    for (int j = 0; j < n; ++j) v += (xi[j] - mean) * (xi[j] - mean);
    v /= n;
    const double inv = 1.0 / std::sqrt(v + eps);
    mu[static_cast<size_t>(i)] = mean;
    is[static_cast<size_t>(i)] = inv;
    for (int j = 0; j < n; ++j)
      out->value[static_cast<size_t>(i) * n + j] = gain.at(j) * ((xi[j] - mean) * inv) + bias.at(j);
  }
  Node* nx = x.node();
  Node* ng = gain.node();
  Node* nb = bias.node();
  return finish(out, {x, gain, bias},
                [nx, ng, nb, m, n, mu = std::move(mu), is = std::move(is)](Node& self, GradMap& sink) {
    const double* X = nx->value.data();
    const double* G = self.grad.data();
    const double* gn = ng->value.data();
    for (int i = 0; i < m; ++i) {
      const double* xi = X + static_cast<size_t>(i) * n;
      const double* gi = G + static_cast<size_t>(i) * n;
      const double inv = is[static_cast<size_t>(i)];
      const double mean = mu[static_cast<size_t>(i)];
      if (nx->requires_grad) {
        double* dX = grad_buf(nx, sink).data() + static_cast<size_t>(i) * n;
        // d xhat, then fold the mean/variance terms
        double sum_dxh = 0.0, sum_dxh_xh = 0.0;
        for (int j = 0; j < n; ++j) {
          const double xh = (xi[j] - mean) * inv;
          const double dxh = gi[j] * gn[j];
          sum_dxh += dxh;
          sum_dxh_xh += dxh * xh;
        }
        for (int j = 0; j < n; ++j) {
          const double xh = (xi[j] - mean) * inv;
          const double dxh = gi[j] * gn[j];
          dX[j] += inv * (dxh - sum_dxh / n - xh * sum_dxh_xh / n);
        }
      }
      if (ng->requires_grad) {
        double* dG = grad_buf(ng, sink).data();
        for (int j = 0; j < n; ++j) dG[j] += gi[j] * ((xi[j] - mean) * inv);
      }
      if (nb->requires_grad) {
        double* dB = grad_buf(nb, sink).data();
        for (int j = 0; j < n; ++j) dB[j] += gi[j];
      }
    }
  });
}

namespace {

Tensor masked_pool_rows(const Tensor& x, const Tensor& mask, bool is_max) {
  if (x.dim() != 2) throw Error(ErrorCode::shape_mismatch, "masked pool: expected 2-D");
  if (mask.dim() != 1 || mask.shape()[0] != x.rows())
    throw Error(ErrorCode::shape_mismatch, "masked pool: mask extent mismatch");
  const int m = x.rows(), n = x.cols();
  auto out = make_node(Shape{n}, std::vector<double>(static_cast<size_t>(n), 0.0));
  int count = 0;
  for (int i = 0; i < m; ++i)
    if (mask.at(i) != 0.0) ++count;
  std::vector<int> arg;
  if (count > 0) {
    if (is_max) {
      arg.assign(static_cast<size_t>(n), -1);
      for (int j = 0; j < n; ++j) {
        double best = -HUGE_VAL;
        for (int i = 0; i < m; ++i) {
          if (mask.at(i) == 0.0) continue;
          const double v = x.at(i, j);
          if (v > best) {
            best = v;
            arg[static_cast<size_t>(j)] = i;
          }
        }
        out->value[static_cast<size_t>(j)] = best;
      }
    } else {
      for (int i = 0; i < m; ++i) {
        if (mask.at(i) == 0.0) continue;
        for (int j = 0; j < n; ++j) out->value[static_cast<size_t>(j)] += x.at(i, j);
      }
      for (int j = 0; j < n; ++j) out->value[static_cast<size_t>(j)] /= count;
    }
  }
  Node* nx = x.node();
  Node* nm = mask.node();
  return finish(out, {x, mask},
                [nx, nm, m, n, is_max, count, arg = std::move(arg)](Node& self, GradMap& sink) {
    if (!nx->requires_grad || count == 0) return;
    double* dX = grad_buf(nx, sink).data();
    if (is_max) {
      for (int j = 0; j < n; ++j)
        if (arg[static_cast<size_t>(j)] >= 0)
          dX[static_cast<size_t>(arg[static_cast<size_t>(j)]) * n + j] += self.grad[static_cast<size_t>(j)];
    } else {
      for (int i = 0; i < m; ++i) {
        if (nm->value[static_cast<size_t>(i)] == 0.0) continue;
        for (int j = 0; j < n; ++j)
          dX[static_cast<size_t>(i) * n + j] += self.grad[static_cast<size_t>(j)] / count;
      }
    }
  });
}

}  // namespace

Tensor masked_max_rows(const Tensor& x, const Tensor& mask) { return masked_pool_rows(x, mask, true); }
Tensor masked_mean_rows(const Tensor& x, const Tensor& mask) { return masked_pool_rows(x, mask, false); }

Tensor masked_max_vec(const Tensor& x, const Tensor& mask) {
  if (x.dim() != 1) throw Error(ErrorCode::shape_mismatch, "masked_max_vec: expected 1-D");
  return masked_pool_rows(reshape(x, {x.shape()[0], 1}), mask, true);
}

Tensor masked_mean_vec(const Tensor& x, const Tensor& mask) {
  if (x.dim() != 1) throw Error(ErrorCode::shape_mismatch, "masked_mean_vec: expected 1-D");
  return masked_pool_rows(reshape(x, {x.shape()[0], 1}), mask, false);
}

Tensor dot(const Tensor& a, const Tensor& b) {
  if (a.dim() != 1 || b.dim() != 1 || a.shape() != b.shape())
    throw Error(ErrorCode::shape_mismatch, "dot: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < a.data().size(); ++i) acc += a.data()[i] * b.data()[i];
  auto out = make_node({1}, {acc});
  Node* na = a.node();
  Node* nb = b.node();
  return finish(out, {a, b}, [na, nb](Node& self, GradMap& sink) {
    const double g = self.grad[0];
    if (na->requires_grad) {
      double* dA = grad_buf(na, sink).data();
      for (size_t i = 0; i < na->value.size(); ++i) dA[i] += g * nb->value[i];
    }
    if (nb->requires_grad) {
      double* dB = grad_buf(nb, sink).data();
      for (size_t i = 0; i < nb->value.size(); ++i) dB[i] += g * na->value[i];
    }
  });
}

Tensor sum_vec(const Tensor& x) {
  if (x.dim() != 1) throw Error(ErrorCode::shape_mismatch, "sum_vec: expected 1-D");
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto out = make_node({1}, {acc});
  Node* nx = x.node();
  return finish(out, {x}, [nx](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    for (size_t i = 0; i < nx->value.size(); ++i) dX[i] += self.grad[0];
  });
}

Tensor mean_vec(const Tensor& x) { return scale(sum_vec(x), 1.0 / x.shape()[0]); }

Tensor log_sum_exp(const Tensor& x) {
  if (x.dim() != 1) throw Error(ErrorCode::shape_mismatch, "log_sum_exp: expected 1-D");
  const int n = x.shape()[0];
  double mx = -HUGE_VAL;
  for (double v : x.data()) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : x.data()) z += std::exp(v - mx);
  auto out = make_node({1}, {mx + std::log(z)});
  Node* nx = x.node();
  return finish(out, {x}, [nx, mx, z, n](Node& self, GradMap& sink) {
    double* dX = grad_buf(nx, sink).data();
    const double g = self.grad[0];
    for (int i = 0; i < n; ++i)
      dX[static_cast<size_t>(i)] += g * std::exp(nx->value[static_cast<size_t>(i)] - mx) / z;
  });
}

GradMap backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw Error(ErrorCode::shape_mismatch, "backward: scalar loss expected");
  GradMap sink;
  if (!loss.node()->requires_grad) return sink;

  // Iterative post-order DFS for the topological order.
  std::vector<Node*> order;
  std::unordered_map<Node*, int> state;  // 0 unseen, 1 on stack, 2 done
  std::vector<Node*> stack{loss.node()};
  while (!stack.empty()) {
    Node* cur = stack.back();
    int& st = state[cur];
    if (st == 0) {
      st = 1;
      for (const auto& p : cur->parents)
        if (p->requires_grad && !p->leaf && state[p.get()] == 0) stack.push_back(p.get());
    } else {
      stack.pop_back();
      if (st == 1) {
        st = 2;
        order.push_back(cur);
      }
    }
  }

  loss.node()->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* nd = *it;
    if (nd->backward && !nd->grad.empty()) nd->backward(*nd, sink);
  }
  // Interior grads are scratch; release them so repeated backwards don't mix.
  for (Node* nd : order) {
    nd->grad.clear();
    nd->grad.shrink_to_fit();
  }
  return sink;
}

bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace dck
