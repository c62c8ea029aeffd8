// Brute-force reference implementations used as independent oracles. These
// deliberately share no code with the library ops they check.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline Mat matmul(const Mat& a, const Mat& b) {
  Mat c(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (size_t i = 0; i < a.size(); ++i)
    for (size_t j = 0; j < b[0].size(); ++j)
      for (size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Pairwise dot products, one loop per index.
inline Mat dot_matrix(const Mat& x, const Mat& r) {
  Mat e(x.size(), std::vector<double>(r.size(), 0.0));
  for (size_t i = 0; i < x.size(); ++i)
    for (size_t j = 0; j < r.size(); ++j)
      for (size_t k = 0; k < x[0].size(); ++k) e[i][j] += x[i][k] * r[j][k];
  return e;
}

inline std::vector<double> softmax_masked(const std::vector<double>& v,
                                          const std::vector<int>& mask) {
  std::vector<double> out(v.size(), 0.0);
  double mx = -HUGE_VAL;
  for (size_t i = 0; i < v.size(); ++i)
    if (mask[i]) mx = std::max(mx, v[i]);
  double z = 0.0;
  for (size_t i = 0; i < v.size(); ++i)
    if (mask[i]) z += std::exp(v[i] - mx);
  for (size_t i = 0; i < v.size(); ++i)
    if (mask[i]) out[i] = std::exp(v[i] - mx) / z;
  return out;
}

struct CrossAttentionRef {
  Mat e, x_aligned, r_aligned;
};

inline CrossAttentionRef cross_attend(const Mat& x, const std::vector<int>& x_mask, const Mat& r,
                                      const std::vector<int>& r_mask) {
  CrossAttentionRef out;
  out.e = dot_matrix(x, r);
  const size_t w = x[0].size();
  out.x_aligned.assign(x.size(), std::vector<double>(w, 0.0));
  out.r_aligned.assign(r.size(), std::vector<double>(w, 0.0));
  for (size_t i = 0; i < x.size(); ++i) {
    auto a = softmax_masked(out.e[i], r_mask);
    for (size_t j = 0; j < r.size(); ++j)
      for (size_t k = 0; k < w; ++k) out.x_aligned[i][k] += a[j] * r[j][k];
  }
  for (size_t j = 0; j < r.size(); ++j) {
    std::vector<double> col(x.size());
    for (size_t i = 0; i < x.size(); ++i) col[i] = out.e[i][j];
    auto b = softmax_masked(col, x_mask);
    for (size_t i = 0; i < x.size(); ++i)
      for (size_t k = 0; k < w; ++k) out.r_aligned[j][k] += b[i] * x[i][k];
  }
  return out;
}

// [x, xh, x-xh, x*xh] recomputed element by element.
inline Mat enrich(const Mat& x, const Mat& xh) {
  Mat out(x.size(), std::vector<double>(4 * x[0].size()));
  for (size_t i = 0; i < x.size(); ++i)
    for (size_t k = 0; k < x[0].size(); ++k) {
      out[i][k] = x[i][k];
      out[i][x[0].size() + k] = xh[i][k];
      out[i][2 * x[0].size() + k] = x[i][k] - xh[i][k];
      out[i][3 * x[0].size() + k] = x[i][k] * xh[i][k];
    }
  return out;
}

// Selector relevance scores with plain loops: per-unit similarity, max over
// query rows, masked max/mean over unit tokens, alpha fusion, softmax.
inline std::vector<double> unit_scores(const Mat& query, const std::vector<int>& query_mask,
                                       const std::vector<Mat>& units,
                                       const std::vector<std::vector<int>>& unit_masks,
                                       double alpha) {
  const size_t n = units.size();
  const double scale = 1.0 / std::sqrt(static_cast<double>(query[0].size()));
  std::vector<double> logits(n, 0.0);
  std::vector<int> real(n, 0);
  for (size_t u = 0; u < n; ++u) {
    int support = 0;
    for (int m : unit_masks[u]) support += m;
    if (support == 0) continue;
    real[u] = 1;
    const Mat& unit = units[u];
    std::vector<double> best(unit.size(), -HUGE_VAL);
    for (size_t p = 0; p < unit.size(); ++p)
      for (size_t q = 0; q < query.size(); ++q) {
        if (!query_mask[q]) continue;
        double sim = 0.0;
        for (size_t k = 0; k < query[0].size(); ++k) sim += query[q][k] * unit[p][k];
        best[p] = std::max(best[p], sim * scale);
      }
    double s1 = -HUGE_VAL, s2 = 0.0;
    int count = 0;
    for (size_t p = 0; p < unit.size(); ++p) {
      if (!unit_masks[u][p]) continue;
      s1 = std::max(s1, best[p]);
      s2 += best[p];
      ++count;
    }
    s2 /= count;
    logits[u] = alpha * s1 + (1.0 - alpha) * s2;
  }
  return softmax_masked(logits, real);
}

// Rank of the labeled entry under descending score, lower index wins ties.
inline bool recall_at_k(const std::vector<double>& logits, int label, int k) {
  std::vector<int> order(logits.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (logits[static_cast<size_t>(a)] != logits[static_cast<size_t>(b)])
      return logits[static_cast<size_t>(a)] > logits[static_cast<size_t>(b)];
    return a < b;
  });
  for (int pos = 0; pos < k; ++pos)
    if (order[static_cast<size_t>(pos)] == label) return true;
  return false;
}

}  // namespace oracle
