#include <algorithm>
#include <cmath>

#include "qve/editor.hpp"
#include "qve/error.hpp"
#include "qve/kernels.hpp"
#include "qve/rng.hpp"

namespace qve {

namespace {

// In-place lower Cholesky factor. Returns false when a pivot falls below
// 1e-12 of the largest diagonal entry.
bool cholesky(Matrix& a) {
  const std::size_t n = a.rows();
  double max_diag = 0.0;
  for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
  const double floor = 1e-12 * max_diag;
  if (max_diag == 0.0) return false;
  for (std::size_t j = 0; j < n; ++j) {
    double diag = a(j, j);
    for (std::size_t k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
    if (!(diag > floor)) return false;
    const double ljj = std::sqrt(diag);
    a(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / ljj;
    }
  }
  return true;
}

// Solves (L L^T) X = B for every column of B (n x m), overwriting B.
void cholesky_solve(const Matrix& l, Matrix& b) {
  const std::size_t n = l.rows(), m = b.cols();
  for (std::size_t c = 0; c < m; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * b(k, c);
      b(i, c) = s / l(i, i);
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = b(i, c);
      for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * b(k, c);
      b(i, c) = s / l(i, i);
    }
  }
}

std::string layer_label(int layer) {
  return layer >= 0 ? "layer " + std::to_string(layer) : "the target layer";
}

}  // namespace

Matrix compute_delta(const Matrix& w, const Matrix& c0, const Matrix& keys, const Matrix& values,
                     double lambda, int layer) {
  const std::size_t d = w.rows(), n = w.cols(), e = keys.cols();
  require(lambda > 0.0, "lambda must be positive");
  require(c0.rows() == n && c0.cols() == n, "covariance must be N x N");
  require(keys.rows() == n, "keys must have N rows");
  require(values.rows() == d && values.cols() == e, "values must be d x E matching the keys");
  if (e == 0) return Matrix(d, n);

  // R = V - W K  (d x E)
  Matrix resid = values;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t c = 0; c < e; ++c) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += w(i, k) * keys(k, c);
      resid(i, c) -= s;
    }
  }

  // A = lambda C0 + K K^T  (N x N), rhs = K R^T  (N x d)
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = lambda * c0(i, j);
      for (std::size_t c = 0; c < e; ++c) s += keys(i, c) * keys(j, c);
      a(i, j) = s;
      a(j, i) = s;
    }
  }
  Matrix rhs(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < e; ++c) s += keys(i, c) * resid(j, c);
      rhs(i, j) = s;
    }
  }
  for (double x : a.storage()) {
    if (!std::isfinite(x)) fail(ErrorKind::numeric, "non-finite edit system at " + layer_label(layer));
  }

  Matrix factor = a;
  if (!cholesky(factor)) {
    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += a(i, i);
    const double ridge = 1e-8 * trace / static_cast<double>(n);
    factor = a;
    for (std::size_t i = 0; i < n; ++i) factor(i, i) += ridge;
    if (!(ridge > 0.0) || !cholesky(factor)) {
      fail(ErrorKind::numeric, "edit system is singular at " + layer_label(layer));
    }
  }
  cholesky_solve(factor, rhs);

  Matrix delta(d, n);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t k = 0; k < n; ++k) delta(i, k) = rhs(k, i);
  }
  return delta;
}

Matrix collect_keys(const ModelWeights& w, const std::vector<std::vector<int>>& prompts,
                    int layer) {
  require(!prompts.empty(), "key collection needs at least one prompt");
  require(layer >= 0 && layer < w.config.n_layers, "key layer out of range");
  const int n = w.config.d_ffn;
  Matrix keys(n, prompts.size());
  for (std::size_t c = 0; c < prompts.size(); ++c) {
    const ResidualTrace t = forward(w, prompts[c]);
    const auto k = t.layers[layer].ffn_coeffs.row(t.length() - 1);
    for (int i = 0; i < n; ++i) keys(i, c) = k[i];
  }
  return keys;
}

Matrix estimate_covariance(const ModelWeights& w, const std::vector<std::vector<int>>& corpus,
                           int layer, int samples, std::uint64_t seed) {
  require(samples >= 1, "covariance needs at least one sample");
  require(!corpus.empty(), "covariance corpus is empty");
  require(layer >= 0 && layer < w.config.n_layers, "covariance layer out of range");
  const int n = w.config.d_ffn;

  // Draw every (prompt, position) pair first so each prompt is traced once.
  Rng rng(seed);
  std::vector<std::vector<int>> picks(corpus.size());
  for (int s = 0; s < samples; ++s) {
    const std::size_t p = rng.below(corpus.size());
    require(!corpus[p].empty(), "covariance corpus contains an empty prompt");
    picks[p].push_back(static_cast<int>(rng.below(corpus[p].size())));
  }
  Matrix c0(n, n);
  const auto& kern = kernels::active();
  for (std::size_t p = 0; p < corpus.size(); ++p) {
    if (picks[p].empty()) continue;
    const ResidualTrace t = forward(w, corpus[p]);
    for (int pos : picks[p]) {
      const auto k = t.layers[layer].ffn_coeffs.row(pos);
      for (int i = 0; i < n; ++i) {
        if (k[i] != 0.0) kern.axpy(k[i], k.data(), c0.row(i).data(), n);
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(samples);
  for (double& x : c0.storage()) x *= scale;
  // Restore exact symmetry lost to summation order.
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < i; ++j) {
      const double s = 0.5 * (c0(i, j) + c0(j, i));
      c0(i, j) = s;
      c0(j, i) = s;
    }
  }
  return c0;
}

const Matrix& CovarianceCache::get(const ModelWeights& w, int layer) {
  auto it = by_layer_.find(layer);
  if (it != by_layer_.end()) return it->second;
  Matrix c0 = estimate_covariance(w, corpus_, layer, samples_, Rng::derive(seed_, layer));
  return by_layer_.emplace(layer, std::move(c0)).first->second;
}

}  // namespace qve
