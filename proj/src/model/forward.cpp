#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "qve/error.hpp"
#include "qve/kernels.hpp"
#include "qve/model.hpp"

namespace qve {

namespace {

constexpr double kRmsEps = 1e-6;

double rms_normalize(std::span<const double> x, std::span<double> out) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double r = std::sqrt(ss / static_cast<double>(x.size()) + kRmsEps);
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / r;
  return r;
}

void check_inputs(const ModelWeights& w, std::span<const int> tokens,
                  std::span<const Injection> injections) {
  const auto& c = w.config;
  require(!tokens.empty(), "token sequence is empty");
  require(static_cast<int>(tokens.size()) <= c.max_seq,
          "token sequence length " + std::to_string(tokens.size()) + " exceeds max_seq " +
              std::to_string(c.max_seq));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    require(tokens[i] >= 0 && tokens[i] < c.vocab_size,
            "token id " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                " out of range [0, " + std::to_string(c.vocab_size) + ")");
  }
  for (const auto& inj : injections) {
    require(inj.position >= 0 && inj.position < static_cast<int>(tokens.size()),
            "injection position out of range");
    require(inj.layer >= 0 && inj.layer < c.n_layers, "injection layer out of range");
    require(static_cast<int>(inj.delta.size()) == c.d_model, "injection delta has wrong size");
  }
}

void add_injections(Matrix& site_out, std::span<const Injection> injections, int layer,
                    InjectionSite site) {
  for (const auto& inj : injections) {
    if (inj.layer != layer || inj.site != site) continue;
    auto row = site_out.row(inj.position);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] += inj.delta[k];
  }
}

}  // namespace

double activate(Activation a, double x) {
  switch (a) {
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
  }
  return 0.0;
}

double activate_grad(Activation a, double x) {
  switch (a) {
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
      const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
      return cdf + x * pdf;
    }
  }
  return 0.0;
}

Vector softmax(std::span<const double> logits) {
  Vector p(logits.begin(), logits.end());
  const double mx = *std::max_element(p.begin(), p.end());
  double sum = 0.0;
  for (double& v : p) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : p) v /= sum;
  return p;
}

Vector log_softmax(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::span<const double> ResidualTrace::hidden(int l, int position) const {
  require(l >= 0 && l <= n_layers(), "hidden layer index out of range");
  require(position >= 0 && position < length(), "hidden position out of range");
  if (l == n_layers()) return final_hidden.row(position);
  return layers[l].h_prev.row(position);
}

Vector unembed_logits(const ModelWeights& w, std::span<const double> x) {
  const auto& c = w.config;
  require(static_cast<int>(x.size()) == c.d_model, "vector size must equal d_model");
  Vector logits(c.vocab_size);
  kernels::active().matmul_nt(x.data(), 1, c.d_model, w.unembed.data(), c.vocab_size,
                              logits.data());
  return logits;
}

ResidualTrace forward(const ModelWeights& w, std::span<const int> tokens,
                      std::span<const Injection> injections) {
  check_inputs(w, tokens, injections);
  const auto& k = kernels::active();
  const auto& c = w.config;
  const std::size_t n = tokens.size(), d = c.d_model, dh = c.head_dim(), nf = c.d_ffn;
  const bool rms = c.normalization == Normalization::rms;

  ResidualTrace trace;
  trace.tokens.assign(tokens.begin(), tokens.end());
  trace.layers.resize(c.n_layers);

  Matrix h(n, d);
  for (std::size_t i = 0; i < n; ++i) {
    auto e = w.embed.row(tokens[i]);
    auto p = w.pos.row(i);
    auto hi = h.row(i);
    for (std::size_t j = 0; j < d; ++j) hi[j] = e[j] + p[j];
  }

  Matrix tmp(n, d);
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = w.layers[l];
    auto& lt = trace.layers[l];
    lt.h_prev = h;

    if (rms) {
      lt.attn_in = Matrix(n, d);
      lt.attn_rms.resize(n);
      for (std::size_t i = 0; i < n; ++i) lt.attn_rms[i] = rms_normalize(h.row(i), lt.attn_in.row(i));
    } else {
      lt.attn_in = h;
    }

    lt.attn_out = Matrix(n, d);
    lt.heads.resize(c.n_heads);
    for (int j = 0; j < c.n_heads; ++j) {
      const auto& hw = lw.heads[j];
      auto& ht = lt.heads[j];
      ht.q = Matrix(n, dh);
      ht.k = Matrix(n, dh);
      ht.v = Matrix(n, dh);
      k.matmul_nt(lt.attn_in.data(), n, d, hw.wq.data(), dh, ht.q.data());
      k.matmul_nt(lt.attn_in.data(), n, d, hw.wk.data(), dh, ht.k.data());
      k.matmul_nt(lt.attn_in.data(), n, d, hw.wv.data(), dh, ht.v.data());

      ht.alpha = Matrix(n, n);
      ht.z = Matrix(n, dh);
      for (std::size_t i = 0; i < n; ++i) {
        auto arow = ht.alpha.row(i);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t p = 0; p <= i; ++p) {
          arow[p] = k.dot(ht.q.row(i).data(), ht.k.row(p).data(), dh);
          mx = std::max(mx, arow[p]);
        }
        double sum = 0.0;
        for (std::size_t p = 0; p <= i; ++p) {
          arow[p] = std::exp(arow[p] - mx);
          sum += arow[p];
        }
        for (std::size_t p = 0; p <= i; ++p) {
          arow[p] /= sum;
          k.axpy(arow[p], ht.v.row(p).data(), ht.z.row(i).data(), dh);
        }
      }
      k.matmul_nt(ht.z.data(), n, dh, hw.wo.data(), d, tmp.data());
      auto& a = lt.attn_out.storage();
      const auto& t = tmp.storage();
      for (std::size_t q = 0; q < a.size(); ++q) a[q] += t[q];
    }
    add_injections(lt.attn_out, injections, l, InjectionSite::post_attn_residual);

    Matrix u(n, d);
    for (std::size_t q = 0; q < u.size(); ++q) u.storage()[q] = h.storage()[q] + lt.attn_out.storage()[q];
    if (rms) {
      lt.ffn_in = Matrix(n, d);
      lt.ffn_rms.resize(n);
      for (std::size_t i = 0; i < n; ++i) lt.ffn_rms[i] = rms_normalize(u.row(i), lt.ffn_in.row(i));
    } else {
      lt.ffn_in = u;
    }

    lt.ffn_pre = Matrix(n, nf);
    k.matmul_nt(lt.ffn_in.data(), n, d, lw.fc1.data(), nf, lt.ffn_pre.data());
    lt.ffn_coeffs = Matrix(n, nf);
    for (std::size_t q = 0; q < lt.ffn_pre.size(); ++q) {
      lt.ffn_coeffs.storage()[q] = activate(c.activation, lt.ffn_pre.storage()[q]);
    }
    lt.ffn_out = Matrix(n, d);
    k.matmul_nt(lt.ffn_coeffs.data(), n, nf, lw.fc2.data(), d, lt.ffn_out.data());
    add_injections(lt.ffn_out, injections, l, InjectionSite::ffn_output);

    for (std::size_t i = 0; i < n; ++i) {
      auto hi = h.row(i);
      auto ui = u.row(i);
      auto fi = lt.ffn_out.row(i);
      for (std::size_t j = 0; j < d; ++j) {
        hi[j] = ui[j] + fi[j];
        if (!std::isfinite(hi[j])) {
          fail(ErrorKind::numeric, "non-finite hidden state at layer " + std::to_string(l) +
                                       ", position " + std::to_string(i));
        }
      }
    }
  }

  trace.final_hidden = std::move(h);
  auto last = trace.final_hidden.row(n - 1);
  if (rms) {
    Vector normed(d);
    trace.final_rms = rms_normalize(last, normed);
    trace.final_logits = unembed_logits(w, normed);
  } else {
    trace.final_logits = unembed_logits(w, last);
  }
  for (double v : trace.final_logits) {
    if (!std::isfinite(v)) {
      fail(ErrorKind::numeric, "non-finite logits at layer " + std::to_string(c.n_layers) +
                                   ", position " + std::to_string(n - 1));
    }
  }
  return trace;
}

Vector next_token_distribution(const ResidualTrace& trace) { return softmax(trace.final_logits); }

std::vector<FfnContribution> ffn_neuron_contributions(const ModelWeights& w,
                                                      const ResidualTrace& trace, int layer,
                                                      int position) {
  require(layer >= 0 && layer < trace.n_layers(), "layer out of range");
  require(position >= 0 && position < trace.length(), "position out of range");
  const auto& fc2 = w.layers[layer].fc2;
  const auto m = trace.layers[layer].ffn_coeffs.row(position);
  std::vector<FfnContribution> out(m.size());
  for (std::size_t kidx = 0; kidx < m.size(); ++kidx) {
    auto& c = out[kidx];
    c.index = static_cast<int>(kidx);
    c.coefficient = m[kidx];
    c.vector.resize(fc2.rows());
    for (std::size_t r = 0; r < fc2.rows(); ++r) c.vector[r] = m[kidx] * fc2(r, kidx);
  }
  return out;
}

std::vector<AttnContribution> attn_subvalue_contributions(const ModelWeights& w,
                                                          const ResidualTrace& trace,
                                                          int layer, int position) {
  require(layer >= 0 && layer < trace.n_layers(), "layer out of range");
  require(position >= 0 && position < trace.length(), "position out of range");
  const auto& lt = trace.layers[layer];
  std::vector<AttnContribution> out;
  for (std::size_t j = 0; j < lt.heads.size(); ++j) {
    const auto& ht = lt.heads[j];
    const auto& wo = w.layers[layer].heads[j].wo;
    for (int p = 0; p <= position; ++p) {
      const double a = ht.alpha(position, p);
      for (std::size_t kidx = 0; kidx < ht.v.cols(); ++kidx) {
        const double coeff = a * ht.v(p, kidx);
        AttnContribution c;
        c.head = static_cast<int>(j);
        c.source = p;
        c.index = static_cast<int>(kidx);
        c.vector.resize(wo.rows());
        for (std::size_t r = 0; r < wo.rows(); ++r) c.vector[r] = coeff * wo(r, kidx);
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

}  // namespace qve
