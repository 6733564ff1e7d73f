#include <cmath>
#include <string>

#include "qve/error.hpp"
#include "qve/kernels.hpp"
#include "qve/model.hpp"

namespace qve {

namespace {

// Gradient of y = x / rms(x) given y, rms(x) and dL/dy; accumulates into gx.
void rms_backward(std::span<const double> y, double r, std::span<const double> gy,
                  std::span<double> gx) {
  const std::size_t d = y.size();
  double dot = 0.0;
  for (std::size_t i = 0; i < d; ++i) dot += gy[i] * y[i];
  dot /= static_cast<double>(d);
  for (std::size_t i = 0; i < d; ++i) gx[i] += (gy[i] - y[i] * dot) / r;
}

void add_into(Matrix& dst, const Matrix& src) {
  auto& a = dst.storage();
  const auto& b = src.storage();
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

void capture_sites(std::span<const Injection> sites, int layer, InjectionSite site,
                   const Matrix& grad, std::vector<Vector>& out) {
  for (std::size_t s = 0; s < sites.size(); ++s) {
    if (sites[s].layer != layer || sites[s].site != site) continue;
    auto row = grad.row(sites[s].position);
    auto& dst = out[s];
    for (std::size_t i = 0; i < row.size(); ++i) dst[i] += row[i];
  }
}

}  // namespace

std::vector<Vector> backward(const ModelWeights& w, const ResidualTrace& trace,
                             std::span<const double> grad_logits, ModelWeights* weight_grads,
                             std::span<const Injection> sites) {
  const auto& c = w.config;
  require(static_cast<int>(grad_logits.size()) == c.vocab_size, "grad_logits has wrong size");
  require(trace.n_layers() == c.n_layers, "trace does not match model");
  const auto& kt = kernels::active();
  const std::size_t n = trace.tokens.size(), d = c.d_model, dh = c.head_dim(), nf = c.d_ffn;
  const bool rms = c.normalization == Normalization::rms;

  ModelWeights* gw = weight_grads;
  if (gw) require(gw->config == c, "gradient buffer does not match model");
  std::vector<Vector> site_grads(sites.size(), Vector(d, 0.0));

  // Unembedding at the last position.
  Matrix gh(n, d);
  {
    auto last = trace.final_hidden.row(n - 1);
    Vector x(last.begin(), last.end());
    if (rms) {
      for (double& v : x) v /= trace.final_rms;
    }
    Vector gx(d, 0.0);
    kt.matmul_nn_acc(grad_logits.data(), 1, c.vocab_size, w.unembed.data(), d, gx.data());
    if (gw) kt.matmul_tn_acc(grad_logits.data(), 1, c.vocab_size, x.data(), d, gw->unembed.data());
    if (rms) {
      rms_backward(x, trace.final_rms, gx, gh.row(n - 1));
    } else {
      auto row = gh.row(n - 1);
      for (std::size_t i = 0; i < d; ++i) row[i] = gx[i];
    }
  }

  Matrix g_pre(n, nf);
  Matrix g_in(n, d);
  Matrix g_z(n, dh), g_q(n, dh), g_k(n, dh), g_v(n, dh);
  Vector g_alpha(n);
  for (int l = c.n_layers - 1; l >= 0; --l) {
    const auto& lw = w.layers[l];
    const auto& lt = trace.layers[l];

    // FFN: h' = u + F, F = fc2 sigma(fc1 ffn_in(u)).
    const Matrix& g_f = gh;
    capture_sites(sites, l, InjectionSite::ffn_output, g_f, site_grads);
    g_pre.fill(0.0);
    kt.matmul_nn_acc(g_f.data(), n, d, lw.fc2.data(), nf, g_pre.data());
    if (gw) kt.matmul_tn_acc(g_f.data(), n, d, lt.ffn_coeffs.data(), nf, gw->layers[l].fc2.data());
    for (std::size_t q = 0; q < g_pre.size(); ++q) {
      g_pre.storage()[q] *= activate_grad(c.activation, lt.ffn_pre.storage()[q]);
    }
    if (gw) kt.matmul_tn_acc(g_pre.data(), n, nf, lt.ffn_in.data(), d, gw->layers[l].fc1.data());
    g_in.fill(0.0);
    kt.matmul_nn_acc(g_pre.data(), n, nf, lw.fc1.data(), d, g_in.data());
    Matrix g_u = gh;
    if (rms) {
      for (std::size_t i = 0; i < n; ++i) rms_backward(lt.ffn_in.row(i), lt.ffn_rms[i], g_in.row(i), g_u.row(i));
    } else {
      add_into(g_u, g_in);
    }

    // u = h + A.
    const Matrix& g_a = g_u;
    capture_sites(sites, l, InjectionSite::post_attn_residual, g_a, site_grads);
    Matrix g_h_prev = g_u;
    g_in.fill(0.0);
    for (std::size_t j = 0; j < lt.heads.size(); ++j) {
      const auto& hw = lw.heads[j];
      const auto& ht = lt.heads[j];
      HeadWeights* hg = gw ? &gw->layers[l].heads[j] : nullptr;

      g_z.fill(0.0);
      kt.matmul_nn_acc(g_a.data(), n, d, hw.wo.data(), dh, g_z.data());
      if (hg) kt.matmul_tn_acc(g_a.data(), n, d, ht.z.data(), dh, hg->wo.data());

      g_q.fill(0.0);
      g_k.fill(0.0);
      g_v.fill(0.0);
      for (std::size_t i = 0; i < n; ++i) {
        const double* gzi = g_z.row(i).data();
        double weighted = 0.0;
        for (std::size_t p = 0; p <= i; ++p) {
          const double a = ht.alpha(i, p);
          g_alpha[p] = kt.dot(gzi, ht.v.row(p).data(), dh);
          weighted += a * g_alpha[p];
          kt.axpy(a, gzi, g_v.row(p).data(), dh);
        }
        for (std::size_t p = 0; p <= i; ++p) {
          const double gs = ht.alpha(i, p) * (g_alpha[p] - weighted);
          if (gs == 0.0) continue;
          kt.axpy(gs, ht.k.row(p).data(), g_q.row(i).data(), dh);
          kt.axpy(gs, ht.q.row(i).data(), g_k.row(p).data(), dh);
        }
      }
      kt.matmul_nn_acc(g_q.data(), n, dh, hw.wq.data(), d, g_in.data());
      kt.matmul_nn_acc(g_k.data(), n, dh, hw.wk.data(), d, g_in.data());
      kt.matmul_nn_acc(g_v.data(), n, dh, hw.wv.data(), d, g_in.data());
      if (hg) {
        kt.matmul_tn_acc(g_q.data(), n, dh, lt.attn_in.data(), d, hg->wq.data());
        kt.matmul_tn_acc(g_k.data(), n, dh, lt.attn_in.data(), d, hg->wk.data());
        kt.matmul_tn_acc(g_v.data(), n, dh, lt.attn_in.data(), d, hg->wv.data());
      }
    }
    if (rms) {
      for (std::size_t i = 0; i < n; ++i) rms_backward(lt.attn_in.row(i), lt.attn_rms[i], g_in.row(i), g_h_prev.row(i));
    } else {
      add_into(g_h_prev, g_in);
    }
    gh = std::move(g_h_prev);
  }

  if (gw) {
    for (std::size_t i = 0; i < n; ++i) {
      auto g = gh.row(i);
      kt.axpy(1.0, g.data(), gw->embed.row(trace.tokens[i]).data(), d);
      kt.axpy(1.0, g.data(), gw->pos.row(i).data(), d);
    }
  }
  return site_grads;
}

Vector grad_wrt_injection(const ModelWeights& w, std::span<const int> tokens,
                          const Injection& injection, const LogitLoss& loss) {
  const Injection injections[] = {injection};
  const ResidualTrace trace = forward(w, tokens, injections);
  const LossEval eval = loss(trace.final_logits);
  std::vector<Vector> g_sites = backward(w, trace, eval.grad, nullptr, injections);
  for (double g : g_sites[0]) {
    if (!std::isfinite(g)) {
      fail(ErrorKind::numeric, "non-finite injection gradient at layer " +
                                   std::to_string(injection.layer) + ", position " +
                                   std::to_string(injection.position));
    }
  }
  return std::move(g_sites[0]);
}

}  // namespace qve
