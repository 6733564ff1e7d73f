#include <algorithm>
#include <cmath>

#include "qve/editor.hpp"
#include "qve/error.hpp"

namespace qve {

namespace {

// Log-softmax over every token except `skip` (which gets -inf).
Vector log_softmax_without(std::span<const double> logits, int skip) {
  double mx = -INFINITY;
  for (int t = 0; t < static_cast<int>(logits.size()); ++t) {
    if (t != skip) mx = std::max(mx, logits[t]);
  }
  double s = 0.0;
  for (int t = 0; t < static_cast<int>(logits.size()); ++t) {
    if (t != skip) s += std::exp(logits[t] - mx);
  }
  const double lse = mx + std::log(s);
  Vector out(logits.size());
  for (int t = 0; t < static_cast<int>(logits.size()); ++t) {
    out[t] = t == skip ? -INFINITY : logits[t] - lse;
  }
  return out;
}

struct Objective {
  double loss = 0.0;
  double kl = 0.0;
  double nll = 0.0;
  double p_target = 0.0;
  double p_min = 1.0;  // least-confident prompt
  Vector grad;
};

Objective evaluate_objective(const ModelWeights& w, const SearchProblem& pb, const Vector& delta,
                             const Vector& kl_base, double mu, double phi) {
  const int d = w.config.d_model;
  Objective obj;
  obj.grad.assign(d, 0.0);
  const double share = 1.0 / static_cast<double>(pb.prompts.size());
  for (const auto& prompt : pb.prompts) {
    const Injection inj{static_cast<int>(prompt.size()) - 1, pb.layer, InjectionSite::ffn_output,
                        delta};
    double nll = 0.0, p = 0.0;
    const Vector g = grad_wrt_injection(w, prompt, inj, [&](std::span<const double> logits) {
      LossEval e;
      e.grad = softmax(logits);
      p = e.grad[pb.target];
      nll = -std::log(std::max(p, 1e-300));
      e.grad[pb.target] -= 1.0;
      for (double& x : e.grad) x *= phi * share;
      e.value = phi * share * nll;
      return e;
    });
    obj.nll += share * nll;
    obj.p_target += share * p;
    obj.p_min = std::min(obj.p_min, p);
    for (int i = 0; i < d; ++i) obj.grad[i] += g[i];
  }
  if (!pb.kl_prompt.empty() && mu > 0.0) {
    const Injection inj{static_cast<int>(pb.kl_prompt.size()) - 1, pb.layer,
                        InjectionSite::ffn_output, delta};
    double kl = 0.0;
    const Vector g = grad_wrt_injection(w, pb.kl_prompt, inj, [&](std::span<const double> logits) {
      const Vector lq = log_softmax_without(logits, pb.target);
      LossEval e;
      e.grad.assign(logits.size(), 0.0);
      for (std::size_t t = 0; t < lq.size(); ++t) {
        if (static_cast<int>(t) != pb.target) kl += std::exp(lq[t]) * (lq[t] - kl_base[t]);
      }
      for (std::size_t t = 0; t < lq.size(); ++t) {
        if (static_cast<int>(t) != pb.target) {
          e.grad[t] = mu * std::exp(lq[t]) * (lq[t] - kl_base[t] - kl);
        }
      }
      e.value = mu * kl;
      return e;
    });
    obj.kl = std::max(0.0, kl);
    for (int i = 0; i < d; ++i) obj.grad[i] += g[i];
  }
  obj.loss = phi * obj.nll + mu * obj.kl;
  return obj;
}

}  // namespace

TargetVectorResult search_target_vector(const ModelWeights& w, const SearchProblem& pb,
                                        const EditorConfig& cfg) {
  cfg.validate();
  require(!pb.prompts.empty(), "target search needs at least one prompt");
  require(pb.layer >= 0 && pb.layer < w.config.n_layers, "search layer out of range");
  require(pb.target >= 0 && pb.target < w.config.vocab_size, "search target out of range");
  const int d = w.config.d_model;

  Vector kl_base;
  if (!pb.kl_prompt.empty()) {
    kl_base = log_softmax_without(forward(w, pb.kl_prompt).final_logits, pb.target);
  }

  TargetVectorResult res;
  Vector delta(d, 0.0), m(d, 0.0), v(d, 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double phi = cfg.phi_start;
  for (int step = 0;; ++step) {
    const Objective obj = evaluate_objective(w, pb, delta, kl_base, cfg.mu, phi);
    if (!std::isfinite(obj.loss)) {
      fail(ErrorKind::numeric, "target search diverged at step " + std::to_string(step));
    }
    if (step == 0) res.p_before = obj.p_target;
    res.kl = obj.kl;
    res.nll = obj.nll;
    res.p_after = obj.p_target;
    res.steps_used = step;
    if (obj.nll < cfg.nll_stop && obj.kl < cfg.kl_stop) break;
    if (step == cfg.max_steps) break;
    if (obj.p_min > 0.5) phi = cfg.phi_final;
    const double bc1 = 1.0 - std::pow(b1, step + 1), bc2 = 1.0 - std::pow(b2, step + 1);
    for (int i = 0; i < d; ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * obj.grad[i];
      v[i] = b2 * v[i] + (1.0 - b2) * obj.grad[i] * obj.grad[i];
      delta[i] -= cfg.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps);
    }
  }
  res.delta = delta;
  const ResidualTrace base = forward(w, pb.prompts.front());
  const auto f = base.layers[pb.layer].ffn_out.row(base.length() - 1);
  res.v_star.resize(d);
  for (int i = 0; i < d; ++i) res.v_star[i] = f[i] + delta[i];
  return res;
}

}  // namespace qve
