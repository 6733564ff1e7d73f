#include <algorithm>
#include <cmath>
#include <numeric>

#include "qve/error.hpp"
#include "qve/harness.hpp"
#include "qve/rng.hpp"

namespace qve {

namespace {

std::vector<Matrix*> matrices(ModelWeights& w) {
  std::vector<Matrix*> out;
  for_each_matrix(w, [&](const std::string&, Matrix& m) { out.push_back(&m); });
  return out;
}

int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

int predict(const ModelWeights& w, const std::vector<int>& prompt) {
  return argmax(forward(w, prompt).final_logits);
}

double accuracy(const ModelWeights& w, const std::vector<Example>& examples) {
  if (examples.empty()) return 0.0;
  int correct = 0;
  for (const auto& ex : examples) correct += predict(w, ex.prompt) == ex.answer;
  return static_cast<double>(correct) / static_cast<double>(examples.size());
}

ModelWeights train_toy(const ModelConfig& config, const Corpus& corpus, const TrainConfig& tc,
                       TrainLog* log) {
  require(!corpus.examples.empty(), "training corpus is empty");
  require(tc.epochs >= 0 && tc.batch_size >= 1, "invalid training schedule");
  ModelWeights w = initialize(config);
  if (tc.tie_embeddings) w.unembed = w.embed;
  if (tc.epochs == 0) return w;

  ModelWeights grads = zeros_like(config);
  ModelWeights adam_m = zeros_like(config);
  ModelWeights adam_v = zeros_like(config);
  auto pw = matrices(w), pg = matrices(grads), pm = matrices(adam_m), pv = matrices(adam_v);

  const std::size_t n = corpus.examples.size();
  const std::size_t batches = (n + tc.batch_size - 1) / tc.batch_size;
  const double total_steps = static_cast<double>(batches) * tc.epochs;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(tc.seed);
  long step = 0;

  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    rng.shuffle(order);
    double loss_sum = 0.0;
    int correct = 0;
    for (std::size_t b = 0; b < batches; ++b) {
      for (Matrix* g : pg) g->fill(0.0);
      const std::size_t begin = b * tc.batch_size, end = std::min(n, begin + tc.batch_size);
      for (std::size_t idx = begin; idx < end; ++idx) {
        const Example& ex = corpus.examples[order[idx]];
        const ResidualTrace trace = forward(w, ex.prompt);
        Vector grad = softmax(trace.final_logits);
        loss_sum -= std::log(std::max(grad[ex.answer], 1e-300));
        correct += argmax(trace.final_logits) == ex.answer;
        grad[ex.answer] -= 1.0;
        backward(w, trace, grad, &grads);
      }
      if (tc.tie_embeddings) {
        auto& ge = grads.embed.storage();
        auto& gu = grads.unembed.storage();
        for (std::size_t i = 0; i < ge.size(); ++i) {
          ge[i] += gu[i];
          gu[i] = 0.0;
        }
      }
      const double scale = 1.0 / static_cast<double>(end - begin);
      double norm2 = 0.0;
      for (Matrix* g : pg) {
        for (double& x : g->storage()) {
          x *= scale;
          norm2 += x * x;
        }
      }
      if (!std::isfinite(norm2)) {
        fail(ErrorKind::numeric, "training diverged at epoch " + std::to_string(epoch));
      }
      const double clip = (tc.grad_clip > 0.0 && std::sqrt(norm2) > tc.grad_clip)
                              ? tc.grad_clip / std::sqrt(norm2)
                              : 1.0;
      ++step;
      const double progress = static_cast<double>(step - 1) / total_steps;
      const double lr = tc.lr * (1.0 - (1.0 - tc.lr_final_fraction) * progress);
      const double bc1 = 1.0 - std::pow(tc.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(tc.beta2, static_cast<double>(step));
      for (std::size_t t = 0; t < pw.size(); ++t) {
        auto& wv = pw[t]->storage();
        const auto& gv = pg[t]->storage();
        auto& mv = pm[t]->storage();
        auto& vv = pv[t]->storage();
        for (std::size_t i = 0; i < wv.size(); ++i) {
          const double g = gv[i] * clip;
          mv[i] = tc.beta1 * mv[i] + (1.0 - tc.beta1) * g;
          vv[i] = tc.beta2 * vv[i] + (1.0 - tc.beta2) * g * g;
          const double update = (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + 1e-8);
          wv[i] -= lr * (update + tc.weight_decay * wv[i]);
        }
      }
      if (tc.tie_embeddings) w.unembed = w.embed;
    }
    const double mean_loss = loss_sum / static_cast<double>(n);
    if (!std::isfinite(mean_loss)) {
      fail(ErrorKind::numeric, "training diverged at epoch " + std::to_string(epoch));
    }
    if (log) {
      log->epoch_loss.push_back(mean_loss);
      log->epoch_accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n));
    }
  }
  return w;
}

}  // namespace qve
