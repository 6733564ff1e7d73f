#pragma once

// Decoder-only transformer with additive residual stream, bias-free linear
// maps and learned absolute positions. Each layer computes
//
//   A_i = sum_j sum_{p<=i} alpha_{i,j,p} Wo_j (Wv_j h_p)
//   F_i = Wfc2 sigma(Wfc1 (h_i + A_i))
//   h'_i = h_i + A_i + F_i
//
// and the next-token distribution is softmax(E_u h_last). With
// Normalization::rms a parameter-free RMS norm is applied to the attention
// input, the FFN input and the unembedding input.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qve/tensor.hpp"

namespace qve {

enum class Activation { relu, gelu };
enum class Normalization { none, rms };

struct ModelConfig {
  int n_layers = 6;
  int n_heads = 4;
  int d_model = 64;
  int d_ffn = 256;
  int vocab_size = 300;
  int max_seq = 16;
  Activation activation = Activation::relu;
  Normalization normalization = Normalization::none;
  std::uint64_t seed = 0;

  int head_dim() const { return d_model / n_heads; }

  // Throws ErrorKind::input on a violated invariant.
  void validate() const;

  // Total number of scalar parameters in ModelWeights.
  std::size_t parameter_count() const;

  bool operator==(const ModelConfig&) const = default;
};

struct HeadWeights {
  Matrix wq;  // head_dim x d
  Matrix wk;  // head_dim x d
  Matrix wv;  // head_dim x d
  Matrix wo;  // d x head_dim
  bool operator==(const HeadWeights&) const = default;
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Matrix fc1;  // N x d, row k is the subkey of FFN neuron k
  Matrix fc2;  // d x N, column k is the subvalue of FFN neuron k
  bool operator==(const LayerWeights&) const = default;
};

struct ModelWeights {
  ModelConfig config;
  Matrix embed;    // B x d
  Matrix pos;      // T x d
  Matrix unembed;  // B x d
  std::vector<LayerWeights> layers;

  bool operator==(const ModelWeights&) const = default;
};

// Zero-filled weights with shapes matching the configuration.
ModelWeights zeros_like(const ModelConfig& config);

// Seeded Gaussian initialization; residual-writing matrices are scaled down
// by 1/sqrt(2L).
ModelWeights initialize(const ModelConfig& config);

// Applies f to every matrix in manifest order.
void for_each_matrix(ModelWeights& w, const std::function<void(const std::string&, Matrix&)>& f);
void for_each_matrix(const ModelWeights& w,
                     const std::function<void(const std::string&, const Matrix&)>& f);

// Stable 64-bit digest of every parameter bit pattern and the configuration.
std::uint64_t weights_digest(const ModelWeights& w);

// --- traced forward ---------------------------------------------------------

enum class InjectionSite { post_attn_residual, ffn_output };

// delta is added to the chosen site's output before the residual sum.
struct Injection {
  int position = 0;
  int layer = 0;
  InjectionSite site = InjectionSite::ffn_output;
  Vector delta;
};

struct HeadTrace {
  Matrix q;      // T' x head_dim
  Matrix k;      // T' x head_dim
  Matrix v;      // T' x head_dim
  Matrix alpha;  // T' x T', row i is the attention distribution of position i
  Matrix z;      // T' x head_dim, sum_p alpha_ip v_p
};

struct LayerTrace {
  Matrix h_prev;      // h^{l-1}
  Matrix attn_in;     // input to the q/k/v maps (h_prev, or its RMS-normalized form)
  Matrix attn_out;    // A^l, including any post_attn_residual injection
  Matrix ffn_in;      // argument of Wfc1 (h_prev + A, or its RMS-normalized form)
  Matrix ffn_pre;     // Wfc1 * ffn_in
  Matrix ffn_coeffs;  // m = sigma(ffn_pre)
  Matrix ffn_out;     // F^l, including any ffn_output injection
  std::vector<double> attn_rms;  // per-position RMS scale (rms mode only)
  std::vector<double> ffn_rms;
  std::vector<HeadTrace> heads;
};

struct ResidualTrace {
  std::vector<int> tokens;
  std::vector<LayerTrace> layers;
  Matrix final_hidden;       // h^L for every position
  double final_rms = 1.0;    // RMS of h^L at the last position (rms mode only)
  Vector final_logits;       // E_u h^L at the last position

  int length() const { return static_cast<int>(tokens.size()); }
  int n_layers() const { return static_cast<int>(layers.size()); }

  // h^l at a position for l in [0, L]; h^0 is the embedded input.
  std::span<const double> hidden(int l, int position) const;
};

// Errors: token id out of range or empty/oversized input -> ErrorKind::input;
// a non-finite activation -> ErrorKind::numeric naming layer and position.
ResidualTrace forward(const ModelWeights& w, std::span<const int> tokens,
                      std::span<const Injection> injections = {});

Vector softmax(std::span<const double> logits);
Vector log_softmax(std::span<const double> logits);

// softmax(E_u h_T^L) of the trace's last position.
Vector next_token_distribution(const ResidualTrace& trace);

// E_u x for an arbitrary residual-space vector (no normalization applied).
Vector unembed_logits(const ModelWeights& w, std::span<const double> x);

double activate(Activation a, double x);
double activate_grad(Activation a, double x);

// --- neuron decompositions ----------------------------------------------------

struct FfnContribution {
  int index = 0;
  double coefficient = 0.0;
  Vector vector;  // coefficient * fc2[:, index]
};

std::vector<FfnContribution> ffn_neuron_contributions(const ModelWeights& w,
                                                      const ResidualTrace& trace, int layer,
                                                      int position);

struct AttnContribution {
  int head = 0;
  int source = 0;
  int index = 0;
  Vector vector;  // alpha * (Wv h_source)[index] * Wo[:, index]
};

std::vector<AttnContribution> attn_subvalue_contributions(const ModelWeights& w,
                                                          const ResidualTrace& trace,
                                                          int layer, int position);

// --- gradients ---------------------------------------------------------------

struct LossEval {
  double value = 0.0;
  Vector grad;  // d loss / d logits
};

using LogitLoss = std::function<LossEval(std::span<const double> logits)>;

// d loss / d delta for an injection, evaluated at the injection's delta.
// Errors: non-finite gradient -> ErrorKind::numeric.
Vector grad_wrt_injection(const ModelWeights& w, std::span<const int> tokens,
                          const Injection& injection, const LogitLoss& loss);

// Reverse-mode pass seeded with d loss / d final_logits. Parameter gradients
// are accumulated into weight_grads when it is non-null (shapes must match).
// Returns d loss / d delta for each requested site, matched by
// (position, layer, site); the delta field of a request is ignored.
std::vector<Vector> backward(const ModelWeights& w, const ResidualTrace& trace,
                             std::span<const double> grad_logits, ModelWeights* weight_grads,
                             std::span<const Injection> sites = {});

// --- serialization -------------------------------------------------------------

// "QVE1", u32 little-endian header length, JSON header, little-endian float32
// payloads in manifest order. Values are rounded to float32 on save.
void save_model(const ModelWeights& w, const std::string& path);
ModelWeights load_model(const std::string& path);

std::vector<unsigned char> encode_model(const ModelWeights& w);
ModelWeights decode_model(std::span<const unsigned char> bytes);

// Byte count of the fixed preamble plus JSON header for a configuration.
std::size_t header_size(const ModelConfig& config);

// Rounds every parameter to float32 precision, i.e. what a save/load yields.
void round_to_storage_precision(ModelWeights& w);

}  // namespace qve
