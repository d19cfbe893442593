#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <vector>

#include "ahc/ndcore.hpp"

namespace ahc {

enum class Scale { P3, P4, P5 };

struct ScaleConfig {
  Scale scale = Scale::P4;
  std::size_t input_dim = 64;
  std::size_t code_dim = 10;
  double ratio = 6.4;  // input_dim / code_dim, informational
};

// Canonical per-scale compression triples: P3 64->8, P4 64->10, P5 64->16.
ScaleConfig scale_config(Scale s);

struct CompressorConfig {
  std::size_t input_dim = 64;
  std::size_t code_dim = 10;
  // Linear layers per half. depth=1 is a plain linear bottleneck; depth=2
  // inserts a rectified hidden layer of hidden_dim units in each half.
  std::size_t depth = 1;
  std::size_t hidden_dim = 32;
};

struct DenseLayer {
  Mat w;
  Vec b;
};

// Autoencoder parameter pack for one scale. Treated as a value everywhere:
// adaptation and meta-updates return fresh copies, never mutate in place.
// The same struct doubles as the gradient container (identical shapes).
struct CompressorParams {
  std::vector<DenseLayer> encoder;
  std::vector<DenseLayer> decoder;

  std::size_t input_dim() const { return encoder.front().w.cols; }
  std::size_t code_dim() const { return encoder.back().w.rows; }
  std::size_t param_count() const;
  Vec flatten() const;
};

CompressorConfig config_of(const CompressorParams& p);
CompressorParams zero_params(const CompressorConfig& cfg);
// Uniform +-sqrt(6/(fan_in+fan_out)) weights, zero biases, deterministic.
CompressorParams init_params(const CompressorConfig& cfg, std::uint64_t seed);
CompressorParams params_from_flat(const CompressorConfig& cfg, const Vec& flat);

bool same_shape(const CompressorParams& a, const CompressorParams& b);
void add_scaled_in_place(CompressorParams& dst, const CompressorParams& src, double scale);
CompressorParams sgd_step(const CompressorParams& params, const CompressorParams& grads,
                          double lr);

using Batch = std::vector<Vec>;

Vec encode(const CompressorParams& p, const Vec& f);
Vec decode(const CompressorParams& p, const Vec& z);

// Mean over the batch of mse(decode(encode(f)), f).
double recon_loss(const CompressorParams& p, const Batch& batch);
CompressorParams recon_grad(const CompressorParams& p, const Batch& batch);

// Reconstruction error against explicit targets instead of the inputs
// themselves; the distillation term uses this with targets from a frozen copy.
double recon_loss_to_targets(const CompressorParams& p, const Batch& inputs,
                             const Batch& targets);
CompressorParams recon_grad_to_targets(const CompressorParams& p, const Batch& inputs,
                                       const Batch& targets);

// Hessian-vector product of recon_loss at p along dir, computed analytically
// by forward-over-reverse (no finite differences). Backbone of the
// second-order meta-gradient.
CompressorParams recon_hvp(const CompressorParams& p, const Batch& batch,
                           const CompressorParams& dir);

// Pulls per-sample gradients at the code outputs back onto the parameters:
// given dL/dz_n for each input, returns dL/dparams (decoder slots zero).
// Lets the classifier loss reach the encoder without the decoder graph.
CompressorParams encode_backward(const CompressorParams& p, const Batch& inputs,
                                 const Batch& dloss_dcode);

struct MamlConfig {
  std::size_t inner_steps = 5;  // K
  double inner_lr = 0.01;       // alpha
  double meta_lr = 5e-4;        // beta
  bool second_order = true;
};

struct SupportQuerySplit {
  Batch support;
  Batch query;
};

// Disjoint support/query split; |support| = clamp(round(fraction*n), 1, n-1),
// so both sides are non-empty. Requires n >= 2.
SupportQuerySplit split_support_query(const Batch& batch, double support_fraction,
                                      std::mt19937_64& rng);

// K steps of sgd on recon_loss over the (fixed) support batch at inner_lr.
// meta is untouched. When trajectory is non-null it receives the parameter
// values BEFORE each step (phi'_0 .. phi'_{K-1}), which is exactly what the
// second-order backward pass needs.
CompressorParams maml_adapt(const CompressorParams& meta, const Batch& support,
                            const MamlConfig& cfg,
                            std::vector<CompressorParams>* trajectory = nullptr);

// Reverse accumulation through the inner loop: given dL/d(phi'_K) for any
// outer loss L, returns dL/d(meta) by applying (I - alpha*H(phi'_j))^T for
// j = K-1 .. 0, where H is the support-loss Hessian (via recon_hvp).
CompressorParams backprop_through_adaptation(const Batch& support, const MamlConfig& cfg,
                                             const std::vector<CompressorParams>& trajectory,
                                             const CompressorParams& grad_at_adapted);

// d/d(meta) of recon_loss(maml_adapt(meta, support), query). Differentiates
// through the inner loop when cfg.second_order; otherwise the first-order
// approximation (query gradient at the adapted point). Optionally reports the
// adapted query loss.
CompressorParams meta_gradient(const CompressorParams& meta, const SupportQuerySplit& split,
                               const MamlConfig& cfg, double* query_loss_out = nullptr);

using TaskSampler = std::function<Batch(std::mt19937_64&)>;

// iters outer steps of sgd at meta_lr on meta_gradient over sampler batches.
// Deterministic given seed. Throws if the query loss diverges (> 1e6) or goes
// non-finite, naming the iteration.
CompressorParams meta_train(const CompressorConfig& ccfg, const MamlConfig& mcfg,
                            const TaskSampler& sampler, std::size_t iters,
                            std::uint64_t seed,
                            std::vector<double>* query_loss_history = nullptr,
                            double support_fraction = 0.3);

struct ScaleCompressor {
  ScaleConfig scale;
  CompressorParams params;
};

// Three independent compressors at the canonical dims, seeded per scale.
std::map<Scale, ScaleCompressor> make_hierarchy(std::uint64_t seed);

// Flat little-endian FP32 blob: magic "AHCP", version u32 = 1, input_dim u32,
// code_dim u32, then flatten() order. Depth and hidden width are recovered
// from the payload length on load.
std::vector<std::uint8_t> save_params(const CompressorParams& p);
CompressorParams load_params(const std::vector<std::uint8_t>& bytes);

}  // namespace ahc
