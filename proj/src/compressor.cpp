#include "ahc/compressor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

#include "ahc/bytes.hpp"

namespace ahc {

namespace {

void check_config(const CompressorConfig& cfg) {
  if (cfg.input_dim == 0 || cfg.code_dim == 0) {
    throw std::invalid_argument("compressor: dims must be positive");
  }
  if (cfg.depth != 1 && cfg.depth != 2) {
    throw std::invalid_argument("compressor: depth must be 1 or 2, got " +
                                std::to_string(cfg.depth));
  }
  if (cfg.depth == 2 && cfg.hidden_dim == 0) {
    throw std::invalid_argument("compressor: hidden_dim must be positive at depth 2");
  }
}

// (fan_out, fan_in) per layer of one half.
std::vector<std::pair<std::size_t, std::size_t>> half_shapes(std::size_t in,
                                                             std::size_t out,
                                                             const CompressorConfig& cfg) {
  if (cfg.depth == 1) return {{out, in}};
  return {{cfg.hidden_dim, in}, {out, cfg.hidden_dim}};
}

std::vector<DenseLayer> zero_half(std::size_t in, std::size_t out,
                                  const CompressorConfig& cfg) {
  std::vector<DenseLayer> layers;
  for (auto [rows, cols] : half_shapes(in, out, cfg)) {
    layers.push_back({Mat(rows, cols), Vec(rows, 0.0)});
  }
  return layers;
}

// Intermediate values needed by the backward pass: the activation entering
// each layer and the pre-rectifier outputs. A rectifier sits after every
// layer of a half except the last.
struct HalfTrace {
  std::vector<Vec> inputs;
  std::vector<Vec> preacts;
  Vec out;
};

HalfTrace forward_half(const std::vector<DenseLayer>& layers, const Vec& x) {
  HalfTrace tr;
  tr.inputs.reserve(layers.size());
  tr.preacts.reserve(layers.size());
  Vec a = x;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    tr.inputs.push_back(a);
    Vec y = linear_forward(a, layers[l].w, layers[l].b);
    tr.preacts.push_back(y);
    if (l + 1 < layers.size()) {
      for (double& v : y) v = v > 0.0 ? v : 0.0;
    }
    a = std::move(y);
  }
  tr.out = std::move(a);
  return tr;
}

// g = dL/d(half output). Accumulates parameter gradients, returns dL/d(input).
Vec backward_half(const std::vector<DenseLayer>& layers, const HalfTrace& tr, Vec g,
                  std::vector<DenseLayer>& grads) {
  for (std::size_t li = layers.size(); li-- > 0;) {
    if (li + 1 < layers.size()) {
      const Vec& y = tr.preacts[li];
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] <= 0.0) g[i] = 0.0;
      }
    }
    const Vec& a = tr.inputs[li];
    Mat& gw = grads[li].w;
    Vec& gb = grads[li].b;
    for (std::size_t i = 0; i < gw.rows; ++i) {
      const double gi = g[i];
      gb[i] += gi;
      double* grow = gw.data.data() + i * gw.cols;
      for (std::size_t j = 0; j < gw.cols; ++j) grow[j] += gi * a[j];
    }
    const Mat& w = layers[li].w;
    Vec ga(a.size(), 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double gi = g[i];
      const double* wrow = w.data.data() + i * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) ga[j] += gi * wrow[j];
    }
    g = std::move(ga);
  }
  return g;
}

// Directional (tangent) forward alongside an existing primal trace. The
// rectifier masks come from the primal preactivations; their derivative is
// zero almost everywhere, so the tangent passes straight through the mask.
struct HalfTangent {
  std::vector<Vec> dinputs;
  Vec dout;
};

HalfTangent forward_half_tangent(const std::vector<DenseLayer>& layers,
                                 const std::vector<DenseLayer>& dirs,
                                 const HalfTrace& tr, const Vec& dx) {
  HalfTangent tt;
  tt.dinputs.reserve(layers.size());
  Vec da = dx;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    tt.dinputs.push_back(da);
    // dy = dW a + db + W da
    Vec dy = linear_forward(tr.inputs[l], dirs[l].w, dirs[l].b);
    const Mat& w = layers[l].w;
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double* wrow = w.data.data() + i * w.cols;
      double acc = 0.0;
      for (std::size_t j = 0; j < w.cols; ++j) acc += wrow[j] * da[j];
      dy[i] += acc;
    }
    if (l + 1 < layers.size()) {
      const Vec& y = tr.preacts[l];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        if (y[i] <= 0.0) dy[i] = 0.0;
      }
    }
    da = std::move(dy);
  }
  tt.dout = std::move(da);
  return tt;
}

// Joint primal/tangent backward. Accumulates only the tangent of the
// parameter gradient (the Hessian-vector contribution) into hvp; the primal
// gradient is propagated because the tangent recursion needs it.
std::pair<Vec, Vec> backward_half_hvp(const std::vector<DenseLayer>& layers,
                                      const std::vector<DenseLayer>& dirs,
                                      const HalfTrace& tr, const HalfTangent& tt, Vec g,
                                      Vec dg, std::vector<DenseLayer>& hvp) {
  for (std::size_t li = layers.size(); li-- > 0;) {
    if (li + 1 < layers.size()) {
      const Vec& y = tr.preacts[li];
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (y[i] <= 0.0) {
          g[i] = 0.0;
          dg[i] = 0.0;
        }
      }
    }
    const Vec& a = tr.inputs[li];
    const Vec& da = tt.dinputs[li];
    Mat& hw = hvp[li].w;
    Vec& hb = hvp[li].b;
    for (std::size_t i = 0; i < hw.rows; ++i) {
      const double gi = g[i];
      const double dgi = dg[i];
      hb[i] += dgi;
      double* hrow = hw.data.data() + i * hw.cols;
      for (std::size_t j = 0; j < hw.cols; ++j) hrow[j] += dgi * a[j] + gi * da[j];
    }
    const Mat& w = layers[li].w;
    const Mat& dw = dirs[li].w;
    Vec ga(a.size(), 0.0);
    Vec dga(a.size(), 0.0);
    for (std::size_t i = 0; i < w.rows; ++i) {
      const double gi = g[i];
      const double dgi = dg[i];
      const double* wrow = w.data.data() + i * w.cols;
      const double* dwrow = dw.data.data() + i * w.cols;
      for (std::size_t j = 0; j < w.cols; ++j) {
        ga[j] += gi * wrow[j];
        dga[j] += dgi * wrow[j] + gi * dwrow[j];
      }
    }
    g = std::move(ga);
    dg = std::move(dga);
  }
  return {std::move(g), std::move(dg)};
}

void check_batch(const Batch& batch, const char* who) {
  if (batch.empty()) {
    throw std::invalid_argument(std::string(who) + ": empty batch");
  }
}

}  // namespace

ScaleConfig scale_config(Scale s) {
  switch (s) {
    case Scale::P3:
      return {Scale::P3, 64, 8, 8.0};
    case Scale::P4:
      return {Scale::P4, 64, 10, 6.4};
    case Scale::P5:
      return {Scale::P5, 64, 16, 4.0};
  }
  throw std::invalid_argument("scale_config: unknown scale");
}

std::size_t CompressorParams::param_count() const {
  std::size_t n = 0;
  for (const auto& half : {&encoder, &decoder}) {
    for (const auto& layer : *half) n += layer.w.size() + layer.b.size();
  }
  return n;
}

Vec CompressorParams::flatten() const {
  Vec flat;
  flat.reserve(param_count());
  for (const auto& half : {&encoder, &decoder}) {
    for (const auto& layer : *half) {
      flat.insert(flat.end(), layer.w.data.begin(), layer.w.data.end());
      flat.insert(flat.end(), layer.b.begin(), layer.b.end());
    }
  }
  return flat;
}

CompressorConfig config_of(const CompressorParams& p) {
  if (p.encoder.empty() || p.decoder.empty()) {
    throw std::invalid_argument("config_of: params have empty halves");
  }
  CompressorConfig cfg;
  cfg.input_dim = p.encoder.front().w.cols;
  cfg.code_dim = p.encoder.back().w.rows;
  cfg.depth = p.encoder.size();
  cfg.hidden_dim = cfg.depth == 2 ? p.encoder.front().w.rows : CompressorConfig{}.hidden_dim;
  check_config(cfg);
  // The decoder must mirror the encoder.
  const auto want = half_shapes(cfg.code_dim, cfg.input_dim, cfg);
  if (p.decoder.size() != want.size()) {
    throw std::invalid_argument("config_of: decoder depth does not mirror encoder");
  }
  for (std::size_t l = 0; l < want.size(); ++l) {
    if (p.decoder[l].w.rows != want[l].first || p.decoder[l].w.cols != want[l].second ||
        p.decoder[l].b.size() != want[l].first) {
      throw std::invalid_argument("config_of: decoder layer " + std::to_string(l) +
                                  " has inconsistent shape");
    }
  }
  return cfg;
}

CompressorParams zero_params(const CompressorConfig& cfg) {
  check_config(cfg);
  CompressorParams p;
  p.encoder = zero_half(cfg.input_dim, cfg.code_dim, cfg);
  p.decoder = zero_half(cfg.code_dim, cfg.input_dim, cfg);
  return p;
}

CompressorParams init_params(const CompressorConfig& cfg, std::uint64_t seed) {
  CompressorParams p = zero_params(cfg);
  std::mt19937_64 rng(seed);
  for (auto* half : {&p.encoder, &p.decoder}) {
    for (auto& layer : *half) {
      const double limit =
          std::sqrt(6.0 / static_cast<double>(layer.w.rows + layer.w.cols));
      for (double& v : layer.w.data) {
        v = (2.0 * uniform_unit(rng) - 1.0) * limit;
      }
      // biases stay zero
    }
  }
  return p;
}

CompressorParams params_from_flat(const CompressorConfig& cfg, const Vec& flat) {
  CompressorParams p = zero_params(cfg);
  if (flat.size() != p.param_count()) {
    throw std::invalid_argument("params_from_flat: expected " +
                                std::to_string(p.param_count()) + " values, got " +
                                std::to_string(flat.size()));
  }
  std::size_t k = 0;
  for (auto* half : {&p.encoder, &p.decoder}) {
    for (auto& layer : *half) {
      for (double& v : layer.w.data) v = flat[k++];
      for (double& v : layer.b) v = flat[k++];
    }
  }
  return p;
}

bool same_shape(const CompressorParams& a, const CompressorParams& b) {
  if (a.encoder.size() != b.encoder.size() || a.decoder.size() != b.decoder.size()) {
    return false;
  }
  for (std::size_t l = 0; l < a.encoder.size(); ++l) {
    if (!a.encoder[l].w.same_shape(b.encoder[l].w) ||
        a.encoder[l].b.size() != b.encoder[l].b.size()) {
      return false;
    }
  }
  for (std::size_t l = 0; l < a.decoder.size(); ++l) {
    if (!a.decoder[l].w.same_shape(b.decoder[l].w) ||
        a.decoder[l].b.size() != b.decoder[l].b.size()) {
      return false;
    }
  }
  return true;
}

void add_scaled_in_place(CompressorParams& dst, const CompressorParams& src, double scale) {
  if (!same_shape(dst, src)) {
    throw std::invalid_argument("add_scaled_in_place: shape mismatch");
  }
  for (std::size_t h = 0; h < 2; ++h) {
    auto& dhalf = h == 0 ? dst.encoder : dst.decoder;
    const auto& shalf = h == 0 ? src.encoder : src.decoder;
    for (std::size_t l = 0; l < dhalf.size(); ++l) {
      for (std::size_t i = 0; i < dhalf[l].w.data.size(); ++i) {
        dhalf[l].w.data[i] += scale * shalf[l].w.data[i];
      }
      for (std::size_t i = 0; i < dhalf[l].b.size(); ++i) {
        dhalf[l].b[i] += scale * shalf[l].b[i];
      }
    }
  }
}

CompressorParams sgd_step(const CompressorParams& params, const CompressorParams& grads,
                          double lr) {
  CompressorParams out = params;
  add_scaled_in_place(out, grads, -lr);
  return out;
}

Vec encode(const CompressorParams& p, const Vec& f) {
  return forward_half(p.encoder, f).out;
}

Vec decode(const CompressorParams& p, const Vec& z) {
  return forward_half(p.decoder, z).out;
}

double recon_loss_to_targets(const CompressorParams& p, const Batch& inputs,
                             const Batch& targets) {
  check_batch(inputs, "recon_loss");
  if (inputs.size() != targets.size()) {
    throw std::invalid_argument("recon_loss: inputs/targets size mismatch");
  }
  double total = 0.0;
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    total += mse(decode(p, encode(p, inputs[n])), targets[n]);
  }
  return total / static_cast<double>(inputs.size());
}

double recon_loss(const CompressorParams& p, const Batch& batch) {
  return recon_loss_to_targets(p, batch, batch);
}

CompressorParams recon_grad_to_targets(const CompressorParams& p, const Batch& inputs,
                                       const Batch& targets) {
  check_batch(inputs, "recon_grad");
  if (inputs.size() != targets.size()) {
    throw std::invalid_argument("recon_grad: inputs/targets size mismatch");
  }
  CompressorParams grads = zero_params(config_of(p));
  const double d = static_cast<double>(p.input_dim());
  const double c = 2.0 / (static_cast<double>(inputs.size()) * d);
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    const HalfTrace enc = forward_half(p.encoder, inputs[n]);
    const HalfTrace dec = forward_half(p.decoder, enc.out);
    if (dec.out.size() != targets[n].size()) {
      throw std::invalid_argument("recon_grad: target " + std::to_string(n) +
                                  " has wrong dimension");
    }
    Vec e(dec.out.size());
    for (std::size_t i = 0; i < e.size(); ++i) e[i] = c * (dec.out[i] - targets[n][i]);
    Vec g_code = backward_half(p.decoder, dec, std::move(e), grads.decoder);
    backward_half(p.encoder, enc, std::move(g_code), grads.encoder);
  }
  return grads;
}

CompressorParams recon_grad(const CompressorParams& p, const Batch& batch) {
  return recon_grad_to_targets(p, batch, batch);
}

CompressorParams recon_hvp(const CompressorParams& p, const Batch& batch,
                           const CompressorParams& dir) {
  check_batch(batch, "recon_hvp");
  if (!same_shape(p, dir)) {
    throw std::invalid_argument("recon_hvp: direction shape mismatch");
  }
  CompressorParams hvp = zero_params(config_of(p));
  const double d = static_cast<double>(p.input_dim());
  const double c = 2.0 / (static_cast<double>(batch.size()) * d);
  for (const Vec& x : batch) {
    const HalfTrace enc = forward_half(p.encoder, x);
    const HalfTrace dec = forward_half(p.decoder, enc.out);
    const HalfTangent enc_t =
        forward_half_tangent(p.encoder, dir.encoder, enc, Vec(x.size(), 0.0));
    const HalfTangent dec_t =
        forward_half_tangent(p.decoder, dir.decoder, dec, enc_t.dout);
    Vec e(dec.out.size());
    Vec de(dec.out.size());
    for (std::size_t i = 0; i < e.size(); ++i) {
      e[i] = c * (dec.out[i] - x[i]);
      de[i] = c * dec_t.dout[i];
    }
    auto [g_code, dg_code] = backward_half_hvp(p.decoder, dir.decoder, dec, dec_t,
                                               std::move(e), std::move(de), hvp.decoder);
    backward_half_hvp(p.encoder, dir.encoder, enc, enc_t, std::move(g_code),
                      std::move(dg_code), hvp.encoder);
  }
  return hvp;
}

CompressorParams encode_backward(const CompressorParams& p, const Batch& inputs,
                                 const Batch& dloss_dcode) {
  check_batch(inputs, "encode_backward");
  if (inputs.size() != dloss_dcode.size()) {
    throw std::invalid_argument("encode_backward: inputs/gradients size mismatch");
  }
  CompressorParams grads = zero_params(config_of(p));
  for (std::size_t n = 0; n < inputs.size(); ++n) {
    if (dloss_dcode[n].size() != p.code_dim()) {
      throw std::invalid_argument("encode_backward: gradient " + std::to_string(n) +
                                  " has wrong code dimension");
    }
    const HalfTrace enc = forward_half(p.encoder, inputs[n]);
    backward_half(p.encoder, enc, dloss_dcode[n], grads.encoder);
  }
  return grads;
}

SupportQuerySplit split_support_query(const Batch& batch, double support_fraction,
                                      std::mt19937_64& rng) {
  if (batch.size() < 2) {
    throw std::invalid_argument("split_support_query: need >= 2 samples, got " +
                                std::to_string(batch.size()));
  }
  if (!(support_fraction > 0.0) || !(support_fraction < 1.0)) {
    throw std::invalid_argument("split_support_query: fraction must lie in (0,1)");
  }
  const std::size_t n = batch.size();
  std::size_t n_support =
      static_cast<std::size_t>(std::lround(support_fraction * static_cast<double>(n)));
  n_support = std::clamp<std::size_t>(n_support, 1, n - 1);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  shuffle_in_place(idx, rng);
  SupportQuerySplit split;
  split.support.reserve(n_support);
  split.query.reserve(n - n_support);
  for (std::size_t i = 0; i < n; ++i) {
    (i < n_support ? split.support : split.query).push_back(batch[idx[i]]);
  }
  return split;
}

CompressorParams maml_adapt(const CompressorParams& meta, const Batch& support,
                            const MamlConfig& cfg,
                            std::vector<CompressorParams>* trajectory) {
  check_batch(support, "maml_adapt");
  if (cfg.inner_lr < 0.0) {
    throw std::invalid_argument("maml_adapt: inner_lr must be >= 0");
  }
  if (trajectory) trajectory->clear();
  CompressorParams phi = meta;
  for (std::size_t k = 0; k < cfg.inner_steps; ++k) {
    const double loss = recon_loss(phi, support);
    if (!std::isfinite(loss)) {
      throw std::runtime_error("maml_adapt: non-finite support loss at inner step " +
                               std::to_string(k));
    }
    if (trajectory) trajectory->push_back(phi);
    phi = sgd_step(phi, recon_grad(phi, support), cfg.inner_lr);
  }
  return phi;
}

CompressorParams backprop_through_adaptation(const Batch& support, const MamlConfig& cfg,
                                             const std::vector<CompressorParams>& trajectory,
                                             const CompressorParams& grad_at_adapted) {
  CompressorParams g = grad_at_adapted;
  if (cfg.inner_lr == 0.0 || trajectory.empty()) return g;
  // g <- (I - alpha H(phi_j))^T g, walked from the last inner step back to the
  // first; H is symmetric so the transpose is free.
  for (std::size_t j = trajectory.size(); j-- > 0;) {
    const CompressorParams hv = recon_hvp(trajectory[j], support, g);
    add_scaled_in_place(g, hv, -cfg.inner_lr);
  }
  return g;
}

CompressorParams meta_gradient(const CompressorParams& meta, const SupportQuerySplit& split,
                               const MamlConfig& cfg, double* query_loss_out) {
  if (split.support.empty() || split.query.empty()) {
    throw std::invalid_argument("meta_gradient: support and query must be non-empty");
  }
  std::vector<CompressorParams> trajectory;
  const CompressorParams adapted =
      maml_adapt(meta, split.support, cfg, cfg.second_order ? &trajectory : nullptr);
  if (query_loss_out) *query_loss_out = recon_loss(adapted, split.query);
  CompressorParams g = recon_grad(adapted, split.query);
  if (!cfg.second_order) return g;
  return backprop_through_adaptation(split.support, cfg, trajectory, g);
}

CompressorParams meta_train(const CompressorConfig& ccfg, const MamlConfig& mcfg,
                            const TaskSampler& sampler, std::size_t iters,
                            std::uint64_t seed, std::vector<double>* query_loss_history,
                            double support_fraction) {
  if (iters == 0) throw std::invalid_argument("meta_train: iters must be >= 1");
  if (!sampler) throw std::invalid_argument("meta_train: null task sampler");
  std::mt19937_64 rng(derive_seed(seed, "meta-train"));
  CompressorParams params = init_params(ccfg, derive_seed(seed, "meta-init"));
  for (std::size_t it = 0; it < iters; ++it) {
    const Batch batch = sampler(rng);
    const SupportQuerySplit split = split_support_query(batch, support_fraction, rng);
    double query_loss = 0.0;
    const CompressorParams g = meta_gradient(params, split, mcfg, &query_loss);
    if (!std::isfinite(query_loss) || query_loss > 1e6) {
      throw std::runtime_error("meta_train: diverged at iteration " + std::to_string(it) +
                               " (query loss " + std::to_string(query_loss) + ")");
    }
    if (query_loss_history) query_loss_history->push_back(query_loss);
    params = sgd_step(params, g, mcfg.meta_lr);
  }
  return params;
}

std::map<Scale, ScaleCompressor> make_hierarchy(std::uint64_t seed) {
  std::map<Scale, ScaleCompressor> out;
  std::uint64_t idx = 0;
  for (Scale s : {Scale::P3, Scale::P4, Scale::P5}) {
    const ScaleConfig sc = scale_config(s);
    CompressorConfig ccfg;
    ccfg.input_dim = sc.input_dim;
    ccfg.code_dim = sc.code_dim;
    out.emplace(s, ScaleCompressor{sc, init_params(ccfg, derive_seed(seed, "hierarchy", idx))});
    ++idx;
  }
  return out;
}

std::vector<std::uint8_t> save_params(const CompressorParams& p) {
  const CompressorConfig cfg = config_of(p);
  ByteWriter w;
  w.magic("AHCP");
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(cfg.input_dim));
  w.u32(static_cast<std::uint32_t>(cfg.code_dim));
  for (double v : p.flatten()) w.f32(static_cast<float>(v));
  return w.take();
}

CompressorParams load_params(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "params blob");
  r.expect_magic("AHCP");
  const std::uint32_t version = r.u32("version");
  if (version != 1) {
    throw std::runtime_error("params blob: unsupported version " +
                             std::to_string(version) + " at byte offset 4");
  }
  const std::uint32_t input_dim = r.u32("input_dim");
  const std::uint32_t code_dim = r.u32("code_dim");
  if (input_dim == 0 || code_dim == 0) {
    r.fail("dimensions must be positive (input_dim=" + std::to_string(input_dim) +
           ", code_dim=" + std::to_string(code_dim) + ")");
  }
  if (r.remaining() % 4 != 0) {
    r.fail("payload length " + std::to_string(r.remaining()) +
           " is not a multiple of 4");
  }
  const std::size_t n = r.remaining() / 4;
  const std::size_t flat_depth1 =
      2 * static_cast<std::size_t>(input_dim) * code_dim + input_dim + code_dim;
  CompressorConfig cfg;
  cfg.input_dim = input_dim;
  cfg.code_dim = code_dim;
  if (n == flat_depth1) {
    cfg.depth = 1;  // preferred when a depth-2 width would also fit
  } else {
    const std::size_t num = n - input_dim - code_dim;
    const std::size_t den = 2 * (static_cast<std::size_t>(input_dim) + code_dim + 1);
    if (n < input_dim + code_dim || num % den != 0 || num / den == 0) {
      r.fail("payload of " + std::to_string(n) +
             " floats matches no topology for input_dim=" + std::to_string(input_dim) +
             ", code_dim=" + std::to_string(code_dim));
    }
    cfg.depth = 2;
    cfg.hidden_dim = num / den;
  }
  Vec flat(n);
  for (std::size_t i = 0; i < n; ++i) {
    flat[i] = static_cast<double>(r.f32("parameter"));
  }
  r.expect_end();
  return params_from_flat(cfg, flat);
}

}  // namespace ahc
