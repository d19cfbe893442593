#include "ahc/continual.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>

namespace ahc {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

Vec gaussian_vec(std::size_t d, std::mt19937_64& rng) {
  Vec v(d);
  for (double& x : v) x = standard_normal(rng);
  return v;
}

std::vector<LayerSlice> layer_slices(const CompressorParams& p) {
  std::vector<LayerSlice> out;
  std::size_t off = 0;
  const char* names[2] = {"encoder", "decoder"};
  int h = 0;
  for (const auto* half : {&p.encoder, &p.decoder}) {
    for (std::size_t l = 0; l < half->size(); ++l) {
      const DenseLayer& layer = (*half)[l];
      out.push_back({std::string(names[h]) + "." + std::to_string(l) + ".w", off,
                     layer.w.size()});
      off += layer.w.size();
      out.push_back({std::string(names[h]) + "." + std::to_string(l) + ".b", off,
                     layer.b.size()});
      off += layer.b.size();
    }
    ++h;
  }
  return out;
}

bool same_topology(const CompressorConfig& a, const CompressorConfig& b) {
  return a.input_dim == b.input_dim && a.code_dim == b.code_dim && a.depth == b.depth &&
         (a.depth == 1 || a.hidden_dim == b.hidden_dim);
}

}  // namespace

void validate(const ExperimentConfig& cfg) {
  require(cfg.num_tasks >= 1, "config: num_tasks must be >= 1");
  require(cfg.classes_per_task >= 1, "config: classes_per_task must be >= 1");
  require(cfg.samples_per_class >= 1, "config: samples_per_class must be >= 1");
  require(cfg.eval_samples_per_class >= 1, "config: eval_samples_per_class must be >= 1");
  require(cfg.d_shift >= 0.0, "config: d_shift must be nonnegative");
  require(cfg.class_spread >= 0.0, "config: class_spread must be nonnegative");
  require(cfg.sigma >= 0.0, "config: sigma must be nonnegative");
  require(cfg.feature_dim >= 1, "config: feature_dim must be >= 1");
  require(cfg.code_dim >= 1, "config: code_dim must be >= 1");
  require(cfg.depth == 1 || cfg.depth == 2, "config: depth must be 1 or 2");
  require(cfg.depth == 1 || cfg.hidden_dim >= 1,
          "config: hidden_dim must be >= 1 at depth 2");
  require(cfg.inner_lr >= 0.0, "config: inner_lr must be nonnegative");
  require(cfg.meta_lr >= 0.0, "config: meta_lr must be nonnegative");
  require(cfg.classifier_lr >= 0.0, "config: classifier_lr must be nonnegative");
  require(cfg.support_fraction > 0.0 && cfg.support_fraction < 1.0,
          "config: support_fraction must lie in (0,1)");
  validate(importance_weights(cfg));
  require(cfg.stm_capacity >= 1, "config: stm_capacity must be >= 1");
  require(cfg.ltm_capacity >= 1, "config: ltm_capacity must be >= 1");
  require(cfg.replay_n >= 1, "config: replay_n must be >= 1");
  require(cfg.lambda1 >= 0.0 && cfg.lambda2 >= 0.0 && cfg.lambda_ewc >= 0.0 &&
              cfg.lambda_distill >= 0.0,
          "config: loss weights must be nonnegative");
  require(cfg.epochs >= 1, "config: epochs must be >= 1");
  require(cfg.batch_size >= 2, "config: batch_size must be >= 2 for the support/query split");
  require(cfg.classes_per_task * cfg.samples_per_class >= 2,
          "config: task pool must hold at least 2 samples");
}

MamlConfig maml_config(const ExperimentConfig& cfg) {
  return {cfg.inner_steps, cfg.inner_lr, cfg.meta_lr, cfg.second_order};
}

CompressorConfig compressor_config(const ExperimentConfig& cfg) {
  return {cfg.feature_dim, cfg.code_dim, cfg.depth, cfg.hidden_dim};
}

ImportanceWeights importance_weights(const ExperimentConfig& cfg) {
  return {cfg.imp_alpha, cfg.imp_beta, cfg.imp_gamma, cfg.tau, cfg.age_max};
}

BankConfig bank_config(const ExperimentConfig& cfg) {
  BankConfig b;
  b.code_dim = cfg.code_dim;
  b.stm_capacity = cfg.stm_capacity;
  b.ltm_capacity = cfg.ltm_capacity;
  b.budget_bytes = cfg.budget_bytes;
  b.weights = importance_weights(cfg);
  b.stratified_replay = cfg.stratified_replay;
  return b;
}

std::vector<TaskSpec> generate_task_stream(const ExperimentConfig& cfg,
                                           std::uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(derive_seed(seed, "stream"));
  std::vector<TaskSpec> tasks;
  tasks.reserve(cfg.num_tasks);
  Vec centroid(cfg.feature_dim, 0.0);
  for (std::size_t t = 0; t < cfg.num_tasks; ++t) {
    if (t > 0) {
      // Walk the centroid exactly d_shift along a random unit direction. The
      // direction is drawn even when d_shift is 0 so streams with different
      // shifts share every other draw.
      Vec dir;
      double norm = 0.0;
      do {
        dir = gaussian_vec(cfg.feature_dim, rng);
        norm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
      } while (norm < 1e-12);
      for (std::size_t i = 0; i < centroid.size(); ++i) {
        centroid[i] += cfg.d_shift * dir[i] / norm;
      }
    }
    TaskSpec task;
    task.task_id = static_cast<std::uint32_t>(t);
    task.sigma = cfg.sigma;
    task.d_shift = t == 0 ? 0.0 : cfg.d_shift;
    const std::size_t c = cfg.classes_per_task;
    std::vector<Vec> offsets;
    offsets.reserve(c);
    Vec mean_off(cfg.feature_dim, 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      offsets.push_back(gaussian_vec(cfg.feature_dim, rng));
      for (std::size_t i = 0; i < mean_off.size(); ++i) {
        offsets.back()[i] *= cfg.class_spread;
        mean_off[i] += offsets.back()[i] / static_cast<double>(c);
      }
    }
    for (std::size_t k = 0; k < c; ++k) {
      Vec proto(cfg.feature_dim);
      // Centering the offsets makes the prototype mean equal the centroid
      // exactly, so inter-task centroid distances are exactly d_shift.
      for (std::size_t i = 0; i < proto.size(); ++i) {
        proto[i] = centroid[i] + offsets[k][i] - mean_off[i];
      }
      task.prototypes.push_back(std::move(proto));
      task.classes.push_back(static_cast<std::uint32_t>(t * c + k));
    }
    tasks.push_back(std::move(task));
  }
  return tasks;
}

LabeledBatch sample_task_batch(const TaskSpec& task, std::size_t n,
                               std::mt19937_64& rng) {
  require(n >= 1, "sample_task_batch: n must be >= 1");
  require(!task.classes.empty() && task.classes.size() == task.prototypes.size(),
          "sample_task_batch: malformed task spec");
  require(task.sigma >= 0.0, "sample_task_batch: sigma must be nonnegative");
  LabeledBatch out;
  out.features.reserve(n);
  out.labels.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t k =
        static_cast<std::size_t>(bounded_uniform(rng, task.classes.size()));
    Vec f = task.prototypes[k];
    // Noise is drawn even at sigma=0 so streams differing only in sigma pick
    // identical class sequences.
    for (double& x : f) x += task.sigma * standard_normal(rng);
    out.features.push_back(std::move(f));
    out.labels.push_back(task.classes[k]);
  }
  return out;
}

void expand_classes(ReplayClassifier& clf, std::size_t new_total, std::size_t code_dim) {
  require(clf.weight.rows == clf.bias.size(), "expand_classes: inconsistent classifier");
  require(clf.num_classes() <= new_total,
          "expand_classes: cannot shrink from " + std::to_string(clf.num_classes()) +
              " to " + std::to_string(new_total) + " classes");
  require(clf.weight.rows == 0 || clf.weight.cols == code_dim,
          "expand_classes: code_dim mismatch");
  Mat grown(new_total, code_dim, 0.0);
  for (std::size_t r = 0; r < clf.weight.rows; ++r) {
    for (std::size_t c = 0; c < code_dim; ++c) grown(r, c) = clf.weight(r, c);
  }
  clf.weight = std::move(grown);
  clf.bias.resize(new_total, 0.0);
}

Vec class_logits(const ReplayClassifier& clf, const Vec& code) {
  return linear_forward(code, clf.weight, clf.bias);
}

Vec softmax(const Vec& logits) {
  require(!logits.empty(), "softmax: empty logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

double cross_entropy_from_logits(const Vec& logits, std::uint32_t label) {
  if (label >= logits.size()) {
    throw std::invalid_argument("cross_entropy: unknown class id " +
                                std::to_string(label) + " (classifier covers " +
                                std::to_string(logits.size()) + " classes)");
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  return m + std::log(z) - logits[label];
}

double normalized_entropy(const Vec& probs) {
  if (probs.size() < 2) return 0.0;
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return std::clamp(h / std::log(static_cast<double>(probs.size())), 0.0, 1.0);
}

FisherState fisher_from_labels(const CompressorParams& comp, const ReplayClassifier& clf,
                               const Batch& features,
                               const std::vector<std::uint32_t>& labels) {
  require(!features.empty(), "estimate_fisher: empty batch");
  require(features.size() == labels.size(),
          "estimate_fisher: features/labels size mismatch");
  require(clf.num_classes() >= 1, "estimate_fisher: classifier has no classes");
  const std::size_t n_params = comp.param_count();
  Vec fisher(n_params, 0.0);
  for (std::size_t n = 0; n < features.size(); ++n) {
    const Vec z = encode(comp, features[n]);
    const Vec logits = class_logits(clf, z);
    if (labels[n] >= logits.size()) {
      throw std::invalid_argument("estimate_fisher: unknown class id " +
                                  std::to_string(labels[n]));
    }
    const Vec probs = softmax(logits);
    // d log p(label|f) / d code = W^T (onehot - probs)
    Vec dz(z.size(), 0.0);
    for (std::size_t c = 0; c < probs.size(); ++c) {
      const double coef = (c == labels[n] ? 1.0 : 0.0) - probs[c];
      const double* wrow = clf.weight.data.data() + c * clf.weight.cols;
      for (std::size_t j = 0; j < dz.size(); ++j) dz[j] += coef * wrow[j];
    }
    // Per-sample squared gradient, not the square of the mean gradient.
    const Vec g = encode_backward(comp, {features[n]}, {dz}).flatten();
    for (std::size_t i = 0; i < n_params; ++i) fisher[i] += g[i] * g[i];
  }
  for (double& v : fisher) v /= static_cast<double>(features.size());
  const double mean =
      std::accumulate(fisher.begin(), fisher.end(), 0.0) / static_cast<double>(n_params);
  if (!(mean > 0.0)) {
    throw std::runtime_error(
        "estimate_fisher: degenerate model (Fisher mean is zero; the classifier is "
        "insensitive to the compressor parameters on this batch)");
  }
  for (double& v : fisher) v /= mean;
  FisherState fs;
  fs.topology = config_of(comp);
  fs.layers = layer_slices(comp);
  fs.fisher_diag = std::move(fisher);
  fs.theta_star = comp.flatten();
  return fs;
}

FisherState estimate_fisher(const CompressorParams& comp, const ReplayClassifier& clf,
                            const Batch& features, std::mt19937_64& rng) {
  require(!features.empty(), "estimate_fisher: empty batch");
  require(clf.num_classes() >= 1, "estimate_fisher: classifier has no classes");
  std::vector<std::uint32_t> labels;
  labels.reserve(features.size());
  for (const Vec& f : features) {
    const Vec probs = softmax(class_logits(clf, encode(comp, f)));
    const double u = uniform_unit(rng);
    double cum = 0.0;
    std::uint32_t chosen = static_cast<std::uint32_t>(probs.size() - 1);
    for (std::size_t c = 0; c < probs.size(); ++c) {
      cum += probs[c];
      if (u < cum) {
        chosen = static_cast<std::uint32_t>(c);
        break;
      }
    }
    labels.push_back(chosen);
  }
  return fisher_from_labels(comp, clf, features, labels);
}

namespace {

void check_fisher_compat(const CompressorParams& params, const FisherState& fs,
                         const char* who) {
  if (!same_topology(config_of(params), fs.topology) ||
      params.param_count() != fs.theta_star.size() ||
      fs.theta_star.size() != fs.fisher_diag.size()) {
    throw std::invalid_argument(std::string(who) +
                                ": parameter shape does not match Fisher state");
  }
}

}  // namespace

double ewc_penalty(const CompressorParams& params, const FisherState& fs,
                   double lambda_ewc) {
  check_fisher_compat(params, fs, "ewc_penalty");
  const Vec flat = params.flatten();
  double total = 0.0;
  for (const LayerSlice& l : fs.layers) {
    double acc = 0.0;
    for (std::size_t i = l.offset; i < l.offset + l.count; ++i) {
      const double d = flat[i] - fs.theta_star[i];
      acc += fs.fisher_diag[i] * d * d;
    }
    total += acc / static_cast<double>(l.count);
  }
  return lambda_ewc * total;
}

CompressorParams ewc_penalty_grad(const CompressorParams& params, const FisherState& fs,
                                  double lambda_ewc) {
  check_fisher_compat(params, fs, "ewc_penalty_grad");
  const Vec flat = params.flatten();
  Vec g(flat.size(), 0.0);
  for (const LayerSlice& l : fs.layers) {
    const double inv = 1.0 / static_cast<double>(l.count);
    for (std::size_t i = l.offset; i < l.offset + l.count; ++i) {
      g[i] = lambda_ewc * inv * 2.0 * fs.fisher_diag[i] * (flat[i] - fs.theta_star[i]);
    }
  }
  return params_from_flat(fs.topology, g);
}

double distill_loss(const Batch& f_new, const Batch& f_old, double lambda_distill) {
  require(!f_new.empty(), "distill_loss: empty batch");
  require(f_new.size() == f_old.size(), "distill_loss: batch size mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < f_new.size(); ++n) total += mse(f_new[n], f_old[n]);
  return lambda_distill * total / static_cast<double>(f_new.size());
}

Batch materialize_features(const std::vector<FeatureRecord>& records,
                           const CompressorParams& comp) {
  require(!records.empty(), "materialize_features: no records");
  Batch out;
  out.reserve(records.size());
  for (const FeatureRecord& rec : records) {
    if (rec.code.size() != comp.code_dim()) {
      throw std::invalid_argument("materialize_features: record code length " +
                                  std::to_string(rec.code.size()) +
                                  " does not match compressor code_dim " +
                                  std::to_string(comp.code_dim()));
    }
    Vec z(rec.code.begin(), rec.code.end());
    out.push_back(decode(comp, z));
  }
  return out;
}

double replay_loss_on_features(const Batch& fbar, const std::vector<std::uint32_t>& labels,
                               const CompressorParams& comp, const ReplayClassifier& clf) {
  require(!fbar.empty(), "replay_loss: no records");
  require(fbar.size() == labels.size(), "replay_loss: features/labels size mismatch");
  double total = 0.0;
  for (std::size_t n = 0; n < fbar.size(); ++n) {
    const Vec z = encode(comp, fbar[n]);
    const Vec logits = class_logits(clf, z);
    const double ce = cross_entropy_from_logits(logits, labels[n]);
    total += ce + 0.5 * mse(decode(comp, z), fbar[n]);
  }
  return total / static_cast<double>(fbar.size());
}

ReplayGrads replay_grad_on_features(const Batch& fbar,
                                    const std::vector<std::uint32_t>& labels,
                                    const CompressorParams& comp,
                                    const ReplayClassifier& clf) {
  require(!fbar.empty(), "replay_grad: no records");
  require(fbar.size() == labels.size(), "replay_grad: features/labels size mismatch");
  const double n = static_cast<double>(fbar.size());
  ReplayGrads g{zero_params(config_of(comp)), Mat(clf.weight.rows, clf.weight.cols, 0.0),
                Vec(clf.bias.size(), 0.0)};
  Batch dzs;
  dzs.reserve(fbar.size());
  for (std::size_t s = 0; s < fbar.size(); ++s) {
    const Vec z = encode(comp, fbar[s]);
    const Vec logits = class_logits(clf, z);
    if (labels[s] >= logits.size()) {
      throw std::invalid_argument("replay_grad: unknown class id " +
                                  std::to_string(labels[s]));
    }
    const Vec probs = softmax(logits);
    Vec dz(z.size(), 0.0);
    for (std::size_t c = 0; c < probs.size(); ++c) {
      const double dlogit = (probs[c] - (c == labels[s] ? 1.0 : 0.0)) / n;
      g.clf_bias[c] += dlogit;
      double* wrow = g.clf_weight.data.data() + c * g.clf_weight.cols;
      const double* crow = clf.weight.data.data() + c * clf.weight.cols;
      for (std::size_t j = 0; j < z.size(); ++j) {
        wrow[j] += dlogit * z[j];
        dz[j] += dlogit * crow[j];
      }
    }
    dzs.push_back(std::move(dz));
  }
  // Cross-entropy path through the encoder, plus the 0.5-weighted
  // reconstruction path; fbar itself is a constant.
  add_scaled_in_place(g.comp, encode_backward(comp, fbar, dzs), 1.0);
  add_scaled_in_place(g.comp, recon_grad(comp, fbar), 0.5);
  return g;
}

double replay_loss(const std::vector<FeatureRecord>& records, const CompressorParams& comp,
                   const ReplayClassifier& clf) {
  require(!records.empty(), "replay_loss: no records");
  std::vector<std::uint32_t> labels;
  labels.reserve(records.size());
  for (const FeatureRecord& rec : records) labels.push_back(rec.class_id);
  return replay_loss_on_features(materialize_features(records, comp), labels, comp, clf);
}

double AccuracyMatrix::at(std::size_t t_eval, std::size_t t_after) const {
  if (t_after >= columns.size() || t_eval > t_after) {
    throw std::invalid_argument("AccuracyMatrix::at: need t_eval <= t_after < " +
                                std::to_string(columns.size()));
  }
  if (columns[t_after].size() != t_after + 1) {
    throw std::invalid_argument("AccuracyMatrix: column " + std::to_string(t_after) +
                                " is malformed");
  }
  return columns[t_after][t_eval];
}

double forgetting(const AccuracyMatrix& m) {
  const std::size_t t_count = m.columns.size();
  if (t_count < 2) {
    throw std::invalid_argument("forgetting: need at least two tasks, got " +
                                std::to_string(t_count));
  }
  for (std::size_t t = 0; t < t_count; ++t) {
    if (m.columns[t].size() != t + 1) {
      throw std::invalid_argument("forgetting: column " + std::to_string(t) +
                                  " has length " + std::to_string(m.columns[t].size()) +
                                  ", expected " + std::to_string(t + 1));
    }
    for (double v : m.columns[t]) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument("forgetting: accuracy outside [0,1]");
      }
    }
  }
  double total = 0.0;
  for (std::size_t e = 0; e + 1 < t_count; ++e) {
    double best = m.columns[e][e];
    for (std::size_t t = e; t < t_count; ++t) best = std::max(best, m.columns[t][e]);
    total += best - m.columns[t_count - 1][e];
  }
  return total / static_cast<double>(t_count - 1);
}

ContinualState::ContinualState(const ExperimentConfig& cfg)
    : compressor(init_params(compressor_config(cfg),
                             derive_seed(cfg.seed, "init-compressor"))),
      bank(bank_config(cfg)) {
  classifier.weight = Mat(0, cfg.code_dim);
}

ContinualState make_initial_state(const ExperimentConfig& cfg) {
  validate(cfg);
  return ContinualState(cfg);
}

void train_task(ContinualState& state, const TaskSpec& task, const ExperimentConfig& cfg) {
  validate(cfg);
  require(!task.classes.empty(), "train_task: task has no classes");
  const std::size_t t = state.tasks_seen;
  const CompressorConfig ccfg = compressor_config(cfg);
  const MamlConfig mcfg = maml_config(cfg);

  std::uint32_t max_class = 0;
  for (std::uint32_t c : task.classes) max_class = std::max(max_class, c);
  expand_classes(state.classifier,
                 std::max<std::size_t>(state.classifier.num_classes(), max_class + 1),
                 cfg.code_dim);

  const std::size_t pool_n = task.classes.size() * cfg.samples_per_class;
  std::mt19937_64 data_rng(derive_seed(cfg.seed, "task-data", t));
  const LabeledBatch pool = sample_task_batch(task, pool_n, data_rng);

  std::mt19937_64 train_rng(derive_seed(cfg.seed, "train", t));
  std::mt19937_64 replay_rng(derive_seed(cfg.seed, "replay", t));

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(pool_n);
    std::iota(order.begin(), order.end(), 0);
    shuffle_in_place(order, train_rng);

    std::vector<std::pair<std::size_t, std::size_t>> slices;
    for (std::size_t begin = 0; begin < pool_n;) {
      std::size_t end = std::min(begin + cfg.batch_size, pool_n);
      if (pool_n - end == 1) end = pool_n;  // a 1-sample tail cannot be split
      slices.emplace_back(begin, end);
      begin = end;
    }

    for (std::size_t bi = 0; bi < slices.size(); ++bi) {
      const auto [begin, end] = slices[bi];
      const std::size_t bn = end - begin;

      // Support/query split over the batch, labels kept aligned with query.
      std::vector<std::size_t> perm(bn);
      std::iota(perm.begin(), perm.end(), 0);
      shuffle_in_place(perm, train_rng);
      const std::size_t n_support = std::clamp<std::size_t>(
          static_cast<std::size_t>(
              std::lround(cfg.support_fraction * static_cast<double>(bn))),
          1, bn - 1);
      Batch support;
      Batch query_f;
      std::vector<std::uint32_t> query_y;
      for (std::size_t i = 0; i < bn; ++i) {
        const std::size_t idx = order[begin + perm[i]];
        if (i < n_support) {
          support.push_back(pool.features[idx]);
        } else {
          query_f.push_back(pool.features[idx]);
          query_y.push_back(pool.labels[idx]);
        }
      }

      // Inner loop on support, outer gradient on query at the adapted point.
      std::vector<CompressorParams> trajectory;
      const CompressorParams adapted = maml_adapt(
          state.compressor, support, mcfg, cfg.second_order ? &trajectory : nullptr);

      const double comp_raw = recon_loss(adapted, query_f);

      const double nq = static_cast<double>(query_f.size());
      double ce_sum = 0.0;
      Batch dzs;
      dzs.reserve(query_f.size());
      Mat clf_gw(state.classifier.weight.rows, state.classifier.weight.cols, 0.0);
      Vec clf_gb(state.classifier.bias.size(), 0.0);
      for (std::size_t i = 0; i < query_f.size(); ++i) {
        const Vec z = encode(adapted, query_f[i]);
        const Vec logits = class_logits(state.classifier, z);
        ce_sum += cross_entropy_from_logits(logits, query_y[i]);
        const Vec probs = softmax(logits);
        Vec dz(z.size(), 0.0);
        for (std::size_t c = 0; c < probs.size(); ++c) {
          const double dlogit = (probs[c] - (c == query_y[i] ? 1.0 : 0.0)) / nq;
          clf_gb[c] += dlogit;
          double* wrow = clf_gw.data.data() + c * clf_gw.cols;
          const double* crow =
              state.classifier.weight.data.data() + c * state.classifier.weight.cols;
          for (std::size_t j = 0; j < z.size(); ++j) {
            wrow[j] += dlogit * z[j];
            dz[j] += dlogit * crow[j];
          }
        }
        dzs.push_back(std::move(dz));
      }
      const double task_ce = ce_sum / nq;

      CompressorParams g_adapted = zero_params(ccfg);
      add_scaled_in_place(g_adapted, recon_grad(adapted, query_f), cfg.lambda1);
      add_scaled_in_place(g_adapted, encode_backward(adapted, query_f, dzs), 1.0);

      CompressorParams g_meta =
          cfg.second_order
              ? backprop_through_adaptation(support, mcfg, trajectory, g_adapted)
              : g_adapted;

      // Anti-forgetting terms, all inactive on the first task.
      double replay_val = 0.0;
      if (t > 0 && state.bank.size() > 0 && cfg.lambda2 > 0.0) {
        const std::vector<FeatureRecord> records =
            state.bank.sample_replay(cfg.replay_n, replay_rng);
        std::vector<std::uint32_t> labels;
        labels.reserve(records.size());
        for (const FeatureRecord& rec : records) labels.push_back(rec.class_id);
        // f-bar is materialized once and then treated as a constant input.
        const Batch fbar = materialize_features(records, state.compressor);
        replay_val = cfg.lambda2 * replay_loss_on_features(fbar, labels,
                                                           state.compressor,
                                                           state.classifier);
        const ReplayGrads rg =
            replay_grad_on_features(fbar, labels, state.compressor, state.classifier);
        add_scaled_in_place(g_meta, rg.comp, cfg.lambda2);
        for (std::size_t i = 0; i < clf_gw.data.size(); ++i) {
          clf_gw.data[i] += cfg.lambda2 * rg.clf_weight.data[i];
        }
        for (std::size_t i = 0; i < clf_gb.size(); ++i) {
          clf_gb[i] += cfg.lambda2 * rg.clf_bias[i];
        }
      }

      double ewc_val = 0.0;
      if (t > 0 && state.fisher && cfg.lambda_ewc > 0.0) {
        ewc_val = ewc_penalty(state.compressor, *state.fisher, cfg.lambda_ewc);
        add_scaled_in_place(
            g_meta, ewc_penalty_grad(state.compressor, *state.fisher, cfg.lambda_ewc),
            1.0);
      }

      double distill_val = 0.0;
      if (t > 0 && state.frozen_compressor && cfg.lambda_distill > 0.0) {
        Batch frozen_recon;
        frozen_recon.reserve(query_f.size());
        for (const Vec& f : query_f) {
          frozen_recon.push_back(
              decode(*state.frozen_compressor, encode(*state.frozen_compressor, f)));
        }
        distill_val = cfg.lambda_distill *
                      recon_loss_to_targets(state.compressor, query_f, frozen_recon);
        add_scaled_in_place(
            g_meta,
            recon_grad_to_targets(state.compressor, query_f, frozen_recon),
            cfg.lambda_distill);
      }

      const double comp_val = cfg.lambda1 * comp_raw;
      const double total = task_ce + comp_val + replay_val + ewc_val + distill_val;
      if (!std::isfinite(total)) {
        throw std::runtime_error(
            "train_task: non-finite loss at task " + std::to_string(t) + " epoch " +
            std::to_string(epoch) + " batch " + std::to_string(bi) +
            " (ce=" + std::to_string(task_ce) + ", comp=" + std::to_string(comp_val) +
            ", replay=" + std::to_string(replay_val) + ", ewc=" +
            std::to_string(ewc_val) + ", distill=" + std::to_string(distill_val) + ")");
      }

      state.compressor = sgd_step(state.compressor, g_meta, cfg.meta_lr);
      state.classifier.weight = sgd_step(state.classifier.weight, clf_gw, cfg.classifier_lr);
      state.classifier.bias = sgd_step(state.classifier.bias, clf_gb, cfg.classifier_lr);

      state.loss_log.push_back(
          {t, epoch, bi, task_ce, comp_val, replay_val, ewc_val, distill_val, total});
      state.bank.tick_age();
      ++state.global_step;
      state.memory_trace.emplace_back(state.global_step, state.bank.memory_bytes());
    }
  }

  // Storage: compress the task pool into records. Difficulty is the sample's
  // classification loss over the running max seen so far in this task.
  double running_max_ce = 0.0;
  for (std::size_t i = 0; i < pool_n; ++i) {
    const Vec z = encode(state.compressor, pool.features[i]);
    const Vec logits = class_logits(state.classifier, z);
    const double ce = cross_entropy_from_logits(logits, pool.labels[i]);
    running_max_ce = std::max(running_max_ce, ce);
    FeatureRecord rec;
    rec.code.resize(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) rec.code[j] = static_cast<float>(z[j]);
    rec.class_id = pool.labels[i];
    rec.task_id = task.task_id;
    rec.uncertainty = static_cast<float>(normalized_entropy(softmax(logits)));
    rec.difficulty = static_cast<float>(
        running_max_ce > 1e-12 ? std::clamp(ce / running_max_ce, 0.0, 1.0) : 0.0);
    rec.age = 0;
    state.bank.stm_insert(std::move(rec));
  }
  state.bank.consolidate();
  ++state.global_step;
  state.memory_trace.emplace_back(state.global_step, state.bank.memory_bytes());

  // Fisher on a fresh batch, then freeze the compressor for distillation.
  std::mt19937_64 fisher_rng(derive_seed(cfg.seed, "fisher", t));
  const LabeledBatch fisher_batch = sample_task_batch(task, pool_n, fisher_rng);
  state.fisher =
      estimate_fisher(state.compressor, state.classifier, fisher_batch.features, fisher_rng);
  state.frozen_compressor = state.compressor;
  ++state.tasks_seen;
}

std::vector<double> evaluate(const ContinualState& state,
                             const std::vector<TaskSpec>& tasks,
                             const ExperimentConfig& cfg) {
  require(state.tasks_seen >= 1, "evaluate: no tasks trained yet");
  require(tasks.size() >= state.tasks_seen, "evaluate: task list shorter than tasks seen");
  std::vector<double> column;
  column.reserve(state.tasks_seen);
  for (std::size_t te = 0; te < state.tasks_seen; ++te) {
    std::mt19937_64 rng(derive_seed(cfg.seed, "eval", state.tasks_seen, te));
    const std::size_t n = tasks[te].classes.size() * cfg.eval_samples_per_class;
    const LabeledBatch batch = sample_task_batch(tasks[te], n, rng);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const Vec logits =
          class_logits(state.classifier, encode(state.compressor, batch.features[i]));
      std::size_t arg = 0;
      for (std::size_t c = 1; c < logits.size(); ++c) {
        if (logits[c] > logits[arg]) arg = c;
      }
      if (arg == batch.labels[i]) ++correct;
    }
    column.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  return column;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                std::vector<std::uint8_t>* final_bank) {
  validate(cfg);
  ExperimentReport report;
  report.config = cfg;
  const std::vector<TaskSpec> tasks = generate_task_stream(cfg, cfg.seed);
  ContinualState state = make_initial_state(cfg);
  for (const TaskSpec& task : tasks) {
    train_task(state, task, cfg);
    report.accuracy.columns.push_back(evaluate(state, tasks, cfg));
    report.bank_records_after_task.push_back(state.bank.size());
  }
  report.final_accuracies = report.accuracy.columns.back();
  report.mean_final_accuracy =
      std::accumulate(report.final_accuracies.begin(), report.final_accuracies.end(), 0.0) /
      static_cast<double>(report.final_accuracies.size());
  if (cfg.num_tasks >= 2) report.forgetting = forgetting(report.accuracy);
  report.loss_log = std::move(state.loss_log);
  report.memory_trace = std::move(state.memory_trace);
  for (const auto& [step, bytes] : report.memory_trace) {
    report.peak_memory_bytes = std::max(report.peak_memory_bytes, bytes);
  }
  report.final_memory_bytes = state.bank.memory_bytes();
  if (final_bank != nullptr) *final_bank = state.bank.serialize();
  return report;
}

}  // namespace ahc
