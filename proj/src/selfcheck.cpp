#include "ahc/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>

#include "ahc/compressor.hpp"
#include "ahc/continual.hpp"
#include "ahc/memory.hpp"
#include "ahc/ndcore.hpp"

namespace ahc {
namespace {

Batch random_batch(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  Batch b(n, Vec(dim));
  for (Vec& v : b) {
    for (double& x : v) x = standard_normal(rng);
  }
  return b;
}

ReplayClassifier random_classifier(std::size_t classes, std::size_t code_dim,
                                   std::mt19937_64& rng) {
  ReplayClassifier clf;
  clf.weight = Mat(classes, code_dim);
  clf.bias = Vec(classes);
  for (double& x : clf.weight.data) x = 0.5 * standard_normal(rng);
  for (double& x : clf.bias) x = 0.1 * standard_normal(rng);
  return clf;
}

Vec classifier_flat(const ReplayClassifier& clf) {
  Vec out = clf.weight.data;
  out.insert(out.end(), clf.bias.begin(), clf.bias.end());
  return out;
}

ReplayClassifier classifier_from_flat(const ReplayClassifier& shape, const Vec& flat) {
  ReplayClassifier clf = shape;
  std::copy(flat.begin(), flat.begin() + clf.weight.size(),
            clf.weight.data.begin());
  std::copy(flat.begin() + clf.weight.size(), flat.end(), clf.bias.begin());
  return clf;
}

}  // namespace

std::vector<CheckResult> run_gradient_checks(std::uint64_t seed, bool inject_fault) {
  std::vector<CheckResult> results;
  const auto add = [&](const std::string& name, const Vec& analytic, const Vec& oracle,
                       double tol) {
    CheckResult r;
    r.name = name;
    r.rel_error = max_rel_error(analytic, oracle);
    r.tolerance = tol;
    r.passed = r.rel_error <= tol;
    results.push_back(std::move(r));
  };
  const double kGradTol = 1e-4;  // first-order checks
  const double kMetaTol = 1e-3;  // unrolled second-order check

  const CompressorConfig lin{6, 2, 1, 4};
  const CompressorConfig relu{6, 2, 2, 4};

  // 1. recon_grad, plain linear bottleneck. This is the check the fault
  // injector corrupts.
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-recon1"));
    const CompressorParams p = init_params(lin, rng());
    const Batch batch = random_batch(5, lin.input_dim, rng);
    Vec analytic = recon_grad(p, batch).flatten();
    if (inject_fault) {
      std::size_t worst = 0;
      for (std::size_t i = 1; i < analytic.size(); ++i) {
        if (std::abs(analytic[i]) > std::abs(analytic[worst])) worst = i;
      }
      analytic[worst] = -analytic[worst];
    }
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) { return recon_loss(params_from_flat(lin, v), batch); },
        p.flatten());
    add("recon_grad/depth1", analytic, fd, kGradTol);
  }

  // 2. recon_grad with the rectified hidden layer.
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-recon2"));
    const CompressorParams p = init_params(relu, rng());
    const Batch batch = random_batch(5, relu.input_dim, rng);
    const Vec analytic = recon_grad(p, batch).flatten();
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) { return recon_loss(params_from_flat(relu, v), batch); },
        p.flatten());
    add("recon_grad/depth2", analytic, fd, kGradTol);
  }

  // 3. recon_grad_to_targets (the distillation term's gradient).
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-distill"));
    const CompressorParams p = init_params(lin, rng());
    const Batch inputs = random_batch(5, lin.input_dim, rng);
    const Batch targets = random_batch(5, lin.input_dim, rng);
    const Vec analytic = recon_grad_to_targets(p, inputs, targets).flatten();
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) {
          return recon_loss_to_targets(params_from_flat(lin, v), inputs, targets);
        },
        p.flatten());
    add("recon_grad_to_targets", analytic, fd, kGradTol);
  }

  // 4. encode_backward, pulling a cross-entropy loss through the encoder.
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-encode-ce"));
    const CompressorParams p = init_params(lin, rng());
    const Batch batch = random_batch(5, lin.input_dim, rng);
    const ReplayClassifier clf = random_classifier(3, lin.code_dim, rng);
    const std::vector<std::uint32_t> labels = {0, 1, 2, 0, 1};
    const auto ce_mean = [&](const CompressorParams& params) {
      double total = 0.0;
      for (std::size_t i = 0; i < batch.size(); ++i) {
        total += cross_entropy_from_logits(class_logits(clf, encode(params, batch[i])),
                                           labels[i]);
      }
      return total / static_cast<double>(batch.size());
    };
    Batch dzs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const Vec probs = softmax(class_logits(clf, encode(p, batch[i])));
      Vec dz(lin.code_dim, 0.0);
      for (std::size_t c = 0; c < probs.size(); ++c) {
        const double dlogit =
            (probs[c] - (c == labels[i] ? 1.0 : 0.0)) / static_cast<double>(batch.size());
        for (std::size_t k = 0; k < lin.code_dim; ++k) {
          dz[k] += clf.weight(c, k) * dlogit;
        }
      }
      dzs.push_back(std::move(dz));
    }
    const Vec analytic = encode_backward(p, batch, dzs).flatten();
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) { return ce_mean(params_from_flat(lin, v)); }, p.flatten());
    add("encode_backward/cross_entropy", analytic, fd, kGradTol);
  }

  // 5/6. Replay objective on materialized features, both parameter groups.
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-replay"));
    const CompressorParams p = init_params(lin, rng());
    const ReplayClassifier clf = random_classifier(3, lin.code_dim, rng);
    const Batch fbar = random_batch(6, lin.input_dim, rng);
    const std::vector<std::uint32_t> labels = {0, 1, 2, 2, 1, 0};
    const ReplayGrads grads = replay_grad_on_features(fbar, labels, p, clf);

    const Vec comp_fd = finite_diff_grad(
        [&](const Vec& v) {
          return replay_loss_on_features(fbar, labels, params_from_flat(lin, v), clf);
        },
        p.flatten());
    add("replay_grad/compressor", grads.comp.flatten(), comp_fd, kGradTol);

    Vec clf_analytic = grads.clf_weight.data;
    clf_analytic.insert(clf_analytic.end(), grads.clf_bias.begin(), grads.clf_bias.end());
    const Vec clf_fd = finite_diff_grad(
        [&](const Vec& v) {
          return replay_loss_on_features(fbar, labels, p, classifier_from_flat(clf, v));
        },
        classifier_flat(clf));
    add("replay_grad/classifier", clf_analytic, clf_fd, kGradTol);
  }

  // 7. EWC penalty gradient, with a Fisher estimated through the real path.
  {
    std::mt19937_64 rng(derive_seed(seed, "gc-ewc"));
    const CompressorParams anchor = init_params(lin, rng());
    const Batch batch = random_batch(8, lin.input_dim, rng);
    const ReplayClassifier clf = random_classifier(3, lin.code_dim, rng);
    const std::vector<std::uint32_t> labels = {0, 1, 2, 0, 1, 2, 0, 1};
    const FisherState fs = fisher_from_labels(anchor, clf, batch, labels);
    // Displace the parameters so the quadratic has a nonzero gradient.
    const CompressorParams p = sgd_step(anchor, recon_grad(anchor, batch), 0.5);
    const double lambda_ewc = 5000.0;
    const Vec analytic = ewc_penalty_grad(p, fs, lambda_ewc).flatten();
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) {
          return ewc_penalty(params_from_flat(lin, v), fs, lambda_ewc);
        },
        p.flatten());
    add("ewc_penalty_grad", analytic, fd, kGradTol);
  }

  // 8/9. Hessian-vector product against finite differences of the analytic
  // gradient along a random direction.
  for (const auto& [name, ccfg] : {std::pair<const char*, CompressorConfig>{
                                       "recon_hvp/depth1", lin},
                                   {"recon_hvp/depth2", relu}}) {
    std::mt19937_64 rng(derive_seed(seed, name));
    const CompressorParams p = init_params(ccfg, rng());
    const CompressorParams dir = init_params(ccfg, rng());
    const Batch batch = random_batch(5, ccfg.input_dim, rng);
    const Vec analytic = recon_hvp(p, batch, dir).flatten();
    const double h = 1e-5;
    const Vec flat = p.flatten();
    const Vec dflat = dir.flatten();
    Vec plus = flat, minus = flat;
    for (std::size_t i = 0; i < flat.size(); ++i) {
      plus[i] += h * dflat[i];
      minus[i] -= h * dflat[i];
    }
    const Vec gp = recon_grad(params_from_flat(ccfg, plus), batch).flatten();
    const Vec gm = recon_grad(params_from_flat(ccfg, minus), batch).flatten();
    Vec fd(flat.size());
    for (std::size_t i = 0; i < flat.size(); ++i) fd[i] = (gp[i] - gm[i]) / (2.0 * h);
    add(name, analytic, fd, kGradTol);
  }

  // 10/11. Second-order meta-gradient against finite differences of the
  // adapted query loss (differentiating through the whole inner loop).
  for (const std::size_t k : {std::size_t{2}, std::size_t{5}}) {
    std::mt19937_64 rng(derive_seed(seed, "gc-meta", k));
    const CompressorParams meta = init_params(lin, rng());
    SupportQuerySplit split;
    split.support = random_batch(6, lin.input_dim, rng);
    split.query = random_batch(6, lin.input_dim, rng);
    MamlConfig mcfg;
    mcfg.inner_steps = k;
    mcfg.inner_lr = 0.01;
    mcfg.second_order = true;
    const Vec analytic = meta_gradient(meta, split, mcfg).flatten();
    const Vec fd = finite_diff_grad(
        [&](const Vec& v) {
          const CompressorParams adapted =
              maml_adapt(params_from_flat(lin, v), split.support, mcfg);
          return recon_loss(adapted, split.query);
        },
        meta.flatten());
    add("meta_gradient/second_order_k" + std::to_string(k), analytic, fd, kMetaTol);
  }

  return results;
}

MemcheckResult run_memcheck(std::uint64_t seed) {
  MemcheckResult res;
  BankConfig cfg;  // defaults: code_dim 10, 1000/5000 capacities, 100KB budget
  MemoryBank bank(cfg);
  res.code_dim = cfg.code_dim;
  res.record_bytes = bank.record_bytes();
  res.budget_bytes = cfg.budget_bytes;
  res.capacity_records = cfg.budget_bytes / bank.record_bytes();

  std::mt19937_64 rng(derive_seed(seed, "memcheck"));
  const std::size_t total_inserts = 1200;
  const std::size_t consolidate_every = 40;
  const auto audit = [&](std::size_t step) {
    res.peak_bytes = std::max(res.peak_bytes, bank.memory_bytes());
    if (bank.memory_bytes() > cfg.budget_bytes) {
      res.failures.push_back("budget exceeded after operation " + std::to_string(step) +
                             ": " + std::to_string(bank.memory_bytes()) + " > " +
                             std::to_string(cfg.budget_bytes));
    }
    if (bank.stm().size() > cfg.stm_capacity) {
      res.failures.push_back("stm over capacity after operation " + std::to_string(step));
    }
    if (bank.ltm().size() > cfg.ltm_capacity) {
      res.failures.push_back("ltm over capacity after operation " + std::to_string(step));
    }
  };

  for (std::size_t i = 0; i < total_inserts; ++i) {
    FeatureRecord rec;
    rec.code.resize(cfg.code_dim);
    for (float& c : rec.code) c = static_cast<float>(standard_normal(rng));
    rec.class_id = static_cast<std::uint32_t>(i % 10);
    rec.task_id = static_cast<std::uint32_t>(i / 300);
    // Keep importance strictly below tau = 0.5 so every record consolidates:
    // with age 0 the recency term contributes 0.3, so I <= 0.3 + 0.3*0.3 +
    // 0.4*0.2 = 0.47.
    rec.uncertainty = static_cast<float>(0.3 * uniform_unit(rng));
    rec.difficulty = static_cast<float>(0.2 * uniform_unit(rng));
    bank.stm_insert(std::move(rec));
    audit(i);
    if ((i + 1) % consolidate_every == 0) {
      bank.consolidate();
      audit(i);
    }
  }
  res.inserted = total_inserts;
  res.evicted = total_inserts - bank.size();
  res.stm_records = bank.stm().size();
  res.ltm_records = bank.ltm().size();
  res.total_records = bank.size();
  res.payload_bytes = bank.memory_bytes();

  const std::size_t expect_retained = std::min(total_inserts, res.capacity_records);
  if (res.total_records != expect_retained) {
    res.failures.push_back("expected " + std::to_string(expect_retained) +
                           " retained records, found " +
                           std::to_string(res.total_records));
  }
  if (res.stm_records != 0) {
    res.failures.push_back("stm not fully consolidated: " +
                           std::to_string(res.stm_records) + " records left");
  }

  const std::vector<std::uint8_t> bytes = bank.serialize();
  res.file_bytes = bytes.size();
  if (bytes.size() != 20 + res.total_records * res.record_bytes) {
    res.failures.push_back("serialized size " + std::to_string(bytes.size()) +
                           " != 20 + " + std::to_string(res.total_records) + " * " +
                           std::to_string(res.record_bytes));
  }
  const MemoryBank reloaded = MemoryBank::deserialize(bytes, cfg);
  res.round_trip_ok = reloaded.serialize() == bytes;
  if (!res.round_trip_ok) {
    res.failures.push_back("serialization round trip is not bit-exact");
  }
  return res;
}

MemcheckResult check_bank_file(const std::vector<std::uint8_t>& bytes) {
  MemcheckResult res;
  BankConfig cfg;
  res.budget_bytes = cfg.budget_bytes;
  res.file_bytes = bytes.size();

  BankImage image;
  try {
    image = parse_bank(bytes);
  } catch (const std::exception& e) {
    res.failures.push_back(e.what());
    return res;
  }
  res.code_dim = image.code_dim;
  res.record_bytes = static_cast<std::size_t>(image.code_dim) * 4 + 48;
  res.capacity_records = cfg.budget_bytes / res.record_bytes;
  res.stm_records = image.stm.size();
  res.ltm_records = image.ltm.size();
  res.total_records = image.stm.size() + image.ltm.size();
  res.payload_bytes = res.total_records * res.record_bytes;

  if (res.stm_records > cfg.stm_capacity) {
    res.failures.push_back("stm count " + std::to_string(res.stm_records) +
                           " exceeds capacity " + std::to_string(cfg.stm_capacity));
  }
  if (res.ltm_records > cfg.ltm_capacity) {
    res.failures.push_back("ltm count " + std::to_string(res.ltm_records) +
                           " exceeds capacity " + std::to_string(cfg.ltm_capacity));
  }
  if (res.payload_bytes > cfg.budget_bytes) {
    res.failures.push_back("payload " + std::to_string(res.payload_bytes) +
                           " bytes exceeds budget " + std::to_string(cfg.budget_bytes));
  }

  const std::vector<std::uint8_t> rewritten = write_bank(image);
  res.round_trip_ok = rewritten == bytes;
  if (!res.round_trip_ok) {
    std::size_t at = 0;
    while (at < bytes.size() && at < rewritten.size() && bytes[at] == rewritten[at]) {
      ++at;
    }
    res.failures.push_back(
        "round trip differs at byte offset " + std::to_string(at) +
        " (ltm section not in canonical importance order?)");
  }
  return res;
}

}  // namespace ahc
