#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "ahc/compressor.hpp"
#include "ahc/memory.hpp"
#include "ahc/ndcore.hpp"

namespace ahc {

// One synthetic classification task: a Gaussian blob per class, centered at
// prototypes whose mean sits exactly d_shift away from the previous task's
// prototype centroid.
struct TaskSpec {
  std::uint32_t task_id = 0;
  std::vector<std::uint32_t> classes;  // globally unique ids
  std::vector<Vec> prototypes;         // one per class, feature_dim entries
  double sigma = 0.25;
  double d_shift = 0.0;
};

struct LabeledBatch {
  Batch features;
  std::vector<std::uint32_t> labels;
};

// Flat experiment knobs. Field names double as config-file keys and sweep
// axis names.
struct ExperimentConfig {
  // task stream
  std::size_t num_tasks = 5;
  std::size_t classes_per_task = 10;
  std::size_t samples_per_class = 20;
  std::size_t eval_samples_per_class = 20;
  double d_shift = 3.0;
  double class_spread = 1.5;
  double sigma = 0.25;
  // compressor
  std::size_t feature_dim = 64;
  std::size_t code_dim = 10;
  std::size_t depth = 1;
  std::size_t hidden_dim = 32;
  // meta-learning
  std::size_t inner_steps = 5;
  double inner_lr = 0.01;
  double meta_lr = 5e-4;
  bool second_order = true;
  double support_fraction = 0.3;
  // importance and memory
  double imp_alpha = 0.3;
  double imp_beta = 0.4;
  double imp_gamma = 0.3;
  double tau = 0.5;
  std::uint32_t age_max = 10000;
  std::size_t stm_capacity = 1000;
  std::size_t ltm_capacity = 5000;
  std::size_t budget_bytes = 102400;
  bool stratified_replay = false;
  // anti-forgetting losses
  std::size_t replay_n = 32;
  double lambda1 = 1.0;       // compression loss weight
  double lambda2 = 1.0;       // replay loss weight
  double lambda_ewc = 5000.0;
  double lambda_distill = 2.0;
  // optimization
  std::size_t epochs = 5;
  std::size_t batch_size = 24;
  double classifier_lr = 0.1;
  std::uint64_t seed = 42;
};

void validate(const ExperimentConfig& cfg);
MamlConfig maml_config(const ExperimentConfig& cfg);
CompressorConfig compressor_config(const ExperimentConfig& cfg);
ImportanceWeights importance_weights(const ExperimentConfig& cfg);
BankConfig bank_config(const ExperimentConfig& cfg);

// Deterministic stream of num_tasks tasks. Task t's prototype centroid sits
// exactly d_shift from task t-1's (per-class offsets are centered, so the
// centroid is exact, not approximate). Class ids are t*classes_per_task + j.
std::vector<TaskSpec> generate_task_stream(const ExperimentConfig& cfg,
                                           std::uint64_t seed);

// n samples: uniform class choice, then prototype + sigma * gaussian noise.
LabeledBatch sample_task_batch(const TaskSpec& task, std::size_t n,
                               std::mt19937_64& rng);

// Linear classifier over codes; rows appear as classes appear.
struct ReplayClassifier {
  Mat weight;  // num_classes x code_dim
  Vec bias;

  std::size_t num_classes() const { return bias.size(); }
};

// Grows the classifier to new_total rows (zero-initialized); never shrinks.
void expand_classes(ReplayClassifier& clf, std::size_t new_total,
                    std::size_t code_dim);

Vec class_logits(const ReplayClassifier& clf, const Vec& code);
Vec softmax(const Vec& logits);
double cross_entropy_from_logits(const Vec& logits, std::uint32_t label);
// Shannon entropy divided by ln(num_classes), clamped to [0,1]; 0 when fewer
// than two classes exist.
double normalized_entropy(const Vec& probs);

struct LayerSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t count = 0;
};

// Diagonal Fisher over the COMPRESSOR parameters (flatten() order), globally
// normalized to mean 1, plus the parameter snapshot the EWC penalty anchors
// to. Decoder entries are structurally zero (the classifier reads codes, not
// reconstructions) and still participate in the global mean.
struct FisherState {
  CompressorConfig topology;
  std::vector<LayerSlice> layers;  // one slice per parameter tensor
  Vec fisher_diag;                 // normalized: mean over ALL entries is 1
  Vec theta_star;
};

// Fisher from given labels: mean over the batch of squared per-sample
// gradients of the label log-likelihood, then divided by the global mean.
// Throws when the mean is zero (model insensitive to its parameters).
FisherState fisher_from_labels(const CompressorParams& comp,
                               const ReplayClassifier& clf, const Batch& features,
                               const std::vector<std::uint32_t>& labels);

// Same, but each label is drawn from the model's own softmax (the Fisher
// definition), consuming one uniform draw per sample.
FisherState estimate_fisher(const CompressorParams& comp, const ReplayClassifier& clf,
                            const Batch& features, std::mt19937_64& rng);

// lambda_ewc * sum over tensors l of (1/|l|) * sum_{i in l} F_i (p_i - p*_i)^2.
double ewc_penalty(const CompressorParams& params, const FisherState& fs,
                   double lambda_ewc);
CompressorParams ewc_penalty_grad(const CompressorParams& params, const FisherState& fs,
                                  double lambda_ewc);

// lambda_distill * mean_n mse(f_new[n], f_old[n]).
double distill_loss(const Batch& f_new, const Batch& f_old, double lambda_distill);

// decode(stored code) for each record: the materialized replay feature f-bar,
// treated as a constant input from then on.
Batch materialize_features(const std::vector<FeatureRecord>& records,
                           const CompressorParams& comp);

// Replay objective on materialized features: mean over records of
// CE(classifier(encode(fbar)), class) + 0.5 * mse(decode(encode(fbar)), fbar).
double replay_loss_on_features(const Batch& fbar, const std::vector<std::uint32_t>& labels,
                               const CompressorParams& comp, const ReplayClassifier& clf);

struct ReplayGrads {
  CompressorParams comp;
  Mat clf_weight;
  Vec clf_bias;
};

ReplayGrads replay_grad_on_features(const Batch& fbar,
                                    const std::vector<std::uint32_t>& labels,
                                    const CompressorParams& comp,
                                    const ReplayClassifier& clf);

// Convenience wrapper: materialize, then score.
double replay_loss(const std::vector<FeatureRecord>& records, const CompressorParams& comp,
                   const ReplayClassifier& clf);

// Lower-triangular accuracy bookkeeping: columns[t][e] is accuracy on task e
// measured right after training task t (e <= t), all zero-based.
struct AccuracyMatrix {
  std::vector<std::vector<double>> columns;

  std::size_t num_tasks() const { return columns.size(); }
  double at(std::size_t t_eval, std::size_t t_after) const;
};

// Average over e < T-1 of (best accuracy ever seen on task e) minus (final
// accuracy on task e). Nonnegative because the best includes the final value.
double forgetting(const AccuracyMatrix& m);

struct LossBreakdown {
  std::size_t task = 0;
  std::size_t epoch = 0;
  std::size_t batch = 0;
  double task_ce = 0.0;
  double comp = 0.0;     // lambda1 * adapted query reconstruction loss
  double replay = 0.0;   // lambda2 * replay loss
  double ewc = 0.0;
  double distill = 0.0;
  double total = 0.0;
};

struct ContinualState {
  explicit ContinualState(const ExperimentConfig& cfg);

  CompressorParams compressor;
  ReplayClassifier classifier;
  MemoryBank bank;
  std::optional<FisherState> fisher;               // set after each finished task
  std::optional<CompressorParams> frozen_compressor;
  std::size_t tasks_seen = 0;
  std::uint64_t global_step = 0;
  std::vector<LossBreakdown> loss_log;
  std::vector<std::pair<std::uint64_t, std::size_t>> memory_trace;  // (step, bytes)
};

ContinualState make_initial_state(const ExperimentConfig& cfg);

// One pass of the training loop on a single task: classifier expansion,
// support/query split, MAML inner loop, combined outer loss (task CE +
// lambda1 * compression + lambda2 * replay + EWC + distillation, with the
// replay/EWC/distillation terms inactive on the first task), then feature
// storage, consolidation, Fisher refresh, and frozen-copy refresh.
void train_task(ContinualState& state, const TaskSpec& task, const ExperimentConfig& cfg);

// Accuracy on a fresh evaluation batch of every task seen so far (one
// accuracy-matrix column). Evaluation seeds are split from the base seed, so
// evaluating never perturbs the training stream.
std::vector<double> evaluate(const ContinualState& state,
                             const std::vector<TaskSpec>& tasks,
                             const ExperimentConfig& cfg);

struct ExperimentReport {
  ExperimentConfig config;
  AccuracyMatrix accuracy;
  std::optional<double> forgetting;  // absent for single-task runs
  std::vector<double> final_accuracies;
  double mean_final_accuracy = 0.0;
  std::vector<std::size_t> bank_records_after_task;
  std::size_t peak_memory_bytes = 0;
  std::size_t final_memory_bytes = 0;
  std::vector<LossBreakdown> loss_log;
  std::vector<std::pair<std::uint64_t, std::size_t>> memory_trace;
};

// Full stream: train every task, evaluate after each, assemble the report.
// When final_bank is non-null it receives the serialized end-of-run memory
// bank (same bytes MemoryBank::serialize produces).
ExperimentReport run_experiment(const ExperimentConfig& cfg,
                                std::vector<std::uint8_t>* final_bank = nullptr);

}  // namespace ahc
