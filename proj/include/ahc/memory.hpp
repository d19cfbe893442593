#pragma once

#include <cstdint>
#include <deque>
#include <random>
#include <vector>

#include "ahc/ndcore.hpp"

namespace ahc {

struct ImportanceWeights {
  double alpha = 0.3;  // uncertainty weight
  double beta = 0.4;   // difficulty weight
  double gamma = 0.3;  // recency weight
  double tau = 0.5;    // consolidation threshold
  std::uint32_t age_max = 10000;
};

// Throws unless alpha/beta/gamma are nonnegative and sum to 1 (+-1e-9),
// tau lies in [0,1], and age_max is positive.
void validate(const ImportanceWeights& w);

// alpha*U + beta*D + gamma*(1 - min(A, age_max)/age_max). Inputs outside
// [0,1] are rejected. Output lies in [0,1] whenever the weights are valid.
double importance(double uncertainty, double difficulty, std::uint32_t age,
                  const ImportanceWeights& w);

// Elementwise mean over an H x W grid of equal-length vectors.
Vec mean_pool(const std::vector<std::vector<Vec>>& feature_map);

// One stored exemplar. Serialized size is code_dim*4 + 48 bytes: the code in
// FP32 plus class_id(4) + bbox(16) + task_id(4) + importance/uncertainty/
// difficulty(12) + age(4) + 8 reserved zero bytes.
struct FeatureRecord {
  std::vector<float> code;
  std::uint32_t class_id = 0;
  float bbox[4] = {0.0f, 0.0f, 1.0f, 1.0f};  // x1, y1, x2, y2 in [0,1]
  std::uint32_t task_id = 0;
  float importance = 0.0f;   // cached score; the bank refreshes it on insert and tick
  float uncertainty = 0.0f;  // U in [0,1]
  float difficulty = 0.0f;   // D in [0,1]
  std::uint32_t age = 0;     // ticks since insertion
};

bool operator==(const FeatureRecord& a, const FeatureRecord& b);

struct BankConfig {
  std::size_t code_dim = 10;
  std::size_t stm_capacity = 1000;
  std::size_t ltm_capacity = 5000;
  std::size_t budget_bytes = 102400;
  ImportanceWeights weights;
  // sample_replay default is uniform over STM+LTM; stratified cycles task ids.
  bool stratified_replay = false;
};

// Raw contents of a bank file; used by the CLI to dump/inspect files without
// committing to any capacity configuration.
struct BankImage {
  std::uint32_t code_dim = 0;
  std::vector<FeatureRecord> stm;  // FIFO order, oldest first
  std::vector<FeatureRecord> ltm;  // descending stored importance
};

std::vector<std::uint8_t> write_bank(const BankImage& image);
BankImage parse_bank(const std::vector<std::uint8_t>& bytes);

// Dual-memory exemplar store. STM is a FIFO ring of recent records; LTM holds
// consolidated records and evicts by lowest importance. Every public mutation
// re-establishes memory_bytes() <= budget_bytes by evicting lowest-importance
// records, LTM first, then STM.
//
// All importance comparisons use the cached FP32 field (identical to what is
// serialized), so on-disk order, eviction order, and the reference models in
// the tests agree exactly. Ties evict older age first, then lower task_id,
// then the earliest-inserted record.
class MemoryBank {
 public:
  explicit MemoryBank(const BankConfig& cfg);

  // Appends to STM, dropping the oldest record past capacity.
  void stm_insert(FeatureRecord rec);
  // Inserts into LTM. When full, the minimum-importance resident is evicted
  // only if strictly less important than the incoming record; otherwise the
  // incoming record is discarded.
  void ltm_insert(FeatureRecord rec);
  // Moves every STM record with importance < tau into LTM (LTM insertion
  // rules apply). Returns how many records left STM.
  std::size_t consolidate();
  // Evicts until memory_bytes() <= budget_bytes; returns eviction count.
  std::size_t enforce_budget();
  // Ages every resident record one step and refreshes cached importances.
  void tick_age();
  // n records drawn uniformly without replacement from STM+LTM, or with
  // replacement when fewer than n are resident.
  std::vector<FeatureRecord> sample_replay(std::size_t n, std::mt19937_64& rng) const;

  std::size_t record_bytes() const { return cfg_.code_dim * 4 + 48; }
  std::size_t memory_bytes() const { return (stm_.size() + ltm_.size()) * record_bytes(); }
  std::size_t size() const { return stm_.size() + ltm_.size(); }
  std::uint64_t step_counter() const { return step_counter_; }

  // Replaces the budget and immediately re-enforces it; returns evictions.
  std::size_t set_budget_bytes(std::size_t budget);

  // The score the bank would cache for this record right now.
  float current_importance(const FeatureRecord& rec) const;

  const std::deque<FeatureRecord>& stm() const { return stm_; }
  const std::vector<FeatureRecord>& ltm() const { return ltm_; }
  const BankConfig& config() const { return cfg_; }

  // Bank file bytes: STM in FIFO order, LTM canonicalized to descending
  // importance (ties: younger age first, higher task_id first, stable).
  // serialize(deserialize(bytes)) reproduces bytes exactly.
  std::vector<std::uint8_t> serialize() const;
  // Record fields are taken verbatim from the file (no rescoring), so the
  // round trip is bit-exact. step_counter restarts at zero.
  static MemoryBank deserialize(const std::vector<std::uint8_t>& bytes,
                                const BankConfig& cfg);

 private:
  void check_record(const FeatureRecord& rec) const;
  void refresh(FeatureRecord& rec) const;
  // Index of the most evictable record in a store (lowest importance; ties by
  // older age, lower task_id, earlier position).
  template <typename Store>
  std::size_t eviction_target(const Store& store) const;
  // LTM capacity rules without budget enforcement (consolidate batches it).
  void ltm_place(FeatureRecord rec);

  BankConfig cfg_;
  std::deque<FeatureRecord> stm_;
  std::vector<FeatureRecord> ltm_;  // insertion order
  std::uint64_t step_counter_ = 0;
};

}  // namespace ahc
