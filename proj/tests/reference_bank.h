#pragma once

// Brute-force mirror of MemoryBank used to cross-check eviction behavior.
// Deliberately dumb: plain vectors, whole-store scans, and an explicit
// lexicographic eviction key instead of the production cascade, so the two
// implementations only agree if the documented contract holds.

#include <cstddef>
#include <cstdint>
#include <random>
#include <tuple>
#include <utility>
#include <vector>

#include "ahc/memory.hpp"

namespace ahc::reftest {

struct ReferenceBank {
  BankConfig cfg;
  std::vector<FeatureRecord> stm;  // oldest first
  std::vector<FeatureRecord> ltm;  // insertion order

  explicit ReferenceBank(const BankConfig& c) : cfg(c) {}

  std::size_t record_bytes() const { return cfg.code_dim * 4 + 48; }
  std::size_t bytes() const { return (stm.size() + ltm.size()) * record_bytes(); }

  void rescore(FeatureRecord& r) const {
    r.importance = static_cast<float>(importance(
        static_cast<double>(r.uncertainty), static_cast<double>(r.difficulty),
        r.age, cfg.weights));
  }

  // The record to evict: lowest cached importance, ties broken toward the
  // older record, then the lower task id, then the slot inserted first.
  // Encoded as the lexicographic minimum of (importance, -age, task_id, slot).
  std::size_t victim(const std::vector<FeatureRecord>& store) const {
    auto key = [](const FeatureRecord& r, std::size_t slot) {
      return std::make_tuple(r.importance, -static_cast<std::int64_t>(r.age),
                             r.task_id, slot);
    };
    std::size_t best = 0;
    for (std::size_t i = 1; i < store.size(); ++i) {
      if (key(store[i], i) < key(store[best], best)) best = i;
    }
    return best;
  }

  void enforce_budget() {
    while (bytes() > cfg.budget_bytes) {
      if (!ltm.empty()) {
        ltm.erase(ltm.begin() + static_cast<std::ptrdiff_t>(victim(ltm)));
      } else {
        stm.erase(stm.begin() + static_cast<std::ptrdiff_t>(victim(stm)));
      }
    }
  }

  void ltm_place(FeatureRecord r) {
    if (ltm.size() < cfg.ltm_capacity) {
      ltm.push_back(std::move(r));
      return;
    }
    const std::size_t v = victim(ltm);
    if (ltm[v].importance < r.importance) {
      ltm.erase(ltm.begin() + static_cast<std::ptrdiff_t>(v));
      ltm.push_back(std::move(r));
    }
  }

  void stm_insert(FeatureRecord r) {
    rescore(r);
    stm.push_back(std::move(r));
    if (stm.size() > cfg.stm_capacity) stm.erase(stm.begin());
    enforce_budget();
  }

  void ltm_insert(FeatureRecord r) {
    rescore(r);
    ltm_place(std::move(r));
    enforce_budget();
  }

  std::size_t consolidate() {
    std::vector<FeatureRecord> keep;
    std::size_t moved = 0;
    for (FeatureRecord& r : stm) {
      if (static_cast<double>(r.importance) < cfg.weights.tau) {
        ++moved;
        ltm_place(std::move(r));
      } else {
        keep.push_back(std::move(r));
      }
    }
    stm = std::move(keep);
    enforce_budget();
    return moved;
  }

  void tick_age() {
    for (auto* store : {&stm, &ltm}) {
      for (FeatureRecord& r : *store) {
        if (r.age != UINT32_MAX) ++r.age;
        rescore(r);
      }
    }
  }

  void set_budget(std::size_t budget) {
    cfg.budget_bytes = budget;
    enforce_budget();
  }
};

// True when the live bank and the reference hold identical records in
// identical store order.
inline bool same_state(const MemoryBank& bank, const ReferenceBank& ref) {
  if (bank.stm().size() != ref.stm.size() || bank.ltm().size() != ref.ltm.size()) {
    return false;
  }
  for (std::size_t i = 0; i < ref.stm.size(); ++i) {
    if (!(bank.stm()[i] == ref.stm[i])) return false;
  }
  for (std::size_t i = 0; i < ref.ltm.size(); ++i) {
    if (!(bank.ltm()[i] == ref.ltm[i])) return false;
  }
  return true;
}

// Random record with U/D drawn from a coarse grid and ages from a small set,
// so exact importance ties (and therefore the tie-break paths) actually occur.
inline FeatureRecord random_record(std::mt19937_64& rng, std::size_t code_dim) {
  FeatureRecord r;
  r.code.resize(code_dim);
  for (float& c : r.code) c = static_cast<float>(standard_normal(rng));
  r.class_id = static_cast<std::uint32_t>(bounded_uniform(rng, 32));
  r.task_id = static_cast<std::uint32_t>(bounded_uniform(rng, 4));
  r.uncertainty = static_cast<float>(bounded_uniform(rng, 5)) / 4.0f;
  r.difficulty = static_cast<float>(bounded_uniform(rng, 5)) / 4.0f;
  r.age = static_cast<std::uint32_t>(bounded_uniform(rng, 3)) * 100;
  return r;
}

}  // namespace ahc::reftest
