#include "ahc/memory.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>

#include "ahc/bytes.hpp"

namespace ahc {

void validate(const ImportanceWeights& w) {
  if (w.alpha < 0.0 || w.beta < 0.0 || w.gamma < 0.0) {
    throw std::invalid_argument("importance weights must be nonnegative");
  }
  if (std::abs(w.alpha + w.beta + w.gamma - 1.0) > 1e-9) {
    throw std::invalid_argument("importance weights must sum to 1 (got " +
                                std::to_string(w.alpha + w.beta + w.gamma) + ")");
  }
  if (w.tau < 0.0 || w.tau > 1.0) {
    throw std::invalid_argument("tau must lie in [0,1]");
  }
  if (w.age_max == 0) {
    throw std::invalid_argument("age_max must be positive");
  }
}

double importance(double uncertainty, double difficulty, std::uint32_t age,
                  const ImportanceWeights& w) {
  validate(w);
  if (!(uncertainty >= 0.0 && uncertainty <= 1.0)) {
    throw std::invalid_argument("importance: uncertainty outside [0,1]");
  }
  if (!(difficulty >= 0.0 && difficulty <= 1.0)) {
    throw std::invalid_argument("importance: difficulty outside [0,1]");
  }
  const double capped = static_cast<double>(std::min(age, w.age_max));
  const double recency = 1.0 - capped / static_cast<double>(w.age_max);
  return w.alpha * uncertainty + w.beta * difficulty + w.gamma * recency;
}

Vec mean_pool(const std::vector<std::vector<Vec>>& feature_map) {
  if (feature_map.empty() || feature_map.front().empty()) {
    throw std::invalid_argument("mean_pool: empty feature map");
  }
  const std::size_t w = feature_map.front().size();
  const std::size_t d = feature_map.front().front().size();
  if (d == 0) throw std::invalid_argument("mean_pool: zero-dimensional cells");
  Vec out(d, 0.0);
  std::size_t cells = 0;
  for (const auto& row : feature_map) {
    if (row.size() != w) {
      throw std::invalid_argument("mean_pool: ragged feature map");
    }
    for (const Vec& cell : row) {
      if (cell.size() != d) {
        throw std::invalid_argument("mean_pool: inconsistent cell dimension");
      }
      for (std::size_t i = 0; i < d; ++i) out[i] += cell[i];
      ++cells;
    }
  }
  for (double& v : out) v /= static_cast<double>(cells);
  return out;
}

bool operator==(const FeatureRecord& a, const FeatureRecord& b) {
  return a.code == b.code && a.class_id == b.class_id &&
         std::equal(a.bbox, a.bbox + 4, b.bbox) && a.task_id == b.task_id &&
         a.importance == b.importance && a.uncertainty == b.uncertainty &&
         a.difficulty == b.difficulty && a.age == b.age;
}

namespace {

void write_record(ByteWriter& w, const FeatureRecord& rec) {
  for (float c : rec.code) w.f32(c);
  w.u32(rec.class_id);
  for (float b : rec.bbox) w.f32(b);
  w.u32(rec.task_id);
  w.f32(rec.importance);
  w.f32(rec.uncertainty);
  w.f32(rec.difficulty);
  w.u32(rec.age);
  w.zeros(8);
}

void check_record_semantics(const FeatureRecord& rec, const std::string& who) {
  for (float c : rec.code) {
    if (!std::isfinite(c)) throw std::runtime_error(who + ": non-finite code value");
  }
  if (!std::isfinite(rec.importance) || rec.importance < 0.0f || rec.importance > 1.0f) {
    throw std::runtime_error(who + ": importance outside [0,1]");
  }
  if (!std::isfinite(rec.uncertainty) || rec.uncertainty < 0.0f ||
      rec.uncertainty > 1.0f) {
    throw std::runtime_error(who + ": uncertainty outside [0,1]");
  }
  if (!std::isfinite(rec.difficulty) || rec.difficulty < 0.0f || rec.difficulty > 1.0f) {
    throw std::runtime_error(who + ": difficulty outside [0,1]");
  }
  for (float b : rec.bbox) {
    if (!std::isfinite(b)) throw std::runtime_error(who + ": non-finite bbox");
  }
  if (rec.bbox[0] > rec.bbox[2] || rec.bbox[1] > rec.bbox[3]) {
    throw std::runtime_error(who + ": bbox corners out of order");
  }
}

FeatureRecord read_record(ByteReader& r, std::uint32_t code_dim, const std::string& who) {
  FeatureRecord rec;
  // Cap the reservation by the bytes actually present so a corrupted
  // code_dim cannot drive a giant allocation before truncation is noticed.
  rec.code.reserve(std::min<std::size_t>(code_dim, r.remaining() / 4));
  for (std::uint32_t i = 0; i < code_dim; ++i) rec.code.push_back(r.f32("code"));
  rec.class_id = r.u32("class_id");
  for (int i = 0; i < 4; ++i) rec.bbox[i] = r.f32("bbox");
  rec.task_id = r.u32("task_id");
  rec.importance = r.f32("importance");
  rec.uncertainty = r.f32("uncertainty");
  rec.difficulty = r.f32("difficulty");
  rec.age = r.u32("age");
  r.expect_zeros(8, "reserved");
  check_record_semantics(rec, who);
  return rec;
}

// Canonical on-disk LTM order: descending importance; ties put younger age
// first, then higher task_id, then original position (stable). The tail of
// the file is therefore the eviction frontier.
bool ltm_file_order(const FeatureRecord& a, const FeatureRecord& b) {
  if (a.importance != b.importance) return a.importance > b.importance;
  if (a.age != b.age) return a.age < b.age;
  return a.task_id > b.task_id;
}

}  // namespace

std::vector<std::uint8_t> write_bank(const BankImage& image) {
  for (const auto* store : {&image.stm, &image.ltm}) {
    for (const FeatureRecord& rec : *store) {
      if (rec.code.size() != image.code_dim) {
        throw std::invalid_argument("write_bank: record code length " +
                                    std::to_string(rec.code.size()) +
                                    " does not match code_dim " +
                                    std::to_string(image.code_dim));
      }
    }
  }
  ByteWriter w;
  w.magic("AHCM");
  w.u32(1);
  w.u32(image.code_dim);
  w.u32(static_cast<std::uint32_t>(image.stm.size()));
  w.u32(static_cast<std::uint32_t>(image.ltm.size()));
  for (const FeatureRecord& rec : image.stm) write_record(w, rec);
  for (const FeatureRecord& rec : image.ltm) write_record(w, rec);
  return w.take();
}

BankImage parse_bank(const std::vector<std::uint8_t>& bytes) {
  ByteReader r(bytes, "bank file");
  r.expect_magic("AHCM");
  const std::uint32_t version = r.u32("version");
  if (version != 1) {
    throw std::runtime_error("bank file: unsupported version " +
                             std::to_string(version) + " at byte offset 4");
  }
  BankImage img;
  img.code_dim = r.u32("code_dim");
  if (img.code_dim == 0) r.fail("code_dim must be positive");
  const std::uint32_t stm_count = r.u32("stm_count");
  const std::uint32_t ltm_count = r.u32("ltm_count");
  // Reservations bounded by the payload actually present (a record is at
  // least 52 bytes); corrupted counts then fail field by field, positioned.
  const std::size_t fit =
      r.remaining() / (static_cast<std::size_t>(img.code_dim) * 4 + 48);
  img.stm.reserve(std::min<std::size_t>(stm_count, fit));
  img.ltm.reserve(std::min<std::size_t>(ltm_count, fit));
  for (std::uint32_t i = 0; i < stm_count; ++i) {
    img.stm.push_back(read_record(r, img.code_dim, "bank file: stm record " + std::to_string(i)));
  }
  for (std::uint32_t i = 0; i < ltm_count; ++i) {
    img.ltm.push_back(read_record(r, img.code_dim, "bank file: ltm record " + std::to_string(i)));
  }
  r.expect_end();
  return img;
}

MemoryBank::MemoryBank(const BankConfig& cfg) : cfg_(cfg) {
  if (cfg_.code_dim == 0) throw std::invalid_argument("MemoryBank: code_dim must be positive");
  if (cfg_.stm_capacity == 0 || cfg_.ltm_capacity == 0) {
    throw std::invalid_argument("MemoryBank: capacities must be positive");
  }
  validate(cfg_.weights);
}

void MemoryBank::check_record(const FeatureRecord& rec) const {
  if (rec.code.size() != cfg_.code_dim) {
    throw std::invalid_argument("MemoryBank: record code length " +
                                std::to_string(rec.code.size()) +
                                " does not match bank code_dim " +
                                std::to_string(cfg_.code_dim));
  }
  try {
    check_record_semantics(rec, "MemoryBank");
  } catch (const std::runtime_error& e) {
    throw std::invalid_argument(e.what());
  }
}

void MemoryBank::refresh(FeatureRecord& rec) const {
  rec.importance = static_cast<float>(importance(
      static_cast<double>(rec.uncertainty), static_cast<double>(rec.difficulty),
      rec.age, cfg_.weights));
}

template <typename Store>
std::size_t MemoryBank::eviction_target(const Store& store) const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < store.size(); ++i) {
    const FeatureRecord& c = store[i];
    const FeatureRecord& b = store[best];
    if (c.importance != b.importance) {
      if (c.importance < b.importance) best = i;
    } else if (c.age != b.age) {
      if (c.age > b.age) best = i;
    } else if (c.task_id < b.task_id) {
      best = i;
    }
    // full tie keeps the earlier position
  }
  return best;
}

void MemoryBank::ltm_place(FeatureRecord rec) {
  if (ltm_.size() < cfg_.ltm_capacity) {
    ltm_.push_back(std::move(rec));
    return;
  }
  const std::size_t victim = eviction_target(ltm_);
  if (ltm_[victim].importance < rec.importance) {
    ltm_.erase(ltm_.begin() + static_cast<std::ptrdiff_t>(victim));
    ltm_.push_back(std::move(rec));
  }
  // otherwise the incoming record loses the tie and is discarded
}

void MemoryBank::stm_insert(FeatureRecord rec) {
  check_record(rec);
  refresh(rec);
  stm_.push_back(std::move(rec));
  if (stm_.size() > cfg_.stm_capacity) stm_.pop_front();
  enforce_budget();
}

void MemoryBank::ltm_insert(FeatureRecord rec) {
  check_record(rec);
  refresh(rec);
  ltm_place(std::move(rec));
  enforce_budget();
}

std::size_t MemoryBank::consolidate() {
  std::deque<FeatureRecord> keep;
  std::size_t migrated = 0;
  for (FeatureRecord& rec : stm_) {
    if (static_cast<double>(rec.importance) < cfg_.weights.tau) {
      ++migrated;
      ltm_place(std::move(rec));  // may be dropped by LTM rules; it still left STM
    } else {
      keep.push_back(std::move(rec));
    }
  }
  stm_ = std::move(keep);
  enforce_budget();
  return migrated;
}

std::size_t MemoryBank::enforce_budget() {
  std::size_t evicted = 0;
  while (memory_bytes() > cfg_.budget_bytes) {
    if (!ltm_.empty()) {
      ltm_.erase(ltm_.begin() + static_cast<std::ptrdiff_t>(eviction_target(ltm_)));
    } else {
      stm_.erase(stm_.begin() + static_cast<std::ptrdiff_t>(eviction_target(stm_)));
    }
    ++evicted;
  }
  return evicted;
}

void MemoryBank::tick_age() {
  for (FeatureRecord& rec : stm_) {
    if (rec.age != UINT32_MAX) ++rec.age;
    refresh(rec);
  }
  for (FeatureRecord& rec : ltm_) {
    if (rec.age != UINT32_MAX) ++rec.age;
    refresh(rec);
  }
  ++step_counter_;
}

std::vector<FeatureRecord> MemoryBank::sample_replay(std::size_t n,
                                                     std::mt19937_64& rng) const {
  if (n == 0) throw std::invalid_argument("sample_replay: n must be >= 1");
  const std::size_t m = size();
  if (m == 0) throw std::invalid_argument("sample_replay: empty bank");
  auto record_at = [&](std::size_t i) -> const FeatureRecord& {
    return i < stm_.size() ? stm_[i] : ltm_[i - stm_.size()];
  };
  std::vector<FeatureRecord> out;
  out.reserve(n);

  if (cfg_.stratified_replay) {
    // Cycle task ids in ascending order, drawing without replacement inside
    // each task's (shuffled) pool; once every pool is dry, keep cycling with
    // replacement.
    std::map<std::uint32_t, std::vector<std::size_t>> by_task;
    for (std::size_t i = 0; i < m; ++i) by_task[record_at(i).task_id].push_back(i);
    std::vector<std::vector<std::size_t>> pools;
    pools.reserve(by_task.size());
    for (auto& [tid, pool] : by_task) {
      shuffle_in_place(pool, rng);
      pools.push_back(std::move(pool));
    }
    std::vector<std::size_t> cursor(pools.size(), 0);
    std::size_t dry = 0;
    std::size_t t = 0;
    while (out.size() < n && dry < pools.size()) {
      const std::size_t k = t % pools.size();
      ++t;
      if (cursor[k] >= pools[k].size()) continue;
      out.push_back(record_at(pools[k][cursor[k]++]));
      if (cursor[k] == pools[k].size()) ++dry;
    }
    while (out.size() < n) {
      const auto& pool = pools[t % pools.size()];
      ++t;
      out.push_back(record_at(pool[bounded_uniform(rng, pool.size())]));
    }
    return out;
  }

  if (m >= n) {
    // Partial Fisher-Yates: first n slots of a virtual shuffle.
    std::vector<std::size_t> idx(m);
    for (std::size_t i = 0; i < m; ++i) idx[i] = i;
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(bounded_uniform(rng, m - i));
      std::swap(idx[i], idx[j]);
      out.push_back(record_at(idx[i]));
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(record_at(static_cast<std::size_t>(bounded_uniform(rng, m))));
    }
  }
  return out;
}

std::size_t MemoryBank::set_budget_bytes(std::size_t budget) {
  cfg_.budget_bytes = budget;
  return enforce_budget();
}

float MemoryBank::current_importance(const FeatureRecord& rec) const {
  return static_cast<float>(importance(static_cast<double>(rec.uncertainty),
                                       static_cast<double>(rec.difficulty), rec.age,
                                       cfg_.weights));
}

std::vector<std::uint8_t> MemoryBank::serialize() const {
  BankImage img;
  img.code_dim = static_cast<std::uint32_t>(cfg_.code_dim);
  img.stm.assign(stm_.begin(), stm_.end());
  img.ltm = ltm_;
  std::stable_sort(img.ltm.begin(), img.ltm.end(), ltm_file_order);
  return write_bank(img);
}

MemoryBank MemoryBank::deserialize(const std::vector<std::uint8_t>& bytes,
                                   const BankConfig& cfg) {
  BankImage img = parse_bank(bytes);
  MemoryBank bank(cfg);
  if (img.code_dim != cfg.code_dim) {
    throw std::runtime_error("bank file: code_dim " + std::to_string(img.code_dim) +
                             " does not match configured " +
                             std::to_string(cfg.code_dim));
  }
  if (img.stm.size() > cfg.stm_capacity) {
    throw std::runtime_error("bank file: stm count " + std::to_string(img.stm.size()) +
                             " exceeds capacity " + std::to_string(cfg.stm_capacity));
  }
  if (img.ltm.size() > cfg.ltm_capacity) {
    throw std::runtime_error("bank file: ltm count " + std::to_string(img.ltm.size()) +
                             " exceeds capacity " + std::to_string(cfg.ltm_capacity));
  }
  const std::size_t content_bytes =
      (img.stm.size() + img.ltm.size()) * bank.record_bytes();
  if (content_bytes > cfg.budget_bytes) {
    throw std::runtime_error("bank file: content occupies " +
                             std::to_string(content_bytes) + " bytes, over budget " +
                             std::to_string(cfg.budget_bytes));
  }
  bank.stm_.assign(img.stm.begin(), img.stm.end());
  bank.ltm_ = std::move(img.ltm);
  return bank;
}

}  // namespace ahc
