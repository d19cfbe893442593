#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ahc {

struct CheckResult {
  std::string name;
  double rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

// Compares every analytic derivative in the library against central finite
// differences on small deterministic instances (all well under 200
// parameters): reconstruction, distillation, classification, replay and EWC
// gradients, the Hessian-vector product, and the fully unrolled second-order
// meta-gradient. When inject_fault is set, one coordinate of the first
// check's analytic gradient has its sign flipped; that check must then fail,
// proving the harness can actually catch a broken backward pass.
std::vector<CheckResult> run_gradient_checks(std::uint64_t seed,
                                             bool inject_fault = false);

// Byte accounting for one memory audit. failures is empty iff everything
// held; each entry names the violated invariant and the offending step,
// record index, or byte offset.
struct MemcheckResult {
  std::size_t code_dim = 0;
  std::size_t record_bytes = 0;
  std::size_t budget_bytes = 0;
  std::size_t capacity_records = 0;  // floor(budget_bytes / record_bytes)
  std::size_t inserted = 0;          // synthetic drive only
  std::size_t evicted = 0;           // synthetic drive only
  std::size_t stm_records = 0;
  std::size_t ltm_records = 0;
  std::size_t total_records = 0;
  std::size_t payload_bytes = 0;     // total_records * record_bytes
  std::size_t file_bytes = 0;        // serialized size including header
  std::size_t peak_bytes = 0;        // max memory_bytes() observed
  bool round_trip_ok = false;
  std::vector<std::string> failures;

  bool passed() const { return failures.empty(); }
};

// Drives a default bank (code_dim 10, 100KB budget) past saturation with
// 1200 low-importance records, consolidating every 40 inserts, and verifies
// the byte arithmetic exactly: 88-byte records, never more than 1163
// resident, memory_bytes <= 102400 after every operation, and a bit-exact
// serialization round trip.
MemcheckResult run_memcheck(std::uint64_t seed);

// Audits an existing bank file against the default configuration: parseable,
// record counts within STM/LTM capacities, payload within the byte budget,
// and parse -> write reproduces the input bytes (fails when the LTM section
// is not in canonical importance order).
MemcheckResult check_bank_file(const std::vector<std::uint8_t>& bytes);

}  // namespace ahc
