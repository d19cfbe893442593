#pragma once

#include <string>

#include "ahc/continual.hpp"

namespace ahc {

struct RenderedReport {
  std::string report_txt;
  std::string metrics_csv;
  std::string memory_trace_csv;
  std::string loss_curve_csv;
};

// %.17g: every double round-trips, so equal reports are equal byte-for-byte.
std::string format_double(double v);

// Deterministic rendering: fixed field order, %.17g doubles, no timestamps.
// Identical reports from identical runs compare equal as strings.
RenderedReport render_report(const ExperimentReport& report);

}  // namespace ahc
