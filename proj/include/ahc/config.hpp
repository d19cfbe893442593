#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "ahc/continual.hpp"

namespace ahc {

// Malformed config files, unknown keys/axes, values of the wrong type, and
// output-overwrite refusals. The CLI maps this to exit code 2; every other
// exception maps to exit code 1.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Every ExperimentConfig field name, in declaration order. These double as
// the legal config-file keys and sweep axis names.
const std::vector<std::string>& experiment_field_names();

// Strict flat JSON object. Every key must name an ExperimentConfig field and
// the value must match the field's type exactly: unsigned integers for count
// fields (no "5.0"), numbers for doubles, true/false for booleans. Keys that
// are absent keep the value they have in `base`. No comments, no nesting.
ExperimentConfig parse_config_text(const std::string& text,
                                   const ExperimentConfig& base = {});
ExperimentConfig load_config_file(const std::string& path,
                                  const ExperimentConfig& base = {});

// Sets one field by name from a numeric sweep value. Integer fields require
// an exact integer in range; boolean fields require exactly 0 or 1.
void apply_axis_value(ExperimentConfig& cfg, const std::string& axis,
                      double value);

// Current value of one field rendered compactly ("51200", "0.01", "true") —
// used to label sweep output directories.
std::string axis_value_label(const ExperimentConfig& cfg,
                             const std::string& axis);

// The full config as a flat JSON object, keys in declaration order, doubles
// rendered shortest-round-trip. parse_config_text(experiment_config_json(c))
// reproduces c exactly.
std::string experiment_config_json(const ExperimentConfig& cfg);

struct SweepSpec {
  std::string axis;
  std::vector<double> values;
  std::vector<std::uint64_t> seeds;
  ExperimentConfig base;
};

// Strict JSON object with required "axis" (field name) and "values"
// (non-empty number array), optional "seeds" (non-empty unsigned array,
// default: the base config's seed) and "base" (flat config object). Every
// value is validated against the axis up front.
SweepSpec parse_sweep_text(const std::string& text);
SweepSpec load_sweep_file(const std::string& path);

}  // namespace ahc
