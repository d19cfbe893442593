#include "ahc/config.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <sstream>
#include <variant>

#include "ahc/report.hpp"
#include "json.hpp"

namespace ahc {
namespace {

using json = nlohmann::json;

// std::uint64_t fields (seed) ride the std::size_t alternative; the two are
// the same type on this ABI and a variant cannot hold duplicates.
static_assert(std::is_same_v<std::size_t, std::uint64_t>);
using Member =
    std::variant<std::size_t ExperimentConfig::*, double ExperimentConfig::*,
                 bool ExperimentConfig::*, std::uint32_t ExperimentConfig::*>;

struct FieldDef {
  const char* name;
  Member member;
};

const std::vector<FieldDef>& field_defs() {
  static const std::vector<FieldDef> defs = {
      {"num_tasks", &ExperimentConfig::num_tasks},
      {"classes_per_task", &ExperimentConfig::classes_per_task},
      {"samples_per_class", &ExperimentConfig::samples_per_class},
      {"eval_samples_per_class", &ExperimentConfig::eval_samples_per_class},
      {"d_shift", &ExperimentConfig::d_shift},
      {"class_spread", &ExperimentConfig::class_spread},
      {"sigma", &ExperimentConfig::sigma},
      {"feature_dim", &ExperimentConfig::feature_dim},
      {"code_dim", &ExperimentConfig::code_dim},
      {"depth", &ExperimentConfig::depth},
      {"hidden_dim", &ExperimentConfig::hidden_dim},
      {"inner_steps", &ExperimentConfig::inner_steps},
      {"inner_lr", &ExperimentConfig::inner_lr},
      {"meta_lr", &ExperimentConfig::meta_lr},
      {"second_order", &ExperimentConfig::second_order},
      {"support_fraction", &ExperimentConfig::support_fraction},
      {"imp_alpha", &ExperimentConfig::imp_alpha},
      {"imp_beta", &ExperimentConfig::imp_beta},
      {"imp_gamma", &ExperimentConfig::imp_gamma},
      {"tau", &ExperimentConfig::tau},
      {"age_max", &ExperimentConfig::age_max},
      {"stm_capacity", &ExperimentConfig::stm_capacity},
      {"ltm_capacity", &ExperimentConfig::ltm_capacity},
      {"budget_bytes", &ExperimentConfig::budget_bytes},
      {"stratified_replay", &ExperimentConfig::stratified_replay},
      {"replay_n", &ExperimentConfig::replay_n},
      {"lambda1", &ExperimentConfig::lambda1},
      {"lambda2", &ExperimentConfig::lambda2},
      {"lambda_ewc", &ExperimentConfig::lambda_ewc},
      {"lambda_distill", &ExperimentConfig::lambda_distill},
      {"epochs", &ExperimentConfig::epochs},
      {"batch_size", &ExperimentConfig::batch_size},
      {"classifier_lr", &ExperimentConfig::classifier_lr},
      {"seed", &ExperimentConfig::seed},
  };
  return defs;
}

const FieldDef* find_field(const std::string& name) {
  for (const FieldDef& def : field_defs()) {
    if (name == def.name) return &def;
  }
  return nullptr;
}

[[noreturn]] void bad_value(const std::string& context, const char* name,
                            const char* expected) {
  throw ConfigError(context + ": key '" + std::string(name) + "' expects " +
                    expected);
}

std::uint64_t json_unsigned(const json& v, const std::string& context,
                            const char* name, std::uint64_t max) {
  if (!v.is_number_integer() && !v.is_number_unsigned()) {
    bad_value(context, name, "an unsigned integer");
  }
  if (!v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
    bad_value(context, name, "an unsigned integer");
  }
  const std::uint64_t raw = v.get<std::uint64_t>();
  if (raw > max) {
    throw ConfigError(context + ": key '" + std::string(name) + "' value " +
                      std::to_string(raw) + " is out of range");
  }
  return raw;
}

void assign_from_json(ExperimentConfig& cfg, const FieldDef& def,
                      const json& v, const std::string& context) {
  std::visit(
      [&](auto member) {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, double>) {
          if (!v.is_number()) bad_value(context, def.name, "a number");
          cfg.*member = v.get<double>();
        } else if constexpr (std::is_same_v<T, bool>) {
          if (!v.is_boolean()) bad_value(context, def.name, "a boolean");
          cfg.*member = v.get<bool>();
        } else {
          cfg.*member = static_cast<T>(json_unsigned(
              v, context, def.name, std::numeric_limits<T>::max()));
        }
      },
      def.member);
}

void apply_json_object(ExperimentConfig& cfg, const json& obj,
                       const std::string& context) {
  if (!obj.is_object()) {
    throw ConfigError(context + ": root must be a JSON object");
  }
  for (const auto& [key, value] : obj.items()) {
    const FieldDef* def = find_field(key);
    if (def == nullptr) {
      throw ConfigError(context + ": unknown key '" + key + "'");
    }
    assign_from_json(cfg, *def, value, context);
  }
}

json parse_strict(const std::string& text, const std::string& context) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(context + ": " + e.what());
  }
}

std::string read_file_or_throw(const std::string& path,
                               const std::string& context) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw ConfigError(context + ": cannot read file '" + path + "'");
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

}  // namespace

const std::vector<std::string>& experiment_field_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const FieldDef& def : field_defs()) out.emplace_back(def.name);
    return out;
  }();
  return names;
}

ExperimentConfig parse_config_text(const std::string& text,
                                   const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  apply_json_object(cfg, parse_strict(text, "config"), "config");
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path,
                                  const ExperimentConfig& base) {
  return parse_config_text(read_file_or_throw(path, "config"), base);
}

void apply_axis_value(ExperimentConfig& cfg, const std::string& axis,
                      double value) {
  const FieldDef* def = find_field(axis);
  if (def == nullptr) {
    throw ConfigError("sweep: unknown axis '" + axis + "'");
  }
  if (!std::isfinite(value)) {
    throw ConfigError("sweep: axis '" + axis + "' value must be finite");
  }
  std::visit(
      [&](auto member) {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, double>) {
          cfg.*member = value;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value != 0.0 && value != 1.0) {
            throw ConfigError("sweep: axis '" + axis +
                              "' is boolean; use 0 or 1");
          }
          cfg.*member = (value == 1.0);
        } else {
          if (value < 0.0 || value != std::floor(value) ||
              value > static_cast<double>(std::numeric_limits<T>::max())) {
            throw ConfigError("sweep: axis '" + axis +
                              "' requires an unsigned integer value, got " +
                              format_double(value));
          }
          cfg.*member = static_cast<T>(value);
        }
      },
      def->member);
}

std::string axis_value_label(const ExperimentConfig& cfg,
                             const std::string& axis) {
  const FieldDef* def = find_field(axis);
  if (def == nullptr) {
    throw ConfigError("sweep: unknown axis '" + axis + "'");
  }
  return std::visit(
      [&](auto member) -> std::string {
        using T = std::remove_cvref_t<decltype(cfg.*member)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_double(cfg.*member);
        } else if constexpr (std::is_same_v<T, bool>) {
          return (cfg.*member) ? "true" : "false";
        } else {
          return std::to_string(cfg.*member);
        }
      },
      def->member);
}

std::string experiment_config_json(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "{\n";
  bool first = true;
  for (const FieldDef& def : field_defs()) {
    if (!first) out << ",\n";
    first = false;
    out << "  \"" << def.name << "\": ";
    std::visit(
        [&](auto member) {
          using T = std::remove_cvref_t<decltype(cfg.*member)>;
          if constexpr (std::is_same_v<T, double>) {
            out << format_double(cfg.*member);
          } else if constexpr (std::is_same_v<T, bool>) {
            out << ((cfg.*member) ? "true" : "false");
          } else {
            out << +(cfg.*member);
          }
        },
        def.member);
  }
  out << "\n}\n";
  return out.str();
}

SweepSpec parse_sweep_text(const std::string& text) {
  const json root = parse_strict(text, "sweep");
  if (!root.is_object()) {
    throw ConfigError("sweep: root must be a JSON object");
  }
  SweepSpec spec;
  bool have_axis = false;
  bool have_values = false;
  for (const auto& [key, value] : root.items()) {
    if (key == "axis") {
      if (!value.is_string()) {
        throw ConfigError("sweep: key 'axis' expects a field name string");
      }
      spec.axis = value.get<std::string>();
      have_axis = true;
    } else if (key == "values") {
      if (!value.is_array() || value.empty()) {
        throw ConfigError("sweep: key 'values' expects a non-empty array");
      }
      for (const auto& v : value) {
        if (!v.is_number()) {
          throw ConfigError("sweep: key 'values' expects numbers");
        }
        spec.values.push_back(v.get<double>());
      }
      have_values = true;
    } else if (key == "seeds") {
      if (!value.is_array() || value.empty()) {
        throw ConfigError("sweep: key 'seeds' expects a non-empty array");
      }
      for (const auto& v : value) {
        spec.seeds.push_back(json_unsigned(
            v, "sweep", "seeds", std::numeric_limits<std::uint64_t>::max()));
      }
    } else if (key == "base") {
      apply_json_object(spec.base, value, "sweep base");
    } else {
      throw ConfigError("sweep: unknown key '" + key + "'");
    }
  }
  if (!have_axis) throw ConfigError("sweep: missing required key 'axis'");
  if (!have_values) throw ConfigError("sweep: missing required key 'values'");
  if (find_field(spec.axis) == nullptr) {
    throw ConfigError("sweep: unknown axis '" + spec.axis + "'");
  }
  if (spec.seeds.empty()) spec.seeds.push_back(spec.base.seed);
  // Surface bad values (fractional counts, boolean != 0/1) at parse time
  // rather than mid-sweep.
  for (double v : spec.values) {
    ExperimentConfig scratch = spec.base;
    apply_axis_value(scratch, spec.axis, v);
  }
  return spec;
}

SweepSpec load_sweep_file(const std::string& path) {
  return parse_sweep_text(read_file_or_throw(path, "sweep"));
}

}  // namespace ahc
