// ahc: command-line front end for the compression replay engine.
//
// Subcommands: run, sweep, gradcheck, memcheck, dump. Exit codes are a
// stable contract: 0 success, 1 runtime/assertion failure, 2 usage or
// config error. Report files are never overwritten without --force.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ahc/config.hpp"
#include "ahc/continual.hpp"
#include "ahc/memory.hpp"
#include "ahc/report.hpp"
#include "ahc/selfcheck.hpp"

namespace fs = std::filesystem;

namespace {

std::string float_str(float v) {
  char buf[48];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::uint8_t> read_binary_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read file '" + path + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return bytes;
}

// Overwrite guard: collect every path a command intends to write, refuse up
// front (before writing anything) if one already exists and --force is off.
void refuse_overwrite(const std::vector<fs::path>& targets, bool force) {
  if (force) return;
  for (const fs::path& p : targets) {
    if (fs::exists(p)) {
      throw ahc::ConfigError("refusing to overwrite '" + p.string() +
                             "' (pass --force to allow)");
    }
  }
}

void write_text_file(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file '" + path.string() + "'");
  out << content;
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

void write_binary_file(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write file '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to '" + path.string() + "'");
}

const char* const kRunFiles[] = {"report.txt",     "metrics.csv", "memory_trace.csv",
                                 "loss_curve.csv", "config.json", "final_bank.bin"};

std::vector<fs::path> run_targets(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const char* name : kRunFiles) out.push_back(dir / name);
  return out;
}

void write_run_files(const fs::path& dir, const ahc::ExperimentReport& report,
                     const std::vector<std::uint8_t>& final_bank) {
  const ahc::RenderedReport rendered = ahc::render_report(report);
  write_text_file(dir / "report.txt", rendered.report_txt);
  write_text_file(dir / "metrics.csv", rendered.metrics_csv);
  write_text_file(dir / "memory_trace.csv", rendered.memory_trace_csv);
  write_text_file(dir / "loss_curve.csv", rendered.loss_curve_csv);
  write_text_file(dir / "config.json", ahc::experiment_config_json(report.config));
  write_binary_file(dir / "final_bank.bin", final_bank);
}

int cmd_run(const std::string& config_path, const std::string& out_dir,
            std::optional<std::uint64_t> seed, bool force) {
  ahc::ExperimentConfig cfg;
  if (!config_path.empty()) cfg = ahc::load_config_file(config_path);
  if (seed) cfg.seed = *seed;

  const fs::path dir(out_dir);
  refuse_overwrite(run_targets(dir), force);

  std::vector<std::uint8_t> final_bank;
  const ahc::ExperimentReport report = ahc::run_experiment(cfg, &final_bank);
  write_run_files(dir, report, final_bank);

  std::cout << "run: " << report.config.num_tasks << " tasks, seed "
            << report.config.seed << "\n";
  std::cout << "  mean_final_accuracy " << ahc::format_double(report.mean_final_accuracy)
            << "\n";
  if (report.forgetting) {
    std::cout << "  forgetting          " << ahc::format_double(*report.forgetting)
              << "\n";
  }
  std::cout << "  peak_memory_bytes   " << report.peak_memory_bytes << "\n";
  std::cout << "  reports in          " << dir.string() << "\n";
  return 0;
}

int cmd_sweep(const std::string& config_path, const std::string& out_dir,
              std::optional<std::uint64_t> seed, bool force) {
  ahc::SweepSpec spec = ahc::load_sweep_file(config_path);
  if (seed) spec.seeds = {*seed};

  const fs::path dir(out_dir);
  std::vector<fs::path> targets = {dir / "sweep.csv"};
  std::vector<std::pair<ahc::ExperimentConfig, fs::path>> runs;
  for (const double value : spec.values) {
    ahc::ExperimentConfig cfg = spec.base;
    ahc::apply_axis_value(cfg, spec.axis, value);
    const std::string label = ahc::axis_value_label(cfg, spec.axis);
    for (const std::uint64_t s : spec.seeds) {
      cfg.seed = s;
      const fs::path run_dir =
          dir / (spec.axis + "-" + label) / ("seed-" + std::to_string(s));
      for (fs::path& t : run_targets(run_dir)) targets.push_back(std::move(t));
      runs.emplace_back(cfg, run_dir);
    }
  }
  refuse_overwrite(targets, force);

  std::ostringstream combined;
  combined << "axis,value,seed,mean_final_accuracy,forgetting,peak_memory_bytes,"
              "final_memory_bytes\n";
  for (const auto& [cfg, run_dir] : runs) {
    std::vector<std::uint8_t> final_bank;
    const ahc::ExperimentReport report = ahc::run_experiment(cfg, &final_bank);
    write_run_files(run_dir, report, final_bank);
    const std::string label = ahc::axis_value_label(cfg, spec.axis);
    combined << spec.axis << "," << label << "," << cfg.seed << ","
             << ahc::format_double(report.mean_final_accuracy) << ","
             << (report.forgetting ? ahc::format_double(*report.forgetting) : "") << ","
             << report.peak_memory_bytes << "," << report.final_memory_bytes << "\n";
    std::cout << "sweep " << spec.axis << "=" << label << " seed=" << cfg.seed
              << " mean_final_accuracy="
              << ahc::format_double(report.mean_final_accuracy)
              << (report.forgetting
                      ? " forgetting=" + ahc::format_double(*report.forgetting)
                      : std::string())
              << "\n";
  }
  write_text_file(dir / "sweep.csv", combined.str());
  std::cout << "sweep: " << runs.size() << " runs, combined table in "
            << (dir / "sweep.csv").string() << "\n";
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool fault) {
  const std::vector<ahc::CheckResult> results = ahc::run_gradient_checks(seed, fault);
  std::size_t failed = 0;
  for (const ahc::CheckResult& r : results) {
    char err[32];
    std::snprintf(err, sizeof(err), "%.3e", r.rel_error);
    char tol[32];
    std::snprintf(tol, sizeof(tol), "%.0e", r.tolerance);
    std::printf("  %-34s rel_err %s  tol %s  %s\n", r.name.c_str(), err, tol,
                r.passed ? "PASS" : "FAIL");
    if (!r.passed) ++failed;
  }
  if (failed != 0) {
    std::cerr << "gradcheck: " << failed << " of " << results.size()
              << " checks failed\n";
    return 1;
  }
  std::cout << "gradcheck: all " << results.size() << " checks passed\n";
  return 0;
}

void print_memcheck_table(const ahc::MemcheckResult& res) {
  std::printf("  %-18s %zu\n", "code_dim", res.code_dim);
  std::printf("  %-18s %zu\n", "record_bytes", res.record_bytes);
  std::printf("  %-18s %zu\n", "budget_bytes", res.budget_bytes);
  std::printf("  %-18s %zu\n", "capacity_records", res.capacity_records);
  if (res.inserted != 0) {
    std::printf("  %-18s %zu\n", "inserted", res.inserted);
    std::printf("  %-18s %zu\n", "evicted", res.evicted);
    std::printf("  %-18s %zu\n", "peak_bytes", res.peak_bytes);
  }
  std::printf("  %-18s %zu\n", "stm_records", res.stm_records);
  std::printf("  %-18s %zu\n", "ltm_records", res.ltm_records);
  std::printf("  %-18s %zu\n", "total_records", res.total_records);
  std::printf("  %-18s %zu\n", "payload_bytes", res.payload_bytes);
  std::printf("  %-18s %zu\n", "file_bytes", res.file_bytes);
  std::printf("  %-18s %s\n", "round_trip", res.round_trip_ok ? "ok" : "MISMATCH");
}

int cmd_memcheck(const std::string& bank_path, std::uint64_t seed) {
  ahc::MemcheckResult res;
  if (bank_path.empty()) {
    std::cout << "memcheck: synthetic saturation drive (seed " << seed << ")\n";
    res = ahc::run_memcheck(seed);
  } else {
    std::cout << "memcheck: auditing '" << bank_path << "'\n";
    res = ahc::check_bank_file(read_binary_file(bank_path));
  }
  print_memcheck_table(res);
  if (!res.passed()) {
    for (const std::string& f : res.failures) std::cerr << "  FAIL " << f << "\n";
    return 1;
  }
  std::cout << "PASS\n";
  return 0;
}

int cmd_dump(const std::string& bank_path) {
  const ahc::BankImage image = ahc::parse_bank(read_binary_file(bank_path));
  const std::size_t record_bytes = static_cast<std::size_t>(image.code_dim) * 4 + 48;
  const std::size_t total = image.stm.size() + image.ltm.size();
  std::cout << "bank: code_dim=" << image.code_dim << " stm=" << image.stm.size()
            << " ltm=" << image.ltm.size() << " record_bytes=" << record_bytes
            << " payload_bytes=" << total * record_bytes << "\n";
  const auto print_record = [](const char* store, std::size_t i,
                               const ahc::FeatureRecord& r) {
    std::cout << store << "[" << i << "] class=" << r.class_id
              << " task=" << r.task_id << " imp=" << float_str(r.importance)
              << " unc=" << float_str(r.uncertainty)
              << " diff=" << float_str(r.difficulty) << " age=" << r.age << " bbox=("
              << float_str(r.bbox[0]) << "," << float_str(r.bbox[1]) << ","
              << float_str(r.bbox[2]) << "," << float_str(r.bbox[3]) << ") code=[";
    for (std::size_t k = 0; k < r.code.size(); ++k) {
      if (k != 0) std::cout << ",";
      std::cout << float_str(r.code[k]);
    }
    std::cout << "]\n";
  };
  for (std::size_t i = 0; i < image.stm.size(); ++i) print_record("stm", i, image.stm[i]);
  for (std::size_t i = 0; i < image.ltm.size(); ++i) print_record("ltm", i, image.ltm[i]);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ahc: feature-level compression replay engine for continual learning"};
  app.require_subcommand(1);

  std::string run_config, run_out = "out/run";
  std::optional<std::uint64_t> run_seed;
  bool run_force = false;
  CLI::App* run = app.add_subcommand("run", "train a task stream and write report files");
  run->add_option("--config", run_config, "experiment config (flat JSON)");
  run->add_option("--out", run_out, "output directory")->capture_default_str();
  run->add_option("--seed", run_seed, "override the config seed");
  run->add_flag("--force", run_force, "overwrite existing report files");

  std::string sweep_config, sweep_out = "out/sweep";
  std::optional<std::uint64_t> sweep_seed;
  bool sweep_force = false;
  CLI::App* sweep =
      app.add_subcommand("sweep", "run one axis over several values and seeds");
  sweep->add_option("--config", sweep_config, "sweep spec (axis/values/seeds/base)")
      ->required();
  sweep->add_option("--out", sweep_out, "output directory")->capture_default_str();
  sweep->add_option("--seed", sweep_seed, "run only this seed");
  sweep->add_flag("--force", sweep_force, "overwrite existing report files");

  std::uint64_t grad_seed = 42;
  bool grad_fault = false;
  CLI::App* grad =
      app.add_subcommand("gradcheck", "finite-difference oracles for every gradient");
  grad->add_option("--seed", grad_seed, "instance seed")->capture_default_str();
  grad->add_flag("--fault", grad_fault,
                 "inject a sign error into one backward pass (must FAIL)");

  std::string mem_bank;
  std::uint64_t mem_seed = 42;
  CLI::App* mem = app.add_subcommand(
      "memcheck", "byte-budget audit: synthetic drive or an existing bank file");
  mem->add_option("bank", mem_bank, "bank file to audit (default: synthetic drive)");
  mem->add_option("--seed", mem_seed, "synthetic drive seed")->capture_default_str();

  std::string dump_bank;
  CLI::App* dump = app.add_subcommand("dump", "print a bank file as text");
  dump->add_option("bank", dump_bank, "bank file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);  // prints the diagnostic
    return 2;     // usage errors are exit 2 by contract
  }

  try {
    if (run->parsed()) return cmd_run(run_config, run_out, run_seed, run_force);
    if (sweep->parsed()) return cmd_sweep(sweep_config, sweep_out, sweep_seed, sweep_force);
    if (grad->parsed()) return cmd_gradcheck(grad_seed, grad_fault);
    if (mem->parsed()) return cmd_memcheck(mem_bank, mem_seed);
    if (dump->parsed()) return cmd_dump(dump_bank);
  } catch (const ahc::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
