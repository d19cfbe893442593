#include "ahc/report.hpp"

#include <charconv>
#include <sstream>

namespace ahc {

std::string format_double(double v) {
  // Shortest decimal that parses back to exactly v.
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

RenderedReport render_report(const ExperimentReport& report) {
  RenderedReport out;
  const std::size_t t_count = report.accuracy.num_tasks();
  const std::uint64_t seed = report.config.seed;

  {
    std::ostringstream txt;
    txt << "ahc experiment report\n";
    txt << "=====================\n\n";
    txt << "num_tasks            " << report.config.num_tasks << "\n";
    txt << "classes_per_task     " << report.config.classes_per_task << "\n";
    txt << "samples_per_class    " << report.config.samples_per_class << "\n";
    txt << "feature_dim          " << report.config.feature_dim << "\n";
    txt << "code_dim             " << report.config.code_dim << "\n";
    txt << "inner_steps          " << report.config.inner_steps << "\n";
    txt << "second_order         " << (report.config.second_order ? "true" : "false")
        << "\n";
    txt << "d_shift              " << format_double(report.config.d_shift) << "\n";
    txt << "budget_bytes         " << report.config.budget_bytes << "\n";
    txt << "epochs               " << report.config.epochs << "\n";
    txt << "seed                 " << seed << "\n\n";

    txt << "accuracy matrix (row: after task, column: evaluated task)\n";
    txt << "after";
    for (std::size_t e = 0; e < t_count; ++e) txt << "\ttask" << e;
    txt << "\n";
    for (std::size_t t = 0; t < t_count; ++t) {
      txt << t;
      for (std::size_t e = 0; e < report.accuracy.columns[t].size(); ++e) {
        txt << "\t" << format_double(report.accuracy.columns[t][e]);
      }
      txt << "\n";
    }
    txt << "\n";

    txt << "final_accuracies    ";
    for (double a : report.final_accuracies) txt << " " << format_double(a);
    txt << "\n";
    txt << "mean_final_accuracy  " << format_double(report.mean_final_accuracy) << "\n";
    txt << "forgetting           "
        << (report.forgetting ? format_double(*report.forgetting) : "n/a (single task)")
        << "\n";
    txt << "bank_records         ";
    for (std::size_t n : report.bank_records_after_task) txt << " " << n;
    txt << "\n";
    txt << "peak_memory_bytes    " << report.peak_memory_bytes << "\n";
    txt << "final_memory_bytes   " << report.final_memory_bytes << "\n";
    out.report_txt = txt.str();
  }

  {
    std::ostringstream csv;
    csv << "seed,task,metric,value\n";
    for (std::size_t t = 0; t < t_count; ++t) {
      for (std::size_t e = 0; e < report.accuracy.columns[t].size(); ++e) {
        csv << seed << "," << t << ",acc_task_" << e << ","
            << format_double(report.accuracy.columns[t][e]) << "\n";
      }
    }
    for (std::size_t t = 0; t < report.bank_records_after_task.size(); ++t) {
      csv << seed << "," << t << ",bank_records," << report.bank_records_after_task[t]
          << "\n";
    }
    if (t_count > 0) {
      const std::size_t last = t_count - 1;
      csv << seed << "," << last << ",mean_final_accuracy,"
          << format_double(report.mean_final_accuracy) << "\n";
      if (report.forgetting) {
        csv << seed << "," << last << ",forgetting," << format_double(*report.forgetting)
            << "\n";
      }
      csv << seed << "," << last << ",peak_memory_bytes," << report.peak_memory_bytes
          << "\n";
      csv << seed << "," << last << ",final_memory_bytes," << report.final_memory_bytes
          << "\n";
    }
    out.metrics_csv = csv.str();
  }

  {
    std::ostringstream csv;
    csv << "step,bytes\n";
    for (const auto& [step, bytes] : report.memory_trace) {
      csv << step << "," << bytes << "\n";
    }
    out.memory_trace_csv = csv.str();
  }

  {
    std::ostringstream csv;
    csv << "task,epoch,batch,task_ce,comp,replay,ewc,distill,total\n";
    for (const LossBreakdown& l : report.loss_log) {
      csv << l.task << "," << l.epoch << "," << l.batch << ","
          << format_double(l.task_ce) << "," << format_double(l.comp) << ","
          << format_double(l.replay) << "," << format_double(l.ewc) << ","
          << format_double(l.distill) << "," << format_double(l.total) << "\n";
    }
    out.loss_curve_csv = csv.str();
  }

  return out;
}

}  // namespace ahc
