#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "modeseg/trainer.hpp"

namespace modeseg {

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

// Shortest round-trip form; byte-stable for identical doubles.
std::string num(double v) {
  if (std::isnan(v)) return "nan";
  return nlohmann::json(v).dump();
}

nlohmann::json metrics_json(const MetricReport& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},             {"iou", m.iou},             {"dsc", m.dsc}};
}

}  // namespace

std::string record_jsonl(const RunRecord& record) {
  std::string out;
  for (const auto& e : record.epochs) {
    nlohmann::json j{{"model", record.model},
                     {"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"val_loss", e.val_loss},
                     {"val_metrics", metrics_json(e.val_metrics)},
                     {"seconds", e.seconds},
                     {"cumulative_seconds", e.cumulative_seconds}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

void write_record_jsonl(const RunRecord& record, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << record_jsonl(record);
}

void write_loss_curves_csv(const std::vector<RunRecord>& records,
                           const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model,epoch,train_loss,val_loss\n";
  for (const auto& r : records) {
    for (const auto& e : r.epochs) {
      out << r.model << ',' << e.epoch << ',' << num(e.train_loss) << ',' << num(e.val_loss) << '\n';
    }
  }
}

void write_grid_results_csv(const GridResult& result, const std::string& model,
                            const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model,index,optimizer,learning_rate,dropout,loss,status,stopped_epoch,best_epoch,seconds";
  for (const auto& n : metric_names()) out << ",val_" << n;
  out << ",selected\n";
  for (const auto& e : result.entries) {
    out << model << ',' << e.index << ',' << to_string(e.config.optimizer) << ','
        << num(e.config.learning_rate) << ',' << num(e.config.dropout) << ','
        << to_string(e.config.loss) << ',' << (e.ok ? "ok" : "failed") << ','
        << e.record.stopped_epoch << ',' << e.record.best_epoch << ','
        << num(e.record.total_seconds);
    for (double v : metric_values(e.val_metrics)) out << ',' << (e.ok ? num(v) : "nan");
    out << ',' << (result.any_ok && e.index == result.selected ? 1 : 0) << '\n';
  }
}

void write_cv_results_csv(const std::vector<CvResult>& results, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "model,metric,zone1,zone2,zone3,zone4\n";
  for (const auto& r : results) {
    for (std::size_t m = 0; m < metric_names().size(); ++m) {
      out << r.model << ',' << metric_names()[m];
      for (const auto& f : r.folds) {
        out << ',' << (f.ok ? num(metric_values(f.test_metrics)[m]) : "nan");
      }
      out << '\n';
    }
  }
}

void write_speedup_csv(const std::vector<SpeedupRow>& rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "Model,Training Epochs,Training Time (s),Speed-up\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.3f,%.3f", r.seconds, r.speedup);
    out << r.model << ',' << r.epochs << ',' << buf << '\n';
  }
}

void write_metrics_csv(const MetricReport& metrics, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << metrics_csv_header() << '\n' << metrics_csv_row(metrics) << '\n';
}

}  // namespace modeseg
