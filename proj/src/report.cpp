#include "testdg/report.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace testdg {

using ordered_json = nlohmann::ordered_json;

void finalize_report(RunReport& report) {
  report.per_domain.clear();
  std::size_t total_correct = 0, total_samples = 0;
  for (const BatchRecord& rec : report.batches) {
    DomainErrorRow* row = nullptr;
    for (DomainErrorRow& r : report.per_domain)
      if (r.domain == rec.domain_tag) {
        row = &r;
        break;
      }
    if (!row) {
      report.per_domain.push_back(DomainErrorRow{rec.domain_tag, 0, 0, 0, 0.0});
      row = &report.per_domain.back();
    }
    row->batches += 1;
    row->samples += rec.total;
    row->correct += rec.correct;
    total_correct += rec.correct;
    total_samples += rec.total;
  }
  for (DomainErrorRow& r : report.per_domain)
    r.error = r.samples == 0 ? 0.0
                             : 1.0 - static_cast<double>(r.correct) / static_cast<double>(r.samples);
  report.mean_error =
      total_samples == 0
          ? 0.0
          : 1.0 - static_cast<double>(total_correct) / static_cast<double>(total_samples);

  DetectionStats det;
  for (const BatchRecord& rec : report.batches) {
    if (rec.truth_change) ++det.true_changes;
    if (rec.detected) ++det.detections;
    if (rec.detected && rec.truth_change) ++det.hits;
  }
  det.precision = det.detections == 0
                      ? 1.0
                      : static_cast<double>(det.hits) / static_cast<double>(det.detections);
  det.recall = det.true_changes == 0
                   ? 1.0
                   : static_cast<double>(det.hits) / static_cast<double>(det.true_changes);
  report.detection = det;

  if (report.has_generalization) {
    std::size_t g_correct = 0, g_samples = 0;
    for (const DomainErrorRow& r : report.generalization) {
      g_correct += r.correct;
      g_samples += r.samples;
    }
    report.generalization_mean_error =
        g_samples == 0 ? 0.0
                       : 1.0 - static_cast<double>(g_correct) / static_cast<double>(g_samples);
  }
}

namespace {

ordered_json domain_row_to_json(const DomainErrorRow& r) {
  ordered_json j;
  j["domain"] = r.domain;
  j["batches"] = r.batches;
  j["samples"] = r.samples;
  j["correct"] = r.correct;
  j["error"] = r.error;
  return j;
}

DomainErrorRow domain_row_from_json(const ordered_json& j) {
  DomainErrorRow r;
  r.domain = j.at("domain").get<std::string>();
  r.batches = j.at("batches").get<std::size_t>();
  r.samples = j.at("samples").get<std::size_t>();
  r.correct = j.at("correct").get<std::size_t>();
  r.error = j.at("error").get<double>();
  return r;
}

ordered_json batch_to_json(const BatchRecord& b) {
  ordered_json j;
  j["index"] = b.index;
  j["domain"] = b.domain_tag;
  j["confidence"] = b.confidence;
  j["detected"] = b.detected;
  j["truth_change"] = b.truth_change;
  j["loss_dis"] = b.loss_dis;
  j["loss_self"] = b.loss_self;
  j["loss_inv"] = b.loss_inv;
  j["loss_step2"] = b.loss_step2;
  j["proto_residual"] = b.proto_residual;
  j["selection_padded"] = b.selection_padded;
  j["proto_mmd_updated"] = b.proto_mmd_updated;
  j["proto_mmd_original"] = b.proto_mmd_original;
  j["correct"] = b.correct;
  j["total"] = b.total;
  return j;
}

BatchRecord batch_from_json(const ordered_json& j) {
  BatchRecord b;
  b.index = j.at("index").get<std::size_t>();
  b.domain_tag = j.at("domain").get<std::string>();
  b.confidence = j.at("confidence").get<double>();
  b.detected = j.at("detected").get<bool>();
  b.truth_change = j.at("truth_change").get<bool>();
  b.loss_dis = j.at("loss_dis").get<double>();
  b.loss_self = j.at("loss_self").get<double>();
  b.loss_inv = j.at("loss_inv").get<double>();
  b.loss_step2 = j.at("loss_step2").get<double>();
  b.proto_residual = j.at("proto_residual").get<double>();
  b.selection_padded = j.at("selection_padded").get<bool>();
  b.proto_mmd_updated = j.at("proto_mmd_updated").get<double>();
  b.proto_mmd_original = j.at("proto_mmd_original").get<double>();
  b.correct = j.at("correct").get<std::size_t>();
  b.total = j.at("total").get<std::size_t>();
  return b;
}

}  // namespace

std::string report_to_json_text(const RunReport& report, bool include_timings) {
  ordered_json j;
  j["schema_version"] = report.schema_version;
  j["scenario"] = report.scenario_name;
  j["baseline"] = report.baseline;
  j["seed"] = report.seed;
  j["mean_error"] = report.mean_error;
  j["per_domain"] = ordered_json::array();
  for (const DomainErrorRow& r : report.per_domain) j["per_domain"].push_back(domain_row_to_json(r));
  j["detection"] = {{"true_changes", report.detection.true_changes},
                    {"detections", report.detection.detections},
                    {"hits", report.detection.hits},
                    {"precision", report.detection.precision},
                    {"recall", report.detection.recall}};
  j["has_generalization"] = report.has_generalization;
  j["generalization"] = ordered_json::array();
  for (const DomainErrorRow& r : report.generalization)
    j["generalization"].push_back(domain_row_to_json(r));
  j["generalization_mean_error"] = report.generalization_mean_error;
  if (include_timings) j["wall_clock_seconds"] = report.wall_clock_seconds;
  j["config"] = report.config_echo.empty() ? ordered_json(nullptr)
                                           : ordered_json::parse(report.config_echo);
  j["batches"] = ordered_json::array();
  for (const BatchRecord& b : report.batches) j["batches"].push_back(batch_to_json(b));
  return j.dump(2) + "\n";
}

RunReport report_from_json_text(const std::string& text) {
  try {
    ordered_json j = ordered_json::parse(text);
    RunReport r;
    r.schema_version = j.at("schema_version").get<int>();
    r.scenario_name = j.at("scenario").get<std::string>();
    r.baseline = j.at("baseline").get<std::string>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.mean_error = j.at("mean_error").get<double>();
    for (const ordered_json& d : j.at("per_domain"))
      r.per_domain.push_back(domain_row_from_json(d));
    const ordered_json& det = j.at("detection");
    r.detection.true_changes = det.at("true_changes").get<std::size_t>();
    r.detection.detections = det.at("detections").get<std::size_t>();
    r.detection.hits = det.at("hits").get<std::size_t>();
    r.detection.precision = det.at("precision").get<double>();
    r.detection.recall = det.at("recall").get<double>();
    r.has_generalization = j.at("has_generalization").get<bool>();
    for (const ordered_json& d : j.at("generalization"))
      r.generalization.push_back(domain_row_from_json(d));
    r.generalization_mean_error = j.at("generalization_mean_error").get<double>();
    if (j.contains("wall_clock_seconds"))
      r.wall_clock_seconds = j.at("wall_clock_seconds").get<double>();
    if (!j.at("config").is_null()) r.config_echo = j.at("config").dump();
    for (const ordered_json& b : j.at("batches")) r.batches.push_back(batch_from_json(b));
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("report: ") + e.what());
  }
}

std::string report_to_csv_text(const RunReport& report) {
  std::ostringstream out;
  out << "index,domain,confidence,detected,truth_change,loss_dis,loss_self,loss_inv,"
         "loss_step2,proto_residual,selection_padded,proto_mmd_updated,proto_mmd_original,"
         "correct,total\n";
  out.precision(17);
  for (const BatchRecord& b : report.batches) {
    out << b.index << ',' << b.domain_tag << ',' << b.confidence << ',' << (b.detected ? 1 : 0)
        << ',' << (b.truth_change ? 1 : 0) << ',' << b.loss_dis << ',' << b.loss_self << ','
        << b.loss_inv << ',' << b.loss_step2 << ',' << b.proto_residual << ','
        << (b.selection_padded ? 1 : 0) << ',' << b.proto_mmd_updated << ','
        << b.proto_mmd_original << ',' << b.correct << ',' << b.total << '\n';
  }
  return out.str();
}

void emit_report(const RunReport& report, const std::string& path, ReportFormat format,
                 bool include_timings) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report file: " + path);
  out << (format == ReportFormat::json ? report_to_json_text(report, include_timings)
                                       : report_to_csv_text(report));
  if (!out) throw std::runtime_error("write failed for report file: " + path);
}

}  // namespace testdg
