#ifndef TESTDG_REPORT_HPP
#define TESTDG_REPORT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "testdg/adaptation.hpp"

namespace testdg {

struct DomainErrorRow {
  std::string domain;
  std::size_t batches = 0;
  std::size_t samples = 0;
  std::size_t correct = 0;
  double error = 0.0;  // 1 - correct / samples
};

struct DetectionStats {
  std::size_t true_changes = 0;
  std::size_t detections = 0;
  std::size_t hits = 0;  // detections landing on a true change batch
  double precision = 1.0;
  double recall = 1.0;
};

struct RunReport {
  int schema_version = 1;
  std::string scenario_name;
  std::string baseline;
  std::uint64_t seed = 0;
  std::vector<BatchRecord> batches;
  std::vector<DomainErrorRow> per_domain;  // first-appearance order
  double mean_error = 0.0;
  DetectionStats detection;
  std::vector<DomainErrorRow> generalization;  // held-out domains
  bool has_generalization = false;
  double generalization_mean_error = 0.0;
  double wall_clock_seconds = 0.0;  // excluded from the canonical dump
  std::string config_echo;          // JSON text of the effective configuration
};

// Aggregates per-domain rows, the batch-weighted mean error and detection
// precision/recall from the per-batch records (tags and truth flags must be
// filled in).
void finalize_report(RunReport& report);

enum class ReportFormat { json, csv };

// Canonical JSON (stable field order). Timings are off by default so equal
// configurations serialize byte-identically.
std::string report_to_json_text(const RunReport& report, bool include_timings = false);
// One row per batch plus a header.
std::string report_to_csv_text(const RunReport& report);

void emit_report(const RunReport& report, const std::string& path, ReportFormat format,
                 bool include_timings = false);

// Inverse of report_to_json_text, used by round-trip checks.
RunReport report_from_json_text(const std::string& text);

}  // namespace testdg

#endif
