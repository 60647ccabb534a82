#pragma once

// Width tables and CSV emission for training logs and conversion reports.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace resrep {

struct WidthRow {
  int layer_index = 0;
  std::string name;
  std::int64_t original_width = 0;
  std::int64_t final_width = 0;
};

struct WidthReport {
  std::vector<WidthRow> layers;
  std::uint64_t original_flops = 0;
  std::uint64_t final_flops = 0;
  std::optional<double> accuracy_before;
  std::optional<double> accuracy_after;

  double reduction_percent() const {
    if (original_flops == 0) return 0.0;
    return 100.0 * (1.0 - double(final_flops) / double(original_flops));
  }
};

void write_width_report_csv(const std::string& path, const WidthReport& r);
std::string format_width_report(const WidthReport& r);

/// Minimal CSV writer: a header row, then one row per call.
class CsvFile {
 public:
  CsvFile(const std::string& path, const std::vector<std::string>& columns);
  ~CsvFile();
  void row(const std::vector<std::string>& cells);
  static std::string num(double v, int precision = 6);

 private:
  struct Impl;
  Impl* impl_;
};

}  // namespace resrep
