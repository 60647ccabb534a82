#include "resrep/reports.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace resrep {

struct CsvFile::Impl {
  std::ofstream out;
};

CsvFile::CsvFile(const std::string& path, const std::vector<std::string>& columns)
    : impl_(new Impl{std::ofstream(path, std::ios::trunc)}) {
  if (!impl_->out) throw std::runtime_error("cannot open CSV for writing: " + path);
  row(columns);
}

CsvFile::~CsvFile() { delete impl_; }

void CsvFile::row(const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (i) impl_->out << ',';
    impl_->out << cells[i];
  }
  impl_->out << '\n';
  impl_->out.flush();
}

std::string CsvFile::num(double v, int precision) {
  std::ostringstream os;
  os << std::setprecision(precision) << std::fixed << v;
  return os.str();
}

void write_width_report_csv(const std::string& path, const WidthReport& r) {
  CsvFile csv(path, {"layer_index", "name", "original_width", "final_width"});
  for (const auto& row : r.layers) {
    csv.row({std::to_string(row.layer_index), row.name, std::to_string(row.original_width),
             std::to_string(row.final_width)});
  }
}

std::string format_width_report(const WidthReport& r) {
  std::ostringstream os;
  os << "target layer widths\n";
  for (const auto& row : r.layers) {
    os << "  layer " << std::setw(3) << row.layer_index << "  " << std::setw(24) << std::left
       << row.name << std::right << "  " << std::setw(4) << row.original_width << " -> "
       << std::setw(4) << row.final_width << '\n';
  }
  os << "flops original " << r.original_flops << '\n';
  os << "flops final    " << r.final_flops << '\n';
  os << "reduction      " << std::fixed << std::setprecision(2) << r.reduction_percent()
     << "%\n";
  if (r.accuracy_before) {
    os << "accuracy before conversion " << std::setprecision(4) << *r.accuracy_before << '\n';
  }
  if (r.accuracy_after) {
    os << "accuracy after conversion  " << std::setprecision(4) << *r.accuracy_after << '\n';
  }
  return os.str();
}

}  // namespace resrep
