#pragma once

// CSV and JSON emission. Numbers use the shortest round-trip representation,
// so identical inputs give byte-identical files.

#include <optional>
#include <string>
#include <vector>

#include "gradnoise/bounds.hpp"
#include "gradnoise/dynamics.hpp"

namespace gradnoise {

std::string format_double(double x);
/// Empty string for nullopt.
std::string format_optional(const std::optional<double>& x);

class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header);

  /// Throws InvalidInputError if the row width differs from the header.
  void add_row(std::vector<std::string> row);
  std::size_t rows() const { return rows_.size(); }
  std::string str() const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Creates parent directories as needed.
void write_text_file(const std::string& path, const std::string& content);

// Column sets of the trajectory CSVs.
const std::vector<std::string>& trajectory_columns();
const std::vector<std::string>& trajectory_columns_extended();

CsvTable trajectory_table(const std::vector<TrajectoryRow>& rows, bool extended);

const std::vector<std::string>& bounds_columns();
CsvTable bounds_table(const std::vector<BoundReport>& reports);

/// JSON array of reports with name, value, core, components, config, flags and the per-step series.
std::string bounds_json(const std::vector<BoundReport>& reports);

/// JSON object holding recorded weights and their steps.
std::string weights_json(const TrajectoryRecord& record);

}  // namespace gradnoise
