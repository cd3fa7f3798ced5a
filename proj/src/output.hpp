#pragma once

// CSV traces and JSON reports. Numbers are rendered with 17 significant
// digits so reruns diff byte for byte.

#include <json.hpp>

#include <string>
#include <vector>

namespace ngkf::app {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;

  void add(std::vector<double> row);
};

std::string format_number(double x);
std::string to_csv(const CsvTable& table);
std::string to_report_text(const nlohmann::ordered_json& report);

// Writes the file, creating parent directories.
void write_text(const std::string& path, const std::string& text);

}  // namespace ngkf::app
