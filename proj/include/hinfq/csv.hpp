#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace hinfq::csv {

// Shortest round-trip decimal representation of a double.
std::string format_double(double x);

std::string format_index(Eigen::Index x);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  Eigen::Index column(const std::string& name) const;  // -1 when absent
  double value(std::size_t row, Eigen::Index col) const;
};

void write_table(const std::filesystem::path& path, const Table& table);
Table read_table(const std::filesystem::path& path);

// Dense matrix as a plain CSV with generated column names c0..c{n-1}.
void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(const std::filesystem::path& path);

}  // namespace hinfq::csv
