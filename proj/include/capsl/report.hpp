#pragma once

// Result tables: rows are models (or metrics), columns are datasets (or
// models). Rendered either as flat key=value lines or an aligned pipe table.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "capsl/error.hpp"
#include "capsl/io.hpp"

namespace capsl {

struct MetricsReport {
  std::string task;
  std::string corner = "Metric";  // header of the row-label column
  std::vector<std::string> columns;
  std::vector<std::string> row_names;
  std::vector<std::vector<std::optional<double>>> rows;
  std::vector<std::pair<std::string, std::string>> config;
  std::optional<std::uint64_t> seed;
  bool average_column = false;
  int precision = 4;

  void add_row(std::string name, std::vector<std::optional<double>> values) {
    if (values.size() != columns.size()) throw ShapeError("report row '" + name + "' has " + std::to_string(values.size()) + " values for " +
                                                          std::to_string(columns.size()) + " columns");
    row_names.push_back(std::move(name));
    rows.push_back(std::move(values));
  }

  // Mean of the present values in row r; nullopt when the row is empty.
  std::optional<double> row_average(std::size_t r) const {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& v : rows.at(r))
      if (v) {
        sum += *v;
        ++n;
      }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
  }
};

inline std::string format_value(double v, int precision) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

namespace detail {

inline void check_report(const MetricsReport& r) {
  if (r.rows.empty()) throw ValidationError("report has no results");
  if (r.columns.empty()) throw ValidationError("report has no columns");
}

inline std::string kv_key(std::string_view s) {
  std::string out;
  for (char c : s) out += (c == ' ' || c == '=' || c == '\t') ? '_' : c;
  return out;
}

}  // namespace detail

inline std::string render_kv(const MetricsReport& r) {
  detail::check_report(r);
  std::string out;
  if (!r.task.empty()) out += "task=" + r.task + "\n";
  if (r.seed) out += "seed=" + std::to_string(*r.seed) + "\n";
  for (const auto& [k, v] : r.config) out += "config." + detail::kv_key(k) + "=" + v + "\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    for (std::size_t c = 0; c < r.columns.size(); ++c)
      if (r.rows[i][c]) out += detail::kv_key(r.row_names[i]) + "." + detail::kv_key(r.columns[c]) + "=" + format_value(*r.rows[i][c], r.precision) + "\n";
    if (r.average_column)
      if (auto a = r.row_average(i)) out += detail::kv_key(r.row_names[i]) + ".Avg=" + format_value(*a, r.precision) + "\n";
  }
  return out;
}

inline std::string render_table(const MetricsReport& r) {
  detail::check_report(r);
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{r.corner};
  header.insert(header.end(), r.columns.begin(), r.columns.end());
  if (r.average_column) header.push_back("Avg");
  cells.push_back(header);
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    std::vector<std::string> line{r.row_names[i]};
    for (const auto& v : r.rows[i]) line.push_back(v ? format_value(*v, r.precision) : "-");
    if (r.average_column) {
      const auto a = r.row_average(i);
      line.push_back(a ? format_value(*a, r.precision) : "-");
    }
    cells.push_back(std::move(line));
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& line : cells)
    for (std::size_t c = 0; c < line.size(); ++c) width[c] = std::max(width[c], line[c].size());
  auto render_line = [&](const std::vector<std::string>& line) {
    std::string s = "|";
    for (std::size_t c = 0; c < line.size(); ++c) s += " " + line[c] + std::string(width[c] - line[c].size(), ' ') + " |";
    return s + "\n";
  };
  std::string out = render_line(cells[0]);
  out += "|";
  for (auto w : width) out += std::string(w + 2, '-') + "|";
  out += "\n";
  for (std::size_t i = 1; i < cells.size(); ++i) out += render_line(cells[i]);
  return out;
}

// Key-value block, blank line, table block.
inline std::string render_report(const MetricsReport& r) { return render_kv(r) + "\n" + render_table(r); }

// Saliency AUCs of three models, used to check the table layout.
inline MetricsReport saliency_fixture() {
  MetricsReport r;
  r.task = "saliency";
  r.corner = "Metric";
  r.columns = {"SimCLR", "LGSimCLR", "LGSimCLR (Ours)"};
  r.add_row("AUC-ROC", {0.5411, 0.5195, 0.5501});
  r.add_row("AUC-PR", {0.3419, 0.3244, 0.3416});
  return r;
}

// key=value lines up to the first blank line.
inline std::vector<std::pair<std::string, std::string>> parse_kv(std::string_view text) {
  std::vector<std::pair<std::string, std::string>> out;
  const auto lines = io::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) break;
    const auto eq = lines[i].find('=');
    if (eq == std::string::npos || eq == 0) throw ParseError(i + 1, "expected key=value");
    out.emplace_back(lines[i].substr(0, eq), lines[i].substr(eq + 1));
  }
  return out;
}

}  // namespace capsl
