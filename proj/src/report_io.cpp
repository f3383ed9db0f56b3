#include "gradnoise/report_io.hpp"

#include <array>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "gradnoise/errors.hpp"

namespace gradnoise {

namespace {

using nlohmann::ordered_json;

ordered_json number(double x) {
  if (std::isfinite(x)) return x;
  if (std::isnan(x)) return "nan";
  return x > 0 ? "inf" : "-inf";
}

ordered_json vector_json(const Vector& v) {
  ordered_json a = ordered_json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(number(v[i]));
  return a;
}

ordered_json report_json(const BoundReport& r) {
  ordered_json j;
  j["name"] = r.name;
  j["value"] = number(r.value);
  j["core"] = number(r.core);
  ordered_json comp = ordered_json::object();
  for (const auto& [k, v] : r.components) comp[k] = number(v);
  j["components"] = comp;
  j["config"] = {{"R", number(r.config.r)}, {"M", number(r.config.m)}, {"n", r.config.n},
                 {"b", r.config.b},         {"eta", number(r.config.eta)},
                 {"T", r.config.T},         {"g_choice", r.config.g_choice}};
  j["n_runs_used"] = r.n_runs_used;
  j["flags"] = r.flags;
  j["steps"] = r.steps;
  ordered_json terms = ordered_json::array();
  for (double t : r.per_step_terms) terms.push_back(number(t));
  j["per_step_terms"] = terms;
  ordered_json cum = ordered_json::array();
  for (double t : r.cumulative_core) cum.push_back(number(t));
  j["cumulative_core"] = cum;
  return j;
}

std::string join_flags(const std::vector<std::string>& flags) {
  std::string out;
  for (std::size_t i = 0; i < flags.size(); ++i) {
    if (i) out += ';';
    out += flags[i];
  }
  return out;
}

}  // namespace

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), x);
  return std::string(buf.data(), res.ptr);
}

std::string format_optional(const std::optional<double>& x) {
  return x ? format_double(*x) : std::string();
}

CsvTable::CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header_.size()) {
    throw InvalidInputError("CSV row has " + std::to_string(row.size()) + " fields, header has " +
                            std::to_string(header_.size()));
  }
  rows_.push_back(std::move(row));
}

std::string CsvTable::str() const {
  std::string out;
  auto emit = [&](const std::vector<std::string>& fields) {
    for (std::size_t i = 0; i < fields.size(); ++i) {
      if (i) out += ',';
      out += fields[i];
    }
    out += '\n';
  };
  emit(header_);
  for (const auto& r : rows_) emit(r);
  return out;
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << content;
  if (!out) throw ConfigError("write failed for '" + path + "'");
}

const std::vector<std::string>& trajectory_columns() {
  static const std::vector<std::string> cols = {"step",         "train_loss", "test_loss",
                                                "grad_norm_sq", "trace_c",    "dist_init",
                                                "lambda1",      "gap"};
  return cols;
}

const std::vector<std::string>& trajectory_columns_extended() {
  static const std::vector<std::string> cols = [] {
    auto c = trajectory_columns();
    for (const char* extra : {"eta", "train_acc", "test_acc", "alignment", "trace_hessian",
                              "gap_half"}) {
      c.emplace_back(extra);
    }
    return c;
  }();
  return cols;
}

CsvTable trajectory_table(const std::vector<TrajectoryRow>& rows, bool extended) {
  CsvTable table(extended ? trajectory_columns_extended() : trajectory_columns());
  for (const auto& r : rows) {
    std::vector<std::string> f = {std::to_string(r.step),     format_double(r.train_loss),
                                  format_optional(r.test_loss), format_double(r.grad_norm_sq),
                                  format_double(r.trace_c),   format_double(r.dist_init),
                                  format_optional(r.lambda1), format_optional(r.gap)};
    if (extended) {
      f.push_back(format_double(r.eta));
      f.push_back(format_optional(r.train_acc));
      f.push_back(format_optional(r.test_acc));
      f.push_back(format_optional(r.alignment));
      f.push_back(format_optional(r.trace_hessian));
      f.push_back(format_optional(r.gap_half));
    }
    table.add_row(std::move(f));
  }
  return table;
}

const std::vector<std::string>& bounds_columns() {
  static const std::vector<std::string> cols = {"name", "value", "core", "n",           "b", "eta",
                                                "T",    "R",     "M",    "n_runs_used", "flags"};
  return cols;
}

CsvTable bounds_table(const std::vector<BoundReport>& reports) {
  CsvTable table(bounds_columns());
  for (const auto& r : reports) {
    table.add_row({r.name, format_double(r.value), format_double(r.core),
                   std::to_string(r.config.n), std::to_string(r.config.b),
                   format_double(r.config.eta), std::to_string(r.config.T),
                   format_double(r.config.r), format_double(r.config.m),
                   std::to_string(r.n_runs_used), join_flags(r.flags)});
  }
  return table;
}

std::string bounds_json(const std::vector<BoundReport>& reports) {
  ordered_json a = ordered_json::array();
  for (const auto& r : reports) a.push_back(report_json(r));
  return a.dump(2) + "\n";
}

std::string weights_json(const TrajectoryRecord& record) {
  ordered_json j;
  j["mode"] = mode_name(record.mode);
  j["seed"] = record.seed;
  j["dataset_seed"] = record.dataset_seed;
  j["w0"] = vector_json(record.w0);
  j["steps"] = record.weight_steps;
  ordered_json w = ordered_json::array();
  for (const auto& v : record.weights) w.push_back(vector_json(v));
  j["weights"] = w;
  j["w_final"] = vector_json(record.w_final);
  return j.dump(2) + "\n";
}

}  // namespace gradnoise
