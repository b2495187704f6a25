#pragma once

// Per-step metric emission: JSON lines with sorted keys, or CSV with a single
// header row. Records are also kept in memory for callers that inspect them.

#include <fstream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <variant>
#include <vector>

#include "lvt/core/error.hpp"

namespace lvt {

using MetricValue = std::variant<double, std::string>;
using MetricRecord = std::map<std::string, MetricValue>;

enum class MetricsFormat { Jsonl, Csv };

inline MetricsFormat parse_metrics_format(const std::string& s) {
  if (s == "jsonl") return MetricsFormat::Jsonl;
  if (s == "csv") return MetricsFormat::Csv;
  throw ValidationError("metrics format must be jsonl or csv, got '" + s + "'");
}

inline std::string metric_to_json_line(const MetricRecord& r) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : r) {
    if (const auto* d = std::get_if<double>(&v)) j[k] = *d;
    else j[k] = std::get<std::string>(v);
  }
  return j.dump();  // std::map-backed object: keys come out sorted
}

inline std::string csv_field(const MetricValue& v) {
  if (const auto* d = std::get_if<double>(&v)) return nlohmann::json(*d).dump();
  const auto& s = std::get<std::string>(v);
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

class MetricsSink {
 public:
  MetricsSink() = default;  // memory only
  MetricsSink(const std::string& path, MetricsFormat fmt) : fmt_(fmt) {
    out_ = std::make_unique<std::ofstream>(path, std::ios::trunc);
    if (!*out_) throw IoError("cannot open metrics file " + path);
    path_ = path;
  }

  void emit(const MetricRecord& r) {
    records_.push_back(r);
    if (!out_) return;
    if (fmt_ == MetricsFormat::Jsonl) {
      *out_ << metric_to_json_line(r) << '\n';
    } else {
      if (header_.empty()) {
        for (const auto& [k, _] : r) header_.push_back(k);
        write_csv_row(header_);
      } else if (r.size() != header_.size()) {
        throw ValidationError("metrics: CSV record schema differs from header");
      }
      std::vector<std::string> row;
      for (const auto& k : header_) {
        auto it = r.find(k);
        if (it == r.end()) throw ValidationError("metrics: CSV record missing key " + k);
        row.push_back(csv_field(it->second));
      }
      write_csv_row(row);
    }
    out_->flush();
    if (!*out_) throw IoError("metrics write failed for " + path_);
  }

  const std::vector<MetricRecord>& records() const { return records_; }

 private:
  void write_csv_row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) *out_ << (i ? "," : "") << cells[i];
    *out_ << '\n';
  }

  MetricsFormat fmt_ = MetricsFormat::Jsonl;
  std::unique_ptr<std::ofstream> out_;
  std::string path_;
  std::vector<std::string> header_;
  std::vector<MetricRecord> records_;
};

inline double metric_number(const MetricRecord& r, const std::string& key) {
  auto it = r.find(key);
  if (it == r.end()) throw ValidationError("metric record has no key " + key);
  return std::get<double>(it->second);
}

}  // namespace lvt
