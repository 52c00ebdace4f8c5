#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "bgclab/bgc.hpp"

namespace bgclab {

std::string model_name(ModelId m);
ModelId parse_model(const std::string& s);
std::string param_name(ParamId p);
ParamId parse_param(const std::string& s);

// Plain-text configuration: `[section]` headers and `key = value` lines,
// '#' starts a comment. Keys are exposed as "section.key".
class Config {
 public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text, const std::string& origin = "<string>");

  bool has(const std::string& key) const { return kv_.count(key) != 0; }
  // Throwing accessors for required keys; defaulted overloads otherwise.
  std::string str(const std::string& key) const;
  std::string str(const std::string& key, const std::string& dflt) const;
  double num(const std::string& key) const;
  double num(const std::string& key, double dflt) const;
  long long integer(const std::string& key) const;
  long long integer(const std::string& key, long long dflt) const;
  bool flag(const std::string& key, bool dflt) const;

  void set(const std::string& key, const std::string& value) { kv_[key] = value; }
  const std::map<std::string, std::string>& items() const { return kv_; }

 private:
  std::map<std::string, std::string> kv_;
};

// Exact round-trip formatting for doubles (shortest representation that
// parses back to the same bits).
std::string format_double(double v);

// One scalar metric sample: kind groups a family ("rmse_post", "presence",
// "mode_var", ...), name picks the tracked quantity within it.
struct SeriesPoint {
  double time = 0.0;
  std::string kind;
  std::string name;
  double value = 0.0;
};

// One kernel-density snapshot of a parameter marginal.
struct PdfCurve {
  double time = 0.0;
  std::string name;
  Eigen::VectorXd x;
  Eigen::VectorXd density;
};

struct MetricsReport {
  int schema = 1;
  int experiment = 0;
  std::vector<SeriesPoint> series;
  std::vector<PdfCurve> pdfs;
};

// Writes metrics.csv, pdfs.csv and report.info into dir; returns the file
// names written (relative to dir). Numeric fields round-trip exactly.
std::vector<std::string> write_report(const MetricsReport& report, const std::string& dir);
MetricsReport read_report(const std::string& dir);

// Raw little-endian 64-bit float block.
void write_f64(const std::string& path, const double* data, std::size_t n);
std::vector<double> read_f64(const std::string& path);

std::uint64_t fnv1a_file(const std::string& path);
std::string fnv1a_hex(std::uint64_t h);

struct RunManifest {
  std::string code_version = "bgclab 1.0";
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
  std::vector<std::pair<std::string, std::string>> config_echo;
  std::vector<std::string> files;  // relative to the output directory
};

// Writes dir/manifest.txt (config echo plus a checksummed file inventory).
void write_manifest(const RunManifest& m, const std::string& dir);

void ensure_dir(const std::string& dir);

}  // namespace bgclab
