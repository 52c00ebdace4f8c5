#include "bgclab/io.hpp"

#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace bgclab {

namespace {

const std::vector<std::pair<ModelId, std::string>>& model_table() {
  static const std::vector<std::pair<ModelId, std::string>> t = {
      {ModelId::npz, "npz"},
      {ModelId::npzd, "npzd"},
      {ModelId::nnpzd, "nnpzd"},
      {ModelId::npz_quadmort, "npz_quadmort"},
      {ModelId::npzd_unified, "npzd_unified"},
      {ModelId::nnpzd_quadmort, "nnpzd_quadmort"},
  };
  return t;
}

const std::vector<std::pair<ParamId, std::string>>& param_table() {
  static const std::vector<std::pair<ParamId, std::string>> t = {
      {ParamId::ivlev, "ivlev"},          {ParamId::p_mort, "p_mort"},
      {ParamId::z_mort, "z_mort"},        {ParamId::z_mort_quad, "z_mort_quad"},
      {ParamId::graze_max, "graze_max"},  {ParamId::remin, "remin"},
      {ParamId::nitrif, "nitrif"},        {ParamId::half_sat, "half_sat"},
      {ParamId::egestion, "egestion"},    {ParamId::nh4_inhib, "nh4_inhib"},
  };
  return t;
}

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t c = line.find(',', pos);
    if (c == std::string::npos) {
      out.push_back(line.substr(pos));
      break;
    }
    out.push_back(line.substr(pos, c - pos));
    pos = c + 1;
  }
  return out;
}

double parse_double(const std::string& s, const std::string& where) {
  // strtod rather than std::stod: the latter throws on subnormal magnitudes
  // (ERANGE), and round-tripped kernel-density tails can be that small.
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0')
    throw std::runtime_error(where + ": cannot parse number '" + s + "'");
  return v;
}

}  // namespace

std::string model_name(ModelId m) {
  for (const auto& [id, name] : model_table())
    if (id == m) return name;
  throw std::invalid_argument("unknown model id");
}

ModelId parse_model(const std::string& s) {
  for (const auto& [id, name] : model_table())
    if (name == s) return id;
  throw std::invalid_argument("unknown model name '" + s + "'");
}

std::string param_name(ParamId p) {
  for (const auto& [id, name] : param_table())
    if (id == p) return name;
  throw std::invalid_argument("unknown parameter id");
}

ParamId parse_param(const std::string& s) {
  for (const auto& [id, name] : param_table())
    if (name == s) return id;
  throw std::invalid_argument("unknown parameter name '" + s + "'");
}

Config Config::parse_string(const std::string& text, const std::string& origin) {
  Config cfg;
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                 ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                               ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::runtime_error(origin + ":" + std::to_string(lineno) + ": empty key");
    cfg.kv_[section.empty() ? key : section + "." + key] = value;
  }
  return cfg;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str(), path);
}

std::string Config::str(const std::string& key) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) throw std::runtime_error("missing required config key '" + key + "'");
  return it->second;
}
std::string Config::str(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}
double Config::num(const std::string& key) const {
  return parse_double(str(key), "config key '" + key + "'");
}
double Config::num(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : parse_double(it->second, "config key '" + key + "'");
}
long long Config::integer(const std::string& key) const {
  double v = num(key);
  long long n = (long long)v;
  if ((double)n != v)
    throw std::runtime_error("config key '" + key + "' is not an integer");
  return n;
}
long long Config::integer(const std::string& key, long long dflt) const {
  return has(key) ? integer(key) : dflt;
}
bool Config::flag(const std::string& key, bool dflt) const {
  if (!has(key)) return dflt;
  std::string v = str(key);
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw std::runtime_error("config key '" + key + "' is not a boolean: '" + v + "'");
}

std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc())
    throw std::runtime_error("format_double failed");
  return std::string(buf, p);
}

std::vector<std::string> write_report(const MetricsReport& report, const std::string& dir) {
  ensure_dir(dir);
  namespace fs = std::filesystem;

  {
    std::ofstream f(fs::path(dir) / "metrics.csv");
    f << "time,kind,name,value\n";
    for (const auto& s : report.series) {
      if (s.kind.find(',') != std::string::npos || s.name.find(',') != std::string::npos)
        throw std::invalid_argument("metric labels must not contain commas");
      f << format_double(s.time) << ',' << s.kind << ',' << s.name << ','
        << format_double(s.value) << '\n';
    }
    if (!f) throw std::runtime_error("failed writing metrics.csv");
  }
  std::size_t pdf_rows = 0;
  {
    std::ofstream f(fs::path(dir) / "pdfs.csv");
    f << "time,name,x,density\n";
    for (const auto& c : report.pdfs) {
      if (c.name.find(',') != std::string::npos)
        throw std::invalid_argument("pdf names must not contain commas");
      if (c.x.size() != c.density.size())
        throw std::invalid_argument("pdf curve with mismatched grid/density sizes");
      for (int i = 0; i < (int)c.x.size(); ++i, ++pdf_rows)
        f << format_double(c.time) << ',' << c.name << ',' << format_double(c.x(i)) << ','
          << format_double(c.density(i)) << '\n';
    }
    if (!f) throw std::runtime_error("failed writing pdfs.csv");
  }
  {
    std::ofstream f(fs::path(dir) / "report.info");
    f << "schema = " << report.schema << "\n";
    f << "experiment = " << report.experiment << "\n";
    f << "series_rows = " << report.series.size() << "\n";
    f << "pdf_rows = " << pdf_rows << "\n";
    if (!f) throw std::runtime_error("failed writing report.info");
  }
  return {"metrics.csv", "pdfs.csv", "report.info"};
}

MetricsReport read_report(const std::string& dir) {
  namespace fs = std::filesystem;
  Config info = Config::parse_file((fs::path(dir) / "report.info").string());
  MetricsReport rep;
  rep.schema = (int)info.integer("schema");
  if (rep.schema != 1)
    throw std::runtime_error("report schema version " + std::to_string(rep.schema) +
                             " not supported (expected 1)");
  rep.experiment = (int)info.integer("experiment");
  const long long want_series = info.integer("series_rows");
  const long long want_pdf = info.integer("pdf_rows");

  {
    const std::string path = (fs::path(dir) / "metrics.csv").string();
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || trim(line) != "time,kind,name,value")
      throw std::runtime_error(path + ": bad or missing header");
    int rowno = 1;
    while (std::getline(f, line)) {
      ++rowno;
      if (trim(line).empty()) continue;
      auto parts = split_csv(line);
      const std::string where = path + " row " + std::to_string(rowno);
      if (parts.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
      rep.series.push_back({parse_double(parts[0], where), parts[1], parts[2],
                            parse_double(parts[3], where)});
    }
    if ((long long)rep.series.size() != want_series)
      throw std::runtime_error(path + ": truncated series records (expected " +
                               std::to_string(want_series) + ", found " +
                               std::to_string(rep.series.size()) + ")");
  }
  {
    const std::string path = (fs::path(dir) / "pdfs.csv").string();
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(f, line) || trim(line) != "time,name,x,density")
      throw std::runtime_error(path + ": bad or missing header");
    long long rows = 0;
    int rowno = 1;
    std::vector<double> xs, ds;
    auto flush = [&](double t, const std::string& name) {
      if (xs.empty()) return;
      PdfCurve c;
      c.time = t;
      c.name = name;
      c.x = Eigen::Map<Eigen::VectorXd>(xs.data(), (Eigen::Index)xs.size());
      c.density = Eigen::Map<Eigen::VectorXd>(ds.data(), (Eigen::Index)ds.size());
      rep.pdfs.push_back(std::move(c));
      xs.clear();
      ds.clear();
    };
    double cur_t = 0.0;
    std::string cur_name;
    while (std::getline(f, line)) {
      ++rowno;
      if (trim(line).empty()) continue;
      auto parts = split_csv(line);
      const std::string where = path + " row " + std::to_string(rowno);
      if (parts.size() != 4) throw std::runtime_error(where + ": expected 4 fields");
      double t = parse_double(parts[0], where);
      if (xs.empty() || t != cur_t || parts[1] != cur_name) {
        flush(cur_t, cur_name);
        cur_t = t;
        cur_name = parts[1];
      }
      xs.push_back(parse_double(parts[2], where));
      ds.push_back(parse_double(parts[3], where));
      ++rows;
    }
    flush(cur_t, cur_name);
    if (rows != want_pdf)
      throw std::runtime_error(path + ": truncated pdf records (expected " +
                               std::to_string(want_pdf) + ", found " + std::to_string(rows) +
                               ")");
  }
  return rep;
}

void write_f64(const std::string& path, const double* data, std::size_t n) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  std::size_t written = std::fwrite(data, sizeof(double), n, f);
  std::fclose(f);
  if (written != n) throw std::runtime_error("short write to '" + path + "'");
}

std::vector<double> read_f64(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  std::fseek(f, 0, SEEK_END);
  long bytes = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  if (bytes < 0 || bytes % sizeof(double) != 0) {
    std::fclose(f);
    throw std::runtime_error("'" + path + "' is not a whole number of 8-byte floats");
  }
  std::vector<double> out(bytes / sizeof(double));
  std::size_t got = std::fread(out.data(), sizeof(double), out.size(), f);
  std::fclose(f);
  if (got != out.size()) throw std::runtime_error("short read from '" + path + "'");
  return out;
}

std::uint64_t fnv1a_file(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open '" + path + "' for checksum");
  std::uint64_t h = 14695981039346656037ull;
  unsigned char buf[1 << 16];
  std::size_t got;
  while ((got = std::fread(buf, 1, sizeof buf, f)) > 0)
    for (std::size_t i = 0; i < got; ++i) {
      h ^= buf[i];
      h *= 1099511628211ull;
    }
  std::fclose(f);
  return h;
}

std::string fnv1a_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", (unsigned long long)h);
  return buf;
}

void write_manifest(const RunManifest& m, const std::string& dir) {
  ensure_dir(dir);
  namespace fs = std::filesystem;
  std::ofstream f(fs::path(dir) / "manifest.txt");
  f << "bgclab-manifest v1\n";
  f << "code_version = " << m.code_version << "\n";
  f << "seed = " << m.seed << "\n";
  f << "wall_seconds = " << format_double(m.wall_seconds) << "\n";
  f << "\n[config]\n";
  for (const auto& [k, v] : m.config_echo) f << k << " = " << v << "\n";
  f << "\n[files]\n";
  for (const auto& name : m.files) {
    const std::string full = (fs::path(dir) / name).string();
    f << name << " = fnv1a:" << fnv1a_hex(fnv1a_file(full)) << "\n";
  }
  if (!f) throw std::runtime_error("failed writing manifest.txt");
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create directory '" + dir + "': " + ec.message());
}

}  // namespace bgclab
