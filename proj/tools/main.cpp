#include <CLI11.hpp>
#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "bgclab/properties.hpp"
#include "bgclab/twin.hpp"

namespace {

using namespace bgclab;

void write_field_layout(const std::string& dir, const GridSpec& g,
                        const std::vector<std::string>& tracers,
                        std::vector<std::string>& files) {
  std::ofstream f(dir + "/fields.info");
  f << "bgclab-fields v1\n";
  f << "layout = column-major, x index fastest (cell = i + k*nx)\n";
  f << "dtype = float64 little-endian\n";
  f << "nx = " << g.nx << "\n";
  f << "nz = " << g.nz << "\n";
  f << "dx = " << format_double(g.dx()) << "\n";
  f << "dz = " << format_double(g.dz()) << "\n";
  std::string tn;
  for (const auto& t : tracers) {
    if (!tn.empty()) tn += ", ";
    tn += t;
  }
  f << "tracers = " << tn << "\n";
  f << "conc_scale_mmolN_m3 = 30\n";
  f << "length_scale_m = 50\n";
  f << "time_scale_days = 1\n";
  files.push_back("fields.info");
}

int do_truth(const ExperimentConfig& cfg, const std::string& out_dir) {
  Domain dom = build_domain(cfg.grid, cfg.ridge);
  auto t0 = std::chrono::steady_clock::now();
  TruthTrajectory tr = generate_truth(cfg, dom);
  ensure_dir(out_dir);
  std::vector<std::string> files;
  for (std::size_t k = 0; k < tr.times.size(); ++k)
    for (std::size_t t = 0; t < tr.names.size(); ++t) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "truth_k%02d_%s.f64", (int)k, tr.names[t].c_str());
      write_f64(out_dir + "/" + buf, tr.fields[k][t].data(), (std::size_t)tr.fields[k][t].size());
      files.emplace_back(buf);
    }
  {
    std::ofstream f(out_dir + "/truth_times.csv");
    f << "index,time\n";
    for (std::size_t k = 0; k < tr.times.size(); ++k)
      f << k << "," << format_double(tr.times[k]) << "\n";
    files.push_back("truth_times.csv");
  }
  write_field_layout(out_dir, cfg.grid, tr.names, files);
  RunManifest man;
  man.seed = cfg.seed;
  man.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  man.config_echo = config_echo(cfg);
  man.config_echo.emplace_back("run.mode", "truth");
  man.files = files;
  write_manifest(man, out_dir);
  std::fprintf(stderr, "truth fields for %d times written to %s\n", (int)tr.times.size(),
               out_dir.c_str());
  return 0;
}

const char* kPlotScript = R"PY(#!/usr/bin/env python3
"""Render the standard figures from a report directory.

Usage: python3 plot_report.py [report_dir] [out_dir]
Defaults: the directory containing this script, figures next to it.
"""
import csv, os, sys
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

rep = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
out = sys.argv[2] if len(sys.argv) > 2 else rep
os.makedirs(out, exist_ok=True)

series = defaultdict(list)
with open(os.path.join(rep, "metrics.csv")) as fh:
    for row in csv.DictReader(fh):
        series[(row["kind"], row["name"])].append((float(row["time"]), float(row["value"])))

def fig_series(kinds, title, fname, logy=False):
    plt.figure(figsize=(7.5, 4.2))
    drew = False
    for (kind, name), pts in sorted(series.items()):
        if kind not in kinds:
            continue
        pts = sorted(pts)
        style = "-o" if kind.endswith("post") else "--"
        plt.plot([p[0] for p in pts], [p[1] for p in pts], style, ms=3,
                 label=f"{name} ({kind})")
        drew = True
    if not drew:
        plt.close()
        return
    if logy:
        plt.yscale("log")
    plt.xlabel("time (days)")
    plt.title(title)
    plt.grid(alpha=0.3)
    plt.legend(fontsize=7, ncol=2)
    plt.tight_layout()
    plt.savefig(os.path.join(out, fname), dpi=150)
    plt.close()

fig_series({"rmse_pre", "rmse_post"}, "normalized field/parameter RMSE", "rmse.png", logy=True)
fig_series({"presence"}, "structural presence probability", "presence.png")
fig_series({"param_mean"}, "posterior parameter means", "param_mean.png")
fig_series({"mode_var_post"}, "leading coefficient variances", "mode_var.png", logy=True)
fig_series({"filter"}, "filter diagnostics", "filter.png")

pdfs = defaultdict(list)
with open(os.path.join(rep, "pdfs.csv")) as fh:
    cur_key, xs, ds = None, None, None
    for row in csv.DictReader(fh):
        key = (row["name"], row["time"])
        if key != cur_key:
            xs, ds = [], []
            pdfs[row["name"]].append((float(row["time"]), xs, ds))
            cur_key = key
        xs.append(float(row["x"]))
        ds.append(float(row["density"]))

for name, curves in pdfs.items():
    plt.figure(figsize=(7.5, 4.2))
    for i, (t, xs, ds) in enumerate(curves):
        c = plt.cm.viridis(i / max(len(curves) - 1, 1))
        plt.plot(xs, ds, color=c, lw=1.2, label=f"t={t:g}")
    plt.xlabel(name)
    plt.ylabel("density" if not name.startswith("F_") else "transfer rate")
    plt.grid(alpha=0.3)
    if len(curves) <= 15:
        plt.legend(fontsize=7)
    plt.tight_layout()
    plt.savefig(os.path.join(out, f"pdf_{name}.png"), dpi=150)
    plt.close()

print(f"figures written to {out}")
)PY";

int do_plot(const std::string& rep_dir, const std::string& out_dir) {
  MetricsReport rep = read_report(rep_dir);
  ensure_dir(out_dir);

  // kind -> name -> time -> value, pivoted to one wide CSV per kind
  std::map<std::string, std::map<std::string, std::map<double, double>>> g;
  for (const auto& s : rep.series) g[s.kind][s.name][s.time] = s.value;
  for (const auto& [kind, names] : g) {
    std::set<double> times;
    for (const auto& [name, pts] : names)
      for (const auto& [t, v] : pts) times.insert(t);
    std::ofstream f(out_dir + "/" + kind + ".csv");
    f << "time";
    for (const auto& [name, pts] : names) f << "," << name;
    f << "\n";
    for (double t : times) {
      f << format_double(t);
      for (const auto& [name, pts] : names) {
        auto it = pts.find(t);
        f << ",";
        if (it != pts.end()) f << format_double(it->second);
      }
      f << "\n";
    }
  }
  {
    std::ofstream f(out_dir + "/plot_report.py");
    f << kPlotScript;
  }
  std::fprintf(stderr,
               "wide CSVs and plot_report.py written to %s\n"
               "render with: python3 %s/plot_report.py %s %s\n",
               out_dir.c_str(), out_dir.c_str(), rep_dir.c_str(), out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "bgclab: reduced-order uncertainty propagation and Bayesian learning of plankton "
      "reaction models in a 2-D flow over a ridge"};
  app.require_subcommand(1);

  std::string config_path, out_dir, report_dir;
  long long seed = -1;
  double scale = 0.0;
  int threads = 1;

  auto add_common = [&](CLI::App* c) {
    c->add_option("--config", config_path, "configuration file")->required();
    c->add_option("--seed", seed, "override the experiment seed");
    c->add_option("--out", out_dir, "output directory")->required();
    c->add_option("--scale", scale,
                  "uniform reduction factor for grid and sample count (default: config value)");
    c->add_option("--threads", threads,
                  "worker count (informational; the solver is single-threaded; the "
                  "BGCLAB_THREADS environment variable overrides)");
  };
  CLI::App* c_truth =
      app.add_subcommand("truth", "generate the deterministic truth run and dump its fields");
  add_common(c_truth);
  CLI::App* c_run = app.add_subcommand("run", "run a full twin experiment");
  add_common(c_run);
  CLI::App* c_verify =
      app.add_subcommand("verify", "run the fast property and oracle suites");
  CLI::App* c_plot = app.add_subcommand(
      "plot", "emit plot-ready CSV and a plotting script from a report directory");
  c_plot->add_option("--report", report_dir, "report directory produced by `run`")->required();
  c_plot->add_option("--out", out_dir, "destination for plot files (default <report>/plots)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  if (const char* env = std::getenv("BGCLAB_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) threads = n;
  }
  Eigen::setNbThreads(std::max(1, threads));

  if (c_verify->parsed()) {
    auto results = run_property_suites();
    bool all = true;
    for (const auto& r : results) {
      std::printf("%-20s %s  %s\n", r.name.c_str(), r.pass ? "PASS" : "FAIL",
                  r.detail.c_str());
      all = all && r.pass;
    }
    std::printf("%s\n", all ? "all property suites passed" : "property suite FAILURES present");
    return all ? 0 : 2;
  }

  if (c_plot->parsed()) {
    try {
      return do_plot(report_dir, out_dir.empty() ? report_dir + "/plots" : out_dir);
    } catch (const std::exception& e) {
      std::fprintf(stderr, "plot error: %s\n", e.what());
      return 1;
    }
  }

  ExperimentConfig cfg;
  try {
    cfg = config_from_file(config_path);
    if (seed >= 0) cfg.seed = (std::uint64_t)seed;
    apply_scale(cfg, scale > 0.0 ? scale : cfg.scale);
    // cheap structural checks: failures here are configuration problems and
    // must not leave partial outputs behind
    Domain dom = build_domain(cfg.grid, cfg.ridge);
    for (const auto& [x, z] : cfg.obs_locations)
      if (!make_stencil(dom, x, z))
        throw std::runtime_error("observation location (" + format_double(x) + ", " +
                                 format_double(z) + ") is not in the fluid domain");
  } catch (const std::exception& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 1;
  }

  try {
    if (c_truth->parsed()) return do_truth(cfg, out_dir);
    run_experiment(cfg, out_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "runtime failure: %s\n", e.what());
    return 2;
  }
  return 0;
}
