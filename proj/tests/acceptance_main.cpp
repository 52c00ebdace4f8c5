// Acceptance gate. `--properties` runs the fast property/oracle suites
// (criteria 1-8); `--experiments` runs the desk-scale twin experiments
// (criteria 9-13). With no flag both halves run. One PASS/FAIL line is
// printed per criterion; the exit code is 0 iff every gating criterion
// passed (criterion 13 is reported but never gates).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "bgclab/properties.hpp"
#include "bgclab/twin.hpp"

using namespace bgclab;

namespace {

struct CriterionLine {
  int id = 0;
  std::string label;
  bool pass = false;
  bool gating = true;
  std::string detail;
};

std::vector<CriterionLine> g_lines;

void emit(int id, const std::string& label, bool pass, const std::string& detail,
          bool gating = true) {
  g_lines.push_back({id, label, pass, gating, detail});
  std::printf("CRITERION %2d %-34s %s%s  %s\n", id, label.c_str(), pass ? "PASS" : "FAIL",
              gating ? "" : " (non-gating)", detail.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double series_last(const MetricsReport& rep, const std::string& kind, const std::string& name) {
  bool found = false;
  double bt = -1e300, bv = 0.0;
  for (const auto& s : rep.series)
    if (s.kind == kind && s.name == name && s.time >= bt) {
      bt = s.time;
      bv = s.value;
      found = true;
    }
  if (!found) throw std::runtime_error("missing series " + kind + "/" + name);
  return bv;
}

double series_first(const MetricsReport& rep, const std::string& kind, const std::string& name) {
  bool found = false;
  double bt = 1e300, bv = 0.0;
  for (const auto& s : rep.series)
    if (s.kind == kind && s.name == name && s.time < bt) {
      bt = s.time;
      bv = s.value;
      found = true;
    }
  if (!found) throw std::runtime_error("missing series " + kind + "/" + name);
  return bv;
}

const PdfCurve* pdf_latest(const MetricsReport& rep, const std::string& name) {
  const PdfCurve* best = nullptr;
  for (const auto& p : rep.pdfs)
    if (p.name == name && (!best || p.time >= best->time)) best = &p;
  return best;
}

double pdf_mode(const PdfCurve& p) {
  Eigen::Index i = 0;
  p.density.maxCoeff(&i);
  return p.x(i);
}

// Strict interior local maxima plus dominant endpoints, above frac * global max.
int prominent_maxima(const PdfCurve& p, double frac) {
  double top = p.density.maxCoeff();
  double thr = frac * top;
  int n = (int)p.density.size();
  int count = 0;
  for (int i = 0; i < n; ++i) {
    double d = p.density(i);
    if (d < thr) continue;
    bool up = (i == 0) || d > p.density(i - 1);
    bool down = (i == n - 1) || d > p.density(i + 1);
    if (up && down) ++count;
  }
  return count;
}

struct SeedRun {
  std::uint64_t seed = 0;
  bool ok = false;           // run completed
  bool pass = false;         // criterion checks passed
  std::string detail;
  MetricsReport rep;
};

using SeedCheck = std::vector<std::pair<std::string, bool>>;

SeedRun run_seed(int exp_id, std::uint64_t seed, double scale, const std::string& out_root,
                 SeedCheck (*check)(const MetricsReport&)) {
  SeedRun r;
  r.seed = seed;
  std::string dir = out_root + "/exp" + std::to_string(exp_id) + "_seed" + std::to_string(seed);
  try {
    ExperimentConfig cfg = experiment_defaults(exp_id);
    cfg.seed = seed;
    apply_scale(cfg, scale);
    RunResult res = run_experiment(cfg, dir);
    r.ok = true;
    r.rep = res.report;
    SeedCheck checks = check(r.rep);
    r.pass = true;
    std::string bad;
    for (const auto& [what, passed] : checks) {
      r.pass = r.pass && passed;
      if (!passed) bad += (bad.empty() ? "" : "; ") + what;
    }
    r.detail = r.pass ? fmt("seed %llu ok (%.0f s)", (unsigned long long)seed, res.wall_seconds)
                      : "seed " + std::to_string(seed) + " failed: " + bad;
    if (!r.pass) {
      std::ofstream d(dir + "/diagnostics.txt");
      d << "criterion checks for seed " << seed << "\n";
      for (const auto& [what, passed] : checks)
        d << (passed ? "  pass  " : "  FAIL  ") << what << "\n";
    }
  } catch (const std::exception& e) {
    r.ok = false;
    r.pass = false;
    r.detail = "seed " + std::to_string(seed) + " aborted: " + e.what();
    std::ofstream d(dir + "/diagnostics.txt");
    d << "run aborted: " << e.what() << "\n";
  }
  std::fprintf(stderr, "[acceptance] exp%d %s\n", exp_id, r.detail.c_str());
  return r;
}

// ---- per-experiment seed checks ------------------------------------------

SeedCheck check_exp1(const MetricsReport& rep) {
  SeedCheck c;
  double pa = series_last(rep, "presence", "alpha");
  c.emplace_back(fmt("P(alpha>0.5)=%.3f >= 0.9", pa), pa >= 0.9);
  const PdfCurve* pv = pdf_latest(rep, "ivlev");
  double mode = pv ? pdf_mode(*pv) : -1.0;
  c.emplace_back(fmt("grazing-steepness mode %.3f within 3.6+-0.5", mode),
                 pv && std::abs(mode - 3.6) <= 0.5);
  for (const char* t : {"N", "P", "Z"}) {
    double r = series_last(rep, "rmse_post", t);
    c.emplace_back(fmt("final normalized rmse(%s)=%.3f <= 0.5", t, r), r <= 0.5);
  }
  return c;
}

SeedCheck check_exp2(const MetricsReport& rep) {
  SeedCheck c;
  double pb = series_last(rep, "presence", "beta");
  c.emplace_back(fmt("P(beta<0.5)=%.3f >= 0.9", 1.0 - pb), 1.0 - pb >= 0.9);
  double dl = series_last(rep, "mean_linf_post", "D");
  c.emplace_back(fmt("final mean-detritus Linf=%.4f <= 0.02", dl), dl <= 0.02);
  const PdfCurve* pv = pdf_latest(rep, "ivlev");
  double mode = pv ? pdf_mode(*pv) : -1.0;
  c.emplace_back(fmt("grazing-steepness mode %.3f within 3.6+-0.5", mode),
                 pv && std::abs(mode - 3.6) <= 0.5);
  return c;
}

SeedCheck check_exp3(const MetricsReport& rep) {
  SeedCheck c;
  const PdfCurve* fm = pdf_latest(rep, "F_mean");
  const PdfCurve* ft = pdf_latest(rep, "F_true");
  double worst = -1.0;
  if (fm && ft && fm->x.size() == ft->x.size()) {
    worst = 0.0;
    for (Eigen::Index g = 0; g < fm->x.size(); ++g)
      if (fm->x(g) <= 0.2 + 1e-12)
        worst = std::max(worst, std::abs(fm->density(g) - ft->density(g)));
  }
  c.emplace_back(fmt("max |F_mean - F_true| on [0,0.2] = %.4f <= 0.01", worst),
                 worst >= 0.0 && worst <= 0.01);
  return c;
}

SeedCheck check_exp4(const MetricsReport& rep) {
  SeedCheck c;
  double pa = series_last(rep, "presence", "alpha");
  c.emplace_back(fmt("P(alpha<0.5)=%.3f >= 0.8", 1.0 - pa), 1.0 - pa >= 0.8);
  struct P {
    const char* name;
    double truth, lo, hi;
  };
  for (const P& p : {P{"p_mort", 0.04, 0.01, 0.08}, P{"graze_max", 0.6, 0.52, 0.72},
                     P{"z_mort", 0.14, 0.125, 0.150}}) {
    double s0 = series_first(rep, "param_std", p.name);
    double s1 = series_last(rep, "param_std", p.name);
    c.emplace_back(fmt("std(%s) %.4g -> %.4g shrink >= 50%%", p.name, s0, s1),
                   s1 <= 0.5 * s0);
    double m = series_last(rep, "param_mean", p.name);
    c.emplace_back(fmt("mean(%s)=%.4g in prior support [%g, %g]", p.name, m, p.lo, p.hi),
                   m >= p.lo && m <= p.hi);
    c.emplace_back(fmt("mean(%s)=%.4g within 25%% of %g", p.name, m, p.truth),
                   std::abs(m - p.truth) <= 0.25 * p.truth);
  }
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  bool want_props = false, want_exps = false;
  double scale = 0.5;
  int only = 0;  // nonzero: restrict the experiment section to one id
  std::string out_root = "acceptance_runs";
  for (int i = 1; i < argc; ++i) {
    std::string a = argv[i];
    if (a == "--properties") want_props = true;
    else if (a == "--experiments") want_exps = true;
    else if (a == "--scale" && i + 1 < argc) scale = std::atof(argv[++i]);
    else if (a == "--only" && i + 1 < argc) only = std::atoi(argv[++i]);
    else if (a == "--out" && i + 1 < argc) out_root = argv[++i];
    else {
      std::fprintf(stderr,
                   "usage: %s [--properties] [--experiments] [--scale f] [--only n] [--out dir]\n",
                   argv[0]);
      return 1;
    }
  }
  if (!want_props && !want_exps) want_props = want_exps = true;

  if (want_props) {
    // Suite order matches the criterion numbering.
    static const std::map<std::string, std::pair<int, std::string>> names = {
        {"conservation", {1, "nitrogen conservation"}},
        {"jacobians", {2, "analytic jacobians vs FD"}},
        {"basis_partition", {3, "hat-basis partition/reproduction"}},
        {"mixture_oracles", {4, "mixture update vs Bayes oracle"}},
        {"em_bic", {5, "EM monotonicity + BIC selection"}},
        {"do_mc_equivalence", {6, "reduced-order vs Monte Carlo"}},
        {"longrun_invariants", {7, "long-run numerical invariants"}},
        {"balanced_init", {8, "balanced equilibrium initialization"}}};
    for (const auto& r : run_property_suites()) {
      auto it = names.find(r.name);
      int id = it == names.end() ? 0 : it->second.first;
      std::string label = it == names.end() ? r.name : it->second.second;
      emit(id, label, r.pass, r.detail);
    }
  }

  if (want_exps) {
    ensure_dir(out_root);
    // Experiment 1 serves criteria 9 and 13; run all three seeds.
    if (only == 0 || only == 1) {
      std::vector<SeedRun> runs;
      for (std::uint64_t s : {1, 2, 3}) runs.push_back(run_seed(1, s, scale, out_root, check_exp1));
      int pass = 0;
      std::string det;
      for (const auto& r : runs) {
        pass += r.pass ? 1 : 0;
        det += (det.empty() ? "" : " | ") + r.detail;
      }
      emit(9, "exp1 state+structure recovery", pass >= 2, fmt("%d/3 seeds (need 2): ", pass) + det);

      int multi = 0, avail = 0;
      std::string det13;
      for (const auto& r : runs) {
        if (!r.ok) continue;
        ++avail;
        // sixth assimilation: sixth distinct posterior-pdf time
        std::vector<double> times;
        for (const auto& p : r.rep.pdfs)
          if (p.name == "ivlev" && p.time > 0.0) times.push_back(p.time);
        std::sort(times.begin(), times.end());
        times.erase(std::unique(times.begin(), times.end()), times.end());
        if (times.size() < 6) continue;
        const PdfCurve* curve = nullptr;
        for (const auto& p : r.rep.pdfs)
          if (p.name == "ivlev" && p.time == times[5]) curve = &p;
        int peaks = curve ? prominent_maxima(*curve, 0.10) : 0;
        if (peaks >= 2) ++multi;
        det13 += fmt("%sseed %llu: %d peaks", det13.empty() ? "" : "; ",
                     (unsigned long long)r.seed, peaks);
      }
      emit(13, "exp1 multimodal grazing marginal", multi >= 1,
           fmt("%d/%d seeds with >=2 prominent maxima at the sixth update: ", multi, avail) +
               det13,
           /*gating=*/false);
    }
    // Experiments 2 and 3: stop as soon as the 2-of-3 outcome is decided.
    struct ExpSpec {
      int id;
      int crit;
      const char* label;
      int need;
      SeedCheck (*check)(const MetricsReport&);
    };
    for (const ExpSpec& e :
         {ExpSpec{2, 10, "exp2 complexity selection", 2, check_exp2},
          ExpSpec{3, 11, "exp3 mortality-function recovery", 2, check_exp3},
          ExpSpec{4, 12, "exp4 joint parameter/structure", 1, check_exp4}}) {
      if (only != 0 && e.id != only) continue;
      int pass = 0, fail = 0;
      std::string det;
      for (std::uint64_t s : {1, 2, 3}) {
        if (pass >= e.need || pass + (3 - pass - fail) < e.need) break;
        SeedRun r = run_seed(e.id, s, scale, out_root, e.check);
        pass += r.pass ? 1 : 0;
        fail += r.pass ? 0 : 1;
        det += (det.empty() ? "" : " | ") + r.detail;
      }
      emit(e.crit, e.label, pass >= e.need,
           fmt("%d/%d seeds passed (need %d): ", pass, pass + fail, e.need) + det);
    }
  }

  bool all = true;
  for (const auto& l : g_lines) all = all && (l.pass || !l.gating);
  std::printf("ACCEPTANCE %s (%d criteria reported)\n", all ? "PASS" : "FAIL",
              (int)g_lines.size());
  return all ? 0 : 1;
}
