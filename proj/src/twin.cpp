#include "bgclab/twin.hpp"

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace bgclab {

namespace {

std::vector<std::pair<double, double>> default_locations(int n, const RidgeSpec& ridge) {
  // Sensor array in the lee of the ridge, between 2 and 6 ridge widths
  // downstream, in the upper part of the water column.
  const double x0 = ridge.center + 2.0 * ridge.width;
  const double x1 = ridge.center + 6.0 * ridge.width;
  std::vector<std::pair<double, double>> out;
  if (n == 8) {
    for (int j = 0; j < 4; ++j) {
      double x = x0 + j * (x1 - x0) / 3.0;
      out.emplace_back(x, 1.7);
      out.emplace_back(x, 1.4);
    }
  } else if (n == 9) {
    for (double x : {x0, 0.5 * (x0 + x1), x1})
      for (double z : {1.7, 1.5, 1.3}) out.emplace_back(x, z);
  } else {
    for (int j = 0; j < n; ++j) {
      double x = (n == 1) ? 0.5 * (x0 + x1) : x0 + j * (x1 - x0) / (n - 1);
      out.emplace_back(x, 1.7);
    }
  }
  return out;
}

std::vector<double> obs_times(const ExperimentConfig& cfg) {
  std::vector<double> t;
  for (int j = 0; j < 100000; ++j) {
    double tk = cfg.obs_start + j * cfg.obs_interval;
    if (tk > cfg.obs_end + 1e-9) break;
    t.push_back(tk);
  }
  if (t.empty()) throw std::runtime_error("observation schedule is empty");
  return t;
}

// True quadratic zooplankton-mortality transfer implied by the truth model
// (zero when the truth carries no such term).
bool truth_has_quadmort(ModelId m) {
  return m == ModelId::npz_quadmort || m == ModelId::nnpzd_quadmort;
}

BioParams truth_params(const ExperimentConfig& cfg) {
  BioParams p = cfg.base;
  for (const auto& [id, v] : cfg.truth.overrides) p.set(id, v);
  return p;
}

double quantile_sorted(const std::vector<double>& v, double q) {
  if (v.empty()) return 0.0;
  double pos = q * (double)(v.size() - 1);
  std::size_t lo = (std::size_t)pos;
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = pos - (double)lo;
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

std::vector<std::string> split_list(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) {
    // trim
    std::size_t a = cur.find_first_not_of(" \t");
    std::size_t b = cur.find_last_not_of(" \t");
    if (a == std::string::npos) continue;
    out.push_back(cur.substr(a, b - a + 1));
  }
  return out;
}

double to_num(const std::string& s, const std::string& what) {
  // strtod rather than std::stod so subnormal magnitudes parse instead of
  // raising ERANGE-driven out_of_range.
  const char* begin = s.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (s.empty() || end == begin || *end != '\0')
    throw std::runtime_error("malformed number '" + s + "' in " + what);
  return v;
}

}  // namespace

std::vector<Eigen::ArrayXXd> extrude_profile(const Eigen::MatrixXd& prof, const Domain& dom) {
  const GridSpec& g = dom.grid;
  std::vector<Eigen::ArrayXXd> f((std::size_t)prof.cols(), Eigen::ArrayXXd::Zero(g.nx, g.nz));
  for (int t = 0; t < prof.cols(); ++t)
    for (int k = 0; k < g.nz; ++k)
      for (int i = 0; i < g.nx; ++i)
        if (dom.is_fluid(i, k)) f[(std::size_t)t](i, k) = prof(k, t);
  return f;
}

ExperimentConfig experiment_defaults(int id) {
  ExperimentConfig cfg;
  cfg.id = id;
  switch (id) {
    case 1:
      // Quadratic-mortality presence learning in an NPZ network.
      cfg.model = ModelId::npz_quadmort;
      cfg.truth.model = ModelId::npz_quadmort;
      cfg.truth.overrides = {{ParamId::ivlev, 3.6}, {ParamId::z_mort_quad, 0.2}};
      cfg.truth.alpha = 1.0;
      cfg.prior.theta_ids = {ParamId::ivlev};
      cfg.prior.theta_range = {{3.0, 6.0}};
      cfg.prior.stochastic_alpha = true;
      cfg.n_samples = 10000;
      cfg.n_modes = 20;
      cfg.obs_tracer = 2;  // zooplankton
      cfg.obs_noise_std = 0.05;
      cfg.obs_start = 5.0;
      cfg.obs_interval = 2.0;
      cfg.obs_end = 25.0;
      cfg.obs_locations = default_locations(6, cfg.ridge);
      break;
    case 2:
      // Complexity selection between NPZ and NPZD formulations.
      cfg.model = ModelId::npzd_unified;
      cfg.truth.model = ModelId::npz;
      cfg.truth.overrides = {{ParamId::ivlev, 3.6}};
      cfg.prior.theta_ids = {ParamId::ivlev};
      cfg.prior.theta_range = {{3.0, 6.0}};
      cfg.prior.stochastic_beta = true;
      cfg.n_samples = 10000;
      cfg.n_modes = 40;
      cfg.obs_tracer = 2;
      cfg.obs_noise_std = 0.05;
      cfg.obs_start = 5.0;
      cfg.obs_interval = 2.0;
      cfg.obs_end = 25.0;
      cfg.obs_locations = default_locations(6, cfg.ridge);
      break;
    case 3:
      // Nonparametric discovery of the zooplankton-mortality law.
      cfg.model = ModelId::npz;
      cfg.base.ivlev = 3.9;
      cfg.base.egestion = 0.2;
      cfg.truth.model = ModelId::npz_quadmort;
      cfg.truth.overrides = {{ParamId::z_mort_quad, 0.2}};
      cfg.truth.alpha = 1.0;
      cfg.prior.n_gamma = 11;
      cfg.prior.basis = HatBasis{0.0, 0.3, 11};
      cfg.prior.gamma_lo = 0.0;
      cfg.prior.gamma_hi = 0.08;
      cfg.prior.gamma_smooth = 0.028;
      // Pinning F(0)=0 keeps per-sample equilibria well-posed at dark depths,
      // where any positive loss flux at Z=0 admits no non-negative root.
      cfg.prior.gamma_pin_first = true;
      cfg.n_samples = 2000;
      cfg.n_modes = 20;
      cfg.obs_tracer = 0;  // nutrient
      cfg.obs_noise_std = 0.035;
      cfg.obs_start = 1.0;
      cfg.obs_interval = 2.0;
      cfg.obs_end = 25.0;
      cfg.obs_locations = default_locations(8, cfg.ridge);
      break;
    case 4:
      // Joint parameter/structure learning in a five-component network at
      // higher Reynolds number.
      cfg.model = ModelId::nnpzd_quadmort;
      cfg.truth.model = ModelId::nnpzd;
      cfg.truth.overrides = {{ParamId::p_mort, 0.04},
                             {ParamId::z_mort, 0.14},
                             {ParamId::graze_max, 0.6},
                             {ParamId::ivlev, 1.5}};
      cfg.prior.theta_ids = {ParamId::p_mort, ParamId::z_mort, ParamId::graze_max,
                             ParamId::ivlev};
      cfg.prior.theta_range = {{0.01, 0.08}, {0.125, 0.150}, {0.52, 0.72}, {1.4, 2.2}};
      cfg.prior.stochastic_alpha = true;
      cfg.n_samples = 10000;
      cfg.n_modes = 15;
      cfg.flow.u_inlet = 172.8;
      cfg.flow.reynolds = 500.0;
      cfg.dt = 1.0 / 800.0;
      cfg.obs_tracer = 2;  // phytoplankton
      cfg.obs_noise_std = 0.04;
      cfg.obs_start = 2.0;
      cfg.obs_interval = 1.0;
      cfg.obs_end = 25.0;
      cfg.obs_locations = default_locations(9, cfg.ridge);
      break;
    default:
      throw std::runtime_error("experiment id must be 1..4");
  }
  return cfg;
}

void apply_scale(ExperimentConfig& cfg, double s) {
  if (!(s > 0.0)) throw std::runtime_error("scale must be positive");
  cfg.scale = s;
  if (s == 1.0) return;
  cfg.grid = cfg.grid.scaled(s);
  cfg.n_samples = std::max(100, (int)std::lround(cfg.n_samples * s));
}

ExperimentConfig config_from_file(const std::string& path) {
  Config c = Config::parse_file(path);
  long long id = c.integer("experiment.id");
  if (id < 1 || id > 4) throw std::runtime_error(path + ": experiment.id must be in 1..4");
  ExperimentConfig cfg = experiment_defaults((int)id);

  static const std::set<std::string> known = {
      "experiment.id",      "experiment.seed",     "experiment.scale",
      "experiment.t_end",   "experiment.dt",       "experiment.assimilate",
      "model.general",      "model.truth",         "do.n_samples",
      "do.n_modes",         "grid.nx",             "grid.nz",
      "grid.lx",            "grid.lz",             "ridge.height",
      "ridge.width",        "ridge.center",        "flow.u_inlet",
      "flow.reynolds",      "flow.cfl_max",        "obs.tracer",
      "obs.noise_std",      "obs.start",           "obs.interval",
      "obs.end",            "obs.locations",       "prior.theta",
      "prior.alpha",        "prior.beta",          "prior.gamma_nodes",
      "prior.basis_lo",     "prior.basis_hi",      "prior.gamma_lo",
      "prior.gamma_hi",     "prior.gamma_smooth",  "prior.gamma_pin_first",
      "engine.diffusivity", "engine.tvd",          "engine.rk4",
      "engine.cfl_max",     "filter.k_max",        "init.sigma_floor",
      "output.snapshot_stride"};
  for (const auto& [key, value] : c.items()) {
    (void)value;
    if (known.count(key)) continue;
    if (key.rfind("base.", 0) == 0) {
      parse_param(key.substr(5));  // throws on an unknown parameter name
      continue;
    }
    if (key.rfind("truth.", 0) == 0) {
      std::string sub = key.substr(6);
      if (sub == "alpha" || sub == "beta") continue;
      parse_param(sub);
      continue;
    }
    throw std::runtime_error(path + ": unknown configuration key '" + key + "'");
  }

  if (c.has("experiment.seed")) cfg.seed = (std::uint64_t)c.integer("experiment.seed");
  if (c.has("experiment.scale")) cfg.scale = c.num("experiment.scale");
  if (c.has("experiment.t_end")) cfg.t_end = c.num("experiment.t_end");
  if (c.has("experiment.dt")) cfg.dt = c.num("experiment.dt");
  cfg.assimilate = c.flag("experiment.assimilate", cfg.assimilate);
  if (c.has("model.general")) cfg.model = parse_model(c.str("model.general"));
  if (c.has("model.truth")) cfg.truth.model = parse_model(c.str("model.truth"));
  if (c.has("truth.alpha")) cfg.truth.alpha = c.num("truth.alpha");
  if (c.has("truth.beta")) cfg.truth.beta = c.num("truth.beta");
  for (const auto& [key, value] : c.items()) {
    (void)value;
    if (key.rfind("base.", 0) == 0) cfg.base.set(parse_param(key.substr(5)), c.num(key));
    if (key.rfind("truth.", 0) == 0) {
      std::string sub = key.substr(6);
      if (sub != "alpha" && sub != "beta")
        cfg.truth.overrides.emplace_back(parse_param(sub), c.num(key));
    }
  }
  cfg.grid.nx = (int)c.integer("grid.nx", cfg.grid.nx);
  cfg.grid.nz = (int)c.integer("grid.nz", cfg.grid.nz);
  cfg.grid.lx = c.num("grid.lx", cfg.grid.lx);
  cfg.grid.lz = c.num("grid.lz", cfg.grid.lz);
  cfg.ridge.height = c.num("ridge.height", cfg.ridge.height);
  cfg.ridge.width = c.num("ridge.width", cfg.ridge.width);
  cfg.ridge.center = c.num("ridge.center", cfg.ridge.center);
  cfg.flow.u_inlet = c.num("flow.u_inlet", cfg.flow.u_inlet);
  cfg.flow.reynolds = c.num("flow.reynolds", cfg.flow.reynolds);
  cfg.flow.cfl_max = c.num("flow.cfl_max", cfg.flow.cfl_max);
  cfg.n_samples = (int)c.integer("do.n_samples", cfg.n_samples);
  cfg.n_modes = (int)c.integer("do.n_modes", cfg.n_modes);

  if (c.has("prior.theta")) {
    cfg.prior.theta_ids.clear();
    cfg.prior.theta_range.clear();
    for (const std::string& tok : split_list(c.str("prior.theta"), ',')) {
      auto parts = split_list(tok, ':');
      if (parts.size() != 3)
        throw std::runtime_error(path + ": prior.theta entries must be name:lo:hi");
      double lo = to_num(parts[1], "prior.theta");
      double hi = to_num(parts[2], "prior.theta");
      if (!(lo < hi)) throw std::runtime_error(path + ": prior.theta needs lo < hi");
      cfg.prior.theta_ids.push_back(parse_param(parts[0]));
      cfg.prior.theta_range.emplace_back(lo, hi);
    }
  }
  cfg.prior.stochastic_alpha = c.flag("prior.alpha", cfg.prior.stochastic_alpha);
  cfg.prior.stochastic_beta = c.flag("prior.beta", cfg.prior.stochastic_beta);
  cfg.prior.n_gamma = (int)c.integer("prior.gamma_nodes", cfg.prior.n_gamma);
  cfg.prior.basis.lo = c.num("prior.basis_lo", cfg.prior.basis.lo);
  cfg.prior.basis.hi = c.num("prior.basis_hi", cfg.prior.basis.hi);
  cfg.prior.basis.n_nodes = std::max(2, cfg.prior.n_gamma);
  cfg.prior.gamma_lo = c.num("prior.gamma_lo", cfg.prior.gamma_lo);
  cfg.prior.gamma_hi = c.num("prior.gamma_hi", cfg.prior.gamma_hi);
  cfg.prior.gamma_smooth = c.num("prior.gamma_smooth", cfg.prior.gamma_smooth);
  cfg.prior.gamma_pin_first = c.flag("prior.gamma_pin_first", cfg.prior.gamma_pin_first);

  if (c.has("obs.tracer")) {
    const auto& names = tracer_names(cfg.model);
    std::string want = c.str("obs.tracer");
    auto it = std::find(names.begin(), names.end(), want);
    if (it == names.end())
      throw std::runtime_error(path + ": obs.tracer '" + want + "' is not a tracer of " +
                               model_name(cfg.model));
    cfg.obs_tracer = (int)(it - names.begin());
  }
  cfg.obs_noise_std = c.num("obs.noise_std", cfg.obs_noise_std);
  cfg.obs_start = c.num("obs.start", cfg.obs_start);
  cfg.obs_interval = c.num("obs.interval", cfg.obs_interval);
  cfg.obs_end = c.num("obs.end", cfg.obs_end);
  if (c.has("obs.locations")) {
    cfg.obs_locations.clear();
    for (const std::string& tok : split_list(c.str("obs.locations"), ',')) {
      auto parts = split_list(tok, ':');
      if (parts.size() != 2)
        throw std::runtime_error(path + ": obs.locations entries must be x:z");
      cfg.obs_locations.emplace_back(to_num(parts[0], "obs.locations"),
                                     to_num(parts[1], "obs.locations"));
    }
  }
  cfg.engine.diffusivity = c.num("engine.diffusivity", cfg.engine.diffusivity);
  cfg.engine.tvd = c.flag("engine.tvd", cfg.engine.tvd);
  cfg.engine.rk4_coeff = c.flag("engine.rk4", cfg.engine.rk4_coeff);
  cfg.engine.cfl_max = c.num("engine.cfl_max", cfg.engine.cfl_max);
  cfg.filter.k_max = (int)c.integer("filter.k_max", cfg.filter.k_max);
  cfg.sigma_floor = c.num("init.sigma_floor", cfg.sigma_floor);
  cfg.snapshot_stride = (int)c.integer("output.snapshot_stride", cfg.snapshot_stride);

  if (cfg.n_samples < 4) throw std::runtime_error(path + ": do.n_samples too small");
  if (cfg.n_modes < 1) throw std::runtime_error(path + ": do.n_modes must be positive");
  if (!(cfg.dt > 0.0) || !(cfg.t_end > 0.0))
    throw std::runtime_error(path + ": dt and t_end must be positive");
  if (cfg.obs_noise_std < 0.0) throw std::runtime_error(path + ": obs.noise_std < 0");
  if (cfg.obs_tracer < 0 || cfg.obs_tracer >= n_tracers(cfg.model))
    throw std::runtime_error(path + ": obs.tracer out of range");
  return cfg;
}

std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> e;
  auto add = [&](const std::string& k, const std::string& v) { e.emplace_back(k, v); };
  auto addn = [&](const std::string& k, double v) { add(k, format_double(v)); };
  add("experiment.id", std::to_string(cfg.id));
  add("experiment.seed", std::to_string(cfg.seed));
  addn("experiment.scale", cfg.scale);
  addn("experiment.t_end", cfg.t_end);
  addn("experiment.dt", cfg.dt);
  add("experiment.assimilate", cfg.assimilate ? "true" : "false");
  add("model.general", model_name(cfg.model));
  add("model.truth", model_name(cfg.truth.model));
  {
    std::string ov;
    for (const auto& [id, v] : cfg.truth.overrides) {
      if (!ov.empty()) ov += ", ";
      ov += param_name(id) + ":" + format_double(v);
    }
    add("truth.overrides", ov);
    addn("truth.alpha", cfg.truth.alpha);
    addn("truth.beta", cfg.truth.beta);
  }
  add("grid.nx", std::to_string(cfg.grid.nx));
  add("grid.nz", std::to_string(cfg.grid.nz));
  addn("grid.lx", cfg.grid.lx);
  addn("grid.lz", cfg.grid.lz);
  addn("ridge.height", cfg.ridge.height);
  addn("ridge.width", cfg.ridge.width);
  addn("ridge.center", cfg.ridge.center);
  addn("flow.u_inlet", cfg.flow.u_inlet);
  addn("flow.reynolds", cfg.flow.reynolds);
  add("do.n_samples", std::to_string(cfg.n_samples));
  add("do.n_modes", std::to_string(cfg.n_modes));
  {
    std::string th;
    for (std::size_t j = 0; j < cfg.prior.theta_ids.size(); ++j) {
      if (!th.empty()) th += ", ";
      th += param_name(cfg.prior.theta_ids[j]) + ":" +
            format_double(cfg.prior.theta_range[j].first) + ":" +
            format_double(cfg.prior.theta_range[j].second);
    }
    add("prior.theta", th);
    add("prior.alpha", cfg.prior.stochastic_alpha ? "true" : "false");
    add("prior.beta", cfg.prior.stochastic_beta ? "true" : "false");
    add("prior.gamma_nodes", std::to_string(cfg.prior.n_gamma));
    if (cfg.prior.n_gamma > 0) {
      addn("prior.basis_lo", cfg.prior.basis.lo);
      addn("prior.basis_hi", cfg.prior.basis.hi);
      addn("prior.gamma_lo", cfg.prior.gamma_lo);
      addn("prior.gamma_hi", cfg.prior.gamma_hi);
      addn("prior.gamma_smooth", cfg.prior.gamma_smooth);
      add("prior.gamma_pin_first", cfg.prior.gamma_pin_first ? "true" : "false");
    }
  }
  add("obs.tracer", tracer_names(cfg.model)[(std::size_t)cfg.obs_tracer]);
  addn("obs.noise_std", cfg.obs_noise_std);
  addn("obs.start", cfg.obs_start);
  addn("obs.interval", cfg.obs_interval);
  addn("obs.end", cfg.obs_end);
  {
    std::string locs;
    for (const auto& [x, z] : cfg.obs_locations) {
      if (!locs.empty()) locs += ", ";
      locs += format_double(x) + ":" + format_double(z);
    }
    add("obs.locations", locs);
  }
  addn("engine.diffusivity", cfg.engine.diffusivity);
  add("engine.tvd", cfg.engine.tvd ? "true" : "false");
  add("engine.rk4", cfg.engine.rk4_coeff ? "true" : "false");
  add("filter.k_max", std::to_string(cfg.filter.k_max));
  addn("init.sigma_floor", cfg.sigma_floor);
  return e;
}

TruthTrajectory generate_truth(const ExperimentConfig& cfg, const Domain& dom) {
  TruthTrajectory out;
  out.times = obs_times(cfg);
  out.names = tracer_names(cfg.truth.model);

  BioParams tp = truth_params(cfg);
  int na = n_alpha(cfg.truth.model), nb = n_beta(cfg.truth.model);
  std::vector<double> av((std::size_t)std::max(na, 0), cfg.truth.alpha);
  std::vector<double> bv((std::size_t)std::max(nb, 0), cfg.truth.beta);
  const double* ap = na > 0 ? av.data() : nullptr;
  const double* bp = nb > 0 ? bv.data() : nullptr;

  Rng eq_rng = Rng::substream(cfg.seed, 0x7201);
  Eigen::MatrixXd prof = equilibrium_profile(cfg.truth.model, tp, ap, bp, nullptr, nullptr,
                                             dom.grid, cfg.biomass, eq_rng, cfg.equil);
  if (prof.size() == 0)
    throw std::runtime_error("no admissible equilibrium profile for the truth parameters");
  std::vector<Eigen::ArrayXXd> tracers = extrude_profile(prof, dom);

  DOEngine eng(dom, cfg.truth.model, tp, nullptr, cfg.engine, cfg.dt);
  FlowSolver fs(dom, cfg.flow, cfg.dt);
  FlowState flow = fs.initial_state();

  long long n_steps = std::llround(cfg.t_end / cfg.dt);
  std::vector<long long> osteps(out.times.size());
  for (std::size_t k = 0; k < out.times.size(); ++k) {
    osteps[k] = std::llround(out.times[k] / cfg.dt);
    if (osteps[k] < 1 || osteps[k] > n_steps)
      throw std::runtime_error("observation time outside the simulated window");
    if (k > 0 && osteps[k] <= osteps[k - 1])
      throw std::runtime_error("observation times must be separated by at least one step");
  }

  std::size_t next = 0;
  for (long long s = 1; s <= n_steps && next < osteps.size(); ++s) {
    eng.deterministic_step(tracers, tp, ap, bp, nullptr, flow);
    fs.step(flow);
    while (next < osteps.size() && osteps[next] == s) {
      out.fields.push_back(tracers);
      ++next;
    }
  }
  if (out.fields.size() != out.times.size())
    throw std::runtime_error("truth run ended before the last observation time");

  // Express the truth in the general model's tracer slots (absent tracers
  // are identically zero there).
  const auto& gnames = tracer_names(cfg.model);
  std::vector<int> src((std::size_t)gnames.size(), -1);
  for (std::size_t g = 0; g < gnames.size(); ++g) {
    auto it = std::find(out.names.begin(), out.names.end(), gnames[g]);
    if (it != out.names.end()) src[g] = (int)(it - out.names.begin());
  }
  out.general_fields.resize(out.fields.size());
  for (std::size_t k = 0; k < out.fields.size(); ++k) {
    out.general_fields[k].reserve(gnames.size());
    for (std::size_t g = 0; g < gnames.size(); ++g)
      out.general_fields[k].push_back(src[g] >= 0
                                          ? out.fields[k][(std::size_t)src[g]]
                                          : Eigen::ArrayXXd::Zero(dom.grid.nx, dom.grid.nz));
  }
  return out;
}

ObservationBatch observe(const TruthTrajectory& truth, int k, const ExperimentConfig& cfg,
                         const Domain& dom, Rng& noise_rng) {
  if (k < 0 || (std::size_t)k >= truth.times.size())
    throw std::runtime_error("observation index out of range");
  const std::string& tname = tracer_names(cfg.model)[(std::size_t)cfg.obs_tracer];
  if (std::find(truth.names.begin(), truth.names.end(), tname) == truth.names.end())
    throw std::runtime_error("observed tracer '" + tname + "' does not exist in the truth model");
  const Eigen::ArrayXXd& field = truth.general_fields[(std::size_t)k][(std::size_t)cfg.obs_tracer];

  ObservationBatch b;
  b.time = truth.times[(std::size_t)k];
  b.tracer = cfg.obs_tracer;
  b.values.resize((Eigen::Index)cfg.obs_locations.size());
  b.noise_var = Eigen::VectorXd::Constant(
      (Eigen::Index)cfg.obs_locations.size(),
      std::max(cfg.obs_noise_std * cfg.obs_noise_std, 1e-12));
  for (std::size_t j = 0; j < cfg.obs_locations.size(); ++j) {
    auto [x, z] = cfg.obs_locations[j];
    auto st = make_stencil(dom, x, z);
    if (!st)
      throw std::runtime_error("observation location (" + format_double(x) + ", " +
                               format_double(z) + ") is not in the fluid domain");
    b.stencil.push_back(*st);
    b.values((Eigen::Index)j) =
        apply_stencil(*st, field) + cfg.obs_noise_std * noise_rng.normal();
  }
  return b;
}

Eigen::VectorXd kde_pdf(const Eigen::VectorXd& samples, const Eigen::VectorXd& grid) {
  const Eigen::Index n = samples.size();
  Eigen::VectorXd out = Eigen::VectorXd::Zero(grid.size());
  if (n == 0) return out;
  double mean = samples.mean();
  double sd = std::sqrt((samples.array() - mean).square().sum() / std::max<Eigen::Index>(n - 1, 1));
  std::vector<double> sorted(samples.data(), samples.data() + n);
  std::sort(sorted.begin(), sorted.end());
  double iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
  double spread = sd;
  if (iqr > 0.0) spread = std::min(spread, iqr / 1.34);
  double h = 0.9 * spread * std::pow((double)n, -0.2);
  if (!(h > 0.0)) h = std::max(1e-3 * std::max(std::abs(mean), 1.0), 1e-9);
  const double inv = 1.0 / (h * std::sqrt(2.0 * M_PI) * (double)n);
  for (Eigen::Index g = 0; g < grid.size(); ++g) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double u = (grid(g) - samples(i)) / h;
      acc += std::exp(-0.5 * u * u);
    }
    out(g) = inv * acc;
  }
  return out;
}

double field_rmse(const Domain& dom, const Eigen::ArrayXXd& mean,
                  const Eigen::ArrayXXd& variance, const Eigen::ArrayXXd& truth) {
  const GridSpec& g = dom.grid;
  double acc = 0.0;
  for (int k = 0; k < g.nz; ++k)
    for (int i = 0; i < g.nx; ++i)
      if (dom.is_fluid(i, k)) {
        double b = mean(i, k) - truth(i, k);
        acc += b * b + variance(i, k);
      }
  return std::sqrt(acc / dom.n_fluid);
}

namespace {

// Reference values the posterior is judged against, expressed in the general
// model's uncertain-quantity slots.
struct TruthValues {
  Eigen::VectorXd theta;
  double alpha = 0.0;
  double beta = 0.0;
  Eigen::VectorXd gamma;  // node values of the true mortality transfer
};

TruthValues truth_values(const ExperimentConfig& cfg) {
  TruthValues tv;
  BioParams tp = truth_params(cfg);
  tv.theta.resize((Eigen::Index)cfg.prior.theta_ids.size());
  for (std::size_t j = 0; j < cfg.prior.theta_ids.size(); ++j)
    tv.theta((Eigen::Index)j) = tp.get(cfg.prior.theta_ids[j]);
  bool quad = truth_has_quadmort(cfg.truth.model);
  tv.alpha = quad ? cfg.truth.alpha : 0.0;
  const auto& tn = tracer_names(cfg.truth.model);
  tv.beta = std::find(tn.begin(), tn.end(), std::string("D")) != tn.end() ? 1.0 : 0.0;
  if (n_beta(cfg.truth.model) > 0) tv.beta = cfg.truth.beta;
  if (cfg.prior.n_gamma > 0) {
    tv.gamma.resize(cfg.prior.n_gamma);
    for (int j = 0; j < cfg.prior.n_gamma; ++j) {
      double z = cfg.prior.basis.node(j);
      tv.gamma(j) = quad ? cfg.truth.alpha * tp.z_mort_quad * z * z : 0.0;
    }
  }
  return tv;
}

double sample_rmse(double mean, const Eigen::VectorXd& dev, double truth) {
  double acc = 0.0;
  for (Eigen::Index r = 0; r < dev.size(); ++r) {
    double e = mean + dev(r) - truth;
    acc += e * e;
  }
  return std::sqrt(acc / std::max<Eigen::Index>(dev.size(), 1));
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir) {
  auto wall0 = std::chrono::steady_clock::now();
  RunResult res;
  res.report.experiment = cfg.id;

  Domain dom = build_domain(cfg.grid, cfg.ridge);
  if (cfg.obs_locations.empty()) throw std::runtime_error("no observation locations configured");
  for (const auto& [x, z] : cfg.obs_locations)
    if (!make_stencil(dom, x, z))
      throw std::runtime_error("observation location (" + format_double(x) + ", " +
                               format_double(z) + ") is not in the fluid domain");

  const int nt = n_tracers(cfg.model);
  const auto& names = tracer_names(cfg.model);
  const bool expansion = cfg.prior.n_gamma > 0;
  const HatBasis* basis = expansion ? &cfg.prior.basis : nullptr;

  std::fprintf(stderr, "[exp%d] truth run (%s, %d steps)\n", cfg.id,
               model_name(cfg.truth.model).c_str(), (int)std::llround(cfg.t_end / cfg.dt));
  TruthTrajectory truth = generate_truth(cfg, dom);

  // ---- prior ensemble ------------------------------------------------
  Rng th_rng = Rng::substream(cfg.seed, 0xA1);
  Rng al_rng = Rng::substream(cfg.seed, 0xA2);
  Rng be_rng = Rng::substream(cfg.seed, 0xA3);
  Rng ga_rng = Rng::substream(cfg.seed, 0xA4);
  Rng eq_rng = Rng::substream(cfg.seed, 0xA5);
  Rng ob_rng = Rng::substream(cfg.seed, 0xA6);
  Rng fi_rng = Rng::substream(cfg.seed, 0xA7);

  const int nr = cfg.n_samples;
  const int nth = (int)cfg.prior.theta_ids.size();
  const int na = n_alpha(cfg.model);
  const int nb = n_beta(cfg.model);
  Eigen::MatrixXd TH(nr, nth), AL(nr, na), BE(nr, nb), GA(nr, expansion ? cfg.prior.n_gamma : 0);

  std::fprintf(stderr, "[exp%d] sampling %d balanced prior members\n", cfg.id, nr);
  std::vector<std::vector<Eigen::ArrayXXd>> fields;
  fields.reserve((std::size_t)nr);
  const long long max_attempts = 2LL * nr + 100;
  long long attempts = 0;
  int rejected = 0;
  for (int r = 0; r < nr; ++r) {
    for (;;) {
      if (++attempts > max_attempts)
        throw std::runtime_error(
            "prior rejection rate exceeded one half: no dynamical balance for most draws");
      Eigen::VectorXd th(nth);
      for (int j = 0; j < nth; ++j)
        th(j) = th_rng.uniform(cfg.prior.theta_range[(std::size_t)j].first,
                               cfg.prior.theta_range[(std::size_t)j].second);
      Eigen::VectorXd al = Eigen::VectorXd::Ones(na);
      for (int j = 0; j < na && cfg.prior.stochastic_alpha; ++j)
        al(j) = sample_binary_prior(1, al_rng)(0);
      Eigen::VectorXd be = Eigen::VectorXd::Ones(nb);
      for (int j = 0; j < nb && cfg.prior.stochastic_beta; ++j)
        be(j) = sample_binary_prior(1, be_rng)(0);
      Eigen::VectorXd ga;
      if (expansion)
        ga = sample_expansion_prior(cfg.prior.basis, cfg.prior.gamma_lo, cfg.prior.gamma_hi,
                                    cfg.prior.gamma_smooth, cfg.prior.gamma_pin_first, 1, ga_rng)
                 .row(0);

      BioParams pr = cfg.base;
      for (int j = 0; j < nth; ++j) pr.set(cfg.prior.theta_ids[(std::size_t)j], th(j));
      Eigen::MatrixXd prof = equilibrium_profile(
          cfg.model, pr, na > 0 ? al.data() : nullptr, nb > 0 ? be.data() : nullptr, basis,
          expansion ? &ga : nullptr, dom.grid, cfg.biomass, eq_rng, cfg.equil);
      if (prof.size() == 0) {
        ++rejected;
        continue;
      }
      TH.row(r) = th.transpose();
      AL.row(r) = al.transpose();
      BE.row(r) = be.transpose();
      if (expansion) GA.row(r) = ga.transpose();
      fields.push_back(extrude_profile(prof, dom));
      break;
    }
    if ((r + 1) % std::max(1, nr / 10) == 0)
      std::fprintf(stderr, "[exp%d]   %d/%d members (%d rejected)\n", cfg.id, r + 1, nr, rejected);
  }
  res.rejected_samples = rejected;

  // Per-tracer spread of the initial ensemble sets the normalization scales.
  Eigen::VectorXd sigma(nt);
  for (int t = 0; t < nt; ++t) {
    double s1 = 0.0, s2 = 0.0;
    for (const auto& f : fields) {
      s1 += f[(std::size_t)t].sum();
      s2 += f[(std::size_t)t].square().sum();
    }
    double cnt = (double)nr * dom.n_fluid;
    double m = s1 / cnt;
    double var = std::max(s2 / cnt - m * m, 0.0);
    sigma(t) = std::max(std::sqrt(var), cfg.sigma_floor);
  }

  std::fprintf(stderr, "[exp%d] compressing to %d modes\n", cfg.id, cfg.n_modes);
  DOState st = init_do_from_ensemble(dom, cfg.model, fields, cfg.n_modes, sigma, &res.init_stats);
  fields.clear();
  fields.shrink_to_fit();

  ParamEnsemble pe;
  pe.theta_ids = cfg.prior.theta_ids;
  pe.theta_mean = TH.colwise().mean();
  pe.dtheta = TH.rowwise() - pe.theta_mean.transpose();
  pe.alpha_mean = AL.colwise().mean();
  pe.dalpha = AL.rowwise() - pe.alpha_mean.transpose();
  pe.beta_mean = BE.colwise().mean();
  pe.dbeta = BE.rowwise() - pe.beta_mean.transpose();
  pe.gamma_mean = GA.colwise().mean();
  pe.dgamma = GA.rowwise() - pe.gamma_mean.transpose();

  DOEngine eng(dom, cfg.model, cfg.base, basis, cfg.engine, cfg.dt);
  FlowSolver fs(dom, cfg.flow, cfg.dt);
  FlowState flow = fs.initial_state();

  // ---- metrics plumbing ----------------------------------------------
  MetricsReport& rep = res.report;
  TruthValues tv = truth_values(cfg);
  std::map<std::string, double> norm;
  auto normalized = [&](const std::string& name, double raw) {
    auto it = norm.find(name);
    return it == norm.end() ? raw : raw / it->second;
  };

  struct PdfSpec {
    std::string name;
    Eigen::VectorXd grid;
    int block;  // 0 theta, 1 alpha, 2 beta, 3 gamma
    int col;
  };
  std::vector<PdfSpec> pdf_specs;
  for (int j = 0; j < nth; ++j) {
    auto [lo, hi] = cfg.prior.theta_range[(std::size_t)j];
    double w = hi - lo;
    pdf_specs.push_back({param_name(cfg.prior.theta_ids[(std::size_t)j]),
                         Eigen::VectorXd::LinSpaced(161, lo - 0.2 * w, hi + 0.2 * w), 0, j});
  }
  if (cfg.prior.stochastic_alpha)
    for (int j = 0; j < na; ++j)
      pdf_specs.push_back({na == 1 ? "alpha" : "alpha" + std::to_string(j),
                           Eigen::VectorXd::LinSpaced(151, -0.25, 1.25), 1, j});
  if (cfg.prior.stochastic_beta)
    for (int j = 0; j < nb; ++j)
      pdf_specs.push_back({nb == 1 ? "beta" : "beta" + std::to_string(j),
                           Eigen::VectorXd::LinSpaced(151, -0.25, 1.25), 2, j});
  if (expansion) {
    double w = cfg.prior.gamma_hi - cfg.prior.gamma_lo;
    for (int j = 0; j < cfg.prior.n_gamma; ++j)
      pdf_specs.push_back({"gamma" + std::to_string(j),
                           Eigen::VectorXd::LinSpaced(121, cfg.prior.gamma_lo - 0.2 * w,
                                                      cfg.prior.gamma_hi + 0.2 * w),
                           3, j});
  }
  auto param_column = [&](const PdfSpec& s) -> Eigen::VectorXd {
    switch (s.block) {
      case 0: return pe.dtheta.col(s.col).array() + pe.theta_mean(s.col);
      case 1: return pe.dalpha.col(s.col).array() + pe.alpha_mean(s.col);
      case 2: return pe.dbeta.col(s.col).array() + pe.beta_mean(s.col);
      default: return pe.dgamma.col(s.col).array() + pe.gamma_mean(s.col);
    }
  };
  Eigen::VectorXd zgrid;
  if (expansion) zgrid = Eigen::VectorXd::LinSpaced(61, cfg.prior.basis.lo, cfg.prior.basis.hi);

  auto record_pdfs = [&](double time) {
    for (const auto& s : pdf_specs)
      rep.pdfs.push_back({time, s.name, s.grid, kde_pdf(param_column(s), s.grid)});
    if (expansion) {
      Eigen::VectorXd fm(zgrid.size()), ft(zgrid.size());
      BioParams tp = truth_params(cfg);
      bool quad = truth_has_quadmort(cfg.truth.model);
      for (Eigen::Index g = 0; g < zgrid.size(); ++g) {
        fm(g) = expand_f(cfg.prior.basis, pe.gamma_mean, zgrid(g), nullptr, nullptr);
        ft(g) = quad ? cfg.truth.alpha * tp.z_mort_quad * zgrid(g) * zgrid(g) : 0.0;
      }
      rep.pdfs.push_back({time, "F_mean", zgrid, fm});
      rep.pdfs.push_back({time, "F_true", zgrid, ft});
    }
  };

  auto sample_std = [](const Eigen::VectorXd& dev) {
    double m = dev.mean();
    return std::sqrt((dev.array() - m).square().sum() /
                     std::max<double>((double)dev.size() - 1.0, 1.0));
  };
  auto record_params = [&](double time, const std::string& rmse_kind) {
    for (int j = 0; j < nth; ++j) {
      std::string pn = param_name(cfg.prior.theta_ids[(std::size_t)j]);
      rep.series.push_back({time, "param_mean", pn, pe.theta_mean(j)});
      rep.series.push_back({time, "param_std", pn, sample_std(pe.dtheta.col(j))});
      rep.series.push_back({time, rmse_kind, pn,
                            sample_rmse(pe.theta_mean(j), pe.dtheta.col(j), tv.theta(j))});
    }
    if (cfg.prior.stochastic_alpha && na > 0) {
      rep.series.push_back({time, "param_mean", "alpha", pe.alpha_mean(0)});
      rep.series.push_back({time, "param_std", "alpha", sample_std(pe.dalpha.col(0))});
      rep.series.push_back({time, rmse_kind, "alpha",
                            sample_rmse(pe.alpha_mean(0), pe.dalpha.col(0), tv.alpha)});
      rep.series.push_back({time, "presence", "alpha",
                            presence_probability(pe.dalpha.col(0).array() + pe.alpha_mean(0))});
    }
    if (cfg.prior.stochastic_beta && nb > 0) {
      rep.series.push_back({time, "param_mean", "beta", pe.beta_mean(0)});
      rep.series.push_back({time, "param_std", "beta", sample_std(pe.dbeta.col(0))});
      rep.series.push_back(
          {time, rmse_kind, "beta", sample_rmse(pe.beta_mean(0), pe.dbeta.col(0), tv.beta)});
      rep.series.push_back({time, "presence", "beta",
                            presence_probability(pe.dbeta.col(0).array() + pe.beta_mean(0))});
    }
    if (expansion) {
      double acc = 0.0;
      for (int j = 0; j < cfg.prior.n_gamma; ++j) {
        double m = pe.gamma_mean(j);
        rep.series.push_back({time, "param_mean", "gamma" + std::to_string(j), m});
        rep.series.push_back({time, "param_std", "gamma" + std::to_string(j),
                              sample_std(pe.dgamma.col(j))});
        double e = sample_rmse(m, pe.dgamma.col(j), tv.gamma(j));
        acc += e * e;
      }
      rep.series.push_back({time, rmse_kind, "gamma", std::sqrt(acc / cfg.prior.n_gamma)});
    }
  };

  std::vector<Eigen::ArrayXXd> mean_f, std_f;
  auto record_fields = [&](double time, int k, const std::string& kind, bool set_norm) {
    eng.moments(st, mean_f, std_f);
    for (int t = 0; t < nt; ++t) {
      double raw = field_rmse(dom, mean_f[(std::size_t)t], std_f[(std::size_t)t].square(),
                              truth.general_fields[(std::size_t)k][(std::size_t)t]);
      if (set_norm) {
        norm[names[(std::size_t)t]] = raw > 1e-12 ? raw : 1.0;
        rep.series.push_back({time, "rmse_norm", names[(std::size_t)t],
                              norm[names[(std::size_t)t]]});
      }
      rep.series.push_back({time, kind, names[(std::size_t)t],
                            normalized(names[(std::size_t)t], raw)});
      double linf = 0.0;
      for (int kk = 0; kk < dom.grid.nz; ++kk)
        for (int i = 0; i < dom.grid.nx; ++i)
          if (dom.is_fluid(i, kk))
            linf = std::max(linf, std::abs(mean_f[(std::size_t)t](i, kk)));
      rep.series.push_back({time, kind == "rmse_pre" ? "mean_linf_pre" : "mean_linf_post",
                            names[(std::size_t)t], linf});
    }
    // leading coefficient variances, largest first
    Eigen::VectorXd cv = (st.coeff.transpose() * st.coeff).diagonal() /
                         std::max(st.n_samples - 1, 1);
    std::sort(cv.data(), cv.data() + cv.size(), std::greater<double>());
    for (int j = 0; j < std::min<int>(5, (int)cv.size()); ++j)
      rep.series.push_back({time, kind == "rmse_pre" ? "mode_var_pre" : "mode_var_post",
                            std::to_string(j + 1), cv(j)});
  };

  std::vector<std::array<double, 4>> obs_log;  // time, index, value, noise_std
  auto flush_outputs = [&](bool ok, double wall) {
    if (out_dir.empty()) return;
    ensure_dir(out_dir);
    std::vector<std::string> files = write_report(rep, out_dir);
    {
      std::ofstream ob(out_dir + "/observations.csv");
      ob << "time,index,value,noise_std\n";
      for (const auto& row : obs_log)
        ob << format_double(row[0]) << "," << (int)row[1] << "," << format_double(row[2]) << ","
           << format_double(row[3]) << "\n";
      files.push_back("observations.csv");
    }
    if (ok) {
      eng.moments(st, mean_f, std_f);
      for (int t = 0; t < nt; ++t) {
        std::string mn = "final_mean_" + names[(std::size_t)t] + ".f64";
        std::string sn = "final_std_" + names[(std::size_t)t] + ".f64";
        write_f64(out_dir + "/" + mn, mean_f[(std::size_t)t].data(),
                  (std::size_t)mean_f[(std::size_t)t].size());
        write_f64(out_dir + "/" + sn, std_f[(std::size_t)t].data(),
                  (std::size_t)std_f[(std::size_t)t].size());
        files.push_back(mn);
        files.push_back(sn);
      }
    }
    RunManifest man;
    man.seed = cfg.seed;
    man.wall_seconds = wall;
    man.config_echo = config_echo(cfg);
    man.config_echo.emplace_back("run.status", ok ? "ok" : "failed");
    man.config_echo.emplace_back("run.rejected_samples", std::to_string(res.rejected_samples));
    man.config_echo.emplace_back("run.svd_rank", std::to_string(res.init_stats.svd_rank));
    man.files = files;
    write_manifest(man, out_dir);
  };

  // Prior parameter marginals before any dynamics.
  record_pdfs(0.0);
  record_params(0.0, "rmse_pre");

  long long n_steps = std::llround(cfg.t_end / cfg.dt);
  std::vector<long long> osteps(truth.times.size());
  for (std::size_t k = 0; k < truth.times.size(); ++k)
    osteps[k] = std::llround(truth.times[k] / cfg.dt);

  std::fprintf(stderr, "[exp%d] forecast/assimilation loop: %lld steps, %d updates\n", cfg.id,
               n_steps, (int)truth.times.size());
  std::size_t next = 0;
  StepDiag acc_diag;
  long long acc_clamp = 0;
  int acc_replaced = 0, acc_recentered = 0;
  try {
    for (long long s = 1; s <= n_steps; ++s) {
      StepDiag d = eng.advance(st, pe, flow);
      acc_clamp += d.clamp_count;
      acc_replaced += d.modes_replaced;
      acc_recentered += d.recentered;
      acc_diag = d;
      fs.step(flow);
      while (next < osteps.size() && osteps[next] == s) {
        int k = (int)next;
        double tk = truth.times[next];
        bool first = norm.empty();
        record_fields(tk, k, "rmse_pre", first);
        record_params(tk, "rmse_pre");
        rep.series.push_back({tk, "engine", "cfl", acc_diag.cfl});
        rep.series.push_back({tk, "engine", "clamp_count", (double)acc_clamp});
        rep.series.push_back({tk, "engine", "modes_replaced", (double)acc_replaced});
        rep.series.push_back({tk, "engine", "recentered", (double)acc_recentered});
        acc_clamp = 0;
        acc_replaced = 0;
        acc_recentered = 0;
        if (cfg.assimilate) {
          ObservationBatch batch = observe(truth, k, cfg, dom, ob_rng);
          for (Eigen::Index j = 0; j < batch.values.size(); ++j)
            obs_log.push_back({tk, (double)j, batch.values(j), cfg.obs_noise_std});
          UpdateReport ur = assimilate(st, pe, batch, cfg.filter, fi_rng);
          res.updates.push_back(ur);
          rep.series.push_back({tk, "filter", "k_selected", (double)ur.k_selected});
          rep.series.push_back({tk, "filter", "k_effective", (double)ur.k_effective});
          rep.series.push_back({tk, "filter", "bic", ur.bic});
          rep.series.push_back({tk, "filter", "em_iterations", (double)ur.em_iterations});
          rep.series.push_back({tk, "filter", "max_weight", ur.max_weight});
          rep.series.push_back({tk, "filter", "innovation_pre", ur.innovation_pre});
          rep.series.push_back({tk, "filter", "innovation_post", ur.innovation_post});
          record_fields(tk, k, "rmse_post", false);
          record_params(tk, "rmse_post");
          record_pdfs(tk);
          if (cfg.snapshot_stride > 0 && !out_dir.empty() && k % cfg.snapshot_stride == 0) {
            ensure_dir(out_dir);
            eng.moments(st, mean_f, std_f);
            for (int t = 0; t < nt; ++t) {
              char buf[64];
              std::snprintf(buf, sizeof buf, "mean_k%02d_%s.f64", k,
                            names[(std::size_t)t].c_str());
              write_f64(out_dir + "/" + std::string(buf), mean_f[(std::size_t)t].data(),
                        (std::size_t)mean_f[(std::size_t)t].size());
            }
          }
        } else {
          record_pdfs(tk);
        }
        double z_pre = 0.0, z_post = 0.0;
        for (auto it = rep.series.rbegin(); it != rep.series.rend(); ++it) {
          if (it->time != tk) break;
          if (it->kind == "rmse_pre" && it->name == names[(std::size_t)cfg.obs_tracer])
            z_pre = it->value;
          if (it->kind == "rmse_post" && it->name == names[(std::size_t)cfg.obs_tracer])
            z_post = it->value;
        }
        std::fprintf(stderr, "[exp%d] t=%-6.4g rmse(%s) %.4f -> %.4f\n", cfg.id, tk,
                     names[(std::size_t)cfg.obs_tracer].c_str(), z_pre, z_post);
        ++next;
      }
    }
  } catch (...) {
    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
    try {
      flush_outputs(false, wall);
    } catch (...) {
    }
    throw;
  }

  res.params = pe;
  res.state = st;
  res.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
  flush_outputs(true, res.wall_seconds);
  std::fprintf(stderr, "[exp%d] done in %.1f s\n", cfg.id, res.wall_seconds);
  return res;
}

}  // namespace bgclab
