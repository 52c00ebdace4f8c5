#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bgclab/io.hpp"
#include "bgclab/twin.hpp"

using namespace bgclab;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("configuration text: sections, comments, types, and defaults") {
  Config c = Config::parse_string(
      "# leading comment\n"
      "[solver]\n"
      "tol = 2.5e-3\n"
      "iters = 42\n"
      "verbose = true\n"
      "\n"
      "[run]\n"
      "label = alpha\n",
      "<test>");
  CHECK(c.num("solver.tol") == 2.5e-3);
  CHECK(c.integer("solver.iters") == 42);
  CHECK(c.flag("solver.verbose", false));
  CHECK(c.str("run.label") == "alpha");
  CHECK(c.has("run.label"));
  CHECK(!c.has("run.missing"));
  CHECK(c.num("run.missing", 7.5) == 7.5);
  CHECK(c.integer("run.missing", -3) == -3);
  CHECK(!c.flag("run.missing", false));
  CHECK_THROWS_AS((void)c.str("run.missing"), std::runtime_error);
  CHECK_THROWS_AS((void)c.num("run.label"), std::runtime_error);  // not a number
}

TEST_CASE("shortest round-trip double formatting") {
  const double vals[] = {0.0,    0.1,  1.0 / 3.0, 158.075, 1e-300, 6.02214076e23,
                         -7.25, 1.7976931348623157e308, 4.9e-324};
  for (double v : vals) {
    // strtod instead of std::stod: the latter throws on subnormal results
    double back = std::strtod(format_double(v).c_str(), nullptr);
    CHECK(back == v);
  }
}

TEST_CASE("raw float blocks and checksums") {
  fs::remove_all("tmp_io_blocks");
  ensure_dir("tmp_io_blocks");
  std::vector<double> data = {0.0, -1.5, 1e-300, 3.141592653589793, 1.0 / 3.0};
  write_f64("tmp_io_blocks/block.f64", data.data(), data.size());
  CHECK(fs::file_size("tmp_io_blocks/block.f64") == 8 * data.size());
  std::vector<double> back = read_f64("tmp_io_blocks/block.f64");
  REQUIRE(back.size() == data.size());
  for (std::size_t i = 0; i < data.size(); ++i) CHECK(back[i] == data[i]);

  // Reference 64-bit FNV-1a computed inline.
  spit("tmp_io_blocks/abc.txt", "abc");
  std::uint64_t h = 14695981039346656037ull;
  for (char ch : std::string("abc")) {
    h ^= (unsigned char)ch;
    h *= 1099511628211ull;
  }
  CHECK(fnv1a_file("tmp_io_blocks/abc.txt") == h);
  CHECK(fnv1a_hex(h).size() == 16);
}

TEST_CASE("metric reports round-trip numerically exactly") {
  fs::remove_all("tmp_io_report");
  MetricsReport rep;
  rep.schema = 1;
  rep.experiment = 3;
  rep.series = {{0.5, "rmse_post", "N", 1.0 / 3.0},
                {1.0, "presence", "alpha", 0.9999999999999},
                {1.0, "param_mean", "ivlev", 3.6000000000000001},
                {2.5, "filter", "k_selected", 4.0}};
  PdfCurve pdf;
  pdf.time = 2.0;
  pdf.name = "ivlev";
  pdf.x = Eigen::VectorXd::LinSpaced(5, 3.0, 6.0);
  pdf.density = Eigen::VectorXd::Zero(5);
  pdf.density << 1e-17, 0.3, 0.7, 0.3, 1e-17;
  rep.pdfs = {pdf};

  write_report(rep, "tmp_io_report");
  MetricsReport back = read_report("tmp_io_report");
  CHECK(back.schema == rep.schema);
  CHECK(back.experiment == rep.experiment);
  REQUIRE(back.series.size() == rep.series.size());
  for (std::size_t i = 0; i < rep.series.size(); ++i) {
    CHECK(back.series[i].time == rep.series[i].time);
    CHECK(back.series[i].kind == rep.series[i].kind);
    CHECK(back.series[i].name == rep.series[i].name);
    CHECK(back.series[i].value == rep.series[i].value);
  }
  REQUIRE(back.pdfs.size() == 1);
  CHECK(back.pdfs[0].time == pdf.time);
  CHECK(back.pdfs[0].name == pdf.name);
  CHECK((back.pdfs[0].x - pdf.x).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.pdfs[0].density - pdf.density).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("kernel density estimate integrates to one and tracks the normal") {
  Rng rng(1);
  const int n = 10000;
  Eigen::VectorXd s(n);
  for (int i = 0; i < n; ++i) s(i) = rng.normal();
  Eigen::VectorXd grid = Eigen::VectorXd::LinSpaced(401, -5.0, 5.0);
  Eigen::VectorXd d = kde_pdf(s, grid);
  REQUIRE(d.size() == grid.size());

  double integral = 0.0, worst = 0.0;
  const double dx = grid(1) - grid(0);
  for (int i = 0; i < grid.size(); ++i) {
    integral += d(i) * dx * (i == 0 || i + 1 == grid.size() ? 0.5 : 1.0);
    double phi = std::exp(-0.5 * grid(i) * grid(i)) / std::sqrt(2.0 * M_PI);
    worst = std::max(worst, std::abs(d(i) - phi));
  }
  CHECK(integral == doctest::Approx(1.0).epsilon(0.01));
  CHECK(worst < 0.02);
}

TEST_CASE("experiment presets carry the published setups") {
  ExperimentConfig e1 = experiment_defaults(1);
  CHECK(e1.model == ModelId::npz_quadmort);
  CHECK(e1.truth.model == ModelId::npz_quadmort);
  CHECK(e1.truth.alpha == 1.0);
  bool has_ivlev = false;
  for (auto& [id, v] : e1.truth.overrides)
    if (id == ParamId::ivlev) {
      has_ivlev = true;
      CHECK(v == 3.6);
    }
  CHECK(has_ivlev);
  REQUIRE(e1.prior.theta_ids.size() == 1);
  CHECK(e1.prior.theta_ids[0] == ParamId::ivlev);
  CHECK(e1.prior.theta_range[0].first == 3.0);
  CHECK(e1.prior.theta_range[0].second == 6.0);
  CHECK(e1.prior.stochastic_alpha);
  CHECK(e1.n_samples == 10000);
  CHECK(e1.n_modes == 20);
  CHECK(e1.grid.nx == 300);
  CHECK(e1.grid.nz == 30);
  CHECK(e1.obs_tracer == 2);
  CHECK(e1.obs_noise_std == 0.05);
  CHECK(e1.obs_start == 5.0);

  ExperimentConfig e2 = experiment_defaults(2);
  CHECK(e2.model == ModelId::npzd_unified);
  CHECK(e2.truth.model == ModelId::npz);
  CHECK(e2.prior.stochastic_beta);
  CHECK(e2.n_modes == 40);

  ExperimentConfig e3 = experiment_defaults(3);
  CHECK(e3.model == ModelId::npz);
  CHECK(e3.truth.model == ModelId::npz_quadmort);
  CHECK(e3.prior.n_gamma == 11);
  CHECK(e3.prior.gamma_pin_first);
  CHECK(e3.prior.gamma_smooth == 0.028);
  CHECK(e3.base.ivlev == 3.9);
  CHECK(e3.base.egestion == 0.2);
  CHECK(e3.n_samples == 2000);
  CHECK(e3.obs_tracer == 0);
  CHECK(e3.obs_noise_std == 0.035);
  CHECK(e3.obs_start == 1.0);

  ExperimentConfig e4 = experiment_defaults(4);
  CHECK(e4.model == ModelId::nnpzd_quadmort);
  CHECK(e4.truth.model == ModelId::nnpzd);
  CHECK(e4.dt == 1.0 / 800.0);
  CHECK(e4.flow.u_inlet == 172.8);
  CHECK(e4.flow.reynolds == 500.0);
  REQUIRE(e4.prior.theta_ids.size() == 4);
  auto range_of = [&](ParamId id) {
    for (std::size_t j = 0; j < e4.prior.theta_ids.size(); ++j)
      if (e4.prior.theta_ids[j] == id) return e4.prior.theta_range[j];
    REQUIRE(false);
    return std::pair<double, double>{0, 0};
  };
  CHECK(range_of(ParamId::p_mort) == std::pair<double, double>{0.01, 0.08});
  CHECK(range_of(ParamId::z_mort) == std::pair<double, double>{0.125, 0.150});
  CHECK(range_of(ParamId::graze_max) == std::pair<double, double>{0.52, 0.72});
  CHECK(range_of(ParamId::ivlev) == std::pair<double, double>{1.4, 2.2});
  CHECK(e4.obs_tracer == 2);
  CHECK(e4.obs_noise_std == 0.04);

  CHECK_THROWS(experiment_defaults(0));
  CHECK_THROWS(experiment_defaults(5));
}

TEST_CASE("scale flag shrinks the grid and the sample count only") {
  ExperimentConfig cfg = experiment_defaults(1);
  apply_scale(cfg, 0.5);
  CHECK(cfg.grid.nx == 150);
  CHECK(cfg.grid.nz == 15);
  CHECK(cfg.n_samples == 5000);
  CHECK(cfg.n_modes == 20);       // representation size is physics, not cost
  CHECK(cfg.dt == 1.0 / 240.0);   // stability limits are unchanged
  CHECK(cfg.scale == 0.5);
  CHECK(cfg.grid.lx == 400.0);
}

TEST_CASE("config files select a preset, override keys, and reject unknowns") {
  fs::remove_all("tmp_io_cfg");
  ensure_dir("tmp_io_cfg");
  spit("tmp_io_cfg/ok.cfg",
       "[experiment]\n"
       "id = 2\n"
       "seed = 9\n"
       "t_end = 11.0\n"
       "[do]\n"
       "n_samples = 123\n"
       "[obs]\n"
       "noise_std = 0.07\n");
  ExperimentConfig cfg = config_from_file("tmp_io_cfg/ok.cfg");
  CHECK(cfg.id == 2);
  CHECK(cfg.model == ModelId::npzd_unified);  // preset survives
  CHECK(cfg.seed == 9);
  CHECK(cfg.t_end == 11.0);
  CHECK(cfg.n_samples == 123);
  CHECK(cfg.obs_noise_std == 0.07);

  spit("tmp_io_cfg/unknown.cfg", "[experiment]\nid = 1\nfrobnicate = 2\n");
  CHECK_THROWS_AS((void)config_from_file("tmp_io_cfg/unknown.cfg"), std::runtime_error);
  spit("tmp_io_cfg/badsec.cfg", "[experiment]\nid = 1\n[nonsense]\na = 1\n");
  CHECK_THROWS_AS((void)config_from_file("tmp_io_cfg/badsec.cfg"), std::runtime_error);
  spit("tmp_io_cfg/badid.cfg", "[experiment]\nid = 9\n");
  CHECK_THROWS_AS((void)config_from_file("tmp_io_cfg/badid.cfg"), std::runtime_error);
}

TEST_CASE("noise-free synthetic observations equal the interpolated truth") {
  ExperimentConfig cfg = experiment_defaults(1);
  cfg.grid.nx = 20;
  cfg.grid.nz = 6;
  cfg.obs_locations = {{50.0, 1.0}, {320.0, 0.5}};
  cfg.obs_noise_std = 0.0;
  cfg.obs_tracer = 1;
  Domain dom = build_domain(cfg.grid, cfg.ridge);

  TruthTrajectory tt;
  tt.times = {1.0};
  tt.names = tracer_names(cfg.model);
  std::vector<Eigen::ArrayXXd> fields(3);
  for (int t = 0; t < 3; ++t) {
    fields[(std::size_t)t].resize(cfg.grid.nx, cfg.grid.nz);
    for (int k = 0; k < cfg.grid.nz; ++k)
      for (int i = 0; i < cfg.grid.nx; ++i)
        fields[(std::size_t)t](i, k) = 0.2 + 0.01 * i + 0.05 * k + 0.1 * t;
  }
  tt.fields = {fields};
  tt.general_fields = {fields};

  Rng rng(8);
  ObservationBatch obs = observe(tt, 0, cfg, dom, rng);
  CHECK(obs.time == 1.0);
  CHECK(obs.tracer == 1);
  REQUIRE(obs.values.size() == 2);
  for (int j = 0; j < 2; ++j) {
    CHECK(obs.noise_var(j) == 1e-12);  // floored well below any signal scale
    CHECK(obs.values(j) == doctest::Approx(apply_stencil(obs.stencil[(std::size_t)j],
                                                         fields[1])).epsilon(1e-14));
  }
}

TEST_CASE("a full twin run is reproducible byte for byte") {
  ExperimentConfig cfg = experiment_defaults(1);
  cfg.grid.nx = 24;
  cfg.grid.nz = 6;
  cfg.n_samples = 250;
  cfg.n_modes = 6;
  cfg.t_end = 2.2;
  cfg.obs_start = 1.0;
  cfg.obs_interval = 1.0;
  cfg.obs_end = 2.0;
  cfg.seed = 77;

  fs::remove_all("tmp_twin_a");
  fs::remove_all("tmp_twin_b");
  RunResult ra = run_experiment(cfg, "tmp_twin_a");
  RunResult rb = run_experiment(cfg, "tmp_twin_b");

  CHECK(ra.updates.size() == 2);
  CHECK(ra.init_stats.svd_rank > 0);
  CHECK(slurp("tmp_twin_a/metrics.csv") == slurp("tmp_twin_b/metrics.csv"));
  CHECK(slurp("tmp_twin_a/pdfs.csv") == slurp("tmp_twin_b/pdfs.csv"));
  CHECK(slurp("tmp_twin_a/observations.csv") == slurp("tmp_twin_b/observations.csv"));
  CHECK(fs::exists("tmp_twin_a/report.info"));
  CHECK(fs::exists("tmp_twin_a/manifest.txt"));

  // The written report reads back and carries the expected metric families.
  MetricsReport rep = read_report("tmp_twin_a");
  CHECK(rep.experiment == 1);
  bool has_rmse_post = false, has_presence = false, has_param_mean = false,
       has_param_std = false;
  for (const auto& s : rep.series) {
    has_rmse_post |= s.kind == "rmse_post";
    has_presence |= s.kind == "presence" && s.name == "alpha";
    has_param_mean |= s.kind == "param_mean" && s.name == "ivlev";
    has_param_std |= s.kind == "param_std" && s.name == "ivlev";
  }
  CHECK(has_rmse_post);
  CHECK(has_presence);
  CHECK(has_param_mean);
  CHECK(has_param_std);
  bool has_ivlev_pdf = false;
  for (const auto& p : rep.pdfs) has_ivlev_pdf |= p.name == "ivlev";
  CHECK(has_ivlev_pdf);

  // Posterior parameter ensemble stays inside the prior box.
  CHECK(ra.params.theta_mean(0) >= 3.0);
  CHECK(ra.params.theta_mean(0) <= 6.0);
}
