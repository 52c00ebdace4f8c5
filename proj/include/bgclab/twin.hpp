#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "bgclab/balance.hpp"
#include "bgclab/do_engine.hpp"
#include "bgclab/filter.hpp"
#include "bgclab/flow.hpp"
#include "bgclab/io.hpp"

namespace bgclab {

// Prior over the uncertain quantities of the general (learning) model.
struct PriorSpec {
  std::vector<ParamId> theta_ids;
  std::vector<std::pair<double, double>> theta_range;  // independent uniforms
  bool stochastic_alpha = false;  // {0,1} with p = 1/2
  bool stochastic_beta = false;
  int n_gamma = 0;  // mortality-expansion nodes (0: no expansion)
  HatBasis basis;
  double gamma_lo = 0.0, gamma_hi = 0.08;
  double gamma_smooth = 0.028;  // second-difference rejection bound
  bool gamma_pin_first = false;
};

// The deterministic run observations are drawn from.
struct TruthSpec {
  ModelId model = ModelId::npz;
  std::vector<std::pair<ParamId, double>> overrides;  // applied over the base
  double alpha = 0.0;  // used only when the truth model carries gated terms
  double beta = 0.0;
};

struct ExperimentConfig {
  int id = 1;
  ModelId model = ModelId::npz_quadmort;  // general model the filter learns in
  BioParams base;                         // deterministic parameter values
  TruthSpec truth;
  PriorSpec prior;
  GridSpec grid;
  RidgeSpec ridge;
  FlowConfig flow;
  double dt = 1.0 / 240.0;
  double t_end = 25.0;
  int n_samples = 10000;
  int n_modes = 20;
  BiomassProfile biomass;
  int obs_tracer = 2;  // general-model tracer index
  std::vector<std::pair<double, double>> obs_locations;  // (x, z)
  double obs_noise_std = 0.05;
  double obs_start = 5.0, obs_interval = 2.0, obs_end = 25.0;
  double sigma_floor = 1e-4;  // floor on the per-tracer normalization scales
  FilterOptions filter;
  EngineOptions engine;
  EquilibriumOptions equil;
  std::uint64_t seed = 1;
  double scale = 1.0;       // record of the applied --scale factor
  bool assimilate = true;   // false: prior-evolution control run
  int snapshot_stride = 0;  // dump mean fields every k-th assimilation (0: off)
};

// Table-driven presets for the four experiments (full-scale values).
ExperimentConfig experiment_defaults(int id);
// Preset selected by `experiment.id`, then overridden by the file's keys.
ExperimentConfig config_from_file(const std::string& path);
// Uniform reduction: grid and sample count scale, modes and physics do not.
void apply_scale(ExperimentConfig& cfg, double s);
// Fully resolved key-value echo for the run manifest.
std::vector<std::pair<std::string, std::string>> config_echo(const ExperimentConfig& cfg);

struct TruthTrajectory {
  std::vector<double> times;  // observation times
  std::vector<std::string> names;  // truth-model tracer names
  // fields[k][t]: truth tracer t at observation time k
  std::vector<std::vector<Eigen::ArrayXXd>> fields;
  // truth expressed in the general model's tracer slots (absent tracers zero)
  std::vector<std::vector<Eigen::ArrayXXd>> general_fields;
};

TruthTrajectory generate_truth(const ExperimentConfig& cfg, const Domain& dom);

// Horizontally uniform fields from a depth profile (nz x n_tracers), zero on
// solid cells.
std::vector<Eigen::ArrayXXd> extrude_profile(const Eigen::MatrixXd& prof, const Domain& dom);

// Synthesizes one observation batch from the stored truth at times[k].
ObservationBatch observe(const TruthTrajectory& truth, int k, const ExperimentConfig& cfg,
                         const Domain& dom, Rng& noise_rng);

// Gaussian-kernel density with Silverman bandwidth, evaluated on `grid`.
Eigen::VectorXd kde_pdf(const Eigen::VectorXd& samples, const Eigen::VectorXd& grid);

// sqrt((1/|D|) int E[(phi - truth)^2]) over fluid cells from the DO moments.
double field_rmse(const Domain& dom, const Eigen::ArrayXXd& mean,
                  const Eigen::ArrayXXd& variance, const Eigen::ArrayXXd& truth);

struct RunResult {
  MetricsReport report;
  std::vector<UpdateReport> updates;
  ParamEnsemble params;  // final posterior parameter ensemble
  DOState state;         // final posterior field state
  InitStats init_stats;
  int rejected_samples = 0;
  double wall_seconds = 0.0;
};

// Full twin experiment: balanced initialization, forecast-assimilate loop,
// metrics. Writes the report, snapshots, and manifest into out_dir (skipped
// when out_dir is empty); flushes a partial report if a failure interrupts
// the loop.
RunResult run_experiment(const ExperimentConfig& cfg, const std::string& out_dir);

}  // namespace bgclab
