#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <vector>

#include "bgclab/bgc.hpp"
#include "bgclab/rng.hpp"

using namespace bgclab;

namespace {

const ModelId kAll[] = {ModelId::npz,          ModelId::npzd,
                        ModelId::nnpzd,        ModelId::npz_quadmort,
                        ModelId::npzd_unified, ModelId::nnpzd_quadmort};

ReactionEval make_eval(ModelId m, int nth) {
  ReactionEval e;
  const int nt = n_tracers(m);
  e.rate.resize(nt);
  e.jac_state.resize(nt, nt);
  e.jac_theta.resize(nt, nth);
  e.jac_alpha.resize(nt, n_alpha(m));
  e.jac_beta.resize(nt, n_beta(m));
  return e;
}

}  // namespace

TEST_CASE("light-limited growth: surface value and depth decay") {
  BioParams p;
  // At the surface the non-dimensional growth rate is about 1.402/day.
  CHECK(light_limited_growth(p, 0.0) == doctest::Approx(1.402).epsilon(5e-4));

  // Saturating response: strictly below vmax, monotone decreasing with depth.
  double prev = light_limited_growth(p, 0.0);
  CHECK(prev < p.vmax);
  for (double zeta = -0.2; zeta >= -2.0; zeta -= 0.2) {
    double g = light_limited_growth(p, zeta);
    CHECK(g < prev);
    CHECK(g > 0.0);
    prev = g;
  }
  // Essentially dark at the bottom of a 100 m (non-dim 2) column.
  CHECK(light_limited_growth(p, -2.0) < 0.02);

  // Closed form: G = vmax*aI/sqrt(vmax^2 + (aI)^2).
  double aI = p.pi_slope * p.surf_irrad * std::exp(p.attenuation * -0.7);
  CHECK(light_limited_growth(p, -0.7) ==
        doctest::Approx(p.vmax * aI / std::sqrt(p.vmax * p.vmax + aI * aI)).epsilon(1e-15));
}

TEST_CASE("three-component rates match hand-written scalar formulas") {
  BioParams p;
  p.ivlev = 3.6;
  const double N = 0.41, P = 0.27, Z = 0.13, G = 0.9;
  const double phi[3] = {N, P, Z};

  const double up = G * P * N / (N + p.half_sat);
  const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
  double want[3] = {-up + p.p_mort * P + p.z_mort * Z + p.egestion * gr,
                    up - p.p_mort * P - gr,
                    (1.0 - p.egestion) * gr - p.z_mort * Z};

  double rate[3];
  reaction_rates(ModelId::npz, phi, G, p, nullptr, nullptr, rate);
  for (int j = 0; j < 3; ++j) CHECK(rate[j] == doctest::Approx(want[j]).epsilon(1e-14));

  // The gated variant adds quadratic zooplankton mortality recycled to the
  // nutrient pool; alpha = 0 must reproduce the base model exactly.
  double alpha = 0.0;
  reaction_rates(ModelId::npz_quadmort, phi, G, p, &alpha, nullptr, rate);
  for (int j = 0; j < 3; ++j) CHECK(rate[j] == doctest::Approx(want[j]).epsilon(1e-14));

  alpha = 1.0;
  const double q = p.z_mort_quad * Z * Z;
  reaction_rates(ModelId::npz_quadmort, phi, G, p, &alpha, nullptr, rate);
  CHECK(rate[0] == doctest::Approx(want[0] + q).epsilon(1e-14));
  CHECK(rate[1] == doctest::Approx(want[1]).epsilon(1e-14));
  CHECK(rate[2] == doctest::Approx(want[2] - q).epsilon(1e-14));
}

TEST_CASE("four-component rates match hand-written scalar formulas") {
  BioParams p;
  const double N = 0.35, P = 0.22, Z = 0.11, D = 0.08, G = 1.1;
  const double phi[4] = {N, P, Z, D};

  const double up = G * P * N / (N + p.half_sat);
  const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
  double want[4] = {-up + p.remin * D + p.z_mort * Z,
                    up - p.p_mort * P - gr,
                    (1.0 - p.egestion) * gr - p.z_mort * Z,
                    p.egestion * gr + p.p_mort * P - p.remin * D};

  double rate[4];
  reaction_rates(ModelId::npzd, phi, G, p, nullptr, nullptr, rate);
  for (int j = 0; j < 4; ++j) CHECK(rate[j] == doctest::Approx(want[j]).epsilon(1e-14));

  // The unified formulation interpolates the detritus routing with beta; at
  // beta = 1 it must agree with the plain four-component chain.
  double beta = 1.0;
  reaction_rates(ModelId::npzd_unified, phi, G, p, nullptr, &beta, rate);
  for (int j = 0; j < 4; ++j) CHECK(rate[j] == doctest::Approx(want[j]).epsilon(1e-14));

  // At beta = 0 dead matter (egesta + phytoplankton mortality) recycles
  // straight to the nutrient pool: the first three equations reduce to the
  // three-component chain and detritus undergoes pure remineralization decay.
  beta = 0.0;
  reaction_rates(ModelId::npzd_unified, phi, G, p, nullptr, &beta, rate);
  double npz_rate[3];
  reaction_rates(ModelId::npz, phi, G, p, nullptr, nullptr, npz_rate);
  CHECK(rate[0] == doctest::Approx(npz_rate[0] + p.remin * D).epsilon(1e-14));
  CHECK(rate[1] == doctest::Approx(npz_rate[1]).epsilon(1e-14));
  CHECK(rate[2] == doctest::Approx(npz_rate[2]).epsilon(1e-14));
  CHECK(rate[3] == doctest::Approx(-p.remin * D).epsilon(1e-14));

  // Midpoint blend: every rate is the convex combination of the two
  // endpoint models (with detritus remineralization common to both).
  beta = 0.4;
  reaction_rates(ModelId::npzd_unified, phi, G, p, nullptr, &beta, rate);
  CHECK(rate[0] == doctest::Approx(0.4 * want[0] + 0.6 * (npz_rate[0] + p.remin * D))
                       .epsilon(1e-14));
  CHECK(rate[1] == doctest::Approx(want[1]).epsilon(1e-14));
  CHECK(rate[2] == doctest::Approx(want[2]).epsilon(1e-14));
  CHECK(rate[3] == doctest::Approx(0.4 * (p.egestion * gr + p.p_mort * P) - p.remin * D)
                       .epsilon(1e-14));
}

TEST_CASE("five-component rates match hand-written scalar formulas") {
  BioParams p;
  const double NO3 = 0.3, NH4 = 0.02, P = 0.25, Z = 0.12, D = 0.07, G = 1.0;
  const double phi[5] = {NO3, NH4, P, Z, D};

  const double u3 = G * P * std::exp(-p.nh4_inhib * NH4) * NO3 / (NO3 + p.half_sat);
  const double u4 = G * P * NH4 / (NH4 + p.half_sat);
  const double gr = p.graze_max * Z * (1.0 - std::exp(-p.ivlev * P));
  double want[5] = {p.nitrif * NH4 - u3,
                    -p.nitrif * NH4 + p.remin * D + p.z_mort * Z - u4,
                    u3 + u4 - p.p_mort * P - gr,
                    (1.0 - p.egestion) * gr - p.z_mort * Z,
                    p.egestion * gr + p.p_mort * P - p.remin * D};

  double rate[5];
  reaction_rates(ModelId::nnpzd, phi, G, p, nullptr, nullptr, rate);
  for (int j = 0; j < 5; ++j) CHECK(rate[j] == doctest::Approx(want[j]).epsilon(1e-14));

  // Gated variant: quadratic mortality drains zooplankton into ammonium.
  double alpha = 1.0;
  const double q = p.z_mort_quad * Z * Z;
  reaction_rates(ModelId::nnpzd_quadmort, phi, G, p, &alpha, nullptr, rate);
  CHECK(rate[1] == doctest::Approx(want[1] + q).epsilon(1e-14));
  CHECK(rate[3] == doctest::Approx(want[3] - q).epsilon(1e-14));
  CHECK(rate[0] == doctest::Approx(want[0]).epsilon(1e-14));
  CHECK(rate[2] == doctest::Approx(want[2]).epsilon(1e-14));
  CHECK(rate[4] == doctest::Approx(want[4]).epsilon(1e-14));
}

TEST_CASE("total nitrogen source vanishes and zero state is inert") {
  Rng rng(42);
  for (ModelId m : kAll) {
    const int nt = n_tracers(m);
    std::vector<double> phi((std::size_t)nt), rate((std::size_t)nt);
    double alpha = 1.0, beta = 0.37;
    for (int it = 0; it < 50; ++it) {
      BioParams p;
      p.ivlev = rng.uniform(1.0, 6.0);
      p.graze_max = rng.uniform(0.1, 0.8);
      for (int j = 0; j < nt; ++j) phi[(std::size_t)j] = rng.uniform(0.0, 1.5);
      reaction_rates(m, phi.data(), rng.uniform(0.0, 1.5), p, &alpha, &beta, rate.data());
      double sum = 0.0, amax = 0.0;
      for (int j = 0; j < nt; ++j) {
        sum += rate[(std::size_t)j];
        amax = std::max(amax, std::abs(rate[(std::size_t)j]));
      }
      CHECK(std::abs(sum) <= 1e-12 * std::max(1.0, amax));
    }
    // Every reaction channel is proportional to some tracer, so the origin is
    // a fixed point of every closed formulation.
    std::fill(phi.begin(), phi.end(), 0.0);
    BioParams p;
    reaction_rates(m, phi.data(), 1.2, p, &alpha, &beta, rate.data());
    for (int j = 0; j < nt; ++j) CHECK(rate[(std::size_t)j] == 0.0);
  }
}

TEST_CASE("analytic jacobians agree with central differences (spot check)") {
  Rng rng(77);
  const std::vector<ParamId> th = {ParamId::ivlev, ParamId::graze_max, ParamId::z_mort,
                                   ParamId::half_sat, ParamId::egestion};
  for (ModelId m : kAll) {
    const int nt = n_tracers(m), na = n_alpha(m), nb = n_beta(m);
    ReactionEval ev = make_eval(m, (int)th.size());
    std::vector<double> phi((std::size_t)nt);
    for (int it = 0; it < 20; ++it) {
      BioParams p;
      p.ivlev = rng.uniform(1.5, 5.0);
      for (int j = 0; j < nt; ++j) phi[(std::size_t)j] = rng.uniform(0.05, 1.0);
      double alpha = rng.uniform(0.0, 1.0), beta = rng.uniform(0.0, 1.0);
      const double G = rng.uniform(0.2, 1.4);
      reaction_eval(m, phi.data(), G, p, na ? &alpha : nullptr, nb ? &beta : nullptr, th, ev);

      const double h = 1e-6;
      std::vector<double> rp((std::size_t)nt), rm((std::size_t)nt);
      for (int c = 0; c < nt; ++c) {
        auto pert = phi;
        pert[(std::size_t)c] += h;
        reaction_rates(m, pert.data(), G, p, &alpha, &beta, rp.data());
        pert[(std::size_t)c] -= 2 * h;
        reaction_rates(m, pert.data(), G, p, &alpha, &beta, rm.data());
        for (int r = 0; r < nt; ++r) {
          double fd = (rp[(std::size_t)r] - rm[(std::size_t)r]) / (2 * h);
          CHECK(ev.jac_state(r, c) == doctest::Approx(fd).epsilon(2e-6));
        }
      }
      for (int c = 0; c < (int)th.size(); ++c) {
        BioParams pp = p, pm = p;
        pp.set(th[(std::size_t)c], p.get(th[(std::size_t)c]) + h);
        pm.set(th[(std::size_t)c], p.get(th[(std::size_t)c]) - h);
        reaction_rates(m, phi.data(), G, pp, &alpha, &beta, rp.data());
        reaction_rates(m, phi.data(), G, pm, &alpha, &beta, rm.data());
        for (int r = 0; r < nt; ++r) {
          double fd = (rp[(std::size_t)r] - rm[(std::size_t)r]) / (2 * h);
          CHECK(ev.jac_theta(r, c) == doctest::Approx(fd).epsilon(2e-6));
        }
      }
      if (na) {
        double ap = alpha + h, am = alpha - h;
        reaction_rates(m, phi.data(), G, p, &ap, &beta, rp.data());
        reaction_rates(m, phi.data(), G, p, &am, &beta, rm.data());
        for (int r = 0; r < nt; ++r) {
          double fd = (rp[(std::size_t)r] - rm[(std::size_t)r]) / (2 * h);
          CHECK(ev.jac_alpha(r, 0) == doctest::Approx(fd).epsilon(2e-6));
        }
      }
      if (nb) {
        double bp = beta + h, bm = beta - h;
        reaction_rates(m, phi.data(), G, p, &alpha, &bp, rp.data());
        reaction_rates(m, phi.data(), G, p, &alpha, &bm, rm.data());
        for (int r = 0; r < nt; ++r) {
          double fd = (rp[(std::size_t)r] - rm[(std::size_t)r]) / (2 * h);
          CHECK(ev.jac_beta(r, 0) == doctest::Approx(fd).epsilon(2e-6));
        }
      }
    }
  }
}

TEST_CASE("zoo-loss transfer moves mass into the recycling pool") {
  for (ModelId m : kAll) {
    const int nt = n_tracers(m), zi = zoo_index(m), ri = recycle_index(m);
    std::vector<double> rate((std::size_t)nt, 0.0);
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(nt, nt);
    add_zoo_loss(m, 0.3, 1.7, rate.data(), &jac);
    CHECK(rate[(std::size_t)zi] == doctest::Approx(-0.3));
    CHECK(rate[(std::size_t)ri] == doctest::Approx(0.3));
    double sum = 0.0;
    for (double r : rate) sum += r;
    CHECK(std::abs(sum) < 1e-15);
    CHECK(jac(zi, zi) == doctest::Approx(-1.7));
    CHECK(jac(ri, zi) == doctest::Approx(1.7));
    CHECK(jac.sum() == doctest::Approx(0.0));
  }
}

TEST_CASE("parameter table round-trips and model metadata is consistent") {
  const ParamId all[] = {ParamId::ivlev,    ParamId::p_mort,   ParamId::z_mort,
                         ParamId::z_mort_quad, ParamId::graze_max, ParamId::remin,
                         ParamId::nitrif,   ParamId::half_sat, ParamId::egestion,
                         ParamId::nh4_inhib};
  BioParams p;
  double v = 0.11;
  for (ParamId id : all) {
    p.set(id, v);
    CHECK(p.get(id) == v);
    v += 0.07;
  }

  CHECK(n_tracers(ModelId::npz) == 3);
  CHECK(n_tracers(ModelId::npzd_unified) == 4);
  CHECK(n_tracers(ModelId::nnpzd_quadmort) == 5);
  CHECK(tracer_names(ModelId::npz)[2] == "Z");
  CHECK(tracer_names(ModelId::nnpzd)[1] == "NH4");
  for (ModelId m : kAll) {
    CHECK(tracer_names(m).size() == (std::size_t)n_tracers(m));
    CHECK(tracer_names(m)[(std::size_t)zoo_index(m)] == "Z");
    // The recycling pool is the nutrient fed by mortality transfers.
    const std::string& rn = tracer_names(m)[(std::size_t)recycle_index(m)];
    CHECK((rn == "N" || rn == "NH4"));
  }
  CHECK(n_alpha(ModelId::npz_quadmort) == 1);
  CHECK(n_alpha(ModelId::npz) == 0);
  CHECK(n_beta(ModelId::npzd_unified) == 1);
  CHECK(n_beta(ModelId::npzd) == 0);
}
