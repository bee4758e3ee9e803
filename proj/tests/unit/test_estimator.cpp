#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "pem/estimator.hpp"
#include "pem/rng.hpp"

using namespace pem;

namespace {

MacroParams ewh_macro_params() {
  MacroParams mp;
  mp.device.device_class = DeviceClass::ElectricWaterHeater;
  mp.device.rated_charge_kw = 4.5;
  mp.device.tank_liters = 275.0;
  mp.device.setpoint = 52.0;
  mp.device.deadband_low = 48.9;
  mp.device.deadband_high = 55.1;
  mp.mean_draw_kw = 1.11;
  mp.step_s = 60.0;
  mp.fleet_size = 2000;
  return mp;
}

BinGrid ewh_grid() { return BinGrid{20, 48.9, 55.1}; }

Eigen::VectorXd random_pmf(int size, Rng& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  Eigen::VectorXd q(size);
  for (int i = 0; i < size; ++i) q[i] = u(rng);
  return q / q.sum();
}

}  // namespace

TEST_CASE("state Jacobian equals the composed transition matrix exactly") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  FleetEstimator est(model, {}, model.stationary_distribution(0.3, 0.0));
  ControlInput u = model.steady_input(0.3, 0.0);
  CHECK((est.state_jacobian(u) - model.transition_matrix(u)).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("state Jacobian matches central finite differences of the map") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  ControlInput u = model.steady_input(0.4, 0.0);
  Eigen::MatrixXd A = model.transition_matrix(u);
  Rng rng(17);
  Eigen::VectorXd q = random_pmf(60, rng);
  const double h = 1e-6;
  Eigen::MatrixXd fd(60, 60);
  for (int j = 0; j < 60; ++j) {
    Eigen::VectorXd lo = q, hi = q;
    hi[j] += h;
    lo[j] -= h;
    fd.col(j) = (model.step(hi, u) - model.step(lo, u)) / (2.0 * h);
  }
  CHECK((A - fd).lpNorm<Eigen::Infinity>() < 1e-6);
}

TEST_CASE("demand row of the output Jacobian carries exact per-bin power weights") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  ControlInput u = model.steady_input(0.3, 0.0);
  Eigen::MatrixXd C = model.output_matrix(u, false);
  for (int i = 0; i < 20; ++i) {
    CHECK(C(0, i) == 2000 * 4.5);        // charge bins
    CHECK(C(0, 20 + i) == 0.0);          // standby bins
    CHECK(C(0, 40 + i) == 0.0);          // EWH cannot discharge
  }
}

TEST_CASE("huge measurement noise sends the gain to zero: pure prediction") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  Eigen::VectorXd q0 = model.stationary_distribution(0.3, 0.0);
  EstimatorConfig cfg;
  cfg.measurement_noise_diag = Eigen::Vector3d(1e18, 1e18, 1e18);
  cfg.process_noise = 0.0;
  FleetEstimator est(model, cfg, q0);

  ControlInput u = model.steady_input(0.5, 0.0);
  Eigen::VectorXd expected = q0;
  Eigen::VectorXd y(3);
  y << 99999.0, 12345.0, 55.0;  // wildly wrong; should be ignored
  for (int k = 0; k < 5; ++k) {
    est.step(u, y);
    expected = model.step(expected, u);
  }
  CHECK((est.predicted_pmf() - expected).lpNorm<Eigen::Infinity>() < 1e-9);
}

TEST_CASE("zero-noise self-consistency: estimate converges to the true pmf") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  Eigen::VectorXd truth = model.stationary_distribution(0.3, 0.0);
  Rng rng(31);
  Eigen::VectorXd wrong = random_pmf(60, rng);

  EstimatorConfig cfg;
  cfg.measurement_noise_diag = Eigen::Vector3d(1e-4, 1e-6, 1e-6);
  cfg.process_noise = 1e-9;
  FleetEstimator est(model, cfg, wrong, 1.0);

  ControlInput u = model.steady_input(0.35, 0.0);
  double err_start = (est.filtered_pmf() - truth).norm();
  double err = err_start;
  for (int k = 0; k < 120; ++k) {
    MacroOutput out = model.output(truth, u);
    Eigen::VectorXd y(3);
    y << out.demand_kw, out.requests_charge, out.requests_discharge;
    est.step(u, y);
    truth = model.step(truth, u);
    err = (est.filtered_pmf() - truth).norm();
  }
  CHECK(err < 0.05 * err_start);
  CHECK(std::abs(fleet_soc(est.filtered_pmf(), model.grid()) -
                 fleet_soc(truth, model.grid())) < 0.01);
}

TEST_CASE("covariance stays symmetric and positive semidefinite over 1000 steps") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  Eigen::VectorXd q0 = model.stationary_distribution(0.3, 0.0);
  EstimatorConfig cfg;
  cfg.measurement_noise_diag = Eigen::Vector3d(25.0, 4.0, 4.0);
  cfg.process_noise = 1e-6;
  FleetEstimator est(model, cfg, q0);

  Rng rng(5);
  std::normal_distribution<double> noise(0.0, 1.0);
  ControlInput u = model.steady_input(0.3, 0.0);
  Eigen::VectorXd truth = q0;
  for (int k = 0; k < 1000; ++k) {
    MacroOutput out = model.output(truth, u);
    Eigen::VectorXd y(3);
    y << out.demand_kw + 5.0 * noise(rng), out.requests_charge + 2.0 * noise(rng),
        out.requests_discharge;
    est.step(u, y);
    truth = model.step(truth, u);
    if (k % 100 == 0 || k == 999) {
      const Eigen::MatrixXd& P = est.covariance();
      REQUIRE((P - P.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(P);
      REQUIRE(es.eigenvalues().minCoeff() > -1e-10);
    }
  }
}

TEST_CASE("covariance update agrees with the Joseph stabilized form") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  Rng rng(7);
  Eigen::VectorXd q0 = model.stationary_distribution(0.3, 0.0);

  for (int trial = 0; trial < 10; ++trial) {
    // Random SPD prior.
    Eigen::MatrixXd Mrand = Eigen::MatrixXd::NullaryExpr(
        60, 60, [&]() { return std::normal_distribution<double>(0.0, 1.0)(rng); });
    Eigen::MatrixXd P = Mrand * Mrand.transpose() / 60.0 + 1e-6 * Eigen::MatrixXd::Identity(60, 60);

    ControlInput u = model.steady_input(0.3, 0.0);
    Eigen::MatrixXd C = model.output_matrix(u, false);
    Eigen::MatrixXd Q1 = Eigen::Vector3d(25.0, 4.0, 4.0).asDiagonal();
    Eigen::MatrixXd S = C * P * C.transpose() + Q1;
    Eigen::MatrixXd K = S.ldlt().solve(C * P).transpose();

    Eigen::MatrixXd simple = P - K * C * P;
    Eigen::MatrixXd I = Eigen::MatrixXd::Identity(60, 60);
    Eigen::MatrixXd joseph =
        (I - K * C) * P * (I - K * C).transpose() + K * Q1 * K.transpose();
    double scale = P.lpNorm<Eigen::Infinity>();
    CHECK((simple - joseph).lpNorm<Eigen::Infinity>() / scale < 1e-8);
  }
}

TEST_CASE("simplex projection: feasible points unchanged, corrections stay small") {
  Rng rng(13);
  Eigen::VectorXd q = random_pmf(60, rng);
  CHECK((FleetEstimator::project_to_simplex(q) - q).lpNorm<Eigen::Infinity>() < 1e-12);

  // A perturbed point projects back without moving farther than the
  // perturbation that caused it.
  Eigen::VectorXd bumped = q;
  bumped[3] += 0.05;
  bumped[7] -= 0.04;
  Eigen::VectorXd proj = FleetEstimator::project_to_simplex(bumped);
  CHECK(proj.minCoeff() >= 0.0);
  CHECK(proj.sum() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK((proj - bumped).norm() <= (bumped - q).norm() + 1e-12);
}

TEST_CASE("estimated SoC definitional cases") {
  Macromodel model(ewh_macro_params(), ewh_grid());
  SocLimits lim = model.soc_limits();

  // Max-SoC stationary distribution evaluates to the upper limit.
  Eigen::VectorXd q_hi = model.stationary_distribution(1.0, 0.0);
  EstimatorConfig cfg;
  FleetEstimator est(model, cfg, q_hi);
  CHECK(est.estimated_soc() == doctest::Approx(lim.max_normalized).epsilon(1e-9));
  SocAssessment a = est.assess(lim);
  CHECK(a.near_upper_limit);
  CHECK(!a.near_lower_limit);

  // Mass concentrated at the setpoint bins reads one half.
  const int n = 20;
  Eigen::VectorXd q_set = Eigen::VectorXd::Zero(3 * n);
  q_set[n + 9] = 0.5;  // centers 51.945 and 52.255 straddle 52.0
  q_set[n + 10] = 0.5;
  FleetEstimator est2(model, cfg, q_set);
  CHECK(est2.estimated_soc() == doctest::Approx(0.5).epsilon(1e-12));
}
