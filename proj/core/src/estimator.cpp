#include "pem/estimator.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

namespace pem {

FleetEstimator::FleetEstimator(const Macromodel& model, EstimatorConfig cfg,
                               Eigen::VectorXd initial_pmf, double initial_variance)
    : model_(model), cfg_(std::move(cfg)), predicted_(std::move(initial_pmf)) {
  const int n = model_.grid().total_states();
  if (predicted_.size() != n)
    throw std::invalid_argument("estimator: initial pmf size mismatch");
  const int ny = cfg_.include_opt_outs ? 4 : 3;
  if (cfg_.measurement_noise_diag.size() == 0) {
    cfg_.measurement_noise_diag = Eigen::VectorXd::Ones(ny);
  }
  if (cfg_.measurement_noise_diag.size() != ny)
    throw std::invalid_argument("estimator: measurement noise size mismatch");
  if (cfg_.measurement_noise_diag.minCoeff() <= 0.0)
    throw std::invalid_argument("estimator: measurement noise must be positive definite");
  filtered_ = predicted_;
  cov_predicted_ = Eigen::MatrixXd::Identity(n, n) * initial_variance;
  cov_filtered_ = cov_predicted_;
  last_innovation_ = Eigen::VectorXd::Zero(ny);
}

Eigen::MatrixXd FleetEstimator::state_jacobian(const ControlInput& u) const {
  return model_.transition_matrix(u);
}

Eigen::MatrixXd FleetEstimator::output_jacobian(const ControlInput& u) const {
  return model_.output_matrix(u, cfg_.include_opt_outs);
}

Eigen::VectorXd FleetEstimator::predict_output(const Eigen::VectorXd& pmf,
                                               const ControlInput& u) const {
  MacroOutput out = model_.output(pmf, u);
  Eigen::VectorXd y(cfg_.include_opt_outs ? 4 : 3);
  y[0] = out.demand_kw;
  y[1] = out.requests_charge;
  y[2] = out.requests_discharge;
  if (cfg_.include_opt_outs) y[3] = out.opt_outs;
  return y;
}

void FleetEstimator::step(const ControlInput& u, const Eigen::VectorXd& y) {
  const Eigen::MatrixXd C = output_jacobian(u);
  const int ny = static_cast<int>(C.rows());
  if (y.size() != ny) throw std::invalid_argument("estimator: measurement size mismatch");
  const Eigen::MatrixXd Q1 = cfg_.measurement_noise_diag.asDiagonal();

  // Measurement update.
  Eigen::MatrixXd S = C * cov_predicted_ * C.transpose() + Q1;
  Eigen::LDLT<Eigen::MatrixXd> ldlt(S);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("estimator: singular innovation covariance");
  Eigen::MatrixXd K = ldlt.solve(C * cov_predicted_).transpose();

  last_innovation_ = y - predict_output(predicted_, u);
  Eigen::VectorXd corrected = predicted_ + K * last_innovation_;
  cov_filtered_ = cov_predicted_ - K * C * cov_predicted_;
  cov_filtered_ = 0.5 * (cov_filtered_ + cov_filtered_.transpose()).eval();

  filtered_ = project_to_simplex(corrected);
  last_projection_shift_ = (filtered_ - corrected).norm();

  // Time update.
  const Eigen::MatrixXd A = state_jacobian(u);
  cov_predicted_ = A * cov_filtered_ * A.transpose();
  cov_predicted_.diagonal().array() += cfg_.process_noise;
  cov_predicted_ = 0.5 * (cov_predicted_ + cov_predicted_.transpose()).eval();
  predicted_ = A * filtered_;
}

double FleetEstimator::estimated_soc() const {
  return fleet_soc(filtered_, model_.grid());
}

SocAssessment FleetEstimator::assess(const SocLimits& limits, double margin) const {
  SocAssessment a;
  a.normalized = estimated_soc();
  double span = limits.max_normalized - limits.min_normalized;
  if (span > 0.0) {
    a.near_upper_limit = a.normalized >= limits.max_normalized - margin * span;
    a.near_lower_limit = a.normalized <= limits.min_normalized + margin * span;
  }
  return a;
}

Eigen::VectorXd FleetEstimator::project_to_simplex(const Eigen::VectorXd& v) {
  // Euclidean projection onto {x >= 0, sum x = 1}.
  const Eigen::Index n = v.size();
  std::vector<double> sorted(v.data(), v.data() + n);
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  double running = 0.0;
  double theta = 0.0;
  int support = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    running += sorted[i];
    double candidate = (running - 1.0) / static_cast<double>(i + 1);
    if (sorted[i] - candidate > 0.0) {
      theta = candidate;
      support = static_cast<int>(i + 1);
    }
  }
  if (support == 0) theta = (running - 1.0) / static_cast<double>(n);
  return (v.array() - theta).max(0.0);
}

}  // namespace pem
