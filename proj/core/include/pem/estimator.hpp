#pragma once

#include <Eigen/Dense>

#include "pem/macromodel.hpp"

namespace pem {

struct EstimatorConfig {
  Eigen::VectorXd measurement_noise_diag;  // Q1 diagonal; sized 3 (or 4 with opt-outs)
  double process_noise = 1e-6;             // Q2 = process_noise * I
  bool include_opt_outs = false;
};

// Extended Kalman filter over the fleet PMF. The state map is linear in the
// PMF for a fixed input, so the state Jacobian is the transition matrix
// itself; the output map is affine with input-dependent request weights.
class FleetEstimator {
 public:
  FleetEstimator(const Macromodel& model, EstimatorConfig cfg,
                 Eigen::VectorXd initial_pmf, double initial_variance = 1e-3);

  // Jacobians at the current linearization point.
  Eigen::MatrixXd state_jacobian(const ControlInput& u) const;
  Eigen::MatrixXd output_jacobian(const ControlInput& u) const;

  // One measurement update followed by one time update. y is
  // (demand_kw, requests_charge, requests_discharge[, opt_outs]).
  void step(const ControlInput& u, const Eigen::VectorXd& y);

  const Eigen::VectorXd& filtered_pmf() const { return filtered_; }
  const Eigen::VectorXd& predicted_pmf() const { return predicted_; }
  const Eigen::MatrixXd& covariance() const { return cov_filtered_; }
  const Eigen::MatrixXd& predicted_covariance() const { return cov_predicted_; }

  double estimated_soc() const;  // normalized, from the filtered PMF
  SocAssessment assess(const SocLimits& limits, double margin = 0.05) const;

  // Diagnostics from the latest step.
  const Eigen::VectorXd& last_innovation() const { return last_innovation_; }
  double last_projection_shift() const { return last_projection_shift_; }

  // Euclidean projection onto the probability simplex.
  static Eigen::VectorXd project_to_simplex(const Eigen::VectorXd& v);

 private:
  Eigen::VectorXd predict_output(const Eigen::VectorXd& pmf, const ControlInput& u) const;

  const Macromodel& model_;
  EstimatorConfig cfg_;
  Eigen::VectorXd predicted_;   // q[k|k-1]
  Eigen::VectorXd filtered_;    // q[k|k]
  Eigen::MatrixXd cov_predicted_;
  Eigen::MatrixXd cov_filtered_;
  Eigen::VectorXd last_innovation_;
  double last_projection_shift_ = 0.0;
};

}  // namespace pem
