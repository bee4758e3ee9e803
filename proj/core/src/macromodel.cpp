#include "pem/macromodel.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace pem {

Eigen::VectorXd BinGrid::soc_vector() const {
  Eigen::VectorXd chi(total_states());
  for (int m = 0; m < 3; ++m)
    for (int i = 0; i < bins_per_mode; ++i) chi[m * bins_per_mode + i] = center(i);
  return chi;
}

double fleet_soc(std::span<const double> socs, double low, double high) {
  if (socs.empty()) throw std::invalid_argument("fleet_soc: empty fleet");
  double sum = 0.0;
  for (double x : socs) sum += x;
  return (sum / static_cast<double>(socs.size()) - low) / (high - low);
}

double fleet_soc(const Eigen::VectorXd& pmf, const BinGrid& grid) {
  if (pmf.size() != grid.total_states())
    throw std::invalid_argument("fleet_soc: pmf size does not match grid");
  double mean = pmf.dot(grid.soc_vector());
  return (mean - grid.low) / (grid.high - grid.low);
}

Macromodel::Macromodel(const MacroParams& params, const BinGrid& grid)
    : params_(params), grid_(grid) {
  params_.device.validate();
  if (grid_.bins_per_mode < 2)
    throw std::invalid_argument("macromodel: need at least 2 bins per mode");
  if (!(params_.step_s > 0.0) || !(params_.device_tick_s > 0.0))
    throw std::invalid_argument("macromodel: step and tick must be positive");
  build_structure();
}

void Macromodel::build_structure() {
  const int n = grid_.bins_per_mode;
  const double w = grid_.width();
  const DeviceParams& dev = params_.device;
  auto& s = structure_;
  s.charge_up.setZero(n);
  s.standby_down.setZero(n);
  s.discharge_down.setZero(n);
  s.request_rate_charge.setZero(n);
  s.request_rate_discharge.setZero(n);
  s.device_ticks_per_step =
      std::max(1, static_cast<int>(std::lround(params_.step_s / params_.device_tick_s)));

  const bool ewh = dev.device_class == DeviceClass::ElectricWaterHeater;
  const double energy = dev.soc_energy_kj();  // kJ per SoC unit

  for (int i = 0; i < n; ++i) {
    const double x = grid_.center(i);
    double sink_per_s = 0.0;  // SoC units/s lost to standing losses + end use
    if (ewh) {
      sink_per_s = (x - dev.ambient_c) / dev.loss_time_const_s +
                   params_.mean_draw_kw / energy;
    }
    const double charge_per_s =
        dev.charge_eff * dev.rated_charge_kw / energy - sink_per_s;
    const double discharge_per_s =
        dev.can_discharge() ? dev.discharge_eff * dev.rated_discharge_kw / energy + sink_per_s
                            : 0.0;

    if (charge_per_s <= 0.0)
      throw std::invalid_argument(
          "macromodel: charging drift non-positive (end use exceeds heating)");

    double p_up = charge_per_s * params_.step_s / w;
    double p_down_sb = sink_per_s * params_.step_s / w;
    double p_down_d = discharge_per_s * params_.step_s / w;
    const double kSlack = 1.0 + 1e-9;
    if (p_up > kSlack || p_down_sb > kSlack || p_down_d > kSlack)
      throw std::invalid_argument(
          "macromodel: drift exceeds one bin per step; shrink step_s or widen bins");
    s.charge_up[i] = std::min(p_up, 1.0);
    s.standby_down[i] = std::min(p_down_sb, 1.0);
    s.discharge_down[i] = std::min(p_down_d, 1.0);

    s.request_rate_charge[i] = request_rate(x, dev, PacketDirection::Charge);
    s.request_rate_discharge[i] =
        dev.can_discharge() ? request_rate(x, dev, PacketDirection::Discharge) : 0.0;
  }
}

namespace {

// Per-tick Bernoulli race between charge and discharge acceptance, compounded
// over the macro step. Returns (P[charge side wins], P[discharge side wins]).
struct RaceResult {
  double charge;
  double discharge;
  double survive;  // probability of finishing the step still in standby
};

RaceResult compound_race(double p_charge_tick, double p_discharge_tick, int ticks) {
  double p = std::clamp(p_charge_tick, 0.0, 1.0);
  double q = std::clamp(p_discharge_tick, 0.0, 1.0);
  double total = p + q;
  if (total <= 0.0) return {0.0, 0.0, 1.0};
  if (total > 1.0) {  // degenerate: normalize the per-tick race
    p /= total;
    q /= total;
    total = 1.0;
  }
  double survive = std::pow(1.0 - total, ticks);
  double leave = 1.0 - survive;
  return {leave * p / total, leave * q / total, survive};
}

}  // namespace

double Macromodel::accept_prob(int bin, PacketDirection dir, double beta_c,
                               double beta_d) const {
  const auto& s = structure_;
  const double dt = params_.device_tick_s;
  double g_c = -std::expm1(-std::min(s.request_rate_charge[bin], 1e12) * dt);
  double g_d = -std::expm1(-std::min(s.request_rate_discharge[bin], 1e12) * dt);
  auto race = compound_race(beta_c * g_c, beta_d * g_d, s.device_ticks_per_step);
  return dir == PacketDirection::Charge ? race.charge : race.discharge;
}

double Macromodel::expected_requests(int bin, PacketDirection dir, double beta_c,
                                     double beta_d) const {
  const auto& s = structure_;
  const double dt = params_.device_tick_s;
  const int ticks = s.device_ticks_per_step;
  double g_c = -std::expm1(-std::min(s.request_rate_charge[bin], 1e12) * dt);
  double g_d = -std::expm1(-std::min(s.request_rate_discharge[bin], 1e12) * dt);
  double p = std::clamp(beta_c * g_c, 0.0, 1.0);
  double q = std::clamp(beta_d * g_d, 0.0, 1.0);
  double total = p + q;
  // Expected standby-ticks before leaving (or the step ending), times the
  // per-tick request probability of the asked direction.
  double expected_ticks;
  if (total <= 0.0) {
    expected_ticks = ticks;
  } else if (total >= 1.0) {
    expected_ticks = 1.0;
  } else {
    expected_ticks = (1.0 - std::pow(1.0 - total, ticks)) / total;
  }
  return (dir == PacketDirection::Charge ? g_c : g_d) * expected_ticks;
}

Eigen::MatrixXd Macromodel::transition_matrix(const ControlInput& u) const {
  const int n = grid_.bins_per_mode;
  const int N = grid_.total_states();
  const auto& s = structure_;
  const double exp_c = std::clamp(u.expire_charge, 0.0, 1.0);
  const double exp_d = std::clamp(u.expire_discharge, 0.0, 1.0);

  auto C = [n](int i) { return i; };
  auto SB = [n](int i) { return n + i; };
  auto D = [n](int i) { return 2 * n + i; };

  // Stage 1: expiry (charge/discharge -> standby, same bin).
  Eigen::MatrixXd expire = Eigen::MatrixXd::Identity(N, N);
  for (int i = 0; i < n; ++i) {
    expire(C(i), C(i)) = 1.0 - exp_c;
    expire(SB(i), C(i)) = exp_c;
    expire(D(i), D(i)) = 1.0 - exp_d;
    expire(SB(i), D(i)) = exp_d;
  }

  // Stage 2: requests (standby -> charge/discharge, same bin).
  Eigen::MatrixXd request = Eigen::MatrixXd::Identity(N, N);
  for (int i = 0; i < n; ++i) {
    double a_c = accept_prob(i, PacketDirection::Charge, u.accept_charge, u.accept_discharge);
    double a_d =
        accept_prob(i, PacketDirection::Discharge, u.accept_charge, u.accept_discharge);
    request(SB(i), SB(i)) = 1.0 - a_c - a_d;
    request(C(i), SB(i)) = a_c;
    request(D(i), SB(i)) = a_d;
  }

  // Stage 3: within-mode drift with boundary rules. The top charge bin cuts
  // off to standby (thermostatic limit); drift out of the bottom standby or
  // discharge bin lands in the bottom charge bin (opt-out forced charging).
  Eigen::MatrixXd drift = Eigen::MatrixXd::Identity(N, N);
  for (int i = 0; i < n; ++i) {
    double up = s.charge_up[i];
    drift(C(i), C(i)) = 1.0 - up;
    if (i + 1 < n) drift(C(i + 1), C(i)) = up;
    else drift(SB(n - 1), C(i)) = up;

    double down = s.standby_down[i];
    drift(SB(i), SB(i)) = 1.0 - down;
    if (i > 0) drift(SB(i - 1), SB(i)) = down;
    else drift(C(0), SB(0)) = down;

    double ddown = s.discharge_down[i];
    drift(D(i), D(i)) = 1.0 - ddown;
    if (i > 0) drift(D(i - 1), D(i)) = ddown;
    else drift(C(0), D(0)) = ddown;
  }

  return drift * request * expire;
}

Eigen::VectorXd Macromodel::step(const Eigen::VectorXd& pmf, const ControlInput& u) const {
  if (pmf.size() != grid_.total_states())
    throw std::invalid_argument("macromodel: pmf size mismatch");
  // Exactly linear in the PMF for fixed input; the transition matrix is the
  // state Jacobian. Simplex guarding is the caller's business (MacroRunner).
  return transition_matrix(u) * pmf;
}

MacroOutput Macromodel::output(const Eigen::VectorXd& pmf, const ControlInput& u) const {
  const int n = grid_.bins_per_mode;
  const auto& dev = params_.device;
  const double N = params_.fleet_size;
  MacroOutput out;
  double mass_c = pmf.segment(0, n).sum();
  double mass_d = pmf.segment(2 * n, n).sum();
  out.demand_kw = params_.uncontrolled_base_kw +
                  N * (dev.rated_charge_kw * mass_c - dev.rated_discharge_kw * mass_d);
  for (int i = 0; i < n; ++i) {
    double sb = pmf[n + i];
    out.requests_charge +=
        N * sb * expected_requests(i, PacketDirection::Charge, u.accept_charge, u.accept_discharge);
    out.requests_discharge +=
        N * sb *
        expected_requests(i, PacketDirection::Discharge, u.accept_charge, u.accept_discharge);
  }
  // Opt-out flow: mass crossing either deadband edge this step.
  const auto& s = structure_;
  out.opt_outs = N * (pmf[n + 0] * s.standby_down[0] + pmf[2 * n + 0] * s.discharge_down[0] +
                      pmf[n - 1] * s.charge_up[n - 1]);
  return out;
}

Eigen::MatrixXd Macromodel::output_matrix(const ControlInput& u,
                                          bool include_opt_outs) const {
  const int n = grid_.bins_per_mode;
  const int N = grid_.total_states();
  const auto& dev = params_.device;
  const double fleet = params_.fleet_size;
  Eigen::MatrixXd Cmat = Eigen::MatrixXd::Zero(include_opt_outs ? 4 : 3, N);
  for (int i = 0; i < n; ++i) {
    Cmat(0, i) = fleet * dev.rated_charge_kw;
    Cmat(0, 2 * n + i) = -fleet * dev.rated_discharge_kw;
    Cmat(1, n + i) = fleet * expected_requests(i, PacketDirection::Charge,
                                               u.accept_charge, u.accept_discharge);
    Cmat(2, n + i) = fleet * expected_requests(i, PacketDirection::Discharge,
                                               u.accept_charge, u.accept_discharge);
  }
  if (include_opt_outs) {
    const auto& s = structure_;
    Cmat(3, n + 0) = fleet * s.standby_down[0];
    Cmat(3, 2 * n + 0) = fleet * s.discharge_down[0];
    Cmat(3, n - 1) = fleet * s.charge_up[n - 1];
  }
  return Cmat;
}

double Macromodel::charge_inflow(const Eigen::VectorXd& pmf, const ControlInput& u) const {
  // Mirrors the staged transition exactly: requests act on post-expiry
  // standby mass; the opt-out boundary flow acts on post-request mass.
  const int n = grid_.bins_per_mode;
  const auto& s = structure_;
  const double exp_c = std::clamp(u.expire_charge, 0.0, 1.0);
  const double exp_d = std::clamp(u.expire_discharge, 0.0, 1.0);
  double inflow = 0.0;
  double sb0_after_requests = 0.0;
  for (int i = 0; i < n; ++i) {
    double sb = pmf[n + i] + exp_c * pmf[i] + exp_d * pmf[2 * n + i];
    double a_c = accept_prob(i, PacketDirection::Charge, u.accept_charge, u.accept_discharge);
    double a_d =
        accept_prob(i, PacketDirection::Discharge, u.accept_charge, u.accept_discharge);
    inflow += a_c * sb;
    if (i == 0) sb0_after_requests = sb * (1.0 - a_c - a_d);
  }
  inflow += sb0_after_requests * s.standby_down[0];
  double d0_after = pmf[2 * n + 0] * (1.0 - exp_d);
  inflow += d0_after * s.discharge_down[0];
  return inflow;
}

double Macromodel::discharge_inflow(const Eigen::VectorXd& pmf, const ControlInput& u) const {
  const int n = grid_.bins_per_mode;
  const double exp_c = std::clamp(u.expire_charge, 0.0, 1.0);
  const double exp_d = std::clamp(u.expire_discharge, 0.0, 1.0);
  double inflow = 0.0;
  for (int i = 0; i < n; ++i) {
    double sb = pmf[n + i] + exp_c * pmf[i] + exp_d * pmf[2 * n + i];
    inflow += sb * accept_prob(i, PacketDirection::Discharge, u.accept_charge,
                               u.accept_discharge);
  }
  return inflow;
}

ControlInput Macromodel::steady_input(double beta_c, double beta_d) const {
  ControlInput u;
  u.accept_charge = beta_c;
  u.accept_discharge = beta_d;
  u.expire_charge = std::min(1.0, params_.step_s / params_.device.packet_charge_s);
  u.expire_discharge = std::min(1.0, params_.step_s / params_.device.packet_discharge_s);
  return u;
}

Eigen::VectorXd Macromodel::stationary_distribution(double beta_c, double beta_d,
                                                    double tol) const {
  const int N = grid_.total_states();
  ControlInput u = steady_input(beta_c, beta_d);
  Eigen::MatrixXd T = transition_matrix(u);

  // Null-space solve of (T - I) q = 0 with the normalization row appended.
  Eigen::MatrixXd A = T - Eigen::MatrixXd::Identity(N, N);
  A.row(N - 1).setOnes();
  Eigen::VectorXd b = Eigen::VectorXd::Zero(N);
  b[N - 1] = 1.0;
  Eigen::VectorXd q = A.fullPivLu().solve(b);

  bool ok = q.allFinite() && q.minCoeff() > -1e-9;
  if (ok) {
    q = q.cwiseMax(0.0);
    q /= q.sum();
    if ((T * q - q).lpNorm<Eigen::Infinity>() <= std::max(tol, 1e-11)) return q;
  }

  // Fall back to power iteration (covers chains where the direct solve is
  // ill-conditioned).
  q = Eigen::VectorXd::Constant(N, 1.0 / N);
  double residual = 1.0;
  const int budget = 2'000'000;
  for (int it = 0; it < budget; ++it) {
    Eigen::VectorXd next = T * q;
    next = next.cwiseMax(0.0);
    next /= next.sum();
    residual = (next - q).lpNorm<Eigen::Infinity>();
    q = next;
    if (residual < tol) return q;
  }
  std::ostringstream msg;
  msg << "stationary_distribution: no convergence within budget, residual=" << residual;
  throw std::runtime_error(msg.str());
}

double Macromodel::mean_soc(const Eigen::VectorXd& pmf) const {
  return pmf.dot(grid_.soc_vector());
}

BaselineResult Macromodel::baseline_optimization() const {
  const auto& dev = params_.device;
  auto demand_of = [&](const Eigen::VectorXd& q, const ControlInput& u) {
    return output(q, u).demand_kw;
  };

  if (!dev.can_discharge()) {
    // Charge-only fleet: the stationary mean SoC is monotone increasing in
    // the acceptance proportion, so the setpoint constraint binds at the
    // smallest feasible value; demand is minimal there.
    auto mean_at = [&](double beta) {
      return mean_soc(stationary_distribution(beta, 0.0));
    };
    double lo = 0.0, hi = 1.0;
    double mean_hi = mean_at(hi);
    if (mean_hi < dev.setpoint)
      throw std::runtime_error(
          "baseline_optimization: infeasible, setpoint constraint cannot be met even "
          "at full acceptance (binding constraint: stationary mean >= setpoint)");
    double mean_lo = mean_at(lo);
    double beta = hi;
    if (mean_lo >= dev.setpoint) {
      beta = lo;  // even zero acceptance holds the setpoint (opt-out driven)
    } else {
      for (int it = 0; it < 60; ++it) {
        double mid = 0.5 * (lo + hi);
        if (mean_at(mid) >= dev.setpoint) hi = mid;
        else lo = mid;
      }
      beta = hi;
    }
    Eigen::VectorXd q = stationary_distribution(beta, 0.0);
    return {beta, 0.0, demand_of(q, steady_input(beta, 0.0)), q};
  }

  // Two-sided fleet: coarse grid then local refinement.
  double best_obj = std::numeric_limits<double>::infinity();
  double best_c = -1.0, best_d = -1.0;
  Eigen::VectorXd best_q;
  auto consider = [&](double bc, double bd) {
    Eigen::VectorXd q = stationary_distribution(bc, bd);
    if (mean_soc(q) < dev.setpoint) return;
    double obj = demand_of(q, steady_input(bc, bd));
    if (obj < best_obj) {
      best_obj = obj;
      best_c = bc;
      best_d = bd;
      best_q = q;
    }
  };
  const int coarse = 11;
  for (int i = 0; i < coarse; ++i)
    for (int j = 0; j < coarse; ++j)
      consider(i / double(coarse - 1), j / double(coarse - 1));
  if (best_c < 0.0)
    throw std::runtime_error(
        "baseline_optimization: infeasible over the control grid (binding constraint: "
        "stationary mean >= setpoint)");
  double radius = 0.1;
  for (int round = 0; round < 3; ++round) {
    double c0 = best_c, d0 = best_d;
    for (int i = -2; i <= 2; ++i)
      for (int j = -2; j <= 2; ++j) {
        double bc = std::clamp(c0 + i * radius / 2.0, 0.0, 1.0);
        double bd = std::clamp(d0 + j * radius / 2.0, 0.0, 1.0);
        consider(bc, bd);
      }
    radius /= 4.0;
  }
  return {best_c, best_d, best_obj, best_q};
}

SocLimits Macromodel::soc_limits() const {
  SocLimits lim;
  Eigen::VectorXd q_hi = stationary_distribution(1.0, 0.0);
  Eigen::VectorXd q_lo = stationary_distribution(0.0, 1.0);
  lim.max_soc = mean_soc(q_hi);
  lim.min_soc = mean_soc(q_lo);
  lim.max_normalized = (lim.max_soc - grid_.low) / (grid_.high - grid_.low);
  lim.min_normalized = (lim.min_soc - grid_.low) / (grid_.high - grid_.low);
  return lim;
}

void Macromodel::save_snapshot(std::ostream& os, const Eigen::VectorXd& pmf) const {
  os << "pem-macromodel-snapshot v1\n";
  os << "bins_per_mode " << grid_.bins_per_mode << "\n";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g %.17g\n", grid_.low, grid_.high);
  os << "deadband " << buf;
  os << "pmf " << pmf.size() << "\n";
  for (Eigen::Index i = 0; i < pmf.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%.17g\n", pmf[i]);
    os << buf;
  }
}

Eigen::VectorXd Macromodel::load_snapshot(std::istream& is) const {
  std::string line;
  std::getline(is, line);
  if (line != "pem-macromodel-snapshot v1")
    throw std::runtime_error("snapshot: unrecognized header");
  std::string key;
  int bins = 0;
  double lo = 0, hi = 0;
  is >> key >> bins;
  if (key != "bins_per_mode" || bins != grid_.bins_per_mode)
    throw std::runtime_error("snapshot: grid mismatch (bins_per_mode)");
  is >> key >> lo >> hi;
  if (key != "deadband" || lo != grid_.low || hi != grid_.high)
    throw std::runtime_error("snapshot: grid mismatch (deadband)");
  Eigen::Index size = 0;
  is >> key >> size;
  if (key != "pmf" || size != grid_.total_states())
    throw std::runtime_error("snapshot: pmf size mismatch");
  Eigen::VectorXd pmf(size);
  for (Eigen::Index i = 0; i < size; ++i) is >> pmf[i];
  if (!is) throw std::runtime_error("snapshot: truncated pmf");
  return pmf;
}

MacroRunner::MacroRunner(const Macromodel& model, Eigen::VectorXd initial_pmf)
    : model_(model), pmf_(std::move(initial_pmf)) {
  const auto& p = model_.params();
  lag_charge_ = static_cast<std::size_t>(
      std::max(1.0, std::round(p.device.packet_charge_s / p.step_s)));
  lag_discharge_ = static_cast<std::size_t>(
      std::max(1.0, std::round(p.device.packet_discharge_s / p.step_s)));
}

MacroOutput MacroRunner::step(double beta_c, double beta_d,
                              const ControlInput* expire_override) {
  const int n = model_.grid().bins_per_mode;
  ControlInput u;
  u.accept_charge = beta_c;
  u.accept_discharge = beta_d;
  if (expire_override) {
    u.expire_charge = std::clamp(expire_override->expire_charge, 0.0, 1.0);
    u.expire_discharge = std::clamp(expire_override->expire_discharge, 0.0, 1.0);
  } else {
    // Replay the acceptance inflow one packet length later; before the
    // delay line fills, fall back to the steady proportion.
    double mass_c = pmf_.segment(0, n).sum();
    double mass_d = pmf_.segment(2 * n, n).sum();
    ControlInput steady = model_.steady_input(beta_c, beta_d);
    if (inflow_charge_.size() >= lag_charge_ && mass_c > 1e-12) {
      u.expire_charge = std::clamp(inflow_charge_.front() / mass_c, 0.0, 1.0);
      inflow_charge_.pop_front();
    } else {
      u.expire_charge = steady.expire_charge;
      if (inflow_charge_.size() >= lag_charge_) inflow_charge_.pop_front();
    }
    if (inflow_discharge_.size() >= lag_discharge_ && mass_d > 1e-12) {
      u.expire_discharge = std::clamp(inflow_discharge_.front() / mass_d, 0.0, 1.0);
      inflow_discharge_.pop_front();
    } else {
      u.expire_discharge = steady.expire_discharge;
      if (inflow_discharge_.size() >= lag_discharge_) inflow_discharge_.pop_front();
    }
  }

  MacroOutput out = model_.output(pmf_, u);
  inflow_charge_.push_back(model_.charge_inflow(pmf_, u));
  inflow_discharge_.push_back(model_.discharge_inflow(pmf_, u));
  pmf_ = model_.step(pmf_, u);
  // Long runs accumulate float dust; keep the PMF on the simplex.
  pmf_ = pmf_.cwiseMax(0.0);
  pmf_ /= pmf_.sum();
  last_input_ = u;
  return out;
}

}  // namespace pem
