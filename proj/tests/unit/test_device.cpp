#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "pem/device.hpp"
#include "pem/rng.hpp"

using namespace pem;

namespace {

DeviceParams ewh_reference_params() {
  DeviceParams p;
  p.device_class = DeviceClass::ElectricWaterHeater;
  p.rated_charge_kw = 4.5;
  p.rated_discharge_kw = 0.0;
  p.tank_liters = 275.0;
  p.setpoint = 52.0;
  p.deadband_low = 48.9;
  p.deadband_high = 55.1;
  return p;
}

DeviceParams ess_params() {
  DeviceParams p;
  p.device_class = DeviceClass::EnergyStorage;
  p.rated_charge_kw = 5.0;
  p.rated_discharge_kw = 5.0;
  p.capacity_kwh = 13.5;
  p.setpoint = 75.0;
  p.deadband_low = 55.0;
  p.deadband_high = 95.0;
  return p;
}

}  // namespace

TEST_CASE("EWH per-second temperature rise matches hand arithmetic") {
  // Independent evaluation: 1 s of 4.5 kW into 275 L of water,
  // dT = P / (c * rho * L) = 4.5 / (4.186 * 0.990 * 275).
  const double hand_computed = 4.5 / (4.186 * 0.990 * 275.0);
  DeviceParams p = ewh_reference_params();
  double x0 = 52.0;
  double x1 = step_soc(x0, 1, p, 0.0, 1.0);
  // Subtract the standing-loss part to isolate the heating term.
  double loss = (x0 - p.ambient_c) / p.loss_time_const_s;
  CHECK(x1 - x0 + loss == doctest::Approx(hand_computed).epsilon(1e-12));
  CHECK(hand_computed == doctest::Approx(0.00394862).epsilon(1e-5));
}

TEST_CASE("EWH at ambient with no draw holds temperature in standby") {
  DeviceParams p = ewh_reference_params();
  double x1 = step_soc(p.ambient_c, 0, p, 0.0, 1.0);
  CHECK(x1 == doctest::Approx(p.ambient_c).epsilon(1e-15));
}

TEST_CASE("standing losses decay the tank toward ambient") {
  DeviceParams p = ewh_reference_params();
  double hot = step_soc(52.0, 0, p, 0.0, 60.0);
  CHECK(hot < 52.0);
  CHECK(hot > 51.9);
}

TEST_CASE("ESS idle state is lossless") {
  DeviceParams p = ess_params();
  CHECK(step_soc(75.0, 0, p, 0.0, 123.0) == 75.0);
}

TEST_CASE("ESS charge then discharge is exactly reversible at unit efficiency") {
  DeviceParams p = ess_params();
  double x = 70.0;
  for (int i = 0; i < 600; ++i) x = step_soc(x, 1, p, 0.0, 1.0);
  CHECK(x > 70.0);
  for (int i = 0; i < 600; ++i) x = step_soc(x, -1, p, 0.0, 1.0);
  CHECK(x == doctest::Approx(70.0).epsilon(1e-12));
}

TEST_CASE("step_soc rejects invalid arguments") {
  DeviceParams p = ewh_reference_params();
  CHECK_THROWS_AS(step_soc(52.0, 0, p, 0.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(step_soc(std::nan(""), 0, p, 0.0, 1.0), std::invalid_argument);
}

TEST_CASE("request probability hits the deadband edges exactly") {
  DeviceParams p = ewh_reference_params();
  CHECK(request_probability(p.deadband_high, p, 1.0, PacketDirection::Charge) == 0.0);
  CHECK(request_probability(p.deadband_high + 1.0, p, 1.0, PacketDirection::Charge) == 0.0);
  CHECK(request_probability(p.deadband_low, p, 1.0, PacketDirection::Charge) == 1.0);
  CHECK(request_probability(p.deadband_low - 1.0, p, 1.0, PacketDirection::Charge) == 1.0);
  // Mirrored for discharge.
  CHECK(request_probability(p.deadband_low, p, 1.0, PacketDirection::Discharge) == 0.0);
  CHECK(request_probability(p.deadband_high, p, 1.0, PacketDirection::Discharge) == 1.0);
}

TEST_CASE("request probability at the setpoint is 1 - exp(-rate * dt)") {
  // At the setpoint both deadband ratio factors multiply to exactly the
  // design rate, by substitution into the rate law.
  DeviceParams p = ewh_reference_params();
  for (double dt : {0.5, 1.0, 10.0}) {
    double expected = 1.0 - std::exp(-p.mean_request_rate_hz * dt);
    CHECK(request_probability(p.setpoint, p, dt, PacketDirection::Charge) ==
          doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("request probability is monotone in SoC over random parameter draws") {
  Rng rng(123);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    DeviceParams p = ewh_reference_params();
    double low = 40.0 + 20.0 * u(rng);
    double width = 2.0 + 8.0 * u(rng);
    p.deadband_low = low;
    p.deadband_high = low + width;
    p.setpoint = low + width * (0.2 + 0.6 * u(rng));
    p.mean_request_rate_hz = 1e-4 + 0.01 * u(rng);
    CAPTURE(trial);

    double prev_c = 1.0, prev_d = 0.0;
    for (int k = 0; k <= 50; ++k) {
      double x = low + width * k / 50.0;
      double g_c = request_probability(x, p, 1.0, PacketDirection::Charge);
      double g_d = request_probability(x, p, 1.0, PacketDirection::Discharge);
      REQUIRE(g_c <= prev_c + 1e-15);  // non-increasing
      REQUIRE(g_d >= prev_d - 1e-15);  // non-decreasing
      if (k > 0 && k < 50) {
        REQUIRE(g_c < 1.0);
        REQUIRE(g_c > 0.0);
      }
      prev_c = g_c;
      prev_d = g_d;
    }
  }
}

TEST_CASE("draw process: no arrivals at zero rate") {
  DrawProcess draw;
  draw.params = {0.0, 500.0, 0.5, 120.0};
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) CHECK(draw.sample(1.0, rng) == 0.0);
}

TEST_CASE("draw process: Poisson arrival count within 3 sigma") {
  DrawProcess draw;
  draw.params = {0.001, 100.0, 0.0, 0.5};  // short pulses, fixed magnitude
  Rng rng(77);
  double total_kj = 0.0;
  const int ticks = 1'000'000;
  for (int i = 0; i < ticks; ++i) total_kj += draw.sample(1.0, rng);
  double pulses = total_kj / 100.0;
  // Expect 1000 +- 3*sqrt(1000).
  CHECK(pulses > 1000 - 3 * std::sqrt(1000.0));
  CHECK(pulses < 1000 + 3 * std::sqrt(1000.0));
}

TEST_CASE("one active pulse fully covered by dt delivers its whole magnitude") {
  DrawProcess draw;
  draw.params = {0.0, 0.0, 0.0, 60.0};
  draw.active.push_back({60.0, 300.0 / 60.0});
  Rng rng(1);
  CHECK(draw.sample(120.0, rng) == doctest::Approx(300.0));
  CHECK(draw.active.empty());
}

TEST_CASE("device below the deadband requests with certainty and opts out") {
  DeviceParams p = ewh_reference_params();
  DeviceState s;
  s.soc = p.deadband_low - 0.5;
  DrawProcess draw;
  Rng rng(5);
  DeviceDiagnostics diag;

  TickResult r = device_tick(s, p, draw, nullptr, 1.0, rng, &diag);
  CHECK(s.mode == DeviceMode::OptOutLow);
  CHECK(s.switch_state == 1);
  // Opt-out notice emitted; no packet request while opted out.
  REQUIRE(r.outbound.size() == 1);
  CHECK(r.outbound[0].kind == MessageKind::OptOutNotice);

  // Charges unconditionally until the setpoint, then returns to standby.
  int guard = 0;
  while (s.mode == DeviceMode::OptOutLow && ++guard < 5000) {
    device_tick(s, p, draw, nullptr, 1.0, rng, &diag);
  }
  CHECK(s.mode == DeviceMode::Standby);
  CHECK(s.soc >= p.setpoint);
  CHECK(diag.opt_outs_low == 1);
}

TEST_CASE("an accepted packet holds the switch closed for exactly its length") {
  DeviceParams p = ewh_reference_params();
  p.packet_charge_s = 10.0;
  DeviceState s;
  s.soc = 50.0;
  DrawProcess draw;
  Rng rng(6);

  // Force a request (SoC low enough that the per-tick probability is high),
  // then answer it.
  TickResult r;
  int guard = 0;
  while (r.outbound.empty() && ++guard < 10000) {
    r = device_tick(s, p, draw, nullptr, 1.0, rng, nullptr);
  }
  REQUIRE(!r.outbound.empty());
  PacketMessage response = PacketMessage::response(true, r.outbound[0].nonce);

  int on_ticks = 0;
  device_tick(s, p, draw, &response, 1.0, rng, nullptr);
  CHECK(s.mode == DeviceMode::Charge);
  if (s.switch_state == 1) ++on_ticks;
  while (s.mode == DeviceMode::Charge) {
    device_tick(s, p, draw, nullptr, 1.0, rng, nullptr);
    if (s.switch_state == 1) ++on_ticks;
  }
  CHECK(on_ticks == 10);
  CHECK(s.mode == DeviceMode::Standby);
  CHECK(s.packet_time_remaining_s == 0.0);
}

TEST_CASE("timer expiry returns the device to standby with the switch open") {
  DeviceParams p = ewh_reference_params();
  DeviceState s;
  s.soc = 52.0;
  s.mode = DeviceMode::Charge;
  s.packet_time_remaining_s = 1.0;
  DrawProcess draw;
  Rng rng(7);
  device_tick(s, p, draw, nullptr, 1.0, rng, nullptr);
  CHECK(s.mode == DeviceMode::Standby);
  device_tick(s, p, draw, nullptr, 1.0, rng, nullptr);
  CHECK(s.switch_state == 0);
}

TEST_CASE("fleet mean request rate matches the analytic expectation") {
  // Monte-Carlo vs sum of per-device probabilities from recorded SoC traces.
  DeviceParams p = ewh_reference_params();
  p.mean_request_rate_hz = 1.0 / 100.0;  // busier than default for tighter stats
  const int n_devices = 1000;
  const int ticks = 2000;

  std::vector<DeviceState> states(n_devices);
  std::vector<DrawProcess> draws(n_devices);
  std::vector<Rng> rngs;
  Rng init(99);
  std::uniform_real_distribution<double> band(p.deadband_low + 0.3, p.deadband_high - 0.3);
  for (int i = 0; i < n_devices; ++i) {
    states[i].soc = band(init);
    rngs.push_back(make_rng(4242, i));
  }

  double analytic_expectation = 0.0;
  std::uint64_t observed = 0;
  for (int t = 0; t < ticks; ++t) {
    for (int i = 0; i < n_devices; ++i) {
      // Expected requests accumulate only from standby devices free to ask.
      if (states[i].mode == DeviceMode::Standby && !states[i].pending.active) {
        analytic_expectation +=
            request_probability(states[i].soc, p, 1.0, PacketDirection::Charge);
      }
      TickResult r = device_tick(states[i], p, draws[i], nullptr, 1.0, rngs[i], nullptr);
      for (const auto& m : r.outbound)
        if (m.kind == MessageKind::Request) {
          ++observed;
          // Reject immediately so the device keeps sampling next tick.
          states[i].pending.active = false;
        }
    }
  }
  double sigma = std::sqrt(analytic_expectation);
  CHECK(std::abs(static_cast<double>(observed) - analytic_expectation) < 4.0 * sigma);
}

TEST_CASE("different seeds give uncorrelated request sequences") {
  DeviceParams p = ewh_reference_params();
  p.mean_request_rate_hz = 1.0 / 50.0;
  const int ticks = 10'000;

  auto request_sequence = [&](std::uint64_t seed) {
    DeviceState s;
    s.soc = p.setpoint;
    DrawProcess draw;
    Rng rng = make_rng(1, seed);
    std::vector<double> seq(ticks);
    for (int t = 0; t < ticks; ++t) {
      s.mode = DeviceMode::Standby;  // pin the mode; we only study sampling
      s.pending.active = false;
      s.soc = p.setpoint;
      TickResult r = device_tick(s, p, draw, nullptr, 1.0, rng, nullptr);
      seq[t] = r.outbound.empty() ? 0.0 : 1.0;
    }
    return seq;
  };

  auto a = request_sequence(100);
  auto b = request_sequence(200);
  double mean_a = std::accumulate(a.begin(), a.end(), 0.0) / ticks;
  double mean_b = std::accumulate(b.begin(), b.end(), 0.0) / ticks;
  double cov = 0.0, var_a = 0.0, var_b = 0.0;
  for (int t = 0; t < ticks; ++t) {
    cov += (a[t] - mean_a) * (b[t] - mean_b);
    var_a += (a[t] - mean_a) * (a[t] - mean_a);
    var_b += (b[t] - mean_b) * (b[t] - mean_b);
  }
  double corr = cov / std::sqrt(var_a * var_b);
  // |rho| ~ N(0, 1/sqrt(N)): 4-sigma bound.
  CHECK(std::abs(corr) < 4.0 / std::sqrt(static_cast<double>(ticks)));
}

TEST_CASE("late responses without a pending request are discarded and counted") {
  DeviceParams p = ewh_reference_params();
  DeviceState s;
  s.soc = 52.0;
  DrawProcess draw;
  Rng rng(8);
  DeviceDiagnostics diag;
  PacketMessage stray = PacketMessage::response(true, 777);
  device_tick(s, p, draw, &stray, 1.0, rng, &diag);
  CHECK(diag.responses_discarded == 1);
  CHECK(s.mode == DeviceMode::Standby);
}
