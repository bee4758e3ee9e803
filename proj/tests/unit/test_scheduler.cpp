#include <doctest.h>

#include <string>
#include <vector>

#include "pem/sim_clock.hpp"

using namespace pem;

TEST_CASE("events dispatch in time order") {
  EventQueue q;
  std::vector<int> order;
  q.schedule(seconds_to_sim(2.0), EventClass::DeviceTick, [&](SimTime) { order.push_back(2); });
  q.schedule(seconds_to_sim(1.0), EventClass::DeviceTick, [&](SimTime) { order.push_back(1); });
  q.schedule(seconds_to_sim(3.0), EventClass::DeviceTick, [&](SimTime) { order.push_back(3); });
  while (!q.empty()) q.run_next();
  CHECK(order == std::vector<int>{1, 2, 3});
}

TEST_CASE("equal timestamps break ties by module class, then insertion") {
  EventQueue q;
  std::string order;
  SimTime t = seconds_to_sim(60.0);
  q.schedule(t, EventClass::Estimator, [&](SimTime) { order += 'e'; });
  q.schedule(t, EventClass::DeviceTick, [&](SimTime) { order += 'd'; });
  q.schedule(t, EventClass::Grid, [&](SimTime) { order += 'g'; });
  q.schedule(t, EventClass::DeliveryToCoordinator, [&](SimTime) { order += 'c'; });
  q.schedule(t, EventClass::DeviceTick, [&](SimTime) { order += 'D'; });
  while (!q.empty()) q.run_next();
  // grid < device ticks (insertion order among equals) < coordinator < estimator
  CHECK(order == "gdDce");
}

TEST_CASE("events scheduled mid-dispatch at the same time still run") {
  EventQueue q;
  std::vector<int> order;
  q.schedule(seconds_to_sim(1.0), EventClass::DeliveryToCoordinator, [&](SimTime now) {
    order.push_back(1);
    q.schedule(now, EventClass::DeliveryToDevice, [&](SimTime) { order.push_back(2); });
  });
  while (!q.empty()) q.run_next();
  CHECK(order == std::vector<int>{1, 2});
}

TEST_CASE("sim time conversion round trips on tick boundaries") {
  CHECK(seconds_to_sim(1.0) == 1'000'000);
  CHECK(sim_to_seconds(seconds_to_sim(0.1)) == doctest::Approx(0.1));
  CHECK(seconds_to_sim(3600.0) == 3'600'000'000LL);
}
