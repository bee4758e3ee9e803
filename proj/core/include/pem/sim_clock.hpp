#pragma once

#include <cstdint>
#include <functional>
#include <queue>
#include <vector>

namespace pem {

// Simulated time in integer microseconds. Integer arithmetic keeps event
// ordering exact across platforms; doubles appear only at module boundaries.
using SimTime = std::int64_t;

constexpr SimTime kMicrosPerSecond = 1'000'000;

inline SimTime seconds_to_sim(double s) {
  return static_cast<SimTime>(s * static_cast<double>(kMicrosPerSecond) + 0.5);
}
inline double sim_to_seconds(SimTime t) {
  return static_cast<double>(t) / static_cast<double>(kMicrosPerSecond);
}

// Fixed dispatch order for events that share a timestamp. The grid integrator
// runs first, then reference updates, device ticks, channel deliveries,
// coordinator-side events (timer expiries), and finally the macromodel/EKF.
enum class EventClass : int {
  Grid = 0,
  Reference = 1,
  DeviceTick = 2,
  DeliveryToDevice = 3,
  DeliveryToCoordinator = 4,
  CoordinatorTimer = 5,
  Estimator = 6,
  Harness = 7,
};

class EventQueue {
 public:
  using Callback = std::function<void(SimTime)>;

  void schedule(SimTime at, EventClass cls, Callback cb) {
    heap_.push(Entry{at, static_cast<int>(cls), next_seq_++, std::move(cb)});
  }

  bool empty() const { return heap_.empty(); }
  SimTime next_time() const { return heap_.top().at; }

  // Pops and runs the earliest event. Ties break on (class, insertion order),
  // so equal-time events dispatch in a reproducible total order.
  void run_next() {
    Entry e = heap_.top();
    heap_.pop();
    now_ = e.at;
    e.cb(e.at);
  }

  SimTime now() const { return now_; }

 private:
  struct Entry {
    SimTime at;
    int cls;
    std::uint64_t seq;
    Callback cb;
  };
  struct Later {
    bool operator()(const Entry& a, const Entry& b) const {
      if (a.at != b.at) return a.at > b.at;
      if (a.cls != b.cls) return a.cls > b.cls;
      return a.seq > b.seq;
    }
  };
  std::priority_queue<Entry, std::vector<Entry>, Later> heap_;
  std::uint64_t next_seq_ = 0;
  SimTime now_ = 0;
};

}  // namespace pem
