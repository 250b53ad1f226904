#pragma once

// Classical baselines behind one interface: observe the state, return a phase.
// Random, Fixedtime, FixedtimeOffset, MaxPressure and SOTL.

#include <memory>
#include <string>
#include <vector>

#include "metavim/common.hpp"
#include "metavim/netsim.hpp"

namespace metavim::ctrl {

enum class Kind { Random, Fixedtime, FixedtimeOffset, MaxPressure, Sotl };

Kind parse_kind(const std::string& name);  // throws ConfigError on unknown kind
std::string kind_name(Kind k);

struct ControllerSpec {
    Kind kind = Kind::Fixedtime;
    std::vector<double> phase_plan = {30.0, 30.0, 30.0, 30.0};  // seconds per phase
    std::vector<double> offsets;  // per intersection, seconds; empty = all zero
    double sotl_theta = 30.0;     // vehicle-seconds of red-approach demand
    double sotl_min_green = 10.0; // seconds
    uint64_t seed = 0;
};

// phase holding the position of (clock + offset) mod cycle in the cumulative plan
int fixedtime_phase(const std::vector<double>& plan, double clock_s, double offset_s = 0.0);

// uniform draw over the 4 phases
int random_phase(Rng& rng);

// argmax of netsim::pressure over phases, ties to the lowest index
int maxpressure_phase(const netsim::SimState& state, int intersection);

struct SotlState {
    int phase = 0;
    double green_elapsed = 0.0;
    double demand_acc = 0.0;  // vehicle-seconds accumulated on red approaches
};

// hold the phase until green_elapsed >= min_green and demand_acc >= theta,
// then advance cyclically; accumulators integrate over dt_s
int sotl_phase(const ControllerSpec& spec, SotlState& st, const netsim::Observation& obs,
               const netsim::IntersectionNode& node, double dt_s);

// per-episode controller instance; decide() is called once per intersection
// per control step and is deterministic given (spec, call history)
class Controller {
public:
    virtual ~Controller() = default;
    virtual void reset(const netsim::RoadNetwork& net) = 0;
    virtual int decide(const netsim::SimState& state, int intersection, double clock_s,
                       double dt_s) = 0;
};

std::unique_ptr<Controller> make_controller(const ControllerSpec& spec);

}  // namespace metavim::ctrl
