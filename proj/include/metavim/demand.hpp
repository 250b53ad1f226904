#pragma once

// Arrival schedule builders: replay of explicit vehicle lists, piecewise-rate
// segment flows, and the synthetic mixed_low / mixed_high one-hour profiles
// (six 600 s intervals, deterministic spacing, exact totals 2550 / 4770).

#include <string>
#include <vector>

#include "metavim/common.hpp"
#include "metavim/netsim.hpp"

namespace metavim::demand {

enum class MixedProfile { Low, High };

// vehicles/second per 600 s interval
extern const std::vector<double> kMixedLowRates;   // totals 2550 over 3600 s
extern const std::vector<double> kMixedHighRates;  // totals 4770, 4.0 veh/s peak in [1200, 1800)

struct FlowSegment {
    std::vector<std::string> route;  // lane ids, entry lane first; empty = seeded random route
    double start_s = 0.0;
    double end_s = 0.0;
    double rate = 0.0;  // vehicles per second
};

struct FlowVehicle {
    std::vector<std::string> route;
    double entry_time_s = 0.0;
};

struct FlowSpec {
    std::vector<FlowSegment> segments;
    std::vector<FlowVehicle> vehicles;
    double horizon_s = 3600.0;
};

// "metavim-flow-v1" document
FlowSpec parse_flow(const std::string& json_text);
FlowSpec parse_flow_file(const std::string& path);

// explicit vehicle list, sorted by entry time; routes validated against the
// network (unknown lanes and disconnected hops are errors)
netsim::ArrivalSchedule build_replay(const FlowSpec& spec, const netsim::RoadNetwork& net);

// segments expanded at deterministic spacing 1/rate; seeded random routes
// where a segment leaves the route empty
netsim::ArrivalSchedule build_flow(const FlowSpec& spec, const netsim::RoadNetwork& net,
                                   uint64_t seed);

// the two canonical profiles; horizon must be 3600 s; poisson switches the
// deterministic spacing to seeded exponential gaps (totals then vary)
netsim::ArrivalSchedule build_mixed(MixedProfile profile, const netsim::RoadNetwork& net,
                                    double horizon_s, uint64_t seed, bool poisson = false,
                                    const std::vector<double>* rates_override = nullptr);

}  // namespace metavim::demand
