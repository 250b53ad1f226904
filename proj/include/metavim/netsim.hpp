#pragma once

// Deterministic discrete-time lane-queue traffic simulator. Lanes carry an
// in-transit list (vehicles driving the lane at free-flow speed) and a FIFO
// stop queue at the downstream signal. Signals gate movements per phase;
// permitted movements release up to saturation_flow vehicles per second into
// the downstream lane while it has spare capacity. Everything is integer-tick
// (1 s) and fully determined by (network, schedule, seed, actions).

#include <array>
#include <deque>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "metavim/common.hpp"

namespace metavim::netsim {

constexpr int kPhaseCount = 4;        // NS-straight, NS-left, EW-straight, EW-left
constexpr int kIncomingLanes = 12;    // (N,E,S,W) x (left, straight, right)
constexpr int kDirections = 4;        // N=0, E=1, S=2, W=3
constexpr int kObsDim = kIncomingLanes + kPhaseCount;

enum Turn { kLeft = 0, kStraight = 1, kRight = 2 };

struct LaneDefaults {
    double length_m = 300.0;
    double free_flow_s = 20.0;
    int capacity = 40;
    double sat_flow = 1.0;  // vehicles per second releasable on green
};

struct Lane {
    std::string id;
    int index = -1;
    double length_m = 300.0;
    double free_flow_s = 20.0;
    int capacity = 40;
    double sat_flow = 1.0;
    int upstream = -1;    // intersection index, -1 = network boundary
    int downstream = -1;  // intersection index, -1 = network boundary
    int in_slot = -1;     // canonical incoming index at downstream, -1 if exit lane
};

struct Movement {
    int in_lane = -1;
    int out_lane = -1;
};

struct IntersectionNode {
    std::string id;
    int index = -1;
    int row = -1, col = -1;
    std::array<int, kDirections> neighbor{-1, -1, -1, -1};
    std::array<int, kIncomingLanes> incoming{};
    std::array<int, kIncomingLanes> outgoing{};
    // movement served by each incoming lane (one turn per lane)
    std::array<Movement, kIncomingLanes> lane_movement{};
    // permitted movements per phase, right turns included everywhere
    std::array<std::vector<Movement>, kPhaseCount> phase_movements{};
    // permitted flag per (phase, incoming slot)
    std::array<std::array<bool, kIncomingLanes>, kPhaseCount> slot_permitted{};
};

struct RoadNetwork {
    std::vector<IntersectionNode> intersections;
    std::vector<Lane> lanes;
    std::vector<int> entry_lanes;
    std::vector<int> exit_lanes;
    std::unordered_map<std::string, int> intersection_index;
    std::unordered_map<std::string, int> lane_index;

    int n() const { return int(intersections.size()); }
    int require_intersection(const std::string& id) const;
    int require_lane(const std::string& id) const;
};

// Grid generator: rows x cols 4-way intersections, boundary arms get entry
// and exit lanes. Canonical ids: intersections "int_<r>_<c>", internal lanes
// "ln_<from>_<to>_<slot>", boundary "entry_/exit_<int>_<dir>_<slot>".
RoadNetwork make_grid(int rows, int cols, const LaneDefaults& defaults = {});

// "metavim-roadnet-v1" document: either explicit intersections with a
// neighbors map, or the {"grid": {"rows": R, "cols": C}} shorthand.
RoadNetwork load_network(const std::string& json_text);
RoadNetwork load_network_file(const std::string& path);

// deterministic lane walk from an entry lane to its exit lane
std::vector<int> route_from_entry(const RoadNetwork& net, int entry_lane);

struct Arrival {
    double time = 0.0;
    std::vector<int> route;  // lane indices, entry lane first
};

struct ArrivalSchedule {
    std::vector<Arrival> arrivals;  // sorted by time
    double horizon_s = 3600.0;
};

struct Vehicle {
    int id = -1;
    std::vector<int> route;
    double entry_time = 0.0;
    double exit_time = -1.0;  // -1 = still pending or on-network
    int route_pos = -1;       // index into route, -1 before admission
};

struct LaneRt {
    std::vector<std::pair<int, int>> transit;  // (vehicle id, remaining ticks)
    std::deque<int> queue;                     // vehicle ids, head released first
    std::deque<int> gate;                      // scheduled vehicles waiting to enter (entry lanes)
    double release_credit = 0.0;

    int occupancy() const { return int(transit.size() + queue.size()); }
};

struct SimState {
    const RoadNetwork* net = nullptr;
    long clock = 0;  // seconds
    std::vector<int> phase;
    std::vector<LaneRt> lanes;
    std::vector<Vehicle> vehicles;  // all scheduled vehicles
    size_t next_arrival = 0;
    long entered = 0;
    long exited = 0;
    Rng rng;

    long on_network() const { return entered - exited; }
    long pending_count() const;  // scheduled but not yet on network
};

struct Observation {
    std::array<int, kIncomingLanes> lane_counts{};
    std::array<int, kPhaseCount> phase_onehot{};
};

SimState reset(const RoadNetwork& net, const ArrivalSchedule& demand, uint64_t seed);

// Applies one phase action per intersection and simulates dt_s one-second
// ticks. dt_s is the control interval (default 5 in the harness).
void step(SimState& state, const std::vector<int>& actions, int dt_s);

Observation observe(const SimState& state, int intersection);
Observation observe(const SimState& state, const std::string& intersection_id);

// 16-dim vector [counts, phase one-hot]; normalized divides counts by lane capacity
Vec observation_vector(const SimState& state, int intersection, bool normalized);

// stopped vehicles on the incoming lanes; include_transit counts moving ones too
long queue_length(const SimState& state, int intersection, bool include_transit = false);
long queue_length(const SimState& state, const std::string& intersection_id,
                  bool include_transit = false);

// sum over the phase's permitted movements of (incoming count - outgoing count)
long pressure(const SimState& state, int intersection, int phase);

// mean travel time over all scheduled vehicles; vehicles still on the network
// (or never admitted) contribute clock - entry_time, clamped at 0
double average_travel_time(const SimState& state);

// entered == on-network + exited, physical lane scan agrees with counters,
// and no lane exceeds capacity; throws Error with details on violation
void check_conservation(const SimState& state);

uint64_t state_digest(const SimState& state);

}  // namespace metavim::netsim
