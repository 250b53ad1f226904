#include "metavim/netsim.hpp"

#include <algorithm>
#include <cstring>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace metavim::netsim {

namespace {

const char* kDirNames[kDirections] = {"N", "E", "S", "W"};

int exit_arm(int dir, int turn) {
    switch (turn) {
        case kLeft: return (dir + 1) % 4;
        case kStraight: return (dir + 2) % 4;
        default: return (dir + 3) % 4;  // right
    }
}

int transit_ticks(double free_flow_s) {
    long t = std::lround(free_flow_s);
    return int(std::max(1l, t));
}

struct AdjacencyRow {
    std::string id;
    std::array<std::string, kDirections> neighbor;  // empty = boundary
    int row = -1, col = -1;
};

RoadNetwork build_from_adjacency(const std::vector<AdjacencyRow>& rows,
                                 const LaneDefaults& defaults) {
    RoadNetwork net;
    net.intersections.resize(rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
        if (net.intersection_index.count(rows[i].id))
            throw ConfigError("roadnet: duplicate intersection id '" + rows[i].id + "'");
        net.intersection_index[rows[i].id] = int(i);
    }
    for (size_t i = 0; i < rows.size(); ++i) {
        IntersectionNode& node = net.intersections[i];
        node.id = rows[i].id;
        node.index = int(i);
        node.row = rows[i].row;
        node.col = rows[i].col;
        for (int d = 0; d < kDirections; ++d) {
            const std::string& nb = rows[i].neighbor[size_t(d)];
            if (nb.empty()) continue;
            auto it = net.intersection_index.find(nb);
            if (it == net.intersection_index.end())
                throw ConfigError("roadnet: intersection '" + node.id + "' neighbors." +
                                  kDirNames[d] + " references unknown id '" + nb + "'");
            node.neighbor[size_t(d)] = it->second;
        }
    }
    for (const IntersectionNode& node : net.intersections) {
        for (int d = 0; d < kDirections; ++d) {
            int j = node.neighbor[size_t(d)];
            if (j < 0) continue;
            if (net.intersections[size_t(j)].neighbor[size_t((d + 2) % 4)] != node.index)
                throw ConfigError("roadnet: asymmetric adjacency: '" + node.id + "'.neighbors." +
                                  kDirNames[d] + " = '" + net.intersections[size_t(j)].id +
                                  "' without the reverse link");
        }
    }

    auto new_lane = [&](const std::string& id, int up, int down, int in_slot) {
        Lane l;
        l.id = id;
        l.index = int(net.lanes.size());
        l.length_m = defaults.length_m;
        l.free_flow_s = defaults.free_flow_s;
        l.capacity = defaults.capacity;
        l.sat_flow = defaults.sat_flow;
        l.upstream = up;
        l.downstream = down;
        l.in_slot = in_slot;
        net.lane_index[id] = l.index;
        net.lanes.push_back(l);
        return l.index;
    };

    // incoming lanes first: internal lanes are created when seen as an
    // incoming lane (from the upstream neighbor), boundary sides get entries
    for (IntersectionNode& node : net.intersections) {
        for (int d = 0; d < kDirections; ++d) {
            for (int s = 0; s < 3; ++s) {
                int slot = d * 3 + s;
                int j = node.neighbor[size_t(d)];
                if (j >= 0) {
                    std::string id = "ln_" + net.intersections[size_t(j)].id + "_" + node.id +
                                     "_" + std::to_string(s);
                    node.incoming[size_t(slot)] = new_lane(id, j, node.index, slot);
                } else {
                    std::string id = "entry_" + node.id + "_" + kDirNames[d] + "_" + std::to_string(s);
                    node.incoming[size_t(slot)] = new_lane(id, -1, node.index, slot);
                }
            }
        }
    }
    for (IntersectionNode& node : net.intersections) {
        for (int a = 0; a < kDirections; ++a) {
            for (int s = 0; s < 3; ++s) {
                int slot = a * 3 + s;
                int j = node.neighbor[size_t(a)];
                if (j >= 0) {
                    std::string id = "ln_" + node.id + "_" + net.intersections[size_t(j)].id +
                                     "_" + std::to_string(s);
                    node.outgoing[size_t(slot)] = net.lanes[size_t(net.require_lane(id))].index;
                } else {
                    std::string id = "exit_" + node.id + "_" + kDirNames[a] + "_" + std::to_string(s);
                    node.outgoing[size_t(slot)] = new_lane(id, node.index, -1, -1);
                }
            }
        }
    }

    // one movement per incoming lane: slot position fixes the turn
    for (IntersectionNode& node : net.intersections) {
        for (int d = 0; d < kDirections; ++d) {
            for (int s = 0; s < 3; ++s) {
                int slot = d * 3 + s;
                int arm = exit_arm(d, s);
                node.lane_movement[size_t(slot)] =
                    Movement{node.incoming[size_t(slot)], node.outgoing[size_t(arm * 3 + s)]};
            }
        }
        for (int p = 0; p < kPhaseCount; ++p) {
            for (int slot = 0; slot < kIncomingLanes; ++slot) {
                int d = slot / 3, s = slot % 3;
                bool green = false;
                if (s == kRight) green = true;
                else if (p == 0) green = (s == kStraight && (d == 0 || d == 2));
                else if (p == 1) green = (s == kLeft && (d == 0 || d == 2));
                else if (p == 2) green = (s == kStraight && (d == 1 || d == 3));
                else green = (s == kLeft && (d == 1 || d == 3));
                node.slot_permitted[size_t(p)][size_t(slot)] = green;
                if (green) node.phase_movements[size_t(p)].push_back(node.lane_movement[size_t(slot)]);
            }
        }
    }

    for (const Lane& l : net.lanes) {
        if (l.upstream < 0) net.entry_lanes.push_back(l.index);
        if (l.downstream < 0) net.exit_lanes.push_back(l.index);
    }
    return net;
}

void apply_override(Lane& lane, const nlohmann::json& o) {
    if (o.contains("length_m")) lane.length_m = o.at("length_m").get<double>();
    if (o.contains("free_flow_s")) lane.free_flow_s = o.at("free_flow_s").get<double>();
    if (o.contains("capacity")) lane.capacity = o.at("capacity").get<int>();
    if (o.contains("sat_flow")) lane.sat_flow = o.at("sat_flow").get<double>();
    if (lane.capacity < 1) throw ConfigError("roadnet: lane '" + lane.id + "' capacity must be >= 1");
    if (lane.sat_flow <= 0) throw ConfigError("roadnet: lane '" + lane.id + "' sat_flow must be > 0");
    if (lane.free_flow_s < 1) throw ConfigError("roadnet: lane '" + lane.id + "' free_flow_s must be >= 1");
}

LaneDefaults parse_defaults(const nlohmann::json& j) {
    LaneDefaults d;
    if (!j.contains("lane_defaults")) return d;
    const auto& o = j.at("lane_defaults");
    if (o.contains("length_m")) d.length_m = o.at("length_m").get<double>();
    if (o.contains("free_flow_s")) d.free_flow_s = o.at("free_flow_s").get<double>();
    if (o.contains("capacity")) d.capacity = o.at("capacity").get<int>();
    if (o.contains("sat_flow")) d.sat_flow = o.at("sat_flow").get<double>();
    if (d.capacity < 1) throw ConfigError("roadnet: lane_defaults.capacity must be >= 1");
    if (d.sat_flow <= 0) throw ConfigError("roadnet: lane_defaults.sat_flow must be > 0");
    if (d.free_flow_s < 1) throw ConfigError("roadnet: lane_defaults.free_flow_s must be >= 1");
    return d;
}

}  // namespace

int RoadNetwork::require_intersection(const std::string& id) const {
    auto it = intersection_index.find(id);
    if (it == intersection_index.end()) throw Error("unknown intersection id '" + id + "'");
    return it->second;
}

int RoadNetwork::require_lane(const std::string& id) const {
    auto it = lane_index.find(id);
    if (it == lane_index.end()) throw Error("unknown lane id '" + id + "'");
    return it->second;
}

RoadNetwork make_grid(int rows, int cols, const LaneDefaults& defaults) {
    if (rows < 1 || cols < 1) throw ConfigError("roadnet: grid.rows and grid.cols must be >= 1");
    std::vector<AdjacencyRow> adj;
    auto id_of = [](int r, int c) {
        return "int_" + std::to_string(r) + "_" + std::to_string(c);
    };
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            AdjacencyRow row;
            row.id = id_of(r, c);
            row.row = r;
            row.col = c;
            if (r > 0) row.neighbor[0] = id_of(r - 1, c);         // N
            if (c < cols - 1) row.neighbor[1] = id_of(r, c + 1);  // E
            if (r < rows - 1) row.neighbor[2] = id_of(r + 1, c);  // S
            if (c > 0) row.neighbor[3] = id_of(r, c - 1);         // W
            adj.push_back(std::move(row));
        }
    }
    return build_from_adjacency(adj, defaults);
}

RoadNetwork load_network(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("roadnet: parse error: ") + e.what());
    }
    LaneDefaults defaults = parse_defaults(j);

    RoadNetwork net;
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        if (!g.contains("rows") || !g.contains("cols"))
            throw ConfigError("roadnet: grid requires fields 'rows' and 'cols'");
        net = make_grid(g.at("rows").get<int>(), g.at("cols").get<int>(), defaults);
    } else {
        if (!j.contains("format") || j.at("format") != "metavim-roadnet-v1")
            throw ConfigError("roadnet: missing or unsupported 'format' (expect metavim-roadnet-v1)");
        if (!j.contains("intersections") || !j.at("intersections").is_array())
            throw ConfigError("roadnet: missing 'intersections' array");
        std::vector<AdjacencyRow> adj;
        for (const auto& e : j.at("intersections")) {
            AdjacencyRow row;
            if (!e.contains("id")) throw ConfigError("roadnet: intersection entry missing 'id'");
            row.id = e.at("id").get<std::string>();
            if (e.contains("grid_pos") && e.at("grid_pos").is_array() && e.at("grid_pos").size() == 2) {
                row.row = e.at("grid_pos").at(0).get<int>();
                row.col = e.at("grid_pos").at(1).get<int>();
            }
            if (e.contains("neighbors")) {
                const auto& nb = e.at("neighbors");
                for (int d = 0; d < kDirections; ++d) {
                    if (nb.contains(kDirNames[d]) && !nb.at(kDirNames[d]).is_null())
                        row.neighbor[size_t(d)] = nb.at(kDirNames[d]).get<std::string>();
                }
            }
            adj.push_back(std::move(row));
        }
        net = build_from_adjacency(adj, defaults);
    }

    if (j.contains("lane_overrides")) {
        for (const auto& o : j.at("lane_overrides")) {
            if (!o.contains("id")) throw ConfigError("roadnet: lane_overrides entry missing 'id'");
            std::string id = o.at("id").get<std::string>();
            auto it = net.lane_index.find(id);
            if (it == net.lane_index.end())
                throw ConfigError("roadnet: lane_overrides references unknown lane '" + id + "'");
            apply_override(net.lanes[size_t(it->second)], o);
        }
    }
    return net;
}

RoadNetwork load_network_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("roadnet: cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return load_network(ss.str());
}

std::vector<int> route_from_entry(const RoadNetwork& net, int entry_lane) {
    std::vector<int> route;
    int lane = entry_lane;
    size_t guard = net.lanes.size() + 1;
    while (true) {
        route.push_back(lane);
        const Lane& l = net.lanes[size_t(lane)];
        if (l.downstream < 0) break;  // exit lane, done
        if (route.size() > guard) throw Error("route walk cycled; malformed network");
        const IntersectionNode& node = net.intersections[size_t(l.downstream)];
        lane = node.lane_movement[size_t(l.in_slot)].out_lane;
    }
    return route;
}

long SimState::pending_count() const {
    long gated = 0;
    for (const LaneRt& l : lanes) gated += long(l.gate.size());
    return long(vehicles.size() - next_arrival) + gated;
}

SimState reset(const RoadNetwork& net, const ArrivalSchedule& demand, uint64_t seed) {
    SimState s;
    s.net = &net;
    s.clock = 0;
    s.phase.assign(size_t(net.n()), 0);
    s.lanes.assign(net.lanes.size(), LaneRt{});
    s.rng = Rng::fork(seed, 0x5149);
    s.vehicles.reserve(demand.arrivals.size());
    int id = 0;
    for (const Arrival& a : demand.arrivals) {
        if (a.route.empty()) throw ConfigError("demand: vehicle with empty route");
        Vehicle v;
        v.id = id++;
        v.route = a.route;
        v.entry_time = a.time;
        s.vehicles.push_back(std::move(v));
    }
    std::stable_sort(s.vehicles.begin(), s.vehicles.end(),
                     [](const Vehicle& a, const Vehicle& b) { return a.entry_time < b.entry_time; });
    return s;
}

namespace {

void tick(SimState& s) {
    const RoadNetwork& net = *s.net;

    // 1. advance in-transit vehicles; completions exit or join the stop queue
    for (size_t li = 0; li < s.lanes.size(); ++li) {
        LaneRt& lane = s.lanes[li];
        if (lane.transit.empty()) continue;
        size_t keep = 0;
        for (size_t k = 0; k < lane.transit.size(); ++k) {
            auto [vid, remaining] = lane.transit[k];
            remaining -= 1;
            if (remaining > 0) {
                lane.transit[keep++] = {vid, remaining};
                continue;
            }
            Vehicle& v = s.vehicles[size_t(vid)];
            if (v.route_pos == int(v.route.size()) - 1) {
                v.exit_time = double(s.clock);
                s.exited += 1;
            } else {
                lane.queue.push_back(vid);
            }
        }
        lane.transit.resize(keep);
    }

    // 2. signal releases, intersections in index order, movements in
    //    canonical order; per-lane fractional release credit carries over,
    //    whole-tick budget does not bank across ticks
    for (const IntersectionNode& node : net.intersections) {
        for (const Movement& m : node.phase_movements[size_t(s.phase[size_t(node.index)])]) {
            LaneRt& in = s.lanes[size_t(m.in_lane)];
            in.release_credit += net.lanes[size_t(m.in_lane)].sat_flow;
            int budget = int(std::floor(in.release_credit));
            in.release_credit -= double(budget);
            const Lane& outL = net.lanes[size_t(m.out_lane)];
            LaneRt& out = s.lanes[size_t(m.out_lane)];
            while (budget > 0 && !in.queue.empty()) {
                int vid = in.queue.front();
                Vehicle& v = s.vehicles[size_t(vid)];
                if (v.route_pos + 1 >= int(v.route.size()) ||
                    v.route[size_t(v.route_pos + 1)] != m.out_lane)
                    break;  // head vehicle not served by this movement
                if (out.occupancy() >= outL.capacity) break;  // spillback
                in.queue.pop_front();
                v.route_pos += 1;
                out.transit.emplace_back(vid, transit_ticks(outL.free_flow_s));
                budget -= 1;
            }
        }
    }

    // 3. admissions: due arrivals queue at their entry lane's gate, gates
    //    drain FIFO while the lane has spare capacity
    while (s.next_arrival < s.vehicles.size() &&
           s.vehicles[s.next_arrival].entry_time < double(s.clock + 1)) {
        Vehicle& v = s.vehicles[s.next_arrival];
        s.lanes[size_t(v.route[0])].gate.push_back(v.id);
        s.next_arrival += 1;
    }
    for (size_t li = 0; li < s.lanes.size(); ++li) {
        LaneRt& lane = s.lanes[li];
        const Lane& l = net.lanes[li];
        while (!lane.gate.empty() && lane.occupancy() < l.capacity) {
            int vid = lane.gate.front();
            lane.gate.pop_front();
            Vehicle& v = s.vehicles[size_t(vid)];
            v.route_pos = 0;
            lane.transit.emplace_back(vid, transit_ticks(l.free_flow_s));
            s.entered += 1;
        }
    }

    s.clock += 1;
}

}  // namespace

void step(SimState& state, const std::vector<int>& actions, int dt_s) {
    const RoadNetwork& net = *state.net;
    if (int(actions.size()) != net.n())
        throw Error("step: expected " + std::to_string(net.n()) + " actions, got " +
                    std::to_string(actions.size()));
    for (size_t i = 0; i < actions.size(); ++i) {
        if (actions[i] < 0 || actions[i] >= kPhaseCount)
            throw Error("step: action " + std::to_string(actions[i]) + " for intersection '" +
                        net.intersections[i].id + "' outside {0..3}");
    }
    if (dt_s < 1) throw Error("step: dt must be >= 1 second");
    for (size_t i = 0; i < actions.size(); ++i) state.phase[i] = actions[i];
    for (int t = 0; t < dt_s; ++t) tick(state);
}

Observation observe(const SimState& state, int intersection) {
    const RoadNetwork& net = *state.net;
    if (intersection < 0 || intersection >= net.n())
        throw Error("observe: unknown intersection index " + std::to_string(intersection));
    const IntersectionNode& node = net.intersections[size_t(intersection)];
    Observation o;
    for (int k = 0; k < kIncomingLanes; ++k)
        o.lane_counts[size_t(k)] = state.lanes[size_t(node.incoming[size_t(k)])].occupancy();
    o.phase_onehot[size_t(state.phase[size_t(intersection)])] = 1;
    return o;
}

Observation observe(const SimState& state, const std::string& intersection_id) {
    return observe(state, state.net->require_intersection(intersection_id));
}

Vec observation_vector(const SimState& state, int intersection, bool normalized) {
    const RoadNetwork& net = *state.net;
    const IntersectionNode& node = net.intersections[size_t(intersection)];
    Observation o = observe(state, intersection);
    Vec v(size_t(kObsDim), 0.0);
    for (int k = 0; k < kIncomingLanes; ++k) {
        double cap = double(net.lanes[size_t(node.incoming[size_t(k)])].capacity);
        v[size_t(k)] = normalized ? double(o.lane_counts[size_t(k)]) / cap
                                  : double(o.lane_counts[size_t(k)]);
    }
    for (int p = 0; p < kPhaseCount; ++p)
        v[size_t(kIncomingLanes + p)] = double(o.phase_onehot[size_t(p)]);
    return v;
}

long queue_length(const SimState& state, int intersection, bool include_transit) {
    const RoadNetwork& net = *state.net;
    if (intersection < 0 || intersection >= net.n())
        throw Error("queue_length: unknown intersection index " + std::to_string(intersection));
    const IntersectionNode& node = net.intersections[size_t(intersection)];
    long q = 0;
    for (int k = 0; k < kIncomingLanes; ++k) {
        const LaneRt& l = state.lanes[size_t(node.incoming[size_t(k)])];
        q += long(l.queue.size());
        if (include_transit) q += long(l.transit.size());
    }
    return q;
}

long queue_length(const SimState& state, const std::string& intersection_id, bool include_transit) {
    return queue_length(state, state.net->require_intersection(intersection_id), include_transit);
}

long pressure(const SimState& state, int intersection, int phase) {
    const RoadNetwork& net = *state.net;
    if (intersection < 0 || intersection >= net.n())
        throw Error("pressure: unknown intersection index " + std::to_string(intersection));
    if (phase < 0 || phase >= kPhaseCount)
        throw Error("pressure: unknown phase " + std::to_string(phase));
    const IntersectionNode& node = net.intersections[size_t(intersection)];
    long p = 0;
    for (const Movement& m : node.phase_movements[size_t(phase)]) {
        p += long(state.lanes[size_t(m.in_lane)].occupancy());
        p -= long(state.lanes[size_t(m.out_lane)].occupancy());
    }
    return p;
}

double average_travel_time(const SimState& state) {
    if (state.vehicles.empty())
        throw Error("average_travel_time: no vehicles spawned, metric undefined");
    double total = 0.0;
    for (const Vehicle& v : state.vehicles) {
        if (v.exit_time >= 0.0)
            total += v.exit_time - v.entry_time;
        else
            total += std::max(0.0, double(state.clock) - v.entry_time);
    }
    return total / double(state.vehicles.size());
}

void check_conservation(const SimState& state) {
    const RoadNetwork& net = *state.net;
    long physical = 0;
    for (size_t li = 0; li < state.lanes.size(); ++li) {
        const LaneRt& l = state.lanes[li];
        physical += l.occupancy();
        if (l.occupancy() > net.lanes[li].capacity)
            throw Error("conservation: lane '" + net.lanes[li].id + "' over capacity at t=" +
                        std::to_string(state.clock));
    }
    if (physical != state.entered - state.exited)
        throw Error("conservation: entered - exited = " +
                    std::to_string(state.entered - state.exited) + " but " +
                    std::to_string(physical) + " vehicles on network at t=" +
                    std::to_string(state.clock));
    long accounted = physical + state.exited + state.pending_count();
    if (accounted != long(state.vehicles.size()))
        throw Error("conservation: vehicles unaccounted for at t=" + std::to_string(state.clock));
}

uint64_t state_digest(const SimState& state) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed_u64 = [&h](uint64_t x) {
        for (int i = 0; i < 8; ++i) {
            h ^= (x >> (8 * i)) & 0xff;
            h *= 0x100000001b3ull;
        }
    };
    auto feed_double = [&](double d) {
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(d));
        std::memcpy(&bits, &d, sizeof(bits));
        feed_u64(bits);
    };
    feed_u64(uint64_t(state.clock));
    feed_u64(uint64_t(state.entered));
    feed_u64(uint64_t(state.exited));
    feed_u64(uint64_t(state.next_arrival));
    for (int p : state.phase) feed_u64(uint64_t(p));
    for (const LaneRt& l : state.lanes) {
        feed_u64(0x1111);
        for (auto [vid, rem] : l.transit) {
            feed_u64(uint64_t(vid));
            feed_u64(uint64_t(rem));
        }
        feed_u64(0x2222);
        for (int vid : l.queue) feed_u64(uint64_t(vid));
        feed_u64(0x3333);
        for (int vid : l.gate) feed_u64(uint64_t(vid));
        feed_double(l.release_credit);
    }
    for (const Vehicle& v : state.vehicles) {
        feed_double(v.entry_time);
        feed_double(v.exit_time);
        feed_u64(uint64_t(int64_t(v.route_pos)));
    }
    return h;
}

}  // namespace metavim::netsim
