#include "metavim/demand.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace metavim::demand {

const std::vector<double> kMixedLowRates = {0.30, 0.55, 1.05, 1.05, 0.55, 0.75};
const std::vector<double> kMixedHighRates = {0.33, 0.55, 4.00, 1.52, 1.22, 0.33};

namespace {

constexpr double kIntervalS = 600.0;

std::vector<int> resolve_route(const std::vector<std::string>& ids,
                               const netsim::RoadNetwork& net) {
    if (ids.empty()) throw ConfigError("flow: vehicle route must not be empty");
    std::vector<int> route;
    route.reserve(ids.size());
    for (const std::string& id : ids) {
        auto it = net.lane_index.find(id);
        if (it == net.lane_index.end())
            throw ConfigError("flow: route references unknown lane '" + id + "'");
        route.push_back(it->second);
    }
    // hops must follow the lane movement graph
    for (size_t k = 0; k + 1 < route.size(); ++k) {
        const netsim::Lane& l = net.lanes[size_t(route[k])];
        if (l.downstream < 0)
            throw ConfigError("flow: route continues past exit lane '" + l.id + "'");
        const netsim::IntersectionNode& node = net.intersections[size_t(l.downstream)];
        if (node.lane_movement[size_t(l.in_slot)].out_lane != route[k + 1])
            throw ConfigError("flow: route hop '" + l.id + "' -> '" +
                              net.lanes[size_t(route[k + 1])].id + "' is not a movement");
    }
    if (net.lanes[size_t(route.back())].downstream >= 0)
        throw ConfigError("flow: route must end at an exit lane, got '" +
                          net.lanes[size_t(route.back())].id + "'");
    return route;
}

std::vector<int> random_route(const netsim::RoadNetwork& net, Rng& rng) {
    int entry = net.entry_lanes[size_t(rng.uniform_int(int(net.entry_lanes.size())))];
    return netsim::route_from_entry(net, entry);
}

void sort_schedule(netsim::ArrivalSchedule& s) {
    std::stable_sort(s.arrivals.begin(), s.arrivals.end(),
                     [](const netsim::Arrival& a, const netsim::Arrival& b) { return a.time < b.time; });
}

}  // namespace

FlowSpec parse_flow(const std::string& json_text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(json_text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("flow: parse error: ") + e.what());
    }
    if (!j.contains("format") || j.at("format") != "metavim-flow-v1")
        throw ConfigError("flow: missing or unsupported 'format' (expect metavim-flow-v1)");
    FlowSpec spec;
    if (j.contains("horizon_s")) spec.horizon_s = j.at("horizon_s").get<double>();
    if (j.contains("vehicles")) {
        for (const auto& v : j.at("vehicles")) {
            FlowVehicle fv;
            if (!v.contains("route")) throw ConfigError("flow: vehicles entry missing 'route'");
            fv.route = v.at("route").get<std::vector<std::string>>();
            if (!v.contains("entry_time_s")) throw ConfigError("flow: vehicles entry missing 'entry_time_s'");
            fv.entry_time_s = v.at("entry_time_s").get<double>();
            if (fv.entry_time_s < 0 || fv.entry_time_s > spec.horizon_s)
                throw ConfigError("flow: entry_time_s outside [0, horizon]");
            spec.vehicles.push_back(std::move(fv));
        }
    }
    if (j.contains("segments")) {
        for (const auto& sj : j.at("segments")) {
            FlowSegment seg;
            if (sj.contains("route")) seg.route = sj.at("route").get<std::vector<std::string>>();
            seg.start_s = sj.at("start_s").get<double>();
            seg.end_s = sj.at("end_s").get<double>();
            seg.rate = sj.at("rate").get<double>();
            if (!(seg.start_s >= 0 && seg.start_s < seg.end_s && seg.end_s <= spec.horizon_s))
                throw ConfigError("flow: segment requires 0 <= start_s < end_s <= horizon");
            if (seg.rate < 0) throw ConfigError("flow: segment rate must be >= 0");
            spec.segments.push_back(std::move(seg));
        }
    }
    return spec;
}

FlowSpec parse_flow_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("flow: cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_flow(ss.str());
}

netsim::ArrivalSchedule build_replay(const FlowSpec& spec, const netsim::RoadNetwork& net) {
    netsim::ArrivalSchedule sched;
    sched.horizon_s = spec.horizon_s;
    for (const FlowVehicle& v : spec.vehicles) {
        netsim::Arrival a;
        a.time = v.entry_time_s;
        a.route = resolve_route(v.route, net);
        sched.arrivals.push_back(std::move(a));
    }
    sort_schedule(sched);
    return sched;
}

netsim::ArrivalSchedule build_flow(const FlowSpec& spec, const netsim::RoadNetwork& net,
                                   uint64_t seed) {
    netsim::ArrivalSchedule sched = build_replay(spec, net);
    Rng rng = Rng::fork(seed, 0xf10b);
    for (const FlowSegment& seg : spec.segments) {
        double span = seg.end_s - seg.start_s;
        long count = std::llround(seg.rate * span);
        if (count <= 0) continue;
        double spacing = span / double(count);
        std::vector<int> fixed_route;
        if (!seg.route.empty()) fixed_route = resolve_route(seg.route, net);
        for (long k = 0; k < count; ++k) {
            netsim::Arrival a;
            a.time = seg.start_s + double(k) * spacing;
            a.route = fixed_route.empty() ? random_route(net, rng) : fixed_route;
            sched.arrivals.push_back(std::move(a));
        }
    }
    sort_schedule(sched);
    return sched;
}

netsim::ArrivalSchedule build_mixed(MixedProfile profile, const netsim::RoadNetwork& net,
                                    double horizon_s, uint64_t seed, bool poisson,
                                    const std::vector<double>* rates_override) {
    if (horizon_s != 3600.0)
        throw ConfigError("mixed profiles are defined for a 3600 s horizon, got " +
                          std::to_string(horizon_s));
    const std::vector<double>& rates = rates_override
                                           ? *rates_override
                                           : (profile == MixedProfile::Low ? kMixedLowRates
                                                                           : kMixedHighRates);
    if (rates.size() != 6) throw ConfigError("mixed profile needs 6 interval rates");

    netsim::ArrivalSchedule sched;
    sched.horizon_s = horizon_s;
    Rng rng = Rng::fork(seed, profile == MixedProfile::Low ? 0x10 : 0x11);
    for (size_t iv = 0; iv < rates.size(); ++iv) {
        double t0 = double(iv) * kIntervalS;
        double rate = rates[iv];
        if (rate <= 0) continue;
        if (poisson) {
            double t = t0 + (-std::log(1.0 - rng.uniform()) / rate);
            while (t < t0 + kIntervalS) {
                netsim::Arrival a;
                a.time = t;
                a.route = random_route(net, rng);
                sched.arrivals.push_back(std::move(a));
                t += -std::log(1.0 - rng.uniform()) / rate;
            }
        } else {
            long count = std::llround(rate * kIntervalS);
            double spacing = kIntervalS / double(count);
            for (long k = 0; k < count; ++k) {
                netsim::Arrival a;
                a.time = t0 + double(k) * spacing;
                a.route = random_route(net, rng);
                sched.arrivals.push_back(std::move(a));
            }
        }
    }
    sort_schedule(sched);
    return sched;
}

}  // namespace metavim::demand
