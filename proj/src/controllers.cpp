#include "metavim/controllers.hpp"

#include <algorithm>
#include <cmath>

namespace metavim::ctrl {

Kind parse_kind(const std::string& name) {
    if (name == "random") return Kind::Random;
    if (name == "fixedtime") return Kind::Fixedtime;
    if (name == "fixedtime_offset") return Kind::FixedtimeOffset;
    if (name == "maxpressure") return Kind::MaxPressure;
    if (name == "sotl") return Kind::Sotl;
    throw ConfigError("unknown controller kind '" + name + "'");
}

std::string kind_name(Kind k) {
    switch (k) {
        case Kind::Random: return "random";
        case Kind::Fixedtime: return "fixedtime";
        case Kind::FixedtimeOffset: return "fixedtime_offset";
        case Kind::MaxPressure: return "maxpressure";
        case Kind::Sotl: return "sotl";
    }
    return "?";
}

int fixedtime_phase(const std::vector<double>& plan, double clock_s, double offset_s) {
    if (plan.empty()) throw ConfigError("fixedtime: empty phase plan");
    double cycle = 0.0;
    for (double d : plan) {
        if (d <= 0) throw ConfigError("fixedtime: non-positive phase duration");
        cycle += d;
    }
    double t = std::fmod(clock_s + offset_s, cycle);
    if (t < 0) t += cycle;
    double acc = 0.0;
    for (size_t i = 0; i < plan.size(); ++i) {
        acc += plan[i];
        if (t < acc) return int(i) % netsim::kPhaseCount;
    }
    return int(plan.size() - 1) % netsim::kPhaseCount;
}

int random_phase(Rng& rng) { return rng.uniform_int(netsim::kPhaseCount); }

int maxpressure_phase(const netsim::SimState& state, int intersection) {
    int best = 0;
    long best_p = netsim::pressure(state, intersection, 0);
    for (int p = 1; p < netsim::kPhaseCount; ++p) {
        long v = netsim::pressure(state, intersection, p);
        if (v > best_p) {
            best_p = v;
            best = p;
        }
    }
    return best;
}

int sotl_phase(const ControllerSpec& spec, SotlState& st, const netsim::Observation& obs,
               const netsim::IntersectionNode& node, double dt_s) {
    // demand integrates stopped vehicles on non-right approaches without green
    long red_waiting = 0;
    for (int slot = 0; slot < netsim::kIncomingLanes; ++slot) {
        if (slot % 3 == netsim::kRight) continue;  // right turns never wait on phase
        if (!node.slot_permitted[size_t(st.phase)][size_t(slot)])
            red_waiting += obs.lane_counts[size_t(slot)];
    }
    st.demand_acc += double(red_waiting) * dt_s;
    st.green_elapsed += dt_s;
    if (st.green_elapsed >= spec.sotl_min_green && st.demand_acc >= spec.sotl_theta) {
        st.phase = (st.phase + 1) % netsim::kPhaseCount;
        st.green_elapsed = 0.0;
        st.demand_acc = 0.0;
    }
    return st.phase;
}

namespace {

class RandomController : public Controller {
public:
    explicit RandomController(const ControllerSpec& spec) : spec_(spec) {}
    void reset(const netsim::RoadNetwork& net) override {
        rngs_.clear();
        for (int i = 0; i < net.n(); ++i) rngs_.push_back(Rng::fork(spec_.seed, 0xc7a0, uint64_t(i)));
    }
    int decide(const netsim::SimState&, int intersection, double, double) override {
        return random_phase(rngs_[size_t(intersection)]);
    }

private:
    ControllerSpec spec_;
    std::vector<Rng> rngs_;
};

class FixedtimeController : public Controller {
public:
    FixedtimeController(const ControllerSpec& spec, bool offsets) : spec_(spec), use_offsets_(offsets) {}
    void reset(const netsim::RoadNetwork&) override {}
    int decide(const netsim::SimState&, int intersection, double clock_s, double) override {
        double off = 0.0;
        if (use_offsets_ && size_t(intersection) < spec_.offsets.size())
            off = spec_.offsets[size_t(intersection)];
        return fixedtime_phase(spec_.phase_plan, clock_s, off);
    }

private:
    ControllerSpec spec_;
    bool use_offsets_;
};

class MaxPressureController : public Controller {
public:
    void reset(const netsim::RoadNetwork&) override {}
    int decide(const netsim::SimState& state, int intersection, double, double) override {
        return maxpressure_phase(state, intersection);
    }
};

class SotlController : public Controller {
public:
    explicit SotlController(const ControllerSpec& spec) : spec_(spec) {}
    void reset(const netsim::RoadNetwork& net) override {
        states_.assign(size_t(net.n()), SotlState{});
    }
    int decide(const netsim::SimState& state, int intersection, double, double dt_s) override {
        netsim::Observation obs = netsim::observe(state, intersection);
        return sotl_phase(spec_, states_[size_t(intersection)], obs,
                          state.net->intersections[size_t(intersection)], dt_s);
    }

private:
    ControllerSpec spec_;
    std::vector<SotlState> states_;
};

}  // namespace

std::unique_ptr<Controller> make_controller(const ControllerSpec& spec) {
    switch (spec.kind) {
        case Kind::Random: return std::make_unique<RandomController>(spec);
        case Kind::Fixedtime: return std::make_unique<FixedtimeController>(spec, false);
        case Kind::FixedtimeOffset: return std::make_unique<FixedtimeController>(spec, true);
        case Kind::MaxPressure: return std::make_unique<MaxPressureController>();
        case Kind::Sotl: return std::make_unique<SotlController>(spec);
    }
    throw ConfigError("unknown controller kind");
}

}  // namespace metavim::ctrl
