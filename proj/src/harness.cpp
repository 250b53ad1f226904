#include "metavim/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace metavim::harness {

namespace {

double now_s() {
    using namespace std::chrono;
    return duration<double>(steady_clock::now().time_since_epoch()).count();
}

agent::IntrinsicTerms terms_for(Variant v) {
    switch (v) {
        case Variant::Full: return {true, true};
        case Variant::LatentTran: return {false, true};   // observation gap only
        case Variant::LatentRew: return {true, false};    // reward gap only
        default: return {false, false};
    }
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

}  // namespace

VariantSpec parse_variant(const std::string& name) {
    VariantSpec s;
    if (name.rfind("classical:", 0) == 0) {
        s.classical = true;
        s.kind = ctrl::parse_kind(name.substr(10));
        return s;
    }
    if (name == "baseline") s.v = Variant::Baseline;
    else if (name == "latent" || name == "+m_i") s.v = Variant::Latent;
    else if (name == "latent+tran_rs") s.v = Variant::LatentTran;
    else if (name == "latent+rew_rs") s.v = Variant::LatentRew;
    else if (name == "full") s.v = Variant::Full;
    else throw ConfigError("unknown variant '" + name + "'");
    return s;
}

std::string variant_name(Variant v) {
    switch (v) {
        case Variant::Baseline: return "baseline";
        case Variant::Latent: return "latent";
        case Variant::LatentTran: return "latent+tran_rs";
        case Variant::LatentRew: return "latent+rew_rs";
        case Variant::Full: return "full";
    }
    return "?";
}

ExperimentConfig config_from_json_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const std::exception& e) {
        throw ConfigError(std::string("config: parse error: ") + e.what());
    }
    ExperimentConfig cfg;
    if (j.contains("roadnet")) {
        const auto& r = j.at("roadnet");
        if (r.is_string()) {
            cfg.roadnet_path = r.get<std::string>();
        } else if (r.is_object() && r.contains("grid")) {
            cfg.grid_rows = r.at("grid").at("rows").get<int>();
            cfg.grid_cols = r.at("grid").at("cols").get<int>();
        } else {
            throw ConfigError("config: roadnet must be a path or {\"grid\": {rows, cols}}");
        }
    }
    if (j.contains("flow")) cfg.flow = j.at("flow").get<std::string>();
    if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    if (j.contains("iterations")) cfg.iterations = j.at("iterations").get<int>();
    if (j.contains("horizon_s")) cfg.horizon_s = j.at("horizon_s").get<int>();
    if (j.contains("control_interval_s")) cfg.control_interval_s = j.at("control_interval_s").get<int>();
    if (j.contains("variant")) cfg.variant = j.at("variant").get<std::string>();
    if (j.contains("eval_mode")) cfg.eval_mode = j.at("eval_mode").get<std::string>();
    if (j.contains("threads")) cfg.threads = j.at("threads").get<int>();
    if (j.contains("ablate_flows")) cfg.ablate_flows = j.at("ablate_flows").get<std::vector<std::string>>();

    if (j.contains("sim")) {
        const auto& s = j.at("sim");
        if (s.contains("lane_length_m")) cfg.sim.lane_defaults.length_m = s.at("lane_length_m").get<double>();
        if (s.contains("free_flow_s")) cfg.sim.lane_defaults.free_flow_s = s.at("free_flow_s").get<double>();
        if (s.contains("capacity")) cfg.sim.lane_defaults.capacity = s.at("capacity").get<int>();
        if (s.contains("sat_flow")) cfg.sim.lane_defaults.sat_flow = s.at("sat_flow").get<double>();
        if (s.contains("queue_counts_transit")) cfg.sim.queue_counts_transit = s.at("queue_counts_transit").get<bool>();
        if (s.contains("poisson_arrivals")) cfg.sim.poisson_arrivals = s.at("poisson_arrivals").get<bool>();
    }
    if (j.contains("hyper")) {
        const auto& h = j.at("hyper");
        Hyper& y = cfg.hyper;
        auto get = [&](const char* k, auto& field) {
            using T = std::decay_t<decltype(field)>;
            if (h.contains(k)) field = h.at(k).get<T>();
        };
        get("discount", y.discount);
        get("gae_lambda", y.gae_lambda);
        get("ppo_clip", y.ppo_clip);
        get("ppo_epochs", y.ppo_epochs);
        get("policy_minibatch", y.policy_minibatch);
        get("value_loss_coef", y.value_loss_coef);
        get("entropy_coef", y.entropy_coef);
        get("policy_lr", y.policy_lr);
        get("adam_eps", y.adam_eps);
        get("mvae_minibatch", y.mvae_minibatch);
        get("mvae_lr", y.mvae_lr);
        get("elbo_coef", y.elbo_coef);
        get("elbo_stride", y.elbo_stride);
        get("vae_buffer_capacity", y.vae_buffer_capacity);
        get("rollout_capacity", y.rollout_capacity);
        get("latent_dim", y.latent_dim);
        get("gru_hidden", y.gru_hidden);
        get("embed_hidden", y.embed_hidden);
        get("decoder_hidden", y.decoder_hidden);
        get("policy_hidden", y.policy_hidden);
        get("intrinsic_alpha", y.intrinsic_alpha);
        get("reward_weight", y.reward_weight);
        get("q_scale", y.q_scale);
    }
    if (j.contains("controller")) {
        const auto& c = j.at("controller");
        if (c.contains("kind")) cfg.controller.kind = ctrl::parse_kind(c.at("kind").get<std::string>());
        if (c.contains("phase_plan")) cfg.controller.phase_plan = c.at("phase_plan").get<std::vector<double>>();
        if (c.contains("offsets")) cfg.controller.offsets = c.at("offsets").get<std::vector<double>>();
        if (c.contains("sotl_theta")) cfg.controller.sotl_theta = c.at("sotl_theta").get<double>();
        if (c.contains("sotl_min_green")) cfg.controller.sotl_min_green = c.at("sotl_min_green").get<double>();
    }

    if (cfg.horizon_s <= 0 || cfg.control_interval_s <= 0 ||
        cfg.horizon_s % cfg.control_interval_s != 0)
        throw ConfigError("config: horizon_s must be a positive multiple of control_interval_s");
    if (cfg.iterations < 0) throw ConfigError("config: iterations must be >= 0");
    if (cfg.seeds.empty()) throw ConfigError("config: seeds must not be empty");
    if (cfg.eval_mode != "greedy" && cfg.eval_mode != "sample")
        throw ConfigError("config: eval_mode must be 'greedy' or 'sample'");
    parse_variant(cfg.variant);
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json_text(ss.str());
}

netsim::RoadNetwork build_network(const ExperimentConfig& cfg) {
    if (!cfg.roadnet_path.empty()) return netsim::load_network_file(cfg.roadnet_path);
    return netsim::make_grid(cfg.grid_rows, cfg.grid_cols, cfg.sim.lane_defaults);
}

netsim::ArrivalSchedule build_schedule(const ExperimentConfig& cfg,
                                       const netsim::RoadNetwork& net, uint64_t seed) {
    if (cfg.flow == "mixed_low")
        return demand::build_mixed(demand::MixedProfile::Low, net, double(cfg.horizon_s), seed,
                                   cfg.sim.poisson_arrivals);
    if (cfg.flow == "mixed_high")
        return demand::build_mixed(demand::MixedProfile::High, net, double(cfg.horizon_s), seed,
                                   cfg.sim.poisson_arrivals);
    demand::FlowSpec spec = demand::parse_flow_file(cfg.flow);
    if (spec.horizon_s > double(cfg.horizon_s))
        throw ConfigError("config: flow horizon exceeds episode horizon");
    return demand::build_flow(spec, net, seed);
}

std::string metrics_header() {
    return "iteration,seed,avg_travel_time_s,ext_reward,int_reward,mean_queue,elbo_loss,"
           "policy_loss,value_loss,entropy,wall_s";
}

std::string metrics_csv_line(const MetricsRow& r) {
    std::string out = std::to_string(r.iteration) + "," + std::to_string(r.seed);
    for (double v : {r.avg_travel_time_s, r.ext_reward, r.int_reward, r.mean_queue, r.elbo_loss,
                     r.policy_loss, r.value_loss, r.entropy, r.wall_s})
        out += "," + fmt(v);
    return out;
}

void write_metrics_csv(const std::string& path, std::span<const MetricsRow> rows) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open metrics file for writing: " + path);
    out << metrics_header() << "\n";
    for (const MetricsRow& r : rows) out << metrics_csv_line(r) << "\n";
}

namespace {

void write_svg_series(const std::string& path, const std::string& title,
                      const std::vector<double>& ys) {
    if (ys.empty()) return;
    const int w = 640, h = 360, pad = 45;
    double lo = ys[0], hi = ys[0];
    for (double v : ys) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi - lo < 1e-12) hi = lo + 1.0;
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open plot file for writing: " + path);
    out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    out << "<rect width='100%' height='100%' fill='white'/>\n";
    out << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='14'>" << title
        << "</text>\n";
    out << "<line x1='" << pad << "' y1='" << h - pad << "' x2='" << w - pad << "' y2='" << h - pad
        << "' stroke='black'/>\n";
    out << "<line x1='" << pad << "' y1='" << pad << "' x2='" << pad << "' y2='" << h - pad
        << "' stroke='black'/>\n";
    out << "<text x='" << pad << "' y='" << pad - 8 << "' font-size='11'>" << fmt(hi) << "</text>\n";
    out << "<text x='" << pad << "' y='" << h - pad + 14 << "' font-size='11'>" << fmt(lo)
        << "</text>\n";
    out << "<polyline fill='none' stroke='steelblue' stroke-width='1.5' points='";
    for (size_t i = 0; i < ys.size(); ++i) {
        double x = pad + (double(i) / std::max<size_t>(1, ys.size() - 1)) * (w - 2 * pad);
        double y = (h - pad) - (ys[i] - lo) / (hi - lo) * (h - 2 * pad);
        out << fmt(x) << "," << fmt(y) << " ";
    }
    out << "'/>\n</svg>\n";
}

}  // namespace

void write_metrics_plots(const std::string& dir, std::span<const MetricsRow> rows) {
    std::filesystem::create_directories(dir);
    auto series = [&](auto getter) {
        std::vector<double> ys;
        for (const MetricsRow& r : rows) ys.push_back(getter(r));
        return ys;
    };
    write_svg_series(dir + "/avg_travel_time.svg", "average travel time (s)",
                     series([](const MetricsRow& r) { return r.avg_travel_time_s; }));
    write_svg_series(dir + "/elbo_loss.svg", "mVAE loss",
                     series([](const MetricsRow& r) { return r.elbo_loss; }));
    write_svg_series(dir + "/policy_loss.svg", "policy loss",
                     series([](const MetricsRow& r) { return r.policy_loss; }));
    write_svg_series(dir + "/entropy.svg", "policy entropy",
                     series([](const MetricsRow& r) { return r.entropy; }));
}

Models create_models(nn::ParamStore& store, const Hyper& hyper, Variant variant, Rng& rng) {
    Models m;
    agent::PolicyDims pd;
    pd.latent_dim = hyper.latent_dim;
    pd.hidden = hyper.policy_hidden;
    m.pi = agent::Policy::create(store, pd, rng);
    if (variant != Variant::Baseline) {
        belief::EncoderDims ed;
        ed.embed_hidden = hyper.embed_hidden;
        ed.gru_hidden = hyper.gru_hidden;
        ed.latent_dim = hyper.latent_dim;
        ed.reward_scale = 1.0 / hyper.q_scale;
        m.enc = belief::Encoder::create(store, ed, rng);
        m.has_encoder = true;
        wm::DecoderDims dd;
        dd.latent_dim = hyper.latent_dim;
        dd.hidden = hyper.decoder_hidden;
        dd.q_scale = hyper.q_scale;
        m.dec = wm::DecoderSet::create(store, dd, rng);
        m.has_decoders = true;
    }
    return m;
}

Models bind_models(const nn::ParamStore& store, const nn::CkptMeta& meta) {
    Models m;
    agent::PolicyDims pd;
    pd.obs_dim = meta.obs_dim;
    pd.n_actions = meta.n_actions;
    pd.latent_dim = meta.latent_dim;
    pd.hidden = meta.policy_hidden;
    m.pi = agent::Policy::bind(store, pd);
    if (store.has("enc/embed/W")) {
        belief::EncoderDims ed;
        ed.obs_dim = meta.obs_dim;
        ed.n_actions = meta.n_actions;
        ed.embed_hidden = meta.embed_hidden;
        ed.gru_hidden = meta.gru_hidden;
        ed.latent_dim = meta.latent_dim;
        ed.reward_scale = 1.0 / meta.q_scale;
        m.enc = belief::Encoder::bind(store, ed);
        m.has_encoder = true;
    }
    if (store.has("dec/r_self/l0/W")) {
        wm::DecoderDims dd;
        dd.obs_dim = meta.obs_dim;
        dd.n_actions = meta.n_actions;
        dd.latent_dim = meta.latent_dim;
        dd.hidden = meta.dec_hidden;
        dd.q_scale = meta.q_scale;
        m.dec = wm::DecoderSet::bind(store, dd);
        m.has_decoders = true;
    }
    return m;
}

nn::CkptMeta make_ckpt_meta(const Hyper& hyper, const std::string& variant) {
    nn::CkptMeta meta;
    meta.latent_dim = hyper.latent_dim;
    meta.embed_hidden = hyper.embed_hidden;
    meta.gru_hidden = hyper.gru_hidden;
    meta.dec_hidden = hyper.decoder_hidden;
    meta.policy_hidden = hyper.policy_hidden;
    meta.q_scale = hyper.q_scale;
    meta.variant = variant;
    return meta;
}

EpisodeResult run_policy_episode(const ExperimentConfig& cfg, const netsim::RoadNetwork& net,
                                 const netsim::ArrivalSchedule& sched,
                                 const nn::ParamStore& store, const Models& models,
                                 const EpisodeOptions& opt, uint64_t noise_seed,
                                 std::vector<agent::RolloutBuffer>* rollouts) {
    const int n = net.n();
    const int steps = cfg.horizon_s / cfg.control_interval_s;
    const agent::IntrinsicTerms terms = terms_for(opt.variant);
    const bool use_intrinsic = models.has_decoders && (terms.reward || terms.obs);
    const bool collect_traj = opt.collect && models.has_decoders;
    const int L = cfg.hyper.latent_dim;
    const bool par = opt.threads != 1 && n > 1;

    netsim::SimState state = netsim::reset(net, sched, noise_seed);

    std::vector<belief::LatentBelief> beliefs;
    if (models.has_encoder) {
        beliefs.reserve(size_t(n));
        for (int i = 0; i < n; ++i) beliefs.push_back(belief::reset_belief(store, models.enc));
    }
    std::vector<Rng> act_rng, noise_rng;
    for (int i = 0; i < n; ++i) {
        act_rng.push_back(Rng::fork(noise_seed, 0xac7, uint64_t(i)));
        noise_rng.push_back(Rng::fork(noise_seed, 0x105e, uint64_t(i)));
    }

    EpisodeResult res;
    if (collect_traj) res.trajectories.assign(size_t(n), belief::Trajectory{});
    for (int i = 0; i < n && collect_traj; ++i) res.trajectories[size_t(i)].task_id = i;

    std::vector<Vec> obs(size_t(n)), next_obs(size_t(n)), latents(size_t(n));
    std::vector<agent::ActResult> acts(size_t(n));
    std::vector<int> actions(size_t(n), 0);
    std::vector<double> r_int(size_t(n), 0.0);
    std::vector<belief::TrajectoryStep> steps_buf(size_t(n));

    double ext_total = 0.0, int_total = 0.0, queue_total = 0.0;

    for (int s = 0; s < steps; ++s) {
        for (int i = 0; i < n; ++i) obs[size_t(i)] = netsim::observation_vector(state, i, true);

#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
        for (int i = 0; i < n; ++i) {
            Vec m(size_t(L), 0.0);
            if (models.has_encoder) {
                const belief::LatentBelief& b = beliefs[size_t(i)];
                for (int d = 0; d < L; ++d) {
                    double eps = (opt.mode == agent::ActMode::Sample) ? noise_rng[size_t(i)].normal() : 0.0;
                    m[size_t(d)] = b.mu[size_t(d)] + b.sigma[size_t(d)] * eps;
                }
            }
            latents[size_t(i)] = m;
            acts[size_t(i)] = agent::act(store, models.pi, obs[size_t(i)], m, opt.mode,
                                         &act_rng[size_t(i)]);
            actions[size_t(i)] = acts[size_t(i)].action;
        }

        netsim::step(state, actions, cfg.control_interval_s);

        for (int i = 0; i < n; ++i) next_obs[size_t(i)] = netsim::observation_vector(state, i, true);

        std::vector<std::vector<belief::NeighborAction>> nbrs(size_t(n));
        for (int i = 0; i < n; ++i) {
            const netsim::IntersectionNode& node = net.intersections[size_t(i)];
            for (int d = 0; d < netsim::kDirections; ++d)
                if (node.neighbor[size_t(d)] >= 0)
                    nbrs[size_t(i)].push_back({d, actions[size_t(node.neighbor[size_t(d)])]});
        }

#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
        for (int i = 0; i < n; ++i) {
            r_int[size_t(i)] = use_intrinsic
                                   ? agent::intrinsic_reward(store, models.dec, obs[size_t(i)],
                                                             actions[size_t(i)], nbrs[size_t(i)],
                                                             latents[size_t(i)], next_obs[size_t(i)],
                                                             terms)
                                   : 0.0;
        }

        bool done = (s == steps - 1);
        for (int i = 0; i < n; ++i) {
            long q = netsim::queue_length(state, i, cfg.sim.queue_counts_transit);
            double r = cfg.hyper.reward_weight * double(q);
            ext_total += r;
            int_total += r_int[size_t(i)];
            queue_total += double(q);

            belief::TrajectoryStep& ts = steps_buf[size_t(i)];
            ts.obs = obs[size_t(i)];
            ts.action = actions[size_t(i)];
            ts.reward = r;
            ts.neighbors = nbrs[size_t(i)];
            ts.next_obs = next_obs[size_t(i)];

            if (rollouts) {
                agent::Transition tr;
                tr.obs = obs[size_t(i)];
                tr.m = latents[size_t(i)];
                tr.action = actions[size_t(i)];
                tr.logp = acts[size_t(i)].logp;
                tr.value = acts[size_t(i)].value;
                tr.r_ext = r;
                tr.r_int = r_int[size_t(i)];
                tr.done = done;
                if (models.has_encoder) {
                    tr.mu = beliefs[size_t(i)].mu;
                    tr.sigma = beliefs[size_t(i)].sigma;
                } else {
                    tr.mu.assign(size_t(L), 0.0);
                    tr.sigma.assign(size_t(L), 1.0);
                }
                (*rollouts)[size_t(i)].push(std::move(tr));
            }
            if (collect_traj) res.trajectories[size_t(i)].steps.push_back(ts);
        }

        if (models.has_encoder) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (par)
#endif
            for (int i = 0; i < n; ++i)
                beliefs[size_t(i)] = belief::encode_step(store, models.enc,
                                                         beliefs[size_t(i)].hidden,
                                                         steps_buf[size_t(i)], {});
        }
    }

    res.avg_travel_time = netsim::average_travel_time(state);
    res.ext_total = ext_total;
    res.int_total = int_total;
    res.mean_queue = queue_total / double(steps * n);
    return res;
}

TrainResult meta_train(const ExperimentConfig& cfg, uint64_t seed) {
    VariantSpec vs = parse_variant(cfg.variant);
    if (vs.classical) throw ConfigError("meta_train: classical variants train nothing");

    netsim::RoadNetwork net = build_network(cfg);
    netsim::ArrivalSchedule sched = build_schedule(cfg, net, seed);

    TrainResult out;
    Rng init_rng = Rng::fork(seed, 0x1217);
    Models models = create_models(out.store, cfg.hyper, vs.v, init_rng);
    out.meta = make_ckpt_meta(cfg.hyper, cfg.variant);

    wm::VaeBuffer vae_buffer(cfg.hyper.vae_buffer_capacity);
    std::vector<agent::RolloutBuffer> rollouts;
    for (int i = 0; i < net.n(); ++i) rollouts.emplace_back(cfg.hyper.rollout_capacity);

    Rng ppo_rng = Rng::fork(seed, 0x990);
    Rng vae_rng = Rng::fork(seed, 0xae0);

    agent::PpoHyper ph;
    ph.epochs = cfg.hyper.ppo_epochs;
    ph.minibatch = cfg.hyper.policy_minibatch;
    ph.clip = cfg.hyper.ppo_clip;
    ph.v_coef = cfg.hyper.value_loss_coef;
    ph.ent_coef = cfg.hyper.entropy_coef;
    ph.lr = cfg.hyper.policy_lr;
    ph.adam_eps = cfg.hyper.adam_eps;
    ph.gamma = cfg.hyper.discount;
    ph.lambda = cfg.hyper.gae_lambda;
    ph.alpha = (vs.v == Variant::Latent) ? 0.0 : cfg.hyper.intrinsic_alpha;

    wm::VaeHyper vh;
    vh.minibatch = cfg.hyper.mvae_minibatch;
    vh.stride = cfg.hyper.elbo_stride;
    vh.lr = cfg.hyper.mvae_lr;
    vh.adam_eps = cfg.hyper.adam_eps;
    vh.elbo_coef = cfg.hyper.elbo_coef;

    EpisodeOptions opt;
    opt.variant = vs.v;
    opt.mode = agent::ActMode::Sample;
    opt.collect = true;
    opt.threads = cfg.threads;

    for (int k = 1; k <= cfg.iterations; ++k) {
        double t0 = now_s();
        uint64_t ep_seed = mix64(seed ^ mix64(0xe900 + uint64_t(k)));
        EpisodeResult ep = run_policy_episode(cfg, net, sched, out.store, models, opt, ep_seed,
                                              &rollouts);
        for (belief::Trajectory& tr : ep.trajectories) vae_buffer.push(std::move(tr));

        agent::PpoStats ps = agent::ppo_update(out.store, models.pi, rollouts, ph, ppo_rng);
        wm::VaeStats vsstats;
        if (models.has_decoders)
            vsstats = wm::vae_update(out.store, models.enc, models.dec, vae_buffer, vh, vae_rng,
                                     cfg.threads);

        MetricsRow row;
        row.iteration = k;
        row.seed = seed;
        row.avg_travel_time_s = ep.avg_travel_time;
        row.ext_reward = ep.ext_total;
        row.int_reward = ep.int_total;
        row.mean_queue = ep.mean_queue;
        row.elbo_loss = vsstats.loss;
        row.policy_loss = ps.policy_loss;
        row.value_loss = ps.value_loss;
        row.entropy = ps.entropy;
        row.wall_s = now_s() - t0;
        out.metrics.push_back(row);
    }
    return out;
}

std::vector<MetricsRow> meta_test(const nn::Checkpoint& ckpt, const ExperimentConfig& cfg) {
    if (!ckpt.store.has("pi/actor/l0/W"))
        throw ConfigError("meta_test: checkpoint is missing policy parameters");
    if (!ckpt.store.has("enc/embed/W"))
        throw ConfigError("meta_test: checkpoint is missing encoder parameters");
    Models models = bind_models(ckpt.store, ckpt.meta);

    ExperimentConfig local = cfg;
    local.hyper.latent_dim = ckpt.meta.latent_dim;
    local.hyper.q_scale = ckpt.meta.q_scale;

    netsim::RoadNetwork net = build_network(local);
    EpisodeOptions opt;
    opt.variant = Variant::Latent;  // no intrinsic reward at test time
    opt.mode = (local.eval_mode == "sample") ? agent::ActMode::Sample : agent::ActMode::Greedy;
    opt.collect = false;
    opt.threads = local.threads;

    std::vector<MetricsRow> rows;
    for (uint64_t seed : local.seeds) {
        double t0 = now_s();
        netsim::ArrivalSchedule sched = build_schedule(local, net, seed);
        uint64_t noise_seed = mix64(seed ^ mix64(0xe7a1));
        EpisodeResult ep = run_policy_episode(local, net, sched, ckpt.store, models, opt,
                                              noise_seed, nullptr);
        MetricsRow row;
        row.iteration = 0;
        row.seed = seed;
        row.avg_travel_time_s = ep.avg_travel_time;
        row.ext_reward = ep.ext_total;
        row.int_reward = ep.int_total;
        row.mean_queue = ep.mean_queue;
        row.wall_s = now_s() - t0;
        rows.push_back(row);
    }
    return rows;
}

std::vector<MetricsRow> run_classical(const ExperimentConfig& cfg, ctrl::Kind kind,
                                      std::span<const uint64_t> seeds) {
    netsim::RoadNetwork net = build_network(cfg);
    ctrl::ControllerSpec spec = cfg.controller;
    spec.kind = kind;

    std::vector<MetricsRow> rows;
    for (uint64_t seed : seeds) {
        double t0 = now_s();
        spec.seed = seed;
        std::unique_ptr<ctrl::Controller> controller = ctrl::make_controller(spec);
        controller->reset(net);
        netsim::ArrivalSchedule sched = build_schedule(cfg, net, seed);
        netsim::SimState state = netsim::reset(net, sched, seed);
        const int steps = cfg.horizon_s / cfg.control_interval_s;
        double ext_total = 0.0, queue_total = 0.0;
        std::vector<int> actions(size_t(net.n()), 0);
        for (int s = 0; s < steps; ++s) {
            for (int i = 0; i < net.n(); ++i)
                actions[size_t(i)] = controller->decide(state, i, double(state.clock),
                                                        double(cfg.control_interval_s));
            netsim::step(state, actions, cfg.control_interval_s);
            for (int i = 0; i < net.n(); ++i) {
                long q = netsim::queue_length(state, i, cfg.sim.queue_counts_transit);
                ext_total += cfg.hyper.reward_weight * double(q);
                queue_total += double(q);
            }
        }
        MetricsRow row;
        row.iteration = 0;
        row.seed = seed;
        row.avg_travel_time_s = netsim::average_travel_time(state);
        row.ext_reward = ext_total;
        row.mean_queue = queue_total / double(steps * net.n());
        row.wall_s = now_s() - t0;
        rows.push_back(row);
    }
    return rows;
}

AblationTable run_ablation(const ExperimentConfig& cfg, std::span<const uint64_t> seeds) {
    if (seeds.empty()) throw ConfigError("run_ablation: needs at least one seed");
    AblationTable table;
    const Variant variants[] = {Variant::Baseline, Variant::Latent, Variant::LatentTran,
                                Variant::LatentRew, Variant::Full};
    for (Variant v : variants) table.variants.push_back(variant_name(v));
    table.scenarios = cfg.ablate_flows.empty() ? std::vector<std::string>{cfg.flow}
                                               : cfg.ablate_flows;

    table.mean_travel_time.assign(table.variants.size(),
                                  std::vector<double>(table.scenarios.size(), 0.0));
    table.max_abs_int_reward.assign(table.variants.size(),
                                    std::vector<double>(table.scenarios.size(), 0.0));

    for (size_t sc = 0; sc < table.scenarios.size(); ++sc) {
        ExperimentConfig scen_cfg = cfg;
        scen_cfg.flow = table.scenarios[sc];
        for (size_t vi = 0; vi < 5; ++vi) {
            ExperimentConfig vcfg = scen_cfg;
            vcfg.variant = table.variants[vi];
            double att_sum = 0.0;
            double max_int = 0.0;
            netsim::RoadNetwork net = build_network(vcfg);
            for (uint64_t seed : seeds) {
                TrainResult tr = meta_train(vcfg, seed);
                for (const MetricsRow& r : tr.metrics)
                    max_int = std::max(max_int, std::fabs(r.int_reward));
                Models models = bind_models(tr.store, tr.meta);
                EpisodeOptions opt;
                opt.variant = parse_variant(vcfg.variant).v;
                opt.mode = agent::ActMode::Greedy;
                opt.collect = false;
                opt.threads = vcfg.threads;
                netsim::ArrivalSchedule sched = build_schedule(vcfg, net, seed);
                EpisodeResult ep = run_policy_episode(vcfg, net, sched, tr.store, models, opt,
                                                      mix64(seed ^ 0xab1a7e), nullptr);
                att_sum += ep.avg_travel_time;
            }
            table.mean_travel_time[vi][sc] = att_sum / double(seeds.size());
            table.max_abs_int_reward[vi][sc] = max_int;
        }
    }
    return table;
}

std::string format_ablation(const AblationTable& table) {
    std::ostringstream out;
    out << "variant";
    for (const std::string& s : table.scenarios) out << "," << s;
    out << "\n";
    for (size_t vi = 0; vi < table.variants.size(); ++vi) {
        out << table.variants[vi];
        for (size_t sc = 0; sc < table.scenarios.size(); ++sc)
            out << "," << fmt(table.mean_travel_time[vi][sc]);
        out << "\n";
    }
    return out.str();
}

}  // namespace metavim::harness
