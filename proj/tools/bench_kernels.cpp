// Times the OpenMP kernels against their serial references and checks that
// they agree: the mVAE minibatch gradient (batched columns + parallel
// trajectories vs per-prefix unbatched), the per-intersection rollout step,
// and the finite-difference oracle.

#include <chrono>
#include <cstdio>
#include <vector>

#include "metavim/agent.hpp"
#include "metavim/harness.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

using namespace metavim;

namespace {

double now_ms() {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
}

belief::Trajectory synth_trajectory(int T, int obs_dim, Rng& rng) {
    belief::Trajectory traj;
    for (int k = 0; k < T; ++k) {
        belief::TrajectoryStep s;
        s.obs.resize(size_t(obs_dim));
        s.next_obs.resize(size_t(obs_dim));
        for (double& v : s.obs) v = rng.uniform(0, 1);
        for (double& v : s.next_obs) v = rng.uniform(0, 1);
        s.action = rng.uniform_int(4);
        s.reward = rng.uniform(-60, 0);
        s.neighbors = {{0, rng.uniform_int(4)}, {2, rng.uniform_int(4)}};
        traj.steps.push_back(std::move(s));
    }
    return traj;
}

double max_grad_gap(const nn::Grads& a, const nn::Grads& b) {
    double gap = 0.0;
    size_t n = std::max(a.g.size(), b.g.size());
    for (size_t i = 0; i < n; ++i) {
        const nn::Mat* ma = i < a.g.size() && !a.g[i].empty() ? &a.g[i] : nullptr;
        const nn::Mat* mb = i < b.g.size() && !b.g[i].empty() ? &b.g[i] : nullptr;
        if (!ma && !mb) continue;
        size_t sz = ma ? ma->a.size() : mb->a.size();
        for (size_t k = 0; k < sz; ++k) {
            double va = ma ? ma->a[k] : 0.0;
            double vb = mb ? mb->a[k] : 0.0;
            gap = std::max(gap, std::fabs(va - vb) / std::max({std::fabs(va), std::fabs(vb), 1.0}));
        }
    }
    return gap;
}

}  // namespace

int main() {
#ifdef _OPENMP
    int max_threads = omp_get_max_threads();
#else
    int max_threads = 1;
#endif
    std::printf("bench_kernels (max threads %d)\n\n", max_threads);

    Rng rng(42);
    nn::ParamStore store;
    belief::EncoderDims ed;  // paper-scale dims
    belief::Encoder enc = belief::Encoder::create(store, ed, rng);
    wm::DecoderDims dd;
    wm::DecoderSet dec = wm::DecoderSet::create(store, dd, rng);

    const int T = 240, items_n = 8;
    std::vector<belief::Trajectory> trajs;
    for (int i = 0; i < items_n; ++i) trajs.push_back(synth_trajectory(T, ed.obs_dim, rng));
    std::vector<const belief::Trajectory*> items;
    for (const belief::Trajectory& t : trajs) items.push_back(&t);

    std::vector<std::vector<Vec>> noises(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        size_t np = wm::elbo_prefixes(T, 60).size();
        noises[i].resize(np);
        for (Vec& v : noises[i]) {
            v.resize(size_t(ed.latent_dim));
            rng.fill_normal(v);
        }
    }

    std::printf("mVAE minibatch gradient (%d trajectories x %d steps):\n", items_n, T);
    double t0 = now_ms();
    wm::MinibatchGrad ref = wm::vae_minibatch_grad_ref(store, enc, dec, items, noises, 60);
    double t_ref = now_ms() - t0;
    t0 = now_ms();
    wm::MinibatchGrad batched1 = wm::vae_minibatch_grad(store, enc, dec, items, noises, 60, 1);
    double t_b1 = now_ms() - t0;
    t0 = now_ms();
    wm::MinibatchGrad batchedN = wm::vae_minibatch_grad(store, enc, dec, items, noises, 60, 0);
    double t_bn = now_ms() - t0;
    std::printf("  reference (unbatched, serial): %8.1f ms\n", t_ref);
    std::printf("  batched, 1 thread:             %8.1f ms  (%.2fx)\n", t_b1, t_ref / t_b1);
    std::printf("  batched, %d threads:            %8.1f ms  (%.2fx)\n", max_threads, t_bn,
                t_ref / t_bn);
    std::printf("  loss gap ref vs batched: %.3g, grad gap: %.3g\n",
                std::fabs(ref.loss - batched1.loss) / std::max(1.0, std::fabs(ref.loss)),
                max_grad_gap(ref.grads, batched1.grads));
    std::printf("  batched 1-thread vs %d-thread grads bit-identical: %s\n\n", max_threads,
                max_grad_gap(batched1.grads, batchedN.grads) == 0.0 ? "yes" : "NO");

    // rollout episode: serial vs parallel agents
    harness::ExperimentConfig cfg;
    cfg.grid_rows = 3;
    cfg.grid_cols = 3;
    cfg.horizon_s = 600;
    cfg.iterations = 1;
    netsim::RoadNetwork net = harness::build_network(cfg);
    netsim::ArrivalSchedule sched;
    sched.horizon_s = 600;
    {
        Rng srng(7);
        for (int k = 0; k < 400; ++k) {
            netsim::Arrival a;
            a.time = srng.uniform(0, 590);
            int e = net.entry_lanes[size_t(srng.uniform_int(int(net.entry_lanes.size())))];
            a.route = netsim::route_from_entry(net, e);
            sched.arrivals.push_back(std::move(a));
        }
        std::sort(sched.arrivals.begin(), sched.arrivals.end(),
                  [](const netsim::Arrival& a, const netsim::Arrival& b) { return a.time < b.time; });
    }
    nn::ParamStore pstore;
    Rng prng(3);
    harness::Models models = harness::create_models(pstore, cfg.hyper, harness::Variant::Full, prng);

    std::printf("policy rollout episode (3x3 grid, %d control steps):\n",
                cfg.horizon_s / cfg.control_interval_s);
    harness::EpisodeOptions opt;
    opt.variant = harness::Variant::Full;
    opt.collect = false;
    opt.threads = 1;
    t0 = now_ms();
    harness::EpisodeResult ep1 = harness::run_policy_episode(cfg, net, sched, pstore, models, opt,
                                                             99, nullptr);
    double t_e1 = now_ms() - t0;
    opt.threads = 0;
    t0 = now_ms();
    harness::EpisodeResult epN = harness::run_policy_episode(cfg, net, sched, pstore, models, opt,
                                                             99, nullptr);
    double t_en = now_ms() - t0;
    std::printf("  serial agents:   %8.1f ms\n", t_e1);
    std::printf("  parallel agents: %8.1f ms  (%.2fx)\n", t_e1 > 0 ? t_en : 0.0, t_e1 / t_en);
    std::printf("  identical results: %s\n\n",
                ep1.avg_travel_time == epN.avg_travel_time && ep1.ext_total == epN.ext_total &&
                        ep1.int_total == epN.int_total
                    ? "yes"
                    : "NO");

    // fd oracle on a small elbo instance
    Rng frng(5);
    nn::ParamStore fstore;
    belief::EncoderDims fed;
    fed.embed_hidden = 8;
    fed.gru_hidden = 8;
    fed.latent_dim = 2;
    belief::Encoder fenc = belief::Encoder::create(fstore, fed, frng);
    wm::DecoderDims fdd;
    fdd.latent_dim = 2;
    fdd.hidden = 8;
    wm::DecoderSet fdec = wm::DecoderSet::create(fstore, fdd, frng);
    belief::Trajectory ftraj = synth_trajectory(4, fed.obs_dim, frng);
    Vec fnoise{0.31, -0.77};
    auto loss = [&](nn::Tape& t) { return wm::elbo_loss_node(t, fenc, fdec, ftraj, 3, fnoise); };

    std::printf("finite-difference oracle (%zu parameter elements):\n", fstore.element_count());
    t0 = now_ms();
    nn::FdReport r1 = nn::finite_diff_check(loss, fstore, 1e-5, false);
    double t_f1 = now_ms() - t0;
    t0 = now_ms();
    nn::FdReport rN = nn::finite_diff_check(loss, fstore, 1e-5, true);
    double t_fn = now_ms() - t0;
    std::printf("  serial:   %8.1f ms (max rel err %.3g)\n", t_f1, r1.max_rel_err);
    std::printf("  parallel: %8.1f ms (max rel err %.3g, %.2fx)\n", t_fn, rN.max_rel_err,
                t_f1 / t_fn);
    std::printf("  identical: %s\n", r1.max_rel_err == rN.max_rel_err ? "yes" : "NO");
    return 0;
}
