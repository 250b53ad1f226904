#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"

#include "metavim/harness.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace {

using namespace metavim;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;

void apply_threads(const harness::ExperimentConfig& cfg) {
#ifdef _OPENMP
    if (cfg.threads > 0) omp_set_num_threads(cfg.threads);
#else
    (void)cfg;
#endif
}

void print_rows(const std::vector<harness::MetricsRow>& rows) {
    std::cout << harness::metrics_header() << "\n";
    for (const harness::MetricsRow& r : rows) std::cout << harness::metrics_csv_line(r) << "\n";
}

int cmd_train(const std::string& config_path, std::optional<uint64_t> seed_opt,
              const std::string& out_dir, bool plot) {
    harness::ExperimentConfig cfg = harness::load_config_file(config_path);
    apply_threads(cfg);
    uint64_t seed = seed_opt.value_or(cfg.seeds.front());
    std::filesystem::create_directories(out_dir);

    harness::TrainResult result = harness::meta_train(cfg, seed);
    nn::save_checkpoint(out_dir + "/checkpoint.json", result.store, result.meta);
    harness::write_metrics_csv(out_dir + "/metrics.csv", result.metrics);
    if (plot) harness::write_metrics_plots(out_dir + "/plots", result.metrics);
    print_rows(result.metrics);
    std::cout << "checkpoint: " << out_dir << "/checkpoint.json\n";
    return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path,
             const std::string& out_dir, bool plot) {
    harness::ExperimentConfig cfg = harness::load_config_file(config_path);
    apply_threads(cfg);
    nn::Checkpoint ckpt = nn::load_checkpoint(ckpt_path);
    std::vector<harness::MetricsRow> rows = harness::meta_test(ckpt, cfg);
    print_rows(rows);
    double mean = 0.0;
    for (const harness::MetricsRow& r : rows) mean += r.avg_travel_time_s;
    mean /= double(rows.size());
    std::printf("mean avg_travel_time_s over %zu seeds: %.4f\n", rows.size(), mean);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        harness::write_metrics_csv(out_dir + "/eval_metrics.csv", rows);
        if (plot) harness::write_metrics_plots(out_dir + "/plots", rows);
    }
    return kExitOk;
}

int cmd_baseline(const std::string& kind, const std::string& config_path,
                 const std::string& out_dir) {
    harness::ExperimentConfig cfg = harness::load_config_file(config_path);
    apply_threads(cfg);
    std::vector<harness::MetricsRow> rows =
        harness::run_classical(cfg, ctrl::parse_kind(kind), cfg.seeds);
    print_rows(rows);
    double mean = 0.0;
    for (const harness::MetricsRow& r : rows) mean += r.avg_travel_time_s;
    mean /= double(rows.size());
    std::printf("%s mean avg_travel_time_s over %zu seeds: %.4f\n", kind.c_str(), rows.size(),
                mean);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        harness::write_metrics_csv(out_dir + "/baseline_" + kind + ".csv", rows);
    }
    return kExitOk;
}

int cmd_ablate(const std::string& config_path, const std::string& out_dir) {
    harness::ExperimentConfig cfg = harness::load_config_file(config_path);
    apply_threads(cfg);
    harness::AblationTable table = harness::run_ablation(cfg, cfg.seeds);
    std::cout << harness::format_ablation(table);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        std::ofstream out(out_dir + "/ablation.csv");
        out << harness::format_ablation(table);
    }
    return kExitOk;
}

int cmd_gradcheck() {
    // small random instances of every composite loss against central differences
    Rng rng(2024);
    nn::ParamStore store;
    belief::EncoderDims ed;
    ed.embed_hidden = 8;
    ed.gru_hidden = 8;
    ed.latent_dim = 2;
    belief::Encoder enc = belief::Encoder::create(store, ed, rng);
    for (double& v : store.all()[size_t(enc.head_w)].value.a) v = rng.uniform(-0.3, 0.3);
    wm::DecoderDims dd;
    dd.latent_dim = 2;
    dd.hidden = 8;
    wm::DecoderSet dec = wm::DecoderSet::create(store, dd, rng);
    agent::PolicyDims pd;
    pd.latent_dim = 2;
    pd.hidden = 8;
    agent::Policy pi = agent::Policy::create(store, pd, rng);

    belief::Trajectory traj;
    for (int k = 0; k < 4; ++k) {
        belief::TrajectoryStep s;
        s.obs.resize(16);
        s.next_obs.resize(16);
        for (double& v : s.obs) v = rng.uniform(0, 1);
        for (double& v : s.next_obs) v = rng.uniform(0, 1);
        s.action = rng.uniform_int(4);
        s.reward = rng.uniform(-60, 0);
        s.neighbors = {{0, rng.uniform_int(4)}, {2, rng.uniform_int(4)}};
        traj.steps.push_back(std::move(s));
    }
    Vec noise{0.31, -0.77};
    nn::FdReport elbo_rep = nn::finite_diff_check(
        [&](nn::Tape& t) { return wm::elbo_loss_node(t, enc, dec, traj, 3, noise); }, store, 1e-5,
        true);
    std::printf("elbo loss:        max rel err %.3g\n", elbo_rep.max_rel_err);

    agent::Transition tr;
    tr.obs = traj.steps[0].obs;
    tr.m = {0.4, -0.2};
    tr.action = 2;
    tr.logp = std::log(0.3);
    agent::PpoHyper ph;
    nn::FdReport ppo_rep = nn::finite_diff_check(
        [&](nn::Tape& t) { return agent::ppo_sample_loss_node(t, pi, tr, 0.7, -1.3, ph); }, store,
        1e-5, true);
    std::printf("ppo loss:         max rel err %.3g\n", ppo_rep.max_rel_err);

    const belief::TrajectoryStep& s0 = traj.steps[0];
    nn::FdReport int_rep = nn::finite_diff_check(
        [&](nn::Tape& t) {
            return agent::intrinsic_reward_node(t, dec, s0.obs, s0.action, s0.neighbors,
                                                t.leaf(Vec{0.4, -0.2}), s0.next_obs);
        },
        store, 1e-5, true);
    std::printf("intrinsic reward: max rel err %.3g\n", int_rep.max_rel_err);

    bool ok = elbo_rep.max_rel_err <= 1e-4 && ppo_rep.max_rel_err <= 1e-4 &&
              int_rep.max_rel_err <= 1e-4;
    std::printf("gradcheck %s (threshold 1e-4)\n", ok ? "PASS" : "FAIL");
    return ok ? kExitOk : kExitNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"metavim: decentralized traffic-signal control lab"};
    app.require_subcommand(1);

    std::string config_path, out_dir, ckpt_path, kind;
    std::optional<uint64_t> seed;
    bool plot = false;

    CLI::App* train = app.add_subcommand("train", "meta-train on the configured scenario");
    train->add_option("--config", config_path, "config json")->required();
    train->add_option("--seed", seed, "training seed (default: first config seed)");
    train->add_option("--out", out_dir, "output directory")->required();
    train->add_flag("--plot", plot, "emit svg plots");

    CLI::App* eval = app.add_subcommand("eval", "meta-test a checkpoint, no adaptation");
    eval->add_option("--ckpt", ckpt_path, "checkpoint json")->required();
    eval->add_option("--config", config_path, "config json")->required();
    eval->add_option("--out", out_dir, "output directory");
    eval->add_flag("--plot", plot, "emit svg plots");

    CLI::App* baseline = app.add_subcommand("baseline", "run a classical controller");
    baseline->add_option("--kind", kind, "random|fixedtime|fixedtime_offset|maxpressure|sotl")
        ->required();
    baseline->add_option("--config", config_path, "config json")->required();
    baseline->add_option("--out", out_dir, "output directory");

    CLI::App* ablate = app.add_subcommand("ablate", "train and compare the five variants");
    ablate->add_option("--config", config_path, "config json")->required();
    ablate->add_option("--out", out_dir, "output directory");

    app.add_subcommand("gradcheck", "finite-difference oracle on composite losses");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, seed, out_dir, plot);
        if (eval->parsed()) return cmd_eval(ckpt_path, config_path, out_dir, plot);
        if (baseline->parsed()) return cmd_baseline(kind, config_path, out_dir);
        if (ablate->parsed()) return cmd_ablate(config_path, out_dir);
        return cmd_gradcheck();
    } catch (const metavim::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const metavim::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return kExitNumeric;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitNumeric;
    }
}
