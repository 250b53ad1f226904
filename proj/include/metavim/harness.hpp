#pragma once

// Experiment harness: meta-training across every intersection of a scenario
// (one joint rollout per iteration realizes the per-POMDP loop), meta-test
// transfer evaluation without adaptation, the five-variant ablation suite,
// classical-controller runs, and the metrics/config surface used by the CLI.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metavim/agent.hpp"
#include "metavim/belief.hpp"
#include "metavim/common.hpp"
#include "metavim/controllers.hpp"
#include "metavim/demand.hpp"
#include "metavim/netsim.hpp"
#include "metavim/nn.hpp"
#include "metavim/worldmodel.hpp"

namespace metavim::harness {

enum class Variant { Baseline, Latent, LatentTran, LatentRew, Full };

struct VariantSpec {
    bool classical = false;
    ctrl::Kind kind = ctrl::Kind::Fixedtime;  // when classical
    Variant v = Variant::Full;
};

// "baseline" | "latent" | "latent+tran_rs" | "latent+rew_rs" | "full" | "classical:<kind>"
VariantSpec parse_variant(const std::string& name);
std::string variant_name(Variant v);

struct SimParams {
    netsim::LaneDefaults lane_defaults;
    bool queue_counts_transit = false;
    bool poisson_arrivals = false;
};

struct Hyper {
    double discount = 0.95;
    double gae_lambda = 0.95;
    double ppo_clip = 0.2;
    int ppo_epochs = 4;
    int policy_minibatch = 16;
    double value_loss_coef = 0.5;
    double entropy_coef = 0.01;
    double policy_lr = 7e-4;
    double adam_eps = 1e-5;
    int mvae_minibatch = 25;
    double mvae_lr = 1e-3;
    double elbo_coef = 1.0;
    int elbo_stride = 60;
    size_t vae_buffer_capacity = 100000;
    size_t rollout_capacity = 60;
    int latent_dim = 5;
    int gru_hidden = 64;
    int embed_hidden = 40;
    int decoder_hidden = 32;
    int policy_hidden = 32;
    double intrinsic_alpha = 0.1;
    double reward_weight = -1.0;
    double q_scale = 50.0;
};

struct ExperimentConfig {
    std::string roadnet_path;          // file path; grid used when empty
    int grid_rows = 2, grid_cols = 2;
    std::string flow = "mixed_low";    // mixed_low | mixed_high | flow document path
    std::vector<uint64_t> seeds = {1, 2, 3};
    int iterations = 100;
    int horizon_s = 3600;
    int control_interval_s = 5;
    std::string variant = "full";
    std::string eval_mode = "greedy";  // greedy | sample
    int threads = 0;                   // 0 = all available
    SimParams sim;
    Hyper hyper;
    ctrl::ControllerSpec controller;
    std::vector<std::string> ablate_flows;  // scenarios for run_ablation; empty = {flow}
};

ExperimentConfig config_from_json_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

netsim::RoadNetwork build_network(const ExperimentConfig& cfg);
netsim::ArrivalSchedule build_schedule(const ExperimentConfig& cfg,
                                       const netsim::RoadNetwork& net, uint64_t seed);

struct MetricsRow {
    int iteration = 0;
    uint64_t seed = 0;
    double avg_travel_time_s = 0.0;
    double ext_reward = 0.0;
    double int_reward = 0.0;
    double mean_queue = 0.0;
    double elbo_loss = 0.0;
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    double wall_s = 0.0;
};

std::string metrics_header();
std::string metrics_csv_line(const MetricsRow& row);
void write_metrics_csv(const std::string& path, std::span<const MetricsRow> rows);
void write_metrics_plots(const std::string& dir, std::span<const MetricsRow> rows);

struct Models {
    bool has_encoder = false;
    bool has_decoders = false;
    belief::Encoder enc;
    wm::DecoderSet dec;
    agent::Policy pi;
};

Models create_models(nn::ParamStore& store, const Hyper& hyper, Variant variant, Rng& rng);
// binds whatever the store holds: policy required, encoder/decoders by presence
Models bind_models(const nn::ParamStore& store, const nn::CkptMeta& meta);

nn::CkptMeta make_ckpt_meta(const Hyper& hyper, const std::string& variant);

struct EpisodeOptions {
    Variant variant = Variant::Full;
    agent::ActMode mode = agent::ActMode::Sample;
    bool collect = false;  // fill rollout buffers and mVAE trajectories
    int threads = 1;
};

struct EpisodeResult {
    double avg_travel_time = 0.0;
    double ext_total = 0.0;
    double int_total = 0.0;
    double mean_queue = 0.0;
    std::vector<belief::Trajectory> trajectories;  // per intersection, when collected
};

// one joint episode of the whole network under the learned policy; per-agent
// rng streams keep results independent of the thread schedule
EpisodeResult run_policy_episode(const ExperimentConfig& cfg, const netsim::RoadNetwork& net,
                                 const netsim::ArrivalSchedule& sched,
                                 const nn::ParamStore& store, const Models& models,
                                 const EpisodeOptions& opt, uint64_t noise_seed,
                                 std::vector<agent::RolloutBuffer>* rollouts);

struct TrainResult {
    nn::ParamStore store;
    nn::CkptMeta meta;
    std::vector<MetricsRow> metrics;
};

// Meta-training: per iteration, roll out one episode (every intersection
// contributes its own trajectory and rollout), push trajectories to the mVAE
// buffer, update the policy with PPO, update encoder+decoders with the ELBO.
TrainResult meta_train(const ExperimentConfig& cfg, uint64_t seed);

// Frozen checkpoint rolled out on the configured scenario, one row per seed.
// No parameter is mutated. Throws ConfigError when policy or encoder
// parameters are missing from the checkpoint.
std::vector<MetricsRow> meta_test(const nn::Checkpoint& ckpt, const ExperimentConfig& cfg);

std::vector<MetricsRow> run_classical(const ExperimentConfig& cfg, ctrl::Kind kind,
                                      std::span<const uint64_t> seeds);

struct AblationTable {
    std::vector<std::string> variants;   // rows
    std::vector<std::string> scenarios;  // columns
    std::vector<std::vector<double>> mean_travel_time;    // [variant][scenario]
    std::vector<std::vector<double>> max_abs_int_reward;  // [variant][scenario]
};

AblationTable run_ablation(const ExperimentConfig& cfg, std::span<const uint64_t> seeds);
std::string format_ablation(const AblationTable& table);

}  // namespace metavim::harness
