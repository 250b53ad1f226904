#pragma once

// Shared recurrent trajectory encoder producing the per-task latent belief:
// (o, a, r) triples pass an embedding layer and a GRU; the head maps the
// hidden state to (mu, log sigma) of a diagonal Gaussian over the latent.

#include <span>
#include <string>
#include <vector>

#include "metavim/common.hpp"
#include "metavim/nn.hpp"

namespace metavim::belief {

struct NeighborAction {
    int dir = 0;     // 0=N, 1=E, 2=S, 3=W
    int action = 0;  // neighbor's phase choice this step
};

struct TrajectoryStep {
    Vec obs;         // normalized observation (obs_dim)
    int action = 0;
    double reward = 0.0;  // raw extrinsic reward
    std::vector<NeighborAction> neighbors;
    Vec next_obs;    // normalized next observation
};

struct Trajectory {
    int task_id = 0;
    std::vector<TrajectoryStep> steps;
};

struct EncoderDims {
    int obs_dim = 16;
    int n_actions = 4;
    int embed_hidden = 40;
    int gru_hidden = 64;
    int latent_dim = 5;
    double reward_scale = 1.0 / 50.0;  // rewards scaled before entering the net

    int input_dim() const { return obs_dim + n_actions + 1; }
};

struct Encoder {
    EncoderDims dims;
    int embed_w = -1, embed_b = -1;
    nn::GruIds gru;
    int head_w = -1, head_b = -1;  // gru_hidden -> 2 * latent_dim, zero-initialized

    // zero head makes the pre-trajectory belief exactly N(0, I)
    static Encoder create(nn::ParamStore& store, const EncoderDims& dims, Rng& rng);
    static Encoder bind(const nn::ParamStore& store, const EncoderDims& dims);
};

struct LatentBelief {
    Vec mu;
    Vec sigma;
    Vec sample;
    Vec hidden;
};

// [obs, one-hot action, scaled reward]
Vec encoder_input(const Encoder& enc, const TrajectoryStep& step);

LatentBelief reset_belief(const nn::ParamStore& store, const Encoder& enc);

// advance the GRU by one step and refresh (mu, sigma, sample); noise has
// latent_dim standard-normal entries
LatentBelief encode_step(const nn::ParamStore& store, const Encoder& enc,
                         std::span<const double> hidden, const TrajectoryStep& step,
                         std::span<const double> noise);

// fold encode_step over steps [0, t)
LatentBelief encode_prefix(const nn::ParamStore& store, const Encoder& enc,
                           const Trajectory& traj, int t, std::span<const double> noise);

// closed-form diagonal-Gaussian KL to N(0, I)
double kl_to_prior(const LatentBelief& belief);

}  // namespace metavim::belief
