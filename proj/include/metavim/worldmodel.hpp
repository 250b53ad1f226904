#pragma once

// Four-head world model and its training objective: reward and next
// observation predicted with and without a neighbor's action, trained by the
// negated ELBO (unit-variance Gaussian reconstruction + KL to the prior) over
// a large trajectory buffer. The minibatch gradient has two implementations:
// a per-prefix reference path built from unbatched ops, and the production
// kernel that batches reconstruction columns and shares the encoder pass per
// trajectory (OpenMP-parallel across trajectories).

#include <deque>
#include <span>
#include <vector>

#include "metavim/belief.hpp"
#include "metavim/common.hpp"
#include "metavim/nn.hpp"

namespace metavim::wm {

struct Mlp3 {
    int w0 = -1, b0 = -1, w1 = -1, b1 = -1, w2 = -1, b2 = -1;
    int in_dim = 0, out_dim = 0;
};

struct DecoderDims {
    int obs_dim = 16;
    int n_actions = 4;
    int latent_dim = 5;
    int hidden = 32;
    double q_scale = 50.0;  // rewards scaled by 1/q_scale as targets and predictions

    int r_self_in() const { return 2 * obs_dim + n_actions + latent_dim; }
    int r_nbr_in() const { return 2 * obs_dim + 2 * n_actions + 4 + latent_dim; }
    int o_self_in() const { return obs_dim + n_actions + latent_dim; }
    int o_nbr_in() const { return obs_dim + 2 * n_actions + 4 + latent_dim; }
};

struct DecoderSet {
    DecoderDims dims;
    Mlp3 r_self, r_nbr, o_self, o_nbr;  // 2 hidden ReLU layers of `hidden` units

    static DecoderSet create(nn::ParamStore& store, const DecoderDims& dims, Rng& rng);
    static DecoderSet bind(const nn::ParamStore& store, const DecoderDims& dims);
};

// plain (untaped) predictions; m is the latent sample, obs are normalized
Vec predict_obs_self(const nn::ParamStore& store, const DecoderSet& dec,
                     std::span<const double> obs, int action, std::span<const double> m);
Vec predict_obs_nbr(const nn::ParamStore& store, const DecoderSet& dec,
                    std::span<const double> obs, int action, int nbr_action, int nbr_dir,
                    std::span<const double> m);
double predict_reward_self(const nn::ParamStore& store, const DecoderSet& dec,
                           std::span<const double> next_obs, std::span<const double> obs,
                           int action, std::span<const double> m);
double predict_reward_nbr(const nn::ParamStore& store, const DecoderSet& dec,
                          std::span<const double> next_obs, std::span<const double> obs,
                          int action, int nbr_action, int nbr_dir, std::span<const double> m);

// taped 3-layer ReLU head over [const inputs; m]
nn::NodeId mlp_node(nn::Tape& t, const Mlp3& mlp, std::span<const double> const_part, nn::NodeId m);

// negated ELBO of the prefix tau_{:t}: encode t steps, draw one
// reparameterized latent, reconstruct every earlier step with all four heads
// (neighbor-conditioned terms averaged over present neighbors), add the KL.
// Reference implementation on unbatched ops; fills grads when requested.
double elbo_loss(const nn::ParamStore& store, const belief::Encoder& enc, const DecoderSet& dec,
                 const belief::Trajectory& traj, int t, std::span<const double> noise,
                 nn::Grads* grads = nullptr);

// same loss built on a caller-provided tape (gradient-oracle entry point)
nn::NodeId elbo_loss_node(nn::Tape& tape, const belief::Encoder& enc, const DecoderSet& dec,
                          const belief::Trajectory& traj, int t, std::span<const double> noise);

// prefix timesteps {stride, 2 stride, ...} clipped to T ({T} when T < stride)
std::vector<int> elbo_prefixes(int T, int stride);

struct TrajectoryElbo {
    double mean_loss = 0.0;
    std::vector<double> prefix_losses;
    nn::Grads grads;
};

// batched kernel: one tape per trajectory, encoder pass shared across the
// prefixes, reconstruction columns batched per head; noises[p] is the latent
// noise for prefix p
TrajectoryElbo trajectory_elbo(const nn::ParamStore& store, const belief::Encoder& enc,
                               const DecoderSet& dec, const belief::Trajectory& traj,
                               std::span<const int> prefixes, const std::vector<Vec>& noises,
                               bool with_grads);

struct MinibatchGrad {
    double loss = 0.0;   // mean over items of the item's mean prefix loss
    nn::Grads grads;     // gradient of that mean
};

// production kernel (parallel over items, deterministic reduction order) and
// the serial per-prefix reference; both consume the same pre-drawn noises
MinibatchGrad vae_minibatch_grad(const nn::ParamStore& store, const belief::Encoder& enc,
                                 const DecoderSet& dec,
                                 std::span<const belief::Trajectory* const> items,
                                 const std::vector<std::vector<Vec>>& noises, int stride,
                                 int threads);
MinibatchGrad vae_minibatch_grad_ref(const nn::ParamStore& store, const belief::Encoder& enc,
                                     const DecoderSet& dec,
                                     std::span<const belief::Trajectory* const> items,
                                     const std::vector<std::vector<Vec>>& noises, int stride);

// FIFO ring of whole per-intersection trajectories
class VaeBuffer {
public:
    explicit VaeBuffer(size_t capacity = 100000) : cap_(capacity) {}

    void push(belief::Trajectory traj);
    size_t size() const { return buf_.size(); }
    size_t capacity() const { return cap_; }
    const belief::Trajectory& at(size_t i) const { return buf_[i]; }  // 0 = oldest

private:
    size_t cap_;
    std::deque<belief::Trajectory> buf_;
};

struct VaeHyper {
    int minibatch = 25;
    int stride = 60;
    double lr = 1e-3;
    double adam_eps = 1e-5;
    double beta1 = 0.9, beta2 = 0.999;
    double elbo_coef = 1.0;
};

struct VaeStats {
    double loss = 0.0;
    int minibatch = 0;
};

// sample `minibatch` trajectories uniformly with replacement, average their
// prefix losses, one Adam step on encoder + all four decoders jointly
VaeStats vae_update(nn::ParamStore& store, const belief::Encoder& enc, const DecoderSet& dec,
                    const VaeBuffer& buffer, const VaeHyper& hyper, Rng& rng, int threads);

}  // namespace metavim::wm
