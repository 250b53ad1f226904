#pragma once

// Latent-conditioned stochastic policy with a separate value head, the
// intrinsic reward (negated sum over neighbors of the prediction gap between
// neighbor-aware and neighbor-blind decoder heads), generalized advantage
// estimation over the shaped reward, and clipped-surrogate PPO updates.

#include <span>
#include <vector>

#include "metavim/belief.hpp"
#include "metavim/common.hpp"
#include "metavim/nn.hpp"
#include "metavim/worldmodel.hpp"

namespace metavim::agent {

struct PolicyDims {
    int obs_dim = 16;
    int n_actions = 4;
    int latent_dim = 5;
    int hidden = 32;

    int input_dim() const { return obs_dim + latent_dim; }
};

struct Policy {
    PolicyDims dims;
    wm::Mlp3 actor;   // tanh activations, n_actions logits
    wm::Mlp3 critic;  // tanh activations, scalar value

    static Policy create(nn::ParamStore& store, const PolicyDims& dims, Rng& rng);
    static Policy bind(const nn::ParamStore& store, const PolicyDims& dims);
};

enum class ActMode { Sample, Greedy };

struct ActResult {
    int action = 0;
    double logp = 0.0;
    double value = 0.0;
    Vec probs;
};

// categorical over softmax(logits); greedy takes the argmax (ties to the
// lowest index); rng may be null in greedy mode
ActResult act(const nn::ParamStore& store, const Policy& policy, std::span<const double> obs_norm,
              std::span<const double> m, ActMode mode, Rng* rng);

struct IntrinsicTerms {
    bool reward = true;
    bool obs = true;
};

// r_int = -sum_j (|r_hat - r_tilde_j| + ||o_hat - o_tilde_j||_2); reward heads
// receive the realized next observation as input, all four predictions are
// decoder outputs; zero neighbors gives exactly 0
double intrinsic_reward(const nn::ParamStore& store, const wm::DecoderSet& dec,
                        std::span<const double> obs, int action,
                        std::span<const belief::NeighborAction> neighbors,
                        std::span<const double> m, std::span<const double> next_obs,
                        IntrinsicTerms terms = {});

// taped version for the gradient oracle
nn::NodeId intrinsic_reward_node(nn::Tape& t, const wm::DecoderSet& dec,
                                 std::span<const double> obs, int action,
                                 std::span<const belief::NeighborAction> neighbors,
                                 nn::NodeId m, std::span<const double> next_obs,
                                 IntrinsicTerms terms = {});

struct Transition {
    Vec obs;   // normalized
    Vec m;     // latent sample used at act time
    int action = 0;
    double logp = 0.0;
    double value = 0.0;
    double r_ext = 0.0;
    double r_int = 0.0;
    bool done = false;
    Vec mu, sigma;  // belief at act time
};

// the most recent `capacity` transitions of one agent, FIFO; consumed (and
// emptied) by each PPO update
class RolloutBuffer {
public:
    explicit RolloutBuffer(size_t capacity = 60) : cap_(capacity) {}

    void push(Transition t);
    std::span<const Transition> entries() const { return buf_; }
    size_t size() const { return buf_.size(); }
    size_t capacity() const { return cap_; }
    bool consumed() const { return consumed_; }
    void consume();  // clears and marks the data as used

private:
    size_t cap_;
    bool consumed_ = false;
    std::vector<Transition> buf_;
};

struct GaeResult {
    Vec advantages;  // raw, not normalized
    Vec returns;
};

// shaped reward r + alpha * r_int over one contiguous on-policy segment;
// bootstrap_value continues the value beyond the segment unless the last
// transition is terminal
GaeResult gae_advantages(std::span<const Transition> segment, double gamma, double lambda,
                         double alpha, double bootstrap_value);

struct PpoHyper {
    int epochs = 4;
    int minibatch = 16;
    double clip = 0.2;
    double v_coef = 0.5;
    double ent_coef = 0.01;
    double lr = 7e-4;
    double adam_eps = 1e-5;
    double beta1 = 0.9, beta2 = 0.999;
    double gamma = 0.95;
    double lambda = 0.95;
    double alpha = 0.1;  // intrinsic reward weight
};

struct PpoStats {
    double policy_loss = 0.0;
    double value_loss = 0.0;
    double entropy = 0.0;
    int minibatches = 0;
};

// clipped surrogate + value error - entropy bonus for one stored transition,
// built on the caller's tape (used by the updates and by the gradient oracle)
nn::NodeId ppo_sample_loss_node(nn::Tape& t, const Policy& policy, const Transition& tr,
                                double adv, double ret, const PpoHyper& hyper);

// pools all agent buffers, normalizes advantages over the pool, runs
// epochs x minibatches of Adam on the policy parameters only, then empties
// the buffers; reusing consumed buffers is an error
PpoStats ppo_update(nn::ParamStore& store, const Policy& policy,
                    std::vector<RolloutBuffer>& buffers, const PpoHyper& hyper, Rng& rng);

}  // namespace metavim::agent
