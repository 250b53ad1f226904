#include "metavim/agent.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace metavim::agent {

namespace {

wm::Mlp3 add_tanh_mlp(nn::ParamStore& store, const std::string& prefix, int in_dim, int hidden,
                      int out_dim, Rng& rng) {
    wm::Mlp3 m;
    m.in_dim = in_dim;
    m.out_dim = out_dim;
    m.w0 = store.add_uniform(prefix + "/l0/W", hidden, in_dim, rng);
    m.b0 = store.add(prefix + "/l0/b", hidden, 1);
    m.w1 = store.add_uniform(prefix + "/l1/W", hidden, hidden, rng);
    m.b1 = store.add(prefix + "/l1/b", hidden, 1);
    m.w2 = store.add_uniform(prefix + "/l2/W", out_dim, hidden, rng);
    m.b2 = store.add(prefix + "/l2/b", out_dim, 1);
    return m;
}

wm::Mlp3 bind_tanh_mlp(const nn::ParamStore& store, const std::string& prefix, int in_dim,
                       int out_dim) {
    wm::Mlp3 m;
    m.in_dim = in_dim;
    m.out_dim = out_dim;
    m.w0 = store.require(prefix + "/l0/W");
    m.b0 = store.require(prefix + "/l0/b");
    m.w1 = store.require(prefix + "/l1/W");
    m.b1 = store.require(prefix + "/l1/b");
    m.w2 = store.require(prefix + "/l2/W");
    m.b2 = store.require(prefix + "/l2/b");
    return m;
}

Vec tanh_mlp_fwd(const nn::ParamStore& store, const wm::Mlp3& mlp,
                 std::span<const double> obs, std::span<const double> m) {
    Vec h0 = nn::affine_fwd(store, mlp.w0, mlp.b0, {obs, m});
    nn::tanh_inplace(h0);
    Vec h1 = nn::affine_fwd(store, mlp.w1, mlp.b1, {std::span<const double>(h0)});
    nn::tanh_inplace(h1);
    return nn::affine_fwd(store, mlp.w2, mlp.b2, {std::span<const double>(h1)});
}

nn::NodeId tanh_mlp_node(nn::Tape& t, const wm::Mlp3& mlp, nn::NodeId input) {
    nn::NodeId h0 = t.tanh_(t.affine(mlp.w0, mlp.b0, {input}));
    nn::NodeId h1 = t.tanh_(t.affine(mlp.w1, mlp.b1, {h0}));
    return t.affine(mlp.w2, mlp.b2, {h1});
}

}  // namespace

Policy Policy::create(nn::ParamStore& store, const PolicyDims& dims, Rng& rng) {
    Policy p;
    p.dims = dims;
    p.actor = add_tanh_mlp(store, "pi/actor", dims.input_dim(), dims.hidden, dims.n_actions, rng);
    p.critic = add_tanh_mlp(store, "pi/critic", dims.input_dim(), dims.hidden, 1, rng);
    return p;
}

Policy Policy::bind(const nn::ParamStore& store, const PolicyDims& dims) {
    Policy p;
    p.dims = dims;
    p.actor = bind_tanh_mlp(store, "pi/actor", dims.input_dim(), dims.n_actions);
    p.critic = bind_tanh_mlp(store, "pi/critic", dims.input_dim(), 1);
    return p;
}

ActResult act(const nn::ParamStore& store, const Policy& policy, std::span<const double> obs_norm,
              std::span<const double> m, ActMode mode, Rng* rng) {
    if (int(m.size()) != policy.dims.latent_dim) throw ShapeError("act: bad latent size");
    if (int(obs_norm.size()) != policy.dims.obs_dim) throw ShapeError("act: bad observation size");

    Vec logits = tanh_mlp_fwd(store, policy.actor, obs_norm, m);
    for (double v : logits)
        if (!std::isfinite(v)) throw NumericError("act: non-finite logits");
    ActResult res;
    res.probs = nn::softmax_vec(logits);
    res.value = tanh_mlp_fwd(store, policy.critic, obs_norm, m)[0];

    if (mode == ActMode::Greedy) {
        int best = 0;
        for (int i = 1; i < int(res.probs.size()); ++i)
            if (res.probs[size_t(i)] > res.probs[size_t(best)]) best = i;
        res.action = best;
    } else {
        if (!rng) throw Error("act: sampling mode needs an rng");
        double u = rng->uniform();
        double acc = 0.0;
        int chosen = int(res.probs.size()) - 1;
        for (int i = 0; i < int(res.probs.size()); ++i) {
            acc += res.probs[size_t(i)];
            if (u < acc) {
                chosen = i;
                break;
            }
        }
        res.action = chosen;
    }
    res.logp = std::log(std::max(res.probs[size_t(res.action)], 1e-300));
    return res;
}

double intrinsic_reward(const nn::ParamStore& store, const wm::DecoderSet& dec,
                        std::span<const double> obs, int action,
                        std::span<const belief::NeighborAction> neighbors,
                        std::span<const double> m, std::span<const double> next_obs,
                        IntrinsicTerms terms) {
    if (neighbors.empty()) return 0.0;
    double r_hat = 0.0;
    Vec o_hat;
    if (terms.reward) r_hat = wm::predict_reward_self(store, dec, next_obs, obs, action, m);
    if (terms.obs) o_hat = wm::predict_obs_self(store, dec, obs, action, m);

    double total = 0.0;
    for (const belief::NeighborAction& nb : neighbors) {
        if (terms.reward) {
            double r_nbr =
                wm::predict_reward_nbr(store, dec, next_obs, obs, action, nb.action, nb.dir, m);
            total += std::fabs(r_hat - r_nbr);
        }
        if (terms.obs) {
            Vec o_nbr = wm::predict_obs_nbr(store, dec, obs, action, nb.action, nb.dir, m);
            double s = 0.0;
            for (size_t i = 0; i < o_hat.size(); ++i) {
                double d = o_hat[i] - o_nbr[i];
                s += d * d;
            }
            total += std::sqrt(s);
        }
    }
    return -total;
}

nn::NodeId intrinsic_reward_node(nn::Tape& t, const wm::DecoderSet& dec,
                                 std::span<const double> obs, int action,
                                 std::span<const belief::NeighborAction> neighbors,
                                 nn::NodeId m, std::span<const double> next_obs,
                                 IntrinsicTerms terms) {
    if (neighbors.empty()) return t.scalar_leaf(0.0);

    // rebuild the constant parts exactly like the plain path
    Vec a_onehot(size_t(dec.dims.n_actions), 0.0);
    a_onehot[size_t(action)] = 1.0;
    Vec crs(next_obs.begin(), next_obs.end());
    crs.insert(crs.end(), obs.begin(), obs.end());
    crs.insert(crs.end(), a_onehot.begin(), a_onehot.end());
    Vec cos(obs.begin(), obs.end());
    cos.insert(cos.end(), a_onehot.begin(), a_onehot.end());

    nn::NodeId r_hat = terms.reward ? wm::mlp_node(t, dec.r_self, crs, m) : -1;
    nn::NodeId o_hat = terms.obs ? wm::mlp_node(t, dec.o_self, cos, m) : -1;

    std::vector<std::pair<nn::NodeId, double>> gaps;
    for (const belief::NeighborAction& nb : neighbors) {
        Vec nbr_tail(size_t(dec.dims.n_actions) + 4, 0.0);
        nbr_tail[size_t(nb.action)] = 1.0;
        nbr_tail[size_t(dec.dims.n_actions + nb.dir)] = 1.0;
        if (terms.reward) {
            Vec c = crs;
            c.insert(c.end(), nbr_tail.begin(), nbr_tail.end());
            nn::NodeId r_nbr = wm::mlp_node(t, dec.r_nbr, c, m);
            gaps.emplace_back(t.sum(t.abs_(t.sub(r_hat, r_nbr))), 1.0);
        }
        if (terms.obs) {
            Vec c = cos;
            c.insert(c.end(), nbr_tail.begin(), nbr_tail.end());
            nn::NodeId o_nbr = wm::mlp_node(t, dec.o_nbr, c, m);
            gaps.emplace_back(t.norm2(t.sub(o_hat, o_nbr)), 1.0);
        }
    }
    return t.scale(t.add_scaled(gaps), -1.0);
}

void RolloutBuffer::push(Transition t) {
    consumed_ = false;
    buf_.push_back(std::move(t));
    if (buf_.size() > cap_) buf_.erase(buf_.begin());
}

void RolloutBuffer::consume() {
    buf_.clear();
    consumed_ = true;
}

namespace {

struct PpoSampleNodes {
    nn::NodeId loss, surr, verr, ent;
};

PpoSampleNodes ppo_sample_nodes(nn::Tape& t, const Policy& policy, const Transition& tr,
                                double adv, double ret, const PpoHyper& hyper) {
    Vec input(tr.obs.begin(), tr.obs.end());
    input.insert(input.end(), tr.m.begin(), tr.m.end());
    nn::NodeId in = t.leaf(input);
    nn::NodeId logits = tanh_mlp_node(t, policy.actor, in);
    nn::NodeId lp = t.categorical_logprob(logits, tr.action);
    PpoSampleNodes out;
    out.surr = t.ppo_clip(lp, tr.logp, adv, hyper.clip);
    out.ent = t.entropy(logits);
    nn::NodeId v = tanh_mlp_node(t, policy.critic, in);
    out.verr = t.square(t.sub(v, t.scalar_leaf(ret)));
    std::pair<nn::NodeId, double> parts[] = {
        {out.surr, 1.0}, {out.verr, hyper.v_coef}, {out.ent, -hyper.ent_coef}};
    out.loss = t.add_scaled(parts);
    return out;
}

}  // namespace

nn::NodeId ppo_sample_loss_node(nn::Tape& t, const Policy& policy, const Transition& tr,
                                double adv, double ret, const PpoHyper& hyper) {
    return ppo_sample_nodes(t, policy, tr, adv, ret, hyper).loss;
}

GaeResult gae_advantages(std::span<const Transition> segment, double gamma, double lambda,
                         double alpha, double bootstrap_value) {
    if (segment.empty()) throw Error("gae_advantages: empty buffer");
    const int n = int(segment.size());
    GaeResult out;
    out.advantages.assign(size_t(n), 0.0);
    out.returns.assign(size_t(n), 0.0);
    double a_next = 0.0;
    for (int i = n - 1; i >= 0; --i) {
        const Transition& tr = segment[size_t(i)];
        double v_next = tr.done ? 0.0
                                : (i == n - 1 ? bootstrap_value : segment[size_t(i) + 1].value);
        double shaped = tr.r_ext + alpha * tr.r_int;
        double delta = shaped + gamma * v_next - tr.value;
        double mask = tr.done ? 0.0 : 1.0;
        a_next = delta + gamma * lambda * mask * a_next;
        out.advantages[size_t(i)] = a_next;
        out.returns[size_t(i)] = a_next + tr.value;
    }
    return out;
}

PpoStats ppo_update(nn::ParamStore& store, const Policy& policy,
                    std::vector<RolloutBuffer>& buffers, const PpoHyper& hyper, Rng& rng) {
    struct Sample {
        const Transition* tr;
        double adv;
        double ret;
    };
    std::vector<Sample> pool;
    size_t fresh = 0;
    for (RolloutBuffer& b : buffers) {
        if (b.size() == 0) continue;
        fresh += b.size();
        GaeResult g = gae_advantages(b.entries(), hyper.gamma, hyper.lambda, hyper.alpha, 0.0);
        for (size_t i = 0; i < b.size(); ++i)
            pool.push_back(Sample{&b.entries()[i], g.advantages[i], g.returns[i]});
    }
    if (fresh == 0) {
        bool stale = std::any_of(buffers.begin(), buffers.end(),
                                 [](const RolloutBuffer& b) { return b.consumed(); });
        throw Error(stale ? "ppo_update: rollout buffers already consumed by a previous update"
                          : "ppo_update: no rollout data");
    }

    // normalize advantages over the whole pool
    double mean = 0.0;
    for (const Sample& s : pool) mean += s.adv;
    mean /= double(pool.size());
    double var = 0.0;
    for (const Sample& s : pool) var += (s.adv - mean) * (s.adv - mean);
    double sd = std::sqrt(var / double(pool.size()));
    double inv = 1.0 / std::max(sd, 1e-8);
    for (Sample& s : pool) s.adv = (s.adv - mean) * inv;

    PpoStats stats;
    std::vector<size_t> order(pool.size());
    std::iota(order.begin(), order.end(), size_t(0));
    for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[size_t(rng.uniform_int(int(i)))]);
        for (size_t begin = 0; begin < order.size(); begin += size_t(hyper.minibatch)) {
            size_t end = std::min(order.size(), begin + size_t(hyper.minibatch));
            nn::Tape tape(store);
            std::vector<nn::NodeId> losses;
            double ploss = 0.0, vloss = 0.0, ent = 0.0;
            for (size_t k = begin; k < end; ++k) {
                const Sample& s = pool[order[k]];
                PpoSampleNodes nodes = ppo_sample_nodes(tape, policy, *s.tr, s.adv, s.ret, hyper);
                losses.push_back(nodes.loss);
                ploss += tape.scalar(nodes.surr);
                vloss += tape.scalar(nodes.verr);
                ent += tape.scalar(nodes.ent);
            }
            nn::NodeId loss = tape.mean(losses);
            if (!std::isfinite(tape.scalar(loss))) throw NumericError("ppo_update: non-finite loss");
            tape.backward(loss);
            nn::Grads g = tape.take_grads();
            store.adam_step(g, hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps);
            double n = double(end - begin);
            stats.policy_loss += ploss / n;
            stats.value_loss += vloss / n;
            stats.entropy += ent / n;
            stats.minibatches += 1;
        }
    }
    if (stats.minibatches > 0) {
        stats.policy_loss /= stats.minibatches;
        stats.value_loss /= stats.minibatches;
        stats.entropy /= stats.minibatches;
    }
    for (RolloutBuffer& b : buffers) b.consume();
    return stats;
}

}  // namespace metavim::agent
