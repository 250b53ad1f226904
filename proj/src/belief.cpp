#include "metavim/belief.hpp"

#include <cmath>

namespace metavim::belief {

Encoder Encoder::create(nn::ParamStore& store, const EncoderDims& dims, Rng& rng) {
    Encoder e;
    e.dims = dims;
    e.embed_w = store.add_uniform("enc/embed/W", dims.embed_hidden, dims.input_dim(), rng);
    e.embed_b = store.add("enc/embed/b", dims.embed_hidden, 1);
    e.gru = nn::add_gru(store, "enc/gru", dims.embed_hidden, dims.gru_hidden, rng);
    e.head_w = store.add("enc/head/W", 2 * dims.latent_dim, dims.gru_hidden);
    e.head_b = store.add("enc/head/b", 2 * dims.latent_dim, 1);
    return e;
}

Encoder Encoder::bind(const nn::ParamStore& store, const EncoderDims& dims) {
    Encoder e;
    e.dims = dims;
    e.embed_w = store.require("enc/embed/W");
    e.embed_b = store.require("enc/embed/b");
    e.gru = nn::bind_gru(store, "enc/gru", dims.embed_hidden, dims.gru_hidden);
    e.head_w = store.require("enc/head/W");
    e.head_b = store.require("enc/head/b");
    return e;
}

Vec encoder_input(const Encoder& enc, const TrajectoryStep& step) {
    const EncoderDims& d = enc.dims;
    if (int(step.obs.size()) != d.obs_dim) throw ShapeError("encoder_input: bad observation size");
    if (step.action < 0 || step.action >= d.n_actions)
        throw ShapeError("encoder_input: action out of range");
    Vec x(size_t(d.input_dim()), 0.0);
    std::copy(step.obs.begin(), step.obs.end(), x.begin());
    x[size_t(d.obs_dim + step.action)] = 1.0;
    x[size_t(d.input_dim() - 1)] = step.reward * d.reward_scale;
    return x;
}

namespace {

LatentBelief belief_from_hidden(const nn::ParamStore& store, const Encoder& enc,
                                Vec hidden, std::span<const double> noise) {
    const int L = enc.dims.latent_dim;
    Vec head = nn::affine_fwd(store, enc.head_w, enc.head_b, {std::span<const double>(hidden)});
    LatentBelief b;
    b.mu.assign(head.begin(), head.begin() + L);
    b.sigma.resize(size_t(L));
    b.sample.resize(size_t(L));
    for (int i = 0; i < L; ++i) {
        double ls = head[size_t(L + i)];
        b.sigma[size_t(i)] = std::exp(ls);
        double eps = noise.empty() ? 0.0 : noise[size_t(i)];
        b.sample[size_t(i)] = b.mu[size_t(i)] + b.sigma[size_t(i)] * eps;
    }
    b.hidden = std::move(hidden);
    return b;
}

}  // namespace

LatentBelief reset_belief(const nn::ParamStore& store, const Encoder& enc) {
    Vec hidden(size_t(enc.dims.gru_hidden), 0.0);
    return belief_from_hidden(store, enc, std::move(hidden), {});
}

LatentBelief encode_step(const nn::ParamStore& store, const Encoder& enc,
                         std::span<const double> hidden, const TrajectoryStep& step,
                         std::span<const double> noise) {
    if (int(hidden.size()) != enc.dims.gru_hidden) throw ShapeError("encode_step: bad hidden size");
    if (!noise.empty() && int(noise.size()) != enc.dims.latent_dim)
        throw ShapeError("encode_step: bad noise size");
    Vec x = encoder_input(enc, step);
    Vec embed = nn::affine_fwd(store, enc.embed_w, enc.embed_b, {std::span<const double>(x)});
    nn::relu_inplace(embed);
    Vec h = nn::gru_fwd(store, enc.gru, embed, hidden);
    return belief_from_hidden(store, enc, std::move(h), noise);
}

LatentBelief encode_prefix(const nn::ParamStore& store, const Encoder& enc,
                           const Trajectory& traj, int t, std::span<const double> noise) {
    if (t < 0 || t > int(traj.steps.size())) throw Error("encode_prefix: t out of range");
    LatentBelief b = reset_belief(store, enc);
    for (int k = 0; k < t; ++k) {
        std::span<const double> n = (k == t - 1) ? noise : std::span<const double>{};
        b = encode_step(store, enc, b.hidden, traj.steps[size_t(k)], n);
    }
    return b;
}

double kl_to_prior(const LatentBelief& belief) {
    double kl = 0.0;
    for (size_t i = 0; i < belief.mu.size(); ++i) {
        double mu = belief.mu[i];
        double s2 = belief.sigma[i] * belief.sigma[i];
        kl += 0.5 * (mu * mu + s2 - 1.0 - std::log(s2));
    }
    return kl;
}

}  // namespace metavim::belief
