#include "metavim/worldmodel.hpp"

#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace metavim::wm {

namespace {

Mlp3 add_mlp(nn::ParamStore& store, const std::string& prefix, int in_dim, int hidden,
             int out_dim, Rng& rng) {
    Mlp3 m;
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

Mlp3 bind_mlp(const nn::ParamStore& store, const std::string& prefix, int in_dim, int out_dim) {
    Mlp3 m;
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

void append_onehot(Vec& x, int value, int width) {
    size_t base = x.size();
    x.resize(base + size_t(width), 0.0);
    x[base + size_t(value)] = 1.0;
}

// constant (everything except the latent) decoder input segments
Vec r_self_const(const DecoderDims& d, std::span<const double> next_obs,
                 std::span<const double> obs, int action) {
    Vec x(next_obs.begin(), next_obs.end());
    x.insert(x.end(), obs.begin(), obs.end());
    append_onehot(x, action, d.n_actions);
    return x;
}

Vec r_nbr_const(const DecoderDims& d, std::span<const double> next_obs,
                std::span<const double> obs, int action, int nbr_action, int nbr_dir) {
    Vec x = r_self_const(d, next_obs, obs, action);
    append_onehot(x, nbr_action, d.n_actions);
    append_onehot(x, nbr_dir, 4);
    return x;
}

Vec o_self_const(const DecoderDims& d, std::span<const double> obs, int action) {
    Vec x(obs.begin(), obs.end());
    append_onehot(x, action, d.n_actions);
    return x;
}

Vec o_nbr_const(const DecoderDims& d, std::span<const double> obs, int action, int nbr_action,
                int nbr_dir) {
    Vec x = o_self_const(d, obs, action);
    append_onehot(x, nbr_action, d.n_actions);
    append_onehot(x, nbr_dir, 4);
    return x;
}

Vec mlp_fwd(const nn::ParamStore& store, const Mlp3& mlp, std::span<const double> const_part,
            std::span<const double> m) {
    Vec h0 = nn::affine_fwd(store, mlp.w0, mlp.b0, {const_part, m});
    nn::relu_inplace(h0);
    Vec h1 = nn::affine_fwd(store, mlp.w1, mlp.b1, {std::span<const double>(h0)});
    nn::relu_inplace(h1);
    return nn::affine_fwd(store, mlp.w2, mlp.b2, {std::span<const double>(h1)});
}

}  // namespace

DecoderSet DecoderSet::create(nn::ParamStore& store, const DecoderDims& dims, Rng& rng) {
    DecoderSet d;
    d.dims = dims;
    d.r_self = add_mlp(store, "dec/r_self", dims.r_self_in(), dims.hidden, 1, rng);
    d.r_nbr = add_mlp(store, "dec/r_nbr", dims.r_nbr_in(), dims.hidden, 1, rng);
    d.o_self = add_mlp(store, "dec/o_self", dims.o_self_in(), dims.hidden, dims.obs_dim, rng);
    d.o_nbr = add_mlp(store, "dec/o_nbr", dims.o_nbr_in(), dims.hidden, dims.obs_dim, rng);
    return d;
}

DecoderSet DecoderSet::bind(const nn::ParamStore& store, const DecoderDims& dims) {
    DecoderSet d;
    d.dims = dims;
    d.r_self = bind_mlp(store, "dec/r_self", dims.r_self_in(), 1);
    d.r_nbr = bind_mlp(store, "dec/r_nbr", dims.r_nbr_in(), 1);
    d.o_self = bind_mlp(store, "dec/o_self", dims.o_self_in(), dims.obs_dim);
    d.o_nbr = bind_mlp(store, "dec/o_nbr", dims.o_nbr_in(), dims.obs_dim);
    return d;
}

Vec predict_obs_self(const nn::ParamStore& store, const DecoderSet& dec,
                     std::span<const double> obs, int action, std::span<const double> m) {
    Vec c = o_self_const(dec.dims, obs, action);
    return mlp_fwd(store, dec.o_self, c, m);
}

Vec predict_obs_nbr(const nn::ParamStore& store, const DecoderSet& dec,
                    std::span<const double> obs, int action, int nbr_action, int nbr_dir,
                    std::span<const double> m) {
    if (nbr_dir < 0 || nbr_dir >= 4) throw Error("predict_obs_nbr: bad neighbor direction");
    Vec c = o_nbr_const(dec.dims, obs, action, nbr_action, nbr_dir);
    return mlp_fwd(store, dec.o_nbr, c, m);
}

double predict_reward_self(const nn::ParamStore& store, const DecoderSet& dec,
                           std::span<const double> next_obs, std::span<const double> obs,
                           int action, std::span<const double> m) {
    Vec c = r_self_const(dec.dims, next_obs, obs, action);
    return mlp_fwd(store, dec.r_self, c, m)[0];
}

double predict_reward_nbr(const nn::ParamStore& store, const DecoderSet& dec,
                          std::span<const double> next_obs, std::span<const double> obs,
                          int action, int nbr_action, int nbr_dir, std::span<const double> m) {
    if (nbr_dir < 0 || nbr_dir >= 4) throw Error("predict_reward_nbr: bad neighbor direction");
    Vec c = r_nbr_const(dec.dims, next_obs, obs, action, nbr_action, nbr_dir);
    return mlp_fwd(store, dec.r_nbr, c, m)[0];
}

nn::NodeId mlp_node(nn::Tape& t, const Mlp3& mlp, std::span<const double> const_part,
                    nn::NodeId m) {
    nn::NodeId h0 = t.relu(t.affine(mlp.w0, mlp.b0, {t.leaf(const_part), m}));
    nn::NodeId h1 = t.relu(t.affine(mlp.w1, mlp.b1, {h0}));
    return t.affine(mlp.w2, mlp.b2, {h1});
}

std::vector<int> elbo_prefixes(int T, int stride) {
    std::vector<int> out;
    if (stride < 1) throw ConfigError("elbo stride must be >= 1");
    for (int t = stride; t <= T; t += stride) out.push_back(t);
    if (out.empty() && T > 0) out.push_back(T);
    return out;
}

nn::NodeId elbo_loss_node(nn::Tape& tape, const belief::Encoder& enc, const DecoderSet& dec,
                          const belief::Trajectory& traj, int t, std::span<const double> noise) {
    const int T = int(traj.steps.size());
    if (t <= 0 || t > T) throw Error("elbo_loss: t out of range");
    if (int(noise.size()) != enc.dims.latent_dim) throw ShapeError("elbo_loss: bad noise size");

    // encode the prefix
    nn::NodeId h = tape.leaf(Vec(size_t(enc.dims.gru_hidden), 0.0));
    for (int k = 0; k < t; ++k) {
        Vec x = belief::encoder_input(enc, traj.steps[size_t(k)]);
        nn::NodeId e = tape.relu(tape.affine(enc.embed_w, enc.embed_b, {tape.leaf(x)}));
        h = tape.gru_step(enc.gru, e, h);
    }
    nn::NodeId head = tape.affine(enc.head_w, enc.head_b, {h});
    nn::NodeId mu = tape.slice(head, 0, enc.dims.latent_dim);
    nn::NodeId ls = tape.slice(head, enc.dims.latent_dim, enc.dims.latent_dim);
    nn::NodeId m = tape.gaussian_reparam(mu, ls, noise);
    nn::NodeId kl = tape.kl_std_normal(mu, ls);

    std::vector<std::pair<nn::NodeId, double>> terms;
    const double rs = 1.0 / dec.dims.q_scale;
    for (int k = 0; k < t; ++k) {
        const belief::TrajectoryStep& step = traj.steps[size_t(k)];
        nn::Mat r_target(1, 1);
        r_target.a[0] = step.reward * rs;
        nn::Mat o_target = nn::Mat::vec(step.next_obs);

        Vec crs = r_self_const(dec.dims, step.next_obs, step.obs, step.action);
        terms.emplace_back(tape.gauss_nll(mlp_node(tape, dec.r_self, crs, m), r_target), 1.0);

        if (!step.neighbors.empty()) {
            double w = 1.0 / double(step.neighbors.size());
            for (const belief::NeighborAction& nb : step.neighbors) {
                Vec c = r_nbr_const(dec.dims, step.next_obs, step.obs, step.action, nb.action, nb.dir);
                terms.emplace_back(tape.gauss_nll(mlp_node(tape, dec.r_nbr, c, m), r_target), w);
            }
        }

        Vec cos = o_self_const(dec.dims, step.obs, step.action);
        terms.emplace_back(tape.gauss_nll(mlp_node(tape, dec.o_self, cos, m), o_target), 1.0);

        if (!step.neighbors.empty()) {
            double w = 1.0 / double(step.neighbors.size());
            for (const belief::NeighborAction& nb : step.neighbors) {
                Vec c = o_nbr_const(dec.dims, step.obs, step.action, nb.action, nb.dir);
                terms.emplace_back(tape.gauss_nll(mlp_node(tape, dec.o_nbr, c, m), o_target), w);
            }
        }
    }
    terms.emplace_back(kl, 1.0);
    return tape.add_scaled(terms);
}

double elbo_loss(const nn::ParamStore& store, const belief::Encoder& enc, const DecoderSet& dec,
                 const belief::Trajectory& traj, int t, std::span<const double> noise,
                 nn::Grads* grads) {
    nn::Tape tape(store);
    nn::NodeId loss = elbo_loss_node(tape, enc, dec, traj, t, noise);
    double value = tape.scalar(loss);
    if (!std::isfinite(value)) throw NumericError("elbo_loss: non-finite loss");
    if (grads) {
        tape.backward(loss);
        *grads = tape.take_grads();
    }
    return value;
}

TrajectoryElbo trajectory_elbo(const nn::ParamStore& store, const belief::Encoder& enc,
                               const DecoderSet& dec, const belief::Trajectory& traj,
                               std::span<const int> prefixes, const std::vector<Vec>& noises,
                               bool with_grads) {
    const int T = int(traj.steps.size());
    if (prefixes.empty()) throw Error("trajectory_elbo: no prefixes");
    if (noises.size() != prefixes.size()) throw ShapeError("trajectory_elbo: noise count mismatch");
    const int tmax = prefixes.back();
    if (tmax > T) throw Error("trajectory_elbo: prefix beyond trajectory length");

    const DecoderDims& dd = dec.dims;
    const double rs = 1.0 / dd.q_scale;

    // constant input matrices over all steps < tmax
    nn::Mat xenc(enc.dims.input_dim(), tmax);
    nn::Mat c_rs(dd.r_self_in() - dd.latent_dim, tmax);
    nn::Mat c_os(dd.o_self_in() - dd.latent_dim, tmax);
    nn::Mat t_r(1, tmax);
    nn::Mat t_o(dd.obs_dim, tmax);
    int nbr_cols = 0;
    std::vector<int> nbr_col_step;  // step index per neighbor column
    for (int k = 0; k < tmax; ++k) {
        const belief::TrajectoryStep& step = traj.steps[size_t(k)];
        Vec xe = belief::encoder_input(enc, step);
        for (int i = 0; i < int(xe.size()); ++i) xenc.at(i, k) = xe[size_t(i)];
        Vec crs = r_self_const(dd, step.next_obs, step.obs, step.action);
        for (int i = 0; i < int(crs.size()); ++i) c_rs.at(i, k) = crs[size_t(i)];
        Vec cos = o_self_const(dd, step.obs, step.action);
        for (int i = 0; i < int(cos.size()); ++i) c_os.at(i, k) = cos[size_t(i)];
        t_r.at(0, k) = step.reward * rs;
        for (int i = 0; i < dd.obs_dim; ++i) t_o.at(i, k) = step.next_obs[size_t(i)];
        for (int j = 0; j < int(step.neighbors.size()); ++j) {
            nbr_col_step.push_back(k);
            nbr_cols += 1;
        }
    }
    nn::Mat c_rn(dd.r_nbr_in() - dd.latent_dim, nbr_cols);
    nn::Mat c_on(dd.o_nbr_in() - dd.latent_dim, nbr_cols);
    nn::Mat t_rn(1, nbr_cols);
    nn::Mat t_on(dd.obs_dim, nbr_cols);
    Vec nbr_w(size_t(nbr_cols), 0.0);
    {
        int col = 0;
        for (int k = 0; k < tmax; ++k) {
            const belief::TrajectoryStep& step = traj.steps[size_t(k)];
            if (step.neighbors.empty()) continue;
            double w = 1.0 / double(step.neighbors.size());
            for (const belief::NeighborAction& nb : step.neighbors) {
                Vec crn = r_nbr_const(dd, step.next_obs, step.obs, step.action, nb.action, nb.dir);
                for (int i = 0; i < int(crn.size()); ++i) c_rn.at(i, col) = crn[size_t(i)];
                Vec con = o_nbr_const(dd, step.obs, step.action, nb.action, nb.dir);
                for (int i = 0; i < int(con.size()); ++i) c_on.at(i, col) = con[size_t(i)];
                t_rn.at(0, col) = step.reward * rs;
                for (int i = 0; i < dd.obs_dim; ++i) t_on.at(i, col) = step.next_obs[size_t(i)];
                nbr_w[size_t(col)] = w;
                col += 1;
            }
        }
    }

    auto sub_cols = [](const nn::Mat& m, int cols) {
        nn::Mat s(m.rows, cols);
        for (int j = 0; j < cols; ++j)
            for (int i = 0; i < m.rows; ++i) s.at(i, j) = m.at(i, j);
        return s;
    };

    nn::Tape tape(store);

    // shared encoder pass
    nn::NodeId embed = tape.relu(tape.affine_const(enc.embed_w, enc.embed_b, xenc));
    std::vector<nn::NodeId> hidden_at(size_t(tmax) + 1);
    hidden_at[0] = tape.leaf(Vec(size_t(enc.dims.gru_hidden), 0.0));
    for (int k = 0; k < tmax; ++k)
        hidden_at[size_t(k) + 1] = tape.gru_step(enc.gru, tape.col(embed, k), hidden_at[size_t(k)]);

    auto batched_head = [&](const Mlp3& mlp, const nn::Mat& c, nn::NodeId m) {
        nn::NodeId h0 = tape.relu(tape.affine_mixed(mlp.w0, mlp.b0, c, m));
        nn::NodeId h1 = tape.relu(tape.affine_node(mlp.w1, mlp.b1, h0));
        return tape.affine_node(mlp.w2, mlp.b2, h1);
    };

    TrajectoryElbo out;
    std::vector<nn::NodeId> prefix_nodes;
    for (size_t p = 0; p < prefixes.size(); ++p) {
        int t = prefixes[p];
        nn::NodeId head = tape.affine(enc.head_w, enc.head_b, {hidden_at[size_t(t)]});
        nn::NodeId mu = tape.slice(head, 0, enc.dims.latent_dim);
        nn::NodeId ls = tape.slice(head, enc.dims.latent_dim, enc.dims.latent_dim);
        nn::NodeId m = tape.gaussian_reparam(mu, ls, noises[p]);
        nn::NodeId kl = tape.kl_std_normal(mu, ls);

        int ncols = 0;
        while (ncols < nbr_cols && nbr_col_step[size_t(ncols)] < t) ncols += 1;

        std::vector<std::pair<nn::NodeId, double>> terms;
        terms.emplace_back(
            tape.gauss_nll(batched_head(dec.r_self, sub_cols(c_rs, t), m), sub_cols(t_r, t)), 1.0);
        if (ncols > 0)
            terms.emplace_back(tape.gauss_nll(batched_head(dec.r_nbr, sub_cols(c_rn, ncols), m),
                                              sub_cols(t_rn, ncols),
                                              std::span<const double>(nbr_w.data(), size_t(ncols))),
                               1.0);
        terms.emplace_back(
            tape.gauss_nll(batched_head(dec.o_self, sub_cols(c_os, t), m), sub_cols(t_o, t)), 1.0);
        if (ncols > 0)
            terms.emplace_back(tape.gauss_nll(batched_head(dec.o_nbr, sub_cols(c_on, ncols), m),
                                              sub_cols(t_on, ncols),
                                              std::span<const double>(nbr_w.data(), size_t(ncols))),
                               1.0);
        terms.emplace_back(kl, 1.0);
        prefix_nodes.push_back(tape.add_scaled(terms));
    }

    nn::NodeId loss = tape.mean(prefix_nodes);
    out.mean_loss = tape.scalar(loss);
    if (!std::isfinite(out.mean_loss)) throw NumericError("trajectory_elbo: non-finite loss");
    for (nn::NodeId n : prefix_nodes) out.prefix_losses.push_back(tape.scalar(n));
    if (with_grads) {
        tape.backward(loss);
        out.grads = tape.take_grads();
    }
    return out;
}

MinibatchGrad vae_minibatch_grad(const nn::ParamStore& store, const belief::Encoder& enc,
                                 const DecoderSet& dec,
                                 std::span<const belief::Trajectory* const> items,
                                 const std::vector<std::vector<Vec>>& noises, int stride,
                                 int threads) {
    const int n = int(items.size());
    std::vector<double> losses(size_t(n), 0.0);
    std::vector<nn::Grads> grads(static_cast<size_t>(n));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) num_threads(threads > 0 ? threads : omp_get_max_threads()) if (threads != 1)
#endif
    for (int i = 0; i < n; ++i) {
        const belief::Trajectory& traj = *items[size_t(i)];
        std::vector<int> prefixes = elbo_prefixes(int(traj.steps.size()), stride);
        TrajectoryElbo te = trajectory_elbo(store, enc, dec, traj, prefixes, noises[size_t(i)], true);
        losses[size_t(i)] = te.mean_loss;
        grads[size_t(i)] = std::move(te.grads);
    }

    MinibatchGrad out;
    out.grads.ensure(size_t(store.count()));
    double scale = 1.0 / double(n);
    for (int i = 0; i < n; ++i) {
        out.loss += losses[size_t(i)] * scale;
        out.grads.add_scaled(grads[size_t(i)], scale);
    }
    return out;
}

MinibatchGrad vae_minibatch_grad_ref(const nn::ParamStore& store, const belief::Encoder& enc,
                                     const DecoderSet& dec,
                                     std::span<const belief::Trajectory* const> items,
                                     const std::vector<std::vector<Vec>>& noises, int stride) {
    MinibatchGrad out;
    out.grads.ensure(size_t(store.count()));
    const int n = int(items.size());
    double item_scale = 1.0 / double(n);
    for (int i = 0; i < n; ++i) {
        const belief::Trajectory& traj = *items[size_t(i)];
        std::vector<int> prefixes = elbo_prefixes(int(traj.steps.size()), stride);
        double prefix_scale = item_scale / double(prefixes.size());
        for (size_t p = 0; p < prefixes.size(); ++p) {
            nn::Grads g;
            double l = elbo_loss(store, enc, dec, traj, prefixes[p], noises[size_t(i)][p], &g);
            out.loss += l * prefix_scale;
            out.grads.add_scaled(g, prefix_scale);
        }
    }
    return out;
}

void VaeBuffer::push(belief::Trajectory traj) {
    buf_.push_back(std::move(traj));
    while (buf_.size() > cap_) buf_.pop_front();
}

VaeStats vae_update(nn::ParamStore& store, const belief::Encoder& enc, const DecoderSet& dec,
                    const VaeBuffer& buffer, const VaeHyper& hyper, Rng& rng, int threads) {
    if (buffer.size() == 0) throw Error("vae_update: empty buffer");

    std::vector<const belief::Trajectory*> items;
    items.reserve(size_t(hyper.minibatch));
    for (int i = 0; i < hyper.minibatch; ++i)
        items.push_back(&buffer.at(size_t(rng.uniform_int(int(buffer.size())))));

    // pre-draw all latent noise so threading cannot change the stream
    std::vector<std::vector<Vec>> noises(items.size());
    for (size_t i = 0; i < items.size(); ++i) {
        std::vector<int> prefixes = elbo_prefixes(int(items[i]->steps.size()), hyper.stride);
        noises[i].resize(prefixes.size());
        for (Vec& v : noises[i]) {
            v.resize(size_t(enc.dims.latent_dim));
            rng.fill_normal(v);
        }
    }

    MinibatchGrad mg = vae_minibatch_grad(store, enc, dec, items, noises, hyper.stride, threads);
    if (hyper.elbo_coef != 1.0) mg.grads.scale(hyper.elbo_coef);
    store.adam_step(mg.grads, hyper.lr, hyper.beta1, hyper.beta2, hyper.adam_eps);

    VaeStats stats;
    stats.loss = mg.loss;
    stats.minibatch = int(items.size());
    return stats;
}

}  // namespace metavim::wm
