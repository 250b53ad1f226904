#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "metavim/nn.hpp"

using namespace metavim;
using namespace metavim::nn;

TEST_CASE("affine forward and gradient") {
    ParamStore store;
    int w = store.add("w", 2, 2);
    int b = store.add("b", 2, 1);
    store.at(w).value.at(0, 0) = 1.0;
    store.at(w).value.at(1, 1) = 1.0;

    Tape t(store);
    Vec x{3.0, -2.0};
    NodeId y = t.affine(w, b, {t.leaf(x)});
    CHECK(t.value(y).a[0] == doctest::Approx(3.0));
    CHECK(t.value(y).a[1] == doctest::Approx(-2.0));

    ParamStore s2;
    int w2 = s2.add("w", 1, 1);
    int b2 = s2.add("b", 1, 1);
    s2.at(w2).value.a[0] = 2.0;
    s2.at(b2).value.a[0] = 1.0;
    Tape t2(s2);
    NodeId y2 = t2.affine(w2, b2, {t2.leaf(Vec{3.0})});
    CHECK(t2.scalar(y2) == doctest::Approx(7.0));
    t2.backward(y2);  // upstream gradient 1
    Grads g = t2.take_grads();
    CHECK(g.g[size_t(w2)].a[0] == doctest::Approx(3.0));
    CHECK(g.g[size_t(b2)].a[0] == doctest::Approx(1.0));
}

TEST_CASE("affine rejects shape mismatch") {
    ParamStore store;
    int w = store.add("w", 2, 3);
    int b = store.add("b", 2, 1);
    Tape t(store);
    CHECK_THROWS_AS(t.affine(w, b, {t.leaf(Vec{1.0, 2.0})}), ShapeError);
}

TEST_CASE("gru cell fixed points") {
    Rng rng(1);
    ParamStore store;
    GruIds g = add_gru(store, "g", 2, 3, rng);
    for (Param& p : store.all())
        for (double& v : p.value.a) v = 0.0;  // all weights zero

    Vec h{0.4, -1.0, 2.0};
    Vec x{0.3, 0.7};
    Vec hn = gru_fwd(store, g, x, h);
    for (int i = 0; i < 3; ++i) CHECK(hn[size_t(i)] == doctest::Approx(0.5 * h[size_t(i)]));

    Vec zero2{0.0, 0.0}, zero3{0.0, 0.0, 0.0};
    Vec hz = gru_fwd(store, g, zero2, zero3);
    for (double v : hz) CHECK(v == 0.0);
}

TEST_CASE("gru 1-dim hand value and tape/plain agreement") {
    Rng rng(1);
    ParamStore store;
    GruIds g = add_gru(store, "g", 1, 1, rng);
    for (Param& p : store.all())
        for (double& v : p.value.a) v = (p.name.find("/b") != std::string::npos) ? 0.0 : 1.0;

    Vec x{1.0}, h{0.0};
    Vec hn = gru_fwd(store, g, x, h);
    double sig1 = 1.0 / (1.0 + std::exp(-1.0));
    CHECK(hn[0] == doctest::Approx(sig1 * std::tanh(1.0)));
    CHECK(hn[0] == doctest::Approx(0.5568).epsilon(1e-3));

    Tape t(store);
    NodeId hn_node = t.gru_step(g, t.leaf(x), t.leaf(h));
    CHECK(t.value(hn_node).a[0] == hn[0]);

    auto loss = [&](Tape& tp) {
        NodeId out = tp.gru_step(g, tp.leaf(Vec{1.0}), tp.leaf(Vec{0.0}));
        return tp.sum(out);
    };
    FdReport rep = finite_diff_check(loss, store);
    CHECK(rep.max_rel_err <= 1e-6);
}

TEST_CASE("gaussian reparam values and gradient") {
    ParamStore store;
    Tape t(store);
    NodeId mu = t.leaf(Vec{0.5, -1.0});
    NodeId ls = t.leaf(Vec{0.0, 0.0});
    Vec noise{0.0, 0.0};
    NodeId m = t.gaussian_reparam(mu, ls, noise);
    CHECK(t.value(m).a[0] == doctest::Approx(0.5));
    CHECK(t.value(m).a[1] == doctest::Approx(-1.0));

    Tape t2(store);
    NodeId m2 = t2.gaussian_reparam(t2.leaf(Vec{0.0}), t2.leaf(Vec{0.0}), Vec{2.0});
    CHECK(t2.value(m2).a[0] == doctest::Approx(2.0));

    // d m / d log_sigma at (log_sigma=0, noise=2) is 2
    ParamStore s3;
    int lsp = s3.add("ls", 1, 1);
    int mup = s3.add("mu", 1, 1);
    Tape t3(s3);
    NodeId m3 = t3.gaussian_reparam(t3.param_node(mup), t3.param_node(lsp), Vec{2.0});
    t3.backward(t3.sum(m3));
    Grads g = t3.take_grads();
    CHECK(g.g[size_t(lsp)].a[0] == doctest::Approx(2.0));
    CHECK(g.g[size_t(mup)].a[0] == doctest::Approx(1.0));
}

TEST_CASE("adam steps") {
    Rng rng(7);
    ParamStore store;
    int w = store.add("w", 1, 1);
    store.at(w).value.a[0] = 1.0;

    Grads zero;
    zero.ensure(size_t(store.count()));
    zero.g[size_t(w)] = Mat(1, 1);
    store.adam_step(zero, 0.001, 0.9, 0.999, 1e-5);
    CHECK(store.at(w).value.a[0] == doctest::Approx(1.0));

    ParamStore s2;
    int w2 = s2.add("w", 1, 1);
    Grads g;
    g.ensure(size_t(s2.count()));
    g.g[size_t(w2)] = Mat(1, 1);
    g.g[size_t(w2)].a[0] = 1.0;
    s2.adam_step(g, 0.001, 0.9, 0.999, 1e-5);
    CHECK(s2.at(w2).value.a[0] == doctest::Approx(-0.00099999).epsilon(1e-6));
    double after_first = s2.at(w2).value.a[0];
    s2.adam_step(g, 0.001, 0.9, 0.999, 1e-5);
    CHECK(s2.at(w2).value.a[0] < after_first);  // same sign of update

    Grads bad;
    bad.ensure(size_t(s2.count()));
    bad.g[size_t(w2)] = Mat(1, 1);
    bad.g[size_t(w2)].a[0] = std::nan("");
    CHECK_THROWS_AS(s2.adam_step(bad, 0.001, 0.9, 0.999, 1e-5), NumericError);
}

TEST_CASE("finite differences suite") {
    Rng rng(11);

    // linear loss c . theta
    ParamStore lin;
    int c = lin.add("w", 1, 4);
    int cb = lin.add("b", 1, 1);
    for (double& v : lin.at(c).value.a) v = rng.uniform(-2, 2);
    Vec x{0.5, -1.5, 2.0, 0.25};
    auto linear_loss = [&, x](Tape& t) { return t.sum(t.affine(c, cb, {t.leaf(x)})); };
    CHECK(finite_diff_check(linear_loss, lin).max_rel_err <= 1e-10);

    // random 2-layer tanh network
    ParamStore net;
    Rng r2(5);
    int w0 = net.add_uniform("w0", 6, 4, r2);
    int b0 = net.add_uniform("b0", 6, 1, r2);
    int w1 = net.add_uniform("w1", 3, 6, r2);
    int b1 = net.add_uniform("b1", 3, 1, r2);
    Vec xin{0.3, -0.8, 1.2, 0.1};
    auto mlp_loss = [&, xin](Tape& t) {
        NodeId h = t.tanh_(t.affine(w0, b0, {t.leaf(xin)}));
        NodeId y = t.tanh_(t.affine(w1, b1, {h}));
        return t.sum(t.square(y));
    };
    CHECK(finite_diff_check(mlp_loss, net).max_rel_err <= 1e-6);

    // GRU through time, 3 steps
    ParamStore gs;
    Rng r3(7);
    GruIds g = add_gru(gs, "g", 3, 4, r3);
    std::vector<Vec> xs = {{0.2, -0.4, 0.6}, {-1.0, 0.5, 0.0}, {0.3, 0.3, -0.9}};
    auto gru_loss = [&, xs](Tape& t) {
        NodeId h = t.leaf(Vec(4, 0.0));
        for (const Vec& xv : xs) h = t.gru_step(g, t.leaf(xv), h);
        return t.sum(t.square(h));
    };
    CHECK(finite_diff_check(gru_loss, gs).max_rel_err <= 1e-5);

    // parallel oracle agrees with serial
    FdReport ser = finite_diff_check(gru_loss, gs, 1e-5, false);
    FdReport par = finite_diff_check(gru_loss, gs, 1e-5, true);
    CHECK(ser.max_rel_err == par.max_rel_err);
}

TEST_CASE("softmax properties") {
    ParamStore store;
    Tape t(store);
    Vec logits{1.0, 0.0, 0.0, 0.0};
    NodeId p = t.softmax(t.leaf(logits));
    double sum = 0.0;
    for (double v : t.value(p).a) sum += v;
    CHECK(std::fabs(sum - 1.0) <= 1e-12);
    CHECK(t.value(p).a[0] == doctest::Approx(0.4754).epsilon(1e-3));

    NodeId lp = t.log_softmax(t.leaf(logits));
    for (int i = 0; i < 4; ++i)
        CHECK(std::fabs(t.value(lp).a[size_t(i)] - std::log(t.value(p).a[size_t(i)])) <= 1e-9);

    Vec plain = softmax_vec(logits);
    for (int i = 0; i < 4; ++i) CHECK(plain[size_t(i)] == t.value(p).a[size_t(i)]);
}

TEST_CASE("zero upstream gradient yields zero parameter gradients") {
    Rng rng(21);
    ParamStore store;
    int w = store.add_uniform("w", 3, 3, rng);
    int b = store.add_uniform("b", 3, 1, rng);
    Tape t(store);
    NodeId y = t.tanh_(t.affine(w, b, {t.leaf(Vec{1.0, 2.0, 3.0})}));
    NodeId loss = t.scale(t.sum(y), 0.0);
    t.backward(loss);
    Grads g = t.take_grads();
    for (const Mat& m : g.g)
        for (double v : m.a) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round-trips byte-identically") {
    Rng rng(13);
    ParamStore store;
    store.add_uniform("pi/actor/w0", 4, 3, rng);
    store.add_uniform("enc/embed/W", 5, 7, rng);
    store.add("enc/head/b", 10, 1);
    CkptMeta meta;
    meta.variant = "full";

    std::string p1 = "ckpt_rt_1.json", p2 = "ckpt_rt_2.json";
    save_checkpoint(p1, store, meta);
    Checkpoint ck = load_checkpoint(p1);
    save_checkpoint(p2, ck.store, ck.meta);

    std::ifstream f1(p1), f2(p2);
    std::stringstream s1, s2;
    s1 << f1.rdbuf();
    s2 << f2.rdbuf();
    CHECK(s1.str() == s2.str());
    CHECK(s1.str().size() > 0);

    // values identical to the originals
    for (const Param& p : store.all()) {
        const Param& q = ck.store.at(ck.store.require(p.name));
        REQUIRE(q.value.a.size() == p.value.a.size());
        for (size_t k = 0; k < p.value.a.size(); ++k) CHECK(q.value.a[k] == p.value.a[k]);
    }
    std::remove(p1.c_str());
    std::remove(p2.c_str());
}

TEST_CASE("ppo clip and entropy arithmetic") {
    ParamStore store;
    Tape t(store);
    // ratio = 1.5 via logp - logp_old = log 1.5, adv = 1, eps = 0.2
    NodeId lp = t.scalar_leaf(std::log(1.5));
    NodeId s = t.ppo_clip(lp, 0.0, 1.0, 0.2);
    CHECK(t.scalar(s) == doctest::Approx(-1.2));  // -min(1.5, 1.2)

    NodeId h = t.entropy(t.leaf(Vec{0.0, 0.0, 0.0, 0.0}));
    CHECK(t.scalar(h) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("kl to standard normal closed form") {
    ParamStore store;
    Tape t(store);
    NodeId mu0 = t.leaf(Vec{0.0});
    NodeId ls0 = t.leaf(Vec{0.0});
    CHECK(t.scalar(t.kl_std_normal(mu0, ls0)) == 0.0);

    NodeId mu1 = t.leaf(Vec{1.0});
    CHECK(t.scalar(t.kl_std_normal(mu1, ls0)) == doctest::Approx(0.5));

    NodeId ls2 = t.leaf(Vec{std::log(2.0)});
    CHECK(t.scalar(t.kl_std_normal(mu0, ls2)) == doctest::Approx(1.5 - std::log(2.0)));
}
