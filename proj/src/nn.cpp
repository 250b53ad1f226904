#include "metavim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "json.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace metavim::nn {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0) {
        double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    double e = std::exp(x);
    return e / (1.0 + e);
}

void check_finite(const Mat& m, const char* what) {
    for (double x : m.a) {
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

}  // namespace

// ---------------------------------------------------------------- Grads

void Grads::add_scaled(const Grads& other, double s) {
    ensure(other.g.size());
    for (size_t i = 0; i < other.g.size(); ++i) {
        const Mat& src = other.g[i];
        if (src.empty()) continue;
        Mat& dst = g[i];
        if (dst.empty()) dst = Mat(src.rows, src.cols);
        for (size_t k = 0; k < src.a.size(); ++k) dst.a[k] += s * src.a[k];
    }
}

void Grads::scale(double s) {
    for (Mat& m : g)
        for (double& x : m.a) x *= s;
}

// ---------------------------------------------------------------- ParamStore

int ParamStore::add(const std::string& name, int rows, int cols) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
    Param p;
    p.name = name;
    p.value = Mat(rows, cols);
    p.m = Mat(rows, cols);
    p.v = Mat(rows, cols);
    params_.push_back(std::move(p));
    int id = int(params_.size()) - 1;
    index_[name] = id;
    return id;
}

int ParamStore::add_uniform(const std::string& name, int rows, int cols, Rng& rng) {
    int id = add(name, rows, cols);
    double bound = 1.0 / std::sqrt(double(cols));
    for (double& x : params_[size_t(id)].value.a) x = rng.uniform(-bound, bound);
    return id;
}

int ParamStore::id(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? -1 : it->second;
}

int ParamStore::require(const std::string& name) const {
    int i = id(name);
    if (i < 0) throw ConfigError("missing parameter: " + name);
    return i;
}

void ParamStore::adam_step(const Grads& grads, double lr, double beta1, double beta2, double eps) {
    for (size_t i = 0; i < grads.g.size() && i < params_.size(); ++i) {
        const Mat& g = grads.g[i];
        if (g.empty()) continue;
        Param& p = params_[i];
        if (g.rows != p.value.rows || g.cols != p.value.cols)
            throw ShapeError("gradient shape mismatch for " + p.name);
        for (double x : g.a) {
            if (!std::isfinite(x)) throw NumericError("non-finite gradient for " + p.name);
        }
        p.step += 1;
        double bc1 = 1.0 - std::pow(beta1, double(p.step));
        double bc2 = 1.0 - std::pow(beta2, double(p.step));
        for (size_t k = 0; k < p.value.a.size(); ++k) {
            double gk = g.a[k];
            p.m.a[k] = beta1 * p.m.a[k] + (1.0 - beta1) * gk;
            p.v.a[k] = beta2 * p.v.a[k] + (1.0 - beta2) * gk * gk;
            double mhat = p.m.a[k] / bc1;
            double vhat = p.v.a[k] / bc2;
            p.value.a[k] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

size_t ParamStore::element_count() const {
    size_t n = 0;
    for (const Param& p : params_) n += p.value.a.size();
    return n;
}

uint64_t ParamStore::value_digest() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&h](const void* data, size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(data);
        for (size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ull;
        }
    };
    for (const Param& p : params_) {
        feed(p.name.data(), p.name.size());
        feed(p.value.a.data(), p.value.a.size() * sizeof(double));
    }
    return h;
}

GruIds add_gru(ParamStore& store, const std::string& prefix, int in_dim, int hidden, Rng& rng) {
    GruIds g;
    g.in_dim = in_dim;
    g.hidden = hidden;
    g.wz = store.add_uniform(prefix + "/Wz", hidden, in_dim, rng);
    g.uz = store.add_uniform(prefix + "/Uz", hidden, hidden, rng);
    g.bz = store.add(prefix + "/bz", hidden, 1);
    g.wr = store.add_uniform(prefix + "/Wr", hidden, in_dim, rng);
    g.ur = store.add_uniform(prefix + "/Ur", hidden, hidden, rng);
    g.br = store.add(prefix + "/br", hidden, 1);
    g.wc = store.add_uniform(prefix + "/Wc", hidden, in_dim, rng);
    g.uc = store.add_uniform(prefix + "/Uc", hidden, hidden, rng);
    g.bc = store.add(prefix + "/bc", hidden, 1);
    return g;
}

GruIds bind_gru(const ParamStore& store, const std::string& prefix, int in_dim, int hidden) {
    GruIds g;
    g.in_dim = in_dim;
    g.hidden = hidden;
    g.wz = store.require(prefix + "/Wz");
    g.uz = store.require(prefix + "/Uz");
    g.bz = store.require(prefix + "/bz");
    g.wr = store.require(prefix + "/Wr");
    g.ur = store.require(prefix + "/Ur");
    g.br = store.require(prefix + "/br");
    g.wc = store.require(prefix + "/Wc");
    g.uc = store.require(prefix + "/Uc");
    g.bc = store.require(prefix + "/bc");
    return g;
}

// ---------------------------------------------------------------- Tape

Tape::Tape(const ParamStore& store) : store_(&store) {
    nodes_.reserve(64);
}

NodeId Tape::push(Mat val, std::function<void(Tape&, int)> back) {
    nodes_.push_back(Node{std::move(val), Mat{}, std::move(back)});
    return NodeId(nodes_.size()) - 1;
}

Mat& Tape::adj_of(NodeId id) {
    Node& n = nodes_[size_t(id)];
    if (n.adj.empty()) n.adj = Mat(n.val.rows, n.val.cols);
    return n.adj;
}

bool Tape::has_adj(NodeId id) const { return !nodes_[size_t(id)].adj.empty(); }

Mat& Tape::pgrad(int param_id) {
    if (pgrad_.empty()) pgrad_.resize(size_t(store_->count()));
    Mat& g = pgrad_[size_t(param_id)];
    if (g.empty()) {
        const Mat& v = store_->at(param_id).value;
        g = Mat(v.rows, v.cols);
    }
    return g;
}

double Tape::scalar(NodeId id) const {
    const Mat& v = value(id);
    if (v.size() != 1) throw ShapeError("node is not a scalar");
    return v.a[0];
}

void Tape::backward(NodeId loss) {
    if (value(loss).size() != 1) throw ShapeError("backward loss must be scalar");
    adj_of(loss).a[0] = 1.0;
    for (int id = loss; id >= 0; --id) {
        Node& n = nodes_[size_t(id)];
        if (n.adj.empty() || !n.back) continue;
        n.back(*this, id);
    }
}

Grads Tape::take_grads() {
    Grads g;
    g.g = std::move(pgrad_);
    g.ensure(size_t(store_->count()));
    pgrad_.clear();
    return g;
}

NodeId Tape::leaf(Mat v) { return push(std::move(v), nullptr); }

NodeId Tape::leaf(std::span<const double> v) { return push(Mat::vec(v), nullptr); }

NodeId Tape::scalar_leaf(double v) {
    Mat m(1, 1);
    m.a[0] = v;
    return push(std::move(m), nullptr);
}

NodeId Tape::param_node(int id) {
    Mat v = param(id).value;
    return push(std::move(v), [id](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& gp = t.pgrad(id);
        for (size_t k = 0; k < g.a.size(); ++k) gp.a[k] += g.a[k];
    });
}

NodeId Tape::affine(int w, int b, std::initializer_list<NodeId> xs) {
    std::vector<NodeId> v(xs);
    return affine(w, b, std::span<const NodeId>(v));
}

NodeId Tape::affine(int w, int b, std::span<const NodeId> xs) {
    const Mat& W = param(w).value;
    const Mat& B = param(b).value;
    int total = 0;
    for (NodeId x : xs) {
        const Mat& xv = value(x);
        if (xv.cols != 1) throw ShapeError("affine expects vector inputs");
        total += xv.rows;
    }
    if (total != W.cols || B.rows != W.rows)
        throw ShapeError("affine shape mismatch for " + param(w).name);

    Mat y(W.rows, 1);
    for (int i = 0; i < W.rows; ++i) {
        double acc = B.a[size_t(i)];
        int off = 0;
        for (NodeId x : xs) {
            const Mat& xv = value(x);
            for (int k = 0; k < xv.rows; ++k) acc += W.at(i, off + k) * xv.a[size_t(k)];
            off += xv.rows;
        }
        y.a[size_t(i)] = acc;
    }
    std::vector<NodeId> inputs(xs.begin(), xs.end());
    return push(std::move(y), [w, b, inputs](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& W = t.param(w).value;
        Mat& gw = t.pgrad(w);
        Mat& gb = t.pgrad(b);
        for (int i = 0; i < W.rows; ++i) gb.a[size_t(i)] += g.a[size_t(i)];
        int off = 0;
        for (NodeId x : inputs) {
            const Mat& xv = t.value(x);
            Mat& gx = t.adj_of(x);
            for (int i = 0; i < W.rows; ++i) {
                double gi = g.a[size_t(i)];
                for (int k = 0; k < xv.rows; ++k) {
                    gw.at(i, off + k) += gi * xv.a[size_t(k)];
                    gx.a[size_t(k)] += W.at(i, off + k) * gi;
                }
            }
            off += xv.rows;
        }
    });
}

NodeId Tape::affine_const(int w, int b, const Mat& xc) {
    const Mat& W = param(w).value;
    const Mat& B = param(b).value;
    if (xc.rows != W.cols || B.rows != W.rows)
        throw ShapeError("affine_const shape mismatch for " + param(w).name);
    Mat y(W.rows, xc.cols);
    for (int j = 0; j < xc.cols; ++j)
        for (int i = 0; i < W.rows; ++i) {
            double acc = B.a[size_t(i)];
            for (int k = 0; k < xc.rows; ++k) acc += W.at(i, k) * xc.at(k, j);
            y.at(i, j) = acc;
        }
    Mat xcopy = xc;
    return push(std::move(y), [w, b, xcopy](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& gw = t.pgrad(w);
        Mat& gb = t.pgrad(b);
        for (int j = 0; j < g.cols; ++j)
            for (int i = 0; i < g.rows; ++i) {
                double gi = g.at(i, j);
                gb.a[size_t(i)] += gi;
                for (int k = 0; k < xcopy.rows; ++k) gw.at(i, k) += gi * xcopy.at(k, j);
            }
    });
}

NodeId Tape::affine_mixed(int w, int b, const Mat& xc, NodeId m) {
    const Mat& W = param(w).value;
    const Mat& B = param(b).value;
    const Mat& mv = value(m);
    if (mv.cols != 1) throw ShapeError("affine_mixed shared input must be a vector");
    int d1 = xc.rows, d2 = mv.rows;
    if (d1 + d2 != W.cols || B.rows != W.rows)
        throw ShapeError("affine_mixed shape mismatch for " + param(w).name);

    Mat y(W.rows, xc.cols);
    // shared tail contribution computed once per row, identical summation
    // order to the unbatched affine([const; m]) path
    for (int j = 0; j < xc.cols; ++j)
        for (int i = 0; i < W.rows; ++i) {
            double acc = B.a[size_t(i)];
            for (int k = 0; k < d1; ++k) acc += W.at(i, k) * xc.at(k, j);
            for (int k = 0; k < d2; ++k) acc += W.at(i, d1 + k) * mv.a[size_t(k)];
            y.at(i, j) = acc;
        }
    Mat xcopy = xc;
    return push(std::move(y), [w, b, m, xcopy, d1, d2](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& W = t.param(w).value;
        const Mat& mv = t.value(m);
        Mat& gw = t.pgrad(w);
        Mat& gb = t.pgrad(b);
        Mat& gm = t.adj_of(m);
        for (int i = 0; i < g.rows; ++i) {
            double grow = 0.0;
            for (int j = 0; j < g.cols; ++j) {
                double gi = g.at(i, j);
                grow += gi;
                for (int k = 0; k < d1; ++k) gw.at(i, k) += gi * xcopy.at(k, j);
            }
            gb.a[size_t(i)] += grow;
            for (int k = 0; k < d2; ++k) {
                gw.at(i, d1 + k) += grow * mv.a[size_t(k)];
                gm.a[size_t(k)] += W.at(i, d1 + k) * grow;
            }
        }
    });
}

NodeId Tape::affine_node(int w, int b, NodeId x) {
    const Mat& W = param(w).value;
    const Mat& B = param(b).value;
    const Mat& xv = value(x);
    if (xv.rows != W.cols || B.rows != W.rows)
        throw ShapeError("affine_node shape mismatch for " + param(w).name);
    Mat y(W.rows, xv.cols);
    for (int j = 0; j < xv.cols; ++j)
        for (int i = 0; i < W.rows; ++i) {
            double acc = B.a[size_t(i)];
            for (int k = 0; k < xv.rows; ++k) acc += W.at(i, k) * xv.at(k, j);
            y.at(i, j) = acc;
        }
    return push(std::move(y), [w, b, x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& W = t.param(w).value;
        const Mat& xv = t.value(x);
        Mat& gw = t.pgrad(w);
        Mat& gb = t.pgrad(b);
        Mat& gx = t.adj_of(x);
        for (int j = 0; j < g.cols; ++j)
            for (int i = 0; i < g.rows; ++i) {
                double gi = g.at(i, j);
                gb.a[size_t(i)] += gi;
                for (int k = 0; k < xv.rows; ++k) {
                    gw.at(i, k) += gi * xv.at(k, j);
                    gx.at(k, j) += W.at(i, k) * gi;
                }
            }
    });
}

NodeId Tape::relu(NodeId x) {
    Mat y = value(x);
    for (double& v : y.a) v = v > 0 ? v : 0.0;
    return push(std::move(y), [x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& y = t.value(self);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k)
            if (y.a[k] > 0) gx.a[k] += g.a[k];
    });
}

NodeId Tape::tanh_(NodeId x) {
    Mat y = value(x);
    for (double& v : y.a) v = std::tanh(v);
    return push(std::move(y), [x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& y = t.value(self);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += g.a[k] * (1.0 - y.a[k] * y.a[k]);
    });
}

NodeId Tape::sigmoid(NodeId x) {
    Mat y = value(x);
    for (double& v : y.a) v = stable_sigmoid(v);
    return push(std::move(y), [x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& y = t.value(self);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += g.a[k] * y.a[k] * (1.0 - y.a[k]);
    });
}

NodeId Tape::gru_step(const GruIds& gi, NodeId x, NodeId h) {
    const Mat& xv = value(x);
    const Mat& hv = value(h);
    if (xv.rows != gi.in_dim || hv.rows != gi.hidden)
        throw ShapeError("gru_step input shape mismatch");
    const Mat& Wz = param(gi.wz).value; const Mat& Uz = param(gi.uz).value; const Mat& Bz = param(gi.bz).value;
    const Mat& Wr = param(gi.wr).value; const Mat& Ur = param(gi.ur).value; const Mat& Br = param(gi.br).value;
    const Mat& Wc = param(gi.wc).value; const Mat& Uc = param(gi.uc).value; const Mat& Bc = param(gi.bc).value;

    int H = gi.hidden, D = gi.in_dim;
    Mat z(H, 1), r(H, 1), c(H, 1), hn(H, 1);
    for (int i = 0; i < H; ++i) {
        double az = Bz.a[size_t(i)];
        for (int k = 0; k < D; ++k) az += Wz.at(i, k) * xv.a[size_t(k)];
        for (int k = 0; k < H; ++k) az += Uz.at(i, k) * hv.a[size_t(k)];
        z.a[size_t(i)] = stable_sigmoid(az);
        double ar = Br.a[size_t(i)];
        for (int k = 0; k < D; ++k) ar += Wr.at(i, k) * xv.a[size_t(k)];
        for (int k = 0; k < H; ++k) ar += Ur.at(i, k) * hv.a[size_t(k)];
        r.a[size_t(i)] = stable_sigmoid(ar);
    }
    for (int i = 0; i < H; ++i) {
        double ac = Bc.a[size_t(i)];
        for (int k = 0; k < D; ++k) ac += Wc.at(i, k) * xv.a[size_t(k)];
        for (int k = 0; k < H; ++k) ac += Uc.at(i, k) * (r.a[size_t(k)] * hv.a[size_t(k)]);
        c.a[size_t(i)] = std::tanh(ac);
        hn.a[size_t(i)] = (1.0 - z.a[size_t(i)]) * hv.a[size_t(i)] + z.a[size_t(i)] * c.a[size_t(i)];
    }

    return push(std::move(hn), [gi, x, h, z, r, c](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& xv = t.value(x);
        const Mat& hv = t.value(h);
        const Mat& Uz = t.param(gi.uz).value;
        const Mat& Ur = t.param(gi.ur).value;
        const Mat& Uc = t.param(gi.uc).value;
        const Mat& Wz = t.param(gi.wz).value;
        const Mat& Wr = t.param(gi.wr).value;
        const Mat& Wc = t.param(gi.wc).value;
        int H = gi.hidden, D = gi.in_dim;

        Mat& gx = t.adj_of(x);
        Mat& gh = t.adj_of(h);
        Mat gz(H, 1), gc(H, 1), gaz(H, 1), gar(H, 1), gac(H, 1), grh(H, 1);
        for (int i = 0; i < H; ++i) {
            double gi_ = g.a[size_t(i)];
            gh.a[size_t(i)] += gi_ * (1.0 - z.a[size_t(i)]);
            gz.a[size_t(i)] = gi_ * (c.a[size_t(i)] - hv.a[size_t(i)]);
            gc.a[size_t(i)] = gi_ * z.a[size_t(i)];
            gac.a[size_t(i)] = gc.a[size_t(i)] * (1.0 - c.a[size_t(i)] * c.a[size_t(i)]);
        }
        // through candidate: rh = r*h
        for (int k = 0; k < H; ++k) {
            double acc = 0.0;
            for (int i = 0; i < H; ++i) acc += Uc.at(i, k) * gac.a[size_t(i)];
            grh.a[size_t(k)] = acc;
        }
        for (int k = 0; k < H; ++k) {
            double gr = grh.a[size_t(k)] * hv.a[size_t(k)];
            gh.a[size_t(k)] += grh.a[size_t(k)] * r.a[size_t(k)];
            gar.a[size_t(k)] = gr * r.a[size_t(k)] * (1.0 - r.a[size_t(k)]);
            gaz.a[size_t(k)] = gz.a[size_t(k)] * z.a[size_t(k)] * (1.0 - z.a[size_t(k)]);
        }
        Mat& gWz = t.pgrad(gi.wz); Mat& gUz = t.pgrad(gi.uz); Mat& gBz = t.pgrad(gi.bz);
        Mat& gWr = t.pgrad(gi.wr); Mat& gUr = t.pgrad(gi.ur); Mat& gBr = t.pgrad(gi.br);
        Mat& gWc = t.pgrad(gi.wc); Mat& gUc = t.pgrad(gi.uc); Mat& gBc = t.pgrad(gi.bc);
        for (int i = 0; i < H; ++i) {
            double dz = gaz.a[size_t(i)], dr = gar.a[size_t(i)], dc = gac.a[size_t(i)];
            gBz.a[size_t(i)] += dz;
            gBr.a[size_t(i)] += dr;
            gBc.a[size_t(i)] += dc;
            for (int k = 0; k < D; ++k) {
                gWz.at(i, k) += dz * xv.a[size_t(k)];
                gWr.at(i, k) += dr * xv.a[size_t(k)];
                gWc.at(i, k) += dc * xv.a[size_t(k)];
                gx.a[size_t(k)] += Wz.at(i, k) * dz + Wr.at(i, k) * dr + Wc.at(i, k) * dc;
            }
            for (int k = 0; k < H; ++k) {
                gUz.at(i, k) += dz * hv.a[size_t(k)];
                gUr.at(i, k) += dr * hv.a[size_t(k)];
                gUc.at(i, k) += dc * (r.a[size_t(k)] * hv.a[size_t(k)]);
                gh.a[size_t(k)] += Uz.at(i, k) * dz + Ur.at(i, k) * dr;
            }
        }
    });
}

NodeId Tape::col(NodeId x, int j) {
    const Mat& xv = value(x);
    if (j < 0 || j >= xv.cols) throw ShapeError("col index out of range");
    Mat y(xv.rows, 1);
    for (int i = 0; i < xv.rows; ++i) y.a[size_t(i)] = xv.at(i, j);
    return push(std::move(y), [x, j](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& gx = t.adj_of(x);
        for (int i = 0; i < g.rows; ++i) gx.at(i, j) += g.a[size_t(i)];
    });
}

NodeId Tape::slice(NodeId x, int begin, int len) {
    const Mat& xv = value(x);
    if (xv.cols != 1 || begin < 0 || begin + len > xv.rows) throw ShapeError("slice out of range");
    Mat y(len, 1);
    for (int i = 0; i < len; ++i) y.a[size_t(i)] = xv.a[size_t(begin + i)];
    return push(std::move(y), [x, begin, len](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& gx = t.adj_of(x);
        for (int i = 0; i < len; ++i) gx.a[size_t(begin + i)] += g.a[size_t(i)];
    });
}

NodeId Tape::add(NodeId a, NodeId b) {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    if (av.rows != bv.rows || av.cols != bv.cols) throw ShapeError("add shape mismatch");
    Mat y = av;
    for (size_t k = 0; k < y.a.size(); ++k) y.a[k] += bv.a[k];
    return push(std::move(y), [a, b](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& ga = t.adj_of(a);
        Mat& gb = t.adj_of(b);
        for (size_t k = 0; k < g.a.size(); ++k) {
            ga.a[k] += g.a[k];
            gb.a[k] += g.a[k];
        }
    });
}

NodeId Tape::sub(NodeId a, NodeId b) {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    if (av.rows != bv.rows || av.cols != bv.cols) throw ShapeError("sub shape mismatch");
    Mat y = av;
    for (size_t k = 0; k < y.a.size(); ++k) y.a[k] -= bv.a[k];
    return push(std::move(y), [a, b](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& ga = t.adj_of(a);
        Mat& gb = t.adj_of(b);
        for (size_t k = 0; k < g.a.size(); ++k) {
            ga.a[k] += g.a[k];
            gb.a[k] -= g.a[k];
        }
    });
}

NodeId Tape::mul(NodeId a, NodeId b) {
    const Mat& av = value(a);
    const Mat& bv = value(b);
    if (av.rows != bv.rows || av.cols != bv.cols) throw ShapeError("mul shape mismatch");
    Mat y = av;
    for (size_t k = 0; k < y.a.size(); ++k) y.a[k] *= bv.a[k];
    return push(std::move(y), [a, b](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& av = t.value(a);
        const Mat& bv = t.value(b);
        Mat& ga = t.adj_of(a);
        Mat& gb = t.adj_of(b);
        for (size_t k = 0; k < g.a.size(); ++k) {
            ga.a[k] += g.a[k] * bv.a[k];
            gb.a[k] += g.a[k] * av.a[k];
        }
    });
}

NodeId Tape::scale(NodeId x, double s) {
    Mat y = value(x);
    for (double& v : y.a) v *= s;
    return push(std::move(y), [x, s](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += s * g.a[k];
    });
}

NodeId Tape::sum(NodeId x) {
    const Mat& xv = value(x);
    Mat y(1, 1);
    for (double v : xv.a) y.a[0] += v;
    return push(std::move(y), [x](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        Mat& gx = t.adj_of(x);
        for (double& v : gx.a) v += g;
    });
}

NodeId Tape::abs_(NodeId x) {
    Mat y = value(x);
    for (double& v : y.a) v = std::fabs(v);
    return push(std::move(y), [x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& xv = t.value(x);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k) {
            double s = xv.a[k] > 0 ? 1.0 : (xv.a[k] < 0 ? -1.0 : 0.0);
            gx.a[k] += s * g.a[k];
        }
    });
}

NodeId Tape::square(NodeId x) {
    Mat y = value(x);
    for (double& v : y.a) v *= v;
    return push(std::move(y), [x](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& xv = t.value(x);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < g.a.size(); ++k) gx.a[k] += 2.0 * xv.a[k] * g.a[k];
    });
}

NodeId Tape::norm2(NodeId x) {
    const Mat& xv = value(x);
    double s = 0.0;
    for (double v : xv.a) s += v * v;
    double n = std::sqrt(s);
    Mat y(1, 1);
    y.a[0] = n;
    return push(std::move(y), [x, n](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        if (n < 1e-12) return;  // subgradient 0 at the kink
        const Mat& xv = t.value(x);
        Mat& gx = t.adj_of(x);
        for (size_t k = 0; k < gx.a.size(); ++k) gx.a[k] += g * xv.a[k] / n;
    });
}

NodeId Tape::gaussian_reparam(NodeId mu, NodeId log_sigma, std::span<const double> noise) {
    const Mat& muv = value(mu);
    const Mat& lsv = value(log_sigma);
    if (muv.rows != lsv.rows || int(noise.size()) != muv.rows || muv.cols != 1)
        throw ShapeError("gaussian_reparam shape mismatch");
    Mat y(muv.rows, 1);
    Vec eps(noise.begin(), noise.end());
    for (int i = 0; i < muv.rows; ++i)
        y.a[size_t(i)] = muv.a[size_t(i)] + std::exp(lsv.a[size_t(i)]) * eps[size_t(i)];
    return push(std::move(y), [mu, log_sigma, eps](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& lsv = t.value(log_sigma);
        Mat& gmu = t.adj_of(mu);
        Mat& gls = t.adj_of(log_sigma);
        for (size_t k = 0; k < g.a.size(); ++k) {
            gmu.a[k] += g.a[k];
            gls.a[k] += g.a[k] * std::exp(lsv.a[k]) * eps[k];
        }
    });
}

NodeId Tape::kl_std_normal(NodeId mu, NodeId log_sigma) {
    const Mat& muv = value(mu);
    const Mat& lsv = value(log_sigma);
    if (muv.rows != lsv.rows || muv.cols != 1) throw ShapeError("kl shape mismatch");
    double kl = 0.0;
    for (int i = 0; i < muv.rows; ++i) {
        double m = muv.a[size_t(i)], ls = lsv.a[size_t(i)];
        kl += 0.5 * (m * m + std::exp(2.0 * ls) - 1.0 - 2.0 * ls);
    }
    Mat y(1, 1);
    y.a[0] = kl;
    return push(std::move(y), [mu, log_sigma](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        const Mat& muv = t.value(mu);
        const Mat& lsv = t.value(log_sigma);
        Mat& gmu = t.adj_of(mu);
        Mat& gls = t.adj_of(log_sigma);
        for (size_t k = 0; k < muv.a.size(); ++k) {
            gmu.a[k] += g * muv.a[k];
            gls.a[k] += g * (std::exp(2.0 * lsv.a[k]) - 1.0);
        }
    });
}

NodeId Tape::gauss_nll(NodeId pred, const Mat& target, std::span<const double> col_weights) {
    const Mat& pv = value(pred);
    if (pv.rows != target.rows || pv.cols != target.cols) throw ShapeError("gauss_nll shape mismatch");
    if (!col_weights.empty() && int(col_weights.size()) != pv.cols)
        throw ShapeError("gauss_nll weight count mismatch");
    double loss = 0.0;
    for (int j = 0; j < pv.cols; ++j) {
        double wj = col_weights.empty() ? 1.0 : col_weights[size_t(j)];
        double s = 0.0;
        for (int i = 0; i < pv.rows; ++i) {
            double d = target.at(i, j) - pv.at(i, j);
            s += d * d;
        }
        loss += 0.5 * wj * s;
    }
    Mat y(1, 1);
    y.a[0] = loss;
    Mat tcopy = target;
    Vec w(col_weights.begin(), col_weights.end());
    return push(std::move(y), [pred, tcopy, w](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        const Mat& pv = t.value(pred);
        Mat& gp = t.adj_of(pred);
        for (int j = 0; j < pv.cols; ++j) {
            double wj = w.empty() ? 1.0 : w[size_t(j)];
            for (int i = 0; i < pv.rows; ++i)
                gp.at(i, j) += g * wj * (pv.at(i, j) - tcopy.at(i, j));
        }
    });
}

NodeId Tape::softmax(NodeId logits) {
    const Mat& z = value(logits);
    if (z.cols != 1) throw ShapeError("softmax expects a vector");
    Mat p(z.rows, 1);
    double mx = z.a[0];
    for (double v : z.a) mx = std::max(mx, v);
    double sum = 0.0;
    for (int i = 0; i < z.rows; ++i) {
        p.a[size_t(i)] = std::exp(z.a[size_t(i)] - mx);
        sum += p.a[size_t(i)];
    }
    for (double& v : p.a) v /= sum;
    return push(std::move(p), [logits](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& p = t.value(self);
        Mat& gz = t.adj_of(logits);
        double dot = 0.0;
        for (size_t k = 0; k < p.a.size(); ++k) dot += g.a[k] * p.a[k];
        for (size_t k = 0; k < p.a.size(); ++k) gz.a[k] += p.a[k] * (g.a[k] - dot);
    });
}

NodeId Tape::log_softmax(NodeId logits) {
    const Mat& z = value(logits);
    if (z.cols != 1) throw ShapeError("log_softmax expects a vector");
    double mx = z.a[0];
    for (double v : z.a) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z.a) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    Mat lp(z.rows, 1);
    for (int i = 0; i < z.rows; ++i) lp.a[size_t(i)] = z.a[size_t(i)] - lse;
    return push(std::move(lp), [logits](Tape& t, int self) {
        const Mat& g = t.nodes_[size_t(self)].adj;
        const Mat& lp = t.value(self);
        Mat& gz = t.adj_of(logits);
        double gsum = 0.0;
        for (double v : g.a) gsum += v;
        for (size_t k = 0; k < lp.a.size(); ++k) gz.a[k] += g.a[k] - std::exp(lp.a[k]) * gsum;
    });
}

NodeId Tape::categorical_logprob(NodeId logits, int action) {
    const Mat& z = value(logits);
    if (z.cols != 1 || action < 0 || action >= z.rows)
        throw ShapeError("categorical_logprob bad action");
    double mx = z.a[0];
    for (double v : z.a) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z.a) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    Mat y(1, 1);
    y.a[0] = z.a[size_t(action)] - lse;
    return push(std::move(y), [logits, action](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        const Mat& z = t.value(logits);
        Mat& gz = t.adj_of(logits);
        double mx = z.a[0];
        for (double v : z.a) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : z.a) sum += std::exp(v - mx);
        for (int k = 0; k < z.rows; ++k) {
            double pk = std::exp(z.a[size_t(k)] - mx) / sum;
            gz.a[size_t(k)] += g * ((k == action ? 1.0 : 0.0) - pk);
        }
    });
}

NodeId Tape::entropy(NodeId logits) {
    const Mat& z = value(logits);
    if (z.cols != 1) throw ShapeError("entropy expects a vector");
    double mx = z.a[0];
    for (double v : z.a) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : z.a) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    double h = 0.0;
    for (double v : z.a) {
        double lp = v - lse;
        h -= std::exp(lp) * lp;
    }
    Mat y(1, 1);
    y.a[0] = h;
    return push(std::move(y), [logits, h](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        const Mat& z = t.value(logits);
        Mat& gz = t.adj_of(logits);
        double mx = z.a[0];
        for (double v : z.a) mx = std::max(mx, v);
        double sum = 0.0;
        for (double v : z.a) sum += std::exp(v - mx);
        double lse = mx + std::log(sum);
        for (int k = 0; k < z.rows; ++k) {
            double lp = z.a[size_t(k)] - lse;
            gz.a[size_t(k)] += -g * std::exp(lp) * (lp + h);
        }
    });
}

NodeId Tape::ppo_clip(NodeId logp, double logp_old, double adv, double clip_eps) {
    double lp = scalar(logp);
    double ratio = std::exp(lp - logp_old);
    double clipped = std::clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps);
    double u = ratio * adv, v = clipped * adv;
    Mat y(1, 1);
    y.a[0] = -std::min(u, v);
    return push(std::move(y), [logp, logp_old, adv, clip_eps, ratio, u, v](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        double dr;  // d(min)/d(ratio)
        if (u <= v) {
            dr = adv;
        } else {
            bool inside = ratio > 1.0 - clip_eps && ratio < 1.0 + clip_eps;
            dr = inside ? adv : 0.0;
        }
        t.adj_of(logp).a[0] += -g * dr * ratio;  // d(ratio)/d(logp) = ratio
    });
}

NodeId Tape::add_scaled(std::span<const std::pair<NodeId, double>> terms) {
    double total = 0.0;
    for (auto& [id, w] : terms) total += w * scalar(id);
    Mat y(1, 1);
    y.a[0] = total;
    std::vector<std::pair<NodeId, double>> ts(terms.begin(), terms.end());
    return push(std::move(y), [ts](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0];
        for (auto& [id, w] : ts) t.adj_of(id).a[0] += g * w;
    });
}

NodeId Tape::mean(std::span<const NodeId> scalars) {
    if (scalars.empty()) throw ShapeError("mean of zero nodes");
    double total = 0.0;
    for (NodeId id : scalars) total += scalar(id);
    Mat y(1, 1);
    y.a[0] = total / double(scalars.size());
    std::vector<NodeId> ids(scalars.begin(), scalars.end());
    return push(std::move(y), [ids](Tape& t, int self) {
        double g = t.nodes_[size_t(self)].adj.a[0] / double(ids.size());
        for (NodeId id : ids) t.adj_of(id).a[0] += g;
    });
}

// ---------------------------------------------------------------- plain forward

Vec affine_fwd(const ParamStore& store, int w, int b,
               std::initializer_list<std::span<const double>> xs) {
    const Mat& W = store.at(w).value;
    const Mat& B = store.at(b).value;
    int total = 0;
    for (auto& x : xs) total += int(x.size());
    if (total != W.cols) throw ShapeError("affine_fwd shape mismatch for " + store.at(w).name);
    Vec y(size_t(W.rows));
    for (int i = 0; i < W.rows; ++i) {
        double acc = B.a[size_t(i)];
        int off = 0;
        for (auto& x : xs) {
            for (size_t k = 0; k < x.size(); ++k) acc += W.at(i, off + int(k)) * x[k];
            off += int(x.size());
        }
        y[size_t(i)] = acc;
    }
    return y;
}

void relu_inplace(Vec& x) {
    for (double& v : x) v = v > 0 ? v : 0.0;
}

void tanh_inplace(Vec& x) {
    for (double& v : x) v = std::tanh(v);
}

Vec gru_fwd(const ParamStore& store, const GruIds& gi,
            std::span<const double> x, std::span<const double> h) {
    if (int(x.size()) != gi.in_dim || int(h.size()) != gi.hidden)
        throw ShapeError("gru_fwd input shape mismatch");
    const Mat& Wz = store.at(gi.wz).value; const Mat& Uz = store.at(gi.uz).value; const Mat& Bz = store.at(gi.bz).value;
    const Mat& Wr = store.at(gi.wr).value; const Mat& Ur = store.at(gi.ur).value; const Mat& Br = store.at(gi.br).value;
    const Mat& Wc = store.at(gi.wc).value; const Mat& Uc = store.at(gi.uc).value; const Mat& Bc = store.at(gi.bc).value;
    int H = gi.hidden, D = gi.in_dim;
    Vec z(size_t(H), 0.0), r(size_t(H), 0.0), out(size_t(H), 0.0);
    for (int i = 0; i < H; ++i) {
        double az = Bz.a[size_t(i)];
        for (int k = 0; k < D; ++k) az += Wz.at(i, k) * x[size_t(k)];
        for (int k = 0; k < H; ++k) az += Uz.at(i, k) * h[size_t(k)];
        z[size_t(i)] = stable_sigmoid(az);
        double ar = Br.a[size_t(i)];
        for (int k = 0; k < D; ++k) ar += Wr.at(i, k) * x[size_t(k)];
        for (int k = 0; k < H; ++k) ar += Ur.at(i, k) * h[size_t(k)];
        r[size_t(i)] = stable_sigmoid(ar);
    }
    for (int i = 0; i < H; ++i) {
        double ac = Bc.a[size_t(i)];
        for (int k = 0; k < D; ++k) ac += Wc.at(i, k) * x[size_t(k)];
        for (int k = 0; k < H; ++k) ac += Uc.at(i, k) * (r[size_t(k)] * h[size_t(k)]);
        double c = std::tanh(ac);
        out[size_t(i)] = (1.0 - z[size_t(i)]) * h[size_t(i)] + z[size_t(i)] * c;
    }
    return out;
}

Vec softmax_vec(std::span<const double> logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    Vec p(logits.size());
    double sum = 0.0;
    for (size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - mx);
        sum += p[i];
    }
    for (double& v : p) v /= sum;
    return p;
}

Vec log_softmax_vec(std::span<const double> logits) {
    double mx = logits[0];
    for (double v : logits) mx = std::max(mx, v);
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    double lse = mx + std::log(sum);
    Vec lp(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) lp[i] = logits[i] - lse;
    return lp;
}

double entropy_of_logits(std::span<const double> logits) {
    Vec lp = log_softmax_vec(logits);
    double h = 0.0;
    for (double v : lp) h -= std::exp(v) * v;
    return h;
}

// ---------------------------------------------------------------- fd oracle

FdReport finite_diff_check(const std::function<NodeId(Tape&)>& loss,
                           const ParamStore& store, double step, bool parallel) {
    Grads analytic;
    {
        Tape t(store);
        NodeId l = loss(t);
        double f0 = t.scalar(l);
        if (!std::isfinite(f0)) throw NumericError("finite_diff_check: non-finite loss");
        t.backward(l);
        analytic = t.take_grads();
    }

    int np = store.count();
    std::vector<FdReport> partial(static_cast<size_t>(np));

#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic) if (parallel)
#endif
    for (int pi = 0; pi < np; ++pi) {
        ParamStore local = store;  // private copy, perturbed in place
        FdReport rep;
        Param& p = local.at(pi);
        const Mat* ga = (size_t(pi) < analytic.g.size() && !analytic.g[size_t(pi)].empty())
                            ? &analytic.g[size_t(pi)]
                            : nullptr;
        for (size_t k = 0; k < p.value.a.size(); ++k) {
            double orig = p.value.a[k];
            p.value.a[k] = orig + step;
            Tape tp(local);
            double fp = tp.scalar(loss(tp));
            p.value.a[k] = orig - step;
            Tape tm(local);
            double fm = tm.scalar(loss(tm));
            p.value.a[k] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm))
                throw NumericError("finite_diff_check: non-finite perturbed loss");
            double numeric = (fp - fm) / (2.0 * step);
            double ana = ga ? ga->a[k] : 0.0;
            double rel = std::fabs(ana - numeric) /
                         std::max({std::fabs(ana), std::fabs(numeric), 1e-8});
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst_param = p.name;
                rep.worst_index = int(k);
            }
        }
        partial[size_t(pi)] = rep;
    }

    FdReport out;
    for (const FdReport& r : partial)
        if (r.max_rel_err > out.max_rel_err) out = r;
    return out;
}

// ---------------------------------------------------------------- checkpoint

void save_checkpoint(const std::string& path, const ParamStore& store, const CkptMeta& meta) {
    nlohmann::json j;
    j["format"] = "metavim-ckpt-v1";
    nlohmann::json m;
    m["obs_dim"] = meta.obs_dim;
    m["n_actions"] = meta.n_actions;
    m["latent_dim"] = meta.latent_dim;
    m["embed_hidden"] = meta.embed_hidden;
    m["gru_hidden"] = meta.gru_hidden;
    m["dec_hidden"] = meta.dec_hidden;
    m["policy_hidden"] = meta.policy_hidden;
    m["q_scale"] = meta.q_scale;
    m["variant"] = meta.variant;
    j["meta"] = m;
    nlohmann::json params;
    for (const Param& p : store.all()) {
        check_finite(p.value, p.name.c_str());
        nlohmann::json e;
        e["shape"] = {p.value.rows, p.value.cols};
        e["values"] = p.value.a;
        params[p.name] = e;
    }
    j["params"] = params;
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot open checkpoint file for writing: " + path);
    out << j.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint file: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(std::string("checkpoint parse error: ") + e.what());
    }
    if (!j.contains("format") || j["format"] != "metavim-ckpt-v1")
        throw ConfigError("checkpoint: missing or unsupported format tag");
    Checkpoint ck;
    const auto& m = j.at("meta");
    ck.meta.obs_dim = m.at("obs_dim").get<int>();
    ck.meta.n_actions = m.at("n_actions").get<int>();
    ck.meta.latent_dim = m.at("latent_dim").get<int>();
    ck.meta.embed_hidden = m.at("embed_hidden").get<int>();
    ck.meta.gru_hidden = m.at("gru_hidden").get<int>();
    ck.meta.dec_hidden = m.at("dec_hidden").get<int>();
    ck.meta.policy_hidden = m.at("policy_hidden").get<int>();
    ck.meta.q_scale = m.at("q_scale").get<double>();
    ck.meta.variant = m.at("variant").get<std::string>();
    for (auto it = j.at("params").begin(); it != j.at("params").end(); ++it) {
        const auto& e = it.value();
        int rows = e.at("shape").at(0).get<int>();
        int cols = e.at("shape").at(1).get<int>();
        int id = ck.store.add(it.key(), rows, cols);
        const auto& vals = e.at("values");
        if (int(vals.size()) != rows * cols)
            throw ConfigError("checkpoint: value count mismatch for " + it.key());
        Mat& v = ck.store.at(id).value;
        for (size_t k = 0; k < vals.size(); ++k) v.a[k] = vals.at(k).get<double>();
    }
    return ck;
}

}  // namespace metavim::nn
