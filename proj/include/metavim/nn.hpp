#pragma once

// Reverse-mode differentiable core used by the encoder, decoders and policy:
// a named parameter store with Adam state, a tape that records forward ops
// (vector ops plus column-batched variants for the heavy reconstruction
// loops), plain untaped forward helpers for rollout paths, a central
// finite-difference gradient oracle, and the checkpoint file format.

#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "metavim/common.hpp"

namespace metavim::nn {

// Row-major matrix; column vectors have cols == 1.
struct Mat {
    int rows = 0, cols = 0;
    Vec a;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), a(size_t(r) * size_t(c), 0.0) {}

    static Mat vec(std::span<const double> v) {
        Mat m(int(v.size()), 1);
        std::copy(v.begin(), v.end(), m.a.begin());
        return m;
    }

    double& at(int i, int j) { return a[size_t(i) * cols + j]; }
    double at(int i, int j) const { return a[size_t(i) * cols + j]; }
    int size() const { return rows * cols; }
    bool empty() const { return rows == 0; }
};

struct Param {
    std::string name;
    Mat value;
    Mat m, v;       // Adam moments, same shape as value
    long step = 0;  // per-parameter step counter
};

// Gradients indexed by parameter id; an empty Mat means "not touched".
struct Grads {
    std::vector<Mat> g;

    void ensure(size_t n) { if (g.size() < n) g.resize(n); }
    void add_scaled(const Grads& other, double s);
    void scale(double s);
};

class ParamStore {
public:
    int add(const std::string& name, int rows, int cols);  // zero-initialized
    // uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) with fan_in = cols, bias-style
    // vectors (cols == 1) stay zero when init_zero is requested by callers.
    int add_uniform(const std::string& name, int rows, int cols, Rng& rng);

    bool has(const std::string& name) const { return index_.count(name) > 0; }
    int id(const std::string& name) const;       // -1 when absent
    int require(const std::string& name) const;  // throws ConfigError

    Param& at(int id) { return params_[size_t(id)]; }
    const Param& at(int id) const { return params_[size_t(id)]; }
    int count() const { return int(params_.size()); }
    const std::vector<Param>& all() const { return params_; }
    std::vector<Param>& all() { return params_; }

    // Bias-corrected Adam on every parameter present in grads.
    // Throws NumericError on non-finite gradients.
    void adam_step(const Grads& grads, double lr, double beta1, double beta2, double eps);

    size_t element_count() const;
    uint64_t value_digest() const;  // fnv-1a over names and raw values

private:
    std::vector<Param> params_;
    std::unordered_map<std::string, int> index_;
};

struct GruIds {
    int wz, uz, bz, wr, ur, br, wc, uc, bc;
    int in_dim = 0, hidden = 0;
};
GruIds add_gru(ParamStore& store, const std::string& prefix, int in_dim, int hidden, Rng& rng);
GruIds bind_gru(const ParamStore& store, const std::string& prefix, int in_dim, int hidden);

using NodeId = int;

// Records a forward computation against one ParamStore. Nodes are appended in
// topological order; backward() walks them in reverse. A tape is confined to
// one thread; independent tapes over a shared read-only store may run in
// parallel.
class Tape {
public:
    explicit Tape(const ParamStore& store);

    NodeId leaf(Mat v);
    NodeId leaf(std::span<const double> v);
    NodeId scalar_leaf(double v);
    NodeId param_node(int id);  // parameter value as a node; backward accumulates its gradient

    // y = W [x0; x1; ...] + b, inputs concatenated in order
    NodeId affine(int w, int b, std::initializer_list<NodeId> xs);
    NodeId affine(int w, int b, std::span<const NodeId> xs);
    // batched over columns of a constant input: Y = W Xc + b 1^T
    NodeId affine_const(int w, int b, const Mat& xc);
    // batched with a shared trailing vector input: column j sees [Xc_j; m]
    NodeId affine_mixed(int w, int b, const Mat& xc, NodeId m);
    // batched over columns of a node input: Y = W X + b 1^T
    NodeId affine_node(int w, int b, NodeId x);

    NodeId relu(NodeId x);
    NodeId tanh_(NodeId x);
    NodeId sigmoid(NodeId x);

    // fused gated-recurrent cell:
    //   z = sigmoid(Wz x + Uz h + bz), r = sigmoid(Wr x + Ur h + br)
    //   c = tanh(Wc x + Uc (r*h) + bc), h' = (1-z)*h + z*c
    NodeId gru_step(const GruIds& g, NodeId x, NodeId h);

    NodeId col(NodeId x, int j);                  // column of a batched node
    NodeId slice(NodeId x, int begin, int len);   // contiguous rows of a vector
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);               // elementwise
    NodeId scale(NodeId x, double s);
    NodeId sum(NodeId x);
    NodeId abs_(NodeId x);
    NodeId square(NodeId x);
    NodeId norm2(NodeId x);                       // Euclidean norm -> scalar

    // m = mu + exp(log_sigma) * noise
    NodeId gaussian_reparam(NodeId mu, NodeId log_sigma, std::span<const double> noise);
    // sum_d 0.5 (mu^2 + sigma^2 - 1 - log sigma^2) -> scalar
    NodeId kl_std_normal(NodeId mu, NodeId log_sigma);
    // 0.5 sum_j w_j ||target_j - pred_j||^2 (unit-variance Gaussian NLL with
    // constants dropped); empty weights mean w_j = 1
    NodeId gauss_nll(NodeId pred, const Mat& target, std::span<const double> col_weights = {});

    NodeId softmax(NodeId logits);
    NodeId log_softmax(NodeId logits);
    NodeId categorical_logprob(NodeId logits, int action);
    NodeId entropy(NodeId logits);   // -sum p log p -> scalar
    // -min(ratio * adv, clamp(ratio, 1-eps, 1+eps) * adv), ratio = exp(logp - logp_old)
    NodeId ppo_clip(NodeId logp, double logp_old, double adv, double clip_eps);

    NodeId add_scaled(std::span<const std::pair<NodeId, double>> terms);  // scalar
    NodeId mean(std::span<const NodeId> scalars);

    const Mat& value(NodeId id) const { return nodes_[size_t(id)].val; }
    double scalar(NodeId id) const;
    size_t node_count() const { return nodes_.size(); }

    void backward(NodeId loss);  // seeds d(loss)/d(loss) = 1
    Grads take_grads();
    const ParamStore& store() const { return *store_; }

private:
    struct Node {
        Mat val;
        Mat adj;
        std::function<void(Tape&, int)> back;
    };

    friend struct TapeOps;
    NodeId push(Mat val, std::function<void(Tape&, int)> back);
    Mat& adj_of(NodeId id);
    bool has_adj(NodeId id) const;
    Mat& pgrad(int param_id);
    const Param& param(int id) const { return store_->at(id); }

    const ParamStore* store_;
    std::vector<Node> nodes_;
    std::vector<Mat> pgrad_;
};

// Plain forward helpers (no tape). Loop order matches the taped ops exactly,
// so values agree bit for bit with the recorded versions.
Vec affine_fwd(const ParamStore& store, int w, int b,
               std::initializer_list<std::span<const double>> xs);
void relu_inplace(Vec& x);
void tanh_inplace(Vec& x);
Vec gru_fwd(const ParamStore& store, const GruIds& g,
            std::span<const double> x, std::span<const double> h);
Vec softmax_vec(std::span<const double> logits);
Vec log_softmax_vec(std::span<const double> logits);
double entropy_of_logits(std::span<const double> logits);

// Central-difference gradient oracle over every parameter element in the
// store. The loss callback must build its graph against the tape it is given
// (parameters are addressed by id, valid across store copies). Relative error
// uses denominator max(|analytic|, |numeric|, 1e-8).
struct FdReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
};
FdReport finite_diff_check(const std::function<NodeId(Tape&)>& loss,
                           const ParamStore& store, double step = 1e-5,
                           bool parallel = false);

// Checkpoint file ("metavim-ckpt-v1"): parameter name -> shape + flat decimal
// values. Doubles round-trip exactly; save -> load -> save is byte-identical.
struct CkptMeta {
    int obs_dim = 16, n_actions = 4, latent_dim = 5;
    int embed_hidden = 40, gru_hidden = 64, dec_hidden = 32, policy_hidden = 32;
    double q_scale = 50.0;
    std::string variant = "full";
};

struct Checkpoint {
    ParamStore store;
    CkptMeta meta;
};

void save_checkpoint(const std::string& path, const ParamStore& store, const CkptMeta& meta);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace metavim::nn
