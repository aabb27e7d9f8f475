#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "recsys/error.hpp"
#include "recsys/rng.hpp"
#include "recsys/tensor.hpp"

namespace recsys {

struct HyperParams {
    std::size_t d = 64;           // item/user embedding dimension
    std::size_t d_text = 64;      // token embedding dimension
    std::size_t d_category = 64;  // category embedding dimension
    std::size_t mlp_layers = 3;   // hidden layers per MLP
    std::size_t mlp_hidden = 64;  // hidden width
    double tau = 0.1;             // affinity temperature
    double learning_rate = 0.01;
    double grad_clip = 0.001;
    std::size_t negatives_per_positive = 3000;
    std::size_t batch_size = 600;
    std::size_t epochs = 10;
    std::size_t event_type_dim = 4;  // fixed by the event encoding
    std::uint64_t rng_seed = 1;

    void validate() const {
        if (d == 0 || d_text == 0 || d_category == 0 || mlp_hidden == 0)
            throw ConfigError("hyperparams: dimensions must be > 0");
        if (tau <= 0.0) throw ConfigError("hyperparams: tau must be > 0");
        if (grad_clip <= 0.0) throw ConfigError("hyperparams: grad_clip must be > 0");
        if (event_type_dim != 4) throw ConfigError("hyperparams: event_type_dim is fixed at 4");
        if (batch_size == 0 || negatives_per_positive == 0)
            throw ConfigError("hyperparams: batch/negative counts must be > 0");
    }
};

// ---------------------------------------------------------------------------
// Basic linear algebra. Accumulation is always 64-bit.
// ---------------------------------------------------------------------------

// y = W x. W is rows x cols row-major, x has cols entries.
inline void matvec(const Tensor& w, const Real* x, Real* y) {
    const std::size_t r = w.rows(), c = w.cols();
    for (std::size_t i = 0; i < r; ++i) {
        y[i] = static_cast<Real>(dot(w.row(i), x, c));
    }
}

// out += W^T g.
inline void matvec_t_acc(const Tensor& w, const Real* g, Real* out) {
    const std::size_t r = w.rows(), c = w.cols();
    for (std::size_t j = 0; j < c; ++j) {
        double s = static_cast<double>(out[j]);
        for (std::size_t i = 0; i < r; ++i) {
            s += static_cast<double>(w.at(i, j)) * static_cast<double>(g[i]);
        }
        out[j] = static_cast<Real>(s);
    }
}

// gw += g x^T.
inline void outer_acc(Tensor& gw, const Real* g, const Real* x) {
    const std::size_t r = gw.rows(), c = gw.cols();
    for (std::size_t i = 0; i < r; ++i) {
        Real* row = gw.row(i);
        const Real gi = g[i];
        for (std::size_t j = 0; j < c; ++j) row[j] += gi * x[j];
    }
}

inline Real sigmoid(Real x) { return static_cast<Real>(1.0 / (1.0 + std::exp(-static_cast<double>(x)))); }

// ---------------------------------------------------------------------------
// Embedding lookups
// ---------------------------------------------------------------------------

// Mean of the looked-up rows; empty id lists fall back to the PAD row (id 0).
inline std::vector<Real> cbow_mean(const Tensor& table, const std::vector<std::int32_t>& ids) {
    const std::size_t dim = table.cols();
    if (ids.empty()) {
        const Real* r0 = table.row(0);
        return std::vector<Real>(r0, r0 + dim);
    }
    std::vector<double> acc(dim, 0.0);
    for (std::int32_t id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= table.rows())
            throw DataError("cbow_mean: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(table.rows()) + ")");
        const Real* row = table.row(static_cast<std::size_t>(id));
        for (std::size_t j = 0; j < dim; ++j) acc[j] += static_cast<double>(row[j]);
    }
    std::vector<Real> out(dim);
    const double inv = 1.0 / static_cast<double>(ids.size());
    for (std::size_t j = 0; j < dim; ++j) out[j] = static_cast<Real>(acc[j] * inv);
    return out;
}

// Scatter the mean gradient back onto the table rows.
inline void cbow_mean_backward(Tensor& table_grad, const std::vector<std::int32_t>& ids,
                               const std::vector<Real>& grad_out) {
    const std::size_t dim = table_grad.cols();
    if (ids.empty()) {
        Real* r0 = table_grad.row(0);
        for (std::size_t j = 0; j < dim; ++j) r0[j] += grad_out[j];
        return;
    }
    const Real inv = static_cast<Real>(1.0 / static_cast<double>(ids.size()));
    for (std::int32_t id : ids) {
        Real* row = table_grad.row(static_cast<std::size_t>(id));
        for (std::size_t j = 0; j < dim; ++j) row[j] += grad_out[j] * inv;
    }
}

// ---------------------------------------------------------------------------
// Unit-length normalization
// ---------------------------------------------------------------------------

constexpr double kNormEpsilon = 1e-12;

inline std::vector<Real> l2_normalize(const std::vector<Real>& x) {
    const double n = std::sqrt(squared_norm(x));
    if (!(n > kNormEpsilon)) throw DegenerateVectorError("l2_normalize: norm below epsilon");
    std::vector<Real> out(x.size());
    const double inv = 1.0 / n;
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<Real>(static_cast<double>(x[i]) * inv);
    return out;
}

// Backward of y = x / |x|: dx = (dy - (dy.y) y) / |x|.
inline std::vector<Real> l2_normalize_backward(const std::vector<Real>& y, double norm,
                                               const std::vector<Real>& grad_y) {
    const double proj = dot(grad_y, y);
    std::vector<Real> gx(y.size());
    const double inv = 1.0 / norm;
    for (std::size_t i = 0; i < y.size(); ++i) {
        gx[i] = static_cast<Real>((static_cast<double>(grad_y[i]) - proj * static_cast<double>(y[i])) * inv);
    }
    return gx;
}

// gamma(v, u) = v.u / tau.
inline double affinity(const std::vector<Real>& v, const std::vector<Real>& u, double tau) {
    if (tau <= 0.0) throw ConfigError("affinity: tau must be > 0");
    return dot(v, u) / tau;
}

// ---------------------------------------------------------------------------
// MLP: hidden ReLU layers, final linear layer, biases throughout.
// ---------------------------------------------------------------------------

struct Dense {
    Tensor w;  // out x in
    Tensor b;  // out
};

struct Mlp {
    std::vector<Dense> layers;

    std::size_t in_dim() const { return layers.empty() ? 0 : layers.front().w.cols(); }
    std::size_t out_dim() const { return layers.empty() ? 0 : layers.back().w.rows(); }
};

struct MlpCache {
    // acts[0] is the input, acts[i+1] the output of layer i (post-ReLU for
    // hidden layers, raw for the final linear layer).
    std::vector<std::vector<Real>> acts;
};

inline std::vector<Real> mlp_forward(const Mlp& mlp, const std::vector<Real>& x, MlpCache* cache = nullptr) {
    if (mlp.layers.empty()) throw ShapeError("mlp_forward: empty MLP");
    if (x.size() != mlp.in_dim())
        throw ShapeError("mlp_forward: input dim " + std::to_string(x.size()) + " != " +
                         std::to_string(mlp.in_dim()));
    std::vector<Real> cur = x;
    if (cache) {
        cache->acts.clear();
        cache->acts.push_back(cur);
    }
    for (std::size_t li = 0; li < mlp.layers.size(); ++li) {
        const Dense& layer = mlp.layers[li];
        std::vector<Real> next(layer.w.rows());
        matvec(layer.w, cur.data(), next.data());
        for (std::size_t i = 0; i < next.size(); ++i) next[i] += layer.b.at(i);
        if (li + 1 < mlp.layers.size()) {
            for (Real& v : next) v = v > Real(0) ? v : Real(0);
        }
        cur = std::move(next);
        if (cache) cache->acts.push_back(cur);
    }
    return cur;
}

// Accumulates parameter gradients into `grads` and returns the input gradient.
inline std::vector<Real> mlp_backward(const Mlp& mlp, const MlpCache& cache,
                                      const std::vector<Real>& grad_out, Mlp& grads) {
    std::vector<Real> g = grad_out;
    for (std::size_t li = mlp.layers.size(); li-- > 0;) {
        const Dense& layer = mlp.layers[li];
        Dense& glayer = grads.layers[li];
        if (li + 1 < mlp.layers.size()) {
            const std::vector<Real>& post = cache.acts[li + 1];
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (post[i] <= Real(0)) g[i] = Real(0);
            }
        }
        const std::vector<Real>& input = cache.acts[li];
        outer_acc(glayer.w, g.data(), input.data());
        for (std::size_t i = 0; i < g.size(); ++i) glayer.b.at(i) += g[i];
        std::vector<Real> gin(input.size(), Real(0));
        matvec_t_acc(layer.w, g.data(), gin.data());
        g = std::move(gin);
    }
    return g;
}

// ---------------------------------------------------------------------------
// GRU cell, implementing the update rule as published for this model:
//   r = sigma(Wr x + Ur h)
//   u = sigma(Wu x + Uu (r . h))
//   c = tanh(Wc x + Uc (r . h))
//   h' = (1 - u) . h + u . c
// The reset gate feeds BOTH the update gate and the candidate, which differs
// from the textbook GRU where the update gate sees h directly. No biases.
// ---------------------------------------------------------------------------

struct GruParams {
    Tensor w_r, u_r;  // reset gate: D x (D+4), D x D
    Tensor w_u, u_u;  // update gate
    Tensor w_c, u_c;  // candidate
};

struct GruStepCache {
    std::vector<Real> x, h_prev, r, u, c, rh;
};

inline std::vector<Real> gru_step(const GruParams& g, const std::vector<Real>& x,
                                  const std::vector<Real>& h_prev, GruStepCache* cache = nullptr) {
    const std::size_t hd = g.w_r.rows();
    if (x.size() != g.w_r.cols()) throw ShapeError("gru_step: input dim mismatch");
    if (h_prev.size() != hd) throw ShapeError("gru_step: hidden dim mismatch");

    std::vector<Real> r(hd), u(hd), c(hd), rh(hd), h(hd), tmp(hd);

    matvec(g.w_r, x.data(), r.data());
    matvec(g.u_r, h_prev.data(), tmp.data());
    for (std::size_t i = 0; i < hd; ++i) r[i] = sigmoid(r[i] + tmp[i]);
    for (std::size_t i = 0; i < hd; ++i) rh[i] = r[i] * h_prev[i];

    matvec(g.w_u, x.data(), u.data());
    matvec(g.u_u, rh.data(), tmp.data());
    for (std::size_t i = 0; i < hd; ++i) u[i] = sigmoid(u[i] + tmp[i]);

    matvec(g.w_c, x.data(), c.data());
    matvec(g.u_c, rh.data(), tmp.data());
    for (std::size_t i = 0; i < hd; ++i) c[i] = static_cast<Real>(std::tanh(static_cast<double>(c[i] + tmp[i])));

    for (std::size_t i = 0; i < hd; ++i) h[i] = (Real(1) - u[i]) * h_prev[i] + u[i] * c[i];

    if (cache) {
        cache->x = x;
        cache->h_prev = h_prev;
        cache->r = std::move(r);
        cache->u = std::move(u);
        cache->c = std::move(c);
        cache->rh = std::move(rh);
    }
    return h;
}

// Given dh (gradient of the loss w.r.t. h_t), accumulates weight gradients
// and writes the gradients w.r.t. the step input and previous hidden state.
inline void gru_step_backward(const GruParams& g, const GruStepCache& s, const std::vector<Real>& dh,
                              GruParams& grads, std::vector<Real>& dx, std::vector<Real>& dh_prev) {
    const std::size_t hd = g.w_r.rows();
    const std::size_t xd = g.w_r.cols();
    dx.assign(xd, Real(0));
    dh_prev.assign(hd, Real(0));

    std::vector<Real> du(hd), dc(hd), dpre_c(hd), dpre_u(hd), drh(hd, Real(0)), dr(hd), dpre_r(hd);

    for (std::size_t i = 0; i < hd; ++i) {
        du[i] = dh[i] * (s.c[i] - s.h_prev[i]);
        dc[i] = dh[i] * s.u[i];
        dh_prev[i] += dh[i] * (Real(1) - s.u[i]);
    }

    for (std::size_t i = 0; i < hd; ++i) dpre_c[i] = dc[i] * (Real(1) - s.c[i] * s.c[i]);
    outer_acc(grads.w_c, dpre_c.data(), s.x.data());
    outer_acc(grads.u_c, dpre_c.data(), s.rh.data());
    matvec_t_acc(g.u_c, dpre_c.data(), drh.data());
    matvec_t_acc(g.w_c, dpre_c.data(), dx.data());

    for (std::size_t i = 0; i < hd; ++i) dpre_u[i] = du[i] * s.u[i] * (Real(1) - s.u[i]);
    outer_acc(grads.w_u, dpre_u.data(), s.x.data());
    outer_acc(grads.u_u, dpre_u.data(), s.rh.data());
    matvec_t_acc(g.u_u, dpre_u.data(), drh.data());
    matvec_t_acc(g.w_u, dpre_u.data(), dx.data());

    for (std::size_t i = 0; i < hd; ++i) {
        dr[i] = drh[i] * s.h_prev[i];
        dh_prev[i] += drh[i] * s.r[i];
    }

    for (std::size_t i = 0; i < hd; ++i) dpre_r[i] = dr[i] * s.r[i] * (Real(1) - s.r[i]);
    outer_acc(grads.w_r, dpre_r.data(), s.x.data());
    outer_acc(grads.u_r, dpre_r.data(), s.h_prev.data());
    matvec_t_acc(g.u_r, dpre_r.data(), dh_prev.data());
    matvec_t_acc(g.w_r, dpre_r.data(), dx.data());
}

// ---------------------------------------------------------------------------
// Model parameters and gradients
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<Tensor> m, v;  // aligned with named_tensors() order
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

struct ModelParams {
    HyperParams hp;
    std::size_t title_vocab = 0, aspect_vocab = 0, category_vocab = 0;

    Tensor title_table, aspect_table, category_table, event_type_table;
    Mlp item_mlp;
    Mlp user_mlp;  // CBOE head
    GruParams gru;

    AdamState adam;
};

// Gradients mirror the parameter tensors.
struct ModelGrads {
    Tensor title_table, aspect_table, category_table, event_type_table;
    Mlp item_mlp;
    Mlp user_mlp;
    GruParams gru;
};

// Canonical (name, tensor) enumeration shared by the optimizer, the clipper,
// the checkpoint format and the gradient checker. Field names must stay in
// sync between ModelParams and ModelGrads.
template <typename Model>
inline auto named_tensors(Model& m) {
    using TensorPtr = decltype(&m.title_table);
    std::vector<std::pair<std::string, TensorPtr>> out;
    out.emplace_back("title_table", &m.title_table);
    out.emplace_back("aspect_table", &m.aspect_table);
    out.emplace_back("category_table", &m.category_table);
    out.emplace_back("event_type_table", &m.event_type_table);
    for (std::size_t i = 0; i < m.item_mlp.layers.size(); ++i) {
        out.emplace_back("item_mlp.w" + std::to_string(i), &m.item_mlp.layers[i].w);
        out.emplace_back("item_mlp.b" + std::to_string(i), &m.item_mlp.layers[i].b);
    }
    for (std::size_t i = 0; i < m.user_mlp.layers.size(); ++i) {
        out.emplace_back("user_mlp.w" + std::to_string(i), &m.user_mlp.layers[i].w);
        out.emplace_back("user_mlp.b" + std::to_string(i), &m.user_mlp.layers[i].b);
    }
    out.emplace_back("gru.w_r", &m.gru.w_r);
    out.emplace_back("gru.u_r", &m.gru.u_r);
    out.emplace_back("gru.w_u", &m.gru.w_u);
    out.emplace_back("gru.u_u", &m.gru.u_u);
    out.emplace_back("gru.w_c", &m.gru.w_c);
    out.emplace_back("gru.u_c", &m.gru.u_c);
    return out;
}

inline Mlp make_mlp(std::size_t in, std::size_t hidden, std::size_t out, std::size_t hidden_layers) {
    Mlp mlp;
    std::size_t cur = in;
    for (std::size_t i = 0; i < hidden_layers; ++i) {
        mlp.layers.push_back({Tensor(hidden, cur), Tensor(hidden)});
        cur = hidden;
    }
    mlp.layers.push_back({Tensor(out, cur), Tensor(out)});
    return mlp;
}

inline void xavier_init(Tensor& t, Rng& rng) {
    const double fan_in = static_cast<double>(t.cols());
    const double fan_out = static_cast<double>(t.rows());
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    for (Real& x : t.v) x = static_cast<Real>((rng.uniform() * 2.0 - 1.0) * bound);
}

inline void normal_init(Tensor& t, Rng& rng) {
    for (Real& x : t.v) x = static_cast<Real>(rng.normal());
}

// Embedding tables start from N(0,1); MLP/GRU matrices use Xavier bounds and
// biases start at zero. Everything is drawn from one seeded stream in
// declaration order.
inline ModelParams init_model(const HyperParams& hp, std::size_t title_vocab, std::size_t aspect_vocab,
                              std::size_t category_vocab) {
    hp.validate();
    if (title_vocab < 2 || aspect_vocab < 2 || category_vocab < 1)
        throw ConfigError("init_model: vocabulary sizes too small");
    ModelParams p;
    p.hp = hp;
    p.title_vocab = title_vocab;
    p.aspect_vocab = aspect_vocab;
    p.category_vocab = category_vocab;

    Rng rng(hp.rng_seed);
    p.title_table = Tensor(title_vocab, hp.d_text);
    p.aspect_table = Tensor(aspect_vocab, hp.d_text);
    p.category_table = Tensor(category_vocab, hp.d_category);
    p.event_type_table = Tensor(2, hp.event_type_dim);
    normal_init(p.title_table, rng);
    normal_init(p.aspect_table, rng);
    normal_init(p.category_table, rng);
    normal_init(p.event_type_table, rng);

    const std::size_t item_in = hp.d_text + hp.d_text + hp.d_category;
    p.item_mlp = make_mlp(item_in, hp.mlp_hidden, hp.d, hp.mlp_layers);
    const std::size_t ev_dim = hp.d + hp.event_type_dim;
    p.user_mlp = make_mlp(ev_dim, hp.mlp_hidden, hp.d, hp.mlp_layers);
    for (auto& layer : p.item_mlp.layers) xavier_init(layer.w, rng);
    for (auto& layer : p.user_mlp.layers) xavier_init(layer.w, rng);

    p.gru.w_r = Tensor(hp.d, ev_dim);
    p.gru.u_r = Tensor(hp.d, hp.d);
    p.gru.w_u = Tensor(hp.d, ev_dim);
    p.gru.u_u = Tensor(hp.d, hp.d);
    p.gru.w_c = Tensor(hp.d, ev_dim);
    p.gru.u_c = Tensor(hp.d, hp.d);
    xavier_init(p.gru.w_r, rng);
    xavier_init(p.gru.u_r, rng);
    xavier_init(p.gru.w_u, rng);
    xavier_init(p.gru.u_u, rng);
    xavier_init(p.gru.w_c, rng);
    xavier_init(p.gru.u_c, rng);
    return p;
}

inline ModelGrads make_zero_grads(const ModelParams& p) {
    ModelGrads g;
    g.title_table = zeros_like(p.title_table);
    g.aspect_table = zeros_like(p.aspect_table);
    g.category_table = zeros_like(p.category_table);
    g.event_type_table = zeros_like(p.event_type_table);
    auto zero_mlp = [](const Mlp& src) {
        Mlp z;
        for (const auto& layer : src.layers) z.layers.push_back({zeros_like(layer.w), zeros_like(layer.b)});
        return z;
    };
    g.item_mlp = zero_mlp(p.item_mlp);
    g.user_mlp = zero_mlp(p.user_mlp);
    g.gru.w_r = zeros_like(p.gru.w_r);
    g.gru.u_r = zeros_like(p.gru.u_r);
    g.gru.w_u = zeros_like(p.gru.w_u);
    g.gru.u_u = zeros_like(p.gru.u_u);
    g.gru.w_c = zeros_like(p.gru.w_c);
    g.gru.u_c = zeros_like(p.gru.u_c);
    return g;
}

inline void scale_grads(ModelGrads& grads, double factor) {
    for (auto& [name, t] : named_tensors(grads)) {
        (void)name;
        for (Real& x : t->v) x = static_cast<Real>(static_cast<double>(x) * factor);
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

inline double global_grad_norm(ModelGrads& grads) {
    double sq = 0.0;
    for (auto& [name, t] : named_tensors(grads)) {
        (void)name;
        sq += dot(t->v.data(), t->v.data(), t->v.size());
    }
    return std::sqrt(sq);
}

// Global-norm clipping: if |g| > clip_norm, every gradient is scaled by
// clip_norm / |g|. Never increases the norm; identity below the threshold.
inline double clip_gradients(ModelGrads& grads, double clip_norm) {
    if (clip_norm <= 0.0) throw ConfigError("clip_gradients: clip_norm must be > 0");
    double sq = 0.0;
    for (auto& [name, t] : named_tensors(grads)) {
        for (Real x : t->v) {
            if (!std::isfinite(static_cast<double>(x)))
                throw NumericError("clip_gradients: non-finite gradient in block " + name);
            sq += static_cast<double>(x) * static_cast<double>(x);
        }
    }
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
        const double scale = clip_norm / norm;
        for (auto& [name, t] : named_tensors(grads)) {
            (void)name;
            for (Real& x : t->v) x = static_cast<Real>(static_cast<double>(x) * scale);
        }
    }
    return norm;
}

// Standard Adam with bias correction.
inline void adam_step(ModelParams& params, const ModelGrads& grads, double lr) {
    auto pts = named_tensors(params);
    auto gts = named_tensors(const_cast<ModelGrads&>(grads));
    if (params.adam.m.empty()) {
        params.adam.m.resize(pts.size());
        params.adam.v.resize(pts.size());
        for (std::size_t i = 0; i < pts.size(); ++i) {
            params.adam.m[i] = zeros_like(*pts[i].second);
            params.adam.v[i] = zeros_like(*pts[i].second);
        }
    }
    AdamState& st = params.adam;
    st.step += 1;
    const double b1t = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double b2t = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    for (std::size_t bi = 0; bi < pts.size(); ++bi) {
        Tensor& w = *pts[bi].second;
        const Tensor& g = *gts[bi].second;
        if (!w.same_shape(g)) throw ShapeError("adam_step: gradient shape mismatch in " + pts[bi].first);
        Tensor& m = st.m[bi];
        Tensor& v = st.v[bi];
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double gi = static_cast<double>(g.v[i]);
            if (!std::isfinite(gi)) throw NumericError("adam_step: non-finite gradient in block " + pts[bi].first);
            const double mi = st.beta1 * static_cast<double>(m.v[i]) + (1.0 - st.beta1) * gi;
            const double vi = st.beta2 * static_cast<double>(v.v[i]) + (1.0 - st.beta2) * gi * gi;
            m.v[i] = static_cast<Real>(mi);
            v.v[i] = static_cast<Real>(vi);
            const double mhat = mi / b1t;
            const double vhat = vi / b2t;
            w.v[i] = static_cast<Real>(static_cast<double>(w.v[i]) - lr * mhat / (std::sqrt(vhat) + st.epsilon));
        }
    }
}

}  // namespace recsys
