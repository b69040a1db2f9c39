#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "posbd/errors.hpp"
#include "posbd/rng.hpp"
#include "posbd/vocab.hpp"

namespace posbd {

/// Architecture of the toy autoregressive policy: token + position
/// embeddings, n_layers blocks of single-head causal attention plus a tanh
/// MLP (both residual), and a linear head. Small enough that analytic
/// gradients can be checked against finite differences.
struct ArchConfig {
    int d_model = 32;
    int n_layers = 2;
    int d_mlp = 64;
    int context_len = 1024;
    int vocab = 0;  // filled from the vocabulary

    bool operator==(const ArchConfig&) const = default;
};

namespace detail {

struct LayerOffsets {
    std::size_t wq, wk, wv, wo, w1, b1, w2, b2;
};

struct ParamLayout {
    std::size_t tok_emb = 0, pos_emb = 0;
    std::vector<LayerOffsets> layers;
    std::size_t w_out = 0, b_out = 0;
    std::size_t total = 0;

    static ParamLayout make(const ArchConfig& a) {
        ParamLayout l;
        const std::size_t D = a.d_model, H = a.d_mlp, V = a.vocab, T = a.context_len;
        std::size_t at = 0;
        l.tok_emb = at;
        at += V * D;
        l.pos_emb = at;
        at += T * D;
        l.layers.resize(a.n_layers);
        for (auto& lay : l.layers) {
            lay.wq = at; at += D * D;
            lay.wk = at; at += D * D;
            lay.wv = at; at += D * D;
            lay.wo = at; at += D * D;
            lay.w1 = at; at += H * D;
            lay.b1 = at; at += H;
            lay.w2 = at; at += D * H;
            lay.b2 = at; at += D;
        }
        l.w_out = at;
        at += V * D;
        l.b_out = at;
        at += V;
        l.total = at;
        return l;
    }
};

// y += W x, W row-major [rows x cols].
inline void matvec_acc(const double* W, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* w = W + static_cast<std::size_t>(r) * cols;
        double s = 0.0;
        for (int c = 0; c < cols; ++c) s += w[c] * x[c];
        y[r] += s;
    }
}

// y += W^T x (x has `rows` entries, y has `cols`).
inline void matvec_t_acc(const double* W, const double* x, double* y, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        const double* w = W + static_cast<std::size_t>(r) * cols;
        const double xr = x[r];
        for (int c = 0; c < cols; ++c) y[c] += w[c] * xr;
    }
}

// W += outer(a, b), a has `rows`, b has `cols`.
inline void outer_acc(double* W, const double* a, const double* b, int rows, int cols) {
    for (int r = 0; r < rows; ++r) {
        double* w = W + static_cast<std::size_t>(r) * cols;
        const double ar = a[r];
        for (int c = 0; c < cols; ++c) w[c] += ar * b[c];
    }
}

}  // namespace detail

/// Per-sequence activation cache for one teacher-forced forward pass.
struct ForwardCache {
    int len = 0;
    // Per layer, flattened [len x d_model] (or [len x d_mlp] for g).
    std::vector<std::vector<double>> h_in, q, k, v, attn, r, g;
    std::vector<std::vector<double>> a;  // attention weights, [len x len] lower-triangular
    std::vector<double> h_final;         // [len x d_model]
    std::vector<double> logits;          // [len x vocab]
};

struct SampledRollout {
    std::vector<int> tokens;          // generated tokens, including the stop token
    std::vector<double> logprobs;     // log pi(token | prefix), temperature 1
    std::vector<double> entropies;    // next-token distribution entropy per step
    bool hit_limit = false;           // stopped by length, not by a stop token
};

/// The toy policy. Parameters live in one flat vector so that optimizer
/// steps, serialization and finite-difference checks all operate on a single
/// contiguous block.
class Policy {
public:
    Policy() = default;

    Policy(const ArchConfig& arch, Vocabulary vocab, std::uint64_t seed, double init_std = 0.08)
        : arch_(arch), vocab_(std::move(vocab)), rng_seed_(seed) {
        arch_.vocab = static_cast<int>(vocab_.size());
        layout_ = detail::ParamLayout::make(arch_);
        theta_.resize(layout_.total);
        auto rng = CounterRng::from_seed(seed).derive("init");
        for (double& w : theta_) w = rng.next_gauss() * init_std;
        // Zero the biases; gaussian weights elsewhere.
        for (const auto& lay : layout_.layers) {
            std::fill_n(theta_.data() + lay.b1, arch_.d_mlp, 0.0);
            std::fill_n(theta_.data() + lay.b2, arch_.d_model, 0.0);
        }
        std::fill_n(theta_.data() + layout_.b_out, arch_.vocab, 0.0);
    }

    const ArchConfig& arch() const { return arch_; }
    const Vocabulary& vocab() const { return vocab_; }
    std::vector<double>& params() { return theta_; }
    const std::vector<double>& params() const { return theta_; }
    std::size_t param_count() const { return theta_.size(); }
    std::uint64_t rng_seed() const { return rng_seed_; }
    long long step_count() const { return step_count_; }
    void set_step_count(long long s) { step_count_ = s; }

    // ------------------------------ forward ------------------------------

    /// Teacher-forced forward pass. `logits_from` limits head evaluation to
    /// positions >= logits_from (earlier rows stay zero); prompt-only
    /// positions never need logits, and the head is the dominant cost.
    ForwardCache forward(std::span<const int> tokens, int logits_from = 0) const {
        const int L = static_cast<int>(tokens.size());
        if (L == 0) throw DomainError("Policy::forward: empty token sequence");
        if (L > arch_.context_len)
            throw SequenceTooLong("sequence of " + std::to_string(L) +
                                  " tokens exceeds context " +
                                  std::to_string(arch_.context_len));
        const int D = arch_.d_model, H = arch_.d_mlp, V = arch_.vocab;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));
        ForwardCache cc;
        cc.len = L;
        cc.h_in.resize(arch_.n_layers);
        cc.q.resize(arch_.n_layers);
        cc.k.resize(arch_.n_layers);
        cc.v.resize(arch_.n_layers);
        cc.a.resize(arch_.n_layers);
        cc.attn.resize(arch_.n_layers);
        cc.r.resize(arch_.n_layers);
        cc.g.resize(arch_.n_layers);

        std::vector<double> h(static_cast<std::size_t>(L) * D);
        for (int t = 0; t < L; ++t) {
            const int tok = tokens[t];
            if (tok < 0 || tok >= V) throw UnknownToken("token id out of vocabulary");
            const double* te = theta_.data() + layout_.tok_emb + static_cast<std::size_t>(tok) * D;
            const double* pe = theta_.data() + layout_.pos_emb + static_cast<std::size_t>(t) * D;
            double* ht = h.data() + static_cast<std::size_t>(t) * D;
            for (int i = 0; i < D; ++i) ht[i] = te[i] + pe[i];
        }

        for (int l = 0; l < arch_.n_layers; ++l) {
            const auto& off = layout_.layers[l];
            cc.h_in[l] = h;
            auto& q = cc.q[l];
            auto& k = cc.k[l];
            auto& v = cc.v[l];
            q.assign(static_cast<std::size_t>(L) * D, 0.0);
            k.assign(static_cast<std::size_t>(L) * D, 0.0);
            v.assign(static_cast<std::size_t>(L) * D, 0.0);
            for (int t = 0; t < L; ++t) {
                const double* ht = h.data() + static_cast<std::size_t>(t) * D;
                detail::matvec_acc(theta_.data() + off.wq, ht,
                                   q.data() + static_cast<std::size_t>(t) * D, D, D);
                detail::matvec_acc(theta_.data() + off.wk, ht,
                                   k.data() + static_cast<std::size_t>(t) * D, D, D);
                detail::matvec_acc(theta_.data() + off.wv, ht,
                                   v.data() + static_cast<std::size_t>(t) * D, D, D);
            }
            auto& a = cc.a[l];
            auto& attn = cc.attn[l];
            a.assign(static_cast<std::size_t>(L) * L, 0.0);
            attn.assign(static_cast<std::size_t>(L) * D, 0.0);
            for (int t = 0; t < L; ++t) {
                double* arow = a.data() + static_cast<std::size_t>(t) * L;
                const double* qt = q.data() + static_cast<std::size_t>(t) * D;
                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    const double* ku = k.data() + static_cast<std::size_t>(u) * D;
                    double s = 0.0;
                    for (int i = 0; i < D; ++i) s += qt[i] * ku[i];
                    arow[u] = s * inv_sqrt_d;
                    if (arow[u] > mx) mx = arow[u];
                }
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    arow[u] = std::exp(arow[u] - mx);
                    z += arow[u];
                }
                const double inv_z = 1.0 / z;
                double* ot = attn.data() + static_cast<std::size_t>(t) * D;
                for (int u = 0; u <= t; ++u) {
                    arow[u] *= inv_z;
                    const double* vu = v.data() + static_cast<std::size_t>(u) * D;
                    for (int i = 0; i < D; ++i) ot[i] += arow[u] * vu[i];
                }
            }
            auto& r = cc.r[l];
            auto& g = cc.g[l];
            r.assign(static_cast<std::size_t>(L) * D, 0.0);
            g.assign(static_cast<std::size_t>(L) * H, 0.0);
            for (int t = 0; t < L; ++t) {
                const double* ht = h.data() + static_cast<std::size_t>(t) * D;
                const double* ot = attn.data() + static_cast<std::size_t>(t) * D;
                double* rt = r.data() + static_cast<std::size_t>(t) * D;
                for (int i = 0; i < D; ++i) rt[i] = ht[i];
                detail::matvec_acc(theta_.data() + off.wo, ot, rt, D, D);
                double* gt = g.data() + static_cast<std::size_t>(t) * H;
                std::vector<double> z1(H, 0.0);
                detail::matvec_acc(theta_.data() + off.w1, rt, z1.data(), H, D);
                const double* b1 = theta_.data() + off.b1;
                for (int i = 0; i < H; ++i) gt[i] = std::tanh(z1[i] + b1[i]);
                double* hnew = h.data() + static_cast<std::size_t>(t) * D;
                const double* b2 = theta_.data() + off.b2;
                for (int i = 0; i < D; ++i) hnew[i] = rt[i] + b2[i];
                detail::matvec_acc(theta_.data() + off.w2, gt, hnew, D, H);
            }
        }

        cc.h_final = h;
        cc.logits.assign(static_cast<std::size_t>(L) * V, 0.0);
        for (int t = std::max(0, logits_from); t < L; ++t) {
            double* lt = cc.logits.data() + static_cast<std::size_t>(t) * V;
            const double* bo = theta_.data() + layout_.b_out;
            for (int i = 0; i < V; ++i) lt[i] = bo[i];
            detail::matvec_acc(theta_.data() + layout_.w_out,
                               h.data() + static_cast<std::size_t>(t) * D, lt, V, D);
        }
        return cc;
    }

    /// Log-softmax row for position t of a cached forward.
    std::vector<double> log_probs_at(const ForwardCache& cc, int t) const {
        const int V = arch_.vocab;
        const double* lt = cc.logits.data() + static_cast<std::size_t>(t) * V;
        std::vector<double> out(lt, lt + V);
        log_softmax_inplace(out);
        return out;
    }

    // ------------------------------ backward ------------------------------

    /// Accumulate d(loss)/d(theta) into `grad` given d(loss)/d(logits) for
    /// every position (flattened [len x vocab]). `dlogits_from` marks the
    /// first position with a nonzero dlogits row.
    void backward(std::span<const int> tokens, const ForwardCache& cc,
                  const std::vector<double>& dlogits, std::span<double> grad,
                  int dlogits_from = 0) const {
        const int L = cc.len, D = arch_.d_model, H = arch_.d_mlp, V = arch_.vocab;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

        std::vector<double> dh(static_cast<std::size_t>(L) * D, 0.0);
        // Head.
        for (int t = std::max(0, dlogits_from); t < L; ++t) {
            const double* dl = dlogits.data() + static_cast<std::size_t>(t) * V;
            const double* ht = cc.h_final.data() + static_cast<std::size_t>(t) * D;
            detail::outer_acc(grad.data() + layout_.w_out, dl, ht, V, D);
            double* dbo = grad.data() + layout_.b_out;
            for (int i = 0; i < V; ++i) dbo[i] += dl[i];
            detail::matvec_t_acc(theta_.data() + layout_.w_out, dl,
                                 dh.data() + static_cast<std::size_t>(t) * D, V, D);
        }

        std::vector<double> dr(static_cast<std::size_t>(L) * D);
        std::vector<double> dattn(static_cast<std::size_t>(L) * D);
        std::vector<double> dq(static_cast<std::size_t>(L) * D);
        std::vector<double> dk(static_cast<std::size_t>(L) * D);
        std::vector<double> dv(static_cast<std::size_t>(L) * D);
        std::vector<double> dz1(H);

        for (int l = arch_.n_layers - 1; l >= 0; --l) {
            const auto& off = layout_.layers[l];
            const auto& h_in = cc.h_in[l];
            const auto& q = cc.q[l];
            const auto& k = cc.k[l];
            const auto& v = cc.v[l];
            const auto& a = cc.a[l];
            const auto& attn = cc.attn[l];
            const auto& r = cc.r[l];
            const auto& g = cc.g[l];

            std::fill(dr.begin(), dr.end(), 0.0);
            std::fill(dattn.begin(), dattn.end(), 0.0);
            std::fill(dq.begin(), dq.end(), 0.0);
            std::fill(dk.begin(), dk.end(), 0.0);
            std::fill(dv.begin(), dv.end(), 0.0);

            // MLP block: h_out = r + W2 tanh(W1 r + b1) + b2.
            for (int t = 0; t < L; ++t) {
                const double* dht = dh.data() + static_cast<std::size_t>(t) * D;
                const double* gt = g.data() + static_cast<std::size_t>(t) * H;
                const double* rt = r.data() + static_cast<std::size_t>(t) * D;
                double* drt = dr.data() + static_cast<std::size_t>(t) * D;

                detail::outer_acc(grad.data() + off.w2, dht, gt, D, H);
                double* db2 = grad.data() + off.b2;
                for (int i = 0; i < D; ++i) db2[i] += dht[i];

                std::fill(dz1.begin(), dz1.end(), 0.0);
                detail::matvec_t_acc(theta_.data() + off.w2, dht, dz1.data(), D, H);
                for (int i = 0; i < H; ++i) dz1[i] *= (1.0 - gt[i] * gt[i]);

                detail::outer_acc(grad.data() + off.w1, dz1.data(), rt, H, D);
                double* db1 = grad.data() + off.b1;
                for (int i = 0; i < H; ++i) db1[i] += dz1[i];

                for (int i = 0; i < D; ++i) drt[i] = dht[i];  // residual
                detail::matvec_t_acc(theta_.data() + off.w1, dz1.data(), drt, H, D);
            }

            // Attention block: r = h_in + Wo attn.
            std::fill(dh.begin(), dh.end(), 0.0);
            for (int t = 0; t < L; ++t) {
                const double* drt = dr.data() + static_cast<std::size_t>(t) * D;
                const double* ot = attn.data() + static_cast<std::size_t>(t) * D;
                detail::outer_acc(grad.data() + off.wo, drt, ot, D, D);
                detail::matvec_t_acc(theta_.data() + off.wo, drt,
                                     dattn.data() + static_cast<std::size_t>(t) * D, D, D);
                double* dht = dh.data() + static_cast<std::size_t>(t) * D;
                for (int i = 0; i < D; ++i) dht[i] += drt[i];  // residual
            }
            for (int t = 0; t < L; ++t) {
                const double* arow = a.data() + static_cast<std::size_t>(t) * L;
                const double* dot = dattn.data() + static_cast<std::size_t>(t) * D;
                const double* qt = q.data() + static_cast<std::size_t>(t) * D;
                // da and softmax jacobian.
                double dot_a_da = 0.0;
                std::vector<double> da(static_cast<std::size_t>(t) + 1);
                for (int u = 0; u <= t; ++u) {
                    const double* vu = v.data() + static_cast<std::size_t>(u) * D;
                    double s = 0.0;
                    for (int i = 0; i < D; ++i) s += dot[i] * vu[i];
                    da[u] = s;
                    dot_a_da += arow[u] * s;
                    double* dvu = dv.data() + static_cast<std::size_t>(u) * D;
                    for (int i = 0; i < D; ++i) dvu[i] += arow[u] * dot[i];
                }
                double* dqt = dq.data() + static_cast<std::size_t>(t) * D;
                for (int u = 0; u <= t; ++u) {
                    const double ds = arow[u] * (da[u] - dot_a_da) * inv_sqrt_d;
                    const double* ku = k.data() + static_cast<std::size_t>(u) * D;
                    double* dku = dk.data() + static_cast<std::size_t>(u) * D;
                    for (int i = 0; i < D; ++i) {
                        dqt[i] += ds * ku[i];
                        dku[i] += ds * qt[i];
                    }
                }
            }
            for (int t = 0; t < L; ++t) {
                const double* ht = h_in.data() + static_cast<std::size_t>(t) * D;
                const double* dqt = dq.data() + static_cast<std::size_t>(t) * D;
                const double* dkt = dk.data() + static_cast<std::size_t>(t) * D;
                const double* dvt = dv.data() + static_cast<std::size_t>(t) * D;
                detail::outer_acc(grad.data() + off.wq, dqt, ht, D, D);
                detail::outer_acc(grad.data() + off.wk, dkt, ht, D, D);
                detail::outer_acc(grad.data() + off.wv, dvt, ht, D, D);
                double* dht = dh.data() + static_cast<std::size_t>(t) * D;
                detail::matvec_t_acc(theta_.data() + off.wq, dqt, dht, D, D);
                detail::matvec_t_acc(theta_.data() + off.wk, dkt, dht, D, D);
                detail::matvec_t_acc(theta_.data() + off.wv, dvt, dht, D, D);
            }
        }

        // Embeddings.
        for (int t = 0; t < L; ++t) {
            const double* dht = dh.data() + static_cast<std::size_t>(t) * D;
            double* te =
                grad.data() + layout_.tok_emb + static_cast<std::size_t>(tokens[t]) * D;
            double* pe = grad.data() + layout_.pos_emb + static_cast<std::size_t>(t) * D;
            for (int i = 0; i < D; ++i) {
                te[i] += dht[i];
                pe[i] += dht[i];
            }
        }
    }

    // ------------------------------ sampling ------------------------------

    /// Incremental decoding state: per-layer key/value caches. step() runs
    /// the same per-position arithmetic as forward(), so sampled logprobs
    /// agree with teacher-forced recomputation.
    class Decoder {
    public:
        explicit Decoder(const Policy& p) : p_(p) {
            k_.resize(p.arch_.n_layers);
            v_.resize(p.arch_.n_layers);
        }

        int position() const { return pos_; }

        /// Feed one token; returns the logits row predicting the next token.
        std::vector<double> step(int token) {
            const auto& p = p_;
            const int D = p.arch_.d_model, H = p.arch_.d_mlp, V = p.arch_.vocab;
            const int t = pos_;
            if (t >= p.arch_.context_len) throw SequenceTooLong("decoder past context length");
            if (token < 0 || token >= V) throw UnknownToken("token id out of vocabulary");
            const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(D));

            std::vector<double> h(D);
            {
                const double* te =
                    p.theta_.data() + p.layout_.tok_emb + static_cast<std::size_t>(token) * D;
                const double* pe =
                    p.theta_.data() + p.layout_.pos_emb + static_cast<std::size_t>(t) * D;
                for (int i = 0; i < D; ++i) h[i] = te[i] + pe[i];
            }
            std::vector<double> q(D), scores(t + 1), attn(D), r(D), g(H), z1(H);
            for (int l = 0; l < p.arch_.n_layers; ++l) {
                const auto& off = p.layout_.layers[l];
                auto& kc = k_[l];
                auto& vc = v_[l];
                kc.resize(static_cast<std::size_t>(t + 1) * D);
                vc.resize(static_cast<std::size_t>(t + 1) * D);
                std::fill(q.begin(), q.end(), 0.0);
                double* kt = kc.data() + static_cast<std::size_t>(t) * D;
                double* vt = vc.data() + static_cast<std::size_t>(t) * D;
                std::fill(kt, kt + D, 0.0);
                std::fill(vt, vt + D, 0.0);
                detail::matvec_acc(p.theta_.data() + off.wq, h.data(), q.data(), D, D);
                detail::matvec_acc(p.theta_.data() + off.wk, h.data(), kt, D, D);
                detail::matvec_acc(p.theta_.data() + off.wv, h.data(), vt, D, D);

                double mx = -1e300;
                for (int u = 0; u <= t; ++u) {
                    const double* ku = kc.data() + static_cast<std::size_t>(u) * D;
                    double s = 0.0;
                    for (int i = 0; i < D; ++i) s += q[i] * ku[i];
                    scores[u] = s * inv_sqrt_d;
                    if (scores[u] > mx) mx = scores[u];
                }
                double z = 0.0;
                for (int u = 0; u <= t; ++u) {
                    scores[u] = std::exp(scores[u] - mx);
                    z += scores[u];
                }
                const double inv_z = 1.0 / z;
                std::fill(attn.begin(), attn.end(), 0.0);
                for (int u = 0; u <= t; ++u) {
                    const double w = scores[u] * inv_z;
                    const double* vu = vc.data() + static_cast<std::size_t>(u) * D;
                    for (int i = 0; i < D; ++i) attn[i] += w * vu[i];
                }

                for (int i = 0; i < D; ++i) r[i] = h[i];
                detail::matvec_acc(p.theta_.data() + off.wo, attn.data(), r.data(), D, D);
                std::fill(z1.begin(), z1.end(), 0.0);
                detail::matvec_acc(p.theta_.data() + off.w1, r.data(), z1.data(), H, D);
                const double* b1 = p.theta_.data() + off.b1;
                for (int i = 0; i < H; ++i) g[i] = std::tanh(z1[i] + b1[i]);
                const double* b2 = p.theta_.data() + off.b2;
                for (int i = 0; i < D; ++i) h[i] = r[i] + b2[i];
                detail::matvec_acc(p.theta_.data() + off.w2, g.data(), h.data(), D, H);
            }
            std::vector<double> logits(V);
            const double* bo = p.theta_.data() + p.layout_.b_out;
            for (int i = 0; i < V; ++i) logits[i] = bo[i];
            detail::matvec_acc(p.theta_.data() + p.layout_.w_out, h.data(), logits.data(), V, D);
            ++pos_;
            return logits;
        }

    private:
        const Policy& p_;
        std::vector<std::vector<double>> k_, v_;
        int pos_ = 0;
    };

    /// Ancestral sampling. Draws one uniform per generated token from `rng`
    /// in position order, so stopping earlier yields a prefix of the longer
    /// run under the same stream. temperature 0 is greedy argmax (lowest id
    /// wins ties) and consumes no draws. Stored logprobs and entropies are
    /// always the temperature-1 values. Generation halts after emitting any
    /// token in `stop_ids`.
    SampledRollout sample(std::span<const int> prompt, std::span<const int> stop_ids, int max_new,
                          double temperature, CounterRng rng) const {
        if (prompt.empty()) throw DomainError("Policy::sample: empty prompt");
        SampledRollout out;
        Decoder dec(*this);
        std::vector<double> logits;
        const int budget =
            std::min<int>(max_new, arch_.context_len - static_cast<int>(prompt.size()));
        if (budget <= 0) throw SequenceTooLong("prompt leaves no room to generate");
        for (int tok : prompt) logits = dec.step(tok);
        for (int step = 0; step < budget; ++step) {
            std::vector<double> lp = logits;
            log_softmax_inplace(lp);
            int chosen;
            if (temperature <= 0.0) {
                chosen = 0;
                for (int i = 1; i < arch_.vocab; ++i)
                    if (lp[i] > lp[chosen]) chosen = i;
            } else {
                std::vector<double> scaled(lp);
                if (temperature != 1.0) {
                    for (double& x : scaled) x /= temperature;
                    log_softmax_inplace(scaled);
                }
                const double u = rng.next_double();
                double acc = 0.0;
                chosen = arch_.vocab - 1;
                for (int i = 0; i < arch_.vocab; ++i) {
                    acc += std::exp(scaled[i]);
                    if (u < acc) {
                        chosen = i;
                        break;
                    }
                }
            }
            double entropy = 0.0;
            for (int i = 0; i < arch_.vocab; ++i) {
                const double p = std::exp(lp[i]);
                if (p > 0.0) entropy -= p * lp[i];
            }
            out.tokens.push_back(chosen);
            out.logprobs.push_back(lp[chosen]);
            out.entropies.push_back(entropy);
            for (int s : stop_ids)
                if (chosen == s) return out;
            if (step + 1 < budget) logits = dec.step(chosen);
        }
        out.hit_limit = true;
        return out;
    }

    /// Convenience overload with a single stop token.
    SampledRollout sample(std::span<const int> prompt, int stop_id, int max_new,
                          double temperature, CounterRng rng) const {
        const int stops[1] = {stop_id};
        return sample(prompt, std::span<const int>(stops, 1), max_new, temperature,
                      std::move(rng));
    }

    /// Final-layer hidden state rows for the given positions, averaged.
    std::vector<double> mean_hidden(const ForwardCache& cc, int begin, int end) const {
        const int D = arch_.d_model;
        std::vector<double> out(D, 0.0);
        if (begin >= end) return out;
        for (int t = begin; t < end; ++t) {
            const double* ht = cc.h_final.data() + static_cast<std::size_t>(t) * D;
            for (int i = 0; i < D; ++i) out[i] += ht[i];
        }
        for (int i = 0; i < D; ++i) out[i] /= (end - begin);
        return out;
    }

    // ---------------------------- serialization ----------------------------

    void save(std::ostream& os) const {
        const auto w32 = [&](std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); };
        const auto w64 = [&](std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); };
        os.write("PBDC", 4);
        w32(1);  // format version
        w32(static_cast<std::uint32_t>(arch_.d_model));
        w32(static_cast<std::uint32_t>(arch_.n_layers));
        w32(static_cast<std::uint32_t>(arch_.d_mlp));
        w32(static_cast<std::uint32_t>(arch_.context_len));
        w32(static_cast<std::uint32_t>(arch_.vocab));
        w64(rng_seed_);
        w64(static_cast<std::uint64_t>(step_count_));
        w64(theta_.size());
        os.write(reinterpret_cast<const char*>(theta_.data()),
                 static_cast<std::streamsize>(theta_.size() * sizeof(double)));
        w32(static_cast<std::uint32_t>(vocab_.size()));
        for (const auto& tok : vocab_.tokens()) {
            w32(static_cast<std::uint32_t>(tok.size()));
            os.write(tok.data(), static_cast<std::streamsize>(tok.size()));
        }
        if (!os) throw IoError("checkpoint write failed");
    }

    static Policy load(std::istream& is) {
        const auto r32 = [&]() {
            std::uint32_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 4);
            return v;
        };
        const auto r64 = [&]() {
            std::uint64_t v = 0;
            is.read(reinterpret_cast<char*>(&v), 8);
            return v;
        };
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "PBDC", 4) != 0)
            throw IoError("not a policy checkpoint (bad magic)");
        const std::uint32_t version = r32();
        if (version != 1) throw IoError("unsupported checkpoint version");
        Policy p;
        p.arch_.d_model = static_cast<int>(r32());
        p.arch_.n_layers = static_cast<int>(r32());
        p.arch_.d_mlp = static_cast<int>(r32());
        p.arch_.context_len = static_cast<int>(r32());
        p.arch_.vocab = static_cast<int>(r32());
        p.rng_seed_ = r64();
        p.step_count_ = static_cast<long long>(r64());
        const std::uint64_t n = r64();
        p.layout_ = detail::ParamLayout::make(p.arch_);
        if (n != p.layout_.total) throw IoError("checkpoint parameter count mismatch");
        p.theta_.resize(n);
        is.read(reinterpret_cast<char*>(p.theta_.data()),
                static_cast<std::streamsize>(n * sizeof(double)));
        const std::uint32_t vn = r32();
        std::vector<std::string> tokens(vn);
        for (auto& tok : tokens) {
            const std::uint32_t len = r32();
            tok.resize(len);
            is.read(tok.data(), len);
        }
        if (!is) throw IoError("checkpoint read failed (truncated)");
        p.vocab_ = Vocabulary::from_tokens(std::move(tokens));
        if (static_cast<int>(p.vocab_.size()) != p.arch_.vocab)
            throw IoError("checkpoint vocabulary size mismatch");
        return p;
    }

    void save_file(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw IoError("cannot open checkpoint for writing: " + path);
        save(os);
    }

    static Policy load_file(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw IoError("cannot open checkpoint: " + path);
        return load(is);
    }

private:
    static void log_softmax_inplace(std::vector<double>& row) {
        double mx = row[0];
        for (double x : row)
            if (x > mx) mx = x;
        double z = 0.0;
        for (double x : row) z += std::exp(x - mx);
        const double logz = mx + std::log(z);
        for (double& x : row) x -= logz;
    }

    ArchConfig arch_;
    Vocabulary vocab_;
    detail::ParamLayout layout_;
    std::vector<double> theta_;
    std::uint64_t rng_seed_ = 0;
    long long step_count_ = 0;

    friend class PolicyScorer;
};

}  // namespace posbd
