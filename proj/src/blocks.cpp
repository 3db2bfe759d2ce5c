#include "umoe/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "umoe/rng.hpp"

namespace umoe {

namespace {
constexpr double kNormEps = 1e-6;
}

double rmsnorm_row(std::span<const double> x, std::span<const double> gain, std::span<double> out) {
    double ms = 0.0;
    for (double v : x) ms += v * v;
    ms /= static_cast<double>(x.size());
    const double r = 1.0 / std::sqrt(ms + kNormEps);
    for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * r * gain[i];
    return r;
}

// dx/dgain accumulation for one row given the cached factor r.
static void rmsnorm_row_backward(std::span<const double> x, std::span<const double> gain, double r,
                                 std::span<const double> dy, std::span<double> dx,
                                 std::span<double> dgain) {
    const size_t d = x.size();
    double wx = 0.0;
    for (size_t i = 0; i < d; ++i) {
        dgain[i] += dy[i] * x[i] * r;
        wx += dy[i] * gain[i] * x[i];
    }
    const double c = r * r * r * wx / static_cast<double>(d);
    for (size_t i = 0; i < d; ++i) dx[i] += r * dy[i] * gain[i] - c * x[i];
}

// ---------------------------------------------------------------------------
// model construction

Model init_model(const ModelConfig& cfg, uint64_t seed) {
    validate(cfg);
    Model m;
    m.cfg = cfg;
    const int d = cfg.hidden_dim;

    m.embed = Mat(static_cast<int>(cfg.vocab_size), d);
    m.head = Mat(d, static_cast<int>(cfg.vocab_size));
    fill_gaussian(m.embed, 1.0 / std::sqrt(static_cast<double>(d)), Rng::mix(seed, 1));
    fill_gaussian(m.head, std::sqrt(2.0 / static_cast<double>(d + cfg.vocab_size)),
                  Rng::mix(seed, 2));
    m.final_gain = Mat(1, d);
    std::fill(m.final_gain.data.begin(), m.final_gain.data.end(), 1.0);

    m.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams& lp = m.layers[l];
        const uint64_t lseed = Rng::mix(seed, 100 + l);
        lp.gain_attn = Mat(1, d);
        lp.gain_ffn = Mat(1, d);
        std::fill(lp.gain_attn.data.begin(), lp.gain_attn.data.end(), 1.0);
        std::fill(lp.gain_ffn.data.begin(), lp.gain_ffn.data.end(), 1.0);

        if (cfg.attn_is_moe()) {
            ExpertBank bank = init_bank(cfg, BankRole::attention, Rng::mix(lseed, 0));
            lp.attn.experts = std::make_shared<std::vector<Expert>>(std::move(bank.experts));
            if (!bank.lora.empty())
                lp.attn.lora = std::make_shared<std::vector<LoraQuery>>(std::move(bank.lora));
            lp.attn.fixed = std::make_shared<std::vector<Expert>>(std::move(bank.fixed));
            lp.w_q = std::move(bank.w_q);
            lp.w_k = std::move(bank.w_k);
            if (cfg.k_attn > 0) {
                lp.attn.router = std::make_shared<RouterParams>();
                lp.attn.router->w = Mat(cfg.experts_attn(), d);
                fill_gaussian(lp.attn.router->w,
                              std::sqrt(2.0 / static_cast<double>(d + cfg.experts_attn())),
                              Rng::mix(lseed, 1));
            }
        } else {
            const int h = cfg.n_heads, dk = cfg.key_dim, dv = cfg.value_dim;
            lp.dense_attn.n_heads = h;
            lp.dense_attn.key_dim = dk;
            lp.dense_attn.value_dim = dv;
            lp.dense_attn.rope_base = cfg.rope_base;
            lp.dense_attn.w_q = Mat(d, h * dk);
            lp.dense_attn.w_k = Mat(d, h * dk);
            lp.dense_attn.w_v = Mat(d, h * dv);
            lp.dense_attn.w_o = Mat(h * dv, d);
            fill_gaussian(lp.dense_attn.w_q, std::sqrt(2.0 / static_cast<double>(d + h * dk)),
                          Rng::mix(lseed, 2));
            fill_gaussian(lp.dense_attn.w_k, std::sqrt(2.0 / static_cast<double>(d + h * dk)),
                          Rng::mix(lseed, 3));
            fill_gaussian(lp.dense_attn.w_v, std::sqrt(2.0 / static_cast<double>(d + h * dv)),
                          Rng::mix(lseed, 4));
            fill_gaussian(lp.dense_attn.w_o, std::sqrt(2.0 / static_cast<double>(h * dv + d)),
                          Rng::mix(lseed, 5));
        }

        if (cfg.ffn_is_moe()) {
            ExpertBank bank = init_bank(cfg, BankRole::ffn, Rng::mix(lseed, 6));
            lp.ffn.experts = cfg.share_experts_across_sublayers
                                 ? lp.attn.experts
                                 : std::make_shared<std::vector<Expert>>(std::move(bank.experts));
            lp.ffn.fixed = (cfg.share_fixed_expert && cfg.attn_is_moe())
                               ? lp.attn.fixed
                               : std::make_shared<std::vector<Expert>>(std::move(bank.fixed));
            if (cfg.k_ffn > 0) {
                if (cfg.share_router && lp.attn.router) {
                    lp.ffn.router = lp.attn.router;
                } else {
                    lp.ffn.router = std::make_shared<RouterParams>();
                    lp.ffn.router->w = Mat(cfg.experts_ffn(), d);
                    fill_gaussian(lp.ffn.router->w,
                                  std::sqrt(2.0 / static_cast<double>(d + cfg.experts_ffn())),
                                  Rng::mix(lseed, 8));
                }
            }
        } else {
            lp.ffn_w1 = Mat(d, cfg.ffn_dim);
            lp.ffn_w2 = Mat(cfg.ffn_dim, d);
            fill_gaussian(lp.ffn_w1, std::sqrt(2.0 / static_cast<double>(d + cfg.ffn_dim)),
                          Rng::mix(lseed, 9));
            fill_gaussian(lp.ffn_w2, std::sqrt(2.0 / static_cast<double>(d + cfg.ffn_dim)),
                          Rng::mix(lseed, 10));
        }
    }
    return m;
}

static Mat zero_mat_like(const Mat& m) { return Mat(m.rows, m.cols); }

static std::vector<Expert> zero_experts_like(const std::vector<Expert>& src) {
    std::vector<Expert> out(src.size());
    for (size_t i = 0; i < src.size(); ++i) {
        out[i].w1 = zero_mat_like(src[i].w1);
        out[i].w2 = zero_mat_like(src[i].w2);
    }
    return out;
}

GradientSet zero_like(const Model& model) {
    GradientSet g;
    g.cfg = model.cfg;
    g.embed = zero_mat_like(model.embed);
    g.head = zero_mat_like(model.head);
    g.final_gain = zero_mat_like(model.final_gain);
    g.layers.resize(model.layers.size());
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const LayerParams& src = model.layers[l];
        LayerParams& dst = g.layers[l];
        dst.gain_attn = zero_mat_like(src.gain_attn);
        dst.gain_ffn = zero_mat_like(src.gain_ffn);
        dst.w_q = zero_mat_like(src.w_q);
        dst.w_k = zero_mat_like(src.w_k);
        dst.dense_attn = src.dense_attn;
        dst.dense_attn.w_q = zero_mat_like(src.dense_attn.w_q);
        dst.dense_attn.w_k = zero_mat_like(src.dense_attn.w_k);
        dst.dense_attn.w_v = zero_mat_like(src.dense_attn.w_v);
        dst.dense_attn.w_o = zero_mat_like(src.dense_attn.w_o);
        dst.ffn_w1 = zero_mat_like(src.ffn_w1);
        dst.ffn_w2 = zero_mat_like(src.ffn_w2);

        if (src.attn.experts)
            dst.attn.experts =
                std::make_shared<std::vector<Expert>>(zero_experts_like(*src.attn.experts));
        if (src.attn.lora) {
            auto lora = std::make_shared<std::vector<LoraQuery>>(src.attn.lora->size());
            for (size_t i = 0; i < src.attn.lora->size(); ++i) {
                (*lora)[i].a = zero_mat_like((*src.attn.lora)[i].a);
                (*lora)[i].b = zero_mat_like((*src.attn.lora)[i].b);
            }
            dst.attn.lora = lora;
        }
        if (src.attn.fixed)
            dst.attn.fixed =
                std::make_shared<std::vector<Expert>>(zero_experts_like(*src.attn.fixed));
        if (src.attn.router) {
            dst.attn.router = std::make_shared<RouterParams>();
            dst.attn.router->w = zero_mat_like(src.attn.router->w);
        }

        if (src.ffn.experts) {
            dst.ffn.experts = (src.ffn.experts == src.attn.experts)
                                  ? dst.attn.experts
                                  : std::make_shared<std::vector<Expert>>(
                                        zero_experts_like(*src.ffn.experts));
        }
        if (src.ffn.fixed) {
            dst.ffn.fixed = (src.ffn.fixed == src.attn.fixed)
                                ? dst.attn.fixed
                                : std::make_shared<std::vector<Expert>>(
                                      zero_experts_like(*src.ffn.fixed));
        }
        if (src.ffn.router) {
            if (src.ffn.router == src.attn.router) {
                dst.ffn.router = dst.attn.router;
            } else {
                dst.ffn.router = std::make_shared<RouterParams>();
                dst.ffn.router->w = zero_mat_like(src.ffn.router->w);
            }
        }
    }
    return g;
}

std::vector<std::pair<std::string, Mat*>> param_list(Model& model) {
    std::vector<std::pair<std::string, Mat*>> out;
    auto add = [&](std::string name, Mat& m) {
        if (!m.empty()) out.emplace_back(std::move(name), &m);
    };
    add("embed", model.embed);
    add("head", model.head);
    add("final_norm", model.final_gain);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        LayerParams& lp = model.layers[l];
        const std::string p = "layers." + std::to_string(l) + ".";
        add(p + "attn_norm", lp.gain_attn);
        add(p + "ffn_norm", lp.gain_ffn);
        add(p + "attn.w_q", lp.w_q);
        add(p + "attn.w_k", lp.w_k);
        add(p + "attn.dense.w_q", lp.dense_attn.w_q);
        add(p + "attn.dense.w_k", lp.dense_attn.w_k);
        add(p + "attn.dense.w_v", lp.dense_attn.w_v);
        add(p + "attn.dense.w_o", lp.dense_attn.w_o);
        if (lp.attn.experts)
            for (size_t i = 0; i < lp.attn.experts->size(); ++i) {
                add(p + "attn.expert." + std::to_string(i) + ".w1", (*lp.attn.experts)[i].w1);
                add(p + "attn.expert." + std::to_string(i) + ".w2", (*lp.attn.experts)[i].w2);
            }
        if (lp.attn.lora)
            for (size_t i = 0; i < lp.attn.lora->size(); ++i) {
                add(p + "attn.lora." + std::to_string(i) + ".a", (*lp.attn.lora)[i].a);
                add(p + "attn.lora." + std::to_string(i) + ".b", (*lp.attn.lora)[i].b);
            }
        if (lp.attn.fixed)
            for (size_t i = 0; i < lp.attn.fixed->size(); ++i) {
                add(p + "attn.fixed." + std::to_string(i) + ".w1", (*lp.attn.fixed)[i].w1);
                add(p + "attn.fixed." + std::to_string(i) + ".w2", (*lp.attn.fixed)[i].w2);
            }
        if (lp.attn.router) add(p + "attn.router", lp.attn.router->w);
        add(p + "ffn.w1", lp.ffn_w1);
        add(p + "ffn.w2", lp.ffn_w2);
        if (lp.ffn.experts && lp.ffn.experts != lp.attn.experts)
            for (size_t i = 0; i < lp.ffn.experts->size(); ++i) {
                add(p + "ffn.expert." + std::to_string(i) + ".w1", (*lp.ffn.experts)[i].w1);
                add(p + "ffn.expert." + std::to_string(i) + ".w2", (*lp.ffn.experts)[i].w2);
            }
        if (lp.ffn.fixed && lp.ffn.fixed != lp.attn.fixed)
            for (size_t i = 0; i < lp.ffn.fixed->size(); ++i) {
                add(p + "ffn.fixed." + std::to_string(i) + ".w1", (*lp.ffn.fixed)[i].w1);
                add(p + "ffn.fixed." + std::to_string(i) + ".w2", (*lp.ffn.fixed)[i].w2);
            }
        if (lp.ffn.router && lp.ffn.router != lp.attn.router)
            add(p + "ffn.router", lp.ffn.router->w);
    }
    return out;
}

std::vector<std::pair<std::string, const Mat*>> param_list(const Model& model) {
    auto mut = param_list(const_cast<Model&>(model));
    std::vector<std::pair<std::string, const Mat*>> out;
    out.reserve(mut.size());
    for (auto& [name, m] : mut) out.emplace_back(std::move(name), m);
    return out;
}

// ---------------------------------------------------------------------------
// sublayer forward caches

namespace {

// One active expert unit at one token position.
struct AttnUnit {
    int expert = -1;       // routed index, or fixed index when is_fixed
    bool is_fixed = false;
    double gate = 1.0;
    Vec lora_u;  // r (routed premix only)
    Vec q;       // d_k, rope'd
    Vec attn;    // length n, zeros beyond the token position
    Vec mixed;   // d
    Vec z;       // d_v pre-activation
    Vec out;     // d expert output (pre-gate)
};

struct AttnCache {
    Mat x_norm;   // n x d
    Vec inv_rms;  // n
    Mat keys;     // n x d_k (rope'd)
    std::vector<RoutingDecision> routing;          // per token (may be empty)
    std::vector<std::vector<AttnUnit>> units;      // [token][unit]
    Mat delta;    // n x d
};

struct FfnUnit {
    int expert = -1;
    bool is_fixed = false;
    double gate = 1.0;
    Vec z;    // d_v or ffn_dim pre-activation
    Vec out;  // d
};

struct FfnCache {
    Mat x_norm;
    Vec inv_rms;
    std::vector<RoutingDecision> routing;
    std::vector<std::vector<FfnUnit>> units;
    Mat delta;
};

// Post-mixing: per-token expert aggregation then shared-query attention.
struct PostmixCache {
    Mat x_norm;
    Vec inv_rms;
    Mat keys;                                  // n x d_k rope'd
    std::vector<Vec> q;                        // per token, rope'd shared query
    std::vector<Vec> attn;                     // per token causal row
    std::vector<RoutingDecision> routing;
    std::vector<std::vector<FfnUnit>> units;   // expert processing per token
    Mat y;                                     // n x d aggregated expert outputs
    Mat delta;
};

struct DenseCache {
    Mat x_norm;
    Vec inv_rms;
    Mat q_roped, k_roped;  // n x h*dk
    Mat v;                 // n x h*dv
    std::vector<Mat> attn; // per head n x n
    Mat concat;            // n x h*dv
    Mat delta;
};

struct LayerCache {
    Mat input;  // n x d pre-attention hidden state
    AttnCache attn;
    PostmixCache post;
    DenseCache dense;
    Mat mid;  // n x d hidden state after attention residual
    FfnCache ffn;
};

Vec route_token(const RouterParams& router, std::span<const double> x, int k, bool renorm,
                RoutingDecision& out) {
    Vec logits(router.w.rows, 0.0);
    for (int i = 0; i < router.w.rows; ++i) logits[i] = dot(router.w.row(i), x);
    out = route_logits(logits, k, renorm);
    return logits;
}

// Forward one token's routed + fixed expert units for a FFN-style sublayer.
void ffn_token_forward(const SublayerBank& bank, const ModelConfig& cfg,
                       std::span<const double> x, int k, std::vector<FfnUnit>& units,
                       RoutingDecision* decision, std::span<double> out) {
    const Activation act = cfg.expert_activation;
    if (k > 0 && bank.router) {
        RoutingDecision d;
        route_token(*bank.router, x, k, cfg.renormalize_gates, d);
        for (size_t j = 0; j < d.indices.size(); ++j) {
            FfnUnit u;
            u.expert = d.indices[j];
            u.gate = d.gates[j];
            const Expert& e = (*bank.experts)[u.expert];
            u.z = vecmat(x, e.w1);
            Vec a(u.z.size());
            for (size_t i = 0; i < u.z.size(); ++i) a[i] = activation_apply(act, u.z[i]);
            u.out = vecmat(a, e.w2);
            axpy(u.gate, u.out, out);
            units.push_back(std::move(u));
        }
        if (decision) *decision = std::move(d);
    }
    if (bank.fixed) {
        for (size_t f = 0; f < bank.fixed->size(); ++f) {
            FfnUnit u;
            u.expert = static_cast<int>(f);
            u.is_fixed = true;
            const Expert& e = (*bank.fixed)[f];
            u.z = vecmat(x, e.w1);
            Vec a(u.z.size());
            for (size_t i = 0; i < u.z.size(); ++i) a[i] = activation_apply(act, u.z[i]);
            u.out = vecmat(a, e.w2);
            axpy(1.0, u.out, out);
            units.push_back(std::move(u));
        }
    }
}

// Backward through one FFN-style unit: adds param grads and returns dx.
void ffn_unit_backward(const Expert& e, Expert& ge, Activation act, const FfnUnit& u,
                       std::span<const double> x, std::span<const double> dout_scaled,
                       std::span<double> dx) {
    // out = act(z) . w2, z = x . w1
    Vec actz(u.z.size());
    for (size_t i = 0; i < u.z.size(); ++i) actz[i] = activation_apply(act, u.z[i]);
    Vec dactz(u.z.size(), 0.0);
    vecmat_t_acc(dout_scaled, e.w2, dactz);
    outer_acc(actz, dout_scaled, ge.w2);
    Vec dz(u.z.size());
    for (size_t i = 0; i < u.z.size(); ++i) dz[i] = dactz[i] * activation_grad(act, u.z[i]);
    outer_acc(x, dz, ge.w1);
    vecmat_t_acc(dz, e.w1, dx);
}

// Gradient of the selected gates w.r.t. the full probability vector.
// With raw gates (default), dprobs[idx] += dgate. With renormalized gates
// g_j = p_j / S the Jacobian couples the selected set.
void gates_backward(const RoutingDecision& d, std::span<const double> dgates, bool renormalized,
                    std::span<double> dprobs) {
    if (!renormalized) {
        for (size_t j = 0; j < d.indices.size(); ++j) dprobs[d.indices[j]] += dgates[j];
        return;
    }
    double s = 0.0;
    for (int idx : d.indices) s += d.probs[idx];
    if (s <= 0.0) return;
    double inner = 0.0;
    for (size_t j = 0; j < d.indices.size(); ++j) inner += dgates[j] * d.gates[j];
    for (size_t j = 0; j < d.indices.size(); ++j)
        dprobs[d.indices[j]] += (dgates[j] - inner) / s;
}

}  // namespace

// ---------------------------------------------------------------------------
// pre-mixing attention sublayer

static void attn_sublayer_forward(const SublayerBank& bank, const Mat& w_q, const Mat& w_k,
                                  const ModelConfig& cfg, const Mat& x_norm,
                                  const SublayerOptions& opt, AttnCache& cache) {
    const int n = x_norm.rows;
    const int d = x_norm.cols;
    const int dk = cfg.key_dim;
    const Activation act = cfg.expert_activation;

    cache.keys = Mat(n, dk);
    for (int s = 0; s < n; ++s) {
        Vec kp = vecmat(x_norm.row(s), w_k);
        Vec kr = rope(kp, s, cfg.rope_base);
        std::copy(kr.begin(), kr.end(), cache.keys.row(s).begin());
    }

    cache.units.assign(n, {});
    cache.routing.clear();
    cache.delta = Mat(n, d);

    const bool routed = cfg.k_attn > 0 && bank.router != nullptr;
    if (routed) cache.routing.resize(n);

    for (int t = 0; t < n; ++t) {
        auto x = x_norm.row(t);
        auto emit_unit = [&](int expert, bool is_fixed, double gate) {
            AttnUnit u;
            u.expert = expert;
            u.is_fixed = is_fixed;
            u.gate = gate;
            // query: shared projection plus the routed expert's low-rank branch
            Vec qp = vecmat(x, w_q);
            if (!is_fixed && bank.lora) {
                const LoraQuery& l = (*bank.lora)[expert];
                u.lora_u = vecmat(x, l.a);
                vecmat_acc(u.lora_u, l.b, qp);
            }
            u.q = rope(qp, t, cfg.rope_base);
            if (opt.identity_mixing) {
                u.attn.assign(n, 0.0);
                u.attn[t] = 1.0;
            } else {
                Vec a = attn_weights(u.q, cache.keys, dk, t);
                a.resize(n, 0.0);
                u.attn = std::move(a);
            }
            u.mixed = premix(u.attn, x_norm);
            const Expert& e = is_fixed ? (*bank.fixed)[expert] : (*bank.experts)[expert];
            u.z = vecmat(u.mixed, e.w1);
            Vec az(u.z.size());
            for (size_t i = 0; i < u.z.size(); ++i) az[i] = activation_apply(act, u.z[i]);
            u.out = vecmat(az, e.w2);
            axpy(u.gate, u.out, cache.delta.row(t));
            cache.units[t].push_back(std::move(u));
        };

        if (routed) {
            RoutingDecision dec;
            route_token(*bank.router, x, cfg.k_attn, cfg.renormalize_gates, dec);
            for (size_t j = 0; j < dec.indices.size(); ++j)
                emit_unit(dec.indices[j], false, opt.unit_gates ? 1.0 : dec.gates[j]);
            cache.routing[t] = std::move(dec);
        }
        if (bank.fixed)
            for (size_t f = 0; f < bank.fixed->size(); ++f)
                emit_unit(static_cast<int>(f), true, 1.0);
    }
}

// Adds gradients for the sublayer into gb/gwq/gwk and dx_norm; aux_dprobs is
// the per-token balance-loss gradient on the probability vector (nullptr
// when no aux term applies).
static void attn_sublayer_backward(const SublayerBank& bank, SublayerBank& gbank, const Mat& w_q,
                                   const Mat& w_k, Mat& gw_q, Mat& gw_k, const ModelConfig& cfg,
                                   const AttnCache& cache, const Mat& ddelta, Mat& dx_norm,
                                   const Vec* aux_dprobs) {
    const int n = cache.x_norm.rows;
    const int dk = cfg.key_dim;
    const Activation act = cfg.expert_activation;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat dkeys(n, dk);

    for (int t = 0; t < n; ++t) {
        auto x = cache.x_norm.row(t);
        auto dout = ddelta.row(t);
        Vec dgates(cache.routing.empty() ? 0 : cache.routing[t].indices.size(), 0.0);

        for (const AttnUnit& u : cache.units[t]) {
            // gate
            if (!u.is_fixed && !dgates.empty()) {
                // find the slot in the decision (units were emitted in order)
                const auto& idx = cache.routing[t].indices;
                for (size_t j = 0; j < idx.size(); ++j)
                    if (idx[j] == u.expert) {
                        dgates[j] += dot(u.out, dout);
                        break;
                    }
            }
            Vec de(u.out.size());
            for (size_t i = 0; i < de.size(); ++i) de[i] = u.gate * dout[i];

            const Expert& e = u.is_fixed ? (*bank.fixed)[u.expert] : (*bank.experts)[u.expert];
            Expert& ge = u.is_fixed ? (*gbank.fixed)[u.expert] : (*gbank.experts)[u.expert];

            // expert: out = act(z) . w2, z = mixed . w1
            Vec actz(u.z.size());
            for (size_t i = 0; i < u.z.size(); ++i) actz[i] = activation_apply(act, u.z[i]);
            Vec dactz(u.z.size(), 0.0);
            vecmat_t_acc(de, e.w2, dactz);
            outer_acc(actz, de, ge.w2);
            Vec dz(u.z.size());
            for (size_t i = 0; i < u.z.size(); ++i) dz[i] = dactz[i] * activation_grad(act, u.z[i]);
            outer_acc(u.mixed, dz, ge.w1);
            Vec dmixed(cache.x_norm.cols, 0.0);
            vecmat_t_acc(dz, e.w1, dmixed);

            // premix: mixed = sum_s a_s x_norm[s]
            Vec da(n, 0.0);
            for (int s = 0; s <= t; ++s) {
                da[s] = dot(dmixed, cache.x_norm.row(s));
                if (u.attn[s] != 0.0) axpy(u.attn[s], dmixed, dx_norm.row(s));
            }

            // attention softmax + scores
            std::span<const double> arow(u.attn.data(), static_cast<size_t>(t) + 1);
            std::span<const double> darow(da.data(), static_cast<size_t>(t) + 1);
            Vec dscore = softmax_backward(arow, darow);
            Vec dq(dk, 0.0);
            for (int s = 0; s <= t; ++s) {
                const double ds = dscore[s] * scale;
                if (ds == 0.0) continue;
                axpy(ds, cache.keys.row(s), dq);
                axpy(ds, u.q, dkeys.row(s));
            }
            Vec dq_pre = rope_inverse(dq, t, cfg.rope_base);
            outer_acc(x, dq_pre, gw_q);
            vecmat_t_acc(dq_pre, w_q, dx_norm.row(t));
            if (!u.is_fixed && bank.lora) {
                const LoraQuery& l = (*bank.lora)[u.expert];
                LoraQuery& gl = (*gbank.lora)[u.expert];
                outer_acc(u.lora_u, dq_pre, gl.b);
                Vec du(u.lora_u.size(), 0.0);
                vecmat_t_acc(dq_pre, l.b, du);
                outer_acc(x, du, gl.a);
                vecmat_t_acc(du, l.a, dx_norm.row(t));
            }
        }

        // router backward for this token
        if (!cache.routing.empty() && bank.router) {
            const RoutingDecision& dec = cache.routing[t];
            Vec dprobs(dec.probs.size(), 0.0);
            gates_backward(dec, dgates, cfg.renormalize_gates, dprobs);
            if (aux_dprobs)
                for (size_t i = 0; i < dprobs.size(); ++i) dprobs[i] += (*aux_dprobs)[i];
            Vec dlogits = softmax_backward(dec.probs, dprobs);
            RouterParams& gr = *gbank.router;
            for (int i = 0; i < bank.router->w.rows; ++i) {
                if (dlogits[i] == 0.0) continue;
                axpy(dlogits[i], x, gr.w.row(i));
                axpy(dlogits[i], bank.router->w.row(i), dx_norm.row(t));
            }
        }
    }

    // keys: K[s] = rope(x_norm[s] . w_k, s)
    for (int s = 0; s < n; ++s) {
        Vec dk_pre = rope_inverse(dkeys.row(s), s, cfg.rope_base);
        outer_acc(cache.x_norm.row(s), dk_pre, gw_k);
        vecmat_t_acc(dk_pre, w_k, dx_norm.row(s));
    }
}

Mat umoe_att_sublayer(const SublayerBank& bank, const Mat& w_q, const Mat& w_k,
                      const ModelConfig& cfg, const Mat& x_norm, const SublayerOptions& opt) {
    AttnCache cache;
    cache.x_norm = x_norm;
    attn_sublayer_forward(bank, w_q, w_k, cfg, x_norm, opt, cache);
    return cache.delta;
}

// ---------------------------------------------------------------------------
// FFN sublayer

static void ffn_sublayer_forward(const SublayerBank& bank, const ModelConfig& cfg,
                                 const Mat& x_norm, FfnCache& cache) {
    const int n = x_norm.rows;
    cache.delta = Mat(n, x_norm.cols);
    cache.units.assign(n, {});
    const bool routed = cfg.k_ffn > 0 && bank.router != nullptr;
    cache.routing.assign(routed ? n : 0, {});
    for (int t = 0; t < n; ++t)
        ffn_token_forward(bank, cfg, x_norm.row(t), routed ? cfg.k_ffn : 0, cache.units[t],
                          routed ? &cache.routing[t] : nullptr, cache.delta.row(t));
}

static void ffn_sublayer_backward(const SublayerBank& bank, SublayerBank& gbank,
                                  const ModelConfig& cfg, const FfnCache& cache, const Mat& ddelta,
                                  Mat& dx_norm, const Vec* aux_dprobs) {
    const int n = cache.x_norm.rows;
    const Activation act = cfg.expert_activation;
    for (int t = 0; t < n; ++t) {
        auto x = cache.x_norm.row(t);
        auto dout = ddelta.row(t);
        Vec dgates(cache.routing.empty() ? 0 : cache.routing[t].indices.size(), 0.0);
        for (const FfnUnit& u : cache.units[t]) {
            if (!u.is_fixed && !dgates.empty()) {
                const auto& idx = cache.routing[t].indices;
                for (size_t j = 0; j < idx.size(); ++j)
                    if (idx[j] == u.expert) {
                        dgates[j] += dot(u.out, dout);
                        break;
                    }
            }
            Vec de(u.out.size());
            for (size_t i = 0; i < de.size(); ++i) de[i] = u.gate * dout[i];
            const Expert& e = u.is_fixed ? (*bank.fixed)[u.expert] : (*bank.experts)[u.expert];
            Expert& ge = u.is_fixed ? (*gbank.fixed)[u.expert] : (*gbank.experts)[u.expert];
            ffn_unit_backward(e, ge, act, u, x, de, dx_norm.row(t));
        }
        if (!cache.routing.empty() && bank.router) {
            const RoutingDecision& dec = cache.routing[t];
            Vec dprobs(dec.probs.size(), 0.0);
            gates_backward(dec, dgates, cfg.renormalize_gates, dprobs);
            if (aux_dprobs)
                for (size_t i = 0; i < dprobs.size(); ++i) dprobs[i] += (*aux_dprobs)[i];
            Vec dlogits = softmax_backward(dec.probs, dprobs);
            for (int i = 0; i < bank.router->w.rows; ++i) {
                if (dlogits[i] == 0.0) continue;
                axpy(dlogits[i], x, gbank.router->w.row(i));
                axpy(dlogits[i], bank.router->w.row(i), dx_norm.row(t));
            }
        }
    }
}

Mat ffn_moe_sublayer(const SublayerBank& bank, const ModelConfig& cfg, const Mat& x_norm) {
    FfnCache cache;
    cache.x_norm = x_norm;
    ffn_sublayer_forward(bank, cfg, x_norm, cache);
    return cache.delta;
}

// ---------------------------------------------------------------------------
// post-mixing attention sublayer

static void postmix_sublayer_forward(const SublayerBank& bank, const Mat& w_q, const Mat& w_k,
                                     const ModelConfig& cfg, const Mat& x_norm,
                                     PostmixCache& cache) {
    const int n = x_norm.rows;
    const int d = x_norm.cols;
    const int dk = cfg.key_dim;

    cache.units.assign(n, {});
    const bool routed = cfg.k_attn > 0 && bank.router != nullptr;
    cache.routing.assign(routed ? n : 0, {});
    cache.y = Mat(n, d);
    cache.keys = Mat(n, dk);
    cache.q.resize(n);
    cache.attn.resize(n);
    cache.delta = Mat(n, d);

    for (int t = 0; t < n; ++t) {
        ffn_token_forward(bank, cfg, x_norm.row(t), routed ? cfg.k_attn : 0, cache.units[t],
                          routed ? &cache.routing[t] : nullptr, cache.y.row(t));
        Vec kp = vecmat(x_norm.row(t), w_k);
        Vec kr = rope(kp, t, cfg.rope_base);
        std::copy(kr.begin(), kr.end(), cache.keys.row(t).begin());
        Vec qp = vecmat(x_norm.row(t), w_q);
        cache.q[t] = rope(qp, t, cfg.rope_base);
    }
    for (int t = 0; t < n; ++t) {
        Vec a = attn_weights(cache.q[t], cache.keys, dk, t);
        a.resize(n, 0.0);
        Vec mixed = postmix(a, cache.y);
        std::copy(mixed.begin(), mixed.end(), cache.delta.row(t).begin());
        cache.attn[t] = std::move(a);
    }
}

static void postmix_sublayer_backward(const SublayerBank& bank, SublayerBank& gbank,
                                      const Mat& w_q, const Mat& w_k, Mat& gw_q, Mat& gw_k,
                                      const ModelConfig& cfg, const PostmixCache& cache,
                                      const Mat& ddelta, Mat& dx_norm, const Vec* aux_dprobs) {
    const int n = cache.x_norm.rows;
    const int dk = cfg.key_dim;
    const Activation act = cfg.expert_activation;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    Mat dy(n, cache.y.cols);
    Mat dkeys(n, dk);

    // mixing backward: delta[t] = sum_s a_ts y[s]
    for (int t = 0; t < n; ++t) {
        auto dout = ddelta.row(t);
        const Vec& a = cache.attn[t];
        Vec da(t + 1, 0.0);
        for (int s = 0; s <= t; ++s) {
            da[s] = dot(dout, cache.y.row(s));
            if (a[s] != 0.0) axpy(a[s], dout, dy.row(s));
        }
        std::span<const double> arow(a.data(), static_cast<size_t>(t) + 1);
        Vec dscore = softmax_backward(arow, da);
        Vec dq(dk, 0.0);
        for (int s = 0; s <= t; ++s) {
            const double ds = dscore[s] * scale;
            if (ds == 0.0) continue;
            axpy(ds, cache.keys.row(s), dq);
            axpy(ds, cache.q[t], dkeys.row(s));
        }
        Vec dq_pre = rope_inverse(dq, t, cfg.rope_base);
        outer_acc(cache.x_norm.row(t), dq_pre, gw_q);
        vecmat_t_acc(dq_pre, w_q, dx_norm.row(t));
    }

    // expert processing backward (same shape as the FFN sublayer)
    for (int t = 0; t < n; ++t) {
        auto x = cache.x_norm.row(t);
        auto dout = dy.row(t);
        Vec dgates(cache.routing.empty() ? 0 : cache.routing[t].indices.size(), 0.0);
        for (const FfnUnit& u : cache.units[t]) {
            if (!u.is_fixed && !dgates.empty()) {
                const auto& idx = cache.routing[t].indices;
                for (size_t j = 0; j < idx.size(); ++j)
                    if (idx[j] == u.expert) {
                        dgates[j] += dot(u.out, dout);
                        break;
                    }
            }
            Vec de(u.out.size());
            for (size_t i = 0; i < de.size(); ++i) de[i] = u.gate * dout[i];
            const Expert& e = u.is_fixed ? (*bank.fixed)[u.expert] : (*bank.experts)[u.expert];
            Expert& ge = u.is_fixed ? (*gbank.fixed)[u.expert] : (*gbank.experts)[u.expert];
            ffn_unit_backward(e, ge, act, u, x, de, dx_norm.row(t));
        }
        if (!cache.routing.empty() && bank.router) {
            const RoutingDecision& dec = cache.routing[t];
            Vec dprobs(dec.probs.size(), 0.0);
            gates_backward(dec, dgates, cfg.renormalize_gates, dprobs);
            if (aux_dprobs)
                for (size_t i = 0; i < dprobs.size(); ++i) dprobs[i] += (*aux_dprobs)[i];
            Vec dlogits = softmax_backward(dec.probs, dprobs);
            for (int i = 0; i < bank.router->w.rows; ++i) {
                if (dlogits[i] == 0.0) continue;
                axpy(dlogits[i], x, gbank.router->w.row(i));
                axpy(dlogits[i], bank.router->w.row(i), dx_norm.row(t));
            }
        }
    }

    for (int s = 0; s < n; ++s) {
        Vec dk_pre = rope_inverse(dkeys.row(s), s, cfg.rope_base);
        outer_acc(cache.x_norm.row(s), dk_pre, gw_k);
        vecmat_t_acc(dk_pre, w_k, dx_norm.row(s));
    }
}

// ---------------------------------------------------------------------------
// dense attention sublayer

static void dense_sublayer_forward(const DenseAttnParams& p, const Mat& x_norm,
                                   DenseCache& cache) {
    const int n = x_norm.rows;
    const int h = p.n_heads, dk = p.key_dim, dv = p.value_dim;
    cache.q_roped = Mat(n, h * dk);
    cache.k_roped = Mat(n, h * dk);
    cache.v = Mat(n, h * dv);
    for (int t = 0; t < n; ++t) {
        Vec q = vecmat(x_norm.row(t), p.w_q);
        Vec k = vecmat(x_norm.row(t), p.w_k);
        for (int i = 0; i < h; ++i) {
            Vec qh = rope(std::span<const double>(q.data() + i * dk, dk), t, p.rope_base);
            Vec kh = rope(std::span<const double>(k.data() + i * dk, dk), t, p.rope_base);
            std::copy(qh.begin(), qh.end(), cache.q_roped.row(t).begin() + i * dk);
            std::copy(kh.begin(), kh.end(), cache.k_roped.row(t).begin() + i * dk);
        }
        Vec v = vecmat(x_norm.row(t), p.w_v);
        std::copy(v.begin(), v.end(), cache.v.row(t).begin());
    }
    cache.attn.assign(h, Mat(n, n));
    cache.concat = Mat(n, h * dv);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    for (int i = 0; i < h; ++i) {
        for (int t = 0; t < n; ++t) {
            Vec score(t + 1, 0.0);
            for (int s = 0; s <= t; ++s)
                score[s] = dot(std::span<const double>(cache.q_roped.row(t).data() + i * dk, dk),
                               std::span<const double>(cache.k_roped.row(s).data() + i * dk, dk)) *
                           scale;
            softmax_inplace(score);
            for (int s = 0; s <= t; ++s) {
                cache.attn[i].at(t, s) = score[s];
                const double* vs = cache.v.row(s).data() + i * dv;
                double* ct = cache.concat.row(t).data() + i * dv;
                for (int c = 0; c < dv; ++c) ct[c] += score[s] * vs[c];
            }
        }
    }
    cache.delta = Mat(n, x_norm.cols);
    for (int t = 0; t < n; ++t) {
        Vec y = vecmat(cache.concat.row(t), p.w_o);
        std::copy(y.begin(), y.end(), cache.delta.row(t).begin());
    }
}

static void dense_sublayer_backward(const DenseAttnParams& p, DenseAttnParams& gp,
                                    const DenseCache& cache, const Mat& ddelta, Mat& dx_norm) {
    const int n = cache.x_norm.rows;
    const int h = p.n_heads, dk = p.key_dim, dv = p.value_dim;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

    Mat dconcat(n, h * dv), dv_rows(n, h * dv), dq_roped(n, h * dk), dk_roped(n, h * dk);
    for (int t = 0; t < n; ++t) {
        outer_acc(cache.concat.row(t), ddelta.row(t), gp.w_o);
        vecmat_t_acc(ddelta.row(t), p.w_o, dconcat.row(t));
    }
    for (int i = 0; i < h; ++i) {
        for (int t = 0; t < n; ++t) {
            std::span<const double> dc(dconcat.row(t).data() + i * dv, dv);
            Vec da(t + 1, 0.0);
            for (int s = 0; s <= t; ++s) {
                const double a = cache.attn[i].at(t, s);
                da[s] = dot(dc, std::span<const double>(cache.v.row(s).data() + i * dv, dv));
                if (a != 0.0) {
                    double* dvs = dv_rows.row(s).data() + i * dv;
                    for (int c = 0; c < dv; ++c) dvs[c] += a * dc[c];
                }
            }
            Vec arow(t + 1);
            for (int s = 0; s <= t; ++s) arow[s] = cache.attn[i].at(t, s);
            Vec dscore = softmax_backward(arow, da);
            std::span<const double> qh(cache.q_roped.row(t).data() + i * dk, dk);
            for (int s = 0; s <= t; ++s) {
                const double ds = dscore[s] * scale;
                if (ds == 0.0) continue;
                std::span<const double> kh(cache.k_roped.row(s).data() + i * dk, dk);
                double* dqh = dq_roped.row(t).data() + i * dk;
                double* dkh = dk_roped.row(s).data() + i * dk;
                for (int c = 0; c < dk; ++c) {
                    dqh[c] += ds * kh[c];
                    dkh[c] += ds * qh[c];
                }
            }
        }
    }
    for (int t = 0; t < n; ++t) {
        Vec dq_pre(h * dk), dk_pre(h * dk);
        for (int i = 0; i < h; ++i) {
            Vec dq = rope_inverse(std::span<const double>(dq_roped.row(t).data() + i * dk, dk), t,
                                  p.rope_base);
            Vec dkv = rope_inverse(std::span<const double>(dk_roped.row(t).data() + i * dk, dk), t,
                                   p.rope_base);
            std::copy(dq.begin(), dq.end(), dq_pre.begin() + i * dk);
            std::copy(dkv.begin(), dkv.end(), dk_pre.begin() + i * dk);
        }
        outer_acc(cache.x_norm.row(t), dq_pre, gp.w_q);
        vecmat_t_acc(dq_pre, p.w_q, dx_norm.row(t));
        outer_acc(cache.x_norm.row(t), dk_pre, gp.w_k);
        vecmat_t_acc(dk_pre, p.w_k, dx_norm.row(t));
        outer_acc(cache.x_norm.row(t), dv_rows.row(t), gp.w_v);
        vecmat_t_acc(dv_rows.row(t), p.w_v, dx_norm.row(t));
    }
}

// ---------------------------------------------------------------------------
// full model forward/backward

namespace {

struct ModelRun {
    Mat x0;  // n x d embeddings
    std::vector<LayerCache> layers;
    Mat final_norm;  // n x d
    Vec final_inv_rms;
    Mat logits;
};

void check_tokens(const Model& model, std::span<const int32_t> tokens) {
    if (tokens.empty()) fail("InvalidArgument", "token sequence is empty");
    if (static_cast<int>(tokens.size()) > model.cfg.context_len)
        fail("ContextOverflow", "sequence length " + std::to_string(tokens.size()) +
                                    " exceeds context_len " +
                                    std::to_string(model.cfg.context_len));
    for (int32_t t : tokens)
        if (t < 0 || t >= model.cfg.vocab_size)
            fail("TokenOutOfVocab", "token id " + std::to_string(t) + " out of vocabulary");
}

void run_forward(const Model& model, std::span<const int32_t> tokens, ModelRun& run) {
    check_tokens(model, tokens);
    const ModelConfig& cfg = model.cfg;
    const int n = static_cast<int>(tokens.size());
    const int d = cfg.hidden_dim;

    run.x0 = Mat(n, d);
    for (int t = 0; t < n; ++t) {
        auto e = model.embed.row(tokens[t]);
        std::copy(e.begin(), e.end(), run.x0.row(t).begin());
    }

    Mat h = run.x0;
    run.layers.resize(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = model.layers[l];
        LayerCache& lc = run.layers[l];
        lc.input = h;

        Mat x_norm(n, d);
        Vec inv_rms(n);
        for (int t = 0; t < n; ++t)
            inv_rms[t] = rmsnorm_row(h.row(t), lp.gain_attn.row(0), x_norm.row(t));

        const Mat* delta = nullptr;
        if (cfg.attn_variant == AttnVariant::dense_vanilla) {
            lc.dense.x_norm = std::move(x_norm);
            lc.dense.inv_rms = std::move(inv_rms);
            dense_sublayer_forward(lp.dense_attn, lc.dense.x_norm, lc.dense);
            delta = &lc.dense.delta;
        } else if (cfg.attn_variant == AttnVariant::umoe_att_premix) {
            lc.attn.x_norm = std::move(x_norm);
            lc.attn.inv_rms = std::move(inv_rms);
            attn_sublayer_forward(lp.attn, lp.w_q, lp.w_k, cfg, lc.attn.x_norm, {}, lc.attn);
            delta = &lc.attn.delta;
        } else {
            lc.post.x_norm = std::move(x_norm);
            lc.post.inv_rms = std::move(inv_rms);
            postmix_sublayer_forward(lp.attn, lp.w_q, lp.w_k, cfg, lc.post.x_norm, lc.post);
            delta = &lc.post.delta;
        }
        for (int t = 0; t < n; ++t) axpy(1.0, delta->row(t), h.row(t));
        lc.mid = h;

        Mat f_norm(n, d);
        Vec f_inv(n);
        for (int t = 0; t < n; ++t)
            f_inv[t] = rmsnorm_row(h.row(t), lp.gain_ffn.row(0), f_norm.row(t));
        lc.ffn.x_norm = std::move(f_norm);
        lc.ffn.inv_rms = std::move(f_inv);
        if (cfg.ffn_is_moe()) {
            ffn_sublayer_forward(lp.ffn, cfg, lc.ffn.x_norm, lc.ffn);
        } else {
            // dense FFN through the same cache shape (single fixed-style unit)
            lc.ffn.delta = Mat(n, d);
            lc.ffn.units.assign(n, {});
            for (int t = 0; t < n; ++t) {
                FfnUnit u;
                u.expert = -1;
                u.z = vecmat(lc.ffn.x_norm.row(t), lp.ffn_w1);
                Vec a(u.z.size());
                for (size_t i = 0; i < u.z.size(); ++i)
                    a[i] = activation_apply(cfg.expert_activation, u.z[i]);
                u.out = vecmat(a, lp.ffn_w2);
                axpy(1.0, u.out, lc.ffn.delta.row(t));
                lc.ffn.units[t].push_back(std::move(u));
            }
        }
        for (int t = 0; t < n; ++t) axpy(1.0, lc.ffn.delta.row(t), h.row(t));
    }

    run.final_norm = Mat(n, d);
    run.final_inv_rms.resize(n);
    if (cfg.n_layers > 0) {
        for (int t = 0; t < n; ++t)
            run.final_inv_rms[t] =
                rmsnorm_row(h.row(t), model.final_gain.row(0), run.final_norm.row(t));
    } else {
        run.final_norm = h;
    }

    run.logits = Mat(n, static_cast<int>(cfg.vocab_size));
    for (int t = 0; t < n; ++t) {
        Vec lg = vecmat(run.final_norm.row(t), model.head);
        std::copy(lg.begin(), lg.end(), run.logits.row(t).begin());
    }
}

}  // namespace

ForwardTrace model_forward(const Model& model, std::span<const int32_t> tokens,
                           bool capture_attention) {
    ModelRun run;
    run_forward(model, tokens, run);
    ForwardTrace trace;
    trace.logits = std::move(run.logits);
    trace.layers.resize(model.cfg.n_layers);
    for (int l = 0; l < model.cfg.n_layers; ++l) {
        LayerCache& lc = run.layers[l];
        LayerTrace& lt = trace.layers[l];
        if (model.cfg.attn_variant == AttnVariant::umoe_att_premix) {
            lt.attn_routing = std::move(lc.attn.routing);
            if (capture_attention) {
                lt.attn_rows.resize(lc.attn.units.size());
                for (size_t t = 0; t < lc.attn.units.size(); ++t)
                    for (auto& u : lc.attn.units[t]) lt.attn_rows[t].push_back(u.attn);
            }
        } else if (model.cfg.attn_variant == AttnVariant::umoe_att_postmix) {
            lt.attn_routing = std::move(lc.post.routing);
            if (capture_attention) {
                lt.attn_rows.resize(lc.post.attn.size());
                for (size_t t = 0; t < lc.post.attn.size(); ++t)
                    lt.attn_rows[t].push_back(lc.post.attn[t]);
            }
        }
        lt.ffn_routing = std::move(lc.ffn.routing);
    }
    return trace;
}

std::vector<Mat> collect_attn_inputs(const Model& model, std::span<const int32_t> tokens) {
    ModelRun run;
    run_forward(model, tokens, run);
    std::vector<Mat> out;
    out.reserve(run.layers.size());
    for (LayerCache& lc : run.layers) {
        if (model.cfg.attn_variant == AttnVariant::dense_vanilla)
            out.push_back(std::move(lc.dense.x_norm));
        else if (model.cfg.attn_variant == AttnVariant::umoe_att_premix)
            out.push_back(std::move(lc.attn.x_norm));
        else
            out.push_back(std::move(lc.post.x_norm));
    }
    return out;
}

LossBreakdown lm_loss(const ForwardTrace& trace, std::span<const int32_t> targets,
                      const ModelConfig& cfg) {
    const int n = trace.logits.rows;
    if (static_cast<int>(targets.size()) != n)
        fail("LengthMismatch", "targets length does not match token count");
    LossBreakdown lb;
    for (int t = 0; t < n; ++t) {
        Vec p(trace.logits.row(t).begin(), trace.logits.row(t).end());
        softmax_inplace(p);
        const int32_t y = targets[t];
        if (y < 0 || y >= static_cast<int32_t>(p.size()))
            fail("TokenOutOfVocab", "target id out of vocabulary");
        lb.ce -= std::log(std::max(p[y], 1e-300));
    }
    lb.ce /= n;

    double aux_sum = 0.0;
    int aux_count = 0;
    for (const LayerTrace& lt : trace.layers) {
        if (!lt.attn_routing.empty()) {
            aux_sum += balance_loss(lt.attn_routing, cfg.experts_attn());
            ++aux_count;
        }
        if (!lt.ffn_routing.empty()) {
            aux_sum += balance_loss(lt.ffn_routing, cfg.experts_ffn());
            ++aux_count;
        }
    }
    lb.aux = aux_count > 0 ? cfg.balance_loss_coeff * aux_sum / aux_count : 0.0;
    return lb;
}

GradientSet model_backward(const Model& model, std::span<const int32_t> tokens,
                           std::span<const int32_t> targets, LossBreakdown* loss_out) {
    const ModelConfig& cfg = model.cfg;
    const int n = static_cast<int>(tokens.size());
    if (static_cast<int>(targets.size()) != n)
        fail("LengthMismatch", "targets length does not match token count");

    ModelRun run;
    run_forward(model, tokens, run);
    GradientSet g = zero_like(model);

    // count MoE sublayer instances for the aux normalization
    int aux_count = 0;
    for (const LayerCache& lc : run.layers) {
        if (!lc.attn.routing.empty() || !lc.post.routing.empty()) ++aux_count;
        if (!lc.ffn.routing.empty()) ++aux_count;
    }

    LossBreakdown lb;

    // cross-entropy backward
    Mat dfinal_norm(n, cfg.hidden_dim);
    for (int t = 0; t < n; ++t) {
        Vec p(run.logits.row(t).begin(), run.logits.row(t).end());
        softmax_inplace(p);
        const int32_t y = targets[t];
        if (y < 0 || y >= static_cast<int32_t>(p.size()))
            fail("TokenOutOfVocab", "target id out of vocabulary");
        lb.ce -= std::log(std::max(p[y], 1e-300));
        p[y] -= 1.0;
        for (double& v : p) v /= n;
        // logits = final_norm . head
        outer_acc(run.final_norm.row(t), p, g.head);
        vecmat_t_acc(p, model.head, dfinal_norm.row(t));
    }
    lb.ce /= n;

    // final norm backward
    Mat dh(n, cfg.hidden_dim);
    if (cfg.n_layers > 0) {
        // reconstruct the final pre-norm hidden state from the last layer
        const Mat& last = run.layers.back().mid;
        Mat final_pre(n, cfg.hidden_dim);
        for (int t = 0; t < n; ++t) {
            std::copy(last.row(t).begin(), last.row(t).end(), final_pre.row(t).begin());
            axpy(1.0, run.layers.back().ffn.delta.row(t), final_pre.row(t));
        }
        for (int t = 0; t < n; ++t)
            rmsnorm_row_backward(final_pre.row(t), model.final_gain.row(0), run.final_inv_rms[t],
                                 dfinal_norm.row(t), dh.row(t), g.final_gain.row(0));
    } else {
        dh = std::move(dfinal_norm);
    }

    const double aux_scale_per_sublayer =
        aux_count > 0 ? cfg.balance_loss_coeff / aux_count : 0.0;

    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerParams& lp = model.layers[l];
        LayerParams& gl = g.layers[l];
        LayerCache& lc = run.layers[l];

        // ffn sublayer: h_out = mid + delta(norm(mid))
        Mat dx_norm(n, cfg.hidden_dim);
        if (cfg.ffn_is_moe()) {
            const Vec* auxg = nullptr;
            Vec auxvec;
            if (!lc.ffn.routing.empty()) {
                lb.aux += balance_loss(lc.ffn.routing, cfg.experts_ffn());
                auxvec = balance_loss_prob_grad(lc.ffn.routing, cfg.experts_ffn());
                for (double& v : auxvec) v *= aux_scale_per_sublayer;
                auxg = &auxvec;
            }
            ffn_sublayer_backward(lp.ffn, gl.ffn, cfg, lc.ffn, dh, dx_norm, auxg);
        } else {
            for (int t = 0; t < n; ++t) {
                const FfnUnit& u = lc.ffn.units[t][0];
                Vec actz(u.z.size());
                for (size_t i = 0; i < u.z.size(); ++i)
                    actz[i] = activation_apply(cfg.expert_activation, u.z[i]);
                Vec dactz(u.z.size(), 0.0);
                vecmat_t_acc(dh.row(t), lp.ffn_w2, dactz);
                outer_acc(actz, dh.row(t), gl.ffn_w2);
                Vec dz(u.z.size());
                for (size_t i = 0; i < u.z.size(); ++i)
                    dz[i] = dactz[i] * activation_grad(cfg.expert_activation, u.z[i]);
                outer_acc(lc.ffn.x_norm.row(t), dz, gl.ffn_w1);
                vecmat_t_acc(dz, lp.ffn_w1, dx_norm.row(t));
            }
        }
        // norm backward into mid (residual passes dh through unchanged)
        for (int t = 0; t < n; ++t)
            rmsnorm_row_backward(lc.mid.row(t), lp.gain_ffn.row(0), lc.ffn.inv_rms[t],
                                 dx_norm.row(t), dh.row(t), gl.gain_ffn.row(0));

        // attention sublayer
        Mat dx_norm_a(n, cfg.hidden_dim);
        if (cfg.attn_variant == AttnVariant::dense_vanilla) {
            dense_sublayer_backward(lp.dense_attn, gl.dense_attn, lc.dense, dh, dx_norm_a);
            for (int t = 0; t < n; ++t)
                rmsnorm_row_backward(lc.input.row(t), lp.gain_attn.row(0), lc.dense.inv_rms[t],
                                     dx_norm_a.row(t), dh.row(t), gl.gain_attn.row(0));
        } else if (cfg.attn_variant == AttnVariant::umoe_att_premix) {
            const Vec* auxg = nullptr;
            Vec auxvec;
            if (!lc.attn.routing.empty()) {
                lb.aux += balance_loss(lc.attn.routing, cfg.experts_attn());
                auxvec = balance_loss_prob_grad(lc.attn.routing, cfg.experts_attn());
                for (double& v : auxvec) v *= aux_scale_per_sublayer;
                auxg = &auxvec;
            }
            attn_sublayer_backward(lp.attn, gl.attn, lp.w_q, lp.w_k, gl.w_q, gl.w_k, cfg, lc.attn,
                                   dh, dx_norm_a, auxg);
            for (int t = 0; t < n; ++t)
                rmsnorm_row_backward(lc.input.row(t), lp.gain_attn.row(0), lc.attn.inv_rms[t],
                                     dx_norm_a.row(t), dh.row(t), gl.gain_attn.row(0));
        } else {
            const Vec* auxg = nullptr;
            Vec auxvec;
            if (!lc.post.routing.empty()) {
                lb.aux += balance_loss(lc.post.routing, cfg.experts_attn());
                auxvec = balance_loss_prob_grad(lc.post.routing, cfg.experts_attn());
                for (double& v : auxvec) v *= aux_scale_per_sublayer;
                auxg = &auxvec;
            }
            postmix_sublayer_backward(lp.attn, gl.attn, lp.w_q, lp.w_k, gl.w_q, gl.w_k, cfg,
                                      lc.post, dh, dx_norm_a, auxg);
            for (int t = 0; t < n; ++t)
                rmsnorm_row_backward(lc.input.row(t), lp.gain_attn.row(0), lc.post.inv_rms[t],
                                     dx_norm_a.row(t), dh.row(t), gl.gain_attn.row(0));
        }
    }

    // embeddings
    for (int t = 0; t < n; ++t) axpy(1.0, dh.row(t), g.embed.row(tokens[t]));

    if (aux_count > 0) lb.aux = cfg.balance_loss_coeff * lb.aux / aux_count;
    if (loss_out) *loss_out = lb;
    return g;
}

// ---------------------------------------------------------------------------
// incremental decode

DecodeState make_decode_state(const Model& model) {
    const ModelConfig& cfg = model.cfg;
    DecodeState st;
    st.layers.reserve(cfg.n_layers);
    for (int l = 0; l < cfg.n_layers; ++l) {
        int key_w = 0, mix_w = 0;
        if (cfg.attn_variant == AttnVariant::dense_vanilla) {
            key_w = cfg.n_heads * cfg.key_dim;
            mix_w = cfg.n_heads * cfg.value_dim;
        } else {
            key_w = cfg.key_dim;
            mix_w = cfg.hidden_dim;  // normed hidden (premix) or expert output (postmix)
        }
        st.layers.emplace_back(cfg.context_len, key_w, mix_w);
    }
    return st;
}

Vec decode_step(const Model& model, DecodeState& state, int32_t token) {
    const ModelConfig& cfg = model.cfg;
    if (token < 0 || token >= cfg.vocab_size)
        fail("TokenOutOfVocab", "token id " + std::to_string(token) + " out of vocabulary");
    if (state.t >= cfg.context_len) fail("ContextOverflow", "decode past context_len");

    const int d = cfg.hidden_dim;
    const int pos = state.t;
    Vec h(model.embed.row(token).begin(), model.embed.row(token).end());

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerParams& lp = model.layers[l];
        MixState& mix = state.layers[l];
        Vec x_norm(d);
        rmsnorm_row(h, lp.gain_attn.row(0), x_norm);

        Vec delta(d, 0.0);
        if (cfg.attn_variant == AttnVariant::dense_vanilla) {
            const DenseAttnParams& p = lp.dense_attn;
            const int hh = p.n_heads, dk = p.key_dim, dv = p.value_dim;
            Vec q = vecmat(x_norm, p.w_q);
            Vec k = vecmat(x_norm, p.w_k);
            Vec key_row(hh * dk);
            for (int i = 0; i < hh; ++i) {
                Vec kh = rope(std::span<const double>(k.data() + i * dk, dk), pos, p.rope_base);
                std::copy(kh.begin(), kh.end(), key_row.begin() + i * dk);
            }
            Vec v = vecmat(x_norm, p.w_v);
            cache_step(mix, key_row, v);
            Vec concat(hh * dv, 0.0);
            const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
            for (int i = 0; i < hh; ++i) {
                Vec qh = rope(std::span<const double>(q.data() + i * dk, dk), pos, p.rope_base);
                Vec score(mix.t, 0.0);
                for (int s = 0; s < mix.t; ++s)
                    score[s] = dot(qh, std::span<const double>(mix.keys.row(s).data() + i * dk,
                                                               static_cast<size_t>(dk))) *
                               scale;
                softmax_inplace(score);
                for (int s = 0; s < mix.t; ++s) {
                    const double* vs = mix.hidden.row(s).data() + i * dv;
                    for (int c = 0; c < dv; ++c) concat[i * dv + c] += score[s] * vs[c];
                }
            }
            Vec y = vecmat(concat, p.w_o);
            axpy(1.0, y, delta);
        } else if (cfg.attn_variant == AttnVariant::umoe_att_premix) {
            Vec kp = vecmat(x_norm, lp.w_k);
            Vec kr = rope(kp, pos, cfg.rope_base);
            cache_step(mix, kr, x_norm);
            auto run_expert = [&](const Expert& e, std::span<const double> q_pre, double gate) {
                Vec q = rope(q_pre, pos, cfg.rope_base);
                Vec a = attn_weights(q, mix.keys, cfg.key_dim, mix.t - 1);
                // only rows 0..t are valid in the cache
                Vec mixed(d, 0.0);
                for (int s = 0; s < mix.t; ++s)
                    if (a[s] != 0.0) axpy(a[s], mix.hidden.row(s), mixed);
                Vec out = expert_forward(e, mixed, cfg.expert_activation);
                axpy(gate, out, delta);
            };
            if (cfg.k_attn > 0 && lp.attn.router) {
                RoutingDecision dec;
                route_token(*lp.attn.router, x_norm, cfg.k_attn, cfg.renormalize_gates, dec);
                for (size_t j = 0; j < dec.indices.size(); ++j) {
                    Vec qp = vecmat(x_norm, lp.w_q);
                    if (lp.attn.lora) {
                        const LoraQuery& lr = (*lp.attn.lora)[dec.indices[j]];
                        Vec u = vecmat(x_norm, lr.a);
                        vecmat_acc(u, lr.b, qp);
                    }
                    run_expert((*lp.attn.experts)[dec.indices[j]], qp, dec.gates[j]);
                }
            }
            if (lp.attn.fixed) {
                Vec qp = vecmat(x_norm, lp.w_q);
                for (const Expert& e : *lp.attn.fixed) run_expert(e, qp, 1.0);
            }
        } else {
            // postmix: cache this token's aggregated expert output
            Vec kp = vecmat(x_norm, lp.w_k);
            Vec kr = rope(kp, pos, cfg.rope_base);
            Vec y(d, 0.0);
            std::vector<FfnUnit> units;
            ffn_token_forward(lp.attn, cfg, x_norm,
                              (cfg.k_attn > 0 && lp.attn.router) ? cfg.k_attn : 0, units, nullptr,
                              y);
            cache_step(mix, kr, y);
            Vec qp = vecmat(x_norm, lp.w_q);
            Vec q = rope(qp, pos, cfg.rope_base);
            Vec a = attn_weights(q, mix.keys, cfg.key_dim, mix.t - 1);
            for (int s = 0; s < mix.t; ++s)
                if (a[s] != 0.0) axpy(a[s], mix.hidden.row(s), delta);
        }
        axpy(1.0, delta, h);

        Vec f_norm(d);
        rmsnorm_row(h, lp.gain_ffn.row(0), f_norm);
        Vec fdelta(d, 0.0);
        if (cfg.ffn_is_moe()) {
            std::vector<FfnUnit> units;
            ffn_token_forward(lp.ffn, cfg, f_norm, (cfg.k_ffn > 0 && lp.ffn.router) ? cfg.k_ffn : 0,
                              units, nullptr, fdelta);
        } else {
            Vec z = vecmat(f_norm, lp.ffn_w1);
            for (double& v : z) v = activation_apply(cfg.expert_activation, v);
            Vec out = vecmat(z, lp.ffn_w2);
            axpy(1.0, out, fdelta);
        }
        axpy(1.0, fdelta, h);
    }
    ++state.t;

    Vec f(d);
    if (cfg.n_layers > 0) {
        rmsnorm_row(h, model.final_gain.row(0), f);
    } else {
        f = h;
    }
    return vecmat(f, model.head);
}

// ---------------------------------------------------------------------------
// optimizer

AdamState make_adam_state(const Model& model) {
    AdamState st;
    st.m = zero_like(model);
    st.v = zero_like(model);
    return st;
}

void adam_step(Model& model, const GradientSet& grads, AdamState& state, const AdamOptions& opt) {
    ++state.step;
    auto params = param_list(model);
    auto gs = param_list(const_cast<GradientSet&>(grads));
    auto ms = param_list(state.m);
    auto vs = param_list(state.v);
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (size_t p = 0; p < params.size(); ++p) {
        Mat& w = *params[p].second;
        const Mat& gmat = *gs[p].second;
        Mat& m = *ms[p].second;
        Mat& v = *vs[p].second;
        for (size_t i = 0; i < w.data.size(); ++i) {
            const double grad = gmat.data[i];
            m.data[i] = opt.beta1 * m.data[i] + (1.0 - opt.beta1) * grad;
            v.data[i] = opt.beta2 * v.data[i] + (1.0 - opt.beta2) * grad * grad;
            const double mhat = m.data[i] / bc1;
            const double vhat = v.data[i] / bc2;
            w.data[i] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

}  // namespace umoe
