#include "umoe/experts.hpp"

#include <cmath>

#include "umoe/rng.hpp"

namespace umoe {

double activation_apply(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::gelu: return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475));
        case Activation::none: return x;
    }
    return x;
}

double activation_grad(Activation act, double x) {
    switch (act) {
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::gelu: {
            const double cdf = 0.5 * (1.0 + std::erf(x * 0.7071067811865475));
            const double pdf = std::exp(-0.5 * x * x) * 0.3989422804014327;
            return cdf + x * pdf;
        }
        case Activation::none: return 1.0;
    }
    return 1.0;
}

Vec expert_forward(const Expert& e, std::span<const double> x, Activation act) {
    Vec z = vecmat(x, e.w1);
    for (double& v : z) v = activation_apply(act, v);
    return vecmat(z, e.w2);
}

Vec expert_query(const ExpertBank& bank, int expert, std::span<const double> x) {
    if (expert < 0 || expert >= static_cast<int>(bank.experts.size()))
        fail("IndexOutOfRange", "expert id " + std::to_string(expert) + " out of range");
    Vec q = vecmat(x, bank.w_q);
    if (expert < static_cast<int>(bank.lora.size())) {
        const LoraQuery& l = bank.lora[expert];
        Vec u = vecmat(x, l.a);
        vecmat_acc(u, l.b, q);
    }
    return q;
}

void fill_gaussian(Mat& m, double stddev, uint64_t seed) {
    Rng rng(seed);
    for (double& v : m.data) v = stddev * rng.next_gaussian();
}

ExpertBank init_bank(const ModelConfig& cfg, BankRole role, uint64_t seed) {
    const int d = cfg.hidden_dim, dv = cfg.value_dim, dk = cfg.key_dim, r = cfg.lora_rank;
    const double expert_std = std::sqrt(2.0 / static_cast<double>(d + dv));
    const double proj_std = std::sqrt(2.0 / static_cast<double>(d + dk));
    const double lora_std = 1.0 / std::sqrt(static_cast<double>(d));

    ExpertBank bank;
    const int n = role == BankRole::attention ? cfg.experts_attn() : cfg.experts_ffn();
    const bool premix_attn =
        role == BankRole::attention && cfg.attn_variant == AttnVariant::umoe_att_premix;

    uint64_t salt = 0;
    auto next_seed = [&] { return Rng::mix(seed, salt++); };

    bank.experts.resize(n);
    for (auto& e : bank.experts) {
        e.w1 = Mat(d, dv);
        e.w2 = Mat(dv, d);
        fill_gaussian(e.w1, expert_std, next_seed());
        fill_gaussian(e.w2, expert_std, next_seed());
    }
    if (premix_attn) {
        bank.lora.resize(n);
        for (auto& l : bank.lora) {
            l.a = Mat(d, r);
            l.b = Mat(r, dk);  // zero: per-expert queries coincide at init
            fill_gaussian(l.a, lora_std, next_seed());
        }
    }
    bank.fixed.resize(cfg.n_fixed_experts);
    for (auto& e : bank.fixed) {
        e.w1 = Mat(d, dv);
        e.w2 = Mat(dv, d);
        fill_gaussian(e.w1, expert_std, next_seed());
        fill_gaussian(e.w2, expert_std, next_seed());
    }
    if (role == BankRole::attention && cfg.attn_is_moe()) {
        bank.w_q = Mat(d, dk);
        bank.w_k = Mat(d, dk);
        fill_gaussian(bank.w_q, proj_std, next_seed());
        fill_gaussian(bank.w_k, proj_std, next_seed());
    }
    return bank;
}

int64_t bank_param_count(const ExpertBank& bank) {
    int64_t n = 0;
    for (const auto& e : bank.experts) n += static_cast<int64_t>(e.w1.size()) + e.w2.size();
    for (const auto& l : bank.lora) n += static_cast<int64_t>(l.a.size()) + l.b.size();
    for (const auto& e : bank.fixed) n += static_cast<int64_t>(e.w1.size()) + e.w2.size();
    n += static_cast<int64_t>(bank.w_q.size()) + bank.w_k.size();
    return n;
}

}  // namespace umoe
