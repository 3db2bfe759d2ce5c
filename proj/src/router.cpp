#include "umoe/router.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace umoe {

RoutingDecision route_logits(std::span<const double> logits, int k, bool renormalize_gates) {
    const int n = static_cast<int>(logits.size());
    if (k < 1) fail("InvalidArgument", "k must be positive");
    if (k > n) fail("KTooLarge", "k=" + std::to_string(k) + " exceeds N=" + std::to_string(n));
    if (!all_finite(logits)) fail("NonFiniteInput", "router logits are not finite");

    RoutingDecision d;
    d.probs.assign(logits.begin(), logits.end());
    softmax_inplace(d.probs);

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (d.probs[a] != d.probs[b]) return d.probs[a] > d.probs[b];
        return a < b;
    });

    d.indices.assign(order.begin(), order.begin() + k);
    d.gates.resize(k);
    for (int j = 0; j < k; ++j) d.gates[j] = d.probs[d.indices[j]];
    if (renormalize_gates) {
        double s = std::accumulate(d.gates.begin(), d.gates.end(), 0.0);
        if (s > 0.0)
            for (double& g : d.gates) g /= s;
    }
    return d;
}

RoutingDecision route(const RouterParams& params, std::span<const double> x, int k,
                      bool renormalize_gates) {
    if (!all_finite(x)) fail("NonFiniteInput", "router input is not finite");
    // w is N x d; logits_i = <w.row(i), x> (= W_r * x).
    Vec logits(params.w.rows, 0.0);
    for (int i = 0; i < params.w.rows; ++i) logits[i] = dot(params.w.row(i), x);
    return route_logits(logits, k, renormalize_gates);
}

double balance_loss(const std::vector<RoutingDecision>& decisions, int n_experts) {
    if (decisions.empty()) fail("EmptyBatch", "balance_loss needs at least one decision");
    const double n_tokens = static_cast<double>(decisions.size());
    Vec hit(n_experts, 0.0), pmean(n_experts, 0.0);
    for (const auto& d : decisions) {
        const double k = static_cast<double>(d.indices.size());
        for (int idx : d.indices) hit[idx] += 1.0 / k;
        for (int i = 0; i < n_experts; ++i) pmean[i] += d.probs[i];
    }
    double loss = 0.0;
    for (int i = 0; i < n_experts; ++i) loss += (hit[i] / n_tokens) * (pmean[i] / n_tokens);
    return loss * n_experts;
}

Vec balance_loss_prob_grad(const std::vector<RoutingDecision>& decisions, int n_experts) {
    if (decisions.empty()) fail("EmptyBatch", "balance_loss needs at least one decision");
    const double n_tokens = static_cast<double>(decisions.size());
    Vec f(n_experts, 0.0);
    for (const auto& d : decisions) {
        const double k = static_cast<double>(d.indices.size());
        for (int idx : d.indices) f[idx] += 1.0 / (k * n_tokens);
    }
    // loss = N * sum_i f_i * mean_t probs_t[i]; d/dprobs_t[i] = N * f_i / T
    Vec g(n_experts, 0.0);
    for (int i = 0; i < n_experts; ++i) g[i] = n_experts * f[i] / n_tokens;
    return g;
}

Vec softmax_backward(std::span<const double> probs, std::span<const double> dprobs) {
    const double inner = dot(probs, dprobs);
    Vec dlogits(probs.size());
    for (size_t i = 0; i < probs.size(); ++i) dlogits[i] = probs[i] * (dprobs[i] - inner);
    return dlogits;
}

}  // namespace umoe
