#pragma once

#include <span>
#include <vector>

#include "umoe/types.hpp"

namespace umoe {

struct RouterParams {
    Mat w;  // N x d
};

// Result of routing one token. indices are sorted by descending probability
// with ascending-index tie-break; gates are the raw softmax probabilities of
// the selected experts (no renormalization over the set unless asked for).
struct RoutingDecision {
    std::vector<int> indices;
    Vec gates;
    Vec probs;  // full length-N distribution
};

RoutingDecision route(const RouterParams& params, std::span<const double> x, int k,
                      bool renormalize_gates = false);

// Same selection applied to precomputed logits (used by the backward pass
// and by tests that construct logits directly).
RoutingDecision route_logits(std::span<const double> logits, int k,
                             bool renormalize_gates = false);

// Switch-Transformer load balance: N * sum_i f_i * P_i, where f_i is the
// fraction of tokens whose top-k set contains expert i divided by k and P_i
// is the mean routed probability of expert i. The coefficient alpha is the
// caller's business.
double balance_loss(const std::vector<RoutingDecision>& decisions, int n_experts);

// d(balance_loss)/d(probs) per token, with the count term f_i held constant
// (straight-through, as in Switch). Same shape as probs.
Vec balance_loss_prob_grad(const std::vector<RoutingDecision>& decisions, int n_experts);

// Pull a gradient on the probability vector back through the softmax:
// dlogits_j = p_j * (dprobs_j - sum_i dprobs_i * p_i).
Vec softmax_backward(std::span<const double> probs, std::span<const double> dprobs);

}  // namespace umoe
