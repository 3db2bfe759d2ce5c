#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "umoe/config.hpp"
#include "umoe/types.hpp"

namespace umoe {

// Two-layer expert: y = act(x . W1) . W2. With Activation::none this is the
// exact linear expert x . (W1 W2) of the pre-mixing reformulation.
struct Expert {
    Mat w1;  // d x d_v
    Mat w2;  // d_v x d
};

struct LoraQuery {
    Mat a;  // d x r
    Mat b;  // r x d_k
};

// Shared expert bank for one MoE sublayer family: N routed experts with
// per-expert low-rank query pairs, n_fixed always-on experts, and the
// shared query/key projections.
struct ExpertBank {
    std::vector<Expert> experts;
    std::vector<LoraQuery> lora;
    std::vector<Expert> fixed;
    Mat w_q;  // d x d_k
    Mat w_k;  // d x d_k
};

double activation_apply(Activation act, double x);
double activation_grad(Activation act, double x);

Vec expert_forward(const Expert& e, std::span<const double> x, Activation act);

// q_i = x . W_q + x . W_a^i . W_b^i
Vec expert_query(const ExpertBank& bank, int expert, std::span<const double> x);

enum class BankRole { attention, ffn };

// Deterministic init: W1/W2 scaled normal with variance 2/(d + d_v); W_a
// scaled normal, W_b zero so all per-expert queries start at the shared
// query. FFN banks carry no LoRA or projection matrices.
ExpertBank init_bank(const ModelConfig& cfg, BankRole role, uint64_t seed);

int64_t bank_param_count(const ExpertBank& bank);

void fill_gaussian(Mat& m, double stddev, uint64_t seed);

}  // namespace umoe
