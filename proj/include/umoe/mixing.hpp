#pragma once

#include <span>
#include <vector>

#include "umoe/types.hpp"

namespace umoe {

// Pairwise rotary embedding: dimensions (2j, 2j+1) rotate by
// position / base^(2j / d). Norm preserving; applied to queries and keys
// only, never to the hidden states that double as values in pre-mixing.
Vec rope(std::span<const double> x, int64_t position, double base);
// Transpose of the rotation (rotate by -theta); the backward map.
Vec rope_inverse(std::span<const double> x, int64_t position, double base);

// Softmax of q . K_t / sqrt(d_k) over key rows 0..causal_limit; rows beyond
// causal_limit get exact zeros. keys holds one key per row.
Vec attn_weights(std::span<const double> q, const Mat& keys, int key_dim, int causal_limit);

struct DenseAttnParams {
    Mat w_q;  // d x (h * d_k)
    Mat w_k;  // d x (h * d_k)
    Mat w_v;  // d x (h * d_v)
    Mat w_o;  // (h * d_v) x d
    int n_heads = 0;
    int key_dim = 0;    // per head
    int value_dim = 0;  // per head
    double rope_base = 10000.0;
};

// Causal multi-head attention with rope on q/k. Reference formulation:
// per-head weighted value sums, concatenated, projected by W_o.
Mat vanilla_mha(const DenseAttnParams& params, const Mat& x);

// Per-head causal attention rows for vanilla_mha's inputs; a[h] is n x n,
// row-stochastic over columns <= row index. Shared by the reformulation
// oracles so all routes see identical mixing weights.
std::vector<Mat> mha_attn_rows(const DenseAttnParams& params, const Mat& x);

// Weighted sum of token hidden states: sum_j a[j] * x.row(j). Pre-mixing
// aggregates raw hidden states (output lives in model dim d).
Vec premix(std::span<const double> a, const Mat& x);

// Same aggregation applied to per-token expert outputs.
Vec postmix(std::span<const double> a, const Mat& y);

// Per-sequence incremental-decode cache: one key row and one mixable row
// (hidden state, expert output, or per-head values depending on variant)
// per past token.
struct MixState {
    Mat keys;    // capacity x key width, rows 0..t-1 valid
    Mat hidden;  // capacity x mix width
    int t = 0;
    int capacity = 0;

    MixState() = default;
    MixState(int cap, int key_width, int mix_width)
        : keys(cap, key_width), hidden(cap, mix_width), capacity(cap) {}
};

// Appends one (key, hidden) row; throws ContextOverflow at capacity.
void cache_step(MixState& state, std::span<const double> new_key,
                std::span<const double> new_hidden);

}  // namespace umoe
