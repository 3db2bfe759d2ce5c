#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "umoe/config.hpp"
#include "umoe/experts.hpp"
#include "umoe/mixing.hpp"
#include "umoe/router.hpp"
#include "umoe/types.hpp"

namespace umoe {

// One MoE sublayer's parameter view. Components are shared_ptrs so the
// share_* config flags produce real aliasing: the attention and FFN
// sublayers of a layer can point at the same expert list, fixed experts,
// or router.
struct SublayerBank {
    std::shared_ptr<std::vector<Expert>> experts;
    std::shared_ptr<std::vector<LoraQuery>> lora;  // premix attention only
    std::shared_ptr<std::vector<Expert>> fixed;
    std::shared_ptr<RouterParams> router;  // absent when k == 0
};

struct LayerParams {
    // attention sublayer: either dense or MoE members are populated
    SublayerBank attn;
    Mat w_q, w_k;  // shared projections for MoE attention, d x d_k
    DenseAttnParams dense_attn;
    // ffn sublayer
    SublayerBank ffn;
    Mat ffn_w1, ffn_w2;  // dense FFN
    Mat gain_attn, gain_ffn;  // 1 x d rms gains
};

struct Model {
    ModelConfig cfg;
    Mat embed;       // vocab x d
    Mat head;        // d x vocab
    Mat final_gain;  // 1 x d
    std::vector<LayerParams> layers;
};

// Gradients mirror the model storage, including its aliasing topology, so
// shared parameters accumulate into a single tensor.
using GradientSet = Model;

Model init_model(const ModelConfig& cfg, uint64_t seed);
GradientSet zero_like(const Model& model);

// Canonical (name, tensor) enumeration; aliased tensors appear exactly once.
// Order is the checkpoint order.
std::vector<std::pair<std::string, Mat*>> param_list(Model& model);
std::vector<std::pair<std::string, const Mat*>> param_list(const Model& model);

struct SublayerOptions {
    bool identity_mixing = false;  // force exact one-hot self-attention rows
    bool unit_gates = false;       // force gate weight 1 on selected experts
};

// Sublayer forwards over pre-normed inputs; they return the residual delta
// (the caller owns the skip connection).
Mat umoe_att_sublayer(const SublayerBank& bank, const Mat& w_q, const Mat& w_k,
                      const ModelConfig& cfg, const Mat& x_norm,
                      const SublayerOptions& opt = {});
Mat ffn_moe_sublayer(const SublayerBank& bank, const ModelConfig& cfg, const Mat& x_norm);

struct LayerTrace {
    std::vector<RoutingDecision> attn_routing;  // per token; empty unless routed MoE attention
    std::vector<RoutingDecision> ffn_routing;
    // per token, per active attention unit: causal attention row (length n);
    // populated when model_forward is asked to capture attention
    std::vector<std::vector<Vec>> attn_rows;
};

struct ForwardTrace {
    std::vector<LayerTrace> layers;
    Mat logits;  // n x vocab
};

ForwardTrace model_forward(const Model& model, std::span<const int32_t> tokens,
                           bool capture_attention = false);

// Pre-attention rms-normed hidden states per layer (analysis support).
std::vector<Mat> collect_attn_inputs(const Model& model, std::span<const int32_t> tokens);

struct LossBreakdown {
    double ce = 0.0;
    double aux = 0.0;
    double total() const { return ce + aux; }
};

// Mean next-token cross-entropy over positions plus
// alpha * mean-over-MoE-sublayers balance loss.
LossBreakdown lm_loss(const ForwardTrace& trace, std::span<const int32_t> targets,
                      const ModelConfig& cfg);

// Gradients of ce + aux w.r.t. every parameter.
GradientSet model_backward(const Model& model, std::span<const int32_t> tokens,
                           std::span<const int32_t> targets,
                           LossBreakdown* loss_out = nullptr);

// Incremental decode state: per layer one MixState (keys plus the rows the
// variant mixes: normed hidden for premix, expert outputs for postmix,
// per-head values for dense).
struct DecodeState {
    std::vector<MixState> layers;
    int t = 0;
};

DecodeState make_decode_state(const Model& model);
// Feeds one token, returns the next-token logits row.
Vec decode_step(const Model& model, DecodeState& state, int32_t token);

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    GradientSet m, v;
    int64_t step = 0;
};

AdamState make_adam_state(const Model& model);
void adam_step(Model& model, const GradientSet& grads, AdamState& state, const AdamOptions& opt);

// rms norm over one row; eps 1e-6. Returns the normalization factor used
// (needed by the backward pass).
double rmsnorm_row(std::span<const double> x, std::span<const double> gain, std::span<double> out);

}  // namespace umoe
