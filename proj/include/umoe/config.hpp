#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>

#include "umoe/types.hpp"

namespace umoe {

enum class AttnVariant { dense_vanilla, umoe_att_premix, umoe_att_postmix };
enum class FfnVariant { dense, ffn_moe };
enum class Activation { gelu, relu, none };

// Full architectural hyperparameter record. Dimension semantics:
//   - dense_vanilla: key_dim / value_dim are per-head; total widths are
//     n_heads * key_dim and n_heads * value_dim.
//   - MoE attention: key_dim is the single shared query/key width,
//     value_dim is the expert intermediate size.
//   - n_experts counts routed experts; fixed (always-on) experts are
//     n_fixed_experts per MoE sublayer on top of that.
struct ModelConfig {
    int64_t vocab_size = 0;
    int n_layers = 0;
    int hidden_dim = 0;
    int n_heads = 0;
    int key_dim = 0;
    int value_dim = 0;
    int ffn_dim = 0;
    int context_len = 0;
    AttnVariant attn_variant = AttnVariant::dense_vanilla;
    FfnVariant ffn_variant = FfnVariant::dense;
    int n_experts = 0;
    int n_experts_attn = 0;  // 0 = inherit n_experts
    int n_experts_ffn = 0;   // 0 = inherit n_experts
    int k_attn = 0;
    int k_ffn = 0;
    int lora_rank = 0;
    bool share_experts_across_sublayers = false;
    bool share_router = false;
    bool share_fixed_expert = false;
    bool renormalize_gates = false;
    int n_fixed_experts = 1;
    Activation expert_activation = Activation::gelu;
    double balance_loss_coeff = 0.01;
    double rope_base = 10000.0;

    bool attn_is_moe() const { return attn_variant != AttnVariant::dense_vanilla; }
    bool ffn_is_moe() const { return ffn_variant == FfnVariant::ffn_moe; }
    int experts_attn() const { return n_experts_attn > 0 ? n_experts_attn : n_experts; }
    int experts_ffn() const { return n_experts_ffn > 0 ? n_experts_ffn : n_experts; }
};

// Exact closed-form parameter counts by category. Dense FFN matrices are
// reported under expert_bank (the structural analogue). total is always the
// sum of the categories.
struct ParamCount {
    int64_t embeddings = 0;
    int64_t attention_shared = 0;
    int64_t expert_bank = 0;
    int64_t lora = 0;
    int64_t routers = 0;
    int64_t norms = 0;
    int64_t lm_head = 0;
    int64_t total = 0;
};

enum class Preset {
    base_dense,
    base_ffn_moe,
    base_umoe_att,
    base_umoe,
    large_dense,
    large_umoe,
    tiny_test,
};

// Throws Error("InvalidConfig", ...) naming the first violated invariant.
const ModelConfig& validate(const ModelConfig& cfg);

ParamCount count_params(const ModelConfig& cfg);

ModelConfig preset(Preset which);
ModelConfig preset(const std::string& name);  // throws Error("UnknownPreset")

// Flat `key = value` config file, one key per ModelConfig field, '#' comments.
// Unknown keys are a hard error. Round-trips losslessly.
ModelConfig load_config(std::istream& in);
ModelConfig load_config_file(const std::string& path);
void store_config(const ModelConfig& cfg, std::ostream& out);
void store_config_file(const ModelConfig& cfg, const std::string& path);

std::string to_string(AttnVariant v);
std::string to_string(FfnVariant v);
std::string to_string(Activation a);

}  // namespace umoe
