#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "umoe/config.hpp"

namespace umoe {

enum class CostVariant { dense, ffn_moe, moa_like, switchhead_like, umoe_att, umoe };

// Everything the analytical MAC model needs. h is the number of attention
// mixing units (heads for vanilla, active experts including the fixed one
// for MoE attention); lora_units is the subset carrying low-rank query
// branches (routed experts only).
struct ArchDescriptor {
    std::string name;
    CostVariant variant = CostVariant::dense;
    int64_t seq_len = 1024;
    int64_t batch = 1;
    int n_layers = 0;
    int64_t d = 0;
    int64_t d_k = 0;  // per mixing unit
    int64_t d_v = 0;
    int64_t h = 0;
    int64_t lora_units = 0;
    int64_t lora_rank = 0;
    int64_t ffn_dim = 0;        // dense FFN width
    int64_t ffn_units = 0;      // active FFN experts incl. fixed
    int64_t router_attn = 0;    // routed expert count seen by the attention router
    int64_t router_ffn = 0;
    int64_t vo_units = 1;       // switchhead_like: active value/output experts per head
    int64_t vocab = 0;
    bool causal_halving = false;  // count QK / weighted-sum at N^2/2
    bool include_lm_head = true;
    int64_t param_total = 0;  // filled when built from a ModelConfig
};

struct CostRow {
    std::string op;
    int64_t macs = 0;
};

struct CostReport {
    std::string arch;
    std::vector<CostRow> rows;
    int64_t total = 0;
    int64_t param_total = 0;
    // recorded assumptions
    int64_t seq_len = 0;
    int64_t batch = 1;
    bool causal_halving = false;
    bool include_lm_head = true;

    int64_t row(const std::string& op) const;
    std::string to_json() const;
    std::string to_text() const;
};

struct CompareRow {
    std::string op;
    int64_t a = 0;
    int64_t b = 0;
    double ratio = 0.0;  // b / a (0 when a == 0)
};

struct CompareReport {
    std::string arch_a, arch_b;
    std::vector<CompareRow> rows;
    double total_ratio = 0.0;
    std::string to_json() const;
    std::string to_text() const;
};

ArchDescriptor descriptor_from(const ModelConfig& cfg, const std::string& name, int64_t seq_len,
                               int64_t batch = 1);

CostReport macs(const ArchDescriptor& desc);
CompareReport compare(const ArchDescriptor& a, const ArchDescriptor& b);

}  // namespace umoe
