#include "umoe/profiler.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "json.hpp"

namespace umoe {

ArchDescriptor descriptor_from(const ModelConfig& cfg, const std::string& name, int64_t seq_len,
                               int64_t batch) {
    validate(cfg);
    ArchDescriptor a;
    a.name = name;
    a.seq_len = seq_len;
    a.batch = batch;
    a.n_layers = cfg.n_layers;
    a.d = cfg.hidden_dim;
    a.d_k = cfg.key_dim;
    a.d_v = cfg.value_dim;
    a.vocab = cfg.vocab_size;
    a.param_total = count_params(cfg).total;

    if (!cfg.attn_is_moe()) {
        a.variant = cfg.ffn_is_moe() ? CostVariant::ffn_moe : CostVariant::dense;
        a.h = cfg.n_heads;
    } else {
        a.variant = cfg.ffn_is_moe() ? CostVariant::umoe : CostVariant::umoe_att;
        a.h = cfg.k_attn + cfg.n_fixed_experts;  // active mixing units
        if (cfg.attn_variant == AttnVariant::umoe_att_premix) {
            a.lora_units = cfg.k_attn;
            a.lora_rank = cfg.lora_rank;
        }
        if (cfg.k_attn > 0) a.router_attn = cfg.experts_attn();
    }
    if (cfg.ffn_is_moe()) {
        a.ffn_units = cfg.k_ffn + cfg.n_fixed_experts;
        if (cfg.k_ffn > 0) a.router_ffn = cfg.experts_ffn();
    } else {
        a.ffn_dim = cfg.ffn_dim;
    }
    return a;
}

CostReport macs(const ArchDescriptor& a) {
    const int64_t n = a.seq_len;
    const int64_t n2 = a.causal_halving ? n * n / 2 : n * n;
    const bool moe_attn = a.variant == CostVariant::umoe || a.variant == CostVariant::umoe_att;
    const bool moa = a.variant == CostVariant::moa_like;
    const bool sh = a.variant == CostVariant::switchhead_like;

    int64_t out_proj = 0, val_proj = 0, key_proj = 0, query_proj = 0, qk = 0, ws = 0;
    if (moe_attn) {
        // pre-mixing: shared keys/queries, per-expert low-rank query branch,
        // mixing carries full hidden-width rows
        out_proj = n * a.d_v * a.d * a.h;
        val_proj = n * a.d_v * a.d * a.h;
        key_proj = n * a.d_k * a.d;
        query_proj = n * a.d_k * a.d + n * (a.d_k + a.d) * a.lora_rank * a.lora_units;
        qk = n2 * a.d_k * a.h;
        ws = n2 * a.d * a.h;
    } else if (moa) {
        // shared key/value projections, per-expert query and output
        out_proj = n * a.d_v * a.d * a.h;
        val_proj = n * a.d_v * a.d;
        key_proj = n * a.d_k * a.d;
        query_proj = n * a.d_k * a.d * a.h;
        qk = n2 * a.d_k * a.h;
        ws = n2 * a.d_v * a.h;
    } else if (sh) {
        // dense q/k per head, vo_units active value/output experts per head
        out_proj = n * a.d_v * a.d * a.h * a.vo_units;
        val_proj = n * a.d_v * a.d * a.h * a.vo_units;
        key_proj = n * a.d_k * a.d * a.h;
        query_proj = n * a.d_k * a.d * a.h;
        qk = n2 * a.d_k * a.h;
        ws = n2 * a.d_v * a.h * a.vo_units;
    } else {
        out_proj = n * a.d_v * a.d * a.h;
        val_proj = n * a.d_v * a.d * a.h;
        key_proj = n * a.d_k * a.d * a.h;
        query_proj = n * a.d_k * a.d * a.h;
        qk = n2 * a.d_k * a.h;
        ws = n2 * a.d_v * a.h;
    }

    const int64_t expert_sz = 2 * a.d * a.d_v;
    int64_t ffn = a.ffn_units > 0 ? n * a.ffn_units * expert_sz : 2 * n * a.d * a.ffn_dim;
    int64_t router = n * a.d * (a.router_attn + a.router_ffn);
    int64_t head = a.include_lm_head ? n * a.d * a.vocab : 0;

    CostReport r;
    r.arch = a.name;
    r.seq_len = a.seq_len;
    r.batch = a.batch;
    r.causal_halving = a.causal_halving;
    r.include_lm_head = a.include_lm_head;
    r.param_total = a.param_total;
    const int64_t L = a.n_layers;
    const int64_t B = a.batch;
    r.rows = {
        {"output_projection", B * L * out_proj},
        {"value_projection", B * L * val_proj},
        {"key_projection", B * L * key_proj},
        {"query_projection", B * L * query_proj},
        {"qk_multiplication", B * L * qk},
        {"weighted_sum", B * L * ws},
        {"ffn_expert", B * L * ffn},
        {"router", B * L * router},
        {"embedding_head", B * head},
    };
    r.total = 0;
    for (const auto& row : r.rows) r.total += row.macs;
    return r;
}

int64_t CostReport::row(const std::string& op) const {
    for (const auto& r : rows)
        if (r.op == op) return r.macs;
    fail("UnknownRow", "no cost row named '" + op + "'");
}

CompareReport compare(const ArchDescriptor& a, const ArchDescriptor& b) {
    if (a.seq_len != b.seq_len || a.batch != b.batch)
        fail("InvalidArgument", "compare requires matching seq_len and batch");
    CostReport ra = macs(a), rb = macs(b);
    CompareReport c;
    c.arch_a = ra.arch;
    c.arch_b = rb.arch;
    for (size_t i = 0; i < ra.rows.size(); ++i) {
        CompareRow row;
        row.op = ra.rows[i].op;
        row.a = ra.rows[i].macs;
        row.b = rb.rows[i].macs;
        row.ratio = row.a > 0 ? static_cast<double>(row.b) / static_cast<double>(row.a) : 0.0;
        c.rows.push_back(row);
    }
    c.total_ratio = ra.total > 0 ? static_cast<double>(rb.total) / static_cast<double>(ra.total) : 0.0;
    return c;
}

std::string CostReport::to_json() const {
    nlohmann::json j;
    j["arch"] = arch;
    j["assumptions"] = {{"seq_len", seq_len},
                        {"batch", batch},
                        {"causal_halving", causal_halving},
                        {"include_lm_head", include_lm_head},
                        {"mac_unit", "one multiply-accumulate"}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows) j["rows"].push_back({{"op", r.op}, {"macs", r.macs}});
    j["total_macs"] = total;
    j["param_total"] = param_total;
    return j.dump(2);
}

std::string CostReport::to_text() const {
    std::ostringstream os;
    os << "arch: " << arch << "  (seq_len=" << seq_len << " batch=" << batch
       << " causal_halving=" << (causal_halving ? "on" : "off")
       << " lm_head=" << (include_lm_head ? "on" : "off") << ")\n";
    size_t w = 0;
    for (const auto& r : rows) w = std::max(w, r.op.size());
    for (const auto& r : rows) {
        os << "  " << r.op << std::string(w - r.op.size() + 2, ' ');
        char buf[32];
        std::snprintf(buf, sizeof buf, "%18lld", static_cast<long long>(r.macs));
        os << buf << "\n";
    }
    os << "  total" << std::string(w - 5 + 2, ' ');
    char buf[32];
    std::snprintf(buf, sizeof buf, "%18lld", static_cast<long long>(total));
    os << buf << "\n";
    if (param_total > 0) os << "  params " << param_total << "\n";
    return os.str();
}

std::string CompareReport::to_json() const {
    nlohmann::json j;
    j["arch_a"] = arch_a;
    j["arch_b"] = arch_b;
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rows)
        j["rows"].push_back({{"op", r.op}, {"a", r.a}, {"b", r.b}, {"ratio", r.ratio}});
    j["total_ratio"] = total_ratio;
    return j.dump(2);
}

std::string CompareReport::to_text() const {
    std::ostringstream os;
    os << "compare: " << arch_b << " / " << arch_a << "\n";
    size_t w = 0;
    for (const auto& r : rows) w = std::max(w, r.op.size());
    for (const auto& r : rows) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "%18lld %18lld %8.4f", static_cast<long long>(r.a),
                      static_cast<long long>(r.b), r.ratio);
        os << "  " << r.op << std::string(w - r.op.size() + 2, ' ') << buf << "\n";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4f", total_ratio);
    os << "  total ratio " << buf << "\n";
    return os.str();
}

}  // namespace umoe
