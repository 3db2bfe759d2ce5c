#include "umoe/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace umoe {

std::string to_string(AttnVariant v) {
    switch (v) {
        case AttnVariant::dense_vanilla: return "dense_vanilla";
        case AttnVariant::umoe_att_premix: return "umoe_att_premix";
        case AttnVariant::umoe_att_postmix: return "umoe_att_postmix";
    }
    return "?";
}

std::string to_string(FfnVariant v) {
    return v == FfnVariant::dense ? "dense" : "ffn_moe";
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::gelu: return "gelu";
        case Activation::relu: return "relu";
        case Activation::none: return "none";
    }
    return "?";
}

static AttnVariant attn_variant_from(const std::string& s) {
    if (s == "dense_vanilla") return AttnVariant::dense_vanilla;
    if (s == "umoe_att_premix") return AttnVariant::umoe_att_premix;
    if (s == "umoe_att_postmix") return AttnVariant::umoe_att_postmix;
    fail("InvalidConfig", "unknown attn_variant '" + s + "'");
}

static FfnVariant ffn_variant_from(const std::string& s) {
    if (s == "dense") return FfnVariant::dense;
    if (s == "ffn_moe") return FfnVariant::ffn_moe;
    fail("InvalidConfig", "unknown ffn_variant '" + s + "'");
}

static Activation activation_from(const std::string& s) {
    if (s == "gelu") return Activation::gelu;
    if (s == "relu") return Activation::relu;
    if (s == "none") return Activation::none;
    fail("InvalidConfig", "unknown expert_activation '" + s + "'");
}

const ModelConfig& validate(const ModelConfig& cfg) {
    auto bad = [](const std::string& what) { fail("InvalidConfig", what); };

    if (cfg.vocab_size < 1) bad("vocab_size must be positive");
    // n_layers == 0 is accepted as the degenerate embeddings-only config
    // used for accounting checks.
    if (cfg.n_layers < 0) bad("n_layers must be nonnegative");
    if (cfg.hidden_dim < 1) bad("hidden_dim must be positive");
    if (cfg.context_len < 1) bad("context_len must be positive");
    if (cfg.key_dim < 1) bad("key_dim must be positive");
    if (cfg.key_dim % 2 != 0) bad("key_dim must be even (rotary embedding)");
    if (cfg.value_dim < 1) bad("value_dim must be positive");
    if (!cfg.attn_is_moe() && cfg.n_heads < 1) bad("n_heads must be positive for dense attention");
    if (cfg.ffn_variant == FfnVariant::dense && cfg.ffn_dim < 1) bad("ffn_dim must be positive for dense FFN");
    if (cfg.n_experts < 0) bad("n_experts must be nonnegative");
    if (cfg.n_experts_attn < 0 || cfg.n_experts_ffn < 0) bad("expert-count overrides must be nonnegative");
    if (cfg.k_attn < 0 || cfg.k_ffn < 0) bad("k must be nonnegative");
    if (cfg.n_fixed_experts < 0) bad("n_fixed_experts must be nonnegative");
    if (cfg.lora_rank < 0) bad("lora_rank must be nonnegative");
    if (cfg.balance_loss_coeff < 0.0) bad("balance_loss_coeff must be nonnegative");
    if (cfg.rope_base <= 0.0) bad("rope_base must be positive");

    if (cfg.attn_is_moe() && cfg.k_attn > cfg.experts_attn()) bad("k exceeds N (k_attn > attention experts)");
    if (cfg.ffn_is_moe() && cfg.k_ffn > cfg.experts_ffn()) bad("k exceeds N (k_ffn > FFN experts)");
    if (cfg.attn_variant == AttnVariant::umoe_att_premix && cfg.experts_attn() > 1 && cfg.lora_rank < 1)
        bad("lora_rank must be >= 1 for umoe_att_premix with more than one expert");

    const bool both_moe = cfg.attn_is_moe() && cfg.ffn_is_moe();
    if ((cfg.share_experts_across_sublayers || cfg.share_router || cfg.share_fixed_expert) && !both_moe)
        bad("share_* flags require MoE attention and MoE FFN");
    if (cfg.share_experts_across_sublayers && cfg.experts_attn() != cfg.experts_ffn())
        bad("share_experts_across_sublayers requires equal expert counts per sublayer");
    if (cfg.share_router && cfg.experts_attn() != cfg.experts_ffn())
        bad("share_router requires equal expert counts per sublayer");

    return cfg;
}

ParamCount count_params(const ModelConfig& cfg) {
    validate(cfg);
    const int64_t d = cfg.hidden_dim;
    const int64_t dk = cfg.key_dim;
    const int64_t dv = cfg.value_dim;
    ParamCount pc;

    pc.embeddings = cfg.vocab_size * d;
    pc.lm_head = cfg.vocab_size * d;

    int64_t attn_shared = 0, bank = 0, lora = 0, routers = 0, norms = 0;
    const int64_t expert_sz = 2 * d * dv;  // W1: d x d_v, W2: d_v x d

    if (cfg.attn_is_moe()) {
        attn_shared += 2 * d * dk;  // shared W_q, W_k
        const int64_t n_attn = cfg.experts_attn();
        bank += n_attn * expert_sz;
        if (cfg.attn_variant == AttnVariant::umoe_att_premix)
            lora += n_attn * (d * cfg.lora_rank + static_cast<int64_t>(cfg.lora_rank) * dk);
        if (cfg.k_attn > 0) routers += n_attn * d;
    } else {
        const int64_t h = cfg.n_heads;
        attn_shared += 2 * d * (h * dk) + 2 * d * (h * dv);  // W_q, W_k, W_v, W_o
    }

    if (cfg.ffn_is_moe()) {
        const int64_t n_ffn = cfg.experts_ffn();
        if (!cfg.share_experts_across_sublayers || !cfg.attn_is_moe()) bank += n_ffn * expert_sz;
        if (cfg.k_ffn > 0 && !cfg.share_router) routers += n_ffn * d;
    } else {
        bank += 2 * d * cfg.ffn_dim;
    }

    // Fixed experts: one set per MoE sublayer unless shared.
    int moe_sublayers = (cfg.attn_is_moe() ? 1 : 0) + (cfg.ffn_is_moe() ? 1 : 0);
    int fixed_sets = cfg.share_fixed_expert ? (moe_sublayers > 0 ? 1 : 0) : moe_sublayers;
    bank += static_cast<int64_t>(fixed_sets) * cfg.n_fixed_experts * expert_sz;

    norms = 2 * d;  // pre-attention and pre-FFN gains

    pc.attention_shared = cfg.n_layers * attn_shared;
    pc.expert_bank = cfg.n_layers * bank;
    pc.lora = cfg.n_layers * lora;
    pc.routers = cfg.n_layers * routers;
    pc.norms = cfg.n_layers * norms + (cfg.n_layers > 0 ? d : 0);  // + final norm

    pc.total = pc.embeddings + pc.attention_shared + pc.expert_bank + pc.lora + pc.routers +
               pc.norms + pc.lm_head;
    return pc;
}

ModelConfig preset(Preset which) {
    ModelConfig c;
    c.vocab_size = 32000;
    c.rope_base = 10000.0;
    c.balance_loss_coeff = 0.01;
    c.expert_activation = Activation::gelu;
    c.n_fixed_experts = 1;

    // Table counts list experts/k per sublayer inclusive of the fixed
    // expert; config fields store the routed counts.
    switch (which) {
        case Preset::base_dense:
            c.n_layers = 12;
            c.hidden_dim = 768;
            c.n_heads = 4;
            c.key_dim = 192;  // full-width attention, d / h
            c.value_dim = 192;
            c.ffn_dim = 3072;
            c.context_len = 1024;
            c.attn_variant = AttnVariant::dense_vanilla;
            c.ffn_variant = FfnVariant::dense;
            c.n_experts = 0;
            c.n_fixed_experts = 0;
            break;
        case Preset::base_ffn_moe:
            c.n_layers = 12;
            c.hidden_dim = 768;
            c.n_heads = 4;
            c.key_dim = 192;
            c.value_dim = 192;  // expert intermediate size == dense head width
            c.ffn_dim = 3072;   // unused by the MoE FFN, kept for descriptor parity
            c.context_len = 1024;
            c.attn_variant = AttnVariant::dense_vanilla;
            c.ffn_variant = FfnVariant::ffn_moe;
            c.n_experts = 127;  // 128 per layer incl. fixed
            c.k_ffn = 15;       // 16 active incl. fixed
            break;
        case Preset::base_umoe_att:
            c.n_layers = 12;
            c.hidden_dim = 768;
            c.n_heads = 4;
            c.key_dim = 512;
            c.value_dim = 192;
            c.ffn_dim = 3072;
            c.context_len = 1024;
            c.attn_variant = AttnVariant::umoe_att_premix;
            c.ffn_variant = FfnVariant::dense;
            c.n_experts = 115;  // 116 per layer incl. fixed
            c.k_attn = 3;       // 4 active incl. fixed
            c.lora_rank = 16;
            break;
        case Preset::base_umoe:
            c.n_layers = 12;
            c.hidden_dim = 768;
            c.n_heads = 4;
            c.key_dim = 512;
            c.value_dim = 192;
            c.ffn_dim = 3072;
            c.context_len = 768;
            c.attn_variant = AttnVariant::umoe_att_premix;
            c.ffn_variant = FfnVariant::ffn_moe;
            c.n_experts = 127;
            c.k_attn = 3;
            c.k_ffn = 15;
            c.lora_rank = 16;
            c.share_experts_across_sublayers = true;
            break;
        case Preset::large_dense:
            c.n_layers = 24;
            c.hidden_dim = 2048;
            c.n_heads = 4;
            c.key_dim = 512;
            c.value_dim = 512;
            c.ffn_dim = 5632;
            c.context_len = 1024;
            c.attn_variant = AttnVariant::dense_vanilla;
            c.ffn_variant = FfnVariant::dense;
            c.n_experts = 0;
            c.n_fixed_experts = 0;
            break;
        case Preset::large_umoe:
            c.n_layers = 24;
            c.hidden_dim = 2048;
            c.n_heads = 4;
            c.key_dim = 512;
            c.value_dim = 512;
            c.ffn_dim = 5632;
            c.context_len = 1024;
            c.attn_variant = AttnVariant::umoe_att_premix;
            c.ffn_variant = FfnVariant::ffn_moe;
            c.n_experts = 63;  // 64 per layer incl. fixed
            c.k_attn = 3;
            c.k_ffn = 10;  // 11 active incl. fixed
            c.lora_rank = 36;
            c.share_experts_across_sublayers = true;
            break;
        case Preset::tiny_test:
            c.vocab_size = 256;
            c.n_layers = 2;
            c.hidden_dim = 32;
            c.n_heads = 2;
            c.key_dim = 16;
            c.value_dim = 16;
            c.ffn_dim = 64;
            c.context_len = 64;
            c.attn_variant = AttnVariant::umoe_att_premix;
            c.ffn_variant = FfnVariant::ffn_moe;
            c.n_experts = 8;
            c.k_attn = 2;
            c.k_ffn = 2;
            c.lora_rank = 4;
            break;
    }
    validate(c);
    return c;
}

ModelConfig preset(const std::string& name) {
    static const std::map<std::string, Preset> names = {
        {"base_dense", Preset::base_dense},     {"base_ffn_moe", Preset::base_ffn_moe},
        {"base_umoe_att", Preset::base_umoe_att}, {"base_umoe", Preset::base_umoe},
        {"large_dense", Preset::large_dense},   {"large_umoe", Preset::large_umoe},
        {"tiny_test", Preset::tiny_test},
    };
    auto it = names.find(name);
    if (it == names.end()) fail("UnknownPreset", "no preset named '" + name + "'");
    return preset(it->second);
}

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

struct Field {
    std::string key;
    std::string (*get)(const ModelConfig&);
    void (*set)(ModelConfig&, const std::string&);
};

int64_t parse_int(const std::string& s) {
    size_t pos = 0;
    int64_t v = 0;
    try {
        v = std::stoll(s, &pos);
    } catch (const std::exception&) {
        fail("InvalidConfig", "not an integer: '" + s + "'");
    }
    if (pos != s.size()) fail("InvalidConfig", "not an integer: '" + s + "'");
    return v;
}

double parse_real(const std::string& s) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        fail("InvalidConfig", "not a real: '" + s + "'");
    }
    if (pos != s.size()) fail("InvalidConfig", "not a real: '" + s + "'");
    return v;
}

bool parse_bool(const std::string& s) {
    if (s == "true") return true;
    if (s == "false") return false;
    fail("InvalidConfig", "not a boolean: '" + s + "'");
}

#define INT_FIELD(name)                                                            \
    Field{#name, [](const ModelConfig& c) { return std::to_string(c.name); },      \
          [](ModelConfig& c, const std::string& s) { c.name = static_cast<int>(parse_int(s)); }}
#define BOOL_FIELD(name)                                                           \
    Field{#name, [](const ModelConfig& c) { return std::string(c.name ? "true" : "false"); }, \
          [](ModelConfig& c, const std::string& s) { c.name = parse_bool(s); }}

const std::vector<Field>& fields() {
    static const std::vector<Field> f = {
        Field{"vocab_size", [](const ModelConfig& c) { return std::to_string(c.vocab_size); },
              [](ModelConfig& c, const std::string& s) { c.vocab_size = parse_int(s); }},
        INT_FIELD(n_layers),
        INT_FIELD(hidden_dim),
        INT_FIELD(n_heads),
        INT_FIELD(key_dim),
        INT_FIELD(value_dim),
        INT_FIELD(ffn_dim),
        INT_FIELD(context_len),
        Field{"attn_variant", [](const ModelConfig& c) { return to_string(c.attn_variant); },
              [](ModelConfig& c, const std::string& s) { c.attn_variant = attn_variant_from(s); }},
        Field{"ffn_variant", [](const ModelConfig& c) { return to_string(c.ffn_variant); },
              [](ModelConfig& c, const std::string& s) { c.ffn_variant = ffn_variant_from(s); }},
        INT_FIELD(n_experts),
        INT_FIELD(n_experts_attn),
        INT_FIELD(n_experts_ffn),
        INT_FIELD(k_attn),
        INT_FIELD(k_ffn),
        INT_FIELD(lora_rank),
        BOOL_FIELD(share_experts_across_sublayers),
        BOOL_FIELD(share_router),
        BOOL_FIELD(share_fixed_expert),
        BOOL_FIELD(renormalize_gates),
        INT_FIELD(n_fixed_experts),
        Field{"expert_activation", [](const ModelConfig& c) { return to_string(c.expert_activation); },
              [](ModelConfig& c, const std::string& s) { c.expert_activation = activation_from(s); }},
        Field{"balance_loss_coeff", [](const ModelConfig& c) { return fmt_double(c.balance_loss_coeff); },
              [](ModelConfig& c, const std::string& s) { c.balance_loss_coeff = parse_real(s); }},
        Field{"rope_base", [](const ModelConfig& c) { return fmt_double(c.rope_base); },
              [](ModelConfig& c, const std::string& s) { c.rope_base = parse_real(s); }},
    };
    return f;
}

#undef INT_FIELD
#undef BOOL_FIELD

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

ModelConfig load_config(std::istream& in) {
    ModelConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            fail("InvalidConfig", "line " + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        bool known = false;
        for (const auto& f : fields()) {
            if (f.key == key) {
                f.set(cfg, value);
                known = true;
                break;
            }
        }
        if (!known) fail("InvalidConfig", "unknown key '" + key + "'");
    }
    validate(cfg);
    return cfg;
}

ModelConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail("InvalidConfig", "cannot open config file '" + path + "'");
    return load_config(in);
}

void store_config(const ModelConfig& cfg, std::ostream& out) {
    for (const auto& f : fields()) out << f.key << " = " << f.get(cfg) << "\n";
}

void store_config_file(const ModelConfig& cfg, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail("InvalidConfig", "cannot write config file '" + path + "'");
    store_config(cfg, out);
}

}  // namespace umoe
