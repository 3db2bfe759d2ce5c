#include <gtest/gtest.h>

#include <sstream>

#include "umoe/config.hpp"

using namespace umoe;

namespace {

void expect_invalid(ModelConfig cfg, const std::string& fragment) {
    try {
        validate(cfg);
        FAIL() << "expected InvalidConfig mentioning '" << fragment << "'";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "InvalidConfig");
        EXPECT_NE(std::string(e.what()).find(fragment), std::string::npos) << e.what();
    }
}

}  // namespace

TEST(Config, BaseUmoePresetIsValid) {
    ModelConfig cfg = preset(Preset::base_umoe);
    EXPECT_NO_THROW(validate(cfg));
    EXPECT_EQ(cfg.hidden_dim, 768);
    EXPECT_EQ(cfg.value_dim, 192);
    EXPECT_EQ(cfg.lora_rank, 16);
    // 128 experts per MoE sublayer counting the fixed one
    EXPECT_EQ(cfg.n_experts + cfg.n_fixed_experts, 128);
    EXPECT_EQ(cfg.k_ffn + cfg.n_fixed_experts, 16);
    EXPECT_EQ(cfg.k_attn + cfg.n_fixed_experts, 4);
    EXPECT_TRUE(cfg.share_experts_across_sublayers);
}

TEST(Config, KExceedsNIsRejected) {
    ModelConfig cfg = preset(Preset::tiny_test);
    cfg.n_experts = 4;
    cfg.k_attn = 5;
    expect_invalid(cfg, "k exceeds N");
}

TEST(Config, PremixNeedsLoraRank) {
    ModelConfig cfg = preset(Preset::tiny_test);
    cfg.lora_rank = 0;
    expect_invalid(cfg, "lora_rank");
}

TEST(Config, ShareFlagsNeedBothMoe) {
    ModelConfig cfg = preset(Preset::tiny_test);
    cfg.ffn_variant = FfnVariant::dense;
    cfg.share_experts_across_sublayers = true;
    expect_invalid(cfg, "share_");
}

TEST(Config, UnknownPresetThrows) {
    try {
        preset("base_gigantic");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "UnknownPreset");
    }
}

TEST(Config, LargeUmoePresetMatchesTable) {
    ModelConfig cfg = preset(Preset::large_umoe);
    EXPECT_EQ(cfg.hidden_dim, 2048);
    EXPECT_EQ(cfg.value_dim, 512);
    EXPECT_EQ(cfg.lora_rank, 36);
    EXPECT_EQ(cfg.n_experts + cfg.n_fixed_experts, 64);
    EXPECT_EQ(cfg.k_ffn + cfg.n_fixed_experts, 11);
}

TEST(Config, TinyTestShape) {
    ModelConfig cfg = preset(Preset::tiny_test);
    EXPECT_EQ(cfg.hidden_dim, 32);
    EXPECT_EQ(cfg.n_layers, 2);
    EXPECT_EQ(cfg.n_experts, 8);
    EXPECT_EQ(cfg.k_attn, 2);
    EXPECT_EQ(cfg.lora_rank, 4);
    EXPECT_EQ(cfg.vocab_size, 256);
}

// Published totals: dense 134M, FFN-MoE 535M, UMoE-Att 547M, UMoE 540M,
// large UMoE 3.6B; the accounting must land within 2% of each.
TEST(Config, CountMatchesPublishedTotals) {
    const struct {
        Preset p;
        double expected;
    } cases[] = {
        {Preset::base_dense, 134e6},    {Preset::base_ffn_moe, 535e6},
        {Preset::base_umoe_att, 547e6}, {Preset::base_umoe, 540e6},
        {Preset::large_umoe, 3.6e9},
    };
    for (const auto& c : cases) {
        const double total = static_cast<double>(count_params(preset(c.p)).total);
        EXPECT_NEAR(total / c.expected, 1.0, 0.02);
    }
}

TEST(Config, TotalsAreCategorySums) {
    for (Preset p : {Preset::base_dense, Preset::base_umoe, Preset::tiny_test}) {
        ParamCount pc = count_params(preset(p));
        EXPECT_EQ(pc.total, pc.embeddings + pc.attention_shared + pc.expert_bank + pc.lora +
                                pc.routers + pc.norms + pc.lm_head);
    }
}

TEST(Config, DegenerateEmbeddingsOnly) {
    ModelConfig cfg = preset(Preset::tiny_test);
    cfg.vocab_size = 1;
    cfg.n_layers = 0;
    ParamCount pc = count_params(cfg);
    EXPECT_EQ(pc.total, 2 * cfg.hidden_dim);

    cfg.vocab_size = 0;
    expect_invalid(cfg, "vocab_size");
}

TEST(Config, PerLayerCategoriesDoubleWithLayers) {
    for (Preset p : {Preset::base_umoe, Preset::base_dense, Preset::tiny_test}) {
        ModelConfig cfg = preset(p);
        ParamCount one = count_params(cfg);
        cfg.n_layers *= 2;
        ParamCount two = count_params(cfg);
        EXPECT_EQ(two.attention_shared, 2 * one.attention_shared);
        EXPECT_EQ(two.expert_bank, 2 * one.expert_bank);
        EXPECT_EQ(two.lora, 2 * one.lora);
        EXPECT_EQ(two.routers, 2 * one.routers);
        // norms carry one extra final gain regardless of depth
        const int64_t d = cfg.hidden_dim;
        EXPECT_EQ(two.norms - d, 2 * (one.norms - d));
        EXPECT_EQ(two.embeddings, one.embeddings);
        EXPECT_EQ(two.lm_head, one.lm_head);
    }
}

TEST(Config, SharedBankCountedOnce) {
    ModelConfig cfg = preset(Preset::base_umoe);
    ParamCount shared = count_params(cfg);
    cfg.share_experts_across_sublayers = false;
    ParamCount separate = count_params(cfg);
    const int64_t bank_units =
        static_cast<int64_t>(cfg.n_experts) * 2 * cfg.hidden_dim * cfg.value_dim;
    EXPECT_EQ(separate.expert_bank - shared.expert_bank,
              static_cast<int64_t>(cfg.n_layers) * bank_units);
}

TEST(Config, SharingFixedAndRouterReducesCounts) {
    ModelConfig cfg = preset(Preset::base_umoe);
    const int64_t base = count_params(cfg).total;
    ModelConfig shared_fixed = cfg;
    shared_fixed.share_fixed_expert = true;
    const int64_t expert_sz = 2LL * cfg.hidden_dim * cfg.value_dim;
    EXPECT_EQ(base - count_params(shared_fixed).total,
              static_cast<int64_t>(cfg.n_layers) * cfg.n_fixed_experts * expert_sz);
    ModelConfig shared_router = cfg;
    shared_router.share_router = true;
    EXPECT_EQ(base - count_params(shared_router).total,
              static_cast<int64_t>(cfg.n_layers) * cfg.n_experts * cfg.hidden_dim);
}

TEST(Config, FileRoundTripIsLossless) {
    ModelConfig cfg = preset(Preset::base_umoe);
    cfg.balance_loss_coeff = 0.012345678901234567;
    cfg.rope_base = 123456.789;
    std::ostringstream out;
    store_config(cfg, out);
    std::istringstream in(out.str());
    ModelConfig back = load_config(in);
    std::ostringstream out2;
    store_config(back, out2);
    EXPECT_EQ(out.str(), out2.str());
    EXPECT_EQ(back.balance_loss_coeff, cfg.balance_loss_coeff);
    EXPECT_EQ(back.rope_base, cfg.rope_base);
    EXPECT_EQ(back.n_experts, cfg.n_experts);
    EXPECT_EQ(back.attn_variant, cfg.attn_variant);
}

TEST(Config, UnknownKeyIsHardError) {
    std::istringstream in("vocab_size = 10\nmystery_knob = 3\n");
    try {
        load_config(in);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "InvalidConfig");
        EXPECT_NE(std::string(e.what()).find("mystery_knob"), std::string::npos);
    }
}

TEST(Config, CommentsAndWhitespaceAccepted) {
    ModelConfig cfg = preset(Preset::tiny_test);
    std::ostringstream out;
    out << "# tiny fixture\n\n";
    store_config(cfg, out);
    std::istringstream in(out.str());
    EXPECT_NO_THROW(load_config(in));
}
