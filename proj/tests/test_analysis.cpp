#include <gtest/gtest.h>

#include <json.hpp>

#include "test_util.hpp"
#include "uxnet/analysis.hpp"
#include "uxnet/checkpoint.hpp"

using namespace uxnet;
using json = nlohmann::json;

namespace {

const Shape kRef{1, 1, 96, 96, 96};

UXNetConfig small_config() {
    UXNetConfig c = UXNetConfig::tiny();
    c.stage_channels = {4, 8, 16, 32};
    return c;
}

/// Encoder receptive field from the layer list alone: patch embed, the DWC of
/// every block, the 2x2x2 downsamples and the single 3^3 bottleneck conv.
int64_t rf_oracle(const UXNetConfig& c) {
    int64_t r = 1, j = 1;
    auto step = [&](int64_t k, int64_t s) {
        r += (k - 1) * j;
        j *= s;
    };
    step(c.effective_patch_kernel(), 2);
    for (int s = 0; s < 4; ++s) {
        for (int64_t b = 0; b < c.stage_depths[static_cast<size_t>(s)]; ++b) step(c.kernel_size, 1);
        if (s < 3 || c.has_bottleneck()) step(2, 2);
    }
    if (c.has_bottleneck() && c.bottleneck_block) step(3, 1);
    return r;
}

int64_t block_params(int64_t c, int64_t k) { return c * k * k * k + c + 4 * c + 13 * c; }

}  // namespace

TEST(CountParams, AgreesWithAnalyticWalk) {
    for (ScalingMode mode : {ScalingMode::DCS, ScalingMode::MLP, ScalingMode::NONE}) {
        UXNetConfig c = small_config();
        c.scaling_mode = mode;
        c.deep_supervision = mode == ScalingMode::MLP;
        UXNetModel<float> m(c, 0);
        const CostReport built = count_params(m);
        EXPECT_EQ(built.total_params, m.params().total_numel());
        EXPECT_EQ(built.total_params, count_flops(c, {1, 1, 32, 32, 32}).total_params) << to_string(mode);
    }
}

TEST(CountParams, MatchesSerializedBuffers) {
    uxnet::testing::TempDir dir;
    UXNetModel<float> m(small_config(), 0);
    save_weights(m, dir.file("w.uxck"));
    const auto ckpt = read_checkpoint<float>(dir.file("w.uxck"));
    int64_t n = 0;
    for (const auto* e : ckpt.section("param")) n += e->value.numel();
    EXPECT_EQ(n, count_params(m).total_params);
}

TEST(CountParams, StageGroupsFollowClosedForm) {
    const CostReport r = count_flops(UXNetConfig::reference(), kRef);
    const std::array<int64_t, 4> widths{48, 96, 192, 384};
    for (size_t s = 0; s < 4; ++s) {
        EXPECT_EQ(r.group_params.at("encoder.stage" + std::to_string(s)), 2 * block_params(widths[s], 7));
    }
    // Single depthwise conv C=48, k=7 with bias.
    int64_t dwc = 0;
    for (const auto& l : r.layers) {
        if (l.name == "encoder.stage0.block0.dwc") dwc = l.params;
    }
    EXPECT_EQ(dwc, 16512);
}

TEST(CountParams, GroupKeys) {
    EXPECT_EQ(param_group("encoder.stage2.block1.dwc.weight"), "encoder.stage2");
    EXPECT_EQ(param_group("decoder.up0.res.conv1.weight"), "decoder.up0");
    EXPECT_EQ(param_group("head.weight"), "head");
    EXPECT_EQ(param_group("bottleneck.conv1.weight"), "bottleneck");
}

// Frozen totals for the documented decoder topology at 96^3.
TEST(Variants, FrozenTotals) {
    struct Row {
        const char* name;
        int64_t params, macs, rf;
    };
    const Row rows[] = {
        {"reference", 49842773, 302231181312, 461},     {"optimized", 31972181, 302436218880, 685},
        {"standard-conv", 183695093, 625136320512, 461}, {"mlp", 52964693, 309762496512, 461},
        {"no-scaling", 49821173, 302118377472, 461},
    };
    for (const auto& row : rows) {
        const auto v = named_variant(row.name);
        const CostReport r = count_flops(v.config, kRef);
        EXPECT_EQ(r.total_params, row.params) << row.name;
        EXPECT_EQ(r.total_macs, row.macs) << row.name;
        EXPECT_EQ(r.flops_2mac(), 2 * row.macs);
        EXPECT_EQ(r.rf_exit(), row.rf) << row.name;
        EXPECT_EQ(rf_oracle(v.config), row.rf) << row.name;
    }
    EXPECT_THROW(named_variant("swin"), std::invalid_argument);
}

TEST(Variants, ReferenceNearPublishedFigures) {
    const CostReport r = count_flops(UXNetConfig::reference(), kRef);
    EXPECT_NEAR(double(r.total_params), 53.0e6, 0.10 * 53.0e6);
    EXPECT_NEAR(double(r.flops_2mac()), 639.4e9, 0.20 * 639.4e9);
    const CostReport o = count_flops(UXNetConfig::optimized(), kRef);
    EXPECT_NEAR(double(o.total_params), 32.1e6, 0.10 * 32.1e6);
    EXPECT_NEAR(double(o.flops_2mac()), 536.8e9, 0.20 * 536.8e9);
}

TEST(Variants, AblationDeltas) {
    const auto ref = count_flops(named_variant("reference").config, kRef).total_params;
    const auto dense = count_flops(named_variant("standard-conv").config, kRef).total_params;
    const auto mlp = count_flops(named_variant("mlp").config, kRef).total_params;
    const int64_t sq = 48 * 48 + 96 * 96 + 192 * 192 + 384 * 384;
    EXPECT_EQ(dense - ref, 2 * sq * 343 - 1440 * 343);
    EXPECT_NEAR(double(dense - ref), 133.9e6, 0.2e6);
    EXPECT_EQ(mlp - ref, 2 * (8 * sq + 5 * 720 - 13 * 720));
    EXPECT_NEAR(double(mlp - ref), 3.3e6, 0.33e6);
}

TEST(KernelSweep, PinnedPatchKernelDeltas) {
    const auto rows = kernel_sweep(UXNetConfig::reference(), {3, 5, 7, 9, 11, 13});
    ASSERT_EQ(rows.size(), 6u);
    std::vector<int64_t> params;
    for (const auto& row : rows) {
        EXPECT_EQ(row.config.effective_patch_kernel(), 7);
        params.push_back(count_flops(row.config, kRef).total_params);
    }
    EXPECT_EQ(params[2] - params[0], 1440 * (343 - 27));
    EXPECT_EQ(params[2] - params[0], 455040);
    EXPECT_EQ(params[0], 49387733);
    EXPECT_EQ(params[5], 52512533);
    for (size_t i = 1; i < params.size(); ++i) EXPECT_GT(params[i], params[i - 1]);
}

TEST(Flops, HeadMacsClosedForm) {
    UXNetConfig c = UXNetConfig::reference();
    const CostReport r = count_flops(c, kRef);
    int64_t head = -1;
    for (const auto& l : r.layers) {
        if (l.name == "head") head = l.macs;
    }
    EXPECT_EQ(head, int64_t{96} * 96 * 96 * 5 * 48);
}

TEST(Flops, LayerMacsSumToTotalAndElementwiseKeptApart) {
    const CostReport r = count_flops(small_config(), {1, 1, 32, 32, 32});
    int64_t macs = 0, ew = 0;
    for (const auto& l : r.layers) {
        macs += l.macs;
        ew += l.elementwise_flops;
        if (l.kind != "conv" && l.kind != "conv_transpose") EXPECT_EQ(l.macs, 0) << l.name;
    }
    EXPECT_EQ(macs, r.total_macs);
    EXPECT_EQ(ew, r.elementwise_flops);
    EXPECT_GT(ew, 0);
}

TEST(Flops, MatchesConvCounterOnARealForward) {
    UXNetModel<float> m(small_config(), 0);
    NoGradScope<float> off;
    conv_mac_counter() = 0;
    m.forward(Var<float>::constant(Tensor<float>({1, 1, 32, 32, 32})));
    EXPECT_EQ(int64_t(conv_mac_counter()), count_flops(small_config(), {1, 1, 32, 32, 32}).total_macs);
}

TEST(Flops, PureFunctionOfInputs) {
    const auto a = count_flops(UXNetConfig::optimized(), kRef);
    const auto b = count_flops(UXNetConfig::optimized(), kRef);
    EXPECT_EQ(a.total_macs, b.total_macs);
    EXPECT_EQ(a.group_params, b.group_params);
    const auto ref = count_flops(UXNetConfig::reference(), kRef);
    EXPECT_EQ(count_flops(UXNetConfig::reference(), {2, 1, 96, 96, 96}).total_macs, 2 * ref.total_macs);
}

TEST(ReceptiveField, RecurrenceExamples) {
    const auto trace = receptive_field(UXNetConfig::reference());
    ASSERT_GE(trace.size(), 3u);
    EXPECT_EQ(trace[0].rf, 7);
    EXPECT_EQ(trace[0].jump, 2);
    EXPECT_EQ(trace[1].rf, 19);
    EXPECT_EQ(trace[2].rf, 31);
    for (size_t i = 1; i < trace.size(); ++i) {
        EXPECT_EQ(trace[i].rf, trace[i - 1].rf + (trace[i].kernel - 1) * trace[i - 1].jump) << trace[i].layer;
        EXPECT_EQ(trace[i].jump, trace[i - 1].jump * trace[i].stride);
    }
    UXNetConfig k13 = UXNetConfig::reference();
    k13.kernel_size = 13;
    k13.patch_kernel = 7;
    EXPECT_EQ(receptive_field(k13)[2].rf, 55);
}

TEST(ReceptiveField, OracleAcrossConfigs) {
    for (int64_t k : {1, 3, 5, 9}) {
        for (bool bottleneck : {false, true}) {
            UXNetConfig c = small_config();
            c.kernel_size = k;
            c.stage_depths = {1, 2, 3, 1};
            if (bottleneck) {
                c.bottleneck_channels = 64;
                c.bottleneck_block = true;
            }
            EXPECT_EQ(receptive_field(c).back().rf, rf_oracle(c)) << "k" << k;
        }
    }
}

TEST(AblationTable, KernelRowsInOrder) {
    const auto t = emit_ablation_table(kernel_sweep(UXNetConfig::reference(), {3, 5, 7, 9, 11, 13}),
                                       TableFormat::Markdown);
    EXPECT_TRUE(t.failures.empty());
    size_t pos = 0;
    for (const char* name : {"kernel=3", "kernel=5", "kernel=7", "kernel=9", "kernel=11", "kernel=13"}) {
        const size_t at = t.document.find(std::string("| ") + name + " |", pos);
        ASSERT_NE(at, std::string::npos) << name;
        pos = at + 1;
    }
    EXPECT_NE(t.document.find("| kernel=3 | 49.4 | 595.6 | 297.8 | 221 |"), std::string::npos) << t.document;
    EXPECT_NE(t.document.find("| kernel=13 | 52.5 | 656.7 | 328.4 | 821 |"), std::string::npos) << t.document;
}

TEST(AblationTable, EmptyListIsHeaderOnly) {
    const auto csv = emit_ablation_table({}, TableFormat::Csv);
    EXPECT_EQ(csv.document, "name,params,flops_2mac,flops_1mac,rf_exit\n");
    EXPECT_EQ(json::parse(emit_ablation_table({}, TableFormat::Json).document), json::array());
}

TEST(AblationTable, JsonParsesBack) {
    const auto t = emit_ablation_table({named_variant("optimized")}, TableFormat::Json);
    const json j = json::parse(t.document);
    ASSERT_EQ(j.size(), 1u);
    EXPECT_EQ(j[0]["name"], "optimized");
    EXPECT_EQ(j[0]["params"].get<int64_t>(), 31972181);
    EXPECT_EQ(j[0]["rf_exit"].get<int64_t>(), 685);
}

TEST(AblationTable, BadRowIsReportedAndOthersContinue) {
    UXNetConfig bad = UXNetConfig::reference();
    bad.kernel_size = 4;
    const auto t = emit_ablation_table({{"bad", bad}, named_variant("reference")}, TableFormat::Csv);
    ASSERT_EQ(t.failures.size(), 1u);
    EXPECT_EQ(t.failures[0].rfind("bad:", 0), 0u);
    EXPECT_NE(t.document.find("bad,error"), std::string::npos);
    EXPECT_NE(t.document.find("reference,49.8,604.5,302.2,461"), std::string::npos) << t.document;
    EXPECT_THROW(parse_table_format("xml"), std::invalid_argument);
}
