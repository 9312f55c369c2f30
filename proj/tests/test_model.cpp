#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "test_util.hpp"
#include "uxnet/checkpoint.hpp"
#include "uxnet/model.hpp"
#include "uxnet/ops.hpp"

using namespace uxnet;
using uxnet::testing::random_tensor;
using uxnet::testing::TempDir;

namespace {

UXNetConfig small_config() {
    UXNetConfig c = UXNetConfig::tiny();
    c.stage_channels = {4, 8, 16, 32};
    return c;
}

Var<float> input(const Shape& s, uint64_t seed) {
    Rng rng(seed);
    return Var<float>::constant(random_tensor<float>(s, rng));
}

int64_t store_numel(ParamStore<float>& store, const std::string& prefix) {
    int64_t n = 0;
    for (const auto& p : store.all()) {
        if (p->name.rfind(prefix, 0) == 0) n += p->value.numel();
    }
    return n;
}

// The reference-width model is large to initialize; share one across tests.
const UXNetModel<float>& reference_model() {
    static const UXNetModel<float> m(UXNetConfig::reference(), 0);
    return m;
}

}  // namespace

TEST(Build, ReferenceLayout) {
    const auto& m = reference_model();
    ASSERT_EQ(m.stages().size(), 4u);
    const std::array<int64_t, 4> widths{48, 96, 192, 384};
    for (size_t s = 0; s < 4; ++s) {
        EXPECT_EQ(m.stages()[s].size(), 2u);
        for (const auto& b : m.stages()[s]) EXPECT_EQ(b.channels, widths[s]);
    }
}

TEST(Build, OptimizedHasFourteenBlocks) {
    const UXNetConfig c = UXNetConfig::optimized();
    EXPECT_EQ(c.stage_depths, (std::array<int64_t, 4>{2, 2, 8, 2}));
    EXPECT_FALSE(c.bottleneck_block);
    UXNetModel<float> m(c, 1);
    size_t blocks = 0;
    for (const auto& s : m.stages()) blocks += s.size();
    EXPECT_EQ(blocks, 14u);
}

TEST(Build, SameSeedSameParameters) {
    UXNetModel<float> a(small_config(), 42), b(small_config(), 42), c(small_config(), 43);
    ASSERT_EQ(a.params().names(), b.params().names());
    bool any_differs = false;
    for (size_t i = 0; i < a.params().all().size(); ++i) {
        EXPECT_EQ(a.params().all()[i]->value, b.params().all()[i]->value) << a.params().all()[i]->name;
        any_differs |= a.params().all()[i]->value != c.params().all()[i]->value;
    }
    EXPECT_TRUE(any_differs);
}

TEST(Build, ConvWeightsAreTruncatedNormal) {
    UXNetModel<float> m(small_config(), 3);
    for (const auto& p : m.params().all()) {
        if (p->name.size() < 7 || p->name.substr(p->name.size() - 7) != ".weight") continue;
        double sq = 0;
        for (float v : p->value.values()) {
            EXPECT_LE(std::abs(v), 0.04f + 1e-6f) << p->name;
            sq += double(v) * v;
        }
        if (p->value.numel() >= 2000) EXPECT_NEAR(std::sqrt(sq / double(p->value.numel())), 0.0176, 0.002) << p->name;
    }
}

TEST(Build, InvalidConfigIsRejected) {
    UXNetConfig c = small_config();
    c.kernel_size = 4;
    EXPECT_THROW(UXNetModel<float>(c, 0), ConfigError);
}

TEST(PatchEmbed, HalvesExtentIntoFirstWidth) {
    UXNetModel<float> m(UXNetConfig::tiny(), 0);
    NoGradScope<float> off;
    EXPECT_EQ(m.patch_embed(input({1, 1, 32, 32, 32}, 1)).shape(), (Shape{1, 8, 16, 16, 16}));
    EXPECT_THROW(m.patch_embed(input({1, 1, 32, 31, 32}, 1)), ShapeError);
}

TEST(PatchEmbed, ZeroInputGivesZero) {
    UXNetModel<float> m(UXNetConfig::tiny(), 0);
    NoGradScope<float> off;
    const auto y = m.patch_embed(Var<float>::constant(Tensor<float>({1, 1, 8, 8, 8})));
    for (float v : y.value().values()) EXPECT_EQ(v, 0.0f);
}

TEST(Downsample, ReferenceGeometry) {
    const auto& m = reference_model();
    NoGradScope<float> off;
    EXPECT_EQ(m.downsample(input({1, 48, 48, 48, 48}, 2), 0).shape(), (Shape{1, 96, 24, 24, 24}));
    EXPECT_EQ(m.downsample(input({1, 384, 6, 6, 6}, 2), 3).shape(), (Shape{1, 768, 3, 3, 3}));
    EXPECT_THROW(m.downsample(input({1, 48, 5, 4, 4}, 2), 0), ShapeError);
    EXPECT_THROW(m.downsample(input({1, 48, 4, 4, 4}, 2), 4), std::out_of_range);
}

TEST(Downsample, TinyHasNoLayerIntoTheDeepestLevel) {
    UXNetModel<float> m(UXNetConfig::tiny(), 0);
    NoGradScope<float> off;
    EXPECT_THROW(m.downsample(input({1, 64, 2, 2, 2}, 1), 3), std::out_of_range);
}

TEST(Block, ZeroWeightsAreIdentity) {
    for (ScalingMode mode : {ScalingMode::DCS, ScalingMode::MLP, ScalingMode::NONE}) {
        ParamStore<float> store;
        Rng rng(0);
        const auto block = UXNetBlock<float>::make(store, "b", 6, 5, mode, ConvMode::DEPTHWISE, rng);
        for (const auto& p : store.all()) p->value.fill(0.0f);
        NoGradScope<float> off;
        const auto z = input({2, 6, 4, 5, 3}, 4);
        EXPECT_EQ(block(z).value(), z.value()) << to_string(mode);
    }
}

TEST(Block, NoneModeIsFirstResidualBranch) {
    ParamStore<float> store;
    Rng rng(1);
    const auto block = UXNetBlock<float>::make(store, "b", 4, 3, ScalingMode::NONE, ConvMode::DEPTHWISE, rng);
    NoGradScope<float> off;
    const auto z = input({1, 4, 5, 5, 5}, 5);
    const auto expect = add(block.dwc(block.ln1(z)), z);
    EXPECT_EQ(block(z).value(), expect.value());
    EXPECT_EQ(store.find("b.expand.weight"), nullptr);
}

TEST(Block, DcsAndMlpDifferButKeepShape) {
    Rng r1(9), r2(9);
    ParamStore<float> s1, s2;
    const auto dcs = UXNetBlock<float>::make(s1, "b", 48, 7, ScalingMode::DCS, ConvMode::DEPTHWISE, r1);
    const auto mlp = UXNetBlock<float>::make(s2, "b", 48, 7, ScalingMode::MLP, ConvMode::DEPTHWISE, r2);
    NoGradScope<float> off;
    const auto z = input({1, 48, 24, 24, 24}, 6);
    const auto a = dcs(z), b = mlp(z);
    EXPECT_EQ(a.shape(), z.shape());
    EXPECT_EQ(b.shape(), z.shape());
    EXPECT_GT(uxnet::testing::max_abs_diff(a.value(), b.value()), 1e-4);
}

TEST(Block, ParameterCounts) {
    const int64_t c = 12, k = 7;
    ParamStore<float> dcs, mlp, dense;
    Rng rng(0);
    UXNetBlock<float>::make(dcs, "b", c, k, ScalingMode::DCS, ConvMode::DEPTHWISE, rng);
    UXNetBlock<float>::make(mlp, "b", c, k, ScalingMode::MLP, ConvMode::DEPTHWISE, rng);
    UXNetBlock<float>::make(dense, "b", c, k, ScalingMode::DCS, ConvMode::STANDARD, rng);
    const int64_t dwc = c * k * k * k + c;
    EXPECT_EQ(store_numel(dcs, "b.dwc"), dwc);
    EXPECT_EQ(store_numel(dcs, "b.expand") + store_numel(dcs, "b.compress"), 13 * c);
    EXPECT_EQ(store_numel(mlp, "b.expand") + store_numel(mlp, "b.compress"), 8 * c * c + 5 * c);
    EXPECT_EQ(dcs.total_numel(), dwc + 4 * c + 13 * c);
    EXPECT_EQ(store_numel(dense, "b.dwc"), c * c * k * k * k + c);
}

TEST(Block, ChannelMismatchThrows) {
    ParamStore<float> store;
    Rng rng(0);
    const auto block = UXNetBlock<float>::make(store, "b", 4, 3, ScalingMode::DCS, ConvMode::DEPTHWISE, rng);
    NoGradScope<float> off;
    EXPECT_THROW(block(input({1, 5, 4, 4, 4}, 1)), ShapeError);
}

// Perturbing one input channel of the depthwise conv moves only that output
// channel.
TEST(Block, DepthwiseConvKeepsChannelsApart) {
    ParamStore<float> store;
    Rng rng(2);
    const auto block = UXNetBlock<float>::make(store, "b", 4, 3, ScalingMode::DCS, ConvMode::DEPTHWISE, rng);
    NoGradScope<float> off;
    auto xv = input({1, 4, 5, 5, 5}, 7).value();
    const auto base = block.dwc(Var<float>::constant(xv)).value();
    for (int64_t i = 0; i < 125; ++i) xv[2 * 125 + i] += 1.0f;
    const auto moved = block.dwc(Var<float>::constant(xv)).value();
    for (int64_t ch = 0; ch < 4; ++ch) {
        bool changed = false;
        for (int64_t i = 0; i < 125; ++i) changed |= base[ch * 125 + i] != moved[ch * 125 + i];
        EXPECT_EQ(changed, ch == 2) << "channel " << ch;
    }
}

TEST(Encoder, FeatureLadder) {
    UXNetConfig c = small_config();
    c.bottleneck_channels = 64;
    c.bottleneck_block = true;
    UXNetModel<float> m(c, 0);
    NoGradScope<float> off;
    const auto f = m.encode(input({1, 1, 32, 32, 32}, 1));
    ASSERT_EQ(f.stages.size(), 4u);
    for (size_t s = 0; s < 4; ++s) {
        const int64_t e = 16 >> s;
        EXPECT_EQ(f.stages[s].shape(), (Shape{1, c.stage_channels[s], e, e, e}));
    }
    EXPECT_EQ(f.bottleneck.shape(), (Shape{1, 64, 1, 1, 1}));
}

TEST(Forward, LogitsMatchInputExtent) {
    UXNetConfig c = small_config();
    c.num_classes = 5;
    UXNetModel<float> m(c, 0);
    NoGradScope<float> off;
    const auto out = m.forward(input({2, 1, 32, 16, 48}, 2));
    EXPECT_EQ(out.logits.shape(), (Shape{2, 5, 32, 16, 48}));
    EXPECT_TRUE(out.aux.empty());
}

TEST(Forward, DeepSupervisionAddsThreeAuxHeads) {
    UXNetConfig c = small_config();
    c.bottleneck_channels = 64;
    c.deep_supervision = true;
    UXNetModel<float> m(c, 0);
    NoGradScope<float> off;
    const auto out = m.forward(input({1, 1, 32, 32, 32}, 3));
    ASSERT_EQ(out.aux.size(), 3u);
    for (const auto& a : out.aux) EXPECT_EQ(a.shape(), out.logits.shape());
}

TEST(Forward, RejectsBadInput) {
    UXNetModel<float> m(small_config(), 0);
    NoGradScope<float> off;
    EXPECT_THROW(m.forward(input({1, 1, 24, 32, 32}, 1)), ShapeError);
    EXPECT_THROW(m.forward(input({1, 2, 32, 32, 32}, 1)), ShapeError);
    EXPECT_THROW(m.forward(input({1, 32, 32, 32}, 1)), ShapeError);
}

TEST(Forward, TinyBackwardReachesEveryParameter) {
    UXNetModel<float> m(small_config(), 5);
    GradTape<float> tape;
    TapeScope<float> scope(tape);
    const auto out = m.forward(input({1, 1, 32, 32, 32}, 4));
    tape.backward(mean(mul(out.logits, out.logits)));
    for (const auto& p : m.params().all()) {
        double norm = 0;
        for (float g : p->grad.values()) {
            ASSERT_TRUE(std::isfinite(g)) << p->name;
            norm += std::abs(g);
        }
        EXPECT_GT(norm, 0.0) << p->name;
    }
}

TEST(Weights, SaveLoadRoundTrip) {
    TempDir dir;
    const std::string path = dir.file("w.uxck");
    UXNetModel<float> a(small_config(), 1), b(small_config(), 2);
    save_weights(a, path);
    load_weights(b, path);
    for (size_t i = 0; i < a.params().all().size(); ++i)
        EXPECT_EQ(a.params().all()[i]->value, b.params().all()[i]->value);
    NoGradScope<float> off;
    const auto x = input({1, 1, 32, 32, 32}, 8);
    EXPECT_EQ(a.forward(x).logits.value(), b.forward(x).logits.value());
    EXPECT_EQ(checkpoint_model_config(path), small_config());
}

TEST(Weights, TruncatedFileLeavesModelUntouched) {
    TempDir dir;
    const std::string path = dir.file("w.uxck");
    UXNetModel<float> a(small_config(), 1), b(small_config(), 2);
    save_weights(a, path);
    std::filesystem::resize_file(path, std::filesystem::file_size(path) - 100);
    std::vector<Tensor<float>> before;
    for (const auto& p : b.params().all()) before.push_back(p->value);
    EXPECT_THROW(load_weights(b, path), CheckpointError);
    for (size_t i = 0; i < before.size(); ++i) EXPECT_EQ(b.params().all()[i]->value, before[i]);
}

TEST(Weights, DifferentConfigListsNames) {
    TempDir dir;
    const std::string path = dir.file("w.uxck");
    UXNetConfig other = small_config();
    other.scaling_mode = ScalingMode::NONE;
    UXNetModel<float> a(small_config(), 1), b(other, 1);
    save_weights(a, path);
    try {
        load_weights(b, path);
        FAIL() << "expected a name mismatch";
    } catch (const CheckpointError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("unexpected"), std::string::npos) << msg;
        EXPECT_NE(msg.find("encoder.stage0.block0.expand.weight"), std::string::npos) << msg;
    }
}

TEST(Weights, DeepSupervisionWeightsNormalize) {
    const auto w = normalized_weights({1.0, 0.5, 0.25, 0.25});
    EXPECT_DOUBLE_EQ(w[0], 0.5);
    EXPECT_DOUBLE_EQ(w[3], 0.125);
    EXPECT_THROW(normalized_weights({0.0, 0.0}), std::invalid_argument);
}
