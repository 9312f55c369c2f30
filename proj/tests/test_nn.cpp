#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"
#include "uxnet/nn.hpp"
#include "uxnet/ops.hpp"

using namespace uxnet;
using uxnet::testing::random_tensor;

namespace {

template <typename T>
Var<T> c(Tensor<T> t) {
    return Var<T>::constant(std::move(t));
}

template <typename T>
Tensor<T> ones(int64_t n) {
    return Tensor<T>({n}, T(1));
}

template <typename T>
Tensor<T> zeros(int64_t n) {
    return Tensor<T>({n});
}

}  // namespace

TEST(Conv3d, DepthwiseOnesCountsNeighbours) {
    const auto spec = Conv3dSpec::cube(1, 1, 3, 1, 1, 1, false);
    const auto y = conv3d(c(Tensor<float>({1, 1, 3, 3, 3}, 1.0f)), spec, c(Tensor<float>(spec.weight_shape(), 1.0f)),
                          Var<float>());
    EXPECT_EQ(y.value().at({0, 0, 1, 1, 1}), 27.0f);
    EXPECT_EQ(y.value().at({0, 0, 0, 0, 0}), 8.0f);
    EXPECT_EQ(y.value().at({0, 0, 2, 0, 2}), 8.0f);
    EXPECT_EQ(y.value().at({0, 0, 1, 0, 0}), 12.0f);
}

TEST(Conv3d, CentreTapIsIdentity) {
    Rng rng(1);
    const auto x = random_tensor<double>({2, 3, 4, 5, 3}, rng);
    const auto spec = Conv3dSpec::cube(3, 3, 3, 1, 1, 3, false);
    Tensor<double> w(spec.weight_shape());
    for (int64_t ch = 0; ch < 3; ++ch) w.at({ch, 0, 1, 1, 1}) = 1.0;
    EXPECT_EQ(conv3d(c(x), spec, c(w), Var<double>()).value(), x);
}

TEST(Conv3d, PatchEmbedGeometry) {
    const auto spec = Conv3dSpec::cube(1, 48, 7, 2, 3);
    EXPECT_EQ(spec.output_shape({1, 1, 96, 96, 96}), (Shape{1, 48, 48, 48, 48}));
}

TEST(Conv3d, WeightShapeMismatchThrows) {
    const auto spec = Conv3dSpec::cube(2, 2, 3, 1, 1);
    EXPECT_THROW(conv3d(c(Tensor<float>({1, 2, 4, 4, 4})), spec, c(Tensor<float>({2, 2, 3, 3, 1})), Var<float>()),
                 ShapeError);
    EXPECT_THROW(conv3d(c(Tensor<float>({1, 3, 4, 4, 4})), spec, c(Tensor<float>(spec.weight_shape())), Var<float>()),
                 ShapeError);
}

TEST(Conv3d, DepthwiseChannelsAreIndependent) {
    Rng rng(2);
    const auto spec = Conv3dSpec::cube(4, 4, 3, 1, 1, 4);
    const auto w = random_tensor<float>(spec.weight_shape(), rng);
    const auto b = random_tensor<float>({4}, rng);
    auto x = random_tensor<float>({1, 4, 5, 5, 5}, rng);
    const auto before = conv3d(c(x), spec, c(w), c(b)).value();
    for (int64_t i = 0; i < 125; ++i) x[2 * 125 + i] += 3.0f;  // perturb channel 2 only
    const auto after = conv3d(c(x), spec, c(w), c(b)).value();
    for (int64_t ch = 0; ch < 4; ++ch) {
        bool same = true;
        for (int64_t i = 0; i < 125; ++i) same &= before[ch * 125 + i] == after[ch * 125 + i];
        EXPECT_EQ(same, ch != 2) << "channel " << ch;
    }
}

TEST(DepthwiseMultiplier, DuplicatesChannelsInChannelMajorOrder) {
    Rng rng(3);
    const auto x = random_tensor<float>({1, 2, 2, 3, 2}, rng);
    const auto y = conv3d_depthwise_multiplier(c(x), 4, c(Tensor<float>({8, 1, 1, 1, 1}, 1.0f)), c(zeros<float>(8)));
    ASSERT_EQ(y.shape(), (Shape{1, 8, 2, 3, 2}));
    for (int64_t o = 0; o < 8; ++o)
        for (int64_t v = 0; v < 12; ++v) ASSERT_EQ(y.value()[o * 12 + v], x[(o / 4) * 12 + v]);
}

TEST(DepthwiseMultiplier, ZeroWeightsGiveBias) {
    Rng rng(4);
    const auto x = random_tensor<double>({1, 2, 2, 2, 2}, rng);
    Tensor<double> b({8});
    for (int64_t i = 0; i < 8; ++i) b[i] = 0.5 * double(i);
    const auto y = conv3d_depthwise_multiplier(c(x), 4, c(Tensor<double>({8, 1, 1, 1, 1})), c(b));
    for (int64_t o = 0; o < 8; ++o)
        for (int64_t v = 0; v < 8; ++v) EXPECT_EQ(y.value()[o * 8 + v], 0.5 * double(o));
}

TEST(DepthwiseMultiplier, WrongWeightShapeThrows) {
    const auto x = c(Tensor<float>({1, 2, 2, 2, 2}));
    EXPECT_THROW(conv3d_depthwise_multiplier(x, 4, c(Tensor<float>({8, 2, 1, 1, 1})), c(zeros<float>(8))),
                 ShapeError);
}

TEST(ConvTranspose3d, UpsamplingShape) {
    const auto spec = Conv3dSpec::cube(4, 2, 2, 2, 0, 1, false);
    const auto y = conv_transpose3d(c(Tensor<float>({1, 4, 4, 4, 4})), spec,
                                    c(Tensor<float>(spec.transposed_weight_shape())), Var<float>());
    EXPECT_EQ(y.shape(), (Shape{1, 2, 8, 8, 8}));
}

TEST(ConvTranspose3d, AdjointInFloat32) {
    Rng rng(5);
    const auto spec = Conv3dSpec::cube(3, 5, 2, 2, 0, 1, false);
    const auto x = random_tensor<float>({1, 3, 4, 2, 6}, rng);
    const auto w = random_tensor<float>(spec.weight_shape(), rng);
    const auto y = conv3d_forward(x, w, static_cast<const Tensor<float>*>(nullptr), spec);
    const auto g = random_tensor<float>(y.shape(), rng);
    // The transposed conv with the adjoint spec reads the same weight tensor.
    const auto back = conv_transpose3d(c(g), spec.adjoint(), c(w), Var<float>()).value();
    ASSERT_EQ(back.shape(), x.shape());
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < y.numel(); ++i) lhs += double(y[i]) * g[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += double(x[i]) * back[i];
    EXPECT_NEAR(lhs, rhs, 1e-5 * std::max(1.0, std::abs(lhs)));
}

TEST(LayerNorm, ConstantVectorMapsToZero) {
    const auto y = layer_norm_channel(c(Tensor<float>({1, 3, 2, 2, 2}, 4.0f)), NormSpec::layer_norm(3),
                                      c(ones<float>(3)), c(zeros<float>(3)));
    for (float v : y.value().storage()) EXPECT_EQ(v, 0.0f);
}

TEST(LayerNorm, UnitVariancePair) {
    const auto y = layer_norm_channel(c(Tensor<double>({1, 2, 1, 1, 1}, std::vector<double>{1, -1})),
                                      NormSpec::layer_norm(2), c(ones<double>(2)), c(zeros<double>(2)));
    const double expect = 1.0 / std::sqrt(1.0 + 1e-6);
    EXPECT_NEAR(y.value()[0], expect, 1e-15);
    EXPECT_NEAR(y.value()[1], -expect, 1e-15);
}

TEST(LayerNorm, InvariantToChannelShift) {
    Rng rng(6);
    auto x = random_tensor<float>({2, 5, 3, 3, 3}, rng);
    const auto gamma = random_tensor<float>({5}, rng);
    const auto beta = random_tensor<float>({5}, rng);
    const auto spec = NormSpec::layer_norm(5);
    const auto a = layer_norm_channel(c(x), spec, c(gamma), c(beta)).value();
    // Add a different constant to every voxel's channel vector.
    for (int64_t n = 0; n < 2; ++n)
        for (int64_t v = 0; v < 27; ++v)
            for (int64_t ch = 0; ch < 5; ++ch) x[(n * 5 + ch) * 27 + v] += 0.1f * float(v) - 1.0f;
    const auto b = layer_norm_channel(c(x), spec, c(gamma), c(beta)).value();
    EXPECT_LT(uxnet::testing::max_abs_diff(a, b), 1e-5);
}

TEST(LayerNorm, AffineAppliedPerChannel) {
    const auto y = layer_norm_channel(c(Tensor<double>({1, 2, 1, 1, 1}, std::vector<double>{3, 1})),
                                      NormSpec::layer_norm(2), c(Tensor<double>({2}, std::vector<double>{2, 3})),
                                      c(Tensor<double>({2}, std::vector<double>{10, 20})));
    const double n = 1.0 / std::sqrt(1.0 + 1e-6);
    EXPECT_NEAR(y.value()[0], 10 + 2 * n, 1e-12);
    EXPECT_NEAR(y.value()[1], 20 - 3 * n, 1e-12);
}

TEST(LayerNorm, ChannelMismatchThrows) {
    EXPECT_THROW(layer_norm_channel(c(Tensor<float>({1, 3, 2, 2, 2})), NormSpec::layer_norm(4), c(ones<float>(4)),
                                    c(zeros<float>(4))),
                 ShapeError);
}

TEST(InstanceNorm, SpatiallyConstantChannelIsZero) {
    Tensor<float> x({1, 2, 3, 3, 3});
    for (int64_t i = 0; i < 27; ++i) {
        x[i] = 5.0f;
        x[27 + i] = float(i);
    }
    const auto y = instance_norm(c(x), NormSpec::instance_norm(2), c(ones<float>(2)), c(zeros<float>(2))).value();
    for (int64_t i = 0; i < 27; ++i) EXPECT_EQ(y[i], 0.0f);
}

TEST(InstanceNorm, ZeroMeanUnitVariancePerSampleChannel) {
    Rng rng(7);
    const auto x = random_tensor<double>({2, 3, 4, 4, 4}, rng, 3.0);
    const auto y = instance_norm(c(x), NormSpec::instance_norm(3), c(ones<double>(3)), c(zeros<double>(3))).value();
    for (int64_t s = 0; s < 6; ++s) {
        double m = 0, v = 0;
        for (int64_t i = 0; i < 64; ++i) m += y[s * 64 + i];
        m /= 64;
        for (int64_t i = 0; i < 64; ++i) v += (y[s * 64 + i] - m) * (y[s * 64 + i] - m);
        v /= 64;
        EXPECT_NEAR(m, 0.0, 1e-12);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(Normalize, DispatchesOnKind) {
    Rng rng(8);
    const auto x = c(random_tensor<double>({1, 3, 2, 2, 2}, rng));
    const auto g = c(ones<double>(3));
    const auto b = c(zeros<double>(3));
    EXPECT_EQ(normalize(x, NormSpec::layer_norm(3), g, b).value(), layer_norm_channel(x, NormSpec::layer_norm(3), g, b).value());
    EXPECT_EQ(normalize(x, NormSpec::instance_norm(3), g, b).value(),
              instance_norm(x, NormSpec::instance_norm(3), g, b).value());
}

TEST(NormSpec, RejectsNonPositiveEps) {
    NormSpec s = NormSpec::layer_norm(2);
    s.eps = 0;
    EXPECT_THROW(s.validate(), std::invalid_argument);
}

TEST(Gelu, ReferenceValues) {
    const auto y = gelu(c(Tensor<double>({3}, std::vector<double>{0, 1, -10}))).value();
    EXPECT_EQ(y[0], 0.0);
    EXPECT_NEAR(y[1], 0.8413447460685429, 1e-12);
    EXPECT_NEAR(y[2], 0.0, 1e-6);
}

TEST(Gelu, OddPartIsIdentity) {
    Rng rng(9);
    const auto x = random_tensor<double>({200}, rng, 4.0);
    Tensor<double> neg = x;
    for (auto& v : neg.values()) v = -v;
    const auto a = gelu(c(x)).value();
    const auto b = gelu(c(neg)).value();
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_NEAR(a[i] - b[i], x[i], 1e-6);
}

TEST(LeakyRelu, Values) {
    const auto y = leaky_relu(c(Tensor<float>({3}, std::vector<float>{2, -2, 0})), 0.01f).value();
    EXPECT_EQ(y[0], 2.0f);
    EXPECT_FLOAT_EQ(y[1], -0.02f);
    EXPECT_EQ(y[2], 0.0f);
}

TEST(UpsampleNearest, RepeatsEachVoxel) {
    Tensor<float> x({1, 1, 2, 1, 1}, std::vector<float>{3, 7});
    const auto y = upsample_nearest(c(x), 2).value();
    ASSERT_EQ(y.shape(), (Shape{1, 1, 4, 2, 2}));
    for (int64_t i = 0; i < 2; ++i)
        for (int64_t j = 0; j < 2; ++j) {
            EXPECT_EQ(y.at({0, 0, 0, i, j}), 3.0f);
            EXPECT_EQ(y.at({0, 0, 1, i, j}), 3.0f);
            EXPECT_EQ(y.at({0, 0, 2, i, j}), 7.0f);
            EXPECT_EQ(y.at({0, 0, 3, i, j}), 7.0f);
        }
}
