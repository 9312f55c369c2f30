#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <map>
#include <set>

#include "uxnet/gradcheck.hpp"

using namespace uxnet;

namespace {

Tensor<double> vec(std::vector<double> v) {
    const auto n = static_cast<int64_t>(v.size());
    return Tensor<double>({n}, std::move(v));
}

}  // namespace

TEST(CompareGradients, RelativeRuleAboveCutOver) {
    const auto c = compare_gradients(vec({1.0, -2.0}), vec({1.00005, -2.0}));
    EXPECT_TRUE(c.passed());
    EXPECT_NEAR(c.max_rel, 0.00005 / 1.00005, 1e-12);
    EXPECT_FALSE(compare_gradients(vec({1.0}), vec({1.0002})).passed());
}

TEST(CompareGradients, NearZeroElementsUseAbsoluteTolerance) {
    // 5e-4 is below the 1e-3 cut-over: judged absolutely.
    EXPECT_TRUE(compare_gradients(vec({5e-4}), vec({5e-4 + 9e-8})).passed());
    EXPECT_FALSE(compare_gradients(vec({5e-4}), vec({5e-4 + 2e-7})).passed());
    // An analytic zero against numeric round-off passes.
    EXPECT_TRUE(compare_gradients(vec({0.0}), vec({3e-11})).passed());
}

TEST(CompareGradients, NonFiniteAlwaysFails) {
    EXPECT_FALSE(compare_gradients(vec({std::nan("")}), vec({0.0})).passed());
    EXPECT_FALSE(compare_gradients(vec({1.0}), vec({std::numeric_limits<double>::infinity()})).passed());
}

TEST(CompareGradients, ShapeMismatchThrows) {
    EXPECT_THROW(compare_gradients(vec({1, 2}), vec({1, 2, 3})), ShapeError);
}

TEST(CompareGradients, EmptyComparisonIsNotAPass) {
    EXPECT_FALSE(GradCompare{}.passed());
}

TEST(Registry, CoversEveryDifferentiablePrimitive) {
    const auto ops = gradcheck_ops();
    const std::set<std::string> have(ops.begin(), ops.end());
    for (const char* op : {"add", "sub", "mul", "mul_scalar", "add_scalar", "sum", "mean", "concat_channels",
                           "softmax_channels", "conv3d", "conv3d_depthwise", "conv3d_grouped", "conv_transpose3d",
                           "depthwise_multiplier", "layer_norm_channel", "instance_norm", "gelu", "leaky_relu",
                           "upsample_nearest", "dice_loss", "cross_entropy", "uxnet_block", "res_unit"}) {
        EXPECT_TRUE(have.count(op)) << op;
    }
    EXPECT_FALSE(have.count("faulty_scale"));
    const auto with_fault = gradcheck_ops(true);
    EXPECT_EQ(std::set<std::string>(with_fault.begin(), with_fault.end()).count("faulty_scale"), 1u);
}

// Full sweep in float64: every op, at least three random shapes each.
TEST(Sweep, AllOpsPass) {
    const auto results = run_gradcheck("all", 0);
    std::map<std::string, int> cases;
    for (const auto& r : results) {
        ++cases[r.op];
        EXPECT_TRUE(r.cmp.passed()) << r.op << " / " << r.case_name << ": max rel " << r.cmp.max_rel << ", max abs "
                                    << r.cmp.max_abs << ", failures " << r.cmp.failures;
    }
    for (const auto& [op, n] : cases) EXPECT_GE(n, 3) << op;
    EXPECT_EQ(cases.size(), gradcheck_ops().size());
}

TEST(Sweep, OtherSeedsPass) {
    for (uint64_t seed : {1u, 17u, 123u}) {
        for (const auto& r : run_gradcheck("all", seed)) {
            EXPECT_TRUE(r.cmp.passed()) << "seed " << seed << ": " << r.op << " / " << r.case_name << " max rel "
                                        << r.cmp.max_rel;
        }
    }
}

TEST(Sweep, SingleScope) {
    const auto results = run_gradcheck("gelu", 3);
    ASSERT_GE(results.size(), 3u);
    for (const auto& r : results) {
        EXPECT_EQ(r.op, "gelu");
        EXPECT_TRUE(r.cmp.passed());
    }
    EXPECT_THROW(run_gradcheck("no_such_op"), std::invalid_argument);
}

// Negative control: a backward rule that is 10% off must be caught.
TEST(Sweep, InjectedFaultIsDetected) {
    const auto results = run_gradcheck("faulty_scale", 0, true);
    ASSERT_GE(results.size(), 3u);
    for (const auto& r : results) {
        EXPECT_FALSE(r.cmp.passed()) << r.case_name;
        EXPECT_NEAR(r.cmp.max_rel, 0.2 / 2.2, 1e-6);
    }
}
