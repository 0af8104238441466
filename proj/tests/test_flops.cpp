// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "mats/flops.hpp"

using namespace mats;

TEST(Flops, ScalingVectorColumn) {
    const auto spec = reference_vector_spec();
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::averaging, spec), 2256000.0);
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::task_arithmetic, spec), 4794000.0);
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::averaging, spec)), "2.3E6");
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::task_arithmetic, spec)), "4.8E6");
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::diag_fisher, spec)), "6.5E6");
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::ties, spec)), "5.0E7");
}

TEST(Flops, FullModelColumn) {
    const auto spec = reference_full_model_spec();
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::averaging, spec)), "6.3E9");
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::task_arithmetic, spec)), "1.3E10");
    EXPECT_EQ(format_sci2(flops_estimate(FlopsMethod::diag_fisher, spec)), "1.8E10");
    const double ties = flops_estimate(FlopsMethod::ties, spec);
    EXPECT_LT(std::abs(ties - 1.8e11) / 1.8e11, 0.10);
}

TEST(Flops, TiesUsesNaturalLog) {
    const FlopsModelSpec spec{8, 282e3, {}, std::nullopt};
    const double expected = 9.8 * 8 * 282e3 + 8 * 282e3 * std::log(282e3) - 2 * 282e3;
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::ties, spec), expected);
    EXPECT_NEAR(expected, 4.99e7, 0.01e7);
}

TEST(Flops, PerLayerFormulasByHand) {
    // M = 2, one layer d = 3, k = 2, N = 5
    const FlopsModelSpec spec{2, 8, {{3, 2, 1}}, 5.0};
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::regmean, spec), 9 + 18 + 36 + 6 + 18);
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::mats, spec), 9 + 36 + 6 + 5 * (18 + 72));
    FlopsModelSpec doubled = spec;
    doubled.layers[0].count = 2;
    EXPECT_DOUBLE_EQ(flops_estimate(FlopsMethod::regmean, doubled), 2 * (9 + 18 + 36 + 6 + 18));
}

TEST(Flops, MissingFieldsAreSpecErrors) {
    const FlopsModelSpec no_layers{8, 1000, {}, 10.0};
    EXPECT_THROW(flops_estimate(FlopsMethod::regmean, no_layers), SpecError);
    EXPECT_THROW(flops_estimate(FlopsMethod::mats, no_layers), SpecError);
    const FlopsModelSpec no_iters{8, 1000, {{4, 4, 1}}, std::nullopt};
    EXPECT_THROW(flops_estimate(FlopsMethod::mats, no_iters), SpecError);
    EXPECT_THROW(flops_estimate(FlopsMethod::averaging, FlopsModelSpec{8, 0, {}, std::nullopt}), SpecError);
    EXPECT_THROW(flops_estimate(FlopsMethod::averaging, FlopsModelSpec{0, 10, {}, std::nullopt}), SpecError);
}

TEST(Flops, Formatting) {
    EXPECT_EQ(format_sci2(2256000), "2.3E6");
    EXPECT_EQ(format_sci2(9.96e9), "1.0E10");
    EXPECT_EQ(format_sci2(1.0), "1.0E0");
}
