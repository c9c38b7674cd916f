#include <gtest/gtest.h>

#include "tadsr/tensor.hpp"

using namespace tadsr;

TEST(Tensor, ShapeAndIndexing) {
    Tensor<float> t(Shape{2, 3, 4, 5});
    EXPECT_EQ(t.size(), 120u);
    EXPECT_EQ(t.shape().per_sample(), 60u);
    t.at(1, 2, 3, 4) = 7.f;
    EXPECT_EQ(t[119], 7.f);
    EXPECT_THROW(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
    EXPECT_THROW((void)t.item(), ShapeError);
    EXPECT_EQ(Tensor<float>::scalar(3.f).item(), 3.f);
}

TEST(Tensor, BatchSliceAndStack) {
    Rng rng(3);
    const auto t = randn<float>(Shape{4, 2, 3, 3}, rng);
    const auto a = t.batch_slice(0, 1), b = t.batch_slice(1, 3);
    EXPECT_EQ(b.shape().n, 3);
    const std::vector<Tensor<float>> parts{a, b};
    EXPECT_EQ(stack_batch<float>(parts), t);
    EXPECT_THROW((void)t.batch_slice(3, 2), ShapeError);
}

TEST(Tensor, Arithmetic) {
    Tensor<double> a(Shape{1, 1, 1, 3}, {1, 2, 3});
    Tensor<double> b(Shape{1, 1, 1, 3}, {0.5, 0.5, 0.5});
    EXPECT_EQ((a - b)[2], 2.5);
    EXPECT_EQ((a * 2.0)[1], 4.0);
    EXPECT_DOUBLE_EQ(mean_squared_diff(a, b), (0.25 + 2.25 + 6.25) / 3);
    EXPECT_EQ(max_abs_diff(a, b), 2.5);
    EXPECT_THROW(a += Tensor<double>(Shape{1, 1, 1, 2}), ShapeError);
}

TEST(Tensor, RandomIsSeeded) {
    Rng r1(9), r2(9);
    EXPECT_EQ(randn<float>(Shape{1, 3, 8, 8}, r1), randn<float>(Shape{1, 3, 8, 8}, r2));
    Rng r3(1);
    const auto u = rand_uniform<double>(Shape{1, 1, 10, 10}, r3, -0.5, 0.5);
    EXPECT_LE(max_abs(u), 0.5);
    EXPECT_TRUE(all_finite(u));
}
