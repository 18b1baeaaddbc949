#include "stdsnn/graph.hpp"

#include <gtest/gtest.h>

#include "stdsnn/ops.hpp"

using stdsnn::make_leaf;
using stdsnn::Tensor;

TEST(Graph, SumGradientIsOnes) {
  Tensor<double> x({2, 3}, 1.5);
  auto xn = make_leaf(std::move(x), true);
  auto loss = stdsnn::ops::sum_all(xn);
  stdsnn::backprop(loss);
  for (std::int64_t i = 0; i < xn->grad.numel(); ++i) EXPECT_EQ(xn->grad[i], 1.0);
}

TEST(Graph, SumOfSquaresGradientIsTwoX) {
  Tensor<double> x({4});
  for (int i = 0; i < 4; ++i) x[i] = i - 1.5;
  auto xn = make_leaf(std::move(x), true);
  auto loss = stdsnn::ops::sum_all(stdsnn::ops::mul(xn, xn));
  stdsnn::backprop(loss);
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(xn->grad[i], 2.0 * xn->value[i]);
}

TEST(Graph, DiamondAccumulatesBothPaths) {
  // loss = sum(x + x) -> grad = 2
  Tensor<double> x({3}, 1.0);
  auto xn = make_leaf(std::move(x), true);
  auto loss = stdsnn::ops::sum_all(stdsnn::ops::add(xn, xn));
  stdsnn::backprop(loss);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(xn->grad[i], 2.0);
}

TEST(Graph, NonScalarLossRejected) {
  auto xn = make_leaf(Tensor<double>({2}, 1.0), true);
  auto y = stdsnn::ops::add(xn, xn);
  EXPECT_THROW(stdsnn::backprop(y), std::invalid_argument);
}

TEST(Graph, RepeatedBackpropAccumulates) {
  auto xn = make_leaf(Tensor<double>({2}, 3.0), true);
  auto loss = stdsnn::ops::sum_all(xn);
  stdsnn::backprop(loss);
  stdsnn::backprop(loss);
  EXPECT_EQ(xn->grad[0], 2.0);
  stdsnn::zero_grads(loss);
  EXPECT_EQ(xn->grad[0], 0.0);
  stdsnn::backprop(loss);
  EXPECT_EQ(xn->grad[0], 1.0);
}

TEST(Graph, NoGradLeavesStayUntouched) {
  auto a = make_leaf(Tensor<double>({2}, 1.0), true);
  auto b = make_leaf(Tensor<double>({2}, 5.0), false);
  auto loss = stdsnn::ops::sum_all(stdsnn::ops::mul(a, b));
  stdsnn::backprop(loss);
  EXPECT_EQ(a->grad[0], 5.0);
  EXPECT_EQ(b->grad[0], 0.0);
}

TEST(Graph, ConstantGraphIsPruned) {
  auto a = make_leaf(Tensor<double>({2}, 1.0), false);
  auto b = make_leaf(Tensor<double>({2}, 2.0), false);
  auto y = stdsnn::ops::add(a, b);
  EXPECT_FALSE(y->requires_grad);
  EXPECT_TRUE(y->inputs.empty());  // no backward record kept
}

TEST(Graph, ChainRuleThroughScale) {
  auto xn = make_leaf(Tensor<double>({2}, 2.0), true);
  auto loss = stdsnn::ops::sum_all(stdsnn::ops::scale(stdsnn::ops::mul(xn, xn), 3.0));
  stdsnn::backprop(loss);
  // d/dx 3x^2 = 6x = 12
  EXPECT_DOUBLE_EQ(xn->grad[0], 12.0);
  EXPECT_DOUBLE_EQ(xn->grad[1], 12.0);
}
