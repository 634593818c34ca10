#include <gtest/gtest.h>

#include "support/gradcheck.hpp"
#include "vce/ops.hpp"

using namespace vce;
using vce::testing::gradcheck;
using vce::testing::probe_sum;
using vce::testing::random_tensor;
using V = ag::Var<double>;
using Inputs = std::vector<V>;

namespace {

constexpr double kTol = 1e-4;

TEST(Ops, Conv2dMatchesDirectLoop) {
  Rng rng(1);
  auto x = random_tensor({2, 3, 7, 6}, rng);
  auto w = random_tensor({4, 3, 3, 3}, rng);
  auto b = random_tensor({1, 1, 1, 4}, rng);
  V y = ops::conv2d(V(x), V(w), V(b), 2, 1);
  ASSERT_EQ(y.shape(), (Shape{2, 4, 4, 3}));
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j) {
          double s = b[o];
          for (int c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int yy = i * 2 - 1 + ki, xx = j * 2 - 1 + kj;
                if (yy >= 0 && yy < 7 && xx >= 0 && xx < 6) s += w(o, c, ki, kj) * x(n, c, yy, xx);
              }
          EXPECT_NEAR(y.value()(n, o, i, j), s, 1e-12);
        }
}

TEST(Ops, Conv2dGradient) {
  Rng rng(2);
  auto r = gradcheck(
      [](const Inputs& v) { return probe_sum(ops::conv2d(v[0], v[1], v[2], 2, 1)); },
      {random_tensor({2, 2, 6, 5}, rng), random_tensor({3, 2, 4, 4}, rng),
       random_tensor({1, 1, 1, 3}, rng)});
  EXPECT_LT(r.worst_relative, kTol);
}

TEST(Ops, ConvTransposeIsAdjointOfConv) {
  // <conv(x), y> == <x, conv_t(y)> for shared weights and no bias.
  Rng rng(3);
  auto x = random_tensor({1, 2, 8, 8}, rng);
  auto w = random_tensor({3, 2, 4, 4}, rng);
  V cx = ops::conv2d(V(x), V(w), V(), 2, 1);
  auto y = random_tensor(cx.shape(), rng);
  V ty = ops::conv_transpose2d(V(y), V(w), V(), 2, 1, 0);
  ASSERT_EQ(ty.shape(), x.shape());
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < y.numel(); ++i) lhs += cx.value()[i] * y[i];
  for (std::size_t i = 0; i < x.numel(); ++i) rhs += x[i] * ty.value()[i];
  EXPECT_NEAR(lhs, rhs, 1e-10);
}

TEST(Ops, ConvTransposeGradientWithOutputPadding) {
  Rng rng(4);
  auto r = gradcheck(
      [](const Inputs& v) { return probe_sum(ops::conv_transpose2d(v[0], v[1], v[2], 2, 1, 1)); },
      {random_tensor({2, 3, 4, 4}, rng), random_tensor({3, 2, 3, 3}, rng),
       random_tensor({1, 1, 1, 2}, rng)});
  EXPECT_LT(r.worst_relative, kTol);
}

TEST(Ops, BatchNormTrainGradient) {
  Rng rng(5);
  auto r = gradcheck(
      [](const Inputs& v) { return probe_sum(ops::batch_norm_train(v[0], v[1], v[2], 1e-5)); },
      {random_tensor({3, 2, 3, 3}, rng), random_tensor({1, 1, 1, 2}, rng),
       random_tensor({1, 1, 1, 2}, rng)});
  EXPECT_LT(r.worst_relative, kTol);
}

TEST(Ops, BatchNormEvalGradient) {
  Rng rng(6);
  Tensor<double> mean({1, 1, 1, 2}, 0.3), var({1, 1, 1, 2}, 1.7);
  auto r = gradcheck(
      [&](const Inputs& v) {
        return probe_sum(ops::batch_norm_eval(v[0], v[1], v[2], mean, var, 1e-5));
      },
      {random_tensor({2, 2, 3, 3}, rng), random_tensor({1, 1, 1, 2}, rng),
       random_tensor({1, 1, 1, 2}, rng)});
  EXPECT_LT(r.worst_relative, kTol);
}

TEST(Ops, InstanceNormGradientWithAndWithoutAffine) {
  Rng rng(7);
  auto r = gradcheck(
      [](const Inputs& v) { return probe_sum(ops::instance_norm(v[0], v[1], v[2], 1e-5)); },
      {random_tensor({2, 2, 4, 3}, rng), random_tensor({1, 1, 1, 2}, rng),
       random_tensor({1, 1, 1, 2}, rng)});
  EXPECT_LT(r.worst_relative, kTol);
  auto r2 = gradcheck(
      [](const Inputs& v) { return probe_sum(ops::instance_norm(v[0], V(), V(), 1e-5)); },
      {random_tensor({2, 2, 4, 3}, rng)});
  EXPECT_LT(r2.worst_relative, kTol);
}

TEST(Ops, PointwiseGradients) {
  Rng rng(8);
  auto x = random_tensor({1, 2, 3, 3}, rng, -2, 2);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::relu(v[0])); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::leaky_relu(v[0], 0.2)); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::sigmoid(v[0])); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::tanh(v[0])); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::affine(v[0], 0.5, 0.5)); }, {x}).worst_relative, kTol);
}

TEST(Ops, SpatialGradients) {
  Rng rng(9);
  auto x = random_tensor({2, 2, 4, 6}, rng);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::max_pool2d(v[0])); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::upsample2x(v[0])); }, {x}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::reflection_pad2d(v[0], 2)); }, {x}).worst_relative, kTol);
  auto y = random_tensor({2, 3, 4, 6}, rng);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::concat_channels(v[0], v[1])); }, {x, y}).worst_relative, kTol);
  EXPECT_LT(gradcheck([](const Inputs& v) { return probe_sum(ops::add(v[0], v[1])); }, {x, random_tensor(x.shape(), rng)}).worst_relative, kTol);
}

TEST(Ops, ReflectionPadValues) {
  Tensor<double> t({1, 1, 1, 3}, std::vector<double>{1, 2, 3});
  Tensor<double> t2({1, 1, 3, 3}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8, 9});
  V p = ops::reflection_pad2d(V(t2), 1);
  // Row above row 0 mirrors row 1.
  EXPECT_EQ(p.value()(0, 0, 0, 0), 5);
  EXPECT_EQ(p.value()(0, 0, 0, 1), 4);
  EXPECT_EQ(p.value()(0, 0, 4, 4), 5);
  (void)t;
}

TEST(Ops, NoGradGuardSkipsGraph) {
  V x(Tensor<double>({1, 1, 2, 2}, 1.0), true);
  ag::NoGradGuard guard;
  V y = ops::relu(x);
  EXPECT_FALSE(y.requires_grad());
}

TEST(Ops, GradientAccumulatesAcrossSharedUse) {
  V x(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0.2, 0.4}), true);
  V s = ops::weighted_sum<double>({{ops::mean_sq_to(x, 0.0), 1.0}, {ops::mean_sq_to(x, 1.0), 1.0}});
  s.backward();
  // d/dx [mean(x^2) + mean((x-1)^2)] = x + (x - 1)
  EXPECT_NEAR(x.grad()[0], 0.2 + (0.2 - 1), 1e-12);
  EXPECT_NEAR(x.grad()[1], 0.4 + (0.4 - 1), 1e-12);
}

}  // namespace
