#include <cmath>

#include <gtest/gtest.h>

#include "vdu/denoiser.hpp"

using namespace vdu;

TEST(Denoiser, EmbeddingHandValues) {
  auto e = embed_time(3, 4, 10000.0);
  ASSERT_EQ(e.size(), 4);
  EXPECT_DOUBLE_EQ(e(0), std::sin(3.0));
  EXPECT_DOUBLE_EQ(e(1), std::cos(3.0));
  EXPECT_NEAR(e(2), std::sin(0.03), 1e-15);
  EXPECT_NEAR(e(3), std::cos(0.03), 1e-15);
  EXPECT_THROW(embed_time(0, 4, 10000.0), ConfigError);
  EXPECT_THROW(embed_time(1, 3, 10000.0), ConfigError);
}

TEST(Denoiser, OneHiddenUnitForwardByHand) {
  DenoiserArch arch;
  arch.input_dim = 1;
  arch.hidden_dims = {1};
  arch.embed_dim = 2;
  ASSERT_EQ(arch.num_params(), 3 + 1 + 1 + 1);
  ParamVector p{Eigen::VectorXd(6)};
  p.values << 0.5, -1.0, 2.0, 0.1, 1.5, -0.2;  // w1 (x, sin, cos), b1, w2, b2
  const double x = 0.7;
  const int t = 2;
  const double pre = 0.5 * x - 1.0 * std::sin(2.0) + 2.0 * std::cos(2.0) + 0.1;
  const double expected = 1.5 * pre / (1.0 + std::exp(-pre)) - 0.2;
  Eigen::VectorXd xt(1);
  xt << x;
  EXPECT_NEAR(predict_noise(arch, p, xt, t, 10)(0), expected, 1e-14);
  EXPECT_NEAR(forward(arch, p, xt, embed_time(t, 2, arch.max_period))(0), expected, 1e-14);
}

TEST(Denoiser, BatchAgreesWithSingleRows) {
  DenoiserArch arch;
  arch.hidden_dims = {16, 8};
  arch.embed_dim = 8;
  auto p = init_params(arch, 5);
  Eigen::MatrixXd x(3, 2);
  x << 0.1, -0.2, 1.0, 2.0, -3.0, 0.5;
  std::vector<int> ts{1, 7, 20};
  auto batch = predict_noise_batch(arch, p, x, ts, 20);
  for (int r = 0; r < 3; ++r) {
    auto one = predict_noise(arch, p, x.row(r).transpose(), ts[static_cast<std::size_t>(r)], 20);
    EXPECT_LT((batch.row(r).transpose() - one).cwiseAbs().maxCoeff(), 1e-14);
  }
  EXPECT_THROW(predict_noise_batch(arch, p, x, {1, 2, 21}, 20), ConfigError);
  EXPECT_THROW(predict_noise_batch(arch, p, x, {1, 2}, 20), ConfigError);
}

TEST(Denoiser, InitStdFollowsFanIn) {
  DenoiserArch arch;  // hidden layer 128 -> 128 holds 16384 weights
  auto p = init_params(arch, 42);
  auto layout = arch.layout();
  const auto& slot = layout.layers[1];
  auto w = p.values.segment(slot.offset, slot.weight_count());
  const double mean = w.mean();
  const double sd = std::sqrt((w.array() - mean).square().sum() / static_cast<double>(w.size() - 1));
  const double expected = 1.0 / std::sqrt(3.0 * slot.in);
  EXPECT_NEAR(sd, expected, 0.2 * expected);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), 1.0 / std::sqrt(static_cast<double>(slot.in)));
}

TEST(Denoiser, InitIsSeedDeterministic) {
  DenoiserArch arch;
  EXPECT_EQ(init_params(arch, 9), init_params(arch, 9));
  EXPECT_FALSE(init_params(arch, 9) == init_params(arch, 10));
}

TEST(Denoiser, OutputIsLocallyLipschitz) {
  DenoiserArch arch;
  auto p = init_params(arch, 3);
  Eigen::VectorXd x(2);
  x << 0.3, -0.4;
  auto y = predict_noise(arch, p, x, 10, 100);
  for (double h : {1e-3, 1e-2, 1e-1}) {
    Eigen::VectorXd dx(2);
    dx << h, -h;
    auto y2 = predict_noise(arch, p, x + dx, 10, 100);
    EXPECT_LT((y2 - y).norm(), 50.0 * dx.norm());
  }
  EXPECT_TRUE(y.allFinite());
}

TEST(Denoiser, ParameterLengthIsChecked) {
  DenoiserArch arch;
  ParamVector p{Eigen::VectorXd::Zero(arch.num_params() - 1)};
  EXPECT_THROW(predict_noise(arch, p, Eigen::VectorXd::Zero(2), 1, 10), ConfigError);
  DenoiserArch odd;
  odd.embed_dim = 5;
  EXPECT_THROW(odd.layout(), ConfigError);
}
