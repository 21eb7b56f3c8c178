#include "doctest.h"
#include "oracles.hpp"
#include "wtrace/error.hpp"
#include "wtrace/tensor.hpp"

using namespace wtrace;

TEST_CASE("matmul: hand-computed products") {
  CHECK(matmul(Tensor::identity(2), Tensor::matrix({{3}, {4}})) == Tensor::matrix({{3}, {4}}));
  CHECK(matmul(Tensor::matrix({{1, 2}, {3, 4}}), Tensor::matrix({{5}, {6}})) == Tensor::matrix({{17}, {39}}));
  const auto any = oracle::random_tensor({3, 5}, 1);
  CHECK(matmul(Tensor({4, 3}, 0.0f), any) == Tensor({4, 5}, 0.0f));
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  try {
    matmul(Tensor({2, 3}), Tensor({2, 3}));
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul: matches long-double oracle and is associative") {
  const auto a = oracle::random_tensor({8, 8}, 2), b = oracle::random_tensor({8, 8}, 3), c = oracle::random_tensor({8, 8}, 4);
  const auto ref = oracle::matmul(oracle::to_double(a), oracle::to_double(b), 8, 8, 8);
  const auto ab = matmul(a, b);
  for (std::size_t i = 0; i < ref.size(); ++i) CHECK(ab[i] == doctest::Approx(ref[i]).epsilon(1e-6));
  CHECK(relative_error(matmul(a, matmul(b, c)), matmul(matmul(a, b), c)) < 1e-4);
}

TEST_CASE("matmul_bt and matmul_at agree with explicit transposes") {
  const auto a = oracle::random_tensor({4, 6}, 5), b = oracle::random_tensor({3, 6}, 6), c = oracle::random_tensor({4, 2}, 7);
  CHECK(max_abs_diff(matmul_bt(a, b), matmul(a, transpose(b))) < 1e-5);
  CHECK(max_abs_diff(matmul_at(a, c), matmul(transpose(a), c)) < 1e-5);
}

TEST_CASE("dot and l2_norm") {
  CHECK(dot(Tensor::vector({1, 2}), Tensor::vector({1, 2})) == 5.0);
  CHECK(dot(Tensor::vector({1, 0}), Tensor::vector({0, 1})) == 0.0);
  const auto a = oracle::random_tensor({17}, 8), b = oracle::random_tensor({17}, 9);
  CHECK(dot(a, b) == dot(b, a));
  CHECK(dot(a, a) == doctest::Approx(l2_norm(a) * l2_norm(a)));
  CHECK(l2_norm(Tensor::vector({3, 4})) == 5.0);
  CHECK(l2_norm(Tensor({5}, 0.0f)) == 0.0);
  CHECK(l2_norm(Tensor::vector({0, 1, 0})) == 1.0);
  CHECK_THROWS_AS(dot(Tensor({2}), Tensor({3})), DimensionError);
}

TEST_CASE("tensor construction validates data length") {
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<float>{1, 2, 3}), DimensionError);
  const Tensor t({2, 3}, 1.5f);
  CHECK(t.size() == 6);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), DimensionError);
}

TEST_CASE("im2col: hand layouts") {
  const Tensor img({1, 2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  CHECK(im2col(img, 1, 1, 1, 0) == Tensor({1, 6}, std::vector<float>{1, 2, 3, 4, 5, 6}));
  const Tensor sq({1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  CHECK(im2col(sq, 2, 2, 1, 0) == Tensor({4, 1}, std::vector<float>{1, 2, 3, 4}));
  CHECK(im2col(Tensor({2, 5, 5}, 0.0f), 3, 3, 1, 1) == Tensor({18, 25}, 0.0f));
  CHECK_THROWS_AS(im2col(Tensor({1, 4, 4}, 0.0f), 3, 3, 2, 0), ConfigError);
}

TEST_CASE("im2col then matmul equals direct convolution") {
  struct Case {
    std::size_t size, stride, pad;
  };
  for (auto [size, stride, pad] : {Case{8, 1, 0}, Case{8, 1, 1}, Case{8, 1, 2}, Case{9, 2, 1}, Case{9, 3, 0}}) {
    const auto x = oracle::random_tensor({3, size, size}, 10 + size + stride + pad);
    const auto k = oracle::random_tensor({4, 3 * 3 * 3}, 20 + stride);
    const auto cols = im2col(x, 3, 3, stride, pad);
    const auto y = matmul(k, cols);
    const auto ref = oracle::conv2d(oracle::to_double(x), 3, size, size, oracle::to_double(k), 4, 3, 3, stride, pad);
    REQUIRE(y.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::fabs(y[i] - ref[i]) < 1e-5);
  }
}

TEST_CASE("col2im is the adjoint of im2col") {
  const ConvGeometry g{2, 6, 5, 3, 2, 1, 1};
  const auto x = oracle::random_tensor({2, 6, 5}, 31);
  const auto c = oracle::random_tensor({g.patch_size(), g.out_height() * g.out_width()}, 32);
  CHECK(dot(im2col(x.data(), g), c) == doctest::Approx(dot(x, col2im(c, g))).epsilon(1e-6));
}

TEST_CASE("mean_var: population statistics") {
  auto mv = mean_var(Tensor::matrix({{0}, {2}}));
  CHECK(mv.mean[0] == 1.0f);
  CHECK(mv.var[0] == 1.0f);
  mv = mean_var(Tensor::matrix({{3, -1}}));
  CHECK(mv.var == Tensor({2}, 0.0f));
  mv = mean_var(Tensor::matrix({{7}, {7}, {7}}));
  CHECK(mv.mean[0] == 7.0f);
  CHECK(mv.var[0] == 0.0f);
  CHECK_THROWS_AS(mean_var(Tensor({0, 3})), EmptyBatchError);

  const auto x = oracle::random_tensor({50, 6}, 40, 3.0);
  std::vector<double> m, v;
  oracle::mean_var(oracle::to_double(x), 50, 6, m, v);
  mv = mean_var(x);
  for (std::size_t j = 0; j < 6; ++j) {
    CHECK(std::fabs(mv.mean[j] - m[j]) < 1e-6);
    CHECK(std::fabs(mv.var[j] - v[j]) < 1e-6);
  }
}
