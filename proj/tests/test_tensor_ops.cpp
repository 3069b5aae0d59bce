#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <random>

#include "ettk/head.hpp"
#include "ettk/ops.hpp"

using namespace ettk;

namespace {
Tensor<float> rand_f32(std::vector<std::int64_t> shape, std::uint32_t seed) {
  std::mt19937 rng(seed);
  return random_uniform<float>(std::move(shape), rng);
}
}  // namespace

TEST_CASE("tensor shape/data validation") {
  CHECK_THROWS_AS(Tensor<float>({2, 0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>({2, 2}, {1.0f, 2.0f, 3.0f}), std::invalid_argument);
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(t.reshaped({4, 2}), std::invalid_argument);
  CHECK(t.reshaped({3, 2}).dim(0) == 3);
}

TEST_CASE("conv2d identity kernel") {
  Tensor<float> x = Tensor<float>::full({1, 3, 3}, 1.0f);
  Tensor<float> k({1, 1, 1, 1}, {1.0f});
  auto out = conv2d(x, k, ConvSpec{1, 1, 1, 1, 0, 1});
  CHECK(out.shape() == std::vector<std::int64_t>{1, 3, 3});
  for (std::int64_t i = 0; i < 9; ++i) CHECK(out[i] == 1.0f);
}

TEST_CASE("conv2d all-ones kernel sums the neighborhood") {
  std::vector<float> vals(9);
  for (int i = 0; i < 9; ++i) vals[static_cast<std::size_t>(i)] = static_cast<float>(i + 1);
  Tensor<float> x({1, 3, 3}, vals);
  Tensor<float> k = Tensor<float>::full({1, 1, 3, 3}, 1.0f);
  auto out = conv2d(x, k, same_conv_spec(1, 1, 3));
  CHECK(out(0, 1, 1) == doctest::Approx(45.0));   // sum of 1..9
  CHECK(out(0, 0, 0) == doctest::Approx(12.0));   // 1+2+4+5
  CHECK(out(0, 2, 2) == doctest::Approx(28.0));   // 5+6+8+9
}

TEST_CASE("conv2d zero kernel zeroes any input") {
  auto x = rand_f32({3, 5, 4}, 11);
  Tensor<float> k({2, 3, 3, 3});
  auto out = conv2d(x, k, same_conv_spec(2, 3, 3));
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == 0.0f);
}

TEST_CASE("conv2d rejects inconsistent shapes with a named dimension") {
  auto x = rand_f32({3, 5, 5}, 1);
  auto k = rand_f32({2, 4, 3, 3}, 2);
  CHECK_THROWS_WITH_AS(conv2d(x, k, same_conv_spec(2, 3, 3)), doctest::Contains("in_channels"),
                       std::invalid_argument);
  auto x6 = rand_f32({3, 6, 6}, 9);
  auto k2 = rand_f32({2, 3, 3, 3}, 3);
  CHECK_THROWS_WITH_AS(conv2d(x6, k2, ConvSpec{2, 3, 3, 2, 0, 1}), doctest::Contains("fractional"),
                       std::invalid_argument);
  CHECK_THROWS_AS(same_conv_spec(1, 1, 4), std::invalid_argument);
}

TEST_CASE("linear matches hand results") {
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> w({2, 2}, {2, 0, 0, 3});
  Tensor<float> b0({2});
  auto out = linear(eye, w, b0);
  CHECK(out(0, 0) == 2.0f);
  CHECK(out(0, 1) == 0.0f);
  CHECK(out(1, 1) == 3.0f);

  Tensor<float> x({1, 2}, {1, 1});
  Tensor<float> w2({2, 2}, {1, 2, 3, 4});
  Tensor<float> b({2}, {10, 10});
  auto out2 = linear(x, w2, b);
  CHECK(out2(0, 0) == doctest::Approx(14.0));
  CHECK(out2(0, 1) == doctest::Approx(16.0));

  Tensor<float> zeros({3, 2});
  auto out3 = linear(zeros, w2, b);
  for (std::int64_t r = 0; r < 3; ++r) {
    CHECK(out3(r, 0) == 10.0f);
    CHECK(out3(r, 1) == 10.0f);
  }
  CHECK_THROWS_WITH_AS(linear(x, Tensor<float>({3, 2}), b), doctest::Contains("inner dimensions"),
                       std::invalid_argument);
}

TEST_CASE("softmax_lastdim closed forms") {
  Tensor<float> u({4}, {0, 0, 0, 0});
  auto su = softmax_lastdim(u);
  for (std::int64_t i = 0; i < 4; ++i) CHECK(su[i] == doctest::Approx(0.25));

  Tensor<float> one({1}, {37.5f});
  CHECK(softmax_lastdim(one)[0] == doctest::Approx(1.0));

  Tensor<float> two({2}, {std::log(1.0f), std::log(3.0f)});
  auto st = softmax_lastdim(two);
  CHECK(st[0] == doctest::Approx(0.25));
  CHECK(st[1] == doctest::Approx(0.75));
}

TEST_CASE("softmax is invariant to constant logit shifts") {
  std::mt19937 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_uniform<float>({3, 6}, rng, -4.0f, 4.0f);
    std::uniform_real_distribution<float> cdist(-50.0f, 50.0f);
    const float c = cdist(rng);
    Tensor<float> shifted(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) shifted[i] = x[i] + c;
    CHECK(max_abs_diff(softmax_lastdim(x), softmax_lastdim(shifted)) < 1e-6f);
  }
}

TEST_CASE("adaptive_avg_pool rules") {
  Tensor<float> c = Tensor<float>::full({2, 5, 7}, 3.25f);
  for (std::int64_t s : {1, 2, 3}) {
    auto out = adaptive_avg_pool(c, s);
    for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(3.25));
  }

  Tensor<float> m({1, 2, 2}, {1, 2, 3, 4});
  CHECK(adaptive_avg_pool(m, 1)[0] == doctest::Approx(2.5));

  auto x = rand_f32({3, 4, 4}, 17);
  auto ident = adaptive_avg_pool(x, 4);
  CHECK(max_abs_diff(x, ident) == 0.0f);

  // overlapping windows: H=3, S=2 covers [0,2) and [1,3)
  Tensor<float> v({1, 3, 1}, {1, 2, 4});
  auto p = adaptive_avg_pool(v, 1);
  CHECK(p[0] == doctest::Approx(7.0 / 3.0));
  Tensor<float> v2({1, 3, 3}, {1, 1, 1, 2, 2, 2, 4, 4, 4});
  auto p2 = adaptive_avg_pool(v2, 2);
  CHECK(p2(0, 0, 0) == doctest::Approx(1.5));  // rows {1,2}
  CHECK(p2(0, 1, 0) == doctest::Approx(3.0));  // rows {2,4}

  CHECK_THROWS_AS(adaptive_avg_pool(m, 3), std::invalid_argument);
  CHECK_THROWS_AS(adaptive_avg_pool(m, 0), std::invalid_argument);
}

TEST_CASE("layernorm closed forms") {
  Tensor<float> gamma = Tensor<float>::full({4}, 1.0f);
  Tensor<float> beta({4});
  Tensor<float> c = Tensor<float>::full({2, 4}, 5.0f);
  auto out = layernorm(c, gamma, beta);
  for (std::int64_t i = 0; i < out.numel(); ++i) CHECK(out[i] == doctest::Approx(0.0));

  Tensor<float> pm({1, 2}, {-1, 1});
  Tensor<float> g2 = Tensor<float>::full({2}, 1.0f);
  Tensor<float> b2({2});
  auto out2 = layernorm(pm, g2, b2);
  CHECK(out2[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(out2[1] == doctest::Approx(1.0).epsilon(1e-4));

  Tensor<float> g0({4});
  Tensor<float> b3({4}, {7, 8, 9, 10});
  auto out3 = layernorm(rand_f32({3, 4}, 23), g0, b3);
  for (std::int64_t r = 0; r < 3; ++r) {
    for (std::int64_t i = 0; i < 4; ++i) CHECK(out3(r, i) == doctest::Approx(b3[i]));
  }

  // rows have zero mean under identity affine
  auto rnd = rand_f32({5, 7}, 29);
  Tensor<float> g7 = Tensor<float>::full({7}, 1.0f);
  Tensor<float> b7({7});
  auto n = layernorm(rnd, g7, b7);
  for (std::int64_t r = 0; r < 5; ++r) {
    float m = 0;
    for (std::int64_t i = 0; i < 7; ++i) m += n(r, i);
    CHECK(std::abs(m / 7) < 1e-6f);
  }
}

TEST_CASE("relu, add, scale, batchnorm basics") {
  Tensor<float> x({2}, {-1, 2});
  auto r = relu(x);
  CHECK(r[0] == 0.0f);
  CHECK(r[1] == 2.0f);

  auto a = rand_f32({2, 3, 4}, 31);
  auto sum = add(a, Tensor<float>(a.shape()));
  CHECK(max_abs_diff(a, sum) == 0.0f);
  CHECK_THROWS_AS(add(a, Tensor<float>({2, 3, 5})), std::invalid_argument);

  auto sc = scale(x, 2.0f);
  CHECK(sc[0] == -2.0f);

  auto bn = BatchNormParams<float>::identity(2);
  auto xin = rand_f32({2, 3, 3}, 37);
  auto out = batchnorm_inference(xin, bn);
  CHECK(max_abs_diff(xin, out) < 1e-4f);
  CHECK_THROWS_WITH_AS(batchnorm_inference(rand_f32({3, 2, 2}, 5), bn), doctest::Contains("channel"),
                       std::invalid_argument);
}

TEST_CASE("hand-derived backward values") {
  // d/dW of sum(xW) with x = [[1,2]]: every column gets x
  Tensor<float> x({1, 2}, {1, 2});
  Tensor<float> w({2, 3});
  auto g = linear_backward(Tensor<float>::full({1, 3}, 1.0f), x, w);
  for (std::int64_t j = 0; j < 3; ++j) {
    CHECK(g.w(0, j) == doctest::Approx(1.0));
    CHECK(g.w(1, j) == doctest::Approx(2.0));
  }

  Tensor<float> xr({4}, {-2, -0.5f, 0.5f, 3});
  auto gr = relu_backward(Tensor<float>::full({4}, 1.0f), xr);
  CHECK(gr[0] == 0.0f);
  CHECK(gr[1] == 0.0f);
  CHECK(gr[2] == 1.0f);
  CHECK(gr[3] == 1.0f);
}

TEST_CASE("softmax + NLL composite gradient is p - onehot") {
  Tensor<double> logits({4}, {0.0, 0.0, 0.0, 0.0});
  const std::int64_t target = 2;
  auto p = softmax_lastdim(logits);
  // dL/dp for L = -ln p[target]
  Tensor<double> dp({4});
  dp[target] = -1.0 / p[target];
  auto dlogits = softmax_lastdim_backward(dp, p);
  for (std::int64_t i = 0; i < 4; ++i) {
    const double expected = p[i] - (i == target ? 1.0 : 0.0);
    CHECK(dlogits[i] == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("depthwise + pointwise equals the composed dense kernel") {
  std::mt19937 rng(41);
  for (int trial = 0; trial < 5; ++trial) {
    const std::int64_t d = 4, z = 3;
    auto x = random_uniform<float>({d, 6, 6}, rng);
    auto dw = random_uniform<float>({d, 1, z, z}, rng);
    auto pw = random_uniform<float>({d, d, 1, 1}, rng);
    auto t = conv2d(x, dw, same_conv_spec(d, d, z, d));
    auto separable = conv2d(t, pw, ConvSpec{d, d, 1, 1, 0, 1});
    auto composed = conv2d(x, compose_dsconv_kernel(dw, pw), same_conv_spec(d, d, z));
    CHECK(max_abs_diff(separable, composed) < 1e-6f);
  }
}

TEST_CASE("forward ops are pure: bit-identical repeats") {
  auto x = rand_f32({3, 8, 8}, 43);
  auto k = rand_f32({5, 3, 3, 3}, 44);
  auto a = conv2d(x, k, same_conv_spec(5, 3, 3));
  auto b = conv2d(x, k, same_conv_spec(5, 3, 3));
  CHECK(std::memcmp(a.data(), b.data(), sizeof(float) * static_cast<std::size_t>(a.numel())) == 0);

  auto s1 = softmax_lastdim(x);
  auto s2 = softmax_lastdim(x);
  CHECK(std::memcmp(s1.data(), s2.data(), sizeof(float) * static_cast<std::size_t>(s1.numel())) == 0);
}

TEST_CASE("finite-value checks flag non-finite op outputs") {
  auto x = rand_f32({1, 3, 3}, 47);
  x[4] = std::numeric_limits<float>::quiet_NaN();
  auto k = Tensor<float>::full({1, 1, 1, 1}, 1.0f);
  set_finite_checks(false);
  CHECK_NOTHROW(conv2d(x, k, ConvSpec{1, 1, 1, 1, 0, 1}));
  set_finite_checks(true);
  CHECK_THROWS_AS(conv2d(x, k, ConvSpec{1, 1, 1, 1, 0, 1}), numeric_error);
  set_finite_checks(false);
}
