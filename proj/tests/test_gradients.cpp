#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "ettk/gradcheck.hpp"
#include "ettk/ops.hpp"

using namespace ettk;

TEST_CASE("finite-difference suite passes for every primitive and layer") {
  const auto results = gradcheck::run_suite(7);
  CHECK(results.size() >= 20);
  for (const auto& r : results) {
    INFO(r.name, " worst param ", r.worst_param, " rel err ", r.max_rel_err);
    CHECK(r.pass());
  }
}

TEST_CASE("a corrupted analytic gradient is flagged with its parameter name") {
  std::mt19937 rng(3);
  Tensor<double> x = random_uniform<double>({3, 5}, rng);
  Tensor<double> w = random_uniform<double>({5, 4}, rng);
  Tensor<double> b = random_uniform<double>({4}, rng);
  Tensor<double> r = random_uniform<double>({3, 4}, rng);
  auto grads = linear_backward(r, x, w);
  grads.w(2, 1) += 0.25;  // deliberate corruption
  std::map<std::string, Tensor<double>> analytic{{"x", grads.x}, {"w", grads.w}, {"b", grads.b}};
  auto fwd = [&]() { return linear(x, w, b); };
  const auto res = gradcheck::check_tensor_output("linear/corrupted", fwd, r, gradcheck::LossForm::kWeightedSum,
                                                  {{"x", &x}, {"w", &w}, {"b", &b}}, analytic);
  CHECK_FALSE(res.pass());
  CHECK(res.worst_param == "w");
}

TEST_CASE("checker rejects a missing analytic entry") {
  Tensor<double> x({2, 2});
  std::map<std::string, Tensor<double>> analytic;
  CHECK_THROWS_AS(gradcheck::check_scalar("missing", [] { return 0.0; }, {{"x", &x}}, analytic),
                  std::invalid_argument);
}
