#include "doctest.h"

#include <cmath>

#include "mstc/objective.hpp"

using namespace mstc;

namespace {

LabelMatrix column(std::size_t pos, std::size_t neg, std::size_t missing) {
  LabelMatrix m(pos + neg + missing, 1);
  std::size_t i = 0;
  for (std::size_t k = 0; k < pos; ++k) m.set(i++, 0, 1);
  for (std::size_t k = 0; k < neg; ++k) m.set(i++, 0, 0);
  for (std::size_t k = 0; k < missing; ++k) m.set_missing(i++, 0);
  return m;
}

LabelMatrix random_labels(std::size_t n, std::size_t c, Rng& rng) {
  LabelMatrix m(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      if (rng.bernoulli(0.3)) m.set_missing(i, j);
      else m.set(i, j, rng.bernoulli(0.3) ? 1 : 0);
    }
  return m;
}

}  // namespace

TEST_SUITE("objective") {

TEST_CASE("label matrix stores missing separately from the value") {
  LabelMatrix m(2, 2);
  m.set(0, 0, 1);
  m.set_missing(0, 1);
  CHECK(m.get(0, 0) == std::optional<std::uint8_t>(1));
  CHECK_FALSE(m.get(0, 1).has_value());
  m.set_stored_value(0, 1, 1);
  CHECK_FALSE(m.present(0, 1));
  CHECK_THROWS(m.set(0, 0, 2));
}

TEST_CASE("instance weights") {
  const auto w = compute_instance_weights(column(10, 90, 0));
  CHECK(w[0] == doctest::Approx(5.0));
  CHECK(w[50] == doctest::Approx(0.5556).epsilon(1e-4));
  CHECK(w[50] == doctest::Approx(100.0 / 180.0));

  const auto b = compute_instance_weights(column(50, 50, 0));
  for (double v : b.values()) CHECK(v == 1.0);

  const auto none = compute_instance_weights(column(0, 0, 7));
  for (double v : none.values()) CHECK(v == 0.0);

  const auto mixed = compute_instance_weights(column(2, 6, 4));
  CHECK(mixed[0] == doctest::Approx(2.0));
  CHECK(mixed[2] == doctest::Approx(8.0 / 12.0));
  CHECK(mixed[9] == 0.0);

  const auto one_class = compute_instance_weights(column(0, 5, 1));
  CHECK(one_class[0] == 1.0);
  CHECK(one_class[5] == 0.0);

  const auto u = uniform_instance_weights(column(3, 3, 2));
  CHECK(u[0] == 1.0);
  CHECK(u[7] == 0.0);
}

TEST_CASE("loss of a single half-confident entry is ln 2 / (N C)") {
  LabelMatrix labels(2, 3);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t c = 0; c < 3; ++c) labels.set_missing(i, c);
  labels.set(1, 2, 1);
  const auto w = uniform_instance_weights(labels);
  const auto r = weighted_masked_bce_logits(Tensor64({2, 3}), labels, w);
  CHECK(r.loss == doctest::Approx(std::log(2.0) / 6.0).epsilon(1e-14));
  const auto p = weighted_masked_bce(Tensor64({2, 3}, 0.5), labels, w);
  CHECK(p.loss == doctest::Approx(std::log(2.0) / 6.0).epsilon(1e-12));
}

TEST_CASE("perfect predictions cost almost nothing") {
  Rng rng(3);
  const auto labels = random_labels(10, 4, rng);
  const auto w = compute_instance_weights(labels);
  Tensor64 p({10, 4});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t c = 0; c < 4; ++c) p.at(i, c) = labels.value(i, c);
  double wmax = 0.0;
  for (double v : w.values()) wmax = std::max(wmax, v);
  const double eps = 1e-7;
  CHECK(weighted_masked_bce(p, labels, w, eps).loss <= 4 * eps * wmax * 1.01);
}

TEST_CASE("logit and probability forms agree") {
  Rng rng(4);
  const auto labels = random_labels(6, 5, rng);
  const auto w = compute_instance_weights(labels);
  Tensor64 z({6, 5});
  for (auto& v : z.values()) v = rng.uniform(-3, 3);
  Tensor64 p = sigmoid(z);
  const auto a = weighted_masked_bce_logits(z, labels, w);
  const auto b = weighted_masked_bce(p, labels, w);
  CHECK(a.loss == doctest::Approx(b.loss).epsilon(1e-9));
  // dJ/dz = dJ/dp * p (1 - p)
  for (std::size_t i = 0; i < z.size(); ++i)
    CHECK(a.grad[i] == doctest::Approx(b.grad[i] * p[i] * (1 - p[i])).epsilon(1e-7));
}

TEST_CASE("logit gradient matches finite differences") {
  Rng rng(5);
  const auto labels = random_labels(4, 3, rng);
  const auto w = compute_instance_weights(labels);
  Tensor64 z({4, 3});
  for (auto& v : z.values()) v = rng.uniform(-2, 2);
  const auto r = weighted_masked_bce_logits(z, labels, w);
  const double h = 1e-6;
  for (std::size_t i = 0; i < z.size(); ++i) {
    auto zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double num = (weighted_masked_bce_logits(zp, labels, w).loss -
                        weighted_masked_bce_logits(zm, labels, w).loss) / (2 * h);
    CHECK(r.grad[i] == doctest::Approx(num).epsilon(1e-6));
  }
}

TEST_CASE("mask totality of the loss") {
  Rng rng(6);
  auto labels = random_labels(20, 6, rng);
  const auto w = compute_instance_weights(labels);
  Tensor z({20, 6});
  for (auto& v : z.values()) v = static_cast<float>(rng.uniform(-4, 4));
  const auto before = weighted_masked_bce_logits(z, labels, w);
  const auto before_p = weighted_masked_bce(sigmoid(z), labels, w);
  for (std::size_t i = 0; i < 20; ++i)
    for (std::size_t c = 0; c < 6; ++c)
      if (!labels.present(i, c)) labels.set_stored_value(i, c, 1 - labels.value(i, c));
  CHECK(compute_instance_weights(labels) == w);
  const auto after = weighted_masked_bce_logits(z, labels, w);
  CHECK(after.loss == before.loss);
  CHECK(after.grad == before.grad);
  const auto after_p = weighted_masked_bce(sigmoid(z), labels, w);
  CHECK(after_p.loss == before_p.loss);
  CHECK(after_p.grad == before_p.grad);
}

TEST_CASE("extreme logits stay finite") {
  LabelMatrix labels(1, 2);
  labels.set(0, 0, 1);
  labels.set(0, 1, 0);
  const auto r = weighted_masked_bce_logits(Tensor({1, 2}, {-200.0f, 200.0f}), labels,
                                            uniform_instance_weights(labels));
  CHECK(std::isfinite(r.loss));
  CHECK(r.loss == doctest::Approx(200.0).epsilon(1e-6));
}

TEST_CASE("regularization penalty") {
  Parameter<double> dense{"fc.weight", ParamRole::kDenseWeight, Tensor64({2}, {-2, 0}), {}};
  Parameter<double> dw{"dw.kernel", ParamRole::kDepthwiseKernel, Tensor64({1}, {3}), {}};
  Parameter<double> pw{"pw.weight", ParamRole::kPointwiseWeight, Tensor64({1}, {10}), {}};
  Parameter<double> bias{"b", ParamRole::kBias, Tensor64({1}, {10}), {}};
  std::vector<Parameter<double>*> params{&dense, &dw, &pw, &bias};
  for (auto* p : params) p->zero_grad();
  RegPolicy policy;
  const double pen = regularization_penalty<double>(params, policy);
  CHECK(pen == doctest::Approx(0.0002 + 0.0009).epsilon(1e-12));
  CHECK(dense.grad[0] == doctest::Approx(-0.0001).epsilon(1e-12));
  CHECK(dense.grad[1] == 0.0);
  CHECK(dw.grad[0] == doctest::Approx(0.0006).epsilon(1e-12));
  CHECK(pw.grad[0] == 0.0);
  CHECK(bias.grad[0] == 0.0);

  // Without accumulation the stored grads stay as they are.
  CHECK(regularization_penalty<double>(params, policy, false) == pen);
  CHECK(dense.grad[0] == doctest::Approx(-0.0001).epsilon(1e-12));

  dense.value.fill(0.0);
  dw.value.fill(0.0);
  CHECK(regularization_penalty<double>(params, policy, false) == 0.0);

  RegPolicy off = policy;
  off.l1_dense = off.l2_depthwise = off.l2_standard_conv = false;
  dense.value.fill(1.0);
  CHECK(regularization_penalty<double>(params, off, false) == 0.0);
}

TEST_CASE("standard conv kernels follow the policy flag") {
  Parameter<double> k{"conv.kernel", ParamRole::kConvKernel, Tensor64({2}, {1, 2}), {}};
  k.zero_grad();
  std::vector<Parameter<double>*> params{&k};
  RegPolicy policy;
  CHECK(regularization_penalty<double>(params, policy, false) == doctest::Approx(5e-4));
  policy.l2_standard_conv = false;
  CHECK(regularization_penalty<double>(params, policy, false) == 0.0);
}

}
