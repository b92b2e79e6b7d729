#include "doctest.h"

#include <cmath>

#include "mstc/layers.hpp"

using namespace mstc;

namespace {

ConvSpec make_spec(std::size_t k, std::size_t s, std::size_t m, std::size_t f, Padding pad,
                   ConvKind kind = ConvKind::kStandard) {
  ConvSpec spec;
  spec.kernel = k;
  spec.stride = s;
  spec.in_channels = m;
  spec.filters = f;
  spec.padding = pad;
  spec.kind = kind;
  return spec;
}

Tensor64 random_tensor(Shape shape, Rng& rng) {
  Tensor64 t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-1, 1);
  return t;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("output length and padding follow the same/valid rules") {
  CHECK(conv_output_length(800, 64, 2, Padding::kSame) == 400);
  CHECK(conv_output_length(400, 32, 2, Padding::kSame) == 200);
  CHECK(conv_output_length(420, 8, 2, Padding::kSame) == 210);
  CHECK(conv_output_length(210, 6, 2, Padding::kSame) == 105);
  CHECK(conv_output_length(4, 2, 2, Padding::kValid) == 2);
  CHECK(conv_pad_before(800, 64, 2, Padding::kSame) == 31);
  CHECK(conv_pad_before(210, 6, 2, Padding::kSame) == 2);
  CHECK(conv_pad_before(7, 3, 2, Padding::kValid) == 0);
}

TEST_CASE("conv1d small cases") {
  const Tensor64 x({4, 1}, {1, 2, 3, 4});
  auto id = make_spec(1, 1, 1, 1, Padding::kSame);
  CHECK(conv1d_forward(x, id, Tensor64({1, 1, 1}, {1}), Tensor64({1})) == x);

  auto valid = make_spec(2, 2, 1, 1, Padding::kValid);
  const auto y = conv1d_forward(x, valid, Tensor64({2, 1, 1}, {1, 1}), Tensor64({1}));
  CHECK(y == Tensor64({2, 1}, {3, 7}));

  Rng rng(3);
  auto spec = make_spec(3, 2, 2, 3, Padding::kSame);
  const auto xr = random_tensor({9, 2}, rng);
  const auto c = conv1d_forward(xr, spec, Tensor64({3, 2, 3}), Tensor64({3}, {1.5, 1.5, 1.5}));
  CHECK(c.shape() == Shape{5, 3});
  for (double v : c.values()) CHECK(v == 1.5);
}

TEST_CASE("conv1d same padding matches a reference framework") {
  // Reference values from a TensorFlow conv1d with SAME padding, stride 2.
  const Tensor64 x({7, 1}, {1, 2, 3, 4, 5, 6, 7});
  const auto y = conv1d_forward(x, make_spec(3, 2, 1, 1, Padding::kSame),
                                Tensor64({3, 1, 1}, {1, 2, 3}), Tensor64({1}));
  CHECK(y == Tensor64({4, 1}, {8, 20, 32, 20}));
}

TEST_CASE("depthwise small cases") {
  const Tensor64 x({3, 2}, {1, 10, 2, 20, 3, 30});
  CHECK(depthwise_conv1d_forward(x, Tensor64({1, 2}, {1, 1})) == x);
  const auto y = depthwise_conv1d_forward(x, Tensor64({2, 2}, {1, 0, 1, 0}), 1, Padding::kValid);
  CHECK(y == Tensor64({2, 2}, {3, 0, 5, 0}));

  Rng rng(5);
  auto z = random_tensor({6, 2}, rng);
  for (std::size_t t = 0; t < 6; ++t) z.at(t, 1) = 0.0;
  const auto out = depthwise_conv1d_forward(z, random_tensor({3, 2}, rng), 2);
  for (std::size_t t = 0; t < out.dim(0); ++t) CHECK(out.at(t, 1) == 0.0);
}

TEST_CASE("depthwise and separable match a reference framework") {
  // TensorFlow depthwise_conv2d / separable_conv2d on a height-1 image,
  // SAME padding, stride 2.
  const Tensor64 x({5, 2}, {1, 10, 2, 20, 3, 30, 4, 40, 5, 50});
  const Tensor64 wd({2, 2}, {1, 0.5, -1, 2});
  CHECK(depthwise_conv1d_forward(x, wd, 2, Padding::kSame) ==
        Tensor64({3, 2}, {-1, 45, -1, 95, 5, 25}));
  const Tensor64 wp({2, 3}, {1, 2, 0, 0, 1, -1});
  const auto spec = make_spec(2, 2, 2, 3, Padding::kSame, ConvKind::kDepthwiseSeparable);
  CHECK(dps_conv1d_forward(x, spec, wd, wp, Tensor64({3})) ==
        Tensor64({3, 3}, {-1, 43, -45, -1, 93, -95, 5, 35, -25}));
}

TEST_CASE("pointwise cases") {
  Rng rng(8);
  const auto x = random_tensor({2, 2}, rng);
  CHECK(pointwise_conv1d_forward(x, Tensor64({2, 2}, {1, 0, 0, 1}), Tensor64({2})) == x);
  const auto s = pointwise_conv1d_forward(x, Tensor64({2, 1}, {1, 1}), Tensor64({1}));
  CHECK(s[0] == x.at(0, 0) + x.at(0, 1));
  CHECK(s[1] == x.at(1, 0) + x.at(1, 1));
  const auto w = random_tensor({2, 2}, rng), b = random_tensor({2}, rng);
  const auto y = pointwise_conv1d_forward(x, w, b);
  const auto ref = matmul(x, w);
  for (std::size_t t = 0; t < 2; ++t)
    for (std::size_t f = 0; f < 2; ++f) CHECK(y.at(t, f) == ref.at(t, f) + b[f]);
}

TEST_CASE("dps is the composition, bitwise") {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 1 + rng.below(9), s = 1 + rng.below(3), m = 1 + rng.below(5),
                      f = 1 + rng.below(6), l = k + rng.below(20);
    const auto pad = rng.bernoulli(0.5) ? Padding::kSame : Padding::kValid;
    const auto spec = make_spec(k, s, m, f, pad, ConvKind::kDepthwiseSeparable);
    const auto x = random_tensor({2, l, m}, rng).cast<float>();
    const auto wd = random_tensor({k, m}, rng).cast<float>();
    const auto wp = random_tensor({m, f}, rng).cast<float>();
    const auto b = random_tensor({f}, rng).cast<float>();
    const auto composed =
        pointwise_conv1d_forward(depthwise_conv1d_forward(x, wd, s, pad), wp, b);
    REQUIRE(dps_conv1d_forward(x, spec, wd, wp, b) == composed);
  }
}

TEST_CASE("dps parameter economy") {
  CHECK(conv_parameter_count(make_spec(64, 2, 3, 32, Padding::kSame,
                                       ConvKind::kDepthwiseSeparable)) == 320);
  CHECK(conv_parameter_count(make_spec(64, 2, 3, 32, Padding::kSame)) == 6176);
  CHECK(conv_parameter_count(make_spec(32, 2, 32, 64, Padding::kSame,
                                       ConvKind::kDepthwiseSeparable)) == 32 * 32 + 32 * 64 + 64);
  CHECK(conv_parameter_count(make_spec(32, 2, 32, 64, Padding::kSame)) == 32 * 32 * 64 + 64);
}

TEST_CASE("dense cases") {
  Rng rng(2);
  const auto x = random_tensor({3, 2}, rng);
  CHECK(dense_forward(x, Tensor64({2, 2}, {1, 0, 0, 1}), Tensor64({2})) == x);
  const auto z = dense_forward(Tensor64({2, 2}), random_tensor({2, 3}, rng), Tensor64({3}, {1, 2, 3}));
  CHECK(z == Tensor64({2, 3}, {1, 2, 3, 1, 2, 3}));
  CHECK(dense_forward(Tensor64({1, 2}, {1, 2}), Tensor64({2, 1}, {3, 5}), Tensor64({1}, {1}))[0] ==
        14.0);
  CHECK_THROWS_AS(dense_forward(x, Tensor64({3, 2}), Tensor64({2})), DimensionError);
}

TEST_CASE("activations") {
  CHECK(relu(Tensor64({2}, {-5, 5})) == Tensor64({2}, {0, 5}));
  CHECK(sigmoid_scalar(0.0) == 0.5);
  const double tiny = sigmoid_scalar(-100.0);
  CHECK(std::isfinite(tiny));
  CHECK(tiny > 0.0);
  CHECK(tiny == doctest::Approx(3.720075976020836e-44).epsilon(1e-12));
  CHECK(sigmoid_scalar(100.0) == 1.0);
  CHECK(sigmoid_scalar(-100.0f) > 0.0f);
}

TEST_CASE("dropout") {
  Rng rng(6);
  const Tensor64 ones({1000, 1000}, 1.0);
  CHECK(dropout(ones, 0.0, Mode::kTrain, rng) == ones);
  CHECK(dropout(ones, 0.5, Mode::kInfer, rng) == ones);
  CHECK_THROWS_AS(dropout(ones, 1.0, Mode::kTrain, rng), std::invalid_argument);
  CHECK_THROWS_AS(dropout(ones, -0.1, Mode::kTrain, rng), std::invalid_argument);

  const auto y = dropout(ones, 0.2, Mode::kTrain, rng);
  double sum = 0.0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    sum += v;
    zeros += v == 0.0;
  }
  CHECK(std::abs(sum / y.size() - 1.0) < 0.01);
  CHECK(std::abs(double(zeros) / y.size() - 0.2) < 0.01 * 0.2);
}

TEST_CASE("pooling") {
  const Tensor64 x({3, 2}, {1, 5, 3, 2, 0, 4});
  CHECK(global_max_pool(x) == Tensor64({2}, {3, 5}));
  const auto a = global_avg_pool(x);
  CHECK(a[0] == doctest::Approx(4.0 / 3.0));
  CHECK(a[1] == doctest::Approx(11.0 / 3.0));

  const Tensor64 c({4, 3}, 2.5);
  CHECK(global_max_pool(c) == Tensor64({3}, 2.5));
  CHECK(global_avg_pool(c) == Tensor64({3}, 2.5));

  const Tensor64 perm({3, 2}, {0, 4, 1, 5, 3, 2});
  CHECK(global_max_pool(perm) == global_max_pool(x));
  CHECK(global_avg_pool(perm)[0] == doctest::Approx(a[0]));

  const Tensor64 batch({2, 3, 2}, {1, 5, 3, 2, 0, 4, 0, 4, 1, 5, 3, 2});
  CHECK(global_max_pool(batch) == Tensor64({2, 2}, {3, 5, 3, 5}));
}

TEST_CASE("gmp routes gradient to the first argmax") {
  GlobalMaxPool<double> pool("gmp");
  Rng rng(1);
  pool.forward(Tensor64({1, 3, 1}, {2, 7, 7}), Mode::kInfer, rng);
  CHECK(pool.backward(Tensor64({1, 1}, {1})) == Tensor64({1, 3, 1}, {0, 1, 0}));
}

TEST_CASE("concat, split and flatten") {
  const Tensor64 a({2}, {1, 2}), b({3}, {3, 4, 5});
  std::vector<Tensor64> one{a};
  CHECK(concat<double>(one, 0) == a);
  std::vector<Tensor64> two{a, b};
  const auto ab = concat<double>(two, 0);
  CHECK(ab == Tensor64({5}, {1, 2, 3, 4, 5}));
  const std::vector<std::size_t> widths{2, 3};
  const auto parts = split<double>(ab, 0, widths);
  CHECK(parts[0] == a);
  CHECK(parts[1] == b);
  CHECK(flatten(Tensor64({2, 3}, {1, 2, 3, 4, 5, 6})) == Tensor64({1, 6}, {1, 2, 3, 4, 5, 6}));
}

TEST_CASE("backward identities") {
  Rng rng(7);
  Dense<double> d("d", 2, 2, rng);
  auto params = d.parameters();
  params[0]->value = Tensor64({2, 2}, {1, 0, 0, 1});
  d.forward(random_tensor({3, 2}, rng), Mode::kTrain, rng);
  const auto up = random_tensor({3, 2}, rng);
  CHECK(d.backward(up) == up);

  Relu<double> r("r");
  r.forward(Tensor64({1, 3}, {-1, 2, -3}), Mode::kTrain, rng);
  CHECK(r.backward(Tensor64({1, 3}, {5, 5, 5})) == Tensor64({1, 3}, {0, 5, 0}));

  Dense<double> d2("d2", 2, 2, rng);
  CHECK_THROWS(d2.backward(up));
}

TEST_CASE("gradcheck: affine maps are exact to rounding") {
  // Central differences of an affine map carry no truncation error, only
  // roundoff of order eps * |term| / h.
  for (double h : {1e-3, 1e-2, 1e-1}) {
    Rng rng(12);
    Dense<double> d("dense", 5, 4, rng);
    GradcheckOptions opts;
    opts.step = h;
    const auto rep = gradcheck_layer(d, random_tensor({3, 5}, rng), rng, opts);
    CAPTURE(h);
    CHECK(rep.passed);
    CHECK(rep.checked >= 200);
    CHECK(rep.max_rel_err < 1e-9);
  }
  Rng rng(12);
  Dense<double> d("dense", 5, 4, rng);
  const auto rep = gradcheck_layer(d, random_tensor({3, 5}, rng), rng);
  CHECK(rep.max_rel_err < 1e-7);
}

TEST_CASE("gradcheck: relu kinks are excluded") {
  Rng rng(13);
  Relu<double> r("relu");
  auto x = random_tensor({2, 10}, rng);
  for (std::size_t i = 0; i < x.size(); i += 2) x[i] = 0.0;
  const auto rep = gradcheck_layer(r, x, rng);
  CHECK(rep.excluded > 0);
  CHECK(rep.passed);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("gradcheck every layer kind") {
  Rng rng(14);
  std::vector<LayerPtr<double>> layers;
  layers.push_back(std::make_unique<Conv1D<double>>("c", make_spec(4, 2, 2, 3, Padding::kSame), rng));
  layers.push_back(std::make_unique<Conv1D<double>>("cv", make_spec(3, 1, 2, 3, Padding::kValid), rng));
  layers.push_back(std::make_unique<DepthwiseConv1D<double>>(
      "dw", make_spec(3, 2, 2, 2, Padding::kSame, ConvKind::kDepthwise), rng));
  layers.push_back(std::make_unique<PointwiseConv1D<double>>("pw", 2, 3, rng));
  layers.push_back(std::make_unique<DpsConv1D<double>>(
      "dps", make_spec(3, 2, 2, 4, Padding::kSame, ConvKind::kDepthwiseSeparable), rng));
  layers.push_back(std::make_unique<Sigmoid<double>>("sig"));
  layers.push_back(std::make_unique<GlobalMaxPool<double>>("gmp"));
  layers.push_back(std::make_unique<GlobalAvgPool<double>>("gap"));
  layers.push_back(std::make_unique<Flatten<double>>("flat"));
  layers.push_back(std::make_unique<Dropout<double>>("drop", 0.25));
  for (auto& l : layers) {
    CAPTURE(l->name());
    const auto rep = gradcheck_layer(*l, random_tensor({2, 8, 2}, rng), rng);
    CHECK(rep.passed);
    CHECK(rep.max_rel_err < 1e-4);
  }
}

TEST_CASE("signature tracks relu sides") {
  Rng rng(1);
  Relu<double> r("r");
  std::uint64_t h1 = 0, h2 = 0, h3 = 0;
  r.forward(Tensor64({1, 2}, {1, -1}), Mode::kTrain, rng);
  r.signature(h1);
  r.forward(Tensor64({1, 2}, {2, -3}), Mode::kTrain, rng);
  r.signature(h2);
  r.forward(Tensor64({1, 2}, {-1, 1}), Mode::kTrain, rng);
  r.signature(h3);
  CHECK(h1 == h2);
  CHECK(h1 != h3);
}

TEST_CASE("conv spec validation") {
  CHECK_THROWS_AS(make_spec(0, 1, 1, 1, Padding::kSame).validate(), DimensionError);
  CHECK_THROWS_AS(make_spec(3, 0, 1, 1, Padding::kSame).validate(), DimensionError);
  const Tensor64 x({4, 2});
  CHECK_THROWS_AS(depthwise_conv1d_forward(x, Tensor64({2, 3})), DimensionError);
  CHECK_THROWS_AS(conv1d_forward(Tensor64({2, 1}), make_spec(3, 1, 1, 1, Padding::kValid),
                                 Tensor64({3, 1, 1}), Tensor64({1})),
                  DimensionError);
}

}
