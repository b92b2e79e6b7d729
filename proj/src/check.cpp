#include "mstc/check.hpp"

#include <memory>

#include "mstc/objective.hpp"

namespace mstc {

namespace {

Tensor64 uniform_tensor(Shape shape, Rng& rng) {
  Tensor64 t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-1.0, 1.0);
  return t;
}

}  // namespace

std::vector<NamedReport> layer_gradcheck_suite(std::uint64_t seed, const GradcheckOptions& options) {
  Rng rng(seed);
  struct Case {
    LayerPtr<double> layer;
    Shape input;
  };
  std::vector<Case> cases;
  auto conv = [](std::size_t k, std::size_t s, std::size_t m, std::size_t f, Padding pad,
                 ConvKind kind) {
    ConvSpec spec;
    spec.kernel = k;
    spec.stride = s;
    spec.in_channels = m;
    spec.filters = f;
    spec.padding = pad;
    spec.kind = kind;
    return spec;
  };
  cases.push_back({std::make_unique<Conv1D<double>>(
                       "conv1d_same_s2", conv(5, 2, 3, 4, Padding::kSame, ConvKind::kStandard), rng),
                   {2, 11, 3}});
  cases.push_back({std::make_unique<Conv1D<double>>(
                       "conv1d_valid_s1", conv(3, 1, 3, 4, Padding::kValid, ConvKind::kStandard), rng),
                   {2, 9, 3}});
  cases.push_back({std::make_unique<DepthwiseConv1D<double>>(
                       "depthwise_s2", conv(4, 2, 3, 3, Padding::kSame, ConvKind::kDepthwise), rng),
                   {2, 9, 3}});
  cases.push_back({std::make_unique<PointwiseConv1D<double>>("pointwise", 3, 5, rng), {2, 7, 3}});
  cases.push_back({std::make_unique<DpsConv1D<double>>(
                       "dps_s2", conv(5, 2, 3, 4, Padding::kSame, ConvKind::kDepthwiseSeparable), rng),
                   {2, 12, 3}});
  cases.push_back({std::make_unique<Dense<double>>("dense", 6, 4, rng), {3, 6}});
  cases.push_back({std::make_unique<Relu<double>>("relu"), {3, 8}});
  cases.push_back({std::make_unique<Sigmoid<double>>("sigmoid"), {3, 8}});
  cases.push_back({std::make_unique<Dropout<double>>("dropout", 0.3), {3, 8}});
  cases.push_back({std::make_unique<GlobalMaxPool<double>>("gmp"), {2, 7, 3}});
  cases.push_back({std::make_unique<GlobalAvgPool<double>>("gap"), {2, 7, 3}});
  cases.push_back({std::make_unique<Flatten<double>>("flatten"), {2, 5, 3}});

  std::vector<NamedReport> out;
  for (auto& c : cases) {
    const auto input = uniform_tensor(c.input, rng);
    out.push_back({c.layer->name(), gradcheck_layer(*c.layer, input, rng, options)});
  }
  return out;
}

template <class T>
ModalityBatch<T> random_batch(const ModelConfig& config, std::size_t batch, Rng& rng) {
  ModalityBatch<T> b;
  for (auto m : config.modalities) {
    if (is_temporal(m)) {
      BasicTensor<T> t({batch, config.input_length(m), config.input_channels(m)});
      for (auto& v : t.values()) v = static_cast<T>(rng.normal());
      b.set(m, std::move(t));
    } else {
      BasicTensor<T> t({batch, config.ps_width});
      for (auto& v : t.values()) v = rng.bernoulli(0.5) ? T{1} : T{0};
      b.set(m, std::move(t));
    }
  }
  return b;
}

GradcheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed, std::size_t batch,
                                const GradcheckOptions& options) {
  Rng rng(seed);
  auto model = Model<double>::build(config, rng.next_u64());
  const auto inputs = random_batch<double>(config, batch, rng);
  LabelMatrix labels(batch, config.label_count);
  for (std::size_t i = 0; i < batch; ++i) {
    for (std::size_t c = 0; c < config.label_count; ++c) {
      if (rng.bernoulli(0.2)) labels.set_missing(i, c);
      else labels.set(i, c, rng.bernoulli(0.4) ? 1 : 0);
    }
  }
  const Tensor64 weights = compute_instance_weights(labels);
  const std::uint64_t mask_seed = rng.next_u64();
  auto params = model.parameters();

  auto loss_at = [&](bool with_grad) {
    Rng mask_rng(mask_seed);
    auto out = model.forward_logits(inputs, Mode::kTrain, mask_rng);
    Probe probe;
    probe.signature = model.signature();
    std::vector<Tensor64> grads;
    for (const auto& z : out.logits) {
      Tensor64 terms;
      auto r = weighted_masked_bce_logits(z, labels, weights, &terms);
      probe.loss += r.loss;
      probe.terms.insert(probe.terms.end(), terms.values().begin(), terms.values().end());
      grads.push_back(std::move(r.grad));
    }
    if (with_grad) model.backward(grads);
    // One penalty term per parameter tensor.
    for (auto* p : params) {
      const double pen = regularization_penalty<double>(std::span(&p, 1), config.regularization, with_grad);
      probe.terms.push_back(pen);
      probe.loss += pen;
    }
    return probe;
  };

  model.zero_grad();
  loss_at(true);
  return gradcheck(params, [&] { return loss_at(false); }, rng, options);
}

template ModalityBatch<float> random_batch<float>(const ModelConfig&, std::size_t, Rng&);
template ModalityBatch<double> random_batch<double>(const ModelConfig&, std::size_t, Rng&);

}  // namespace mstc
