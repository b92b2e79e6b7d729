#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mstc/tensor.hpp"

namespace mstc {

enum class Mode { kTrain, kInfer };
enum class Padding { kSame, kValid };
enum class ConvKind { kStandard, kDepthwise, kPointwise, kDepthwiseSeparable };

struct ConvSpec {
  std::size_t kernel = 1;
  std::size_t stride = 1;
  std::size_t in_channels = 1;
  std::size_t filters = 1;
  Padding padding = Padding::kSame;
  ConvKind kind = ConvKind::kStandard;

  /// Throws DimensionError when the spec is internally inconsistent.
  void validate() const;
};

/// Output length: ceil(L/stride) for same padding, floor((L-k)/stride)+1 for valid.
std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                               Padding padding);
/// Zeros inserted before the first sample under the padding rule (TF convention).
std::size_t conv_pad_before(std::size_t length, std::size_t kernel, std::size_t stride,
                            Padding padding);

/// Trainable parameter count of one conv layer of the given kind.
std::size_t conv_parameter_count(const ConvSpec& spec);

// --- functional forms -----------------------------------------------------
//
// Conv inputs are [L x M] for a single sequence or [B x L x M] for a batch.

template <class T>
BasicTensor<T> conv1d_forward(const BasicTensor<T>& x, const ConvSpec& spec,
                              const BasicTensor<T>& w, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> depthwise_conv1d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_d,
                                        std::size_t stride = 1, Padding padding = Padding::kSame);

template <class T>
BasicTensor<T> pointwise_conv1d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_p,
                                        const BasicTensor<T>& b);

/// pointwise(depthwise(x, w_d), w_p, b); stride and padding apply to the depthwise stage.
template <class T>
BasicTensor<T> dps_conv1d_forward(const BasicTensor<T>& x, const ConvSpec& spec,
                                  const BasicTensor<T>& w_d, const BasicTensor<T>& w_p,
                                  const BasicTensor<T>& b);

template <class T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>& b);

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x);

template <class T>
T sigmoid_scalar(T x);

/// Inverted dropout. Throws std::invalid_argument unless 0 <= rate < 1.
template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Mode mode, Rng& rng);

/// Pools over the time axis: [L x C] -> [C], [B x L x C] -> [B x C].
template <class T>
BasicTensor<T> global_max_pool(const BasicTensor<T>& x);
template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x);

/// Concatenates along `axis`; all other dimensions must agree.
template <class T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis);

/// Inverse of concat: splits `x` along `axis` into pieces of the given widths.
template <class T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& x, std::size_t axis,
                                  std::span<const std::size_t> widths);

/// Row-major flatten to [1 x N].
template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x);

// --- stateful layers ------------------------------------------------------

enum class ParamRole { kDenseWeight, kConvKernel, kDepthwiseKernel, kPointwiseWeight, kBias };

const char* param_role_name(ParamRole role);

template <class T>
struct Parameter {
  std::string name;
  ParamRole role = ParamRole::kBias;
  BasicTensor<T> value;
  BasicTensor<T> grad;

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = BasicTensor<T>(value.shape());
    else grad.fill(T{0});
  }
};

/// A differentiable map with its parameters and forward cache. Backward
/// accumulates into parameter grads; call zero_grad between steps.
template <class T>
class Layer {
 public:
  explicit Layer(std::string name) : name_(std::move(name)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  virtual BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) = 0;
  virtual BasicTensor<T> backward(const BasicTensor<T>& upstream) = 0;
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  virtual std::string kind() const = 0;

  /// Folds the discrete state of the last forward (ReLU sides, argmax
  /// positions) into `h`. Finite differences are meaningless across a change.
  virtual void signature(std::uint64_t& h) const { (void)h; }

  const std::string& name() const { return name_; }

 protected:
  void require_cache(const BasicTensor<T>& upstream, const Shape& out_shape) const;

  std::string name_;
  bool cached_ = false;
};

template <class T>
using LayerPtr = std::unique_ptr<Layer<T>>;

/// Standard 1-D convolution; input [B x L x M], kernel [k x M x F], bias [F].
template <class T>
class Conv1D : public Layer<T> {
 public:
  Conv1D(std::string name, ConvSpec spec, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::vector<Parameter<T>*> parameters() override { return {&kernel_, &bias_}; }
  std::string kind() const override { return "conv1d"; }
  const ConvSpec& spec() const { return spec_; }

 private:
  ConvSpec spec_;
  Parameter<T> kernel_, bias_;
  BasicTensor<T> input_;
  Shape out_shape_;
};

/// Per-channel convolution without bias; kernel [k x M].
template <class T>
class DepthwiseConv1D : public Layer<T> {
 public:
  DepthwiseConv1D(std::string name, ConvSpec spec, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::vector<Parameter<T>*> parameters() override { return {&kernel_}; }
  std::string kind() const override { return "depthwise_conv1d"; }

 private:
  ConvSpec spec_;
  Parameter<T> kernel_;
  BasicTensor<T> input_;
  Shape out_shape_;
};

/// 1x1 convolution: per-timestep affine map [M x F] plus bias [F].
template <class T>
class PointwiseConv1D : public Layer<T> {
 public:
  PointwiseConv1D(std::string name, std::size_t in_channels, std::size_t filters, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "pointwise_conv1d"; }

 private:
  Parameter<T> weight_, bias_;
  BasicTensor<T> input_;
  Shape out_shape_;
};

/// Depthwise stage followed by pointwise stage.
template <class T>
class DpsConv1D : public Layer<T> {
 public:
  DpsConv1D(std::string name, ConvSpec spec, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::vector<Parameter<T>*> parameters() override;
  std::string kind() const override { return "dps_conv1d"; }

 private:
  DepthwiseConv1D<T> depthwise_;
  PointwiseConv1D<T> pointwise_;
};

/// Fully connected: [B x D] * [D x U] + [U].
template <class T>
class Dense : public Layer<T> {
 public:
  Dense(std::string name, std::size_t in, std::size_t out, Rng& rng);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }
  std::string kind() const override { return "dense"; }
  std::size_t in_features() const { return weight_.value.dim(0); }
  std::size_t out_features() const { return weight_.value.dim(1); }

 private:
  Parameter<T> weight_, bias_;
  BasicTensor<T> input_;
};

template <class T>
class Relu : public Layer<T> {
 public:
  using Layer<T>::Layer;
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "relu"; }
  void signature(std::uint64_t& h) const override;

 private:
  BasicTensor<T> input_;
};

template <class T>
class Sigmoid : public Layer<T> {
 public:
  using Layer<T>::Layer;
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "sigmoid"; }

 private:
  BasicTensor<T> output_;
};

template <class T>
class Dropout : public Layer<T> {
 public:
  Dropout(std::string name, double rate);
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "dropout"; }
  double rate() const { return rate_; }
  void set_rate(double rate);

 private:
  double rate_;
  BasicTensor<T> scale_;  // 0 or 1/(1-rate) per element; empty when identity
  Shape out_shape_;
};

template <class T>
class GlobalMaxPool : public Layer<T> {
 public:
  using Layer<T>::Layer;
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "global_max_pool"; }
  void signature(std::uint64_t& h) const override;

 private:
  Shape in_shape_;
  std::vector<std::size_t> argmax_;
};

template <class T>
class GlobalAvgPool : public Layer<T> {
 public:
  using Layer<T>::Layer;
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "global_avg_pool"; }

 private:
  Shape in_shape_;
};

/// [B x ...] -> [B x prod(...)].
template <class T>
class Flatten : public Layer<T> {
 public:
  using Layer<T>::Layer;
  BasicTensor<T> forward(const BasicTensor<T>& x, Mode mode, Rng& rng) override;
  BasicTensor<T> backward(const BasicTensor<T>& upstream) override;
  std::string kind() const override { return "flatten"; }

 private:
  Shape in_shape_;
};

/// Builds the conv layer matching spec.kind (standard or depthwise-separable).
template <class T>
LayerPtr<T> make_conv_layer(std::string name, const ConvSpec& spec, Rng& rng);

// --- gradient checking ----------------------------------------------------

struct GradcheckOptions {
  std::size_t samples = 200;
  double step = 1e-5;
  double tolerance = 1e-4;
  /// Upper bound on attempts (samples * factor) when coordinates get excluded.
  std::size_t attempt_factor = 20;
};

struct ParamCheck {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
};

struct GradcheckReport {
  std::vector<ParamCheck> params;
  std::size_t checked = 0;
  std::size_t excluded = 0;
  double max_rel_err = 0.0;
  bool passed = false;
};

/// Loss value at the current parameters plus the discrete activation signature.
/// When `terms` is filled (the loss is their sum) central differences are
/// taken term by term, which keeps the rounding error of a large total out of
/// small derivatives.
struct Probe {
  double loss = 0.0;
  std::vector<double> terms;
  std::uint64_t signature = 0;
};

/// Compares the analytic gradients already stored in `params[i]->grad` with
/// central differences of `evaluate`, sampling coordinates round-robin over
/// parameters. A coordinate whose +/-h probes change the signature sits on a
/// kink and is excluded. Relative error uses max(|a|, |n|, 1e-8).
GradcheckReport gradcheck(std::span<Parameter<double>* const> params,
                          const std::function<Probe()>& evaluate, Rng& rng,
                          const GradcheckOptions& options = {});

/// Gradient check of a single layer against the scalar loss sum(out * R),
/// for a fixed random projection R. Covers parameters and the input.
GradcheckReport gradcheck_layer(Layer<double>& layer, const Tensor64& input, Rng& rng,
                                const GradcheckOptions& options = {});

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v);

}  // namespace mstc
