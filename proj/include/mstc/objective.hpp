#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mstc/layers.hpp"
#include "mstc/tensor.hpp"

namespace mstc {

/// N x C multi-label targets. Each entry is 0, 1 or missing; a missing entry
/// still has a stored value, which every consumer must ignore.
class LabelMatrix {
 public:
  LabelMatrix() = default;
  LabelMatrix(std::size_t rows, std::size_t cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

  bool present(std::size_t i, std::size_t c) const { return present_[i * cols_ + c] != 0; }
  /// Stored 0/1 value; meaningful only when present(i, c).
  std::uint8_t value(std::size_t i, std::size_t c) const { return values_[i * cols_ + c]; }
  std::optional<std::uint8_t> get(std::size_t i, std::size_t c) const;

  void set(std::size_t i, std::size_t c, std::uint8_t v);
  void set_missing(std::size_t i, std::size_t c);
  /// Overwrites the stored value without touching the mask.
  void set_stored_value(std::size_t i, std::size_t c, std::uint8_t v) { values_[i * cols_ + c] = v; }

  /// Copies the given rows, in order.
  LabelMatrix select_rows(std::span<const std::size_t> rows) const;
  /// Copies the given columns, in order.
  LabelMatrix select_cols(std::span<const std::size_t> cols) const;

  void append_row(std::span<const std::optional<std::uint8_t>> row);

  friend bool operator==(const LabelMatrix&, const LabelMatrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<std::uint8_t> values_;
  std::vector<std::uint8_t> present_;
};

/// Inverse-class-frequency weights. For label c with P present positives and
/// G present negatives (A = P + G): positives get A/(2P), negatives A/(2G),
/// missing entries 0. A column lacking either class weights its present entries 1.
Tensor64 compute_instance_weights(const LabelMatrix& labels);

/// Weight matrix with 1 on present entries and 0 on missing ones (weighting off).
Tensor64 uniform_instance_weights(const LabelMatrix& labels);

template <class T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> grad;
};

/// J = 1/(N*C) * sum Psi[i,c] * BCE(sigmoid(z[i,c]), y[i,c]), evaluated from
/// logits. `grad` is dJ/dz. Missing entries contribute nothing. When `terms`
/// is given it receives each entry's contribution to J.
template <class T>
LossResult<T> weighted_masked_bce_logits(const BasicTensor<T>& logits, const LabelMatrix& labels,
                                         const Tensor64& weights, Tensor64* terms = nullptr);

/// Same objective in probability space; probabilities are clipped to
/// [eps, 1-eps]. `grad` is dJ/dp.
template <class T>
LossResult<T> weighted_masked_bce(const BasicTensor<T>& probabilities, const LabelMatrix& labels,
                                  const Tensor64& weights, double eps = 1e-7);

struct RegPolicy {
  double l1_rate = 1e-4;            // dense weights
  double l2_depthwise_rate = 1e-4;  // depthwise kernels
  bool l1_dense = true;
  bool l2_depthwise = true;
  /// Applies the depthwise L2 rate to standard conv kernels as well, so the
  /// standard-conv variant is regularized like its separable counterpart.
  bool l2_standard_conv = true;

  void validate() const;

  friend bool operator==(const RegPolicy&, const RegPolicy&) = default;
};

/// Returns the penalty and, with `accumulate_grad`, adds its gradient into
/// each parameter's grad. Biases and pointwise weights are never penalized.
template <class T>
double regularization_penalty(std::span<Parameter<T>* const> params, const RegPolicy& policy,
                              bool accumulate_grad = true);

}  // namespace mstc
