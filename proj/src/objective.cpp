#include "mstc/objective.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace mstc {

LabelMatrix::LabelMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), values_(rows * cols, 0), present_(rows * cols, 0) {}

std::optional<std::uint8_t> LabelMatrix::get(std::size_t i, std::size_t c) const {
  if (!present(i, c)) return std::nullopt;
  return value(i, c);
}

void LabelMatrix::set(std::size_t i, std::size_t c, std::uint8_t v) {
  if (v > 1) throw std::invalid_argument("label value must be 0 or 1");
  values_[i * cols_ + c] = v;
  present_[i * cols_ + c] = 1;
}

void LabelMatrix::set_missing(std::size_t i, std::size_t c) { present_[i * cols_ + c] = 0; }

LabelMatrix LabelMatrix::select_rows(std::span<const std::size_t> rows) const {
  LabelMatrix out(rows.size(), cols_);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= rows_) throw std::out_of_range("label row out of range");
    std::copy_n(values_.begin() + rows[r] * cols_, cols_, out.values_.begin() + r * cols_);
    std::copy_n(present_.begin() + rows[r] * cols_, cols_, out.present_.begin() + r * cols_);
  }
  return out;
}

LabelMatrix LabelMatrix::select_cols(std::span<const std::size_t> cols) const {
  LabelMatrix out(rows_, cols.size());
  for (std::size_t i = 0; i < rows_; ++i) {
    for (std::size_t j = 0; j < cols.size(); ++j) {
      out.values_[i * cols.size() + j] = values_[i * cols_ + cols[j]];
      out.present_[i * cols.size() + j] = present_[i * cols_ + cols[j]];
    }
  }
  return out;
}

void LabelMatrix::append_row(std::span<const std::optional<std::uint8_t>> row) {
  if (rows_ == 0 && cols_ == 0) cols_ = row.size();
  if (row.size() != cols_) {
    throw DimensionError("label row has " + std::to_string(row.size()) + " entries, expected " +
                         std::to_string(cols_));
  }
  for (const auto& v : row) {
    if (v && *v > 1) throw std::invalid_argument("label value must be 0 or 1");
    values_.push_back(v ? *v : 0);
    present_.push_back(v ? 1 : 0);
  }
  ++rows_;
}

Tensor64 compute_instance_weights(const LabelMatrix& labels) {
  if (labels.rows() == 0 || labels.cols() == 0) {
    throw std::invalid_argument("instance weights need a non-empty label matrix");
  }
  const std::size_t n = labels.rows(), c_count = labels.cols();
  Tensor64 psi({n, c_count});
  for (std::size_t c = 0; c < c_count; ++c) {
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!labels.present(i, c)) continue;
      (labels.value(i, c) ? pos : neg) += 1;
    }
    const double all = static_cast<double>(pos + neg);
    const bool degenerate = pos == 0 || neg == 0;
    const double w_pos = degenerate ? 1.0 : all / (2.0 * static_cast<double>(pos));
    const double w_neg = degenerate ? 1.0 : all / (2.0 * static_cast<double>(neg));
    for (std::size_t i = 0; i < n; ++i) {
      if (!labels.present(i, c)) continue;
      psi.at(i, c) = labels.value(i, c) ? w_pos : w_neg;
    }
  }
  return psi;
}

Tensor64 uniform_instance_weights(const LabelMatrix& labels) {
  Tensor64 psi({labels.rows(), labels.cols()});
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    for (std::size_t c = 0; c < labels.cols(); ++c) psi.at(i, c) = labels.present(i, c) ? 1.0 : 0.0;
  }
  return psi;
}

namespace {

template <class T>
void check_loss_shapes(const BasicTensor<T>& x, const LabelMatrix& labels, const Tensor64& w) {
  if (x.rank() != 2 || x.dim(0) != labels.rows() || x.dim(1) != labels.cols() ||
      w.shape() != x.shape()) {
    throw DimensionError("loss: predictions " + shape_string(x.shape()) + ", labels [" +
                         std::to_string(labels.rows()) + "x" + std::to_string(labels.cols()) +
                         "], weights " + shape_string(w.shape()) + " disagree");
  }
}

}  // namespace

template <class T>
LossResult<T> weighted_masked_bce_logits(const BasicTensor<T>& logits, const LabelMatrix& labels,
                                         const Tensor64& weights, Tensor64* terms) {
  check_loss_shapes(logits, labels, weights);
  check_finite(logits, "loss logits");
  const std::size_t n = logits.dim(0), c_count = logits.dim(1);
  const double scale = 1.0 / static_cast<double>(n * c_count);
  LossResult<T> result{0.0, BasicTensor<T>(logits.shape())};
  if (terms) *terms = Tensor64(logits.shape());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < c_count; ++c) {
      if (!labels.present(i, c)) continue;
      const double psi = weights.at(i, c);
      if (psi == 0.0) continue;
      const double z = static_cast<double>(logits.at(i, c));
      const double y = labels.value(i, c);
      // -[y log s(z) + (1-y) log(1-s(z))] = max(z,0) - y z + log(1 + e^{-|z|})
      const double ce = std::max(z, 0.0) - y * z + std::log1p(std::exp(-std::abs(z)));
      result.loss += psi * ce;
      if (terms) terms->at(i, c) = psi * ce * scale;
      result.grad.at(i, c) = static_cast<T>(psi * scale * (sigmoid_scalar(z) - y));
    }
  }
  result.loss *= scale;
  return result;
}

template <class T>
LossResult<T> weighted_masked_bce(const BasicTensor<T>& probabilities, const LabelMatrix& labels,
                                  const Tensor64& weights, double eps) {
  check_loss_shapes(probabilities, labels, weights);
  check_finite(probabilities, "loss probabilities");
  const std::size_t n = probabilities.dim(0), c_count = probabilities.dim(1);
  const double scale = 1.0 / static_cast<double>(n * c_count);
  LossResult<T> result{0.0, BasicTensor<T>(probabilities.shape())};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < c_count; ++c) {
      if (!labels.present(i, c)) continue;
      const double psi = weights.at(i, c);
      if (psi == 0.0) continue;
      const double p = std::clamp(static_cast<double>(probabilities.at(i, c)), eps, 1.0 - eps);
      const double y = labels.value(i, c);
      result.loss += -psi * (y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
      result.grad.at(i, c) = static_cast<T>(psi * scale * (-y / p + (1.0 - y) / (1.0 - p)));
    }
  }
  result.loss *= scale;
  return result;
}

void RegPolicy::validate() const {
  if (!(l1_rate >= 0.0) || !(l2_depthwise_rate >= 0.0)) {
    throw std::invalid_argument("regularization rates must be non-negative");
  }
}

template <class T>
double regularization_penalty(std::span<Parameter<T>* const> params, const RegPolicy& policy,
                              bool accumulate_grad) {
  policy.validate();
  double penalty = 0.0;
  for (auto* p : params) {
    const bool l1 = policy.l1_dense && p->role == ParamRole::kDenseWeight;
    const bool l2 = (policy.l2_depthwise && p->role == ParamRole::kDepthwiseKernel) ||
                    (policy.l2_standard_conv && p->role == ParamRole::kConvKernel);
    if (!l1 && !l2) continue;
    if (accumulate_grad && p->grad.shape() != p->value.shape()) p->zero_grad();
    if (l1 && policy.l1_rate > 0.0) {
      const double rate = policy.l1_rate;
      double sum = 0.0;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double w = p->value[i];
        sum += std::abs(w);
        if (!accumulate_grad) continue;
        if (w > 0) p->grad[i] += static_cast<T>(rate);
        else if (w < 0) p->grad[i] -= static_cast<T>(rate);
      }
      penalty += rate * sum;
    }
    if (l2 && policy.l2_depthwise_rate > 0.0) {
      const double rate = policy.l2_depthwise_rate;
      double sum = 0.0;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double w = p->value[i];
        sum += w * w;
        if (accumulate_grad) p->grad[i] += static_cast<T>(2.0 * rate * w);
      }
      penalty += rate * sum;
    }
  }
  return penalty;
}

template LossResult<float> weighted_masked_bce_logits<float>(const Tensor&, const LabelMatrix&,
                                                             const Tensor64&, Tensor64*);
template LossResult<double> weighted_masked_bce_logits<double>(const Tensor64&, const LabelMatrix&,
                                                               const Tensor64&, Tensor64*);
template LossResult<float> weighted_masked_bce<float>(const Tensor&, const LabelMatrix&,
                                                      const Tensor64&, double);
template LossResult<double> weighted_masked_bce<double>(const Tensor64&, const LabelMatrix&,
                                                        const Tensor64&, double);
template double regularization_penalty<float>(std::span<Parameter<float>* const>, const RegPolicy&,
                                              bool);
template double regularization_penalty<double>(std::span<Parameter<double>* const>,
                                               const RegPolicy&, bool);

}  // namespace mstc
