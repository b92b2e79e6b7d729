#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mstc/objective.hpp"
#include "mstc/tensor.hpp"

namespace mstc {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  std::size_t present() const { return tp + fp + tn + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

/// Per-label counts over present entries; a probability >= threshold is a positive call.
template <class T>
std::vector<Confusion> confusion(const BasicTensor<T>& predictions, const LabelMatrix& labels,
                                 double threshold = 0.5);

struct LabelMetrics {
  std::size_t n_present = 0;
  std::optional<double> sensitivity;
  std::optional<double> specificity;
  std::optional<double> ba;  // set only when both components are defined
};

struct FoldReport {
  std::vector<LabelMetrics> labels;
  double macro_sensitivity = 0.0;
  double macro_specificity = 0.0;
  double macro_ba = 0.0;
  /// Labels whose BA is undefined in this fold; they are left out of the macros.
  std::size_t excluded = 0;
};

FoldReport balanced_accuracy(const std::vector<Confusion>& counts);

struct Summary {
  std::vector<LabelMetrics> labels;  // fold-averaged per label
  std::size_t folds = 0;
  double mean_sensitivity = 0.0, sd_sensitivity = 0.0;
  double mean_specificity = 0.0, sd_specificity = 0.0;
  double mean_ba = 0.0, sd_ba = 0.0;
  std::size_t excluded = 0;  // labels undefined in every fold
};

/// Averages each label over the folds where it is defined, then takes the
/// unweighted mean over labels. The sd fields are the population standard
/// deviation of the per-fold macro scores.
Summary aggregate(const std::vector<FoldReport>& reports);

/// Tab-separated table: label_id, n_present, sens, spec, ba ("NA" when undefined).
void write_label_table(std::ostream& os, const std::vector<LabelMetrics>& labels,
                       const std::vector<std::string>& label_names = {});

/// Machine-readable JSON document of a summary (and optionally the folds).
std::string summary_json(const Summary& summary, const std::vector<FoldReport>& folds = {},
                         const std::vector<std::string>& label_names = {});

/// "0.750 (± 0.012)"
std::string format_mean_sd(double mean, double sd);

}  // namespace mstc
