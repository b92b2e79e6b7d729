#include "mstc/metrics.hpp"

#include <cmath>
#include <cstdio>

#include "json.hpp"

namespace mstc {

template <class T>
std::vector<Confusion> confusion(const BasicTensor<T>& predictions, const LabelMatrix& labels,
                                 double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw std::invalid_argument("threshold must be in (0, 1)");
  }
  if (predictions.rank() != 2 || predictions.dim(0) != labels.rows() ||
      predictions.dim(1) != labels.cols()) {
    throw DimensionError("confusion: predictions " + shape_string(predictions.shape()) +
                         " vs labels [" + std::to_string(labels.rows()) + "x" +
                         std::to_string(labels.cols()) + "]");
  }
  std::vector<Confusion> counts(labels.cols());
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    for (std::size_t c = 0; c < labels.cols(); ++c) {
      if (!labels.present(i, c)) continue;
      const bool called = static_cast<double>(predictions.at(i, c)) >= threshold;
      const bool truth = labels.value(i, c) != 0;
      auto& k = counts[c];
      if (truth) (called ? k.tp : k.fn) += 1;
      else (called ? k.fp : k.tn) += 1;
    }
  }
  return counts;
}

FoldReport balanced_accuracy(const std::vector<Confusion>& counts) {
  FoldReport report;
  double sum_sens = 0.0, sum_spec = 0.0, sum_ba = 0.0;
  std::size_t defined = 0;
  for (const auto& k : counts) {
    LabelMetrics m;
    m.n_present = k.present();
    if (k.tp + k.fn > 0) m.sensitivity = static_cast<double>(k.tp) / static_cast<double>(k.tp + k.fn);
    if (k.tn + k.fp > 0) m.specificity = static_cast<double>(k.tn) / static_cast<double>(k.tn + k.fp);
    if (m.sensitivity && m.specificity) {
      m.ba = (*m.sensitivity + *m.specificity) / 2.0;
      sum_sens += *m.sensitivity;
      sum_spec += *m.specificity;
      sum_ba += *m.ba;
      ++defined;
    } else {
      ++report.excluded;
    }
    report.labels.push_back(m);
  }
  if (defined > 0) {
    report.macro_sensitivity = sum_sens / static_cast<double>(defined);
    report.macro_specificity = sum_spec / static_cast<double>(defined);
    report.macro_ba = sum_ba / static_cast<double>(defined);
  }
  return report;
}

namespace {

void mean_sd(const std::vector<double>& xs, double& mean, double& sd) {
  mean = 0.0;
  sd = 0.0;
  if (xs.empty()) return;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  sd = std::sqrt(var / static_cast<double>(xs.size()));
}

}  // namespace

Summary aggregate(const std::vector<FoldReport>& reports) {
  Summary s;
  s.folds = reports.size();
  if (reports.empty()) return s;
  const std::size_t n_labels = reports.front().labels.size();
  for (const auto& r : reports) {
    if (r.labels.size() != n_labels) throw DimensionError("aggregate: folds disagree on label count");
  }
  double sum_sens = 0.0, sum_spec = 0.0, sum_ba = 0.0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < n_labels; ++c) {
    LabelMetrics m;
    double se = 0.0, sp = 0.0;
    std::size_t n = 0;
    for (const auto& r : reports) {
      const auto& l = r.labels[c];
      m.n_present += l.n_present;
      if (!l.ba) continue;
      se += *l.sensitivity;
      sp += *l.specificity;
      ++n;
    }
    if (n > 0) {
      m.sensitivity = se / static_cast<double>(n);
      m.specificity = sp / static_cast<double>(n);
      m.ba = (*m.sensitivity + *m.specificity) / 2.0;
      sum_sens += *m.sensitivity;
      sum_spec += *m.specificity;
      sum_ba += *m.ba;
      ++defined;
    } else {
      ++s.excluded;
    }
    s.labels.push_back(m);
  }
  if (defined > 0) {
    s.mean_sensitivity = sum_sens / static_cast<double>(defined);
    s.mean_specificity = sum_spec / static_cast<double>(defined);
    s.mean_ba = sum_ba / static_cast<double>(defined);
  }
  std::vector<double> sens, spec, ba;
  for (const auto& r : reports) {
    sens.push_back(r.macro_sensitivity);
    spec.push_back(r.macro_specificity);
    ba.push_back(r.macro_ba);
  }
  double unused = 0.0;
  mean_sd(sens, unused, s.sd_sensitivity);
  mean_sd(spec, unused, s.sd_specificity);
  mean_sd(ba, unused, s.sd_ba);
  return s;
}

namespace {

std::string fixed6(const std::optional<double>& v) {
  if (!v) return "NA";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

nlohmann::json label_json(const LabelMetrics& m, std::size_t id, const std::vector<std::string>& names) {
  nlohmann::json j;
  j["label_id"] = id;
  if (id < names.size()) j["name"] = names[id];
  j["n_present"] = m.n_present;
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); };
  j["sensitivity"] = opt(m.sensitivity);
  j["specificity"] = opt(m.specificity);
  j["ba"] = opt(m.ba);
  return j;
}

}  // namespace

void write_label_table(std::ostream& os, const std::vector<LabelMetrics>& labels,
                       const std::vector<std::string>& label_names) {
  os << "label_id\tn_present\tsens\tspec\tba\n";
  for (std::size_t c = 0; c < labels.size(); ++c) {
    const auto& m = labels[c];
    if (c < label_names.size()) os << label_names[c];
    else os << c;
    os << '\t' << m.n_present << '\t' << fixed6(m.sensitivity) << '\t' << fixed6(m.specificity)
       << '\t' << fixed6(m.ba) << '\n';
  }
}

std::string summary_json(const Summary& summary, const std::vector<FoldReport>& folds,
                         const std::vector<std::string>& label_names) {
  nlohmann::json j;
  j["folds"] = summary.folds;
  j["excluded_labels"] = summary.excluded;
  j["ba"] = {{"mean", summary.mean_ba}, {"sd", summary.sd_ba}};
  j["sensitivity"] = {{"mean", summary.mean_sensitivity}, {"sd", summary.sd_sensitivity}};
  j["specificity"] = {{"mean", summary.mean_specificity}, {"sd", summary.sd_specificity}};
  auto& labels = j["labels"] = nlohmann::json::array();
  for (std::size_t c = 0; c < summary.labels.size(); ++c) {
    labels.push_back(label_json(summary.labels[c], c, label_names));
  }
  if (!folds.empty()) {
    auto& fj = j["fold_reports"] = nlohmann::json::array();
    for (const auto& f : folds) {
      fj.push_back({{"macro_ba", f.macro_ba},
                    {"macro_sensitivity", f.macro_sensitivity},
                    {"macro_specificity", f.macro_specificity},
                    {"excluded_labels", f.excluded}});
    }
  }
  return j.dump(2) + "\n";
}

std::string format_mean_sd(double mean, double sd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f (\xC2\xB1 %.3f)", mean, sd);
  return buf;
}

template std::vector<Confusion> confusion<float>(const Tensor&, const LabelMatrix&, double);
template std::vector<Confusion> confusion<double>(const Tensor64&, const LabelMatrix&, double);

}  // namespace mstc
