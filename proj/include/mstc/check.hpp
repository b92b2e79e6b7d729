#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mstc/layers.hpp"
#include "mstc/model.hpp"

namespace mstc {

struct NamedReport {
  std::string name;
  GradcheckReport report;
};

/// Gradient check of every layer type on small random inputs.
std::vector<NamedReport> layer_gradcheck_suite(std::uint64_t seed,
                                               const GradcheckOptions& options = {});

/// Gradient check of a whole model (64-bit) against the weighted masked loss
/// plus the regularization penalty, on random inputs and labels with missing
/// entries. Dropout masks are held fixed across probes.
GradcheckReport model_gradcheck(const ModelConfig& config, std::uint64_t seed, std::size_t batch,
                                const GradcheckOptions& options = {});

/// Random per-modality inputs shaped for `config`.
template <class T>
ModalityBatch<T> random_batch(const ModelConfig& config, std::size_t batch, Rng& rng);

}  // namespace mstc
