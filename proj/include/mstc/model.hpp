#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "mstc/layers.hpp"
#include "mstc/objective.hpp"
#include "mstc/tensor.hpp"

namespace mstc {

enum class Modality : std::uint8_t { kAcc = 0, kGyro = 1, kAud = 2, kPs = 3 };
inline constexpr std::array<Modality, 4> kAllModalities = {Modality::kAcc, Modality::kGyro,
                                                           Modality::kAud, Modality::kPs};
inline constexpr std::size_t kModalityCount = 4;

const char* modality_name(Modality m);
Modality parse_modality(std::string_view name);
/// Comma-separated list, e.g. "acc,gyro". Result is in canonical order, deduplicated.
std::vector<Modality> parse_modality_list(std::string_view list);
std::string modality_list_string(std::span<const Modality> ms);
inline bool is_temporal(Modality m) { return m != Modality::kPs; }
inline std::size_t index_of(Modality m) { return static_cast<std::size_t>(m); }

enum class Fusion { kGmp, kGap, kFc, kFlattened, kConv };
const char* fusion_name(Fusion f);
Fusion parse_fusion(std::string_view name);

const char* conv_kind_name(ConvKind k);  // "dps" / "standard"
ConvKind parse_conv_kind(std::string_view name);

/// Architecture description. Defaults reproduce the full-size network.
struct ModelConfig {
  std::vector<Modality> modalities{kAllModalities.begin(), kAllModalities.end()};
  ConvKind conv_kind = ConvKind::kDepthwiseSeparable;
  Fusion fusion = Fusion::kGmp;
  bool multi_task = false;
  std::size_t label_count = 51;

  std::size_t imu_length = 800;
  std::size_t imu_channels = 3;
  std::size_t aud_length = 420;
  std::size_t aud_channels = 13;
  std::size_t ps_width = 16;

  std::array<std::size_t, 2> imu_kernels{64, 32};
  std::array<std::size_t, 2> aud_kernels{8, 6};
  std::array<std::size_t, 2> filters{32, 64};
  std::size_t stride = 2;
  std::size_t ps_units = 64;
  std::vector<std::size_t> shared_units{2048, 1024};
  std::size_t fusion_fc_units = 128;
  std::size_t fusion_conv_kernel = 8;
  std::size_t fusion_conv_filters = 64;
  std::size_t task_units = 128;
  std::size_t ps_task_units = 64;

  double dropout = 0.2;
  RegPolicy regularization{};

  bool has(Modality m) const;
  std::size_t input_length(Modality m) const;
  std::size_t input_channels(Modality m) const;
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json model_config_to_json(const ModelConfig& config);
/// Rejects unknown keys; absent keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

/// Per-modality inputs: [B x L x C] for temporal streams, [B x W] for ps.
template <class T>
struct ModalityBatch {
  std::array<std::optional<BasicTensor<T>>, kModalityCount> inputs;

  bool has(Modality m) const { return inputs[index_of(m)].has_value(); }
  const BasicTensor<T>& get(Modality m) const;
  void set(Modality m, BasicTensor<T> t) { inputs[index_of(m)] = std::move(t); }
  std::size_t batch_size() const;

  template <class U>
  ModalityBatch<U> cast() const {
    ModalityBatch<U> out;
    for (std::size_t i = 0; i < kModalityCount; ++i) {
      if (inputs[i]) out.inputs[i] = inputs[i]->template cast<U>();
    }
    return out;
  }
};

/// Observer for intermediate activations, keyed by layer name.
template <class T>
using ActivationTap = std::function<void(const std::string&, const BasicTensor<T>&)>;

/// Layers applied in order.
template <class T>
class Sequential {
 public:
  void add(LayerPtr<T> layer) { layers_.push_back(std::move(layer)); }
  BasicTensor<T> forward(BasicTensor<T> x, Mode mode, Rng& rng, const ActivationTap<T>* tap);
  BasicTensor<T> backward(BasicTensor<T> g);
  std::vector<Parameter<T>*> parameters() const;
  void signature(std::uint64_t& h) const;
  void names(std::vector<std::string>& out) const;
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<LayerPtr<T>> layers_;
};

template <class T>
struct ModelOutput {
  /// "joint" for a single-task model, otherwise the modality of each head.
  std::vector<std::string> head_names;
  std::vector<BasicTensor<T>> logits;  // each [B x label_count]
};

template <class T>
class Model {
 public:
  /// Xavier-initialized model; (config, seed) fully determines the parameters.
  static Model build(const ModelConfig& config, std::uint64_t seed);

  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  /// Runs every modality of the config (single-task) or every config modality
  /// present in `batch` and listed in `subset` (multi-task; empty = all).
  ModelOutput<T> forward_logits(const ModalityBatch<T>& batch, Mode mode, Rng& rng,
                                std::span<const Modality> subset = {},
                                const ActivationTap<T>* tap = nullptr);

  /// Gradients w.r.t. the logits of the last forward, one per head. Parameter
  /// gradients accumulate.
  void backward(std::span<const BasicTensor<T>> logit_grads);

  /// Sigmoid probabilities [B x C]. Multi-task models average their heads.
  BasicTensor<T> forward(const ModalityBatch<T>& batch, Mode mode, Rng& rng);

  /// Weighted mean of per-head probabilities over `subset` (multi-task only).
  /// `weights`, when given, holds one weight per entry of `subset`.
  BasicTensor<T> predict_missing(const ModalityBatch<T>& batch, std::span<const Modality> subset,
                                 std::span<const double> weights = {});

  std::vector<Parameter<T>*> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  /// Discrete activation state of the last forward (ReLU sides, argmax picks).
  std::uint64_t signature() const;
  /// Every layer name a tap can observe, in forward order.
  std::vector<std::string> layer_names() const;

  const ModelConfig& config() const { return config_; }

 private:
  explicit Model(ModelConfig config) : config_(std::move(config)) {}

  ModelConfig config_;
  std::array<std::unique_ptr<Sequential<T>>, kModalityCount> encoders_;
  std::unique_ptr<Sequential<T>> fusion_;  // conv fusion only
  std::unique_ptr<Sequential<T>> head_;    // single-task shared layers + output
  std::unique_ptr<Sequential<T>> shared_;  // multi-task weight-shared layer
  std::array<std::unique_ptr<Sequential<T>>, kModalityCount> tasks_;

  // Cache of the last forward.
  std::vector<Modality> run_;
  std::vector<std::size_t> feature_widths_;
  std::vector<std::size_t> map_lengths_;
  std::size_t batch_ = 0;
};

// --- checkpoints ----------------------------------------------------------

inline constexpr int kCheckpointFormatVersion = 1;

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
};

/// Writes manifest.json plus one blob per parameter (and per extra tensor)
/// under `dir`, which is created if needed.
template <class T>
void checkpoint_save(const Model<T>& model, const std::filesystem::path& dir,
                     const CheckpointMeta& meta,
                     const std::map<std::string, BasicTensor<T>>& extra = {});

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  CheckpointMeta meta;
  std::map<std::string, BasicTensor<T>> extra;
};

template <class T>
LoadedCheckpoint<T> checkpoint_load(const std::filesystem::path& dir);

}  // namespace mstc
