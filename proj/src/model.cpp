#include "mstc/model.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <stdexcept>

namespace mstc {

namespace fs = std::filesystem;
using nlohmann::json;

const char* modality_name(Modality m) {
  switch (m) {
    case Modality::kAcc: return "acc";
    case Modality::kGyro: return "gyro";
    case Modality::kAud: return "aud";
    case Modality::kPs: return "ps";
  }
  return "?";
}

Modality parse_modality(std::string_view name) {
  for (auto m : kAllModalities) {
    if (name == modality_name(m)) return m;
  }
  throw std::invalid_argument("unknown modality '" + std::string(name) +
                              "' (expected acc, gyro, aud or ps)");
}

std::vector<Modality> parse_modality_list(std::string_view list) {
  std::set<Modality> seen;
  std::size_t start = 0;
  while (start <= list.size()) {
    auto end = list.find(',', start);
    if (end == std::string_view::npos) end = list.size();
    auto token = list.substr(start, end - start);
    while (!token.empty() && token.front() == ' ') token.remove_prefix(1);
    while (!token.empty() && token.back() == ' ') token.remove_suffix(1);
    if (!token.empty()) seen.insert(parse_modality(token));
    start = end + 1;
  }
  return {seen.begin(), seen.end()};
}

std::string modality_list_string(std::span<const Modality> ms) {
  std::string out;
  for (auto m : ms) {
    if (!out.empty()) out += ',';
    out += modality_name(m);
  }
  return out;
}

const char* fusion_name(Fusion f) {
  switch (f) {
    case Fusion::kGmp: return "gmp";
    case Fusion::kGap: return "gap";
    case Fusion::kFc: return "fc";
    case Fusion::kFlattened: return "flattened";
    case Fusion::kConv: return "conv";
  }
  return "?";
}

Fusion parse_fusion(std::string_view name) {
  for (auto f : {Fusion::kGmp, Fusion::kGap, Fusion::kFc, Fusion::kFlattened, Fusion::kConv}) {
    if (name == fusion_name(f)) return f;
  }
  throw std::invalid_argument("unknown fusion mode '" + std::string(name) + "'");
}

const char* conv_kind_name(ConvKind k) {
  switch (k) {
    case ConvKind::kDepthwiseSeparable: return "dps";
    case ConvKind::kStandard: return "standard";
    case ConvKind::kDepthwise: return "depthwise";
    case ConvKind::kPointwise: return "pointwise";
  }
  return "?";
}

ConvKind parse_conv_kind(std::string_view name) {
  if (name == "dps") return ConvKind::kDepthwiseSeparable;
  if (name == "standard") return ConvKind::kStandard;
  throw std::invalid_argument("unknown conv kind '" + std::string(name) +
                              "' (expected dps or standard)");
}

// --- ModelConfig ----------------------------------------------------------

bool ModelConfig::has(Modality m) const {
  return std::find(modalities.begin(), modalities.end(), m) != modalities.end();
}

std::size_t ModelConfig::input_length(Modality m) const {
  switch (m) {
    case Modality::kAcc:
    case Modality::kGyro: return imu_length;
    case Modality::kAud: return aud_length;
    case Modality::kPs: return 1;
  }
  return 0;
}

std::size_t ModelConfig::input_channels(Modality m) const {
  switch (m) {
    case Modality::kAcc:
    case Modality::kGyro: return imu_channels;
    case Modality::kAud: return aud_channels;
    case Modality::kPs: return ps_width;
  }
  return 0;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("model config: " + msg); };
  if (modalities.empty()) fail("at least one modality is required");
  if (!std::is_sorted(modalities.begin(), modalities.end()) ||
      std::adjacent_find(modalities.begin(), modalities.end()) != modalities.end()) {
    fail("modalities must be unique and in canonical order (acc, gyro, aud, ps)");
  }
  const bool any_temporal = std::any_of(modalities.begin(), modalities.end(), is_temporal);
  if (fusion == Fusion::kConv && !any_temporal) {
    fail("conv fusion needs at least one of acc, gyro, aud");
  }
  if (conv_kind != ConvKind::kDepthwiseSeparable && conv_kind != ConvKind::kStandard) {
    fail("conv_kind must be dps or standard");
  }
  if (label_count == 0) fail("label_count must be positive");
  if (imu_length == 0 || imu_channels == 0 || aud_length == 0 || aud_channels == 0 ||
      ps_width == 0) {
    fail("input shapes must be positive");
  }
  for (auto k : {imu_kernels[0], imu_kernels[1], aud_kernels[0], aud_kernels[1], filters[0],
                 filters[1], stride, ps_units, fusion_fc_units, fusion_conv_kernel,
                 fusion_conv_filters, task_units, ps_task_units}) {
    if (k == 0) fail("layer sizes must be positive");
  }
  if (shared_units.empty()) fail("shared_units needs at least one layer");
  for (auto u : shared_units) {
    if (u == 0) fail("shared_units entries must be positive");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must be in [0, 1)");
  regularization.validate();
  if (multi_task) {
    if (fusion != Fusion::kGmp && fusion != Fusion::kGap) {
      fail("multi-task models share one layer across modalities and need gmp or gap fusion");
    }
    if (any_temporal && has(Modality::kPs) && filters[1] != ps_units) {
      fail("multi-task models need equal pooled widths: filters[1] must equal ps_units");
    }
  }
}

json model_config_to_json(const ModelConfig& c) {
  json mods = json::array();
  for (auto m : c.modalities) mods.push_back(modality_name(m));
  return json{{"modalities", mods},
              {"conv_kind", conv_kind_name(c.conv_kind)},
              {"fusion", fusion_name(c.fusion)},
              {"multi_task", c.multi_task},
              {"label_count", c.label_count},
              {"imu_length", c.imu_length},
              {"imu_channels", c.imu_channels},
              {"aud_length", c.aud_length},
              {"aud_channels", c.aud_channels},
              {"ps_width", c.ps_width},
              {"imu_kernels", c.imu_kernels},
              {"aud_kernels", c.aud_kernels},
              {"filters", c.filters},
              {"stride", c.stride},
              {"ps_units", c.ps_units},
              {"shared_units", c.shared_units},
              {"fusion_fc_units", c.fusion_fc_units},
              {"fusion_conv_kernel", c.fusion_conv_kernel},
              {"fusion_conv_filters", c.fusion_conv_filters},
              {"task_units", c.task_units},
              {"ps_task_units", c.ps_task_units},
              {"dropout", c.dropout},
              {"l1_rate", c.regularization.l1_rate},
              {"l2_rate", c.regularization.l2_depthwise_rate},
              {"l2_standard_conv", c.regularization.l2_standard_conv}};
}

ModelConfig model_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "modalities") {
      std::set<Modality> ms;
      for (const auto& m : v) ms.insert(parse_modality(m.get<std::string>()));
      c.modalities.assign(ms.begin(), ms.end());
    } else if (key == "conv_kind") {
      c.conv_kind = parse_conv_kind(v.get<std::string>());
    } else if (key == "fusion") {
      c.fusion = parse_fusion(v.get<std::string>());
    } else if (key == "multi_task") {
      c.multi_task = v.get<bool>();
    } else if (key == "label_count") {
      c.label_count = v.get<std::size_t>();
    } else if (key == "imu_length") {
      c.imu_length = v.get<std::size_t>();
    } else if (key == "imu_channels") {
      c.imu_channels = v.get<std::size_t>();
    } else if (key == "aud_length") {
      c.aud_length = v.get<std::size_t>();
    } else if (key == "aud_channels") {
      c.aud_channels = v.get<std::size_t>();
    } else if (key == "ps_width") {
      c.ps_width = v.get<std::size_t>();
    } else if (key == "imu_kernels") {
      c.imu_kernels = v.get<std::array<std::size_t, 2>>();
    } else if (key == "aud_kernels") {
      c.aud_kernels = v.get<std::array<std::size_t, 2>>();
    } else if (key == "filters") {
      c.filters = v.get<std::array<std::size_t, 2>>();
    } else if (key == "stride") {
      c.stride = v.get<std::size_t>();
    } else if (key == "ps_units") {
      c.ps_units = v.get<std::size_t>();
    } else if (key == "shared_units") {
      c.shared_units = v.get<std::vector<std::size_t>>();
    } else if (key == "fusion_fc_units") {
      c.fusion_fc_units = v.get<std::size_t>();
    } else if (key == "fusion_conv_kernel") {
      c.fusion_conv_kernel = v.get<std::size_t>();
    } else if (key == "fusion_conv_filters") {
      c.fusion_conv_filters = v.get<std::size_t>();
    } else if (key == "task_units") {
      c.task_units = v.get<std::size_t>();
    } else if (key == "ps_task_units") {
      c.ps_task_units = v.get<std::size_t>();
    } else if (key == "dropout") {
      c.dropout = v.get<double>();
    } else if (key == "l1_rate") {
      c.regularization.l1_rate = v.get<double>();
    } else if (key == "l2_rate") {
      c.regularization.l2_depthwise_rate = v.get<double>();
    } else if (key == "l2_standard_conv") {
      c.regularization.l2_standard_conv = v.get<bool>();
    } else {
      throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

// --- ModalityBatch / Sequential -------------------------------------------

template <class T>
const BasicTensor<T>& ModalityBatch<T>::get(Modality m) const {
  const auto& slot = inputs[index_of(m)];
  if (!slot) throw std::invalid_argument(std::string("batch has no ") + modality_name(m) + " input");
  return *slot;
}

template <class T>
std::size_t ModalityBatch<T>::batch_size() const {
  for (const auto& slot : inputs) {
    if (slot) return slot->dim(0);
  }
  return 0;
}

template <class T>
BasicTensor<T> Sequential<T>::forward(BasicTensor<T> x, Mode mode, Rng& rng,
                                      const ActivationTap<T>* tap) {
  for (auto& layer : layers_) {
    x = layer->forward(x, mode, rng);
    if (tap && *tap) (*tap)(layer->name(), x);
  }
  return x;
}

template <class T>
BasicTensor<T> Sequential<T>::backward(BasicTensor<T> g) {
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

template <class T>
std::vector<Parameter<T>*> Sequential<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  for (const auto& layer : layers_) {
    for (auto* p : layer->parameters()) out.push_back(p);
  }
  return out;
}

template <class T>
void Sequential<T>::signature(std::uint64_t& h) const {
  for (const auto& layer : layers_) layer->signature(h);
}

template <class T>
void Sequential<T>::names(std::vector<std::string>& out) const {
  for (const auto& layer : layers_) out.push_back(layer->name());
}

// --- building -------------------------------------------------------------

namespace {

std::size_t stream_length(const ModelConfig& c, Modality m) {
  std::size_t len = c.input_length(m);
  len = conv_output_length(len, 1, c.stride, Padding::kSame);
  return conv_output_length(len, 1, c.stride, Padding::kSame);
}

template <class T>
void add_dense_block(Sequential<T>& seq, const std::string& name, std::size_t in, std::size_t out,
                     double dropout_rate, Rng& rng) {
  seq.add(std::make_unique<Dense<T>>(name, in, out, rng));
  seq.add(std::make_unique<Relu<T>>(name + ".relu"));
  seq.add(std::make_unique<Dropout<T>>(name + ".dropout", dropout_rate));
}

/// Builds a modality encoder; returns its output feature width (0 when it
/// emits a temporal map for conv fusion).
template <class T>
std::size_t build_encoder(Sequential<T>& seq, const ModelConfig& c, Modality m, Rng& rng) {
  const std::string name = modality_name(m);
  if (m == Modality::kPs) {
    add_dense_block(seq, name + ".fc", c.ps_width, c.ps_units, c.dropout, rng);
    return c.ps_units;
  }
  const auto& kernels = m == Modality::kAud ? c.aud_kernels : c.imu_kernels;
  ConvSpec first{kernels[0], c.stride, c.input_channels(m), c.filters[0], Padding::kSame,
                 c.conv_kind};
  ConvSpec second{kernels[1], c.stride, c.filters[0], c.filters[1], Padding::kSame, c.conv_kind};
  seq.add(make_conv_layer<T>(name + ".conv1", first, rng));
  seq.add(std::make_unique<Relu<T>>(name + ".conv1.relu"));
  seq.add(make_conv_layer<T>(name + ".conv2", second, rng));
  seq.add(std::make_unique<Relu<T>>(name + ".conv2.relu"));
  const std::size_t map_width = stream_length(c, m) * c.filters[1];
  switch (c.fusion) {
    case Fusion::kGmp:
      seq.add(std::make_unique<GlobalMaxPool<T>>(name + ".gmp"));
      return c.filters[1];
    case Fusion::kGap:
      seq.add(std::make_unique<GlobalAvgPool<T>>(name + ".gap"));
      return c.filters[1];
    case Fusion::kFc:
      seq.add(std::make_unique<Flatten<T>>(name + ".flatten"));
      add_dense_block(seq, name + ".fc", map_width, c.fusion_fc_units, c.dropout, rng);
      return c.fusion_fc_units;
    case Fusion::kFlattened:
      seq.add(std::make_unique<Flatten<T>>(name + ".flatten"));
      return map_width;
    case Fusion::kConv:
      return 0;
  }
  return 0;
}

}  // namespace

template <class T>
Model<T> Model<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model(config);
  Rng rng(seed);
  const auto& c = model.config_;
  std::size_t head_in = 0;
  for (auto m : c.modalities) {
    auto enc = std::make_unique<Sequential<T>>();
    head_in += build_encoder(*enc, c, m, rng);
    model.encoders_[index_of(m)] = std::move(enc);
  }
  if (c.multi_task) {
    const std::size_t width = c.has(Modality::kPs) && c.modalities.size() == 1 ? c.ps_units
                                                                                : c.filters[1];
    const std::size_t shared_units = c.shared_units.back();
    model.shared_ = std::make_unique<Sequential<T>>();
    add_dense_block(*model.shared_, "shared_fc", width, shared_units, c.dropout, rng);
    for (auto m : c.modalities) {
      auto task = std::make_unique<Sequential<T>>();
      const std::string name = modality_name(m);
      const std::size_t units = m == Modality::kPs ? c.ps_task_units : c.task_units;
      add_dense_block(*task, name + ".task_fc", shared_units, units, c.dropout, rng);
      task->add(std::make_unique<Dense<T>>(name + ".output", units, c.label_count, rng));
      model.tasks_[index_of(m)] = std::move(task);
    }
    return model;
  }
  if (c.fusion == Fusion::kConv) {
    model.fusion_ = std::make_unique<Sequential<T>>();
    ConvSpec spec{c.fusion_conv_kernel, c.stride, c.filters[1], c.fusion_conv_filters,
                  Padding::kSame, ConvKind::kStandard};
    model.fusion_->add(make_conv_layer<T>("fusion.conv", spec, rng));
    model.fusion_->add(std::make_unique<Relu<T>>("fusion.conv.relu"));
    model.fusion_->add(std::make_unique<GlobalMaxPool<T>>("fusion.gmp"));
    head_in += c.fusion_conv_filters;
  }
  model.head_ = std::make_unique<Sequential<T>>();
  std::size_t in = head_in;
  for (std::size_t i = 0; i < c.shared_units.size(); ++i) {
    add_dense_block(*model.head_, "shared_fc" + std::to_string(i + 1), in, c.shared_units[i],
                    c.dropout, rng);
    in = c.shared_units[i];
  }
  model.head_->add(std::make_unique<Dense<T>>("output", in, c.label_count, rng));
  return model;
}

// --- running --------------------------------------------------------------

namespace {

template <class T>
void check_input(const ModelConfig& c, Modality m, const BasicTensor<T>& x, std::size_t batch) {
  const Shape expected = m == Modality::kPs
                             ? Shape{batch, c.ps_width}
                             : Shape{batch, c.input_length(m), c.input_channels(m)};
  if (x.shape() != expected) {
    throw DimensionError(std::string(modality_name(m)) + " input is " + shape_string(x.shape()) +
                         ", model expects " + shape_string(expected));
  }
}

}  // namespace

template <class T>
ModelOutput<T> Model<T>::forward_logits(const ModalityBatch<T>& batch, Mode mode, Rng& rng,
                                        std::span<const Modality> subset,
                                        const ActivationTap<T>* tap) {
  const auto& c = config_;
  run_.clear();
  feature_widths_.clear();
  map_lengths_.clear();
  batch_ = batch.batch_size();
  if (batch_ == 0) throw DimensionError("forward on an empty batch");

  if (!c.multi_task) {
    for (auto m : c.modalities) {
      if (!batch.has(m)) {
        throw std::invalid_argument(std::string("missing ") + modality_name(m) +
                                    " input: a single-task model needs every trained modality (" +
                                    modality_list_string(c.modalities) + ")");
      }
    }
    std::vector<BasicTensor<T>> features, maps;
    for (auto m : c.modalities) {
      const auto& x = batch.get(m);
      check_input(c, m, x, batch_);
      auto out = encoders_[index_of(m)]->forward(x, mode, rng, tap);
      run_.push_back(m);
      if (c.fusion == Fusion::kConv && is_temporal(m)) {
        map_lengths_.push_back(out.dim(1));
        maps.push_back(std::move(out));
      } else {
        features.push_back(std::move(out));
      }
    }
    if (fusion_) {
      auto fused = fusion_->forward(concat<T>(maps, 1), mode, rng, tap);
      features.insert(features.begin(), std::move(fused));
    }
    for (const auto& f : features) feature_widths_.push_back(f.dim(1));
    auto joined = features.size() == 1 ? std::move(features.front()) : concat<T>(features, 1);
    if (tap && *tap) (*tap)("fused", joined);
    ModelOutput<T> out;
    out.head_names.push_back("joint");
    out.logits.push_back(head_->forward(std::move(joined), mode, rng, tap));
    return out;
  }

  std::vector<BasicTensor<T>> features;
  for (auto m : c.modalities) {
    if (!batch.has(m)) continue;
    if (!subset.empty() && std::find(subset.begin(), subset.end(), m) == subset.end()) continue;
    const auto& x = batch.get(m);
    check_input(c, m, x, batch_);
    features.push_back(encoders_[index_of(m)]->forward(x, mode, rng, tap));
    run_.push_back(m);
  }
  if (run_.empty()) {
    throw std::invalid_argument("multi-task forward: none of the requested modalities (" +
                                modality_list_string(subset.empty() ? c.modalities : subset) +
                                ") is present in the batch");
  }
  auto stacked = features.size() == 1 ? std::move(features.front()) : concat<T>(features, 0);
  auto shared = shared_->forward(std::move(stacked), mode, rng, tap);
  std::vector<std::size_t> rows(run_.size(), batch_);
  auto parts = split<T>(shared, 0, rows);
  ModelOutput<T> out;
  for (std::size_t i = 0; i < run_.size(); ++i) {
    out.head_names.push_back(modality_name(run_[i]));
    out.logits.push_back(tasks_[index_of(run_[i])]->forward(std::move(parts[i]), mode, rng, tap));
  }
  return out;
}

template <class T>
void Model<T>::backward(std::span<const BasicTensor<T>> logit_grads) {
  const auto& c = config_;
  if (run_.empty()) throw std::logic_error("model backward called without forward");
  if (!c.multi_task) {
    if (logit_grads.size() != 1) throw DimensionError("single-task backward takes one gradient");
    auto g = head_->backward(logit_grads[0]);
    auto parts = feature_widths_.size() == 1 ? std::vector<BasicTensor<T>>{std::move(g)}
                                              : split<T>(g, 1, feature_widths_);
    std::size_t next = 0;
    std::vector<BasicTensor<T>> map_grads;
    if (fusion_) {
      auto gm = fusion_->backward(std::move(parts[next++]));
      map_grads = map_lengths_.size() == 1 ? std::vector<BasicTensor<T>>{std::move(gm)}
                                           : split<T>(gm, 1, map_lengths_);
    }
    std::size_t next_map = 0;
    for (auto m : run_) {
      auto& enc = *encoders_[index_of(m)];
      if (fusion_ && is_temporal(m)) enc.backward(std::move(map_grads[next_map++]));
      else enc.backward(std::move(parts[next++]));
    }
    run_.clear();
    return;
  }
  if (logit_grads.size() != run_.size()) {
    throw DimensionError("multi-task backward expects one gradient per head that ran");
  }
  std::vector<BasicTensor<T>> shared_grads;
  for (std::size_t i = 0; i < run_.size(); ++i) {
    shared_grads.push_back(tasks_[index_of(run_[i])]->backward(logit_grads[i]));
  }
  auto g = shared_->backward(shared_grads.size() == 1 ? std::move(shared_grads.front())
                                                      : concat<T>(shared_grads, 0));
  std::vector<std::size_t> rows(run_.size(), batch_);
  auto parts = split<T>(g, 0, rows);
  for (std::size_t i = 0; i < run_.size(); ++i) {
    encoders_[index_of(run_[i])]->backward(std::move(parts[i]));
  }
  run_.clear();
}

template <class T>
BasicTensor<T> Model<T>::forward(const ModalityBatch<T>& batch, Mode mode, Rng& rng) {
  auto out = forward_logits(batch, mode, rng);
  if (out.logits.size() == 1) return sigmoid(out.logits.front());
  BasicTensor<T> sum(out.logits.front().shape());
  for (const auto& z : out.logits) {
    const auto p = sigmoid(z);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += p[i];
  }
  const T n = static_cast<T>(out.logits.size());
  for (auto& v : sum.values()) v /= n;
  return sum;
}

template <class T>
BasicTensor<T> Model<T>::predict_missing(const ModalityBatch<T>& batch,
                                         std::span<const Modality> subset,
                                         std::span<const double> weights) {
  if (!config_.multi_task) {
    throw std::invalid_argument("predict_missing needs a multi-task model; single-task models "
                                "serve only their trained modality set");
  }
  if (subset.empty()) throw std::invalid_argument("predict_missing: empty modality subset");
  if (!weights.empty() && weights.size() != subset.size()) {
    throw std::invalid_argument("predict_missing: one weight per modality is required");
  }
  for (auto m : subset) {
    if (!config_.has(m)) {
      throw std::invalid_argument(std::string("modality ") + modality_name(m) +
                                  " is not part of this model");
    }
    if (!batch.has(m)) {
      throw std::invalid_argument(std::string("batch has no ") + modality_name(m) + " input");
    }
  }
  Rng rng(0);
  auto out = forward_logits(batch, Mode::kInfer, rng, subset);
  run_.clear();
  // Heads come back in canonical order, so the result does not depend on subset order.
  BasicTensor<T> sum(out.logits.front().shape());
  double total = 0.0;
  for (std::size_t h = 0; h < out.logits.size(); ++h) {
    double w = 1.0;
    if (!weights.empty()) {
      const auto m = parse_modality(out.head_names[h]);
      w = weights[static_cast<std::size_t>(std::find(subset.begin(), subset.end(), m) -
                                           subset.begin())];
    }
    if (w < 0.0) throw std::invalid_argument("predict_missing: weights must be non-negative");
    total += w;
    const auto p = sigmoid(out.logits[h]);
    for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += static_cast<T>(w) * p[i];
  }
  if (total <= 0.0) throw std::invalid_argument("predict_missing: weights sum to zero");
  const T denom = static_cast<T>(total);
  for (auto& v : sum.values()) v /= denom;
  return sum;
}

template <class T>
std::vector<Parameter<T>*> Model<T>::parameters() const {
  std::vector<Parameter<T>*> out;
  auto add = [&](const std::unique_ptr<Sequential<T>>& s) {
    if (!s) return;
    for (auto* p : s->parameters()) out.push_back(p);
  };
  for (const auto& e : encoders_) add(e);
  add(fusion_);
  add(head_);
  add(shared_);
  for (const auto& t : tasks_) add(t);
  return out;
}

template <class T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->value.size();
  return n;
}

template <class T>
void Model<T>::zero_grad() {
  for (auto* p : parameters()) p->zero_grad();
}

template <class T>
std::uint64_t Model<T>::signature() const {
  std::uint64_t h = 0;
  auto add = [&](const std::unique_ptr<Sequential<T>>& s) {
    if (s) s->signature(h);
  };
  for (const auto& e : encoders_) add(e);
  add(fusion_);
  add(head_);
  add(shared_);
  for (const auto& t : tasks_) add(t);
  return h;
}

template <class T>
std::vector<std::string> Model<T>::layer_names() const {
  std::vector<std::string> out;
  auto add = [&](const std::unique_ptr<Sequential<T>>& s) {
    if (s) s->names(out);
  };
  for (const auto& e : encoders_) add(e);
  add(fusion_);
  if (head_) out.push_back("fused");
  add(head_);
  add(shared_);
  for (const auto& t : tasks_) add(t);
  return out;
}

// --- checkpoints ----------------------------------------------------------

namespace {

std::string dtype_name(DType d) { return d == DType::kFloat32 ? "float32" : "float64"; }

template <class T>
void write_blob_file(const fs::path& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  blob_write(t, os);
}

template <class T>
BasicTensor<T> read_blob_file(const fs::path& path, const std::string& what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("checkpoint: cannot open blob for '" + what + "' at " + path.string());
  try {
    return blob_read<T>(is);
  } catch (const FormatError& e) {
    throw FormatError("checkpoint: parameter '" + what + "': " + e.what());
  }
}

json tensor_entry(const std::string& name, const Shape& shape, const std::string& file) {
  return json{{"name", name}, {"shape", shape}, {"file", file}};
}

}  // namespace

template <class T>
void checkpoint_save(const Model<T>& model, const fs::path& dir, const CheckpointMeta& meta,
                     const std::map<std::string, BasicTensor<T>>& extra) {
  fs::create_directories(dir / "params");
  json manifest;
  manifest["format_version"] = kCheckpointFormatVersion;
  manifest["dtype"] = dtype_name(dtype_of<T>());
  manifest["step"] = meta.step;
  manifest["seed"] = meta.seed;
  manifest["config"] = model_config_to_json(model.config());
  auto& params = manifest["parameters"] = json::array();
  for (const auto* p : model.parameters()) {
    const std::string file = "params/" + p->name + ".blob";
    write_blob_file(dir / file, p->value);
    params.push_back(tensor_entry(p->name, p->value.shape(), file));
  }
  auto& extras = manifest["extra"] = json::array();
  if (!extra.empty()) fs::create_directories(dir / "extra");
  for (const auto& [name, t] : extra) {
    const std::string file = "extra/" + name + ".blob";
    write_blob_file(dir / file, t);
    extras.push_back(tensor_entry(name, t.shape(), file));
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw FormatError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << "\n";
}

template <class T>
LoadedCheckpoint<T> checkpoint_load(const fs::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw FormatError("checkpoint: no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  try {
    const int version = manifest.at("format_version").template get<int>();
    if (version != kCheckpointFormatVersion) {
      throw FormatError("checkpoint: unsupported format_version " + std::to_string(version));
    }
    if (manifest.at("dtype").template get<std::string>() != dtype_name(dtype_of<T>())) {
      throw FormatError("checkpoint: stored dtype " + manifest.at("dtype").template get<std::string>() +
                        " does not match the requested precision");
    }
    CheckpointMeta meta{manifest.at("step").template get<std::uint64_t>(),
                        manifest.at("seed").template get<std::uint64_t>()};
    const ModelConfig config = model_config_from_json(manifest.at("config"));
    auto model = Model<T>::build(config, meta.seed);

    std::map<std::string, json> entries;
    for (const auto& e : manifest.at("parameters")) entries[e.at("name").template get<std::string>()] = e;
    auto params = model.parameters();
    if (entries.size() != params.size()) {
      throw FormatError("checkpoint: manifest lists " + std::to_string(entries.size()) +
                        " parameters, model has " + std::to_string(params.size()));
    }
    for (auto* p : params) {
      auto it = entries.find(p->name);
      if (it == entries.end()) throw FormatError("checkpoint: parameter '" + p->name + "' missing");
      const auto shape = it->second.at("shape").template get<Shape>();
      if (shape != p->value.shape()) {
        throw FormatError("checkpoint: shape mismatch for '" + p->name + "': manifest " +
                          shape_string(shape) + ", model " + shape_string(p->value.shape()));
      }
      auto value = read_blob_file<T>(dir / it->second.at("file").template get<std::string>(), p->name);
      if (value.shape() != shape) {
        throw FormatError("checkpoint: shape mismatch for '" + p->name + "': blob " +
                          shape_string(value.shape()) + ", manifest " + shape_string(shape));
      }
      p->value = std::move(value);
      p->zero_grad();
    }
    std::map<std::string, BasicTensor<T>> extra;
    if (manifest.contains("extra")) {
      for (const auto& e : manifest.at("extra")) {
        const auto name = e.at("name").template get<std::string>();
        auto value = read_blob_file<T>(dir / e.at("file").template get<std::string>(), name);
        if (value.shape() != e.at("shape").template get<Shape>()) {
          throw FormatError("checkpoint: shape mismatch for extra tensor '" + name + "'");
        }
        extra.emplace(name, std::move(value));
      }
    }
    return {std::move(model), meta, std::move(extra)};
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

template struct ModalityBatch<float>;
template struct ModalityBatch<double>;
template class Sequential<float>;
template class Sequential<double>;
template class Model<float>;
template class Model<double>;
template void checkpoint_save<float>(const Model<float>&, const fs::path&, const CheckpointMeta&,
                                     const std::map<std::string, Tensor>&);
template void checkpoint_save<double>(const Model<double>&, const fs::path&, const CheckpointMeta&,
                                      const std::map<std::string, Tensor64>&);
template LoadedCheckpoint<float> checkpoint_load<float>(const fs::path&);
template LoadedCheckpoint<double> checkpoint_load<double>(const fs::path&);

}  // namespace mstc
