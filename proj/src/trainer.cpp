#include "mstc/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

namespace mstc {

using nlohmann::json;

// --- optimizer ------------------------------------------------------------

OptimState OptimState::fresh(std::span<Parameter<float>* const> params, const AdamConfig& hp) {
  OptimState s;
  s.hp = hp;
  for (const auto* p : params) {
    s.m.emplace_back(p->value.shape());
    s.v.emplace_back(p->value.shape());
  }
  return s;
}

void adam_step(std::span<Parameter<float>* const> params, OptimState& state) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw DimensionError("adam: state holds " + std::to_string(state.m.size()) +
                         " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto* p = params[i];
    if (p->grad.shape() != p->value.shape() || state.m[i].shape() != p->value.shape()) {
      throw DimensionError("adam: shape mismatch for " + p->name);
    }
    double sq = 0.0;
    bool finite = true;
    for (float g : p->grad.values()) {
      if (!std::isfinite(g)) finite = false;
      sq += static_cast<double>(g) * static_cast<double>(g);
    }
    if (!finite || !std::isfinite(sq)) {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%g", std::sqrt(sq));
      throw NumericError("step " + std::to_string(state.t) + ": non-finite gradient in '" +
                         p->name + "' (norm " + buf + ")");
    }
  }
  const auto& hp = state.hp;
  ++state.t;
  const double t = static_cast<double>(state.t);
  const double c1 = 1.0 - std::pow(hp.beta1, t);
  const double c2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto* p = params[i];
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p->value.size(); ++j) {
      const double g = p->grad[j];
      const double mj = hp.beta1 * m[j] + (1.0 - hp.beta1) * g;
      const double vj = hp.beta2 * v[j] + (1.0 - hp.beta2) * g * g;
      m[j] = static_cast<float>(mj);
      v[j] = static_cast<float>(vj);
      const double step = hp.lr * (mj / c1) / (std::sqrt(vj / c2) + hp.eps);
      p->value[j] = static_cast<float>(p->value[j] - step);
    }
  }
}

// --- plan -----------------------------------------------------------------

double TrainPlan::effective_lr(const ModelConfig& config) const {
  if (lr) return *lr;
  return config.multi_task ? 3e-4 : 1e-4;
}

void TrainPlan::validate() const {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (eval_every == 0) throw std::invalid_argument("eval_every must be positive");
  if (lr && !(*lr > 0.0 && std::isfinite(*lr))) throw std::invalid_argument("lr must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) throw std::invalid_argument("threshold must be in (0, 1)");
}

json train_plan_to_json(const TrainPlan& plan) {
  json j{{"iterations", plan.iterations},
         {"batch_size", plan.batch_size},
         {"eval_every", plan.eval_every},
         {"seed", plan.seed},
         {"instance_weighting", plan.instance_weighting},
         {"regularization", plan.regularization},
         {"threshold", plan.threshold}};
  j["lr"] = plan.lr ? json(*plan.lr) : json(nullptr);
  return j;
}

TrainPlan train_plan_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("train plan must be an object");
  static const std::set<std::string> known{"iterations", "batch_size", "lr", "eval_every", "seed",
                                           "instance_weighting", "regularization", "threshold"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown train key '" + key + "'");
  }
  TrainPlan p;
  try {
    if (j.contains("iterations")) p.iterations = j.at("iterations").get<std::uint64_t>();
    if (j.contains("batch_size")) p.batch_size = j.at("batch_size").get<std::size_t>();
    if (j.contains("lr") && !j.at("lr").is_null()) p.lr = j.at("lr").get<double>();
    if (j.contains("eval_every")) p.eval_every = j.at("eval_every").get<std::uint64_t>();
    if (j.contains("seed")) p.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("instance_weighting")) p.instance_weighting = j.at("instance_weighting").get<bool>();
    if (j.contains("regularization")) p.regularization = j.at("regularization").get<bool>();
    if (j.contains("threshold")) p.threshold = j.at("threshold").get<double>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("train plan: ") + e.what());
  }
  p.validate();
  return p;
}

std::string log_line(const LogEntry& e) {
  json j{{"step", e.step}, {"wall_ms", e.wall_ms}, {"loss", e.loss}};
  j["val_ba"] = e.val_ba ? json(*e.val_ba) : json(nullptr);
  return j.dump();
}

// --- helpers --------------------------------------------------------------

namespace {

std::vector<Modality> needed_modalities(const ModelConfig& config, std::span<const Modality> subset) {
  if (config.multi_task && !subset.empty()) return {subset.begin(), subset.end()};
  return config.modalities;
}

constexpr std::uint64_t kDropoutStream = 0x64726f70ULL;
constexpr std::uint64_t kFoldStream = 0x666f6c64ULL;

}  // namespace

void check_compatible(const ModelConfig& config, const Dataset& data) {
  if (config.label_count != data.header.n_labels) {
    throw FormatError("model has " + std::to_string(config.label_count) + " labels, dataset has " +
                      std::to_string(data.header.n_labels));
  }
  if (config.has(Modality::kPs) && config.ps_width != data.header.ps_width) {
    throw FormatError("model expects ps width " + std::to_string(config.ps_width) +
                      ", dataset declares " + std::to_string(data.header.ps_width));
  }
  for (const auto& inst : data.instances) {
    for (auto m : config.modalities) {
      if (!inst.has(m)) {
        throw FormatError("instance " + inst.id + " has no " + modality_name(m) + " data");
      }
      if (!is_temporal(m)) continue;
      const Shape want{config.input_length(m), config.input_channels(m)};
      if (inst.sensor(m).shape() != want) {
        throw FormatError("instance " + inst.id + ": " + modality_name(m) + " is " +
                          shape_string(inst.sensor(m).shape()) + ", model expects " +
                          shape_string(want));
      }
    }
  }
}

Tensor predict(Model<float>& model, const Dataset& data, std::span<const std::size_t> rows,
               std::span<const Modality> subset, std::size_t batch_size) {
  const auto& config = model.config();
  const auto mods = needed_modalities(config, subset);
  Tensor out({rows.size(), config.label_count});
  Rng rng(0);
  for (std::size_t begin = 0; begin < rows.size(); begin += batch_size) {
    const std::size_t end = std::min(begin + batch_size, rows.size());
    const auto chunk = rows.subspan(begin, end - begin);
    const auto batch = make_batch<float>(data, chunk, mods);
    const Tensor p = config.multi_task && !subset.empty() ? model.predict_missing(batch, subset)
                                                          : model.forward(batch, Mode::kInfer, rng);
    std::copy(p.data(), p.data() + p.size(), out.data() + begin * config.label_count);
  }
  return out;
}

FoldReport evaluate(const Tensor& probabilities, const LabelMatrix& labels, double threshold) {
  return balanced_accuracy(confusion(probabilities, labels, threshold));
}

// --- training loop --------------------------------------------------------

TrainResult train(Model<float>& model, OptimState& state, const Dataset& data,
                  std::span<const std::size_t> train_rows, std::span<const std::size_t> val_rows,
                  const TrainPlan& plan, const TrainHooks& hooks) {
  plan.validate();
  const auto& config = model.config();
  if (train_rows.empty()) throw std::invalid_argument("train: no training instances");
  if (hooks.checkpoint_dir && hooks.checkpoint_every == 0) {
    throw std::invalid_argument("train: checkpoint_every must be positive");
  }
  auto params = model.parameters();
  if (state.m.empty()) state = OptimState::fresh(params, state.hp);
  state.hp.lr = plan.effective_lr(config);

  const std::vector<std::size_t> rows(train_rows.begin(), train_rows.end());
  const LabelMatrix labels = data.labels(rows);
  const Tensor64 weights =
      plan.instance_weighting ? compute_instance_weights(labels) : uniform_instance_weights(labels);
  RegPolicy reg = config.regularization;
  if (!plan.regularization) reg.l1_dense = reg.l2_depthwise = reg.l2_standard_conv = false;

  std::vector<std::size_t> positions(rows.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Batcher batcher(positions, plan.batch_size, plan.seed);

  const LabelMatrix val_labels = data.labels(val_rows);
  const auto started = std::chrono::steady_clock::now();
  TrainResult result;

  // Loss (and, when `update`, gradients) for the batch of global step s.
  auto step_loss = [&](std::uint64_t s, bool update) {
    const auto pos = batcher.batch_at(s);
    std::vector<std::size_t> batch_rows(pos.size());
    for (std::size_t i = 0; i < pos.size(); ++i) batch_rows[i] = rows[pos[i]];
    if (update && hooks.on_batch) hooks.on_batch(s, batch_rows);
    const auto batch = make_batch<float>(data, batch_rows, config.modalities);
    const auto batch_labels = labels.select_rows(pos);
    const auto batch_weights = gather_rows(weights, pos);
    Rng dropout_rng(hash_combine(hash_combine(plan.seed, kDropoutStream), s));
    model.zero_grad();
    auto out = model.forward_logits(batch, Mode::kTrain, dropout_rng);
    double loss = 0.0;
    std::vector<Tensor> grads;
    for (const auto& z : out.logits) {
      auto r = weighted_masked_bce_logits(z, batch_labels, batch_weights);
      loss += r.loss;
      grads.push_back(std::move(r.grad));
    }
    if (!update) return loss + regularization_penalty<float>(params, reg, false);
    if (!std::isfinite(loss)) {
      throw NumericError("step " + std::to_string(s) + ": training loss is not finite");
    }
    model.backward(grads);
    loss += regularization_penalty<float>(params, reg);
    return loss;
  };

  auto log_at = [&](std::uint64_t s, double loss) {
    LogEntry e;
    e.step = s;
    e.loss = loss;
    if (!val_rows.empty()) {
      e.val_ba = evaluate(predict(model, data, val_rows, {}, plan.batch_size), val_labels,
                          plan.threshold)
                     .macro_ba;
    }
    e.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
                    .count();
    if (hooks.on_log) hooks.on_log(e);
    result.log.push_back(e);
  };

  auto checkpoint = [&]() {
    if (hooks.checkpoint_dir) save_training_checkpoint(model, state, plan.seed, *hooks.checkpoint_dir);
  };

  for (std::uint64_t s = state.t; s < plan.iterations; ++s) {
    const double loss = step_loss(s, true);
    if (!std::isfinite(loss)) {
      throw NumericError("step " + std::to_string(s) + ": training loss is not finite");
    }
    if (s % plan.eval_every == 0) log_at(s, loss);
    adam_step(params, state);
    if (hooks.checkpoint_dir && state.t % hooks.checkpoint_every == 0) checkpoint();
  }
  const std::uint64_t last = std::max(state.t, plan.iterations);
  if (last % plan.eval_every == 0 && (result.log.empty() || result.log.back().step != last)) {
    const double loss = step_loss(last, false);
    model.zero_grad();
    log_at(last, loss);
  }
  if (hooks.checkpoint_dir && (state.t == 0 || state.t % hooks.checkpoint_every != 0)) checkpoint();
  result.final_step = state.t;
  return result;
}

// --- checkpoints ----------------------------------------------------------

namespace {

std::string moment_key(const char* which, const std::string& param) {
  return std::string("adam_") + which + "." + param;
}

}  // namespace

void save_training_checkpoint(const Model<float>& model, const OptimState& state,
                              std::uint64_t seed, const std::filesystem::path& dir) {
  std::map<std::string, Tensor> extra;
  const auto params = model.parameters();
  if (state.m.size() == params.size()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      extra.emplace(moment_key("m", params[i]->name), state.m[i]);
      extra.emplace(moment_key("v", params[i]->name), state.v[i]);
    }
  }
  checkpoint_save(model, dir, CheckpointMeta{state.t, seed}, extra);
}

TrainingCheckpoint load_training_checkpoint(const std::filesystem::path& dir, const AdamConfig& hp) {
  auto loaded = checkpoint_load<float>(dir);
  auto params = loaded.model.parameters();
  OptimState state = OptimState::fresh(params, hp);
  state.t = loaded.meta.step;
  if (!loaded.extra.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (const char* which : {"m", "v"}) {
        auto it = loaded.extra.find(moment_key(which, params[i]->name));
        if (it == loaded.extra.end()) {
          throw FormatError("checkpoint: optimizer moment '" + moment_key(which, params[i]->name) +
                            "' missing");
        }
        if (it->second.shape() != params[i]->value.shape()) {
          throw FormatError("checkpoint: shape mismatch for optimizer moment '" + it->first + "'");
        }
        (which[0] == 'm' ? state.m[i] : state.v[i]) = std::move(it->second);
      }
    }
  } else if (state.t != 0) {
    throw FormatError("checkpoint at step " + std::to_string(state.t) +
                      " carries no optimizer state and cannot be resumed");
  }
  return {std::move(loaded.model), std::move(state), loaded.meta.seed};
}

// --- cross-validation -----------------------------------------------------

void audit_rows(const Dataset& data, std::span<const std::size_t> rows,
                const std::set<std::string>& test_users) {
  for (auto r : rows) {
    const auto& inst = data.instances.at(r);
    if (test_users.count(inst.user)) {
      throw std::logic_error("leakage: instance " + inst.id + " of test user " + inst.user +
                             " reached a training batch");
    }
  }
}

CvResult run_cv(const Dataset& data, const ModelConfig& config, const TrainPlan& plan,
                const CvOptions& options) {
  config.validate();
  plan.validate();
  check_compatible(config, data);
  CvResult result;
  const auto users = data.users();
  Rng fold_rng(hash_combine(plan.seed, kFoldStream));
  result.plan = split_folds(users, options.k, fold_rng);

  for (std::size_t f = 0; f < options.k; ++f) {
    const std::set<std::string> test_users(result.plan.test_users[f].begin(),
                                           result.plan.test_users[f].end());
    const auto train_list =
        options.nested_validation ? result.plan.inner_train[f] : result.plan.train_users(f);
    const auto train_rows =
        data.indices_for_users(std::set<std::string>(train_list.begin(), train_list.end()));
    std::vector<std::size_t> val_rows;
    if (options.nested_validation) {
      val_rows = data.indices_for_users(
          std::set<std::string>(result.plan.inner_val[f].begin(), result.plan.inner_val[f].end()));
    }
    const auto test_rows = data.indices_for_users(test_users);
    audit_rows(data, train_rows, test_users);
    audit_rows(data, val_rows, test_users);

    auto model = Model<float>::build(config, hash_combine(plan.seed, f));
    OptimState state;
    TrainPlan fold_plan = plan;
    fold_plan.seed = hash_combine(plan.seed, f);
    TrainHooks hooks;
    hooks.on_batch = [&](std::uint64_t, std::span<const std::size_t> rows) {
      ++result.audit.batches;
      result.audit.rows += rows.size();
      try {
        audit_rows(data, rows, test_users);
      } catch (const std::logic_error&) {
        ++result.audit.violations;
        throw;
      }
    };
    if (options.on_log) hooks.on_log = [&](const LogEntry& e) { options.on_log(f, e); };
    train(model, state, data, train_rows, val_rows, fold_plan, hooks);
    ++result.audit.folds;

    const auto probs = predict(model, data, test_rows, {}, plan.batch_size);
    result.folds.push_back(evaluate(probs, data.labels(test_rows), plan.threshold));
  }
  result.summary = aggregate(result.folds);
  return result;
}

// --- ablation -------------------------------------------------------------

AblationGrid ablation_grid_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("grid must be an object");
  static const std::set<std::string> known{"fusion", "conv_kind", "modalities", "weighting",
                                           "regularization"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("unknown grid key '" + key + "'");
  }
  AblationGrid g;
  try {
    for (const auto& v : j.value("fusion", json::array())) g.fusions.push_back(parse_fusion(v.get<std::string>()));
    for (const auto& v : j.value("conv_kind", json::array())) {
      g.conv_kinds.push_back(parse_conv_kind(v.get<std::string>()));
    }
    for (const auto& v : j.value("modalities", json::array())) {
      g.modality_sets.push_back(parse_modality_list(v.get<std::string>()));
    }
    for (const auto& v : j.value("weighting", json::array())) g.weighting.push_back(v.get<bool>());
    for (const auto& v : j.value("regularization", json::array())) g.regularization.push_back(v.get<bool>());
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("grid: ") + e.what());
  }
  return g;
}

std::vector<GridCell> expand_grid(const AblationGrid& grid, const ModelConfig& base_model,
                                  const TrainPlan& base_plan) {
  auto or_base = [](const auto& axis, auto base) {
    using V = std::decay_t<decltype(base)>;
    return axis.empty() ? std::vector<V>{base} : std::vector<V>(axis.begin(), axis.end());
  };
  const auto fusions = or_base(grid.fusions, base_model.fusion);
  const auto kinds = or_base(grid.conv_kinds, base_model.conv_kind);
  const auto sets = or_base(grid.modality_sets, base_model.modalities);
  const auto weighting = or_base(grid.weighting, base_plan.instance_weighting);
  const auto regularization = or_base(grid.regularization, base_plan.regularization);

  std::vector<GridCell> cells;
  for (auto fusion : fusions) {
    for (auto kind : kinds) {
      for (const auto& mods : sets) {
        for (bool w : weighting) {
          for (bool r : regularization) {
            GridCell cell;
            cell.model = base_model;
            cell.model.fusion = fusion;
            cell.model.conv_kind = kind;
            cell.model.modalities = mods;
            cell.plan = base_plan;
            cell.plan.instance_weighting = w;
            cell.plan.regularization = r;
            cell.descriptor = std::string("fusion=") + fusion_name(fusion) +
                              " conv=" + conv_kind_name(kind) +
                              " modalities=" + modality_list_string(mods) +
                              " weighting=" + (w ? "on" : "off") + " reg=" + (r ? "on" : "off");
            try {
              cell.model.validate();
            } catch (const std::invalid_argument& e) {
              cell.invalid = e.what();
            }
            cells.push_back(std::move(cell));
          }
        }
      }
    }
  }
  return cells;
}

std::vector<AblationRow> run_ablation(const Dataset& data, const AblationGrid& grid,
                                      const ModelConfig& base_model, const TrainPlan& base_plan,
                                      const CvOptions& options,
                                      const std::function<void(const AblationRow&)>& on_row) {
  std::vector<AblationRow> rows;
  for (auto& cell : expand_grid(grid, base_model, base_plan)) {
    AblationRow row{std::move(cell), std::nullopt};
    if (!row.cell.invalid) row.result = run_cv(data, row.cell.model, row.cell.plan, options);
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_table(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "cell\tba\tba_sd\tsens\tsens_sd\tspec\tspec_sd\texcluded\n";
  for (const auto& row : rows) {
    os << row.cell.descriptor;
    if (!row.result) {
      os << "\tNA\tNA\tNA\tNA\tNA\tNA\tNA\n";
      continue;
    }
    const auto& s = row.result->summary;
    char buf[160];
    std::snprintf(buf, sizeof buf, "\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%zu\n", s.mean_ba, s.sd_ba,
                  s.mean_sensitivity, s.sd_sensitivity, s.mean_specificity, s.sd_specificity,
                  s.excluded);
    os << buf;
  }
}

}  // namespace mstc
