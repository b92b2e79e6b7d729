#include "mstc/cli.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "mstc/check.hpp"
#include "mstc/metrics.hpp"

namespace mstc {

namespace fs = std::filesystem;
using nlohmann::json;

// --- run config -----------------------------------------------------------

RunConfig parse_run_config(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  static const std::set<std::string> known{"data",  "out",   "seed",
                                           "model", "train", "folds",
                                           "nested_validation", "validation_users",
                                           "checkpoint_every"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  auto resolve = [&](const std::string& p) {
    fs::path path(p);
    return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
  };
  RunConfig c;
  try {
    if (j.contains("data")) c.data = resolve(j.at("data").get<std::string>());
    if (j.contains("out")) c.out = resolve(j.at("out").get<std::string>());
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    if (j.contains("folds")) c.folds = j.at("folds").get<std::size_t>();
    if (j.contains("nested_validation")) c.nested_validation = j.at("nested_validation").get<bool>();
    if (j.contains("validation_users")) {
      c.validation_users = j.at("validation_users").get<std::vector<std::string>>();
    }
    if (j.contains("checkpoint_every")) c.checkpoint_every = j.at("checkpoint_every").get<std::uint64_t>();
    if (j.contains("model")) {
      const auto& m = j.at("model");
      c.model = model_config_from_json(m);
      c.label_count_given = m.contains("label_count");
      c.ps_width_given = m.contains("ps_width");
    }
    if (j.contains("train")) {
      if (j.at("train").contains("seed")) {
        throw std::invalid_argument("config: 'seed' belongs at the top level, not in 'train'");
      }
      c.plan = train_plan_from_json(j.at("train"));
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.plan.seed = c.seed;
  if (c.data.empty()) throw std::invalid_argument("config: 'data' is required");
  if (c.out.empty()) throw std::invalid_argument("config: 'out' is required");
  if (c.folds < 2) throw std::invalid_argument("config: 'folds' must be at least 2");
  c.model.validate();
  c.plan.validate();
  return c;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream is(file);
  if (!is) throw std::invalid_argument("cannot read config " + file.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw std::invalid_argument("config " + file.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j, file.parent_path());
}

void fit_to_dataset(RunConfig& config, const DatasetHeader& header) {
  if (!config.label_count_given) config.model.label_count = header.n_labels;
  if (!config.ps_width_given) config.model.ps_width = header.ps_width;
  config.model.validate();
}

namespace {

// --- helpers --------------------------------------------------------------

PreprocessSpec preprocess_for(const ModelConfig& m) {
  PreprocessSpec p;
  p.imu_length = m.imu_length;
  p.imu_channels = m.imu_channels;
  p.mfcc_length = m.aud_length;
  p.mfcc_channels = m.aud_channels;
  return p;
}

Dataset load_for(const ModelConfig& model, const fs::path& dir, std::ostream& err) {
  const auto spec = preprocess_for(model);
  LoadReport report;
  auto ds = load_dataset(dir, &spec, &report);
  for (const auto& [reason, n] : report.discarded) {
    err << "discarded " << n << " instance(s): " << reason << "\n";
  }
  if (ds.instances.empty()) throw FormatError("dataset " + dir.string() + " has no usable instances");
  return ds;
}

std::vector<std::size_t> all_rows(const Dataset& ds) {
  std::vector<std::size_t> rows(ds.instances.size());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  return rows;
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream os(file, std::ios::trunc);
  if (!os) throw FormatError("cannot write " + file.string());
  os << text;
}

std::string macro_line(const char* what, double mean, double sd) {
  return std::string(what) + " " + format_mean_sd(mean, sd);
}

json resolved_config(const RunConfig& c) {
  json train = train_plan_to_json(c.plan);
  train.erase("seed");
  return json{{"data", c.data.string()},
              {"out", c.out.string()},
              {"seed", c.seed},
              {"folds", c.folds},
              {"nested_validation", c.nested_validation},
              {"validation_users", c.validation_users},
              {"checkpoint_every", c.checkpoint_every},
              {"model", model_config_to_json(c.model)},
              {"train", train}};
}

// --- subcommands ----------------------------------------------------------

struct SynthArgs {
  std::string out;
  SynthSpec spec;
  std::optional<double> positive_rate;
  std::string layout = "shared";
  bool no_jitter = false;
};

int cmd_synth(SynthArgs& a, std::ostream& out) {
  if (a.positive_rate) a.spec.positive_rates.assign(a.spec.n_labels, *a.positive_rate);
  if (a.layout == "shared") a.spec.layout = SignalLayout::kShared;
  else if (a.layout == "complementary") a.spec.layout = SignalLayout::kComplementary;
  else throw std::invalid_argument("unknown layout '" + a.layout + "' (shared, complementary)");
  a.spec.length_jitter = !a.no_jitter;
  const auto ds = synth_generate(a.spec);
  save_dataset(ds, a.out);
  const auto labels = ds.labels();
  out << "label\tpositive_rate\tpresent\n";
  for (std::size_t c = 0; c < labels.cols(); ++c) {
    std::size_t pos = 0, present = 0;
    for (std::size_t i = 0; i < labels.rows(); ++i) {
      if (!labels.present(i, c)) continue;
      ++present;
      pos += labels.value(i, c);
    }
    char buf[96];
    std::snprintf(buf, sizeof buf, "%s\t%.4f\t%zu\n", ds.header.label_names[c].c_str(),
                  present ? static_cast<double>(pos) / static_cast<double>(present) : 0.0, present);
    out << buf;
  }
  return kExitOk;
}

int cmd_train(const std::string& config_file, const std::string& resume, std::ostream& out,
              std::ostream& err) {
  auto rc = load_run_config(config_file);
  auto ds = load_for(rc.model, rc.data, err);
  fit_to_dataset(rc, ds.header);
  check_compatible(rc.model, ds);

  const std::set<std::string> val_users(rc.validation_users.begin(), rc.validation_users.end());
  for (const auto& u : val_users) {
    if (ds.indices_for_users({u}).empty()) throw FormatError("validation user '" + u + "' has no instances");
  }
  std::vector<std::size_t> train_rows, val_rows;
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    (val_users.count(ds.instances[i].user) ? val_rows : train_rows).push_back(i);
  }

  AdamConfig hp;
  hp.lr = rc.plan.effective_lr(rc.model);
  std::optional<TrainingCheckpoint> resumed;
  if (!resume.empty()) {
    resumed.emplace(load_training_checkpoint(resume, hp));
    if (!(resumed->model.config() == rc.model)) {
      throw std::invalid_argument("checkpoint " + resume + " was trained with a different model config");
    }
    if (resumed->seed != rc.seed) {
      throw std::invalid_argument("checkpoint seed " + std::to_string(resumed->seed) +
                                  " differs from config seed " + std::to_string(rc.seed));
    }
  }

  fs::create_directories(rc.out);
  write_text(rc.out / "run_config.json", resolved_config(rc).dump(2) + "\n");
  std::ofstream log(rc.out / "train_log.jsonl", std::ios::trunc);
  if (!log) throw FormatError("cannot write " + (rc.out / "train_log.jsonl").string());

  auto model = resumed ? std::move(resumed->model) : Model<float>::build(rc.model, rc.seed);
  OptimState state = resumed ? std::move(resumed->state) : OptimState{};
  state.hp = hp;
  TrainHooks hooks;
  hooks.checkpoint_dir = rc.out / "checkpoint";
  hooks.checkpoint_every = rc.checkpoint_every ? rc.checkpoint_every : rc.plan.eval_every;
  hooks.on_log = [&](const LogEntry& e) {
    const auto line = log_line(e);
    log << line << "\n";
    log.flush();
    out << line << "\n";
  };
  const auto result = train(model, state, ds, train_rows, val_rows, rc.plan, hooks);
  err << "trained to step " << result.final_step << "; checkpoint in "
      << (rc.out / "checkpoint").string() << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, double threshold,
             const std::string& format, std::ostream& out, std::ostream& err) {
  if (format != "tsv" && format != "json") throw std::invalid_argument("format must be tsv or json");
  auto loaded = checkpoint_load<float>(checkpoint);
  auto ds = load_for(loaded.model.config(), data, err);
  check_compatible(loaded.model.config(), ds);
  const auto rows = all_rows(ds);
  const auto probs = predict(loaded.model, ds, rows);
  const auto report = evaluate(probs, ds.labels(), threshold);
  if (format == "json") {
    out << summary_json(aggregate({report}), {report}, ds.header.label_names);
  } else {
    write_label_table(out, report.labels, ds.header.label_names);
    char buf[160];
    std::snprintf(buf, sizeof buf, "# macro ba=%.6f sens=%.6f spec=%.6f excluded=%zu\n",
                  report.macro_ba, report.macro_sensitivity, report.macro_specificity,
                  report.excluded);
    out << buf;
  }
  return kExitOk;
}

void print_summary(const Summary& s, std::ostream& out) {
  out << macro_line("ba", s.mean_ba, s.sd_ba) << "\n"
      << macro_line("sensitivity", s.mean_sensitivity, s.sd_sensitivity) << "\n"
      << macro_line("specificity", s.mean_specificity, s.sd_specificity) << "\n";
}

CvOptions cv_options(const RunConfig& rc, std::ofstream& log, std::ostream& err) {
  CvOptions o;
  o.k = rc.folds;
  o.nested_validation = rc.nested_validation;
  o.on_log = [&log, &err](std::size_t fold, const LogEntry& e) {
    json j = json::parse(log_line(e));
    j["fold"] = fold;
    log << j.dump() << "\n";
    err << "fold " << fold << " step " << e.step << " loss " << e.loss << "\n";
  };
  return o;
}

int cmd_cv(const std::string& config_file, std::ostream& out, std::ostream& err) {
  auto rc = load_run_config(config_file);
  auto ds = load_for(rc.model, rc.data, err);
  fit_to_dataset(rc, ds.header);
  check_compatible(rc.model, ds);
  fs::create_directories(rc.out);
  write_text(rc.out / "run_config.json", resolved_config(rc).dump(2) + "\n");
  std::ofstream log(rc.out / "cv_log.jsonl", std::ios::trunc);

  const auto result = run_cv(ds, rc.model, rc.plan, cv_options(rc, log, err));
  write_text(rc.out / "cv_report.json",
             summary_json(result.summary, result.folds, ds.header.label_names));
  std::ostringstream table;
  write_label_table(table, result.summary.labels, ds.header.label_names);
  write_text(rc.out / "cv_labels.tsv", table.str());
  json folds = json::array();
  for (const auto& users : result.plan.test_users) folds.push_back(users);
  write_text(rc.out / "folds.json", json{{"test_users", folds}}.dump(2) + "\n");

  print_summary(result.summary, out);
  out << "leakage audit: " << result.audit.folds << " folds, " << result.audit.batches
      << " batches, " << result.audit.rows << " rows, " << result.audit.violations
      << " violations\n";
  return kExitOk;
}

int cmd_ablate(const std::string& config_file, const std::string& grid_file, std::ostream& out,
               std::ostream& err) {
  auto rc = load_run_config(config_file);
  AblationGrid grid;
  {
    std::ifstream is(grid_file);
    if (!is) throw std::invalid_argument("cannot read grid " + grid_file);
    try {
      grid = ablation_grid_from_json(json::parse(is));
    } catch (const json::exception& e) {
      throw std::invalid_argument("grid " + grid_file + " is not valid JSON: " + e.what());
    }
  }
  auto ds = load_for(rc.model, rc.data, err);
  fit_to_dataset(rc, ds.header);
  fs::create_directories(rc.out);
  write_text(rc.out / "run_config.json", resolved_config(rc).dump(2) + "\n");
  std::ofstream log(rc.out / "ablation_log.jsonl", std::ios::trunc);
  const auto rows = run_ablation(ds, grid, rc.model, rc.plan, cv_options(rc, log, err),
                                 [&](const AblationRow& row) {
                                   err << row.cell.descriptor << ": "
                                       << (row.result ? format_mean_sd(row.result->summary.mean_ba,
                                                                       row.result->summary.sd_ba)
                                                      : "skipped (" + *row.cell.invalid + ")")
                                       << "\n";
                                 });
  std::ostringstream table;
  write_ablation_table(table, rows);
  write_text(rc.out / "ablation.tsv", table.str());
  out << table.str();
  return kExitOk;
}

int cmd_predict(const std::string& checkpoint, const std::string& input, const std::string& list,
                std::ostream& out, std::ostream& err) {
  const auto subset = parse_modality_list(list);
  if (subset.empty()) throw std::invalid_argument("--modalities must name at least one modality");
  auto loaded = checkpoint_load<float>(checkpoint);
  const auto& config = loaded.model.config();
  for (auto m : subset) {
    if (!config.has(m)) {
      throw std::invalid_argument(std::string("modality ") + modality_name(m) +
                                  " is not part of this model (" +
                                  modality_list_string(config.modalities) + ")");
    }
  }
  if (!config.multi_task && subset != config.modalities) {
    throw std::invalid_argument(
        "this checkpoint is a single-task model: it serves only its trained modality set (" +
        modality_list_string(config.modalities) + "), not " + modality_list_string(subset) +
        "; train a multi-task model to serve modality subsets");
  }
  auto ds = load_for(config, input, err);
  for (const auto& inst : ds.instances) {
    for (auto m : subset) {
      if (!inst.has(m)) throw FormatError("instance " + inst.id + " has no " + modality_name(m) + " data");
      if (is_temporal(m) && inst.sensor(m).shape() != Shape{config.input_length(m), config.input_channels(m)}) {
        throw FormatError("instance " + inst.id + ": " + modality_name(m) + " has shape " +
                          shape_string(inst.sensor(m).shape()));
      }
    }
    if (config.has(Modality::kPs) && inst.has(Modality::kPs) &&
        std::find(subset.begin(), subset.end(), Modality::kPs) != subset.end() &&
        inst.ps.size() != config.ps_width) {
      throw FormatError("instance " + inst.id + ": ps width differs from the model");
    }
  }
  const auto rows = all_rows(ds);
  const auto probs = config.multi_task ? predict(loaded.model, ds, rows, subset)
                                       : predict(loaded.model, ds, rows);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    json p = json::array();
    for (std::size_t c = 0; c < probs.dim(1); ++c) p.push_back(probs.at(i, c));
    out << json{{"id", ds.instances[i].id}, {"modalities", modality_list_string(subset)},
                {"probabilities", p}}
               .dump()
        << "\n";
  }
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t samples, std::ostream& out) {
  GradcheckOptions opts;
  opts.samples = samples;
  bool ok = true;
  auto row = [&](const std::string& name, const GradcheckReport& r) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-28s checked=%-4zu excluded=%-4zu max_rel_err=%.3e %s\n",
                  name.c_str(), r.checked, r.excluded, r.max_rel_err, r.passed ? "ok" : "FAIL");
    out << buf;
    ok = ok && r.passed;
  };
  for (const auto& r : layer_gradcheck_suite(seed, opts)) row("layer/" + r.name, r.report);
  ModelConfig full;
  row("model/default_gmp", model_gradcheck(full, seed, 2, opts));
  ModelConfig mt;
  mt.multi_task = true;
  row("model/multitask", model_gradcheck(mt, seed, 2, opts));
  out << (ok ? "all suites passed\n" : "gradient check FAILED\n");
  return ok ? kExitOk : kExitNumeric;
}

int cmd_dump(const std::string& checkpoint, const std::string& data, const std::string& layer,
             const std::string& out_dir, std::ostream& out, std::ostream& err) {
  auto loaded = checkpoint_load<float>(checkpoint);
  auto& model = loaded.model;
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    std::string list;
    for (const auto& n : names) list += "\n  " + n;
    throw std::invalid_argument("unknown layer '" + layer + "'; valid names:" + list);
  }
  auto ds = load_for(model.config(), data, err);
  check_compatible(model.config(), ds);
  fs::create_directories(out_dir);
  Shape shape;
  Rng rng(0);
  for (std::size_t i = 0; i < ds.instances.size(); ++i) {
    const std::size_t row[1] = {i};
    const auto batch = make_batch<float>(ds, row, model.config().modalities);
    std::optional<Tensor> captured;
    ActivationTap<float> tap = [&](const std::string& name, const Tensor& t) {
      if (name == layer) captured = t;
    };
    model.forward_logits(batch, Mode::kInfer, rng, {}, &tap);
    if (!captured) throw std::logic_error("layer " + layer + " produced no activation");
    Tensor t = std::move(*captured);
    if (t.rank() > 1 && t.dim(0) == 1) {
      Shape s(t.shape().begin() + 1, t.shape().end());
      t = t.reshaped(s);
    }
    shape = t.shape();
    std::ofstream os(fs::path(out_dir) / (ds.instances[i].id + ".blob"), std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot write into " + out_dir);
    blob_write(t, os);
  }
  out << "wrote " << ds.instances.size() << " activations of shape " << shape_string(shape)
      << " for layer " << layer << " to " << out_dir << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-stream temporal CNN for multi-label context recognition", "mstc"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic dataset");
  s->add_option("--out", synth.out, "Output dataset directory")->required();
  s->add_option("--users", synth.spec.n_users, "Number of users");
  s->add_option("--instances", synth.spec.n_instances, "Number of instances");
  s->add_option("--labels", synth.spec.n_labels, "Number of labels");
  s->add_option("--missing-rate", synth.spec.missing_rate, "Probability a label entry is missing");
  s->add_option("--seed", synth.spec.seed, "Generator seed");
  s->add_option("--positive-rate", synth.positive_rate, "Positive rate used for every label");
  s->add_option("--imu-length", synth.spec.imu_length, "Nominal IMU window length");
  s->add_option("--mfcc-length", synth.spec.mfcc_length, "Nominal MFCC clip length");
  s->add_option("--noise", synth.spec.noise, "Gaussian noise sd");
  s->add_option("--layout", synth.layout, "shared or complementary");
  s->add_flag("--no-jitter", synth.no_jitter, "Emit full-length windows");

  std::string config, resume, checkpoint, data, grid, modalities, layer, out_dir;
  std::string format = "tsv";
  double threshold = 0.5;
  std::uint64_t seed = 1;
  std::size_t samples = 200;

  auto* t = app.add_subcommand("train", "Train a model");
  t->add_option("--config", config, "Run config (JSON)")->required();
  t->add_option("--resume", resume, "Checkpoint directory to resume from");

  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint");
  e->add_option("--checkpoint", checkpoint)->required();
  e->add_option("--data", data)->required();
  e->add_option("--threshold", threshold, "Decision threshold in (0, 1)");
  e->add_option("--format", format, "tsv or json");

  auto* cv = app.add_subcommand("cv", "User-grouped cross-validation");
  cv->add_option("--config", config)->required();

  auto* ab = app.add_subcommand("ablate", "Cross-validate every cell of a grid");
  ab->add_option("--config", config)->required();
  ab->add_option("--grid", grid)->required();

  auto* p = app.add_subcommand("predict", "Per-instance probabilities");
  p->add_option("--checkpoint", checkpoint)->required();
  p->add_option("--input", data)->required();
  p->add_option("--modalities", modalities, "Comma-separated subset, e.g. acc,gyro")->required();

  auto* g = app.add_subcommand("gradcheck", "Finite-difference gradient suites");
  g->add_option("--seed", seed);
  g->add_option("--samples", samples, "Coordinates per suite");

  auto* d = app.add_subcommand("dump", "Write one layer's activations per instance");
  d->add_option("--checkpoint", checkpoint)->required();
  d->add_option("--data", data)->required();
  d->add_option("--layer", layer)->required();
  d->add_option("--out", out_dir, "Output directory")->required();

  std::vector<std::string> argv_store{"mstc"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<const char*> argv;
  for (const auto& a : argv_store) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*s) return cmd_synth(synth, out);
    if (*t) return cmd_train(config, resume, out, err);
    if (*e) return cmd_eval(checkpoint, data, threshold, format, out, err);
    if (*cv) return cmd_cv(config, out, err);
    if (*ab) return cmd_ablate(config, grid, out, err);
    if (*p) return cmd_predict(checkpoint, data, modalities, out, err);
    if (*g) return cmd_gradcheck(seed, samples, out);
    if (*d) return cmd_dump(checkpoint, data, layer, out_dir, out, err);
  } catch (const NumericError& ex) {
    err << "numerical failure: " << ex.what() << "\n";
    return kExitNumeric;
  } catch (const FormatError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const DimensionError& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const fs::filesystem_error& ex) {
    err << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace mstc
