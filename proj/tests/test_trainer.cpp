#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <limits>
#include <sstream>

#include "mstc/trainer.hpp"

using namespace mstc;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(std::size_t labels) {
  ModelConfig c;
  c.label_count = labels;
  c.imu_length = 64;
  c.aud_length = 40;
  c.ps_width = labels + 8;
  c.imu_kernels = {8, 4};
  c.aud_kernels = {4, 3};
  c.filters = {8, 16};
  c.ps_units = 16;
  c.shared_units = {32, 16};
  return c;
}

Dataset tiny_data(std::size_t users, std::size_t instances, std::size_t labels, std::uint64_t seed = 1) {
  SynthSpec s;
  s.n_users = users;
  s.n_instances = instances;
  s.n_labels = labels;
  s.imu_length = 64;
  s.mfcc_length = 40;
  s.length_jitter = false;
  s.positive_rates.assign(labels, 0.4);
  s.seed = seed;
  return synth_generate(s);
}

std::vector<std::size_t> all_rows(const Dataset& d) {
  std::vector<std::size_t> r(d.instances.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = i;
  return r;
}

std::vector<Tensor> snapshot(const Model<float>& m) {
  std::vector<Tensor> out;
  for (auto* p : m.parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  Parameter<float> p{"w", ParamRole::kDenseWeight, Tensor({3}, {1, -2, 3}), Tensor({3})};
  std::vector<Parameter<float>*> ps{&p};
  auto state = OptimState::fresh(ps, AdamConfig{});
  adam_step(ps, state);
  CHECK(p.value == Tensor({3}, {1, -2, 3}));
  CHECK(state.t == 1);
}

TEST_CASE("adam: first step moves by about lr") {
  for (float g : {0.5f, -3.0f, 1e-3f}) {
    Parameter<float> p{"w", ParamRole::kDenseWeight, Tensor({1}, {1.0f}), Tensor({1}, {g})};
    std::vector<Parameter<float>*> ps{&p};
    AdamConfig hp;
    hp.lr = 0.01;
    auto state = OptimState::fresh(ps, hp);
    adam_step(ps, state);
    const double expected = hp.lr * std::abs(g) / (std::abs(g) + hp.eps);
    CHECK(std::abs(1.0 - p.value[0]) == doctest::Approx(expected).epsilon(1e-4));
    CHECK((p.value[0] < 1.0f) == (g > 0));
  }
}

TEST_CASE("adam: quadratic bowl") {
  Parameter<float> p{"theta", ParamRole::kDenseWeight, Tensor({1}, {1.0f}), Tensor({1})};
  std::vector<Parameter<float>*> ps{&p};
  AdamConfig hp;
  hp.lr = 0.1;
  auto state = OptimState::fresh(ps, hp);
  for (int i = 0; i < 500; ++i) {
    p.grad[0] = 2.0f * p.value[0];
    adam_step(ps, state);
  }
  CHECK(std::abs(p.value[0]) < 1e-3f);
}

TEST_CASE("adam: non-finite gradient is reported and nothing changes") {
  Parameter<float> a{"a", ParamRole::kDenseWeight, Tensor({2}, {1, 2}), Tensor({2}, {0.1f, 0.2f})};
  Parameter<float> b{"b.weight", ParamRole::kDenseWeight, Tensor({2}, {3, 4}),
                     Tensor({2}, {std::numeric_limits<float>::quiet_NaN(), 0.0f})};
  std::vector<Parameter<float>*> ps{&a, &b};
  auto state = OptimState::fresh(ps, AdamConfig{});
  try {
    adam_step(ps, state);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("b.weight") != std::string::npos);
  }
  CHECK(a.value == Tensor({2}, {1, 2}));
  CHECK(state.t == 0);
  CHECK(state.m[0] == Tensor({2}));
}

TEST_CASE("train plan json") {
  TrainPlan p;
  p.iterations = 7;
  p.lr = 0.5;
  p.instance_weighting = false;
  const auto back = train_plan_from_json(train_plan_to_json(p));
  CHECK(back.iterations == 7);
  CHECK(back.lr == 0.5);
  CHECK_FALSE(back.instance_weighting);
  CHECK_THROWS_AS(train_plan_from_json({{"iterationz", 3}}), std::invalid_argument);
  ModelConfig mt;
  mt.multi_task = true;
  CHECK(TrainPlan{}.effective_lr(ModelConfig{}) == 1e-4);
  CHECK(TrainPlan{}.effective_lr(mt) == 3e-4);
}

TEST_CASE("zero iterations leave the model unchanged") {
  const auto data = tiny_data(3, 20, 4);
  auto model = Model<float>::build(tiny_config(4), 1);
  const auto before = snapshot(model);
  OptimState state;
  TrainPlan plan;
  plan.iterations = 0;
  const auto rows = all_rows(data);
  const auto r = train(model, state, data, rows, {}, plan);
  CHECK(snapshot(model) == before);
  CHECK(r.final_step == 0);
}

TEST_CASE("log cadence and determinism") {
  const auto data = tiny_data(3, 30, 4);
  const auto rows = all_rows(data);
  TrainPlan plan;
  plan.iterations = 25;
  plan.eval_every = 5;
  plan.batch_size = 8;
  plan.lr = 1e-3;
  auto run = [&] {
    auto model = Model<float>::build(tiny_config(4), 2);
    OptimState state;
    auto r = train(model, state, data, rows, rows, plan);
    return std::make_pair(r, snapshot(model));
  };
  const auto [a, pa] = run();
  const auto [b, pb] = run();
  REQUIRE(a.log.size() == 25 / 5 + 1);
  CHECK(a.log.front().step == 0);
  CHECK(a.log.back().step == 25);
  CHECK(a.final_step == 25);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].step == b.log[i].step);
    CHECK(a.log[i].loss == b.log[i].loss);
    CHECK(a.log[i].val_ba == b.log[i].val_ba);
    CHECK(a.log[i].val_ba.has_value());
  }
  CHECK(pa == pb);
  const auto line = nlohmann::json::parse(log_line(a.log[1]));
  CHECK(line.at("step") == 5);
  CHECK(line.contains("wall_ms"));
}

TEST_CASE("memorizing 20 instances halves the loss") {
  const auto data = tiny_data(2, 20, 4, 5);
  const auto rows = all_rows(data);
  auto model = Model<float>::build(tiny_config(4), 3);
  OptimState state;
  TrainPlan plan;
  plan.iterations = 2000;
  plan.eval_every = 2000;
  plan.batch_size = 20;
  plan.lr = 1e-3;
  const auto r = train(model, state, data, rows, {}, plan);
  REQUIRE(r.log.size() == 2);
  CHECK(r.log.back().loss < 0.5 * r.log.front().loss);
  const auto probs = predict(model, data, rows);
  CHECK(evaluate(probs, data.labels(rows)).macro_ba >= 0.95);
}

TEST_CASE("resume follows the uninterrupted trajectory bitwise") {
  const auto data = tiny_data(3, 40, 4);
  const auto rows = all_rows(data);
  TrainPlan plan;
  plan.iterations = 60;
  plan.eval_every = 10;
  plan.batch_size = 16;
  plan.lr = 1e-3;
  plan.seed = 11;

  auto full = Model<float>::build(tiny_config(4), plan.seed);
  OptimState full_state;
  const auto full_log = train(full, full_state, data, rows, {}, plan).log;

  const auto dir = fs::temp_directory_path() / "mstc_test_resume";
  fs::remove_all(dir);
  auto part = Model<float>::build(tiny_config(4), plan.seed);
  OptimState part_state;
  TrainPlan first = plan;
  first.iterations = 30;
  train(part, part_state, data, rows, {}, first);
  save_training_checkpoint(part, part_state, plan.seed, dir);

  auto ck = load_training_checkpoint(dir, AdamConfig{});
  CHECK(ck.state.t == 30);
  CHECK(ck.seed == plan.seed);
  const auto rest = train(ck.model, ck.state, data, rows, {}, plan).log;
  CHECK(snapshot(ck.model) == snapshot(full));
  REQUIRE(rest.size() == 4);
  for (std::size_t i = 0; i < rest.size(); ++i) {
    CHECK(rest[i].step == full_log[i + 3].step);
    CHECK(rest[i].loss == full_log[i + 3].loss);
  }
  fs::remove_all(dir);
}

TEST_CASE("predict averages multi-task heads") {
  auto c = tiny_config(4);
  c.multi_task = true;
  c.ps_units = c.filters[1];
  const auto data = tiny_data(2, 6, 4);
  const auto rows = all_rows(data);
  auto model = Model<float>::build(c, 1);
  const std::vector<Modality> acc{Modality::kAcc}, gyro{Modality::kGyro};
  const std::vector<Modality> both{Modality::kAcc, Modality::kGyro};
  const auto pa = predict(model, data, rows, acc), pg = predict(model, data, rows, gyro);
  const auto pb = predict(model, data, rows, both, 4);
  for (std::size_t i = 0; i < pb.size(); ++i) CHECK(pb[i] == doctest::Approx((pa[i] + pg[i]) / 2));
}

TEST_CASE("extreme threshold kills sensitivity") {
  const auto data = tiny_data(2, 30, 3);
  const auto rows = all_rows(data);
  auto model = Model<float>::build(tiny_config(3), 1);
  const auto probs = predict(model, data, rows);
  const auto r = evaluate(probs, data.labels(rows), 0.999999);
  for (const auto& l : r.labels)
    if (l.sensitivity) CHECK(*l.sensitivity == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("incompatible data is rejected") {
  const auto data = tiny_data(2, 4, 3);
  CHECK_THROWS_AS(check_compatible(tiny_config(5), data), FormatError);
  auto c = tiny_config(3);
  c.imu_length = 80;
  CHECK_THROWS_AS(check_compatible(c, data), FormatError);
  CHECK_NOTHROW(check_compatible(tiny_config(3), data));
}

TEST_CASE("leakage audit") {
  const auto data = tiny_data(4, 12, 3);
  const std::set<std::string> test{data.instances[1].user};
  const std::vector<std::size_t> clean = data.indices_for_users({data.instances[0].user});
  CHECK_NOTHROW(audit_rows(data, clean, test));
  const std::vector<std::size_t> leaky{0, 1};
  CHECK_THROWS_AS(audit_rows(data, leaky, test), std::logic_error);
}

TEST_CASE("cross-validation on planted data") {
  const auto data = tiny_data(6, 240, 4, 9);
  TrainPlan plan;
  plan.iterations = 300;
  plan.eval_every = 100;
  plan.batch_size = 40;
  plan.lr = 2e-3;
  CvOptions opt;
  opt.k = 2;
  const auto r = run_cv(data, tiny_config(4), plan, opt);
  CHECK(r.folds.size() == 2);
  CHECK(r.summary.folds == 2);
  CHECK(r.audit.folds == 2);
  CHECK(r.audit.batches == 600);
  CHECK(r.audit.violations == 0);
  CHECK(r.summary.mean_ba >= 0.9);
  for (std::size_t f = 0; f < 2; ++f) {
    for (const auto& u : r.plan.test_users[f]) {
      const auto tr = r.plan.train_users(f);
      CHECK(std::find(tr.begin(), tr.end(), u) == tr.end());
    }
  }
}

TEST_CASE("ablation grid") {
  AblationGrid grid = ablation_grid_from_json(
      {{"fusion", {"gmp", "conv"}}, {"modalities", {"acc,ps", "ps"}}, {"weighting", {true}}});
  TrainPlan plan;
  plan.iterations = 4;
  plan.eval_every = 2;
  plan.batch_size = 10;
  const auto cells = expand_grid(grid, tiny_config(3), plan);
  REQUIRE(cells.size() == 4);
  std::size_t invalid = 0;
  for (const auto& c : cells) invalid += c.invalid.has_value();
  CHECK(invalid == 1);  // conv fusion without a temporal stream
  CHECK(cells[0].descriptor.find("fusion=gmp") != std::string::npos);
  CHECK_THROWS_AS(ablation_grid_from_json({{"fusions", {"gmp"}}}), std::invalid_argument);

  const auto data = tiny_data(4, 24, 3);
  CvOptions opt;
  opt.k = 2;
  AblationGrid one;
  const auto rows = run_ablation(data, one, tiny_config(3), plan, opt);
  REQUIRE(rows.size() == 1);
  const auto direct = run_cv(data, tiny_config(3), plan, opt);
  CHECK(rows[0].result->summary.mean_ba == direct.summary.mean_ba);
  CHECK(rows[0].result->plan.test_users == direct.plan.test_users);

  std::ostringstream os;
  write_ablation_table(os, rows);
  CHECK(os.str().rfind("cell\tba\tba_sd\tsens\tsens_sd\tspec\tspec_sd\texcluded\n", 0) == 0);
}

}
