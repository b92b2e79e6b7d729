#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <map>

#include "mstc/check.hpp"
#include "mstc/model.hpp"

using namespace mstc;
namespace fs = std::filesystem;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.label_count = 5;
  c.imu_length = 32;
  c.aud_length = 24;
  c.ps_width = 6;
  c.imu_kernels = {8, 4};
  c.aud_kernels = {4, 3};
  c.filters = {4, 8};
  c.ps_units = 8;
  c.shared_units = {16, 8};
  c.fusion_fc_units = 6;
  c.fusion_conv_kernel = 4;
  c.fusion_conv_filters = 5;
  c.task_units = 7;
  c.ps_task_units = 5;
  return c;
}

std::map<std::string, Shape> tap_shapes(Model<float>& m, const ModalityBatch<float>& b) {
  std::map<std::string, Shape> shapes;
  ActivationTap<float> tap = [&](const std::string& name, const Tensor& t) { shapes[name] = t.shape(); };
  Rng rng(1);
  m.forward_logits(b, Mode::kInfer, rng, {}, &tap);
  return shapes;
}

fs::path temp_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("mstc_test_model_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST_SUITE("model") {

TEST_CASE("default parameter shapes") {
  const auto m = Model<float>::build(ModelConfig{}, 1);
  std::map<std::string, Shape> shapes;
  for (auto* p : m.parameters()) shapes[p->name] = p->value.shape();
  const std::map<std::string, Shape> expected = {
      {"acc.conv1.depthwise.kernel", {64, 3}},   {"acc.conv1.pointwise.weight", {3, 32}},
      {"acc.conv1.pointwise.bias", {32}},        {"acc.conv2.depthwise.kernel", {32, 32}},
      {"acc.conv2.pointwise.weight", {32, 64}},  {"acc.conv2.pointwise.bias", {64}},
      {"gyro.conv1.depthwise.kernel", {64, 3}},  {"gyro.conv1.pointwise.weight", {3, 32}},
      {"gyro.conv1.pointwise.bias", {32}},       {"gyro.conv2.depthwise.kernel", {32, 32}},
      {"gyro.conv2.pointwise.weight", {32, 64}}, {"gyro.conv2.pointwise.bias", {64}},
      {"aud.conv1.depthwise.kernel", {8, 13}},   {"aud.conv1.pointwise.weight", {13, 32}},
      {"aud.conv1.pointwise.bias", {32}},        {"aud.conv2.depthwise.kernel", {6, 32}},
      {"aud.conv2.pointwise.weight", {32, 64}},  {"aud.conv2.pointwise.bias", {64}},
      {"ps.fc.weight", {16, 64}},                {"ps.fc.bias", {64}},
      {"shared_fc1.weight", {256, 2048}},        {"shared_fc1.bias", {2048}},
      {"shared_fc2.weight", {2048, 1024}},       {"shared_fc2.bias", {1024}},
      {"output.weight", {1024, 51}},             {"output.bias", {51}},
  };
  CHECK(shapes == expected);
  // 2 x (320 + 3136) + (552 + 2304) + 1088 + 526336 + 2098176 + 52275
  CHECK(m.parameter_count() == 2687643);
}

TEST_CASE("default activation shapes") {
  auto m = Model<float>::build(ModelConfig{}, 1);
  Rng rng(2);
  const auto b = random_batch<float>(m.config(), 1, rng);
  const auto s = tap_shapes(m, b);
  CHECK(s.at("acc.conv1") == Shape{1, 400, 32});
  CHECK(s.at("acc.conv2") == Shape{1, 200, 64});
  CHECK(s.at("acc.gmp") == Shape{1, 64});
  CHECK(s.at("gyro.conv2") == Shape{1, 200, 64});
  CHECK(s.at("aud.conv1") == Shape{1, 210, 32});
  CHECK(s.at("aud.conv2") == Shape{1, 105, 64});
  CHECK(s.at("ps.fc") == Shape{1, 64});
  CHECK(s.at("fused") == Shape{1, 256});
  CHECK(s.at("shared_fc1") == Shape{1, 2048});
  CHECK(s.at("shared_fc2") == Shape{1, 1024});
  CHECK(s.at("output") == Shape{1, 51});
}

TEST_CASE("ps-only gmp model is a plain MLP") {
  ModelConfig c;
  c.modalities = {Modality::kPs};
  const auto m = Model<float>::build(c, 3);
  std::vector<std::string> names;
  for (auto* p : m.parameters()) names.push_back(p->name);
  CHECK(names == std::vector<std::string>{"ps.fc.weight", "ps.fc.bias", "shared_fc1.weight",
                                          "shared_fc1.bias", "shared_fc2.weight", "shared_fc2.bias",
                                          "output.weight", "output.bias"});
  CHECK(m.parameters()[2]->value.shape() == Shape{64, 2048});
}

TEST_CASE("fusion widths") {
  ModelConfig c;
  c.modalities = {Modality::kAcc};
  c.fusion = Fusion::kFlattened;
  c.shared_units = {8, 4};
  auto m = Model<float>::build(c, 1);
  Rng rng(1);
  CHECK(tap_shapes(m, random_batch<float>(c, 1, rng)).at("fused") == Shape{1, 12800});
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.modalities = {};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c.modalities = {Modality::kPs};
  c.fusion = Fusion::kConv;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(Model<float>::build(c, 1), std::invalid_argument);
  c.fusion = Fusion::kGmp;
  CHECK_NOTHROW(c.validate());
  CHECK_THROWS(parse_modality("magnetometer"));
  CHECK(parse_modality_list("ps,acc,acc") == std::vector<Modality>{Modality::kAcc, Modality::kPs});
}

TEST_CASE("config json round trip and unknown keys") {
  auto c = small_config();
  c.fusion = Fusion::kConv;
  c.conv_kind = ConvKind::kStandard;
  CHECK(model_config_from_json(model_config_to_json(c)) == c);
  auto j = model_config_to_json(c);
  j["bogus"] = 1;
  CHECK_THROWS_AS(model_config_from_json(j), std::invalid_argument);
}

TEST_CASE("same config and seed give identical parameters") {
  const auto c = small_config();
  const auto a = Model<float>::build(c, 9), b = Model<float>::build(c, 9), d = Model<float>::build(c, 10);
  bool differs = false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i) {
    CHECK(a.parameters()[i]->value == b.parameters()[i]->value);
    differs |= a.parameters()[i]->value != d.parameters()[i]->value;
  }
  CHECK(differs);
}

TEST_CASE("zero model outputs one half") {
  for (auto fusion : {Fusion::kGmp, Fusion::kGap, Fusion::kFc, Fusion::kFlattened, Fusion::kConv}) {
    auto c = small_config();
    c.fusion = fusion;
    auto m = Model<float>::build(c, 1);
    for (auto* p : m.parameters()) p->value.fill(0.0f);
    ModalityBatch<float> b;
    for (auto mod : c.modalities)
      b.set(mod, is_temporal(mod) ? Tensor({2, c.input_length(mod), c.input_channels(mod)})
                                  : Tensor({2, c.ps_width}));
    Rng rng(1);
    const auto p = m.forward(b, Mode::kInfer, rng);
    CHECK(p.shape() == Shape{2, 5});
    for (float v : p.values()) CHECK(v == 0.5f);
  }
}

TEST_CASE("inference is repeatable and probabilities are in (0, 1)") {
  const auto c = small_config();
  auto m = Model<float>::build(c, 4);
  Rng rng(5);
  const auto b = random_batch<float>(c, 3, rng);
  Rng r1(1), r2(2);
  const auto p1 = m.forward(b, Mode::kInfer, r1);
  const auto p2 = m.forward(b, Mode::kInfer, r2);
  CHECK(p1 == p2);
  for (float v : p1.values()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
  const auto t1 = m.forward(b, Mode::kTrain, r1);
  CHECK(t1 != p1);
}

TEST_CASE("gmp output is invariant to time permutation with pointwise streams") {
  auto c = small_config();
  c.modalities = {Modality::kAcc, Modality::kPs};
  c.imu_kernels = {1, 1};
  c.stride = 1;
  auto m = Model<float>::build(c, 6);
  Rng rng(7);
  auto b = random_batch<float>(c, 2, rng);
  Rng r(0);
  const auto before = m.forward(b, Mode::kInfer, r);
  auto x = b.get(Modality::kAcc);
  Tensor shuffled(x.shape());
  std::vector<std::size_t> perm(c.imu_length);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  rng.shuffle(perm.begin(), perm.end());
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t t = 0; t < c.imu_length; ++t)
      for (std::size_t ch = 0; ch < 3; ++ch) shuffled.at(i, t, ch) = x.at(i, perm[t], ch);
  b.set(Modality::kAcc, shuffled);
  CHECK(m.forward(b, Mode::kInfer, r) == before);
}

TEST_CASE("std and dps kinds share activation shapes") {
  for (auto fusion : {Fusion::kGmp, Fusion::kFc, Fusion::kConv}) {
    auto c = small_config();
    c.fusion = fusion;
    auto d = Model<float>::build(c, 1);
    c.conv_kind = ConvKind::kStandard;
    auto s = Model<float>::build(c, 1);
    CHECK(s.parameter_count() > d.parameter_count());
    Rng rng(3);
    const auto b = random_batch<float>(c, 2, rng);
    auto sd = tap_shapes(d, b), ss = tap_shapes(s, b);
    for (const auto& [name, shape] : sd)
      if (ss.count(name)) CHECK(ss.at(name) == shape);
    CHECK(sd.at("output") == ss.at("output"));
  }
}

TEST_CASE("multi-task structure") {
  ModelConfig c;
  c.multi_task = true;
  auto m = Model<float>::build(c, 1);
  // streams 10856, shared 64*1024+1024, three 128-unit task paths and one 64-unit path
  CHECK(m.parameter_count() ==
        10856 + (64 * 1024 + 1024) + 3 * (1024 * 128 + 128 + 128 * 51 + 51) +
            (1024 * 64 + 64 + 64 * 51 + 51));
  Rng rng(2);
  const auto b = random_batch<float>(c, 2, rng);
  const auto out = m.forward_logits(b, Mode::kInfer, rng);
  CHECK(out.head_names == std::vector<std::string>{"acc", "gyro", "aud", "ps"});
  for (const auto& z : out.logits) CHECK(z.shape() == Shape{2, 51});
  CHECK_THROWS_AS(
      [] {
        auto bad = ModelConfig{};
        bad.multi_task = true;
        bad.fusion = Fusion::kFlattened;
        bad.validate();
      }(),
      std::invalid_argument);
}

TEST_CASE("multi-task shared layer feeds every head") {
  auto c = small_config();
  c.multi_task = true;
  c.ps_units = c.filters[1];
  auto m = Model<float>::build(c, 2);
  Rng rng(3);
  const auto b = random_batch<float>(c, 2, rng);
  const auto before = m.forward_logits(b, Mode::kInfer, rng);
  for (auto* p : m.parameters())
    if (p->name == "shared_fc.weight")
      for (auto& v : p->value.values()) v += 0.05f;
  const auto after = m.forward_logits(b, Mode::kInfer, rng);
  for (std::size_t h = 0; h < 4; ++h) CHECK(before.logits[h] != after.logits[h]);
}

TEST_CASE("predict_missing averages heads") {
  auto c = small_config();
  c.multi_task = true;
  c.ps_units = c.filters[1];
  auto m = Model<float>::build(c, 5);
  Rng rng(4);
  const auto b = random_batch<float>(c, 3, rng);
  const auto heads = m.forward_logits(b, Mode::kInfer, rng);
  const std::vector<Modality> acc{Modality::kAcc}, gyro{Modality::kGyro};
  const std::vector<Modality> both{Modality::kAcc, Modality::kGyro}, rev{Modality::kGyro, Modality::kAcc};
  const auto pa = m.predict_missing(b, acc), pg = m.predict_missing(b, gyro);
  CHECK(pa == sigmoid(heads.logits[0]));
  const auto pb = m.predict_missing(b, both);
  for (std::size_t i = 0; i < pb.size(); ++i) CHECK(pb[i] == doctest::Approx((pa[i] + pg[i]) / 2));
  CHECK(m.predict_missing(b, rev) == pb);

  for (unsigned mask = 1; mask < 16; ++mask) {
    std::vector<Modality> subset;
    for (auto mod : kAllModalities)
      if (mask & (1u << index_of(mod))) subset.push_back(mod);
    ModalityBatch<float> only;
    for (auto mod : subset) only.set(mod, b.get(mod));
    const auto p = m.predict_missing(only, subset);
    CHECK(p.shape() == Shape{3, 5});
    for (float v : p.values()) {
      CHECK(v > 0.0f);
      CHECK(v < 1.0f);
    }
  }
  const std::vector<Modality> none;
  CHECK_THROWS(m.predict_missing(b, none));

  auto single = Model<float>::build(small_config(), 1);
  CHECK_THROWS(single.predict_missing(b, acc));
}

TEST_CASE("full default model passes gradcheck") {
  const auto rep = model_gradcheck(ModelConfig{}, 1, 2);
  CHECK(rep.passed);
  CHECK(rep.checked >= 200);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("small variants pass gradcheck") {
  for (auto fusion : {Fusion::kGap, Fusion::kFc, Fusion::kFlattened, Fusion::kConv}) {
    for (auto kind : {ConvKind::kDepthwiseSeparable, ConvKind::kStandard}) {
      auto c = small_config();
      c.fusion = fusion;
      c.conv_kind = kind;
      CAPTURE(fusion_name(fusion));
      const auto rep = model_gradcheck(c, 3, 3);
      CHECK(rep.passed);
    }
  }
  auto c = small_config();
  c.multi_task = true;
  c.ps_units = c.filters[1];
  CHECK(model_gradcheck(c, 4, 3).passed);
}

TEST_CASE("checkpoint round trip") {
  auto c = small_config();
  c.multi_task = true;
  c.ps_units = c.filters[1];
  auto m = Model<float>::build(c, 8);
  const auto dir = temp_dir("rt");
  checkpoint_save(m, dir, CheckpointMeta{42, 7}, {{"note", Tensor({2}, {1, 2})}});
  auto loaded = checkpoint_load<float>(dir);
  CHECK(loaded.meta.step == 42);
  CHECK(loaded.meta.seed == 7);
  CHECK(loaded.extra.at("note") == Tensor({2}, {1, 2}));
  CHECK(loaded.model.config() == c);
  Rng rng(1);
  const auto b = random_batch<float>(c, 2, rng);
  Rng r1(0), r2(0);
  CHECK(loaded.model.forward(b, Mode::kInfer, r1) == m.forward(b, Mode::kInfer, r2));
  fs::remove_all(dir);
}

TEST_CASE("checkpoint corruption is reported") {
  auto m = Model<float>::build(small_config(), 8);
  const auto dir = temp_dir("bad");
  checkpoint_save(m, dir, CheckpointMeta{});
  auto manifest = nlohmann::json::parse(std::ifstream(dir / "manifest.json"));
  const auto name = manifest["parameters"][0]["name"].get<std::string>();
  const auto file = dir / manifest["parameters"][0]["file"].get<std::string>();

  const auto size = fs::file_size(file);
  fs::resize_file(file, size - 3);
  try {
    checkpoint_load<float>(dir);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find(name) != std::string::npos);
  }

  checkpoint_save(m, dir, CheckpointMeta{});
  manifest["parameters"][0]["shape"] = {1, 2, 3};
  std::ofstream(dir / "manifest.json") << manifest.dump();
  try {
    checkpoint_load<float>(dir);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
  CHECK_THROWS_AS(checkpoint_load<double>(dir), FormatError);
  CHECK_THROWS_AS(checkpoint_load<float>(dir / "nowhere"), FormatError);
  fs::remove_all(dir);
}

}
