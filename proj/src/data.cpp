#include "mstc/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mstc {

namespace fs = std::filesystem;
using nlohmann::json;

const Tensor& Instance::sensor(Modality m) const {
  switch (m) {
    case Modality::kAcc: return acc;
    case Modality::kGyro: return gyro;
    case Modality::kAud: return mfcc;
    case Modality::kPs: return ps;
  }
  throw std::invalid_argument("unknown modality");
}

Tensor& Instance::sensor(Modality m) {
  return const_cast<Tensor&>(static_cast<const Instance&>(*this).sensor(m));
}

// --- preprocessing --------------------------------------------------------

namespace {

void check_channels(const Tensor& t, std::size_t channels, const char* what,
                    const std::string& id) {
  if (t.empty()) return;
  if (t.rank() != 2 || t.dim(1) != channels) {
    throw FormatError("instance " + id + ": " + what + " must be [L x " +
                      std::to_string(channels) + "], got " + shape_string(t.shape()));
  }
}

Tensor pad_or_truncate(const Tensor& x, std::size_t length) {
  const std::size_t channels = x.dim(1);
  Tensor out({length, channels});
  const std::size_t rows = std::min(length, x.dim(0));
  std::copy_n(x.data(), rows * channels, out.data());
  return out;
}

Tensor tile(const Tensor& x, std::size_t length) {
  const std::size_t channels = x.dim(1), rows = x.dim(0);
  Tensor out({length, channels});
  for (std::size_t t = 0; t < length; ++t) {
    std::copy_n(x.data() + (t % rows) * channels, channels, out.data() + t * channels);
  }
  return out;
}

}  // namespace

std::variant<Instance, Discard> preprocess(const Instance& raw, const PreprocessSpec& spec) {
  check_channels(raw.acc, spec.imu_channels, "acc", raw.id);
  check_channels(raw.gyro, spec.imu_channels, "gyro", raw.id);
  check_channels(raw.mfcc, spec.mfcc_channels, "mfcc", raw.id);
  if (!raw.ps.empty() && raw.ps.rank() != 1) {
    throw FormatError("instance " + raw.id + ": ps must be a vector, got " +
                      shape_string(raw.ps.shape()));
  }
  for (float v : raw.ps.values()) {
    if (v != 0.0f && v != 1.0f) throw FormatError("instance " + raw.id + ": ps entries must be 0 or 1");
  }
  if (!raw.mfcc.empty() && raw.mfcc.dim(0) < spec.min_mfcc_frames) return Discard{"mfcc_too_short"};

  Instance out = raw;
  if (!raw.acc.empty()) out.acc = pad_or_truncate(raw.acc, spec.imu_length);
  if (!raw.gyro.empty()) out.gyro = pad_or_truncate(raw.gyro, spec.imu_length);
  if (!raw.mfcc.empty()) out.mfcc = tile(raw.mfcc, spec.mfcc_length);
  return out;
}

// --- dataset --------------------------------------------------------------

LabelMatrix Dataset::labels() const {
  LabelMatrix m(0, header.n_labels);
  for (const auto& inst : instances) m.append_row(inst.labels);
  return m;
}

LabelMatrix Dataset::labels(std::span<const std::size_t> rows) const {
  LabelMatrix m(0, header.n_labels);
  for (auto r : rows) m.append_row(instances.at(r).labels);
  return m;
}

std::vector<std::string> Dataset::users() const {
  std::set<std::string> s;
  for (const auto& inst : instances) s.insert(inst.user);
  return {s.begin(), s.end()};
}

std::vector<std::size_t> Dataset::indices_for_users(const std::set<std::string>& users) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < instances.size(); ++i) {
    if (users.count(instances[i].user)) out.push_back(i);
  }
  return out;
}

namespace {

void write_blob(const fs::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot write " + path.string());
  blob_write(t, os);
}

Tensor read_blob(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open blob " + path.string());
  try {
    return blob_read<float>(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

const char* file_key(Modality m) {
  switch (m) {
    case Modality::kAcc: return "acc";
    case Modality::kGyro: return "gyro";
    case Modality::kAud: return "mfcc";
    case Modality::kPs: return "ps";
  }
  return "?";
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  fs::create_directories(dir / "blobs");
  const auto& h = dataset.header;
  json header{{"format_version", kDatasetFormatVersion},
              {"n_labels", h.n_labels},
              {"ps_width", h.ps_width},
              {"label_names", h.label_names}};
  {
    std::ofstream os(dir / "dataset.json", std::ios::trunc);
    if (!os) throw FormatError("cannot write " + (dir / "dataset.json").string());
    os << header.dump(2) << "\n";
  }
  std::ofstream lines(dir / "instances.jsonl", std::ios::trunc);
  if (!lines) throw FormatError("cannot write " + (dir / "instances.jsonl").string());
  for (const auto& inst : dataset.instances) {
    if (inst.labels.size() != h.n_labels) {
      throw FormatError("instance " + inst.id + " has " + std::to_string(inst.labels.size()) +
                        " labels, header declares " + std::to_string(h.n_labels));
    }
    json labels = json::array();
    for (const auto& l : inst.labels) labels.push_back(l ? json(*l) : json(nullptr));
    json files = json::object();
    for (auto m : kAllModalities) {
      if (!inst.has(m)) continue;
      const std::string rel = "blobs/" + inst.id + "." + file_key(m) + ".blob";
      write_blob(dir / rel, inst.sensor(m));
      files[file_key(m)] = rel;
    }
    json record{{"id", inst.id}, {"user", inst.user}, {"labels", labels}, {"files", files}};
    lines << record.dump() << "\n";
  }
}

Dataset load_dataset(const fs::path& dir, const PreprocessSpec* spec, LoadReport* report) {
  Dataset ds;
  {
    std::ifstream is(dir / "dataset.json");
    if (!is) throw FormatError("no dataset.json in " + dir.string());
    try {
      const auto j = json::parse(is);
      ds.header.format_version = j.at("format_version").get<int>();
      if (ds.header.format_version != kDatasetFormatVersion) {
        throw FormatError("unsupported dataset format_version " +
                          std::to_string(ds.header.format_version));
      }
      ds.header.n_labels = j.at("n_labels").get<std::size_t>();
      ds.header.ps_width = j.at("ps_width").get<std::size_t>();
      ds.header.label_names = j.value("label_names", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw FormatError(std::string("malformed dataset.json: ") + e.what());
    }
  }
  std::ifstream lines(dir / "instances.jsonl");
  if (!lines) throw FormatError("no instances.jsonl in " + dir.string());
  std::string line;
  std::size_t line_no = 0;
  LoadReport local;
  while (std::getline(lines, line)) {
    ++line_no;
    if (line.empty()) continue;
    Instance inst;
    try {
      const auto rec = json::parse(line);
      inst.id = rec.at("id").get<std::string>();
      inst.user = rec.at("user").get<std::string>();
      for (const auto& l : rec.at("labels")) {
        if (l.is_null()) {
          inst.labels.push_back(std::nullopt);
        } else {
          const int v = l.get<int>();
          if (v != 0 && v != 1) throw FormatError("label values must be 0, 1 or null");
          inst.labels.push_back(static_cast<std::uint8_t>(v));
        }
      }
      const auto& files = rec.at("files");
      for (auto m : kAllModalities) {
        if (files.contains(file_key(m))) {
          inst.sensor(m) = read_blob(dir / files.at(file_key(m)).get<std::string>());
        }
      }
    } catch (const json::exception& e) {
      throw FormatError("instances.jsonl line " + std::to_string(line_no) + ": " + e.what());
    }
    if (inst.labels.size() != ds.header.n_labels) {
      throw FormatError("instances.jsonl line " + std::to_string(line_no) + ": expected " +
                        std::to_string(ds.header.n_labels) + " labels");
    }
    if (!inst.ps.empty() && inst.ps.size() != ds.header.ps_width) {
      throw FormatError("instance " + inst.id + ": ps width " + std::to_string(inst.ps.size()) +
                        " differs from header " + std::to_string(ds.header.ps_width));
    }
    if (spec) {
      auto result = preprocess(inst, *spec);
      if (auto* d = std::get_if<Discard>(&result)) {
        ++local.discarded[d->reason];
        continue;
      }
      inst = std::move(std::get<Instance>(result));
    }
    ds.instances.push_back(std::move(inst));
  }
  local.loaded = ds.instances.size();
  if (report) *report = local;
  return ds;
}

// --- folds ----------------------------------------------------------------

std::vector<std::string> FoldPlan::train_users(std::size_t fold) const {
  std::vector<std::string> out;
  for (const auto& [user, f] : fold_of) {
    if (f != fold) out.push_back(user);
  }
  return out;
}

FoldPlan split_folds(std::span<const std::string> user_ids, std::size_t k, Rng& rng) {
  if (k < 2) throw std::invalid_argument("cross-validation needs k >= 2");
  std::set<std::string> distinct(user_ids.begin(), user_ids.end());
  if (distinct.size() < k) {
    throw std::invalid_argument("cannot split " + std::to_string(distinct.size()) + " users into " +
                                std::to_string(k) + " folds");
  }
  std::vector<std::string> users(distinct.begin(), distinct.end());
  rng.shuffle(users.begin(), users.end());
  FoldPlan plan;
  plan.k = k;
  plan.test_users.resize(k);
  for (std::size_t i = 0; i < users.size(); ++i) {
    plan.fold_of[users[i]] = i % k;
    plan.test_users[i % k].push_back(users[i]);
  }
  for (auto& t : plan.test_users) std::sort(t.begin(), t.end());
  for (std::size_t f = 0; f < k; ++f) {
    auto train = plan.train_users(f);
    rng.shuffle(train.begin(), train.end());
    const std::size_t n_val = std::max<std::size_t>(1, (train.size() + 2) / 5);
    std::vector<std::string> val(train.begin(), train.begin() + static_cast<std::ptrdiff_t>(n_val));
    std::vector<std::string> inner(train.begin() + static_cast<std::ptrdiff_t>(n_val), train.end());
    std::sort(val.begin(), val.end());
    std::sort(inner.begin(), inner.end());
    plan.inner_val.push_back(std::move(val));
    plan.inner_train.push_back(std::move(inner));
  }
  return plan;
}

// --- batching -------------------------------------------------------------

Batcher::Batcher(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed)
    : indices_(std::move(indices)), batch_size_(batch_size), seed_(seed) {
  if (indices_.empty()) throw std::invalid_argument("batcher: empty dataset");
  if (batch_size_ == 0) throw std::invalid_argument("batcher: batch size must be positive");
}

std::size_t Batcher::batches_per_epoch() const {
  return (indices_.size() + batch_size_ - 1) / batch_size_;
}

const std::vector<std::size_t>& Batcher::permutation(std::uint64_t e) {
  if (e != cached_epoch_) {
    cached_perm_ = indices_;
    Rng rng(hash_combine(seed_, e));
    rng.shuffle(cached_perm_.begin(), cached_perm_.end());
    cached_epoch_ = e;
  }
  return cached_perm_;
}

std::vector<std::size_t> Batcher::batch_at(std::uint64_t step) {
  const std::uint64_t per_epoch = batches_per_epoch();
  const auto& perm = permutation(step / per_epoch);
  const std::size_t begin = static_cast<std::size_t>(step % per_epoch) * batch_size_;
  const std::size_t end = std::min(begin + batch_size_, perm.size());
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin),
          perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

std::vector<std::vector<std::size_t>> Batcher::epoch(std::uint64_t e) {
  std::vector<std::vector<std::size_t>> out;
  const std::uint64_t per_epoch = batches_per_epoch();
  for (std::uint64_t b = 0; b < per_epoch; ++b) out.push_back(batch_at(e * per_epoch + b));
  return out;
}

template <class T>
ModalityBatch<T> make_batch(const Dataset& dataset, std::span<const std::size_t> rows,
                            std::span<const Modality> modalities) {
  ModalityBatch<T> batch;
  if (rows.empty()) throw std::invalid_argument("make_batch: no rows");
  for (auto m : modalities) {
    const auto& first = dataset.instances.at(rows[0]).sensor(m);
    if (first.empty()) {
      throw FormatError("instance " + dataset.instances[rows[0]].id + " has no " +
                        modality_name(m) + " data");
    }
    Shape shape = first.shape();
    shape.insert(shape.begin(), rows.size());
    BasicTensor<T> t(shape);
    const std::size_t stride = first.size();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const auto& inst = dataset.instances.at(rows[r]);
      const auto& s = inst.sensor(m);
      if (s.shape() != first.shape()) {
        throw FormatError("instance " + inst.id + ": " + modality_name(m) + " shape " +
                          shape_string(s.shape()) + " differs from " + shape_string(first.shape()) +
                          " (was the dataset preprocessed?)");
      }
      std::transform(s.data(), s.data() + stride, t.data() + r * stride,
                     [](float v) { return static_cast<T>(v); });
    }
    batch.set(m, std::move(t));
  }
  return batch;
}

Tensor64 gather_rows(const Tensor64& weights, std::span<const std::size_t> positions) {
  const std::size_t cols = weights.dim(1);
  Tensor64 out({positions.size(), cols});
  for (std::size_t r = 0; r < positions.size(); ++r) {
    std::copy_n(weights.data() + positions[r] * cols, cols, out.data() + r * cols);
  }
  return out;
}

// --- synthetic data -------------------------------------------------------

void SynthSpec::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("synth: " + msg); };
  if (n_users == 0 || n_instances == 0 || n_labels == 0) {
    fail("users, instances and labels must be positive");
  }
  if (!(missing_rate >= 0.0 && missing_rate < 1.0)) fail("missing rate must be in [0, 1)");
  if (!positive_rates.empty() && positive_rates.size() != n_labels) {
    fail("positive_rates needs one entry per label");
  }
  for (double r : rates()) {
    if (!(r > 0.0 && r < 1.0)) fail("positive rates must be in (0, 1)");
  }
  if (synth_imu_cycles(n_labels - 1) * 4 > imu_length) {
    fail("imu_length " + std::to_string(imu_length) + " is too short for " +
         std::to_string(n_labels) + " label frequencies");
  }
  if (synth_mfcc_cycles(n_labels - 1) * 4 > mfcc_length) {
    fail("mfcc_length " + std::to_string(mfcc_length) + " is too short for " +
         std::to_string(n_labels) + " label frequencies");
  }
  if (mfcc_length < 20) fail("mfcc_length must be at least 20 frames");
  if (ps_width != 0 && ps_width < n_labels) fail("ps_width must be at least n_labels");
  if (noise < 0.0) fail("noise must be non-negative");
  for (double s : signal) {
    if (s < 0.0) fail("signal amplitudes must be non-negative");
  }
  if (signal[3] > 1.0) fail("ps signal is a probability and must be <= 1");
}

std::vector<double> SynthSpec::rates() const {
  if (!positive_rates.empty()) return positive_rates;
  std::vector<double> r(n_labels);
  for (std::size_t c = 0; c < n_labels; ++c) r[c] = 0.05 + 0.0625 * static_cast<double>(c % 5);
  return r;
}

bool synth_planted(SignalLayout layout, std::size_t label, Modality m) {
  return layout == SignalLayout::kShared || label % kModalityCount == index_of(m);
}

Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const auto rates = spec.rates();
  const std::size_t ps_width = spec.ps_width ? spec.ps_width : spec.n_labels + 8;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;

  Dataset ds;
  ds.header.n_labels = spec.n_labels;
  ds.header.ps_width = ps_width;
  for (std::size_t c = 0; c < spec.n_labels; ++c) ds.header.label_names.push_back("label_" + std::to_string(c));

  // Per-user nuisance: a static IMU offset (device orientation) and a gain.
  std::vector<std::array<double, 3>> user_offset(spec.n_users);
  std::vector<double> user_gain(spec.n_users);
  for (std::size_t u = 0; u < spec.n_users; ++u) {
    for (auto& o : user_offset[u]) o = 0.5 * rng.normal();
    user_gain[u] = 1.0 + 0.1 * rng.normal();
  }

  const int user_digits = spec.n_users > 100 ? 4 : 2;
  for (std::size_t n = 0; n < spec.n_instances; ++n) {
    Instance inst;
    char id[32];
    std::snprintf(id, sizeof id, "i%06zu", n);
    inst.id = id;
    const std::size_t u = n % spec.n_users;
    char user[32];
    std::snprintf(user, sizeof user, "u%0*zu", user_digits, u);
    inst.user = user;

    std::vector<std::uint8_t> truth(spec.n_labels);
    for (std::size_t c = 0; c < spec.n_labels; ++c) truth[c] = rng.bernoulli(rates[c]) ? 1 : 0;
    for (std::size_t c = 0; c < spec.n_labels; ++c) {
      const bool missing = spec.missing_rate > 0.0 && rng.bernoulli(spec.missing_rate);
      inst.labels.push_back(missing ? std::nullopt : std::optional<std::uint8_t>(truth[c]));
    }

    // IMU streams: per-label sinusoids at distinct integer cycle counts.
    for (auto m : {Modality::kAcc, Modality::kGyro}) {
      std::size_t len = spec.imu_length;
      if (spec.length_jitter) len -= static_cast<std::size_t>(rng.below(spec.imu_length / 8 + 1));
      Tensor x({len, 3});
      const double amp = spec.signal[index_of(m)] * user_gain[u];
      std::vector<std::array<double, 4>> waves;  // cycles, phase, gain per axis
      for (std::size_t c = 0; c < spec.n_labels; ++c) {
        const double phase = rng.uniform(0.0, kTwoPi);
        const double axis_mix = rng.uniform(0.5, 1.0);
        if (truth[c] && synth_planted(spec.layout, c, m)) {
          waves.push_back({static_cast<double>(synth_imu_cycles(c)), phase, axis_mix, 0.0});
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t a = 0; a < 3; ++a) {
          double v = m == Modality::kAcc ? user_offset[u][a] : 0.0;
          for (const auto& w : waves) {
            const double axis_gain = a == 0 ? 1.0 : w[2];
            v += amp * axis_gain *
                 std::sin(kTwoPi * w[0] * static_cast<double>(t) /
                              static_cast<double>(spec.imu_length) +
                          w[1] + static_cast<double>(a));
          }
          v += spec.noise * rng.normal();
          x.at(t, a) = static_cast<float>(v);
        }
      }
      inst.sensor(m) = std::move(x);
    }

    // MFCC: each label modulates one coefficient band at its own rate. Half
    // clips are stored at half length; tiling restores a seamless window.
    {
      std::size_t len = spec.mfcc_length;
      if (spec.length_jitter && spec.mfcc_length % 2 == 0 && spec.mfcc_length / 2 >= 20 &&
          rng.bernoulli(0.5)) {
        len = spec.mfcc_length / 2;
      }
      Tensor x({len, 13});
      const double amp = spec.signal[index_of(Modality::kAud)];
      std::vector<std::array<double, 3>> waves;  // band, cycles, phase
      for (std::size_t c = 0; c < spec.n_labels; ++c) {
        const double phase = rng.uniform(0.0, kTwoPi);
        if (truth[c] && synth_planted(spec.layout, c, Modality::kAud)) {
          waves.push_back({static_cast<double>(synth_mfcc_band(c)),
                           static_cast<double>(synth_mfcc_cycles(c)), phase});
        }
      }
      for (std::size_t t = 0; t < len; ++t) {
        for (std::size_t b = 0; b < 13; ++b) {
          double v = 0.0;
          for (const auto& w : waves) {
            if (static_cast<std::size_t>(w[0]) != b) continue;
            v += amp * std::sin(kTwoPi * w[1] * static_cast<double>(t) /
                                    static_cast<double>(spec.mfcc_length) +
                                w[2]);
          }
          v += spec.noise * rng.normal();
          x.at(t, b) = static_cast<float>(v);
        }
      }
      inst.mfcc = std::move(x);
    }

    // Phone state: bit c follows label c; remaining bits are background.
    {
      Tensor x({ps_width});
      const double fidelity = spec.signal[index_of(Modality::kPs)];
      for (std::size_t b = 0; b < ps_width; ++b) {
        bool bit;
        if (b < spec.n_labels && synth_planted(spec.layout, b, Modality::kPs)) {
          bit = rng.bernoulli(fidelity) ? truth[b] != 0 : rng.bernoulli(0.5);
        } else {
          bit = rng.bernoulli(0.3);
        }
        x[b] = bit ? 1.0f : 0.0f;
      }
      inst.ps = std::move(x);
    }
    ds.instances.push_back(std::move(inst));
  }
  return ds;
}

template ModalityBatch<float> make_batch<float>(const Dataset&, std::span<const std::size_t>,
                                                std::span<const Modality>);
template ModalityBatch<double> make_batch<double>(const Dataset&, std::span<const std::size_t>,
                                                  std::span<const Modality>);

}  // namespace mstc
