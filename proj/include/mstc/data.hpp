#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mstc/model.hpp"
#include "mstc/objective.hpp"
#include "mstc/tensor.hpp"

namespace mstc {

/// One labeled example. Sensor tensors are [L x C] (ps is [W]); an empty
/// tensor means the sensor is absent for this instance.
struct Instance {
  std::string id;
  std::string user;
  Tensor acc, gyro, mfcc, ps;
  std::vector<std::optional<std::uint8_t>> labels;

  const Tensor& sensor(Modality m) const;
  Tensor& sensor(Modality m);
  bool has(Modality m) const { return !sensor(m).empty(); }

  friend bool operator==(const Instance&, const Instance&) = default;
};

struct PreprocessSpec {
  std::size_t imu_length = 800;
  std::size_t imu_channels = 3;
  std::size_t mfcc_length = 420;
  std::size_t mfcc_channels = 13;
  std::size_t min_mfcc_frames = 20;
};

struct Discard {
  std::string reason;
};

/// Zero-pads (or truncates, keeping the head) IMU windows to imu_length and
/// tiles MFCC frames cyclically to mfcc_length. Clips with fewer than
/// min_mfcc_frames MFCC frames are discarded ("mfcc_too_short").
std::variant<Instance, Discard> preprocess(const Instance& raw, const PreprocessSpec& spec = {});

struct DatasetHeader {
  int format_version = 1;
  std::size_t n_labels = 0;
  std::size_t ps_width = 0;
  std::vector<std::string> label_names;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Instance> instances;

  LabelMatrix labels() const;
  LabelMatrix labels(std::span<const std::size_t> rows) const;
  /// Distinct user ids, sorted.
  std::vector<std::string> users() const;
  /// Indices of instances whose user is in `users`.
  std::vector<std::size_t> indices_for_users(const std::set<std::string>& users) const;
};

inline constexpr int kDatasetFormatVersion = 1;

/// Writes dataset.json, instances.jsonl and blobs/ under `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);

struct LoadReport {
  std::size_t loaded = 0;
  std::map<std::string, std::size_t> discarded;  // reason -> count
};

/// Reads a dataset directory. With a PreprocessSpec every instance is
/// preprocessed and discards are tallied in `report`. Malformed input throws
/// FormatError.
Dataset load_dataset(const std::filesystem::path& dir, const PreprocessSpec* spec = nullptr,
                     LoadReport* report = nullptr);

// --- folds and batches ----------------------------------------------------

struct FoldPlan {
  std::size_t k = 0;
  std::map<std::string, std::size_t> fold_of;
  std::vector<std::vector<std::string>> test_users;   // per fold
  std::vector<std::vector<std::string>> inner_train;  // nested 80% of training users
  std::vector<std::vector<std::string>> inner_val;    // nested 20% of training users

  std::vector<std::string> train_users(std::size_t fold) const;
};

/// Seeded shuffle of the distinct users followed by round-robin assignment.
/// Throws std::invalid_argument when there are fewer distinct users than k.
FoldPlan split_folds(std::span<const std::string> user_ids, std::size_t k, Rng& rng);

/// Deterministic mini-batch schedule over a fixed index set. Each epoch is a
/// fresh seeded permutation; the last batch of an epoch may be short. The
/// batch for any global step can be computed directly, which is what makes
/// training resumable.
class Batcher {
 public:
  Batcher(std::vector<std::size_t> indices, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const;
  std::vector<std::size_t> batch_at(std::uint64_t step);
  /// All batches of one epoch, in order.
  std::vector<std::vector<std::size_t>> epoch(std::uint64_t e);

 private:
  const std::vector<std::size_t>& permutation(std::uint64_t e);

  std::vector<std::size_t> indices_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::uint64_t cached_epoch_ = ~std::uint64_t{0};
  std::vector<std::size_t> cached_perm_;
};

/// Stacks the requested modalities of `rows` into batch tensors.
template <class T>
ModalityBatch<T> make_batch(const Dataset& dataset, std::span<const std::size_t> rows,
                            std::span<const Modality> modalities);

/// Rows of `weights` (indexed by position within `all_rows`) for the given rows.
Tensor64 gather_rows(const Tensor64& weights, std::span<const std::size_t> positions);

// --- synthetic data -------------------------------------------------------

enum class SignalLayout {
  kShared,         // every modality carries every label's signature
  kComplementary,  // label c is planted only in modality c mod 4
};

struct SynthSpec {
  std::size_t n_users = 10;
  std::size_t n_instances = 500;
  std::size_t n_labels = 8;
  double missing_rate = 0.1;
  /// One rate per label; empty selects the default schedule 0.05..0.30.
  std::vector<double> positive_rates;
  std::uint64_t seed = 1;

  std::size_t imu_length = 800;
  std::size_t mfcc_length = 420;
  std::size_t ps_width = 0;  // 0 selects n_labels + 8
  /// Signature amplitude per modality (acc, gyro, aud, ps); for ps it is the
  /// probability that the label bit reflects the truth.
  std::array<double, 4> signal{1.0, 1.0, 1.0, 1.0};
  double noise = 0.5;
  SignalLayout layout = SignalLayout::kShared;
  /// Shortens raw IMU windows and halves some MFCC clips so that
  /// preprocessing has work to do.
  bool length_jitter = true;

  void validate() const;
  std::vector<double> rates() const;
};

/// IMU signature: cycles per window of label c.
inline std::size_t synth_imu_cycles(std::size_t label) { return 3 + 2 * label; }
/// MFCC signature: coefficient band and cycles per window of label c.
inline std::size_t synth_mfcc_band(std::size_t label) { return label % 13; }
inline std::size_t synth_mfcc_cycles(std::size_t label) { return 2 * (1 + label / 13); }
/// True when label c's signature is planted in modality m under `layout`.
bool synth_planted(SignalLayout layout, std::size_t label, Modality m);

/// Generates raw (not yet preprocessed) instances.
Dataset synth_generate(const SynthSpec& spec);

}  // namespace mstc
