#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mstc {

/// Raised when tensor shapes are inconsistent with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by blob/checkpoint/dataset readers on malformed input.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major array. Value type; copies are deep.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0});
  BasicTensor(Shape shape, std::vector<T> data);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Reinterprets the same values under a new shape of equal element count.
  BasicTensor reshaped(Shape shape) const&;
  BasicTensor reshaped(Shape shape) &&;

  void fill(T value);

  /// Converts element type (used to move between training and check precision).
  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

/// Throws NumericError naming `context` if any element is NaN or Inf.
template <class T>
void check_finite(const BasicTensor<T>& t, const std::string& context);

/// C = A * B. Each output element sums over the inner index in ascending
/// order starting from zero, so results are bit-reproducible.
template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// C = A^T * B, used for weight gradients.
template <class T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// C = A * B^T, used for input gradients.
template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b);

// --- random numbers -------------------------------------------------------

/// xoshiro256** seeded through splitmix64. The algorithm and constants are
/// fixed so that a seed produces the same stream on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);
  /// Standard normal via Box-Muller (one draw per call, second discarded).
  double normal();
  bool bernoulli(double p) { return uniform() < p; }

  std::uint64_t seed() const { return seed_; }

  /// Derives an independent generator for worker `index`.
  Rng fork(std::uint64_t index) const { return Rng(seed_ + index); }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<std::uint64_t>(last - first);
    for (std::uint64_t i = n; i > 1; --i) {
      const auto j = below(i);
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

/// Glorot-uniform matrix of shape [fan_in, fan_out], bound sqrt(6/(in+out)).
template <class T>
BasicTensor<T> xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng);

/// Glorot-uniform tensor of arbitrary shape with explicit fans (conv kernels).
template <class T>
BasicTensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng);

// --- blob serialization ---------------------------------------------------
//
// Layout: "MSTC" | u8 dtype | u8 rank | rank x u64 LE dims | LE values.

enum class DType : std::uint8_t { kFloat32 = 1, kFloat64 = 2 };

template <class T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kFloat32; }
template <>
constexpr DType dtype_of<double>() { return DType::kFloat64; }

template <class T>
std::size_t blob_write(const BasicTensor<T>& t, std::ostream& sink);

template <class T>
BasicTensor<T> blob_read(std::istream& source);

/// Reads the dtype byte of a blob without consuming the stream contents.
DType blob_peek_dtype(std::istream& source);

}  // namespace mstc
