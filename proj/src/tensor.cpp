#include "mstc/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <istream>
#include <numbers>
#include <ostream>
#include <sstream>

namespace mstc {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("tensor shape " + shape_string(shape_) + " needs " +
                         std::to_string(shape_size(shape_)) + " values, got " +
                         std::to_string(data_.size()));
  }
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const& {
  BasicTensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

template <class T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) && {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  shape_ = std::move(shape);
  return std::move(*this);
}

template <class T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <class T>
void check_finite(const BasicTensor<T>& t, const std::string& context) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(context + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

namespace {

void require_matrix(const Shape& s, const char* what) {
  if (s.size() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " + shape_string(s));
  }
}

}  // namespace

template <class T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul");
  require_matrix(b.shape(), "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = pa[i * k + p];
      const T* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_tn");
  require_matrix(b.shape(), "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul_tn: leading dimensions disagree, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t p = 0; p < k; ++p) {
    const T* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = pa[p * m + i];
      if (av == T{0}) continue;
      T* row = pc + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return c;
}

template <class T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_matrix(a.shape(), "matmul_nt");
  require_matrix(b.shape(), "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw DimensionError("matmul_nt: trailing dimensions disagree, " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
  BasicTensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = pb + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      pc[i * n + j] = acc;
    }
  }
  return c;
}

// --- Rng ------------------------------------------------------------------

namespace {

std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

Rng::Rng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

std::uint64_t Rng::next_u64() {
  const std::uint64_t result = std::rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = std::rotl(s_[3], 45);
  return result;
}

double Rng::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

double Rng::uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be positive");
  // Rejection sampling keeps the draw unbiased.
  const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

double Rng::normal() {
  double u1;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

template <class T>
BasicTensor<T> xavier_uniform(Shape shape, std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  if (fan_in == 0 || fan_out == 0 || shape_size(shape) == 0) {
    throw DimensionError("xavier init needs positive fans and shape, got fan_in=" +
                         std::to_string(fan_in) + " fan_out=" + std::to_string(fan_out));
  }
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  BasicTensor<T> t(std::move(shape));
  for (auto& v : t.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <class T>
BasicTensor<T> xavier_init(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return xavier_uniform<T>({fan_in, fan_out}, fan_in, fan_out, rng);
}

// --- blobs ----------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'M', 'S', 'T', 'C'};

template <class U>
void put_le(std::ostream& os, U value) {
  unsigned char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  os.write(reinterpret_cast<const char*>(bytes), sizeof(U));
}

template <class U>
U get_le(std::istream& is, const char* what) {
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError(std::string("blob truncated while reading ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(U));
  U value;
  std::memcpy(&value, bytes, sizeof(U));
  return value;
}

}  // namespace

template <class T>
std::size_t blob_write(const BasicTensor<T>& t, std::ostream& sink) {
  if (t.rank() > 255) throw DimensionError("blob_write: rank exceeds 255");
  sink.write(kMagic, 4);
  put_le<std::uint8_t>(sink, static_cast<std::uint8_t>(dtype_of<T>()));
  put_le<std::uint8_t>(sink, static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(sink, static_cast<std::uint64_t>(d));
  for (auto v : t.values()) put_le<T>(sink, v);
  if (!sink) throw FormatError("blob_write: stream failure");
  return 4 + 1 + 1 + 8 * t.rank() + sizeof(T) * t.size();
}

DType blob_peek_dtype(std::istream& source) {
  const auto start = source.tellg();
  char magic[4];
  if (!source.read(magic, 4)) throw FormatError("blob truncated while reading magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("blob has bad magic");
  const auto code = get_le<std::uint8_t>(source, "dtype");
  source.seekg(start);
  if (code != 1 && code != 2) throw FormatError("blob has unknown dtype code " + std::to_string(code));
  return static_cast<DType>(code);
}

template <class T>
BasicTensor<T> blob_read(std::istream& source) {
  char magic[4];
  if (!source.read(magic, 4)) throw FormatError("blob truncated while reading magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("blob has bad magic");
  const auto code = get_le<std::uint8_t>(source, "dtype");
  if (code != static_cast<std::uint8_t>(dtype_of<T>())) {
    throw FormatError("blob dtype mismatch: stored code " + std::to_string(code) + ", expected " +
                      std::to_string(static_cast<int>(dtype_of<T>())));
  }
  const auto rank = get_le<std::uint8_t>(source, "rank");
  Shape shape(rank);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(source, "dims"));
  const std::size_t n = shape_size(shape);
  std::vector<T> values(n);
  for (auto& v : values) v = get_le<T>(source, "values");
  return BasicTensor<T>(std::move(shape), std::move(values));
}

#define MSTC_INSTANTIATE(T)                                                                   \
  template class BasicTensor<T>;                                                              \
  template void check_finite<T>(const BasicTensor<T>&, const std::string&);                   \
  template BasicTensor<T> matmul<T>(const BasicTensor<T>&, const BasicTensor<T>&);            \
  template BasicTensor<T> matmul_tn<T>(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> matmul_nt<T>(const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> xavier_init<T>(std::size_t, std::size_t, Rng&);                     \
  template BasicTensor<T> xavier_uniform<T>(Shape, std::size_t, std::size_t, Rng&);           \
  template std::size_t blob_write<T>(const BasicTensor<T>&, std::ostream&);                   \
  template BasicTensor<T> blob_read<T>(std::istream&);

MSTC_INSTANTIATE(float)
MSTC_INSTANTIATE(double)

#undef MSTC_INSTANTIATE

}  // namespace mstc
