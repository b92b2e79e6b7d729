#include "mstc/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mstc {

std::uint64_t hash_combine(std::uint64_t h, std::uint64_t v) {
  h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
  return h * 0x100000001B3ULL;
}

const char* param_role_name(ParamRole role) {
  switch (role) {
    case ParamRole::kDenseWeight: return "dense_weight";
    case ParamRole::kConvKernel: return "conv_kernel";
    case ParamRole::kDepthwiseKernel: return "depthwise_kernel";
    case ParamRole::kPointwiseWeight: return "pointwise_weight";
    case ParamRole::kBias: return "bias";
  }
  return "unknown";
}

void ConvSpec::validate() const {
  if (kernel == 0 || stride == 0 || in_channels == 0 || filters == 0) {
    throw DimensionError("conv spec needs positive kernel, stride, channels and filters");
  }
  if (kind == ConvKind::kPointwise && kernel != 1) {
    throw DimensionError("pointwise conv requires kernel 1, got " + std::to_string(kernel));
  }
  if (kind == ConvKind::kDepthwise && filters != in_channels) {
    throw DimensionError("depthwise conv keeps the channel count: filters must equal in_channels");
  }
}

std::size_t conv_output_length(std::size_t length, std::size_t kernel, std::size_t stride,
                               Padding padding) {
  if (stride == 0 || kernel == 0) throw DimensionError("conv needs positive kernel and stride");
  if (padding == Padding::kSame) return (length + stride - 1) / stride;
  if (length < kernel) {
    throw DimensionError("valid conv: length " + std::to_string(length) + " shorter than kernel " +
                         std::to_string(kernel));
  }
  return (length - kernel) / stride + 1;
}

std::size_t conv_pad_before(std::size_t length, std::size_t kernel, std::size_t stride,
                            Padding padding) {
  if (padding == Padding::kValid) return 0;
  const std::size_t out = conv_output_length(length, kernel, stride, padding);
  const std::size_t needed = (out - 1) * stride + kernel;
  return needed > length ? (needed - length) / 2 : 0;
}

std::size_t conv_parameter_count(const ConvSpec& spec) {
  const std::size_t k = spec.kernel, m = spec.in_channels, f = spec.filters;
  switch (spec.kind) {
    case ConvKind::kStandard: return k * m * f + f;
    case ConvKind::kDepthwise: return k * m;
    case ConvKind::kPointwise: return m * f + f;
    case ConvKind::kDepthwiseSeparable: return k * m + m * f + f;
  }
  return 0;
}

namespace {

struct SeqView {
  std::size_t batch, length, channels;
  bool batched;
};

template <class T>
SeqView seq_view(const BasicTensor<T>& x, const char* what) {
  if (x.rank() == 2) return {1, x.dim(0), x.dim(1), false};
  if (x.rank() == 3) return {x.dim(0), x.dim(1), x.dim(2), true};
  throw DimensionError(std::string(what) + " expects [L x M] or [B x L x M], got " +
                       shape_string(x.shape()));
}

Shape seq_shape(const SeqView& v, std::size_t length, std::size_t channels) {
  if (v.batched) return {v.batch, length, channels};
  return {length, channels};
}

template <class T>
void add_bias_rows(BasicTensor<T>& out, const BasicTensor<T>& b) {
  const std::size_t width = b.size();
  T* p = out.data();
  const T* pb = b.data();
  const std::size_t rows = out.size() / width;
  for (std::size_t r = 0; r < rows; ++r, p += width) {
    for (std::size_t f = 0; f < width; ++f) p[f] += pb[f];
  }
}

template <class T>
void sum_rows_into(const BasicTensor<T>& g, BasicTensor<T>& db) {
  const std::size_t width = db.size();
  const T* p = g.data();
  T* pd = db.data();
  const std::size_t rows = g.size() / width;
  for (std::size_t r = 0; r < rows; ++r, p += width) {
    for (std::size_t f = 0; f < width; ++f) pd[f] += p[f];
  }
}

struct Geometry {
  std::size_t out_len;
  std::ptrdiff_t pad;
};

Geometry geometry(std::size_t length, std::size_t kernel, std::size_t stride, Padding padding) {
  return {conv_output_length(length, kernel, stride, padding),
          static_cast<std::ptrdiff_t>(conv_pad_before(length, kernel, stride, padding))};
}

// Batched kernels shared by the functional forms and the layers.

template <class T>
BasicTensor<T> conv_kernel(const BasicTensor<T>& x, const BasicTensor<T>& w,
                           const BasicTensor<T>& b, std::size_t stride, Padding padding) {
  const auto v = seq_view(x, "conv1d");
  if (w.rank() != 3 || w.dim(1) != v.channels || b.rank() != 1 || b.dim(0) != w.dim(2)) {
    throw DimensionError("conv1d: input " + shape_string(x.shape()) + " kernel " +
                         shape_string(w.shape()) + " bias " + shape_string(b.shape()) +
                         " are inconsistent");
  }
  const std::size_t k = w.dim(0), m_ch = v.channels, f_ch = w.dim(2);
  const auto g = geometry(v.length, k, stride, padding);
  BasicTensor<T> out(seq_shape(v, g.out_len, f_ch));
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  const auto len = static_cast<std::ptrdiff_t>(v.length);
  for (std::size_t bi = 0; bi < v.batch; ++bi) {
    for (std::size_t i = 0; i < g.out_len; ++i) {
      T* o = po + (bi * g.out_len + i) * f_ch;
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * stride) - g.pad;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t t = start + static_cast<std::ptrdiff_t>(j);
        if (t < 0 || t >= len) continue;
        const T* xr = px + (bi * v.length + static_cast<std::size_t>(t)) * m_ch;
        const T* wj = pw + j * m_ch * f_ch;
        for (std::size_t m = 0; m < m_ch; ++m) {
          const T xv = xr[m];
          if (xv == T{0}) continue;
          const T* wr = wj + m * f_ch;
          for (std::size_t f = 0; f < f_ch; ++f) o[f] += xv * wr[f];
        }
      }
    }
  }
  add_bias_rows(out, b);
  return out;
}

template <class T>
BasicTensor<T> conv_kernel_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                    const BasicTensor<T>& grad, std::size_t stride,
                                    Padding padding, BasicTensor<T>& dw, BasicTensor<T>& db) {
  const auto v = seq_view(x, "conv1d backward");
  const std::size_t k = w.dim(0), m_ch = v.channels, f_ch = w.dim(2);
  const auto g = geometry(v.length, k, stride, padding);
  BasicTensor<T> dx(x.shape());
  const T* px = x.data();
  const T* pw = w.data();
  const T* pg = grad.data();
  T* pdx = dx.data();
  T* pdw = dw.data();
  const auto len = static_cast<std::ptrdiff_t>(v.length);
  for (std::size_t bi = 0; bi < v.batch; ++bi) {
    for (std::size_t i = 0; i < g.out_len; ++i) {
      const T* gi = pg + (bi * g.out_len + i) * f_ch;
      const std::ptrdiff_t start = static_cast<std::ptrdiff_t>(i * stride) - g.pad;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t t = start + static_cast<std::ptrdiff_t>(j);
        if (t < 0 || t >= len) continue;
        const std::size_t row = (bi * v.length + static_cast<std::size_t>(t)) * m_ch;
        const T* xr = px + row;
        T* dxr = pdx + row;
        const T* wj = pw + j * m_ch * f_ch;
        T* dwj = pdw + j * m_ch * f_ch;
        for (std::size_t m = 0; m < m_ch; ++m) {
          const T xv = xr[m];
          const T* wr = wj + m * f_ch;
          T* dwr = dwj + m * f_ch;
          T acc{0};
          for (std::size_t f = 0; f < f_ch; ++f) {
            dwr[f] += xv * gi[f];
            acc += wr[f] * gi[f];
          }
          dxr[m] += acc;
        }
      }
    }
  }
  sum_rows_into(grad, db);
  return dx;
}

// Depthwise kernels work one channel at a time on a zero-padded copy split
// into `stride` phases, so every inner loop is a contiguous run over time.

struct Phases {
  std::size_t stride, length, pad, span;

  Phases(const Geometry& g, std::size_t kernel, std::size_t stride_)
      : stride(stride_),
        length(g.out_len + (kernel - 1) / stride_),
        pad(static_cast<std::size_t>(g.pad)),
        span((g.out_len - 1) * stride_ + kernel) {}
  // Offset of padded position tp within the phase buffer.
  std::size_t at(std::size_t tp) const { return (tp % stride) * length + tp / stride; }
  // Start of the run read by tap j.
  std::size_t tap(std::size_t j) const { return (j % stride) * length + j / stride; }
};

template <class T>
void load_phases(const Phases& ph, const T* xb, std::size_t len, std::size_t m_ch, std::size_t m,
                 std::vector<T>& buf) {
  std::fill(buf.begin(), buf.end(), T{0});
  for (std::size_t t = 0; t < len && t + ph.pad < ph.span; ++t) buf[ph.at(t + ph.pad)] = xb[t * m_ch + m];
}

template <class T>
BasicTensor<T> depthwise_kernel(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                std::size_t stride, Padding padding) {
  const auto v = seq_view(x, "depthwise conv1d");
  if (w.rank() != 2 || w.dim(1) != v.channels) {
    throw DimensionError("depthwise conv1d: input " + shape_string(x.shape()) + " has " +
                         std::to_string(v.channels) + " channels but kernel is " +
                         shape_string(w.shape()));
  }
  const std::size_t k = w.dim(0), m_ch = v.channels;
  const auto g = geometry(v.length, k, stride, padding);
  const Phases ph(g, k, stride);
  BasicTensor<T> out(seq_shape(v, g.out_len, m_ch));
  std::vector<T> buf(stride * ph.length), acc(g.out_len);
  const T* px = x.data();
  const T* pw = w.data();
  T* po = out.data();
  for (std::size_t bi = 0; bi < v.batch; ++bi) {
    const T* xb = px + bi * v.length * m_ch;
    T* ob = po + bi * g.out_len * m_ch;
    for (std::size_t m = 0; m < m_ch; ++m) {
      load_phases(ph, xb, v.length, m_ch, m, buf);
      std::fill(acc.begin(), acc.end(), T{0});
      for (std::size_t j = 0; j < k; ++j) {
        const T wj = pw[j * m_ch + m];
        const T* src = buf.data() + ph.tap(j);
        for (std::size_t i = 0; i < g.out_len; ++i) acc[i] += src[i] * wj;
      }
      for (std::size_t i = 0; i < g.out_len; ++i) ob[i * m_ch + m] = acc[i];
    }
  }
  return out;
}

// Dot product with eight fixed partial sums; the order is the same on every run.
template <class T>
T blocked_dot(const T* a, const T* b, std::size_t n) {
  T lanes[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    for (std::size_t l = 0; l < 8; ++l) lanes[l] += a[i + l] * b[i + l];
  }
  for (std::size_t l = 0; i < n; ++i, ++l) lanes[l] += a[i] * b[i];
  return ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3])) + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]));
}

template <class T>
BasicTensor<T> depthwise_kernel_backward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                                         const BasicTensor<T>& grad, std::size_t stride,
                                         Padding padding, BasicTensor<T>& dw) {
  const auto v = seq_view(x, "depthwise conv1d backward");
  const std::size_t k = w.dim(0), m_ch = v.channels;
  const auto g = geometry(v.length, k, stride, padding);
  const Phases ph(g, k, stride);
  BasicTensor<T> dx(x.shape());
  std::vector<T> buf(stride * ph.length), dbuf(stride * ph.length), gcol(g.out_len);
  const T* px = x.data();
  const T* pw = w.data();
  const T* pg = grad.data();
  T* pdx = dx.data();
  T* pdw = dw.data();
  for (std::size_t bi = 0; bi < v.batch; ++bi) {
    const T* xb = px + bi * v.length * m_ch;
    const T* gb = pg + bi * g.out_len * m_ch;
    T* dxb = pdx + bi * v.length * m_ch;
    for (std::size_t m = 0; m < m_ch; ++m) {
      load_phases(ph, xb, v.length, m_ch, m, buf);
      std::fill(dbuf.begin(), dbuf.end(), T{0});
      for (std::size_t i = 0; i < g.out_len; ++i) gcol[i] = gb[i * m_ch + m];
      for (std::size_t j = 0; j < k; ++j) {
        const T wj = pw[j * m_ch + m];
        pdw[j * m_ch + m] += blocked_dot(buf.data() + ph.tap(j), gcol.data(), g.out_len);
        T* dst = dbuf.data() + ph.tap(j);
        for (std::size_t i = 0; i < g.out_len; ++i) dst[i] += wj * gcol[i];
      }
      for (std::size_t t = 0; t < v.length && t + ph.pad < ph.span; ++t) {
        dxb[t * m_ch + m] = dbuf[ph.at(t + ph.pad)];
      }
    }
  }
  return dx;
}

template <class T>
BasicTensor<T> as_rows(const BasicTensor<T>& x, std::size_t width, const char* what) {
  if (x.rank() < 1 || x.shape().back() != width) {
    throw DimensionError(std::string(what) + ": input " + shape_string(x.shape()) +
                         " does not end in " + std::to_string(width));
  }
  return x.reshaped({x.size() / width, width});
}

}  // namespace

// --- functional forms -----------------------------------------------------

template <class T>
BasicTensor<T> conv1d_forward(const BasicTensor<T>& x, const ConvSpec& spec,
                              const BasicTensor<T>& w, const BasicTensor<T>& b) {
  spec.validate();
  if (w.shape() != Shape{spec.kernel, spec.in_channels, spec.filters}) {
    throw DimensionError("conv1d: kernel " + shape_string(w.shape()) + " does not match spec " +
                         shape_string({spec.kernel, spec.in_channels, spec.filters}));
  }
  return conv_kernel(x, w, b, spec.stride, spec.padding);
}

template <class T>
BasicTensor<T> depthwise_conv1d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_d,
                                        std::size_t stride, Padding padding) {
  return depthwise_kernel(x, w_d, stride, padding);
}

template <class T>
BasicTensor<T> pointwise_conv1d_forward(const BasicTensor<T>& x, const BasicTensor<T>& w_p,
                                        const BasicTensor<T>& b) {
  if (w_p.rank() != 2 || b.rank() != 1 || b.dim(0) != w_p.dim(1)) {
    throw DimensionError("pointwise conv1d: weight " + shape_string(w_p.shape()) + " and bias " +
                         shape_string(b.shape()) + " disagree");
  }
  if (x.rank() != 2 && x.rank() != 3) {
    throw DimensionError("pointwise conv1d expects [L x M] or [B x L x M], got " +
                         shape_string(x.shape()));
  }
  auto out = matmul(as_rows(x, w_p.dim(0), "pointwise conv1d"), w_p);
  add_bias_rows(out, b);
  Shape shape = x.shape();
  shape.back() = w_p.dim(1);
  return std::move(out).reshaped(std::move(shape));
}

template <class T>
BasicTensor<T> dps_conv1d_forward(const BasicTensor<T>& x, const ConvSpec& spec,
                                  const BasicTensor<T>& w_d, const BasicTensor<T>& w_p,
                                  const BasicTensor<T>& b) {
  return pointwise_conv1d_forward(depthwise_conv1d_forward(x, w_d, spec.stride, spec.padding), w_p,
                                  b);
}

template <class T>
BasicTensor<T> dense_forward(const BasicTensor<T>& x, const BasicTensor<T>& w,
                             const BasicTensor<T>& b) {
  if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(0) ||
      b.dim(0) != w.dim(1)) {
    throw DimensionError("dense: input " + shape_string(x.shape()) + " weight " +
                         shape_string(w.shape()) + " bias " + shape_string(b.shape()) +
                         " are inconsistent");
  }
  auto out = matmul(x, w);
  add_bias_rows(out, b);
  return out;
}

template <class T>
BasicTensor<T> relu(const BasicTensor<T>& x) {
  BasicTensor<T> out = x;
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return out;
}

template <class T>
T sigmoid_scalar(T x) {
  if (x >= T{0}) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

template <class T>
BasicTensor<T> sigmoid(const BasicTensor<T>& x) {
  BasicTensor<T> out = x;
  for (auto& v : out.values()) v = sigmoid_scalar(v);
  return out;
}

namespace {

void check_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw std::invalid_argument("dropout rate must be in [0, 1), got " + std::to_string(rate));
  }
}

template <class T>
BasicTensor<T> dropout_scale(const Shape& shape, double rate, Rng& rng) {
  BasicTensor<T> scale(shape);
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& s : scale.values()) s = rng.uniform() < rate ? T{0} : keep;
  return scale;
}

template <class T>
SeqView pool_view(const BasicTensor<T>& x, const char* what) {
  return seq_view(x, what);
}

Shape pooled_shape(const SeqView& v) {
  if (v.batched) return {v.batch, v.channels};
  return {v.channels};
}

}  // namespace

template <class T>
BasicTensor<T> dropout(const BasicTensor<T>& x, double rate, Mode mode, Rng& rng) {
  check_rate(rate);
  if (mode == Mode::kInfer || rate == 0.0) return x;
  const auto scale = dropout_scale<T>(x.shape(), rate, rng);
  BasicTensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale[i];
  return out;
}

template <class T>
BasicTensor<T> global_max_pool(const BasicTensor<T>& x) {
  const auto v = pool_view(x, "global max pool");
  if (v.length == 0) throw DimensionError("global max pool over an empty time axis");
  BasicTensor<T> out(pooled_shape(v));
  for (std::size_t b = 0; b < v.batch; ++b) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      T best = x[(b * v.length) * v.channels + c];
      for (std::size_t t = 1; t < v.length; ++t) {
        best = std::max(best, x[(b * v.length + t) * v.channels + c]);
      }
      out[b * v.channels + c] = best;
    }
  }
  return out;
}

template <class T>
BasicTensor<T> global_avg_pool(const BasicTensor<T>& x) {
  const auto v = pool_view(x, "global average pool");
  if (v.length == 0) throw DimensionError("global average pool over an empty time axis");
  BasicTensor<T> out(pooled_shape(v));
  for (std::size_t b = 0; b < v.batch; ++b) {
    T* o = out.data() + b * v.channels;
    for (std::size_t t = 0; t < v.length; ++t) {
      const T* row = x.data() + (b * v.length + t) * v.channels;
      for (std::size_t c = 0; c < v.channels; ++c) o[c] += row[c];
    }
    for (std::size_t c = 0; c < v.channels; ++c) o[c] /= static_cast<T>(v.length);
  }
  return out;
}

template <class T>
BasicTensor<T> concat(std::span<const BasicTensor<T>> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw DimensionError("concat axis out of range");
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t d = 0; d < first.size(); ++d) {
      if (d != axis && p.dim(d) != first[d]) {
        throw DimensionError("concat: " + shape_string(p.shape()) + " vs " +
                             shape_string(first) + " disagree off-axis");
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  BasicTensor<T> out(out_shape);
  const std::size_t out_stride = out_shape[axis] * inner;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t chunk = p.dim(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data() + o * chunk, chunk, out.data() + o * out_stride + offset);
    }
    offset += chunk;
  }
  return out;
}

template <class T>
std::vector<BasicTensor<T>> split(const BasicTensor<T>& x, std::size_t axis,
                                  std::span<const std::size_t> widths) {
  if (axis >= x.rank()) throw DimensionError("split axis out of range");
  std::size_t total = 0;
  for (auto w : widths) total += w;
  if (total != x.dim(axis)) {
    throw DimensionError("split widths sum to " + std::to_string(total) + " but axis has " +
                         std::to_string(x.dim(axis)));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= x.dim(d);
  for (std::size_t d = axis + 1; d < x.rank(); ++d) inner *= x.dim(d);
  const std::size_t in_stride = x.dim(axis) * inner;
  std::vector<BasicTensor<T>> parts;
  std::size_t offset = 0;
  for (auto w : widths) {
    Shape s = x.shape();
    s[axis] = w;
    BasicTensor<T> part(s);
    const std::size_t chunk = w * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(x.data() + o * in_stride + offset, chunk, part.data() + o * chunk);
    }
    offset += chunk;
    parts.push_back(std::move(part));
  }
  return parts;
}

template <class T>
BasicTensor<T> flatten(const BasicTensor<T>& x) {
  return x.reshaped({1, x.size()});
}

// --- layers ---------------------------------------------------------------

template <class T>
void Layer<T>::require_cache(const BasicTensor<T>& upstream, const Shape& out_shape) const {
  if (!cached_) throw std::logic_error("layer '" + name_ + "': backward called without forward");
  if (upstream.shape() != out_shape) {
    throw DimensionError("layer '" + name_ + "': upstream gradient " +
                         shape_string(upstream.shape()) + " does not match output " +
                         shape_string(out_shape));
  }
}

template <class T>
Conv1D<T>::Conv1D(std::string name, ConvSpec spec, Rng& rng)
    : Layer<T>(std::move(name)), spec_(spec) {
  spec_.kind = ConvKind::kStandard;
  spec_.validate();
  const std::size_t k = spec_.kernel, m = spec_.in_channels, f = spec_.filters;
  kernel_ = {this->name_ + ".kernel", ParamRole::kConvKernel,
             xavier_uniform<T>({k, m, f}, k * m, k * f, rng), {}};
  bias_ = {this->name_ + ".bias", ParamRole::kBias, BasicTensor<T>({f}), {}};
  kernel_.zero_grad();
  bias_.zero_grad();
}

template <class T>
BasicTensor<T> Conv1D<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  auto out = conv_kernel(x, kernel_.value, bias_.value, spec_.stride, spec_.padding);
  input_ = x;
  out_shape_ = out.shape();
  this->cached_ = true;
  return out;
}

template <class T>
BasicTensor<T> Conv1D<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, out_shape_);
  this->cached_ = false;
  return conv_kernel_backward(input_, kernel_.value, upstream, spec_.stride, spec_.padding,
                              kernel_.grad, bias_.grad);
}

template <class T>
DepthwiseConv1D<T>::DepthwiseConv1D(std::string name, ConvSpec spec, Rng& rng)
    : Layer<T>(std::move(name)), spec_(spec) {
  spec_.kind = ConvKind::kDepthwise;
  spec_.filters = spec_.in_channels;
  spec_.validate();
  const std::size_t k = spec_.kernel, m = spec_.in_channels;
  kernel_ = {this->name_ + ".kernel", ParamRole::kDepthwiseKernel,
             xavier_uniform<T>({k, m}, k * m, k, rng), {}};
  kernel_.zero_grad();
}

template <class T>
BasicTensor<T> DepthwiseConv1D<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  auto out = depthwise_kernel(x, kernel_.value, spec_.stride, spec_.padding);
  input_ = x;
  out_shape_ = out.shape();
  this->cached_ = true;
  return out;
}

template <class T>
BasicTensor<T> DepthwiseConv1D<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, out_shape_);
  this->cached_ = false;
  return depthwise_kernel_backward(input_, kernel_.value, upstream, spec_.stride, spec_.padding,
                                   kernel_.grad);
}

template <class T>
PointwiseConv1D<T>::PointwiseConv1D(std::string name, std::size_t in_channels,
                                    std::size_t filters, Rng& rng)
    : Layer<T>(std::move(name)) {
  weight_ = {this->name_ + ".weight", ParamRole::kPointwiseWeight,
             xavier_init<T>(in_channels, filters, rng), {}};
  bias_ = {this->name_ + ".bias", ParamRole::kBias, BasicTensor<T>({filters}), {}};
  weight_.zero_grad();
  bias_.zero_grad();
}

template <class T>
BasicTensor<T> PointwiseConv1D<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  auto out = pointwise_conv1d_forward(x, weight_.value, bias_.value);
  input_ = x;
  out_shape_ = out.shape();
  this->cached_ = true;
  return out;
}

template <class T>
BasicTensor<T> PointwiseConv1D<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, out_shape_);
  this->cached_ = false;
  const std::size_t m = weight_.value.dim(0), f = weight_.value.dim(1);
  const auto x_rows = input_.reshaped({input_.size() / m, m});
  const auto g_rows = upstream.reshaped({upstream.size() / f, f});
  const auto dw = matmul_tn(x_rows, g_rows);
  for (std::size_t i = 0; i < dw.size(); ++i) weight_.grad[i] += dw[i];
  sum_rows_into(g_rows, bias_.grad);
  return matmul_nt(g_rows, weight_.value).reshaped(input_.shape());
}

template <class T>
DpsConv1D<T>::DpsConv1D(std::string name, ConvSpec spec, Rng& rng)
    : Layer<T>(name),
      depthwise_(name + ".depthwise", spec, rng),
      pointwise_(name + ".pointwise", spec.in_channels, spec.filters, rng) {}

template <class T>
BasicTensor<T> DpsConv1D<T>::forward(const BasicTensor<T>& x, Mode mode, Rng& rng) {
  return pointwise_.forward(depthwise_.forward(x, mode, rng), mode, rng);
}

template <class T>
BasicTensor<T> DpsConv1D<T>::backward(const BasicTensor<T>& upstream) {
  return depthwise_.backward(pointwise_.backward(upstream));
}

template <class T>
std::vector<Parameter<T>*> DpsConv1D<T>::parameters() {
  auto ps = depthwise_.parameters();
  for (auto* p : pointwise_.parameters()) ps.push_back(p);
  return ps;
}

template <class T>
Dense<T>::Dense(std::string name, std::size_t in, std::size_t out, Rng& rng)
    : Layer<T>(std::move(name)) {
  weight_ = {this->name_ + ".weight", ParamRole::kDenseWeight, xavier_init<T>(in, out, rng), {}};
  bias_ = {this->name_ + ".bias", ParamRole::kBias, BasicTensor<T>({out}), {}};
  weight_.zero_grad();
  bias_.zero_grad();
}

template <class T>
BasicTensor<T> Dense<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  auto out = dense_forward(x, weight_.value, bias_.value);
  input_ = x;
  this->cached_ = true;
  return out;
}

template <class T>
BasicTensor<T> Dense<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, {input_.dim(0), weight_.value.dim(1)});
  this->cached_ = false;
  const auto dw = matmul_tn(input_, upstream);
  for (std::size_t i = 0; i < dw.size(); ++i) weight_.grad[i] += dw[i];
  sum_rows_into(upstream, bias_.grad);
  return matmul_nt(upstream, weight_.value);
}

template <class T>
BasicTensor<T> Relu<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  input_ = x;
  this->cached_ = true;
  return relu(x);
}

template <class T>
BasicTensor<T> Relu<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, input_.shape());
  this->cached_ = false;
  BasicTensor<T> dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) {
    if (!(input_[i] > T{0})) dx[i] = T{0};
  }
  return dx;
}

template <class T>
void Relu<T>::signature(std::uint64_t& h) const {
  std::uint64_t word = 0;
  std::size_t bits = 0;
  for (auto v : input_.values()) {
    const std::uint64_t state = v > T{0} ? 2 : (v < T{0} ? 0 : 1);
    word = (word << 2) | state;
    if (++bits == 32) {
      h = hash_combine(h, word);
      word = 0;
      bits = 0;
    }
  }
  h = hash_combine(h, word);
}

template <class T>
BasicTensor<T> Sigmoid<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  output_ = sigmoid(x);
  this->cached_ = true;
  return output_;
}

template <class T>
BasicTensor<T> Sigmoid<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, output_.shape());
  this->cached_ = false;
  BasicTensor<T> dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= output_[i] * (T{1} - output_[i]);
  return dx;
}

template <class T>
Dropout<T>::Dropout(std::string name, double rate) : Layer<T>(std::move(name)), rate_(rate) {
  check_rate(rate);
}

template <class T>
void Dropout<T>::set_rate(double rate) {
  check_rate(rate);
  rate_ = rate;
}

template <class T>
BasicTensor<T> Dropout<T>::forward(const BasicTensor<T>& x, Mode mode, Rng& rng) {
  out_shape_ = x.shape();
  this->cached_ = true;
  if (mode == Mode::kInfer || rate_ == 0.0) {
    scale_ = {};
    return x;
  }
  scale_ = dropout_scale<T>(x.shape(), rate_, rng);
  BasicTensor<T> out = x;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale_[i];
  return out;
}

template <class T>
BasicTensor<T> Dropout<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, out_shape_);
  this->cached_ = false;
  if (scale_.empty()) return upstream;
  BasicTensor<T> dx = upstream;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= scale_[i];
  return dx;
}

template <class T>
BasicTensor<T> GlobalMaxPool<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  const auto v = pool_view(x, "global max pool");
  if (v.length == 0) throw DimensionError("global max pool over an empty time axis");
  in_shape_ = x.shape();
  argmax_.assign(v.batch * v.channels, 0);
  BasicTensor<T> out(pooled_shape(v));
  for (std::size_t b = 0; b < v.batch; ++b) {
    for (std::size_t c = 0; c < v.channels; ++c) {
      std::size_t best_t = 0;
      T best = x[(b * v.length) * v.channels + c];
      for (std::size_t t = 1; t < v.length; ++t) {
        const T val = x[(b * v.length + t) * v.channels + c];
        if (val > best) {
          best = val;
          best_t = t;
        }
      }
      out[b * v.channels + c] = best;
      argmax_[b * v.channels + c] = best_t;
    }
  }
  this->cached_ = true;
  return out;
}

template <class T>
BasicTensor<T> GlobalMaxPool<T>::backward(const BasicTensor<T>& upstream) {
  const bool batched = in_shape_.size() == 3;
  const std::size_t batch = batched ? in_shape_[0] : 1;
  const std::size_t length = in_shape_[batched ? 1 : 0];
  const std::size_t channels = in_shape_.back();
  this->require_cache(upstream, batched ? Shape{batch, channels} : Shape{channels});
  this->cached_ = false;
  BasicTensor<T> dx(in_shape_);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t t = argmax_[b * channels + c];
      dx[(b * length + t) * channels + c] += upstream[b * channels + c];
    }
  }
  return dx;
}

template <class T>
void GlobalMaxPool<T>::signature(std::uint64_t& h) const {
  for (auto a : argmax_) h = hash_combine(h, a);
}

template <class T>
BasicTensor<T> GlobalAvgPool<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  in_shape_ = x.shape();
  this->cached_ = true;
  return global_avg_pool(x);
}

template <class T>
BasicTensor<T> GlobalAvgPool<T>::backward(const BasicTensor<T>& upstream) {
  const bool batched = in_shape_.size() == 3;
  const std::size_t batch = batched ? in_shape_[0] : 1;
  const std::size_t length = in_shape_[batched ? 1 : 0];
  const std::size_t channels = in_shape_.back();
  this->require_cache(upstream, batched ? Shape{batch, channels} : Shape{channels});
  this->cached_ = false;
  BasicTensor<T> dx(in_shape_);
  const T inv = T{1} / static_cast<T>(length);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t < length; ++t) {
      T* row = dx.data() + (b * length + t) * channels;
      for (std::size_t c = 0; c < channels; ++c) row[c] = upstream[b * channels + c] * inv;
    }
  }
  return dx;
}

template <class T>
BasicTensor<T> Flatten<T>::forward(const BasicTensor<T>& x, Mode, Rng&) {
  if (x.rank() < 1) throw DimensionError("flatten of a rank-0 tensor");
  in_shape_ = x.shape();
  this->cached_ = true;
  return x.reshaped({x.dim(0), x.size() / x.dim(0)});
}

template <class T>
BasicTensor<T> Flatten<T>::backward(const BasicTensor<T>& upstream) {
  this->require_cache(upstream, {in_shape_[0], shape_size(in_shape_) / in_shape_[0]});
  this->cached_ = false;
  return upstream.reshaped(in_shape_);
}

template <class T>
LayerPtr<T> make_conv_layer(std::string name, const ConvSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case ConvKind::kStandard: return std::make_unique<Conv1D<T>>(std::move(name), spec, rng);
    case ConvKind::kDepthwiseSeparable:
      return std::make_unique<DpsConv1D<T>>(std::move(name), spec, rng);
    case ConvKind::kDepthwise:
      return std::make_unique<DepthwiseConv1D<T>>(std::move(name), spec, rng);
    case ConvKind::kPointwise:
      return std::make_unique<PointwiseConv1D<T>>(std::move(name), spec.in_channels, spec.filters,
                                                  rng);
  }
  throw std::invalid_argument("unknown conv kind");
}

// --- gradcheck ------------------------------------------------------------

GradcheckReport gradcheck(std::span<Parameter<double>* const> params,
                          const std::function<Probe()>& evaluate, Rng& rng,
                          const GradcheckOptions& options) {
  GradcheckReport report;
  for (auto* p : params) report.params.push_back({p->name, 0, 0.0});
  std::vector<std::size_t> live;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->value.size() > 0) live.push_back(i);
  }
  if (live.empty()) {
    report.passed = true;
    return report;
  }
  const Probe base = evaluate();
  if (!std::isfinite(base.loss)) throw NumericError("gradcheck: non-finite loss at base point");

  const std::size_t max_attempts = options.samples * options.attempt_factor;
  std::size_t attempts = 0;
  while (report.checked < options.samples && attempts < max_attempts) {
    const std::size_t pi = live[attempts % live.size()];
    ++attempts;
    auto& param = *params[pi];
    const std::size_t idx = rng.below(param.value.size());
    const double saved = param.value[idx];
    param.value[idx] = saved + options.step;
    const Probe plus = evaluate();
    param.value[idx] = saved - options.step;
    const Probe minus = evaluate();
    param.value[idx] = saved;
    if (!std::isfinite(plus.loss) || !std::isfinite(minus.loss)) {
      throw NumericError("gradcheck: non-finite loss probing " + param.name);
    }
    if (plus.signature != base.signature || minus.signature != base.signature) {
      ++report.excluded;
      continue;
    }
    double diff = plus.loss - minus.loss;
    if (!plus.terms.empty()) {
      if (plus.terms.size() != minus.terms.size()) {
        throw std::logic_error("gradcheck: probes returned different term counts");
      }
      diff = 0.0;
      for (std::size_t k = 0; k < plus.terms.size(); ++k) diff += plus.terms[k] - minus.terms[k];
    }
    const double numeric = diff / (2.0 * options.step);
    const double analytic = param.grad[idx];
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    auto& pc = report.params[pi];
    ++pc.checked;
    pc.max_rel_err = std::max(pc.max_rel_err, rel);
    report.max_rel_err = std::max(report.max_rel_err, rel);
    ++report.checked;
  }
  report.passed = report.checked > 0 && report.max_rel_err < options.tolerance;
  return report;
}

GradcheckReport gradcheck_layer(Layer<double>& layer, const Tensor64& input, Rng& rng,
                                const GradcheckOptions& options) {
  Parameter<double> x{"input", ParamRole::kBias, input, {}};
  const std::uint64_t mask_seed = rng.next_u64();

  auto run_forward = [&](std::uint64_t& sig) {
    Rng mask_rng(mask_seed);
    auto out = layer.forward(x.value, Mode::kTrain, mask_rng);
    sig = 0;
    layer.signature(sig);
    return out;
  };

  std::uint64_t sig = 0;
  const auto out = run_forward(sig);
  Tensor64 projection(out.shape());
  Rng proj_rng(mask_seed ^ 0xA5A5A5A5ULL);
  for (auto& v : projection.values()) v = proj_rng.uniform(-1.0, 1.0);

  for (auto* p : layer.parameters()) p->zero_grad();
  x.grad = layer.backward(projection);

  std::vector<Parameter<double>*> params = layer.parameters();
  params.push_back(&x);
  return gradcheck(
      params,
      [&] {
        Probe probe;
        const auto o = run_forward(probe.signature);
        probe.terms.resize(o.size());
        for (std::size_t i = 0; i < o.size(); ++i) {
          probe.terms[i] = o[i] * projection[i];
          probe.loss += probe.terms[i];
        }
        return probe;
      },
      rng, options);
}

#define MSTC_INSTANTIATE(T)                                                                       \
  template BasicTensor<T> conv1d_forward<T>(const BasicTensor<T>&, const ConvSpec&,              \
                                            const BasicTensor<T>&, const BasicTensor<T>&);       \
  template BasicTensor<T> depthwise_conv1d_forward<T>(const BasicTensor<T>&,                     \
                                                      const BasicTensor<T>&, std::size_t,        \
                                                      Padding);                                  \
  template BasicTensor<T> pointwise_conv1d_forward<T>(                                           \
      const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> dps_conv1d_forward<T>(const BasicTensor<T>&, const ConvSpec&,          \
                                                const BasicTensor<T>&, const BasicTensor<T>&,    \
                                                const BasicTensor<T>&);                          \
  template BasicTensor<T> dense_forward<T>(const BasicTensor<T>&, const BasicTensor<T>&,         \
                                           const BasicTensor<T>&);                               \
  template BasicTensor<T> relu<T>(const BasicTensor<T>&);                                        \
  template BasicTensor<T> sigmoid<T>(const BasicTensor<T>&);                                     \
  template T sigmoid_scalar<T>(T);                                                               \
  template BasicTensor<T> dropout<T>(const BasicTensor<T>&, double, Mode, Rng&);                 \
  template BasicTensor<T> global_max_pool<T>(const BasicTensor<T>&);                             \
  template BasicTensor<T> global_avg_pool<T>(const BasicTensor<T>&);                             \
  template BasicTensor<T> concat<T>(std::span<const BasicTensor<T>>, std::size_t);               \
  template std::vector<BasicTensor<T>> split<T>(const BasicTensor<T>&, std::size_t,              \
                                                std::span<const std::size_t>);                   \
  template BasicTensor<T> flatten<T>(const BasicTensor<T>&);                                     \
  template class Layer<T>;                                                                       \
  template class Conv1D<T>;                                                                      \
  template class DepthwiseConv1D<T>;                                                             \
  template class PointwiseConv1D<T>;                                                             \
  template class DpsConv1D<T>;                                                                   \
  template class Dense<T>;                                                                       \
  template class Relu<T>;                                                                        \
  template class Sigmoid<T>;                                                                     \
  template class Dropout<T>;                                                                     \
  template class GlobalMaxPool<T>;                                                               \
  template class GlobalAvgPool<T>;                                                               \
  template class Flatten<T>;                                                                     \
  template LayerPtr<T> make_conv_layer<T>(std::string, const ConvSpec&, Rng&);

MSTC_INSTANTIATE(float)
MSTC_INSTANTIATE(double)

#undef MSTC_INSTANTIATE

}  // namespace mstc
