#pragma once

// Core dense-tensor operators. Every op is a pure function of its inputs and
// runs single-threaded with a fixed accumulation order, so repeated calls are
// bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vajra/error.hpp"
#include "vajra/tensor.hpp"

namespace vajra {

// ---------------------------------------------------------------------------
// Multiply-accumulate instrumentation

namespace detail {
inline std::uint64_t& mac_tally() noexcept {
  thread_local std::uint64_t tally = 0;
  return tally;
}
}  // namespace detail

/// Counts the multiply-accumulates executed by conv2d and matmul_batched on
/// the current thread while the probe is alive. Probes nest: an outer probe
/// also sees what inner probes counted.
class MacProbe {
 public:
  MacProbe() noexcept : saved_(detail::mac_tally()) { detail::mac_tally() = 0; }
  ~MacProbe() { detail::mac_tally() += saved_; }
  MacProbe(const MacProbe&) = delete;
  MacProbe& operator=(const MacProbe&) = delete;

  std::uint64_t count() const noexcept { return detail::mac_tally(); }

 private:
  std::uint64_t saved_;
};

// ---------------------------------------------------------------------------
// Convolution

struct ConvSpec {
  int c_in = 0;
  int c_out = 0;
  int k = 1;
  int stride = 1;
  int padding = 0;
  int groups = 1;
  bool has_bias = false;

  Shape4 weight_shape() const { return {c_out, c_in / groups, k, k}; }

  /// Throws ShapeError when the spec itself is inconsistent.
  void validate() const {
    if (c_in < 1 || c_out < 1) throw ShapeError("conv channels must be >= 1");
    if (k < 1) throw ShapeError("conv kernel must be >= 1");
    if (stride < 1) throw ShapeError("conv stride must be >= 1");
    if (padding < 0) throw ShapeError("conv padding must be >= 0");
    if (groups < 1 || c_in % groups != 0 || c_out % groups != 0) {
      throw ShapeError("conv groups " + std::to_string(groups) + " must divide c_in " +
                       std::to_string(c_in) + " and c_out " + std::to_string(c_out));
    }
  }

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// p = k/2, the padding that keeps spatial dims at stride 1 for odd k.
constexpr int same_padding(int k) noexcept { return k / 2; }

/// Output extent of a sliding window; throws when the window does not fit.
inline int window_out_extent(int in, int k, int stride, int padding, std::string_view what) {
  if (in + 2 * padding < k) {
    throw ShapeError(std::string(what) + ": kernel " + std::to_string(k) +
                     " larger than padded input " + std::to_string(in + 2 * padding));
  }
  return (in + 2 * padding - k) / stride + 1;
}

inline Shape4 conv_output_shape(const Shape4& in, const ConvSpec& spec) {
  spec.validate();
  if (in.c != spec.c_in) {
    throw ShapeError("conv expects " + std::to_string(spec.c_in) + " input channels, got " +
                     std::to_string(in.c));
  }
  return {in.n, spec.c_out, window_out_extent(in.h, spec.k, spec.stride, spec.padding, "conv2d"),
          window_out_extent(in.w, spec.k, spec.stride, spec.padding, "conv2d")};
}

/// Grouped 2-D convolution with zero padding.
///
/// The count reported to MacProbe is the full logical window, padded taps
/// included: h_out * w_out * k * k * (c_in / groups) * c_out per image.
inline Tensor4 conv2d(const Tensor4& x, const ConvSpec& spec, const Tensor4& weights,
                      std::span<const float> bias = {}) {
  const Shape4 os = conv_output_shape(x.shape(), spec);
  if (weights.shape() != spec.weight_shape()) {
    throw ShapeError("conv weights " + weights.shape().str() + " do not match spec " +
                     spec.weight_shape().str());
  }
  if (spec.has_bias && bias.size() != static_cast<std::size_t>(spec.c_out)) {
    throw ShapeError("conv bias needs " + std::to_string(spec.c_out) + " values, got " +
                     std::to_string(bias.size()));
  }
  if (!spec.has_bias && !bias.empty()) throw ShapeError("conv bias given but spec has no bias");

  Tensor4 out(os);
  const int cin_g = spec.c_in / spec.groups;
  const int cout_g = spec.c_out / spec.groups;
  const int k = spec.k;
  const int s = spec.stride;
  const int p = spec.padding;
  const int H = x.h();
  const int W = x.w();
  const int Ho = os.h;
  const int Wo = os.w;
  const std::uint64_t plane_macs = static_cast<std::uint64_t>(Ho) * static_cast<std::uint64_t>(Wo);
  std::uint64_t& tally = detail::mac_tally();
  const float* wdata = weights.data().data();

  for (int n = 0; n < os.n; ++n) {
    for (int oc = 0; oc < spec.c_out; ++oc) {
      const int g = oc / cout_g;
      float* o = out.plane(n, oc).data();
      const float b0 = spec.has_bias ? bias[oc] : 0.0f;
      std::fill(o, o + plane_macs, b0);
      for (int icg = 0; icg < cin_g; ++icg) {
        const float* in = x.plane(n, g * cin_g + icg).data();
        const float* wk = wdata + (static_cast<std::size_t>(oc) * cin_g + icg) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const float wv = wk[ky * k + kx];
            tally += plane_macs;
            // ox range whose input column ox*s - p + kx lies inside [0, W)
            int ox_lo = p - kx > 0 ? (p - kx + s - 1) / s : 0;
            int ox_hi = (W - 1 + p - kx) >= 0 ? (W - 1 + p - kx) / s : -1;
            ox_hi = std::min(ox_hi, Wo - 1);
            if (ox_lo > ox_hi) continue;
            for (int oy = 0; oy < Ho; ++oy) {
              const int iy = oy * s - p + ky;
              if (iy < 0 || iy >= H) continue;
              const float* irow = in + static_cast<std::size_t>(iy) * W + (kx - p);
              float* orow = o + static_cast<std::size_t>(oy) * Wo;
              if (s == 1) {
                for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox];
              } else {
                for (int ox = ox_lo; ox <= ox_hi; ++ox) orow[ox] += wv * irow[ox * s];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling

enum class PoolKind { Avg, Max };

inline Shape4 pool_output_shape(const Shape4& in, int k, int stride, int padding) {
  if (k < 1 || stride < 1 || padding < 0) throw ShapeError("pool2d: invalid window geometry");
  if (padding > k / 2) throw ShapeError("pool2d: padding must be at most k/2");
  return {in.n, in.c, window_out_extent(in.h, k, stride, padding, "pool2d"),
          window_out_extent(in.w, k, stride, padding, "pool2d")};
}

/// Average pooling divides by the full k*k window, padded taps included.
/// Max pooling ignores padded taps.
inline Tensor4 pool2d(const Tensor4& x, PoolKind kind, int k, int stride, int padding) {
  const Shape4 os = pool_output_shape(x.shape(), k, stride, padding);
  Tensor4 out(os);
  const float inv = 1.0f / static_cast<float>(k * k);
  for (int n = 0; n < os.n; ++n) {
    for (int c = 0; c < os.c; ++c) {
      auto in = x.plane(n, c);
      auto o = out.plane(n, c);
      for (int oy = 0; oy < os.h; ++oy) {
        for (int ox = 0; ox < os.w; ++ox) {
          float acc = kind == PoolKind::Max ? -std::numeric_limits<float>::infinity() : 0.0f;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const float v = in[static_cast<std::size_t>(iy) * x.w() + ix];
              if (kind == PoolKind::Max) {
                acc = std::max(acc, v);
              } else {
                acc += v;
              }
            }
          }
          o[static_cast<std::size_t>(oy) * os.w + ox] = kind == PoolKind::Max ? acc : acc * inv;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and activations

/// Inference-mode batch normalization statistics.
struct BNParams {
  std::vector<float> gamma;
  std::vector<float> beta;
  std::vector<float> mean;
  std::vector<float> var;
  float eps = 1e-3f;

  int channels() const noexcept { return static_cast<int>(gamma.size()); }

  /// gamma = 1, beta = 0, mean = 0, var = 1.
  static BNParams identity(int channels, float eps = 1e-3f) {
    return {std::vector<float>(channels, 1.0f), std::vector<float>(channels, 0.0f),
            std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f), eps};
  }

  void validate(int expected_channels) const {
    const auto c = static_cast<std::size_t>(expected_channels);
    if (gamma.size() != c || beta.size() != c || mean.size() != c || var.size() != c) {
      throw ShapeError("batchnorm statistics must have " + std::to_string(expected_channels) +
                       " entries per array");
    }
    if (!(eps >= 0.0f)) throw ShapeError("batchnorm eps must be >= 0");
    for (float v : var) {
      if (!(v >= 0.0f)) throw ShapeError("batchnorm variance must be >= 0");
    }
  }

  friend bool operator==(const BNParams&, const BNParams&) = default;
};

inline Tensor4 batchnorm_infer(const Tensor4& x, const BNParams& bn) {
  bn.validate(x.c());
  Tensor4 out = x;
  for (int c = 0; c < x.c(); ++c) {
    const float scale = bn.gamma[c] / std::sqrt(bn.var[c] + bn.eps);
    const float mean = bn.mean[c];
    const float beta = bn.beta[c];
    for (int n = 0; n < x.n(); ++n) {
      for (float& v : out.plane(n, c)) v = scale * (v - mean) + beta;
    }
  }
  return out;
}

enum class Activation { Identity, SiLU, Sigmoid };

inline std::string_view to_string(Activation a) noexcept {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::SiLU: return "silu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline float sigmoid(float t) noexcept { return 1.0f / (1.0f + std::exp(-t)); }
inline float silu(float t) noexcept { return t * sigmoid(t); }

inline void activate_inplace(Tensor4& x, Activation kind) noexcept {
  switch (kind) {
    case Activation::Identity: return;
    case Activation::SiLU:
      for (float& v : x.data()) v = silu(v);
      return;
    case Activation::Sigmoid:
      for (float& v : x.data()) v = sigmoid(v);
      return;
  }
}

inline Tensor4 activation(Tensor4 x, Activation kind) {
  activate_inplace(x, kind);
  return x;
}

// ---------------------------------------------------------------------------
// Matrix batches: a Tensor4 (n, c, rows, cols) is an n*c batch of matrices.

/// Row softmax over the last axis. Row maximum is subtracted first; the
/// normalizer is accumulated in double so each row sums to 1 to within float
/// rounding of the individual entries.
inline Tensor4 softmax_lastdim(Tensor4 m) {
  const int cols = m.w();
  auto d = m.data();
  for (std::size_t r = 0; r < d.size(); r += cols) {
    float mx = d[r];
    for (int j = 1; j < cols; ++j) mx = std::max(mx, d[r + j]);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) sum += std::exp(static_cast<double>(d[r + j]) - mx);
    for (int j = 0; j < cols; ++j) {
      d[r + j] = static_cast<float>(std::exp(static_cast<double>(d[r + j]) - mx) / sum);
    }
  }
  return m;
}

inline Tensor4 transpose_last2(const Tensor4& m) {
  Tensor4 out(m.n(), m.c(), m.w(), m.h());
  for (int n = 0; n < m.n(); ++n) {
    for (int c = 0; c < m.c(); ++c) {
      for (int i = 0; i < m.h(); ++i) {
        for (int j = 0; j < m.w(); ++j) out.at(n, c, j, i) = m.at(n, c, i, j);
      }
    }
  }
  return out;
}

/// (n, c, M, K) x (n, c, K, N) -> (n, c, M, N), accumulated in double.
/// Counts M*N*K MACs per matrix.
inline Tensor4 matmul_batched(const Tensor4& a, const Tensor4& b) {
  if (a.n() != b.n() || a.c() != b.c() || a.w() != b.h()) {
    throw ShapeError("matmul_batched: " + a.shape().str() + " x " + b.shape().str());
  }
  const int M = a.h();
  const int K = a.w();
  const int N = b.w();
  Tensor4 out(a.n(), a.c(), M, N);
  std::uint64_t& tally = detail::mac_tally();
  for (int n = 0; n < a.n(); ++n) {
    for (int c = 0; c < a.c(); ++c) {
      const float* A = a.plane(n, c).data();
      const float* B = b.plane(n, c).data();
      float* C = out.plane(n, c).data();
      for (int i = 0; i < M; ++i) {
        const float* arow = A + static_cast<std::size_t>(i) * K;
        for (int j = 0; j < N; ++j) {
          double acc = 0.0;
          for (int kk = 0; kk < K; ++kk) {
            acc += static_cast<double>(arow[kk]) * B[static_cast<std::size_t>(kk) * N + j];
          }
          C[static_cast<std::size_t>(i) * N + j] = static_cast<float>(acc);
        }
        tally += static_cast<std::uint64_t>(N) * static_cast<std::uint64_t>(K);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Channel plumbing and elementwise ops

/// Splits channels into consecutive groups of the given widths.
inline std::vector<Tensor4> split_channels(const Tensor4& x, std::span<const int> widths) {
  int total = 0;
  for (int wd : widths) {
    if (wd < 1) throw ShapeError("split_channels: widths must be >= 1");
    total += wd;
  }
  if (total != x.c()) {
    throw ShapeError("split_channels: widths sum to " + std::to_string(total) + " but input has " +
                     std::to_string(x.c()) + " channels");
  }
  std::vector<Tensor4> parts;
  parts.reserve(widths.size());
  int c0 = 0;
  for (int wd : widths) {
    Tensor4 part(x.n(), wd, x.h(), x.w());
    for (int n = 0; n < x.n(); ++n) {
      for (int c = 0; c < wd; ++c) {
        auto src = x.plane(n, c0 + c);
        std::copy(src.begin(), src.end(), part.plane(n, c).begin());
      }
    }
    parts.push_back(std::move(part));
    c0 += wd;
  }
  return parts;
}

/// Splits channels into `parts` equal groups.
inline std::vector<Tensor4> split_channels(const Tensor4& x, int parts) {
  if (parts < 1 || x.c() % parts != 0) {
    throw ShapeError("split_channels: " + std::to_string(x.c()) + " channels not divisible into " +
                     std::to_string(parts) + " parts");
  }
  std::vector<int> widths(parts, x.c() / parts);
  return split_channels(x, widths);
}

inline Tensor4 concat_channels(std::span<const Tensor4> xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape4 s0 = xs.front().shape();
  int c = 0;
  for (const auto& t : xs) {
    if (t.n() != s0.n || t.h() != s0.h || t.w() != s0.w) {
      throw ShapeError("concat_channels: " + t.shape().str() + " incompatible with " + s0.str());
    }
    c += t.c();
  }
  Tensor4 out(s0.n, c, s0.h, s0.w);
  for (int n = 0; n < s0.n; ++n) {
    int c0 = 0;
    for (const auto& t : xs) {
      for (int ci = 0; ci < t.c(); ++ci) {
        auto src = t.plane(n, ci);
        std::copy(src.begin(), src.end(), out.plane(n, c0 + ci).begin());
      }
      c0 += t.c();
    }
  }
  return out;
}

inline Tensor4 concat_channels(std::initializer_list<Tensor4> xs) {
  return concat_channels(std::span<const Tensor4>(xs.begin(), xs.size()));
}

inline Tensor4 add(const Tensor4& x, const Tensor4& y) {
  if (x.shape() != y.shape()) {
    throw ShapeError("add: " + x.shape().str() + " vs " + y.shape().str());
  }
  Tensor4 out = x;
  auto o = out.data();
  auto b = y.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += b[i];
  return out;
}

inline Tensor4 scale(Tensor4 x, float s) noexcept {
  for (float& v : x.data()) v *= s;
  return x;
}

/// Mean over each (n, c) plane, returned as n x c x 1 x 1.
inline Tensor4 global_avg_pool(const Tensor4& x) {
  Tensor4 out(x.n(), x.c(), 1, 1);
  const double inv = 1.0 / static_cast<double>(static_cast<std::size_t>(x.h()) * x.w());
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      double acc = 0.0;
      for (float v : x.plane(n, c)) acc += v;
      out.at(n, c, 0, 0) = static_cast<float>(acc * inv);
    }
  }
  return out;
}

/// Multiplies every plane of x by the matching entry of an n x c x 1 x 1 gate.
inline Tensor4 scale_channels(const Tensor4& x, const Tensor4& gate) {
  if (gate.n() != x.n() || gate.c() != x.c() || gate.h() != 1 || gate.w() != 1) {
    throw ShapeError("scale_channels: gate " + gate.shape().str() + " for input " +
                     x.shape().str());
  }
  Tensor4 out = x;
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      const float g = gate.at(n, c, 0, 0);
      for (float& v : out.plane(n, c)) v *= g;
    }
  }
  return out;
}

inline Tensor4 upsample_nearest(const Tensor4& x, int factor) {
  if (factor < 1) throw ShapeError("upsample_nearest: factor must be >= 1");
  Tensor4 out(x.n(), x.c(), x.h() * factor, x.w() * factor);
  for (int n = 0; n < x.n(); ++n) {
    for (int c = 0; c < x.c(); ++c) {
      for (int oy = 0; oy < out.h(); ++oy) {
        for (int ox = 0; ox < out.w(); ++ox) {
          out.at(n, c, oy, ox) = x.at(n, c, oy / factor, ox / factor);
        }
      }
    }
  }
  return out;
}

}  // namespace vajra
