#pragma once

// A small explicit 3D U-Net with optional residual encoder blocks, trained by
// hand-written reverse-mode gradients.
//
// Encoder level l has width base_width * 2^l. Level 0 runs a conv block on the
// input; deeper levels first downsample with a stride-2 3x3x3 convolution
// (+ instance norm + leaky ReLU). A conv block is
//   conv3 -> norm -> lrelu -> conv3 -> norm -> (+ skip) -> lrelu
// where the skip exists only for residual encoders (1x1x1 projection when the
// channel counts differ). Decoder levels upsample with a 2x2x2 stride-2
// transposed convolution, concatenate the encoder skip and run a plain block.
// A 1x1x1 head and a softmax produce per-voxel class probabilities.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "label_algebra.hpp"
#include "random.hpp"
#include "volume.hpp"

namespace segcascade {

struct NetworkConfig {
  int in_channels = 4;
  int out_classes = 5;
  int depth = 3;
  int base_width = 8;
  bool residual_encoder = true;

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

inline void validate(const NetworkConfig& c) {
  if (c.depth < 2) throw Error(Errc::InvalidConfig, "depth must be >= 2");
  if (c.base_width < 2) throw Error(Errc::InvalidConfig, "base_width must be >= 2");
  if (c.out_classes < 2) throw Error(Errc::InvalidConfig, "out_classes must be >= 2");
  if (c.in_channels < 1) throw Error(Errc::InvalidConfig, "in_channels must be >= 1");
}

/// Spatial extents must be divisible by this.
inline int spatial_multiple(const NetworkConfig& c) { return 1 << (c.depth - 1); }

template <class T>
struct Param {
  std::string name;
  std::vector<int> shape;
  std::vector<T> data;
};

template <class T>
struct Network {
  NetworkConfig config;
  std::uint64_t seed = 0;
  std::vector<Param<T>> params;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.data.size();
    return n;
  }
  bool has(const std::string& name) const { return find(name) >= 0; }
  int find(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return static_cast<int>(i);
    return -1;
  }
  Param<T>& operator[](const std::string& name) { return params.at(require(name)); }
  const Param<T>& operator[](const std::string& name) const { return params.at(require(name)); }
  std::size_t require(const std::string& name) const {
    const int i = find(name);
    if (i < 0) throw Error(Errc::ShapeMismatch, "no parameter " + name);
    return static_cast<std::size_t>(i);
  }

  /// FNV-1a over the parameter bytes, for determinism checks.
  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ull;
    for (const auto& p : params) {
      const auto* b = reinterpret_cast<const unsigned char*>(p.data.data());
      for (std::size_t i = 0; i < p.data.size() * sizeof(T); ++i) h = (h ^ b[i]) * 1099511628211ull;
    }
    return h;
  }

  template <class U>
  Network<U> cast() const {
    Network<U> out;
    out.config = config;
    out.seed = seed;
    for (const auto& p : params)
      out.params.push_back({p.name, p.shape, std::vector<U>(p.data.begin(), p.data.end())});
    return out;
  }
};

namespace unet {

inline int width(const NetworkConfig& c, int level) { return c.base_width << level; }

inline bool has_projection(const NetworkConfig& c) {
  return c.residual_encoder && c.in_channels != c.base_width;
}

struct ParamSpec {
  std::string name;
  std::vector<int> shape;
  int fan_in;  // 0: constant init
  enum Kind { Weight, Bias, Scale, Shift } kind;
};

inline std::vector<ParamSpec> layout(const NetworkConfig& c) {
  std::vector<ParamSpec> specs;
  auto norm = [&](const std::string& p, int ch) {
    specs.push_back({p + ".g", {ch}, 0, ParamSpec::Scale});
    specs.push_back({p + ".b", {ch}, 0, ParamSpec::Shift});
  };
  auto conv3 = [&](const std::string& p, int cout, int cin) {
    specs.push_back({p, {cout, cin * 27}, cin * 27, ParamSpec::Weight});
  };
  for (int l = 0; l < c.depth; ++l) {
    const std::string e = "enc" + std::to_string(l);
    const int w = width(c, l);
    const int cin = l == 0 ? c.in_channels : w;
    if (l > 0) {
      conv3(e + ".down.w", w, width(c, l - 1));
      norm(e + ".down_norm", w);
    }
    conv3(e + ".conv1.w", w, cin);
    norm(e + ".norm1", w);
    conv3(e + ".conv2.w", w, w);
    norm(e + ".norm2", w);
    if (l == 0 && has_projection(c))
      specs.push_back({e + ".proj.w", {w, cin}, cin, ParamSpec::Weight});
  }
  for (int l = c.depth - 2; l >= 0; --l) {
    const std::string d = "dec" + std::to_string(l);
    const int w = width(c, l), wu = width(c, l + 1);
    specs.push_back({d + ".up.w", {w * 8, wu}, wu * 8, ParamSpec::Weight});
    specs.push_back({d + ".up.b", {w}, wu * 8, ParamSpec::Bias});
    conv3(d + ".conv1.w", w, 2 * w);
    norm(d + ".norm1", w);
    conv3(d + ".conv2.w", w, w);
    norm(d + ".norm2", w);
  }
  specs.push_back({"head.w", {c.out_classes, width(c, 0)}, width(c, 0), ParamSpec::Weight});
  specs.push_back({"head.b", {c.out_classes}, width(c, 0), ParamSpec::Bias});
  return specs;
}

inline constexpr double kLeak = 0.01;
inline constexpr double kNormEps = 1e-5;

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;

inline std::size_t nvox(const Index3& e) {
  return static_cast<std::size_t>(e[0]) * e[1] * e[2];
}

inline Index3 strided(const Index3& e, int stride) {
  return {(e[0] + stride - 1) / stride, (e[1] + stride - 1) / stride, (e[2] + stride - 1) / stride};
}

// Column matrix (C*27, Nout) for a 3x3x3, pad-1 convolution.
template <class T>
void im2col(const T* in, int C, const Index3& e, int stride, const Index3& o, T* col) {
  const std::size_t nin = nvox(e), nout = nvox(o);
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          T* row = col + (static_cast<std::size_t>(c) * 27 + kz * 9 + ky * 3 + kx) * nout;
          for (int oz = 0; oz < o[2]; ++oz) {
            const int iz = oz * stride + kz - 1;
            for (int oy = 0; oy < o[1]; ++oy) {
              const int iy = oy * stride + ky - 1;
              T* dst = row + (static_cast<std::size_t>(oz) * o[1] + oy) * o[0];
              if (iz < 0 || iz >= e[2] || iy < 0 || iy >= e[1]) {
                std::fill(dst, dst + o[0], T(0));
                continue;
              }
              const T* src = in + c * nin + (static_cast<std::size_t>(iz) * e[1] + iy) * e[0];
              if (stride == 1) {
                const int shift = kx - 1;
                const int lo = std::max(0, -shift), hi = std::min(o[0], e[0] - shift);
                for (int ox = 0; ox < lo; ++ox) dst[ox] = T(0);
                std::memcpy(dst + lo, src + lo + shift, sizeof(T) * std::max(0, hi - lo));
                for (int ox = std::max(lo, hi); ox < o[0]; ++ox) dst[ox] = T(0);
              } else {
                for (int ox = 0; ox < o[0]; ++ox) {
                  const int ix = ox * stride + kx - 1;
                  dst[ox] = (ix >= 0 && ix < e[0]) ? src[ix] : T(0);
                }
              }
            }
          }
        }
}

template <class T>
void col2im_add(const T* col, int C, const Index3& e, int stride, const Index3& o, T* in) {
  const std::size_t nin = nvox(e), nout = nvox(o);
  for (int c = 0; c < C; ++c)
    for (int kz = 0; kz < 3; ++kz)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const T* row = col + (static_cast<std::size_t>(c) * 27 + kz * 9 + ky * 3 + kx) * nout;
          for (int oz = 0; oz < o[2]; ++oz) {
            const int iz = oz * stride + kz - 1;
            if (iz < 0 || iz >= e[2]) continue;
            for (int oy = 0; oy < o[1]; ++oy) {
              const int iy = oy * stride + ky - 1;
              if (iy < 0 || iy >= e[1]) continue;
              const T* src = row + (static_cast<std::size_t>(oz) * o[1] + oy) * o[0];
              T* dst = in + c * nin + (static_cast<std::size_t>(iz) * e[1] + iy) * e[0];
              for (int ox = 0; ox < o[0]; ++ox) {
                const int ix = ox * stride + kx - 1;
                if (ix >= 0 && ix < e[0]) dst[ix] += src[ox];
              }
            }
          }
        }
}

template <class T>
std::vector<T>& workspace(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

/// out (Cout, Nout) = W (Cout, Cin*27) * im2col(in)
template <class T>
std::vector<T> conv3_forward(const Param<T>& w, const std::vector<T>& in, int cin, const Index3& e,
                             int stride, Index3& o) {
  o = strided(e, stride);
  const int cout = w.shape[0];
  const std::size_t nout = nvox(o), k = static_cast<std::size_t>(cin) * 27;
  auto& col = workspace<T>(k * nout);
  im2col(in.data(), cin, e, stride, o, col.data());
  std::vector<T> out(static_cast<std::size_t>(cout) * nout);
  MapM<T>(out.data(), cout, nout).noalias() =
      CMapM<T>(w.data.data(), cout, k) * CMapM<T>(col.data(), k, nout);
  return out;
}

template <class T>
void conv3_backward(const Param<T>& w, std::vector<T>& dw, const std::vector<T>& in, int cin,
                    const Index3& e, int stride, const std::vector<T>& dout, std::vector<T>* din) {
  const Index3 o = strided(e, stride);
  const int cout = w.shape[0];
  const std::size_t nout = nvox(o), k = static_cast<std::size_t>(cin) * 27;
  auto& col = workspace<T>(k * nout);
  im2col(in.data(), cin, e, stride, o, col.data());
  CMapM<T> dY(dout.data(), cout, nout);
  MapM<T>(dw.data(), cout, k).noalias() += dY * CMapM<T>(col.data(), k, nout).transpose();
  if (!din) return;
  MapM<T>(col.data(), k, nout).noalias() = CMapM<T>(w.data.data(), cout, k).transpose() * dY;
  din->assign(static_cast<std::size_t>(cin) * nvox(e), T(0));
  col2im_add(col.data(), cin, e, stride, o, din->data());
}

/// 2x2x2 stride-2 transposed convolution; W is (Cout*8, Cin).
template <class T>
std::vector<T> upconv_forward(const Param<T>& w, const Param<T>& b, const std::vector<T>& in,
                              int cin, const Index3& e, Index3& o) {
  o = {e[0] * 2, e[1] * 2, e[2] * 2};
  const int cout = w.shape[0] / 8;
  const std::size_t nin = nvox(e), nout = nvox(o);
  Mat<T> y = CMapM<T>(w.data.data(), cout * 8, cin) * CMapM<T>(in.data(), cin, nin);
  std::vector<T> out(static_cast<std::size_t>(cout) * nout);
  for (int c = 0; c < cout; ++c)
    for (int k = 0; k < 8; ++k) {
      const int kx = k & 1, ky = (k >> 1) & 1, kz = k >> 2;
      const T* src = y.data() + (static_cast<std::size_t>(c) * 8 + k) * nin;
      T* dst = out.data() + c * nout;
      for (int z = 0; z < e[2]; ++z)
        for (int yy = 0; yy < e[1]; ++yy)
          for (int x = 0; x < e[0]; ++x)
            dst[(static_cast<std::size_t>(2 * z + kz) * o[1] + 2 * yy + ky) * o[0] + 2 * x + kx] =
                src[(static_cast<std::size_t>(z) * e[1] + yy) * e[0] + x] + b.data[c];
    }
  return out;
}

template <class T>
void upconv_backward(const Param<T>& w, std::vector<T>& dw, std::vector<T>& db,
                     const std::vector<T>& in, int cin, const Index3& e,
                     const std::vector<T>& dout, std::vector<T>& din) {
  const Index3 o{e[0] * 2, e[1] * 2, e[2] * 2};
  const int cout = w.shape[0] / 8;
  const std::size_t nin = nvox(e), nout = nvox(o);
  Mat<T> dy(cout * 8, static_cast<Eigen::Index>(nin));
  for (int c = 0; c < cout; ++c) {
    const T* src = dout.data() + c * nout;
    T acc = 0;
    for (std::size_t i = 0; i < nout; ++i) acc += src[i];
    db[c] += acc;
    for (int k = 0; k < 8; ++k) {
      const int kx = k & 1, ky = (k >> 1) & 1, kz = k >> 2;
      T* dst = dy.data() + (static_cast<std::size_t>(c) * 8 + k) * nin;
      for (int z = 0; z < e[2]; ++z)
        for (int yy = 0; yy < e[1]; ++yy)
          for (int x = 0; x < e[0]; ++x)
            dst[(static_cast<std::size_t>(z) * e[1] + yy) * e[0] + x] =
                src[(static_cast<std::size_t>(2 * z + kz) * o[1] + 2 * yy + ky) * o[0] + 2 * x + kx];
    }
  }
  CMapM<T> X(in.data(), cin, nin);
  MapM<T>(dw.data(), cout * 8, cin).noalias() += dy * X.transpose();
  din.assign(static_cast<std::size_t>(cin) * nin, T(0));
  MapM<T>(din.data(), cin, nin).noalias() = CMapM<T>(w.data.data(), cout * 8, cin).transpose() * dy;
}

template <class T>
struct NormCache {
  std::vector<T> xhat;
  std::vector<T> inv_std;
};

template <class T>
std::vector<T> norm_forward(const std::vector<T>& x, int C, std::size_t n, const Param<T>& g,
                            const Param<T>& b, NormCache<T>& cache) {
  cache.xhat.resize(x.size());
  cache.inv_std.resize(C);
  std::vector<T> y(x.size());
  for (int c = 0; c < C; ++c) {
    const T* xc = x.data() + c * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xc[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xc[i] - mean) * (xc[i] - mean);
    var /= static_cast<double>(n);
    const T inv = static_cast<T>(1.0 / std::sqrt(var + kNormEps));
    cache.inv_std[c] = inv;
    T* xh = cache.xhat.data() + c * n;
    T* yc = y.data() + c * n;
    const T m = static_cast<T>(mean);
    for (std::size_t i = 0; i < n; ++i) {
      xh[i] = (xc[i] - m) * inv;
      yc[i] = g.data[c] * xh[i] + b.data[c];
    }
  }
  return y;
}

template <class T>
std::vector<T> norm_backward(const std::vector<T>& dy, int C, std::size_t n, const Param<T>& g,
                             std::vector<T>& dg, std::vector<T>& db, const NormCache<T>& cache) {
  std::vector<T> dx(dy.size());
  for (int c = 0; c < C; ++c) {
    const T* dyc = dy.data() + c * n;
    const T* xh = cache.xhat.data() + c * n;
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dyc[i];
      sum_dy_xh += dyc[i] * xh[i];
    }
    dg[c] += static_cast<T>(sum_dy_xh);
    db[c] += static_cast<T>(sum_dy);
    const double gc = g.data[c];
    const double scale = gc * cache.inv_std[c] / static_cast<double>(n);
    T* dxc = dx.data() + c * n;
    for (std::size_t i = 0; i < n; ++i)
      dxc[i] = static_cast<T>(scale * (static_cast<double>(n) * dyc[i] - sum_dy - xh[i] * sum_dy_xh));
  }
  return dx;
}

template <class T>
void lrelu_inplace(std::vector<T>& x) {
  for (auto& v : x) v = v > T(0) ? v : static_cast<T>(kLeak) * v;
}

// Gradient through leaky ReLU given its output (same sign as its input).
template <class T>
void lrelu_backward_inplace(std::vector<T>& d, const std::vector<T>& out) {
  for (std::size_t i = 0; i < d.size(); ++i)
    if (!(out[i] > T(0))) d[i] *= static_cast<T>(kLeak);
}

template <class T>
std::vector<T> conv1_forward(const Param<T>& w, const std::vector<T>& in, std::size_t n) {
  const int cout = w.shape[0], cin = w.shape[1];
  std::vector<T> out(static_cast<std::size_t>(cout) * n);
  MapM<T>(out.data(), cout, n).noalias() =
      CMapM<T>(w.data.data(), cout, cin) * CMapM<T>(in.data(), cin, n);
  return out;
}

template <class T>
void conv1_backward(const Param<T>& w, std::vector<T>& dw, const std::vector<T>& in,
                    const std::vector<T>& dout, std::size_t n, std::vector<T>* din) {
  const int cout = w.shape[0], cin = w.shape[1];
  CMapM<T> dY(dout.data(), cout, n);
  MapM<T>(dw.data(), cout, cin).noalias() += dY * CMapM<T>(in.data(), cin, n).transpose();
  if (!din) return;
  din->assign(static_cast<std::size_t>(cin) * n, T(0));
  MapM<T>(din->data(), cin, n).noalias() = CMapM<T>(w.data.data(), cout, cin).transpose() * dY;
}

template <class T>
struct ConvNormActTrace {
  std::vector<T> in;  // convolution input
  int cin = 0;
  Index3 in_ext{};
  int stride = 1;
  NormCache<T> norm;
  std::vector<T> out;  // post-activation
};

template <class T>
struct BlockTrace {
  ConvNormActTrace<T> first;
  std::vector<T> a1;  // == first.out, kept for the second conv's input
  NormCache<T> norm2;
  bool residual = false;
  bool projected = false;
  std::vector<T> out;
};

template <class T>
struct SampleTrace {
  Index3 extents{};
  std::vector<T> input;
  std::vector<ConvNormActTrace<T>> down;  // indexed by level (0 unused)
  std::vector<BlockTrace<T>> enc;
  std::vector<Index3> enc_ext;
  std::vector<std::vector<T>> up_in;  // transposed-conv inputs per decoder level
  std::vector<BlockTrace<T>> dec;
  std::vector<T> head_in;
  std::vector<T> logits;
};

}  // namespace unet

/// Deterministic initialisation: fan-in scaled uniform weights (He bound for
/// leaky ReLU), uniform biases in +-1/sqrt(fan_in), unit norm scales, zero shifts.
template <class T = float>
Network<T> build_network(const NetworkConfig& config, std::uint64_t seed) {
  validate(config);
  Network<T> net;
  net.config = config;
  net.seed = seed;
  Rng rng(derive_seed(seed, 0x6e6574));
  for (const auto& spec : unet::layout(config)) {
    Param<T> p{spec.name, spec.shape, {}};
    std::size_t n = 1;
    for (int s : spec.shape) n *= static_cast<std::size_t>(s);
    p.data.resize(n);
    switch (spec.kind) {
      case unet::ParamSpec::Weight: {
        const double bound = std::sqrt(6.0 / ((1.0 + unet::kLeak * unet::kLeak) * spec.fan_in));
        for (auto& v : p.data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case unet::ParamSpec::Bias: {
        const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
        for (auto& v : p.data) v = static_cast<T>(rng.uniform(-bound, bound));
        break;
      }
      case unet::ParamSpec::Scale: std::fill(p.data.begin(), p.data.end(), T(1)); break;
      case unet::ParamSpec::Shift: std::fill(p.data.begin(), p.data.end(), T(0)); break;
    }
    net.params.push_back(std::move(p));
  }
  return net;
}

/// Checks that parameter names and shapes match the layout implied by the config.
template <class T>
void check_layout(const Network<T>& net) {
  validate(net.config);
  const auto specs = unet::layout(net.config);
  for (const auto& s : specs) {
    const int i = net.find(s.name);
    if (i < 0) throw Error(Errc::ShapeMismatch, "missing parameter " + s.name);
    if (net.params[i].shape != s.shape) throw Error(Errc::ShapeMismatch, "shape of " + s.name);
    std::size_t n = 1;
    for (int d : s.shape) n *= static_cast<std::size_t>(d);
    if (net.params[i].data.size() != n) throw Error(Errc::ShapeMismatch, "size of " + s.name);
  }
}

/// Batched dense tensor; shape (batch, channels, x, y, z) with x fastest.
template <class T>
struct Tensor5 {
  int batch = 0;
  int channels = 0;
  Index3 extents{};
  std::vector<T> data;

  Tensor5() = default;
  Tensor5(int b, int c, const Index3& e, T fill = T(0))
      : batch(b), channels(c), extents(e), data(static_cast<std::size_t>(b) * c * unet::nvox(e), fill) {}

  std::size_t voxels() const { return unet::nvox(extents); }
  std::size_t sample_size() const { return static_cast<std::size_t>(channels) * voxels(); }
  T* sample(int b) { return data.data() + b * sample_size(); }
  const T* sample(int b) const { return data.data() + b * sample_size(); }
  T* channel(int b, int c) { return sample(b) + c * voxels(); }
  const T* channel(int b, int c) const { return sample(b) + c * voxels(); }
};

/// Inputs plus class-index targets (batch, x, y, z).
template <class T>
struct Batch {
  Tensor5<T> inputs;
  std::vector<std::uint8_t> targets;
};

struct LossWeights {
  double dice = 1.0;
  double ce = 1.0;
};

struct LossValue {
  double total = 0.0;
  double ce = 0.0;
  double dice_term = 0.0;  // 1 - mean foreground soft Dice
};

inline constexpr double kDiceSmooth = 1e-5;

namespace unet {

template <class T>
void check_input(const NetworkConfig& c, const Tensor5<T>& x) {
  if (x.channels != c.in_channels)
    throw Error(Errc::ShapeMismatch, "expected " + std::to_string(c.in_channels) + " input channels");
  const int m = spatial_multiple(c);
  for (int a = 0; a < 3; ++a)
    if (x.extents[a] < m || x.extents[a] % m != 0)
      throw Error(Errc::ShapeMismatch, "spatial extents must be divisible by " + std::to_string(m));
  if (x.data.size() != static_cast<std::size_t>(x.batch) * x.sample_size())
    throw Error(Errc::ShapeMismatch, "input buffer size");
}

template <class T>
std::vector<T> conv_norm_act(const Network<T>& net, const std::string& conv, const std::string& norm,
                             std::vector<T> in, int cin, const Index3& e, int stride, Index3& o,
                             ConvNormActTrace<T>& tr) {
  auto h = conv3_forward(net[conv], in, cin, e, stride, o);
  const int cout = net[conv].shape[0];
  auto y = norm_forward(h, cout, nvox(o), net[norm + ".g"], net[norm + ".b"], tr.norm);
  lrelu_inplace(y);
  tr.in = std::move(in);
  tr.cin = cin;
  tr.in_ext = e;
  tr.stride = stride;
  tr.out = y;
  return y;
}

template <class T>
std::vector<T> block_forward(const Network<T>& net, const std::string& p, std::vector<T> in, int cin,
                             const Index3& e, bool residual, BlockTrace<T>& tr) {
  Index3 o;
  auto a1 = conv_norm_act(net, p + ".conv1.w", p + ".norm1", std::move(in), cin, e, 1, o, tr.first);
  const int w = net[p + ".conv1.w"].shape[0];
  const std::size_t n = nvox(e);
  auto h2 = conv3_forward(net[p + ".conv2.w"], a1, w, e, 1, o);
  auto s = norm_forward(h2, w, n, net[p + ".norm2.g"], net[p + ".norm2.b"], tr.norm2);
  tr.residual = residual;
  tr.projected = false;
  if (residual) {
    if (cin == w) {
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += tr.first.in[i];
    } else {
      tr.projected = true;
      const auto proj = conv1_forward(net[p + ".proj.w"], tr.first.in, n);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += proj[i];
    }
  }
  lrelu_inplace(s);
  tr.a1 = std::move(a1);
  tr.out = s;
  return s;
}

// Accumulates parameter gradients; returns d(block input).
template <class T>
std::vector<T> block_backward(const Network<T>& net, std::vector<std::vector<T>>& grads,
                              const std::string& p, std::vector<T> dout, const BlockTrace<T>& tr) {
  const Index3& e = tr.first.in_ext;
  const std::size_t n = nvox(e);
  const int w = net[p + ".conv1.w"].shape[0];
  lrelu_backward_inplace(dout, tr.out);
  std::vector<T> dskip;
  if (tr.residual) {
    if (tr.projected) {
      conv1_backward(net[p + ".proj.w"], grads[net.require(p + ".proj.w")], tr.first.in, dout, n,
                     &dskip);
    } else {
      dskip = dout;
    }
  }
  auto dh2 = norm_backward(dout, w, n, net[p + ".norm2.g"], grads[net.require(p + ".norm2.g")],
                           grads[net.require(p + ".norm2.b")], tr.norm2);
  std::vector<T> da1;
  conv3_backward(net[p + ".conv2.w"], grads[net.require(p + ".conv2.w")], tr.a1, w, e, 1, dh2, &da1);
  lrelu_backward_inplace(da1, tr.first.out);
  auto dh1 = norm_backward(da1, w, n, net[p + ".norm1.g"], grads[net.require(p + ".norm1.g")],
                           grads[net.require(p + ".norm1.b")], tr.first.norm);
  std::vector<T> din;
  conv3_backward(net[p + ".conv1.w"], grads[net.require(p + ".conv1.w")], tr.first.in, tr.first.cin,
                 e, 1, dh1, &din);
  if (!dskip.empty())
    for (std::size_t i = 0; i < din.size(); ++i) din[i] += dskip[i];
  return din;
}

template <class T>
SampleTrace<T> forward_sample(const Network<T>& net, const T* input, const Index3& ext) {
  const auto& c = net.config;
  SampleTrace<T> tr;
  tr.extents = ext;
  tr.input.assign(input, input + static_cast<std::size_t>(c.in_channels) * nvox(ext));
  tr.down.resize(c.depth);
  tr.enc.resize(c.depth);
  tr.enc_ext.resize(c.depth);
  tr.dec.resize(c.depth - 1);
  tr.up_in.resize(c.depth - 1);

  std::vector<T> x = tr.input;
  Index3 e = ext;
  int cin = c.in_channels;
  for (int l = 0; l < c.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    if (l > 0) {
      Index3 o;
      x = conv_norm_act(net, p + ".down.w", p + ".down_norm", std::move(x), cin, e, 2, o, tr.down[l]);
      e = o;
      cin = width(c, l);
    }
    x = block_forward(net, p, std::move(x), cin, e, c.residual_encoder, tr.enc[l]);
    tr.enc_ext[l] = e;
    cin = width(c, l);
  }
  for (int l = c.depth - 2; l >= 0; --l) {
    const std::string p = "dec" + std::to_string(l);
    Index3 o;
    tr.up_in[l] = x;
    auto up = upconv_forward(net[p + ".up.w"], net[p + ".up.b"], x, width(c, l + 1), e, o);
    e = o;
    const std::vector<T>& skip = tr.enc[l].out;
    std::vector<T> cat(skip.size() + up.size());
    std::copy(skip.begin(), skip.end(), cat.begin());
    std::copy(up.begin(), up.end(), cat.begin() + static_cast<std::ptrdiff_t>(skip.size()));
    x = block_forward(net, p, std::move(cat), 2 * width(c, l), e, false, tr.dec[l]);
  }
  tr.head_in = x;
  const std::size_t n = nvox(e);
  tr.logits = conv1_forward(net["head.w"], x, n);
  const auto& hb = net["head.b"].data;
  for (int k = 0; k < c.out_classes; ++k)
    for (std::size_t i = 0; i < n; ++i) tr.logits[k * n + i] += hb[k];
  return tr;
}

template <class T>
void backward_sample(const Network<T>& net, const SampleTrace<T>& tr, const std::vector<T>& dlogits,
                     std::vector<std::vector<T>>& grads) {
  const auto& c = net.config;
  const std::size_t n = nvox(tr.extents);
  auto& dhb = grads[net.require("head.b")];
  for (int k = 0; k < c.out_classes; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += dlogits[k * n + i];
    dhb[k] += static_cast<T>(acc);
  }
  std::vector<T> dx;
  conv1_backward(net["head.w"], grads[net.require("head.w")], tr.head_in, dlogits, n, &dx);

  std::vector<std::vector<T>> dskip(c.depth);
  for (int l = 0; l <= c.depth - 2; ++l) {
    const std::string p = "dec" + std::to_string(l);
    auto dcat = block_backward(net, grads, p, std::move(dx), tr.dec[l]);
    const std::size_t half = dcat.size() / 2;
    dskip[l].assign(dcat.begin(), dcat.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<T> dup(dcat.begin() + static_cast<std::ptrdiff_t>(half), dcat.end());
    upconv_backward(net[p + ".up.w"], grads[net.require(p + ".up.w")],
                    grads[net.require(p + ".up.b")], tr.up_in[l], width(c, l + 1), tr.enc_ext[l + 1],
                    dup, dx);
  }
  for (int l = c.depth - 1; l >= 0; --l) {
    const std::string p = "enc" + std::to_string(l);
    if (!dskip[l].empty())
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dskip[l][i];
    dx = block_backward(net, grads, p, std::move(dx), tr.enc[l]);
    if (l > 0) {
      const auto& d = tr.down[l];
      const int w = width(c, l);
      lrelu_backward_inplace(dx, d.out);
      auto dh = norm_backward(dx, w, nvox(tr.enc_ext[l]), net[p + ".down_norm.g"],
                              grads[net.require(p + ".down_norm.g")],
                              grads[net.require(p + ".down_norm.b")], d.norm);
      std::vector<T> din;
      conv3_backward(net[p + ".down.w"], grads[net.require(p + ".down.w")], d.in, d.cin, d.in_ext, 2,
                     dh, &din);
      dx = std::move(din);
    }
  }
}

// Numerically stable softmax over classes for one sample (K, n).
template <class T>
std::vector<T> softmax(const std::vector<T>& logits, int K, std::size_t n) {
  std::vector<T> p(logits.size());
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(logits[k * n + i]));
    double sum = 0.0;
    for (int k = 0; k < K; ++k) sum += std::exp(logits[k * n + i] - mx);
    for (int k = 0; k < K; ++k) p[k * n + i] = static_cast<T>(std::exp(logits[k * n + i] - mx) / sum);
  }
  return p;
}

}  // namespace unet

/// Class probabilities (batch, out_classes, x, y, z).
template <class T>
Tensor5<T> forward(const Network<T>& net, const Tensor5<T>& inputs) {
  unet::check_input(net.config, inputs);
  const int K = net.config.out_classes;
  Tensor5<T> out(inputs.batch, K, inputs.extents);
  for (int b = 0; b < inputs.batch; ++b) {
    const auto tr = unet::forward_sample(net, inputs.sample(b), inputs.extents);
    const auto p = unet::softmax(tr.logits, K, out.voxels());
    std::copy(p.begin(), p.end(), out.sample(b));
  }
  return out;
}

/// Dice + cross-entropy of probabilities against class-index targets.
template <class T>
LossValue loss(const Tensor5<T>& probs, const std::vector<std::uint8_t>& targets,
               const LossWeights& weights = {}) {
  const int K = probs.channels;
  const std::size_t n = probs.voxels();
  if (targets.size() != static_cast<std::size_t>(probs.batch) * n)
    throw Error(Errc::ShapeMismatch, "targets do not match probabilities");
  double ce = 0.0;
  std::vector<double> inter(K, 0.0), psum(K, 0.0), ysum(K, 0.0);
  for (int b = 0; b < probs.batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const int t = targets[b * n + i];
      if (t >= K) throw Error(Errc::ShapeMismatch, "target code exceeds class count");
      ce -= std::log(std::max(static_cast<double>(probs.channel(b, t)[i]), 1e-300));
      for (int k = 1; k < K; ++k) {
        const double p = probs.channel(b, k)[i];
        psum[k] += p;
        if (k == t) {
          inter[k] += p;
          ysum[k] += 1.0;
        }
      }
    }
  LossValue v;
  v.ce = ce / (static_cast<double>(probs.batch) * n);
  double dice = 0.0;
  for (int k = 1; k < K; ++k)
    dice += (2.0 * inter[k] + kDiceSmooth) / (psum[k] + ysum[k] + kDiceSmooth);
  v.dice_term = 1.0 - dice / (K - 1);
  v.total = weights.ce * v.ce + weights.dice * v.dice_term;
  return v;
}

/// Mean soft Dice over the foreground classes present in the targets.
template <class T>
double foreground_soft_dice(const Tensor5<T>& probs, const std::vector<std::uint8_t>& targets) {
  const int K = probs.channels;
  const std::size_t n = probs.voxels();
  std::vector<double> inter(K, 0.0), psum(K, 0.0), ysum(K, 0.0);
  for (int b = 0; b < probs.batch; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      const int t = targets[b * n + i];
      for (int k = 1; k < K; ++k) {
        const double p = probs.channel(b, k)[i];
        psum[k] += p;
        if (k == t) {
          inter[k] += p;
          ysum[k] += 1.0;
        }
      }
    }
  double sum = 0.0;
  int present = 0;
  for (int k = 1; k < K; ++k)
    if (ysum[k] > 0) {
      sum += 2.0 * inter[k] / (psum[k] + ysum[k]);
      ++present;
    }
  return present ? sum / present : 1.0;
}

template <class T>
struct GradientResult {
  LossValue loss;
  std::vector<std::vector<T>> grads;  // parallel to net.params
  Tensor5<T> probs;
};

/// Loss and exact reverse-mode gradients with respect to every parameter.
/// Cross-entropy is evaluated from log-softmax of the logits.
template <class T>
GradientResult<T> gradients(const Network<T>& net, const Batch<T>& batch,
                            const LossWeights& weights = {}) {
  unet::check_input(net.config, batch.inputs);
  const int K = net.config.out_classes;
  const int B = batch.inputs.batch;
  const std::size_t n = batch.inputs.voxels();
  if (batch.targets.size() != static_cast<std::size_t>(B) * n)
    throw Error(Errc::ShapeMismatch, "targets do not match inputs");

  GradientResult<T> res;
  res.probs = Tensor5<T>(B, K, batch.inputs.extents);
  std::vector<unet::SampleTrace<T>> traces;
  traces.reserve(B);
  double ce = 0.0;
  std::vector<double> inter(K, 0.0), psum(K, 0.0), ysum(K, 0.0);
  for (int b = 0; b < B; ++b) {
    traces.push_back(unet::forward_sample(net, batch.inputs.sample(b), batch.inputs.extents));
    const auto& z = traces.back().logits;
    T* p = res.probs.sample(b);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = batch.targets[b * n + i];
      if (t >= K) throw Error(Errc::ShapeMismatch, "target code exceeds class count");
      double mx = -std::numeric_limits<double>::infinity();
      for (int k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(z[k * n + i]));
      double sum = 0.0;
      for (int k = 0; k < K; ++k) sum += std::exp(z[k * n + i] - mx);
      const double lse = mx + std::log(sum);
      ce += lse - z[t * n + i];
      for (int k = 0; k < K; ++k) {
        const double pk = std::exp(z[k * n + i] - lse);
        p[k * n + i] = static_cast<T>(pk);
        if (k == 0) continue;
        psum[k] += pk;
        if (k == t) {
          inter[k] += pk;
          ysum[k] += 1.0;
        }
      }
    }
  }
  const double total_vox = static_cast<double>(B) * n;
  res.loss.ce = ce / total_vox;
  double dice = 0.0;
  std::vector<double> denom(K, 0.0), numer(K, 0.0);
  for (int k = 1; k < K; ++k) {
    numer[k] = 2.0 * inter[k] + kDiceSmooth;
    denom[k] = psum[k] + ysum[k] + kDiceSmooth;
    dice += numer[k] / denom[k];
  }
  res.loss.dice_term = 1.0 - dice / (K - 1);
  res.loss.total = weights.ce * res.loss.ce + weights.dice * res.loss.dice_term;
  if (!std::isfinite(res.loss.total)) throw Error(Errc::NonFiniteLoss, "loss is not finite");

  res.grads.resize(net.params.size());
  for (std::size_t i = 0; i < net.params.size(); ++i)
    res.grads[i].assign(net.params[i].data.size(), T(0));

  const double dice_scale = -weights.dice / (K - 1);
  std::vector<double> g(K);
  for (int b = 0; b < B; ++b) {
    const T* p = res.probs.sample(b);
    std::vector<T> dz(static_cast<std::size_t>(K) * n);
    for (std::size_t i = 0; i < n; ++i) {
      const int t = batch.targets[b * n + i];
      // dL/dp for the Dice term, then through the softmax Jacobian.
      double dot = 0.0;
      for (int k = 0; k < K; ++k) {
        if (k == 0) {
          g[k] = 0.0;
        } else {
          const double y = k == t ? 1.0 : 0.0;
          g[k] = dice_scale * (2.0 * y * denom[k] - numer[k]) / (denom[k] * denom[k]);
        }
        dot += p[k * n + i] * g[k];
      }
      for (int k = 0; k < K; ++k) {
        const double pk = p[k * n + i];
        const double y = k == t ? 1.0 : 0.0;
        dz[k * n + i] = static_cast<T>(pk * (g[k] - dot) + weights.ce * (pk - y) / total_vox);
      }
    }
    unet::backward_sample(net, traces[b], dz, res.grads);
  }
  return res;
}

/// Probabilities of one sample as a named channel stack on `grid`.
template <class T>
ChannelStack to_channel_stack(const Tensor5<T>& probs, int b, const Grid& grid,
                              const std::vector<std::string>& names) {
  if (unet::nvox(probs.extents) != grid.voxels() || static_cast<int>(names.size()) != probs.channels)
    throw Error(Errc::GeometryMismatch, "probabilities do not match grid or names");
  ChannelStack s;
  s.grid = grid;
  s.names = names;
  for (int k = 0; k < probs.channels; ++k) {
    const T* src = probs.channel(b, k);
    s.channels.emplace_back(src, src + probs.voxels());
  }
  return s;
}

}  // namespace segcascade
