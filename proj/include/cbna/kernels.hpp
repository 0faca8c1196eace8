#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cbna/tensor.hpp"

namespace cbna {

enum class Padding : uint8_t { Same = 0, Valid = 1 };

// Convolution parameters. Weight layout is (kh, kw, c_in, c_out) row-major.
template <typename T>
struct ConvKernelT {
  int kh = 1, kw = 1, c_in = 1, c_out = 1;
  int stride = 1;
  Padding padding = Padding::Same;
  std::vector<T> weights;
  std::vector<T> bias;

  void validate() const {
    if (kh < 1 || kw < 1 || c_in < 1 || c_out < 1 || stride < 1)
      throw ShapeError("conv kernel dimensions must all be >= 1");
    if (padding == Padding::Same && (kh % 2 == 0 || kw % 2 == 0))
      throw ShapeError("same padding requires odd kernel extents");
    if (weights.size() != static_cast<size_t>(kh) * kw * c_in * c_out)
      throw ShapeError("conv weight count does not match kernel dimensions");
    if (bias.size() != static_cast<size_t>(c_out))
      throw ShapeError("conv bias count does not match output channels");
  }

  size_t weight_index(int ky, int kx, int ci, int co) const {
    return ((static_cast<size_t>(ky) * kw + kx) * c_in + ci) * c_out + co;
  }
};

using ConvKernel = ConvKernelT<float>;
using DConvKernel = ConvKernelT<double>;

struct ConvDims {
  int oh = 0, ow = 0;
  int pad_top = 0, pad_left = 0;
};

inline ConvDims conv_output_dims(int h, int w, int kh, int kw, int stride, Padding padding) {
  if (padding == Padding::Same) {
    const int oh = (h + stride - 1) / stride;
    const int ow = (w + stride - 1) / stride;
    const int pad_h = std::max((oh - 1) * stride + kh - h, 0);
    const int pad_w = std::max((ow - 1) * stride + kw - w, 0);
    return {oh, ow, pad_h / 2, pad_w / 2};
  }
  if (h < kh || w < kw)
    throw ShapeError("input smaller than kernel under valid padding");
  return {(h - kh) / stride + 1, (w - kw) / stride + 1, 0, 0};
}

// Direct convolution. Out-of-bounds taps read zero ("same" pads with zeros).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const ConvKernelT<T>& k) {
  k.validate();
  if (x.c != k.c_in)
    throw ShapeError("conv2d: input has " + std::to_string(x.c) + " channels, kernel expects " +
                     std::to_string(k.c_in));
  const ConvDims d = conv_output_dims(x.h, x.w, k.kh, k.kw, k.stride, k.padding);
  TensorT<T> out(x.b, d.oh, d.ow, k.c_out);
  std::vector<T> acc(static_cast<size_t>(k.c_out));
  for (int bi = 0; bi < x.b; ++bi) {
    for (int oy = 0; oy < d.oh; ++oy) {
      for (int ox = 0; ox < d.ow; ++ox) {
        std::copy(k.bias.begin(), k.bias.end(), acc.begin());
        const int iy0 = oy * k.stride - d.pad_top;
        const int ix0 = ox * k.stride - d.pad_left;
        for (int ky = 0; ky < k.kh; ++ky) {
          const int iy = iy0 + ky;
          if (iy < 0 || iy >= x.h) continue;
          for (int kx = 0; kx < k.kw; ++kx) {
            const int ix = ix0 + kx;
            if (ix < 0 || ix >= x.w) continue;
            const T* px = &x.data[x.index(bi, iy, ix, 0)];
            const T* wk = &k.weights[k.weight_index(ky, kx, 0, 0)];
            for (int ci = 0; ci < k.c_in; ++ci) {
              const T v = px[ci];
              const T* wrow = wk + static_cast<size_t>(ci) * k.c_out;
              for (int co = 0; co < k.c_out; ++co) acc[co] += v * wrow[co];
            }
          }
        }
        std::copy(acc.begin(), acc.end(), &out.data[out.index(bi, oy, ox, 0)]);
      }
    }
  }
  return out;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> out = x;
  for (T& v : out.data)
    if (v < T{}) v = T{};
  return out;
}

// Mean pooling over factor x factor blocks; spatial dims must divide evenly.
template <typename T>
TensorT<T> downsample_mean(const TensorT<T>& x, int factor) {
  if (factor < 1) throw ArgumentError("downsample factor must be >= 1");
  if (factor == 1) return x;
  if (x.h % factor != 0 || x.w % factor != 0)
    throw ShapeError("downsample requires spatial dims divisible by the factor");
  TensorT<T> out(x.b, x.h / factor, x.w / factor, x.c);
  const T inv = T(1) / static_cast<T>(factor * factor);
  for (int bi = 0; bi < x.b; ++bi)
    for (int oy = 0; oy < out.h; ++oy)
      for (int ox = 0; ox < out.w; ++ox) {
        T* po = &out.data[out.index(bi, oy, ox, 0)];
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) {
            const T* pi = &x.data[x.index(bi, oy * factor + dy, ox * factor + dx, 0)];
            for (int ci = 0; ci < x.c; ++ci) po[ci] += pi[ci];
          }
        for (int ci = 0; ci < x.c; ++ci) po[ci] *= inv;
      }
  return out;
}

// Nearest-neighbor upsampling; factor 1 is the identity.
template <typename T>
TensorT<T> upsample_nearest(const TensorT<T>& x, int factor) {
  if (factor < 1) throw ArgumentError("upsample factor must be >= 1");
  if (factor == 1) return x;
  TensorT<T> out(x.b, x.h * factor, x.w * factor, x.c);
  for (int bi = 0; bi < x.b; ++bi)
    for (int oy = 0; oy < out.h; ++oy) {
      const int iy = oy / factor;
      for (int ox = 0; ox < out.w; ++ox) {
        const T* pi = &x.data[x.index(bi, iy, ox / factor, 0)];
        T* po = &out.data[out.index(bi, oy, ox, 0)];
        for (int ci = 0; ci < x.c; ++ci) po[ci] = pi[ci];
      }
    }
  return out;
}

// Channel concatenation [a | b]; batch and spatial dims must agree.
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.b != b.b || a.h != b.h || a.w != b.w)
    throw ShapeError("concat_channels requires matching batch and spatial dims");
  TensorT<T> out(a.b, a.h, a.w, a.c + b.c);
  for (int bi = 0; bi < a.b; ++bi)
    for (int y = 0; y < a.h; ++y)
      for (int x = 0; x < a.w; ++x) {
        T* po = &out.data[out.index(bi, y, x, 0)];
        const T* pa = &a.data[a.index(bi, y, x, 0)];
        const T* pb = &b.data[b.index(bi, y, x, 0)];
        for (int ci = 0; ci < a.c; ++ci) po[ci] = pa[ci];
        for (int ci = 0; ci < b.c; ++ci) po[a.c + ci] = pb[ci];
      }
  return out;
}

// Per-pixel softmax over channels, computed with max subtraction.
template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& x) {
  TensorT<T> out(x.b, x.h, x.w, x.c);
  for (int bi = 0; bi < x.b; ++bi)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx) {
        const T* pi = &x.data[x.index(bi, y, xx, 0)];
        T* po = &out.data[out.index(bi, y, xx, 0)];
        T m = pi[0];
        for (int ci = 1; ci < x.c; ++ci) m = std::max(m, pi[ci]);
        T sum = T{};
        for (int ci = 0; ci < x.c; ++ci) {
          po[ci] = std::exp(pi[ci] - m);
          sum += po[ci];
        }
        const T inv = T(1) / sum;
        for (int ci = 0; ci < x.c; ++ci) po[ci] *= inv;
      }
  return out;
}

// Per-pixel index of the maximal channel; ties go to the lowest index.
template <typename T>
ClassMap argmax_channels(const TensorT<T>& x) {
  if (x.c > 255) throw ArgumentError("argmax_channels supports at most 255 channels");
  ClassMap out(x.b, x.h, x.w);
  for (int bi = 0; bi < x.b; ++bi)
    for (int y = 0; y < x.h; ++y)
      for (int xx = 0; xx < x.w; ++xx) {
        const T* pi = &x.data[x.index(bi, y, xx, 0)];
        int best = 0;
        for (int ci = 1; ci < x.c; ++ci)
          if (pi[ci] > pi[best]) best = ci;
        out.at(bi, y, xx) = static_cast<uint8_t>(best);
      }
  return out;
}

}  // namespace cbna
