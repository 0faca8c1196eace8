#pragma once

#include <cassert>
#include <cstdint>
#include <string>
#include <vector>

#include "cbna/errors.hpp"

namespace cbna {

// Dense rank-4 feature tensor, row-major in (batch, row, col, channel).
// All dimensions are at least 1 and data.size() == b*h*w*c.
template <typename T>
struct TensorT {
  int b = 0, h = 0, w = 0, c = 0;
  std::vector<T> data;

  TensorT() = default;

  TensorT(int b_, int h_, int w_, int c_, T fill = T{}) : b(b_), h(h_), w(w_), c(c_) {
    if (b < 1 || h < 1 || w < 1 || c < 1)
      throw ShapeError("tensor dimensions must all be >= 1, got (" + std::to_string(b) + "," +
                       std::to_string(h) + "," + std::to_string(w) + "," + std::to_string(c) + ")");
    data.assign(static_cast<size_t>(b) * h * w * c, fill);
  }

  size_t size() const { return data.size(); }

  size_t index(int bi, int y, int x, int ci) const {
    assert(bi >= 0 && bi < b && y >= 0 && y < h && x >= 0 && x < w && ci >= 0 && ci < c);
    return ((static_cast<size_t>(bi) * h + y) * static_cast<size_t>(w) + x) * c + ci;
  }

  T& at(int bi, int y, int x, int ci) { return data[index(bi, y, x, ci)]; }
  const T& at(int bi, int y, int x, int ci) const { return data[index(bi, y, x, ci)]; }

  bool same_shape(const TensorT& o) const {
    return b == o.b && h == o.h && w == o.w && c == o.c;
  }
};

using Tensor = TensorT<float>;
using DTensor = TensorT<double>;

inline DTensor widen(const Tensor& x) {
  DTensor out(x.b, x.h, x.w, x.c);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = static_cast<double>(x.data[i]);
  return out;
}

inline Tensor narrow(const DTensor& x) {
  Tensor out(x.b, x.h, x.w, x.c);
  for (size_t i = 0; i < x.size(); ++i) out.data[i] = static_cast<float>(x.data[i]);
  return out;
}

// Per-pixel class indices for a batch of segmentation maps.
struct ClassMap {
  int b = 0, h = 0, w = 0;
  std::vector<uint8_t> data;

  ClassMap() = default;

  ClassMap(int b_, int h_, int w_, uint8_t fill = 0) : b(b_), h(h_), w(w_) {
    if (b < 1 || h < 1 || w < 1)
      throw ShapeError("class map dimensions must all be >= 1");
    data.assign(static_cast<size_t>(b) * h * w, fill);
  }

  size_t size() const { return data.size(); }

  size_t index(int bi, int y, int x) const {
    assert(bi >= 0 && bi < b && y >= 0 && y < h && x >= 0 && x < w);
    return (static_cast<size_t>(bi) * h + y) * static_cast<size_t>(w) + x;
  }

  uint8_t& at(int bi, int y, int x) { return data[index(bi, y, x)]; }
  const uint8_t& at(int bi, int y, int x) const { return data[index(bi, y, x)]; }

  bool same_shape(const ClassMap& o) const { return b == o.b && h == o.h && w == o.w; }
};

}  // namespace cbna
