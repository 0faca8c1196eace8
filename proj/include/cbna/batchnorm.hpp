#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "cbna/tensor.hpp"

namespace cbna {

// Channel-wise first and second moments of a feature tensor.
struct BatchStats {
  std::vector<float> mean;
  std::vector<float> var;  // elementwise >= 0

  int channels() const { return static_cast<int>(mean.size()); }
};

// Batch-normalization layer: learnable scale/shift plus the source-domain
// running statistics frozen at the end of training.
struct BnLayer {
  std::vector<float> gamma, beta;
  std::vector<float> running_mean, running_var;
  float eps = 1e-5f;
  float momentum = 0.1f;

  static BnLayer identity(int channels);

  int channels() const { return static_cast<int>(gamma.size()); }
  void validate() const;
};

// Population mean/variance per channel, reduced over batch and both spatial
// dims. The reduction spans b*h*w elements, so it accumulates in double.
// Variance uses the biased estimator (divide by b*h*w) and clamps rounding
// negatives to zero.
template <typename T>
void channel_mean_var(const TensorT<T>& x, std::vector<double>& mean, std::vector<double>& var) {
  const double n = static_cast<double>(x.b) * x.h * x.w;
  mean.assign(static_cast<size_t>(x.c), 0.0);
  var.assign(static_cast<size_t>(x.c), 0.0);
  const T* p = x.data.data();
  const size_t total = x.size();
  for (size_t i = 0; i < total; i += static_cast<size_t>(x.c))
    for (int ci = 0; ci < x.c; ++ci) mean[ci] += static_cast<double>(p[i + ci]);
  for (int ci = 0; ci < x.c; ++ci) mean[ci] /= n;
  for (size_t i = 0; i < total; i += static_cast<size_t>(x.c))
    for (int ci = 0; ci < x.c; ++ci) {
      const double d = static_cast<double>(p[i + ci]) - mean[ci];
      var[ci] += d * d;
    }
  for (int ci = 0; ci < x.c; ++ci) var[ci] = std::max(var[ci] / n, 0.0);
}

BatchStats compute_batch_stats(const Tensor& x);

// Normalizes with the statistics the *caller* passes in; which statistics
// those are (stored, per-image, or a blend) is the whole adaptation hook.
Tensor normalize(const Tensor& x, const BatchStats& stats, const BnLayer& layer);

// Exponential tracking of the running statistics; returns the updated layer.
BnLayer update_running_stats(const BnLayer& layer, const BatchStats& batch);

// Normalization with the layer's stored running statistics.
Tensor inference_forward(const Tensor& x, const BnLayer& layer);

}  // namespace cbna
