#include "cbna/batchnorm.hpp"

#include <cmath>
#include <string>

#include "cbna/errors.hpp"

namespace cbna {

BnLayer BnLayer::identity(int channels) {
  if (channels < 1) throw ArgumentError("BN layer needs at least one channel");
  BnLayer l;
  l.gamma.assign(static_cast<size_t>(channels), 1.0f);
  l.beta.assign(static_cast<size_t>(channels), 0.0f);
  l.running_mean.assign(static_cast<size_t>(channels), 0.0f);
  l.running_var.assign(static_cast<size_t>(channels), 1.0f);
  return l;
}

void BnLayer::validate() const {
  const size_t c = gamma.size();
  if (c == 0) throw ShapeError("BN layer has no channels");
  if (beta.size() != c || running_mean.size() != c || running_var.size() != c)
    throw ShapeError("BN parameter arrays must share one channel count");
  for (float v : running_var)
    if (v < 0.0f) throw ArgumentError("BN running variance must be elementwise >= 0");
  if (!(eps > 0.0f)) throw ArgumentError("BN eps must be > 0");
  if (momentum < 0.0f || momentum > 1.0f)
    throw ArgumentError("BN momentum must lie in [0, 1]");
}

BatchStats compute_batch_stats(const Tensor& x) {
  std::vector<double> mean, var;
  channel_mean_var(x, mean, var);
  BatchStats s;
  s.mean.resize(mean.size());
  s.var.resize(var.size());
  for (size_t i = 0; i < mean.size(); ++i) {
    s.mean[i] = static_cast<float>(mean[i]);
    s.var[i] = static_cast<float>(var[i]);
  }
  return s;
}

Tensor normalize(const Tensor& x, const BatchStats& stats, const BnLayer& layer) {
  const int c = layer.channels();
  if (x.c != c)
    throw ShapeError("normalize: input has " + std::to_string(x.c) + " channels, layer has " +
                     std::to_string(c));
  if (stats.channels() != c || stats.var.size() != static_cast<size_t>(c))
    throw ShapeError("normalize: statistics channel count does not match the layer");

  // Per-channel scale gamma * (var + eps)^(-1/2), then an affine map per element.
  std::vector<float> scale(static_cast<size_t>(c));
  for (int ci = 0; ci < c; ++ci)
    scale[ci] = static_cast<float>(
        static_cast<double>(layer.gamma[ci]) /
        std::sqrt(static_cast<double>(stats.var[ci]) + static_cast<double>(layer.eps)));

  Tensor out(x.b, x.h, x.w, x.c);
  const size_t total = x.size();
  for (size_t i = 0; i < total; i += static_cast<size_t>(c)) {
    const float* pi = &x.data[i];
    float* po = &out.data[i];
    for (int ci = 0; ci < c; ++ci)
      po[ci] = (pi[ci] - stats.mean[ci]) * scale[ci] + layer.beta[ci];
  }
  return out;
}

BnLayer update_running_stats(const BnLayer& layer, const BatchStats& batch) {
  layer.validate();
  if (batch.channels() != layer.channels())
    throw ShapeError("update_running_stats: channel mismatch");
  const double m = static_cast<double>(layer.momentum);
  BnLayer out = layer;
  for (int ci = 0; ci < layer.channels(); ++ci) {
    out.running_mean[ci] =
        static_cast<float>((1.0 - m) * static_cast<double>(layer.running_mean[ci]) +
                           m * static_cast<double>(batch.mean[ci]));
    out.running_var[ci] =
        static_cast<float>((1.0 - m) * static_cast<double>(layer.running_var[ci]) +
                           m * static_cast<double>(batch.var[ci]));
  }
  return out;
}

Tensor inference_forward(const Tensor& x, const BnLayer& layer) {
  return normalize(x, BatchStats{layer.running_mean, layer.running_var}, layer);
}

}  // namespace cbna
