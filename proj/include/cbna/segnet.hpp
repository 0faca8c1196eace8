#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <variant>
#include <vector>

#include "cbna/batchnorm.hpp"
#include "cbna/kernels.hpp"

namespace cbna {

struct ConvLayer {
  ConvKernel kernel;
};
struct ReluLayer {};
// Mean pooling by `factor`; its input is also recorded as the skip source
// for the matching ConcatSkipLayer (stack discipline, LIFO).
struct DownsampleLayer {
  int factor = 2;
};
struct UpsampleLayer {
  int factor = 2;
};
struct ConcatSkipLayer {};
// 1x1 projection onto class logits.
struct HeadLayer {
  ConvKernel kernel;
};
struct SoftmaxLayer {};

using Layer = std::variant<ConvLayer, BnLayer, ReluLayer, DownsampleLayer, UpsampleLayer,
                           ConcatSkipLayer, HeadLayer, SoftmaxLayer>;

// Encoder-decoder segmentation model. BN layers live in the encoder only;
// models are immutable once built or loaded.
struct SegModel {
  std::vector<Layer> layers;
  int num_classes = 0;
  int encoder_depth = 0;
  uint64_t seed = 0;

  int bn_count() const;
  void validate() const;
};

struct SegOutput {
  Tensor posteriors;  // B x H x W x num_classes, per-pixel class probabilities
  ClassMap classes;   // argmax with ties to the lowest index
};

// Fixed toy architecture: three encoder stages of
// [conv3x3 -> BN -> relu -> mean-pool /2] at widths (8, 16, 32), a mirrored
// decoder of [upsample x2 -> concat skip -> conv3x3 -> relu], and a 1x1 head
// with pixel-wise softmax. Weights come from a seeded SplitMix64 stream,
// uniform in [-a, a] with a = sqrt(3 / fan_in); biases start at zero and BN
// at gamma=1, beta=0, mean=0, var=1. The same seed rebuilds the same bytes.
SegModel build_toy_model(int num_classes, uint64_t seed);

// Called at each BN layer in network order to choose the normalization
// statistics. This hook is where the adaptation strategies plug in.
using BnStatsProvider =
    std::function<BatchStats(int bn_index, const BnLayer& layer, const Tensor& input)>;

SegOutput forward(const SegModel& model, const Tensor& x, const BnStatsProvider& stats);

// Forward with each layer's stored source statistics.
SegOutput forward(const SegModel& model, const Tensor& x);

// Checkpoint bytes: magic "CBNA", little-endian fields throughout, layers in
// declaration order. See docs/formats.md for the field-by-field layout.
std::vector<uint8_t> save_checkpoint(const SegModel& model);
SegModel load_checkpoint(const std::vector<uint8_t>& bytes);

void save_checkpoint_file(const SegModel& model, const std::filesystem::path& path);
SegModel load_checkpoint_file(const std::filesystem::path& path);

}  // namespace cbna
