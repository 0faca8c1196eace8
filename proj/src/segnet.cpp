#include "cbna/segnet.hpp"

#include <cmath>
#include <string>

#include "cbna/io.hpp"
#include "cbna/rng.hpp"

namespace cbna {

int SegModel::bn_count() const {
  int n = 0;
  for (const Layer& l : layers)
    if (std::holds_alternative<BnLayer>(l)) ++n;
  return n;
}

namespace {

void require_finite(const ConvKernel& k) {
  for (float v : k.weights)
    if (!std::isfinite(v)) throw ArgumentError("conv weights must be finite");
  for (float v : k.bias)
    if (!std::isfinite(v)) throw ArgumentError("conv bias must be finite");
}

}  // namespace

void SegModel::validate() const {
  if (layers.empty()) throw ShapeError("model has no layers");
  if (num_classes < 2) throw ArgumentError("model needs at least two classes");
  bool decoder_started = false;
  int skip_depth = 0;
  int heads = 0;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer& l = layers[i];
    if (std::holds_alternative<UpsampleLayer>(l)) decoder_started = true;
    if (std::holds_alternative<BnLayer>(l)) {
      if (decoder_started) throw ShapeError("BN layers are only allowed in the encoder");
      std::get<BnLayer>(l).validate();
    }
    if (std::holds_alternative<ConvLayer>(l)) require_finite(std::get<ConvLayer>(l).kernel);
    if (std::holds_alternative<DownsampleLayer>(l)) ++skip_depth;
    if (std::holds_alternative<ConcatSkipLayer>(l)) {
      if (skip_depth == 0) throw ShapeError("skip concat without a matching downsample");
      --skip_depth;
    }
    if (std::holds_alternative<HeadLayer>(l)) {
      ++heads;
      require_finite(std::get<HeadLayer>(l).kernel);
      if (std::get<HeadLayer>(l).kernel.c_out != num_classes)
        throw ShapeError("head output channels must equal num_classes");
    }
  }
  if (heads != 1) throw ShapeError("model must contain exactly one head layer");
  if (!std::holds_alternative<SoftmaxLayer>(layers.back()))
    throw ShapeError("model must end with a softmax layer");
}

namespace {

ConvKernel seeded_conv(SplitMix64& rng, int kh, int kw, int c_in, int c_out) {
  ConvKernel k;
  k.kh = kh;
  k.kw = kw;
  k.c_in = c_in;
  k.c_out = c_out;
  k.stride = 1;
  k.padding = Padding::Same;
  const double a = std::sqrt(3.0 / (static_cast<double>(kh) * kw * c_in));
  k.weights.resize(static_cast<size_t>(kh) * kw * c_in * c_out);
  for (float& wv : k.weights) wv = static_cast<float>(rng.uniform(-a, a));
  k.bias.assign(static_cast<size_t>(c_out), 0.0f);
  return k;
}

}  // namespace

SegModel build_toy_model(int num_classes, uint64_t seed) {
  if (num_classes < 2) throw ArgumentError("build_toy_model needs num_classes >= 2");

  constexpr int kInputChannels = 3;
  constexpr int kWidths[3] = {8, 16, 32};

  SegModel m;
  m.num_classes = num_classes;
  m.encoder_depth = 3;
  m.seed = seed;

  SplitMix64 rng(seed);

  int c = kInputChannels;
  for (int stage = 0; stage < 3; ++stage) {
    m.layers.emplace_back(ConvLayer{seeded_conv(rng, 3, 3, c, kWidths[stage])});
    c = kWidths[stage];
    m.layers.emplace_back(BnLayer::identity(c));
    m.layers.emplace_back(ReluLayer{});
    m.layers.emplace_back(DownsampleLayer{2});
  }
  // Decoder concatenates the upsampled path with the matching skip, so each
  // conv sees (path + skip) input channels.
  for (int stage = 2; stage >= 0; --stage) {
    const int skip_c = kWidths[stage];
    const int out_c = kWidths[stage];
    m.layers.emplace_back(UpsampleLayer{2});
    m.layers.emplace_back(ConcatSkipLayer{});
    m.layers.emplace_back(ConvLayer{seeded_conv(rng, 3, 3, c + skip_c, out_c)});
    m.layers.emplace_back(ReluLayer{});
    c = out_c;
  }
  m.layers.emplace_back(HeadLayer{seeded_conv(rng, 1, 1, c, num_classes)});
  m.layers.emplace_back(SoftmaxLayer{});

  m.validate();
  return m;
}

SegOutput forward(const SegModel& model, const Tensor& x, const BnStatsProvider& stats) {
  model.validate();
  Tensor cur = x;
  std::vector<Tensor> skips;
  int bn_index = 0;
  for (const Layer& l : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      cur = conv2d(cur, conv->kernel);
    } else if (const auto* bn = std::get_if<BnLayer>(&l)) {
      const BatchStats s = stats(bn_index, *bn, cur);
      cur = normalize(cur, s, *bn);
      ++bn_index;
    } else if (std::holds_alternative<ReluLayer>(l)) {
      cur = relu(cur);
    } else if (const auto* down = std::get_if<DownsampleLayer>(&l)) {
      skips.push_back(cur);
      cur = downsample_mean(cur, down->factor);
    } else if (const auto* up = std::get_if<UpsampleLayer>(&l)) {
      cur = upsample_nearest(cur, up->factor);
    } else if (std::holds_alternative<ConcatSkipLayer>(l)) {
      cur = concat_channels(cur, skips.back());
      skips.pop_back();
    } else if (const auto* head = std::get_if<HeadLayer>(&l)) {
      cur = conv2d(cur, head->kernel);
    } else {
      cur = softmax_channels(cur);
    }
  }
  SegOutput out;
  out.classes = argmax_channels(cur);
  out.posteriors = std::move(cur);
  return out;
}

SegOutput forward(const SegModel& model, const Tensor& x) {
  return forward(model, x, [](int, const BnLayer& layer, const Tensor&) {
    return BatchStats{layer.running_mean, layer.running_var};
  });
}

namespace {

constexpr char kMagic[4] = {'C', 'B', 'N', 'A'};
constexpr uint32_t kVersion = 1;

enum LayerTag : uint32_t {
  kTagConv = 0,
  kTagBn = 1,
  kTagRelu = 2,
  kTagDown = 3,
  kTagUp = 4,
  kTagConcat = 5,
  kTagHead = 6,
  kTagSoftmax = 7,
};

void put_conv(ByteWriter& w, const ConvKernel& k) {
  w.put_u32(static_cast<uint32_t>(k.kh));
  w.put_u32(static_cast<uint32_t>(k.kw));
  w.put_u32(static_cast<uint32_t>(k.c_in));
  w.put_u32(static_cast<uint32_t>(k.c_out));
  w.put_u32(static_cast<uint32_t>(k.stride));
  w.put_u8(static_cast<uint8_t>(k.padding));
  w.put_f32_array(k.weights);
  w.put_f32_array(k.bias);
}

ConvKernel get_conv(ByteReader& r) {
  ConvKernel k;
  k.kh = static_cast<int>(r.get_u32());
  k.kw = static_cast<int>(r.get_u32());
  k.c_in = static_cast<int>(r.get_u32());
  k.c_out = static_cast<int>(r.get_u32());
  k.stride = static_cast<int>(r.get_u32());
  const uint8_t pad = r.get_u8();
  if (pad > 1) throw FormatError("checkpoint: unknown padding tag");
  k.padding = static_cast<Padding>(pad);
  if (k.kh < 1 || k.kw < 1 || k.c_in < 1 || k.c_out < 1 || k.stride < 1 ||
      static_cast<size_t>(k.kh) * k.kw * k.c_in * k.c_out > (1u << 28))
    throw FormatError("checkpoint: implausible conv dimensions");
  k.weights = r.get_f32_array(static_cast<size_t>(k.kh) * k.kw * k.c_in * k.c_out);
  k.bias = r.get_f32_array(static_cast<size_t>(k.c_out));
  return k;
}

}  // namespace

std::vector<uint8_t> save_checkpoint(const SegModel& model) {
  model.validate();
  ByteWriter w;
  w.put_magic(kMagic);
  w.put_u32(kVersion);
  w.put_u32(static_cast<uint32_t>(model.num_classes));
  w.put_u32(static_cast<uint32_t>(model.encoder_depth));
  w.put_u64(model.seed);
  w.put_u32(static_cast<uint32_t>(model.layers.size()));
  for (const Layer& l : model.layers) {
    if (const auto* conv = std::get_if<ConvLayer>(&l)) {
      w.put_u32(kTagConv);
      put_conv(w, conv->kernel);
    } else if (const auto* bn = std::get_if<BnLayer>(&l)) {
      w.put_u32(kTagBn);
      w.put_u32(static_cast<uint32_t>(bn->channels()));
      w.put_f32(bn->eps);
      w.put_f32(bn->momentum);
      w.put_f32_array(bn->gamma);
      w.put_f32_array(bn->beta);
      w.put_f32_array(bn->running_mean);
      w.put_f32_array(bn->running_var);
    } else if (std::holds_alternative<ReluLayer>(l)) {
      w.put_u32(kTagRelu);
    } else if (const auto* down = std::get_if<DownsampleLayer>(&l)) {
      w.put_u32(kTagDown);
      w.put_u32(static_cast<uint32_t>(down->factor));
    } else if (const auto* up = std::get_if<UpsampleLayer>(&l)) {
      w.put_u32(kTagUp);
      w.put_u32(static_cast<uint32_t>(up->factor));
    } else if (std::holds_alternative<ConcatSkipLayer>(l)) {
      w.put_u32(kTagConcat);
    } else if (const auto* head = std::get_if<HeadLayer>(&l)) {
      w.put_u32(kTagHead);
      put_conv(w, head->kernel);
    } else {
      w.put_u32(kTagSoftmax);
    }
  }
  return std::move(w.bytes);
}

SegModel load_checkpoint(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes, "checkpoint");
  r.expect_magic(kMagic);
  const uint32_t version = r.get_u32();
  if (version != kVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version));
  SegModel m;
  m.num_classes = static_cast<int>(r.get_u32());
  m.encoder_depth = static_cast<int>(r.get_u32());
  m.seed = r.get_u64();
  const uint32_t count = r.get_u32();
  if (count > 4096) throw FormatError("checkpoint: implausible layer count");
  for (uint32_t i = 0; i < count; ++i) {
    const uint32_t tag = r.get_u32();
    switch (tag) {
      case kTagConv:
        m.layers.emplace_back(ConvLayer{get_conv(r)});
        break;
      case kTagBn: {
        const uint32_t c = r.get_u32();
        if (c == 0 || c > (1u << 20)) throw FormatError("checkpoint: implausible BN width");
        BnLayer bn;
        bn.eps = r.get_f32();
        bn.momentum = r.get_f32();
        bn.gamma = r.get_f32_array(c);
        bn.beta = r.get_f32_array(c);
        bn.running_mean = r.get_f32_array(c);
        bn.running_var = r.get_f32_array(c);
        m.layers.emplace_back(std::move(bn));
        break;
      }
      case kTagRelu:
        m.layers.emplace_back(ReluLayer{});
        break;
      case kTagDown:
        m.layers.emplace_back(DownsampleLayer{static_cast<int>(r.get_u32())});
        break;
      case kTagUp:
        m.layers.emplace_back(UpsampleLayer{static_cast<int>(r.get_u32())});
        break;
      case kTagConcat:
        m.layers.emplace_back(ConcatSkipLayer{});
        break;
      case kTagHead:
        m.layers.emplace_back(HeadLayer{get_conv(r)});
        break;
      case kTagSoftmax:
        m.layers.emplace_back(SoftmaxLayer{});
        break;
      default:
        throw FormatError("checkpoint: unknown layer tag " + std::to_string(tag));
    }
  }
  r.expect_end();
  m.validate();
  return m;
}

void save_checkpoint_file(const SegModel& model, const std::filesystem::path& path) {
  write_file_bytes(path, save_checkpoint(model));
}

SegModel load_checkpoint_file(const std::filesystem::path& path) {
  return load_checkpoint(read_file_bytes(path));
}

}  // namespace cbna
