#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbna/rng.hpp"
#include "cbna/segnet.hpp"

using namespace cbna;

namespace {

Tensor random_image(SplitMix64& rng, int h, int w) {
  Tensor x(1, h, w, 3);
  for (float& v : x.data) v = static_cast<float>(rng.uniform01());
  return x;
}

}  // namespace

TEST_CASE("same seed builds byte-identical checkpoints") {
  const SegModel a = build_toy_model(4, 1234);
  const SegModel b = build_toy_model(4, 1234);
  CHECK(save_checkpoint(a) == save_checkpoint(b));
  const SegModel c = build_toy_model(4, 1235);
  CHECK(save_checkpoint(a) != save_checkpoint(c));
}

TEST_CASE("forward shape contract and softmax normalization") {
  const SegModel m = build_toy_model(4, 9);
  SplitMix64 rng(2);
  const Tensor x = random_image(rng, 64, 64);
  const SegOutput out = forward(m, x);
  CHECK(out.posteriors.b == 1);
  CHECK(out.posteriors.h == 64);
  CHECK(out.posteriors.w == 64);
  CHECK(out.posteriors.c == 4);
  CHECK(out.classes.h == 64);
  for (int y = 0; y < 64; y += 7)
    for (int xx = 0; xx < 64; xx += 7) {
      double sum = 0.0;
      for (int c = 0; c < 4; ++c) sum += out.posteriors.at(0, y, xx, c);
      CHECK(std::abs(sum - 1.0) <= 1e-5);
    }
}

TEST_CASE("spatial size is preserved for divisible inputs") {
  const SegModel m = build_toy_model(3, 5);
  SplitMix64 rng(3);
  for (int size : {16, 32, 64}) {
    const Tensor x = random_image(rng, size, size);
    const SegOutput out = forward(m, x);
    CHECK(out.posteriors.h == size);
    CHECK(out.posteriors.w == size);
  }
}

TEST_CASE("forward is deterministic") {
  const SegModel m = build_toy_model(4, 77);
  Tensor x(1, 16, 16, 3);  // zero image
  const SegOutput a = forward(m, x);
  const SegOutput b = forward(m, x);
  CHECK(a.posteriors.data == b.posteriors.data);
  CHECK(a.classes.data == b.classes.data);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const SegModel m = build_toy_model(4, 7);
  const std::vector<uint8_t> bytes = save_checkpoint(m);
  const SegModel loaded = load_checkpoint(bytes);
  CHECK(save_checkpoint(loaded) == bytes);
  CHECK(loaded.num_classes == 4);
  CHECK(loaded.seed == 7);
  CHECK(loaded.encoder_depth == 3);
}

TEST_CASE("checkpoint from a seed equals the rebuilt model") {
  const std::vector<uint8_t> bytes = save_checkpoint(build_toy_model(4, 7));
  CHECK(load_checkpoint(bytes).seed == 7);
  CHECK(save_checkpoint(build_toy_model(4, 7)) == bytes);
}

TEST_CASE("corrupted checkpoints are rejected whole") {
  std::vector<uint8_t> bytes = save_checkpoint(build_toy_model(4, 7));

  std::vector<uint8_t> bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_AS(load_checkpoint(bad_magic), FormatError);

  std::vector<uint8_t> truncated(bytes.begin(), bytes.begin() + bytes.size() / 2);
  CHECK_THROWS_AS(load_checkpoint(truncated), FormatError);

  std::vector<uint8_t> trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(load_checkpoint(trailing), FormatError);
}

TEST_CASE("model validation catches structural mistakes") {
  SegModel m = build_toy_model(4, 1);
  // BN after the first upsample lands in the decoder.
  for (size_t i = 0; i < m.layers.size(); ++i)
    if (std::holds_alternative<UpsampleLayer>(m.layers[i])) {
      m.layers.insert(m.layers.begin() + static_cast<ptrdiff_t>(i) + 1,
                      Layer{BnLayer::identity(32)});
      break;
    }
  CHECK_THROWS_AS(m.validate(), ShapeError);

  SegModel head_mismatch = build_toy_model(4, 1);
  head_mismatch.num_classes = 5;
  CHECK_THROWS_AS(head_mismatch.validate(), ShapeError);
}

TEST_CASE("stats provider receives layers in network order") {
  const SegModel m = build_toy_model(4, 3);
  SplitMix64 rng(4);
  const Tensor x = random_image(rng, 16, 16);
  std::vector<int> seen;
  std::vector<int> channels;
  forward(m, x, [&](int bn_index, const BnLayer& layer, const Tensor& input) {
    seen.push_back(bn_index);
    channels.push_back(layer.channels());
    CHECK(input.c == layer.channels());
    return BatchStats{layer.running_mean, layer.running_var};
  });
  CHECK(seen == std::vector<int>{0, 1, 2});
  CHECK(channels == std::vector<int>{8, 16, 32});
}
