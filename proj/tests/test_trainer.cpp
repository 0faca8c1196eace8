#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cbna/adapt.hpp"
#include "cbna/rng.hpp"
#include "cbna/trainer.hpp"

using namespace cbna;

namespace {

ConvKernel seeded_kernel(SplitMix64& rng, int kh, int kw, int ci, int co, float bias = 0.1f) {
  ConvKernel k;
  k.kh = kh;
  k.kw = kw;
  k.c_in = ci;
  k.c_out = co;
  k.weights.resize(static_cast<size_t>(kh) * kw * ci * co);
  const double s = std::sqrt(3.0 / (kh * kw * ci));
  for (float& v : k.weights) v = static_cast<float>(rng.uniform(-s, s));
  k.bias.assign(static_cast<size_t>(co), bias);
  return k;
}

SegModel conv_bn_head_fragment(uint64_t seed, int classes = 3) {
  SplitMix64 rng(seed);
  SegModel m;
  m.num_classes = classes;
  m.layers.emplace_back(ConvLayer{seeded_kernel(rng, 3, 3, 3, 4)});
  m.layers.emplace_back(BnLayer::identity(4));
  m.layers.emplace_back(ReluLayer{});
  m.layers.emplace_back(HeadLayer{seeded_kernel(rng, 1, 1, 4, classes)});
  m.layers.emplace_back(SoftmaxLayer{});
  return m;
}

Dataset tiny_dataset(uint64_t seed, int n) {
  SceneSpec spec;
  spec.seed = seed;
  return generate(spec, DomainShift::none(), n);
}

}  // namespace

TEST_CASE("class weights from frequencies") {
  // Two equally frequent classes.
  ClassWeights cw = class_weights_from_frequencies({50, 50});
  CHECK(cw.w[0] == doctest::Approx(1.0 / std::log(1.52)));
  CHECK(cw.w[0] == doctest::Approx(2.3883).epsilon(1e-3));
  CHECK(cw.w[1] == doctest::Approx(cw.w[0]));

  // A dominant class gets the smallest weight.
  cw = class_weights_from_frequencies({98, 1, 1});
  CHECK(cw.w[0] == doctest::Approx(1.0 / std::log(2.0)));
  CHECK(cw.w[0] == doctest::Approx(1.4427).epsilon(1e-3));
  CHECK(cw.w[0] < cw.w[1]);
  CHECK(cw.w[0] < cw.w[2]);

  // Zero-pixel classes land at the maximum weight.
  cw = class_weights_from_frequencies({10, 0});
  CHECK(cw.w[1] == doctest::Approx(1.0 / std::log(1.02)));

  CHECK_THROWS_AS(class_weights_from_frequencies({0, 0, 0}), ArgumentError);
}

TEST_CASE("class weights are monotone in frequency") {
  SplitMix64 rng(40);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<uint64_t> counts(4);
    for (auto& c : counts) c = static_cast<uint64_t>(rng.uniform_int(0, 1000));
    counts[0] += 1;  // keep the total positive
    const ClassWeights cw = class_weights_from_frequencies(counts);
    for (size_t a = 0; a < counts.size(); ++a)
      for (size_t b = 0; b < counts.size(); ++b)
        if (counts[a] < counts[b]) CHECK(cw.w[a] > cw.w[b]);
  }
}

TEST_CASE("weighted cross-entropy on known posteriors") {
  // Perfect one-hot posteriors give zero loss.
  Tensor post(1, 2, 2, 3);
  ClassMap labels(1, 2, 2);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      const int cls = (y + x) % 3;
      labels.at(0, y, x) = static_cast<uint8_t>(cls);
      post.at(0, y, x, cls) = 1.0f;
    }
  CHECK(weighted_ce_loss(post, labels, unit_weights(3)) == doctest::Approx(0.0));

  // Uniform posteriors over four classes with unit weights cost ln 4.
  Tensor uniform(2, 3, 3, 4, 0.25f);
  ClassMap any(2, 3, 3, 2);
  CHECK(weighted_ce_loss(uniform, any, unit_weights(4)) ==
        doctest::Approx(std::log(4.0)).epsilon(1e-6));

  // Doubling every weight doubles the loss.
  ClassWeights doubled = unit_weights(4);
  for (double& w : doubled.w) w = 2.0;
  CHECK(weighted_ce_loss(uniform, any, doubled) ==
        doctest::Approx(2.0 * std::log(4.0)).epsilon(1e-6));

  // Labels beyond the class count are data errors.
  ClassMap bad(2, 3, 3, 7);
  CHECK_THROWS_AS(weighted_ce_loss(uniform, bad, unit_weights(4)), DataError);
}

TEST_CASE("gradient check: conv+relu+head fragment") {
  SplitMix64 rng(60);
  SegModel m = conv_bn_head_fragment(61);
  m.layers.erase(m.layers.begin() + 1);  // drop the BN layer
  Tensor x(1, 6, 6, 3);
  for (float& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  ClassMap labels(1, 6, 6);
  for (uint8_t& v : labels.data) v = static_cast<uint8_t>(rng.uniform_int(0, 3));
  CHECK(check_gradients(m, x, labels) < 1e-3);
}

TEST_CASE("gradient check: training-mode BN including gamma/beta") {
  SplitMix64 rng(61);
  const SegModel m = conv_bn_head_fragment(62);
  Tensor x(2, 6, 6, 3);
  for (float& v : x.data) v = static_cast<float>(rng.uniform(0.0, 1.0));
  ClassMap labels(2, 6, 6);
  for (uint8_t& v : labels.data) v = static_cast<uint8_t>(rng.uniform_int(0, 3));
  CHECK(check_gradients(m, x, labels) < 1e-3);
}

TEST_CASE("zero input reduces the head bias gradient to softmax minus one-hot") {
  SplitMix64 rng(62);
  SegModel m;
  m.num_classes = 3;
  ConvKernel head = seeded_kernel(rng, 1, 1, 3, 3, 0.0f);
  head.bias = {0.3f, -0.2f, 0.1f};
  m.layers.emplace_back(HeadLayer{head});
  m.layers.emplace_back(SoftmaxLayer{});

  Tensor x(1, 4, 4, 3);  // all zeros: logits equal the bias everywhere
  ClassMap labels(1, 4, 4, 0);

  TrainNet net(m);
  net.forward(widen(x));
  net.loss_and_grad_logits(labels, unit_weights(3));
  net.backward();

  // Closed form: softmax(bias) - onehot(0), identical at every pixel. The
  // biases are stored as f32, so the reference starts from the f32 values.
  const double m0 = std::exp(static_cast<double>(head.bias[0]));
  const double m1 = std::exp(static_cast<double>(head.bias[1]));
  const double m2 = std::exp(static_cast<double>(head.bias[2]));
  const double z = m0 + m1 + m2;
  const double expect[3] = {m0 / z - 1.0, m1 / z, m2 / z};
  const size_t weight_count = head.weights.size();
  for (int c = 0; c < 3; ++c)
    CHECK(net.grad(weight_count + static_cast<size_t>(c)) ==
          doctest::Approx(expect[c]).epsilon(1e-9));
}

TEST_CASE("fragment size limit for the gradient checker") {
  const SegModel big = build_toy_model(4, 5);  // tens of thousands of parameters
  Tensor x(1, 8, 8, 3);
  ClassMap labels(1, 8, 8);
  CHECK_THROWS_AS(check_gradients(big, x, labels), ArgumentError);
}

TEST_CASE("overfitting a single sample drives the loss down") {
  Dataset data = tiny_dataset(700, 1);
  TrainConfig cfg;
  cfg.epochs = 120;
  cfg.batch_size = 1;
  cfg.lr = 2e-2;
  cfg.lr_final = 5e-3;
  cfg.seed = 5;
  cfg.augment_flip = false;
  TrainLog log;
  train(build_toy_model(4, 3), data, cfg, nullptr, &log);
  REQUIRE(!log.empty());
  CHECK(log.back().loss < 0.05);
}

TEST_CASE("training is deterministic given the seed") {
  Dataset data = tiny_dataset(701, 6);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.seed = 9;
  const SegModel a = train(build_toy_model(4, 3), data, cfg);
  const SegModel b = train(build_toy_model(4, 3), data, cfg);
  CHECK(save_checkpoint(a) == save_checkpoint(b));
}

TEST_CASE("running statistics converge onto constant batch statistics") {
  // With a vanishing learning rate and no augmentation the batch statistics
  // are the same every step, so after K steps the running values sit within
  // (1-eta)^K of them.
  Dataset data = tiny_dataset(702, 1);
  TrainConfig cfg;
  cfg.epochs = 80;  // one step per epoch
  cfg.batch_size = 1;
  cfg.lr = 1e-30;
  cfg.lr_final = 1e-30;
  cfg.momentum_bn = 0.2;
  cfg.augment_flip = false;
  const SegModel init = build_toy_model(4, 21);
  const SegModel trained = train(init, data, cfg);

  // Reference: one training-mode forward of the frozen net gives the constant
  // per-layer batch statistics.
  TrainNet probe(init);
  DTensor x(1, 64, 64, 3);
  for (size_t i = 0; i < x.size(); ++i)
    x.data[i] = static_cast<double>(data.images[0].data[i]);
  probe.forward(x);
  probe.track_running_stats(1.0);  // running <- batch

  int bn_index = 0;
  const double decay = std::pow(1.0 - cfg.momentum_bn, 80);
  for (const Layer& l : trained.layers) {
    const auto* bn = std::get_if<BnLayer>(&l);
    if (!bn) continue;
    const auto [bmean, bvar] = probe.running_stats(bn_index);
    for (int c = 0; c < bn->channels(); ++c) {
      // Initial running stats are (0, 1); the closed form interpolates.
      const double expect_mean = (1.0 - decay) * bmean[static_cast<size_t>(c)];
      const double expect_var = decay * 1.0 + (1.0 - decay) * bvar[static_cast<size_t>(c)];
      CHECK(std::abs(bn->running_mean[c] - expect_mean) <= 1e-5);
      CHECK(std::abs(bn->running_var[c] - expect_var) <= 1e-5);
    }
    ++bn_index;
  }
}

TEST_CASE("loss decreases from the first to the last epoch") {
  Dataset data = tiny_dataset(703, 16);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.lr = 2e-3;
  cfg.lr_final = 1e-3;
  cfg.seed = 3;
  TrainLog log;
  train(build_toy_model(4, 8), data, cfg, nullptr, &log);
  double first = 0.0, last = 0.0;
  int nf = 0, nl = 0;
  for (const TrainStep& s : log) {
    if (s.epoch == 0) {
      first += s.loss;
      ++nf;
    }
    if (s.epoch == cfg.epochs - 1) {
      last += s.loss;
      ++nl;
    }
  }
  REQUIRE(nf > 0);
  REQUIRE(nl > 0);
  CHECK(last / nl < first / nf);
}

TEST_CASE("learning-rate schedule drops for the last quarter") {
  Dataset data = tiny_dataset(704, 8);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch_size = 8;
  cfg.lr = 1e-3;
  cfg.lr_final = 1e-4;
  TrainLog log;
  train(build_toy_model(4, 2), data, cfg, nullptr, &log);
  for (const TrainStep& s : log)
    CHECK(s.lr == (s.epoch >= 6 ? cfg.lr_final : cfg.lr));
}

TEST_CASE("mixed batches draw half from each dataset") {
  Dataset a = tiny_dataset(705, 12);
  Dataset b = tiny_dataset(706, 12);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  TrainLog log;
  train(build_toy_model(4, 4), a, cfg, &b, &log);
  REQUIRE(!log.empty());
  for (const TrainStep& s : log) {
    CHECK(s.n_primary == 4);
    CHECK(s.n_secondary == 4);
  }
}

TEST_CASE("divergence raises a training error carrying the step") {
  Dataset data = tiny_dataset(707, 4);
  // A plain linear conv stack (no BN to re-normalize, no relu to zero out
  // runaway units) overflows within a handful of steps at an absurd rate.
  SplitMix64 rng(70);
  SegModel m;
  m.num_classes = 4;
  m.layers.emplace_back(ConvLayer{seeded_kernel(rng, 3, 3, 3, 4)});
  m.layers.emplace_back(ConvLayer{seeded_kernel(rng, 3, 3, 4, 4)});
  m.layers.emplace_back(HeadLayer{seeded_kernel(rng, 1, 1, 4, 4)});
  m.layers.emplace_back(SoftmaxLayer{});
  TrainConfig cfg;
  cfg.epochs = 40;
  cfg.batch_size = 4;
  cfg.lr = 1e12;
  cfg.lr_final = 1e12;
  try {
    train(m, data, cfg);
    FAIL("expected TrainError");
  } catch (const TrainError& e) {
    CHECK(std::string(e.what()).find("step") != std::string::npos);
  }
}

TEST_CASE("training-mode forward agrees with the inference engine") {
  // A single-image batch normalized with its own statistics is exactly the
  // per-image-statistics inference path, up to f32/f64 rounding.
  const SegModel m = build_toy_model(4, 44);
  SplitMix64 rng(3);
  Tensor x(1, 32, 32, 3);
  for (float& v : x.data) v = static_cast<float>(rng.uniform01());

  TrainNet net(m);
  const DTensor& post = net.forward(widen(x));
  const Tensor from_adapt = adapt_forward(m, x, {AdaptMode::CLi, 0.0, 1}).first.posteriors;
  double worst = 0.0;
  for (size_t i = 0; i < post.size(); ++i)
    worst = std::max(worst, std::abs(post.data[i] - static_cast<double>(from_adapt.data[i])));
  CHECK(worst < 1e-4);
}
