#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "cbna/eval.hpp"
#include "cbna/rng.hpp"

using namespace cbna;

namespace {

// Set-based per-class IoU oracle over explicit pixel-position sets.
double set_oracle_miou(const ClassMap& pred, const ClassMap& truth, int num_classes) {
  double sum = 0.0;
  int used = 0;
  for (int s = 0; s < num_classes; ++s) {
    std::set<size_t> ps, ts;
    for (size_t i = 0; i < pred.size(); ++i) {
      if (pred.data[i] == s) ps.insert(i);
      if (truth.data[i] == s) ts.insert(i);
    }
    std::set<size_t> uni = ps;
    uni.insert(ts.begin(), ts.end());
    if (uni.empty()) continue;
    size_t inter = 0;
    for (size_t i : ps) inter += ts.count(i);
    sum += static_cast<double>(inter) / static_cast<double>(uni.size());
    ++used;
  }
  REQUIRE(used > 0);
  return sum / used;
}

Dataset small_target_dataset(uint64_t seed, int n) {
  SceneSpec spec;
  spec.seed = seed;
  return generate(spec, DomainShift::night_preset(), n);
}

}  // namespace

TEST_CASE("perfect prediction accumulates no errors") {
  ClassMap m(1, 4, 4);
  SplitMix64 rng(1);
  for (uint8_t& v : m.data) v = static_cast<uint8_t>(rng.uniform_int(0, 3));
  ConfusionAccumulator acc(3);
  accumulate(acc, m, m);
  for (int s = 0; s < 3; ++s) {
    CHECK(acc.fp[s] == 0);
    CHECK(acc.fn[s] == 0);
  }
  CHECK(miou(acc) == 1.0);
}

TEST_CASE("disjoint single-class maps confuse completely") {
  ClassMap pred(1, 4, 4, 1);
  ClassMap truth(1, 4, 4, 2);
  ConfusionAccumulator acc(3);
  accumulate(acc, pred, truth);
  CHECK(acc.fp[1] == 16);
  CHECK(acc.fn[2] == 16);
  CHECK(acc.fn[1] == 0);
  CHECK(acc.fp[2] == 0);
  CHECK(acc.tp[1] == 0);
  CHECK(acc.tp[2] == 0);
}

TEST_CASE("accumulation is order independent and merge is commutative") {
  SplitMix64 rng(2);
  ClassMap a_pred(1, 5, 5), a_truth(1, 5, 5), b_pred(1, 5, 5), b_truth(1, 5, 5);
  for (auto* m : {&a_pred, &a_truth, &b_pred, &b_truth})
    for (uint8_t& v : m->data) v = static_cast<uint8_t>(rng.uniform_int(0, 4));

  ConfusionAccumulator ab(4), ba(4);
  accumulate(ab, a_pred, a_truth);
  accumulate(ab, b_pred, b_truth);
  accumulate(ba, b_pred, b_truth);
  accumulate(ba, a_pred, a_truth);
  CHECK(ab.tp == ba.tp);
  CHECK(ab.fp == ba.fp);
  CHECK(ab.fn == ba.fn);

  ConfusionAccumulator left(4), right(4);
  accumulate(left, a_pred, a_truth);
  accumulate(right, b_pred, b_truth);
  ConfusionAccumulator merged_lr = left;
  merged_lr.merge(right);
  ConfusionAccumulator merged_rl = right;
  merged_rl.merge(left);
  CHECK(merged_lr.tp == merged_rl.tp);
  CHECK(merged_lr.tp == ab.tp);
}

TEST_CASE("truth pixels per class equal tp + fn") {
  SplitMix64 rng(3);
  ClassMap pred(2, 6, 6), truth(2, 6, 6);
  for (uint8_t& v : pred.data) v = static_cast<uint8_t>(rng.uniform_int(0, 4));
  for (uint8_t& v : truth.data) v = static_cast<uint8_t>(rng.uniform_int(0, 4));
  ConfusionAccumulator acc(4);
  accumulate(acc, pred, truth);
  for (int s = 0; s < 4; ++s) {
    uint64_t truth_count = 0;
    for (uint8_t v : truth.data)
      if (v == s) ++truth_count;
    CHECK(acc.tp[s] + acc.fn[s] == truth_count);
  }
}

TEST_CASE("miou arithmetic and the exclusion rule") {
  ConfusionAccumulator acc(3);
  acc.tp = {0, 5, 0};
  acc.fp = {0, 0, 5};
  acc.fn = {0, 0, 5};
  // class 0 absent everywhere -> excluded; classes 1 and 2 give 1.0 and 0.0.
  CHECK(miou(acc) == doctest::Approx(0.5));

  const std::vector<double> ious = per_class_iou(acc);
  CHECK(std::isnan(ious[0]));
  CHECK(ious[1] == 1.0);
  CHECK(ious[2] == 0.0);

  // A single-class scene predicted perfectly scores 1.0.
  ClassMap scene(1, 3, 3, 0);
  ConfusionAccumulator single(4);
  accumulate(single, scene, scene);
  CHECK(miou(single) == 1.0);
}

TEST_CASE("miou subset support and failure modes") {
  ConfusionAccumulator acc(4);
  acc.tp = {8, 2, 0, 0};
  acc.fp = {0, 2, 0, 0};
  acc.fn = {0, 4, 0, 0};
  const std::vector<int> subset = {0, 1};
  CHECK(miou(acc, &subset) == doctest::Approx(0.5 * (1.0 + 0.25)));
  const std::vector<int> absent = {2, 3};
  CHECK_THROWS_AS(miou(acc, &absent), MetricError);
  const std::vector<int> out_of_range = {7};
  CHECK_THROWS_AS(miou(acc, &out_of_range), ArgumentError);

  ClassMap a(1, 2, 2), b(1, 2, 3);
  CHECK_THROWS_AS(accumulate(acc, a, b), ShapeError);
}

TEST_CASE("miou matches the set-based oracle exactly") {
  SplitMix64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const int k = 2 + rng.uniform_int(0, 4);
    ClassMap pred(1, 8, 8), truth(1, 8, 8);
    for (uint8_t& v : pred.data) v = static_cast<uint8_t>(rng.uniform_int(0, k));
    for (uint8_t& v : truth.data) v = static_cast<uint8_t>(rng.uniform_int(0, k));
    ConfusionAccumulator acc(k);
    accumulate(acc, pred, truth);
    CHECK(miou(acc) == set_oracle_miou(pred, truth, k));
  }
}

TEST_CASE("eta sweep endpoints are identities") {
  const SegModel model = build_toy_model(4, 800);
  const Dataset data = small_target_dataset(900, 6);

  const double none = dataset_miou(model, data, {AdaptMode::NoAdapt, 0.0, 1});
  const auto zero_curve = sweep_eta(model, data, {0.0}, AdaptMode::Cbna);
  CHECK(zero_curve[0].miou == none);  // bit-exact identity

  const double cli = dataset_miou(model, data, {AdaptMode::CLi, 0.0, 1});
  const auto one_curve = sweep_eta(model, data, {1.0}, AdaptMode::Cbna);
  CHECK(one_curve[0].miou == doctest::Approx(cli).epsilon(1e-6));
}

TEST_CASE("parallel evaluation matches single-threaded") {
  const SegModel model = build_toy_model(4, 801);
  const Dataset data = small_target_dataset(901, 7);
  const AdaptPolicy policy{AdaptMode::Cbna, 0.3, 1};
  const double serial = dataset_miou(model, data, policy, 1);
  const double parallel = dataset_miou(model, data, policy, 4);
  CHECK(serial == parallel);
}

TEST_CASE("eta selection follows argmax, mean, then grid rounding") {
  const std::vector<double> grid = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  const auto curve = [](std::initializer_list<std::pair<double, double>> pts) {
    std::vector<SweepPoint> c;
    for (auto [e, m] : pts) c.push_back({e, m, {}});
    return c;
  };

  // Single curve with its maximum at 0.2.
  const auto single = curve({{0.0, 0.30}, {0.2, 0.45}, {0.5, 0.40}, {1.0, 0.20}});
  CHECK(select_eta({single}, grid) == 0.2);

  // Argmaxes 0.1 and 0.3 average to 0.2.
  const auto c1 = curve({{0.1, 0.50}, {0.3, 0.40}});
  const auto c2 = curve({{0.1, 0.40}, {0.3, 0.50}});
  CHECK(select_eta({c1, c2}, grid) == 0.2);

  // Ties inside a curve go to the smaller eta.
  const auto tie = curve({{0.2, 0.5}, {0.6, 0.5}});
  CHECK(select_eta({tie}, grid) == 0.2);

  // Halfway rounding goes to the smaller grid entry: mean 0.25 -> 0.2.
  const auto lo = curve({{0.2, 0.9}});
  const auto hi = curve({{0.3, 0.9}});
  CHECK(select_eta({lo, hi}, grid) == 0.2);
}

TEST_CASE("window ablation reduces to the sweep at window one") {
  const SegModel model = build_toy_model(4, 802);
  const Dataset data = small_target_dataset(902, 6);
  const auto points = ablate_window(model, data, {1, 3}, AdaptMode::Cbna, 0.3);
  const auto sweep = sweep_eta(model, data, {0.3}, AdaptMode::Cbna);
  CHECK(points[0].miou == sweep[0].miou);
  CHECK(points[0].window == 1);
  CHECK(points[1].window == 3);
}

TEST_CASE("window ablation is constant over identical frames") {
  const SegModel model = build_toy_model(4, 803);
  Dataset data = small_target_dataset(903, 1);
  // Five copies of the same frame.
  for (int i = 0; i < 4; ++i) {
    data.images.push_back(data.images[0]);
    data.labels.push_back(data.labels[0]);
  }
  const auto points = ablate_window(model, data, {1, 2, 5}, AdaptMode::Cbna, 0.4);
  CHECK(points[1].miou == doctest::Approx(points[0].miou).epsilon(1e-9));
  CHECK(points[2].miou == doctest::Approx(points[0].miou).epsilon(1e-9));
}

TEST_CASE("per-image histogram: zero-eta deltas vanish") {
  const SegModel model = build_toy_model(4, 804);
  const Dataset data = small_target_dataset(904, 6);
  const std::vector<AdaptPolicy> policies = {{AdaptMode::NoAdapt, 0.0, 1},
                                             {AdaptMode::Cbna, 0.0, 1}};
  const HistogramTable table = per_image_miou_histogram(model, data, policies);
  REQUIRE(table.has_delta);
  CHECK(table.positive_deltas == 0);
  CHECK(table.negative_deltas == 0);
  CHECK(table.zero_deltas == data.size());
  for (const auto& scores : table.per_image)
    for (double v : scores) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  // All mass sits in the delta bin containing zero.
  uint32_t total = 0;
  for (uint32_t c : table.delta_counts) total += c;
  CHECK(total == data.size());
}

TEST_CASE("histogram bin edges cover the full range") {
  const SegModel model = build_toy_model(4, 805);
  const Dataset data = small_target_dataset(905, 4);
  const HistogramTable table =
      per_image_miou_histogram(model, data, {{AdaptMode::NoAdapt, 0.0, 1}}, 0.02, 0.01);
  CHECK(table.abs_counts[0].size() == 50);
  uint32_t total = 0;
  for (uint32_t c : table.abs_counts[0]) total += c;
  CHECK(total == data.size());
  CHECK_FALSE(table.has_delta);
}
