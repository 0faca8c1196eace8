#include "cbna/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <thread>

#include "cbna/io.hpp"

namespace cbna {

ConfusionAccumulator::ConfusionAccumulator(int num_classes) {
  if (num_classes < 1) throw ArgumentError("need at least one class");
  tp.assign(static_cast<size_t>(num_classes), 0);
  fp.assign(static_cast<size_t>(num_classes), 0);
  fn.assign(static_cast<size_t>(num_classes), 0);
}

void ConfusionAccumulator::merge(const ConfusionAccumulator& other) {
  if (other.num_classes() != num_classes())
    throw ArgumentError("cannot merge accumulators with different class counts");
  for (size_t i = 0; i < tp.size(); ++i) {
    tp[i] += other.tp[i];
    fp[i] += other.fp[i];
    fn[i] += other.fn[i];
  }
}

void accumulate(ConfusionAccumulator& acc, const ClassMap& pred, const ClassMap& truth) {
  if (!pred.same_shape(truth))
    throw ShapeError("accumulate: prediction and truth shapes disagree");
  const size_t k = acc.tp.size();
  for (size_t i = 0; i < pred.size(); ++i) {
    const uint8_t p = pred.data[i];
    const uint8_t t = truth.data[i];
    if (p >= k || t >= k) throw DataError("class index exceeds the accumulator's class count");
    if (p == t) {
      ++acc.tp[p];
    } else {
      ++acc.fp[p];
      ++acc.fn[t];
    }
  }
}

double miou(const ConfusionAccumulator& acc, const std::vector<int>* subset) {
  double sum = 0.0;
  int used = 0;
  const auto consider = [&](int s) {
    const uint64_t denom = acc.tp[s] + acc.fp[s] + acc.fn[s];
    if (denom == 0) return;  // class absent from prediction and truth
    sum += static_cast<double>(acc.tp[s]) / static_cast<double>(denom);
    ++used;
  };
  if (subset) {
    for (int s : *subset) {
      if (s < 0 || s >= acc.num_classes()) throw ArgumentError("subset class out of range");
      consider(s);
    }
  } else {
    for (int s = 0; s < acc.num_classes(); ++s) consider(s);
  }
  if (used == 0) throw MetricError("mIoU undefined: no class has any support");
  return sum / used;
}

std::vector<double> per_class_iou(const ConfusionAccumulator& acc) {
  std::vector<double> out(static_cast<size_t>(acc.num_classes()),
                          std::numeric_limits<double>::quiet_NaN());
  for (int s = 0; s < acc.num_classes(); ++s) {
    const uint64_t denom = acc.tp[s] + acc.fp[s] + acc.fn[s];
    if (denom > 0) out[s] = static_cast<double>(acc.tp[s]) / static_cast<double>(denom);
  }
  return out;
}

namespace {

// Stacks frames [first, last] of the dataset into one batch tensor.
Tensor stack_window(const Dataset& data, size_t first, size_t last) {
  const Tensor& head = data.images[first];
  Tensor out(static_cast<int>(last - first + 1), head.h, head.w, head.c);
  const size_t frame = static_cast<size_t>(head.h) * head.w * head.c;
  for (size_t i = first; i <= last; ++i)
    std::copy(data.images[i].data.begin(), data.images[i].data.end(),
              out.data.begin() + static_cast<ptrdiff_t>((i - first) * frame));
  return out;
}

ClassMap infer_one(const SegModel& model, const Dataset& data, size_t index,
                   const AdaptPolicy& policy) {
  const int win = std::min<int>(policy.window, static_cast<int>(index) + 1);
  AdaptPolicy p = policy;
  p.window = win;
  const Tensor frames = stack_window(data, index + 1 - static_cast<size_t>(win), index);
  auto [out, rep] = adapt_forward(model, frames, p);
  return std::move(out.classes);
}

// Runs fn(i) for i in [0, n); worker results merge in index order.
void parallel_images(size_t n, int jobs, const std::function<void(size_t, int)>& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1 || n < 2) {
    for (size_t i = 0; i < n; ++i) fn(i, 0);
    return;
  }
  const int workers = std::min<int>(jobs, static_cast<int>(n));
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&, t]() {
      for (size_t i = static_cast<size_t>(t); i < n; i += static_cast<size_t>(workers))
        fn(i, t);
    });
  for (auto& th : pool) th.join();
}

}  // namespace

double dataset_miou(const SegModel& model, const Dataset& data, const AdaptPolicy& policy,
                    int jobs, ConfusionAccumulator* out_acc) {
  policy.validate();
  if (data.size() == 0) throw ArgumentError("evaluation dataset is empty");
  const int k = data.spec.num_classes;
  jobs = std::max(1, jobs);
  std::vector<ConfusionAccumulator> partial(static_cast<size_t>(jobs),
                                            ConfusionAccumulator(k));
  parallel_images(data.size(), jobs, [&](size_t i, int worker) {
    const ClassMap pred = infer_one(model, data, i, policy);
    accumulate(partial[static_cast<size_t>(worker)], pred, data.labels[i]);
  });
  ConfusionAccumulator acc(k);
  for (const auto& p : partial) acc.merge(p);
  const double m = miou(acc);
  if (out_acc) *out_acc = acc;
  return m;
}

std::vector<SweepPoint> sweep_eta(const SegModel& model, const Dataset& data,
                                  const std::vector<double>& grid, AdaptMode mode, int jobs) {
  if (grid.empty()) throw ArgumentError("sweep grid is empty");
  std::vector<SweepPoint> out;
  out.reserve(grid.size());
  for (double eta : grid) {
    AdaptPolicy policy{mode, eta, 1};
    ConfusionAccumulator acc(data.spec.num_classes);
    SweepPoint p;
    p.eta = eta;
    p.miou = dataset_miou(model, data, policy, jobs, &acc);
    p.class_iou = per_class_iou(acc);
    out.push_back(std::move(p));
  }
  return out;
}

double select_eta(const std::vector<std::vector<SweepPoint>>& curves,
                  const std::vector<double>& grid) {
  if (curves.empty()) throw ArgumentError("select_eta needs at least one curve");
  if (grid.empty()) throw ArgumentError("select_eta needs a non-empty grid");
  double mean = 0.0;
  for (const auto& curve : curves) {
    if (curve.empty()) throw ArgumentError("select_eta: empty curve");
    size_t best = 0;
    for (size_t i = 1; i < curve.size(); ++i)
      if (curve[i].miou > curve[best].miou) best = i;  // ties keep the smaller eta
    mean += curve[best].eta;
  }
  mean /= static_cast<double>(curves.size());

  double chosen = grid[0];
  for (double g : grid)
    if (std::abs(mean - g) < std::abs(mean - chosen)) chosen = g;  // ties keep the smaller
  return chosen;
}

std::vector<WindowPoint> ablate_window(const SegModel& model, const Dataset& data,
                                       const std::vector<int>& windows, AdaptMode mode,
                                       double eta, int jobs) {
  if (windows.empty()) throw ArgumentError("window list is empty");
  std::vector<WindowPoint> out;
  out.reserve(windows.size());
  for (int dn : windows) {
    AdaptPolicy policy{mode, eta, dn};
    out.push_back({dn, dataset_miou(model, data, policy, jobs)});
  }
  return out;
}

HistogramTable per_image_miou_histogram(const SegModel& model, const Dataset& data,
                                        const std::vector<AdaptPolicy>& policies,
                                        double abs_bin_width, double delta_bin_width, int jobs) {
  if (policies.empty()) throw ArgumentError("histogram needs at least one policy");
  if (!(abs_bin_width > 0.0) || !(delta_bin_width > 0.0))
    throw ArgumentError("histogram bin widths must be positive");
  if (data.size() == 0) throw ArgumentError("evaluation dataset is empty");

  HistogramTable table;
  table.abs_bin_width = abs_bin_width;
  table.delta_bin_width = delta_bin_width;

  const int k = data.spec.num_classes;
  for (const AdaptPolicy& policy : policies) {
    policy.validate();
    table.mode_labels.emplace_back(mode_name(policy.mode));
    std::vector<double> scores(data.size(), 0.0);
    parallel_images(data.size(), jobs, [&](size_t i, int) {
      ConfusionAccumulator acc(k);
      accumulate(acc, infer_one(model, data, i, policy), data.labels[i]);
      scores[i] = miou(acc);
    });
    table.per_image.push_back(std::move(scores));
  }

  const size_t abs_bins = static_cast<size_t>(std::ceil(1.0 / abs_bin_width));
  for (const auto& scores : table.per_image) {
    std::vector<uint32_t> counts(abs_bins, 0);
    for (double v : scores) {
      size_t bin = static_cast<size_t>(v / abs_bin_width);
      if (bin >= abs_bins) bin = abs_bins - 1;
      ++counts[bin];
    }
    table.abs_counts.push_back(std::move(counts));
  }

  int cbna_idx = -1, none_idx = -1;
  for (size_t i = 0; i < policies.size(); ++i) {
    if (policies[i].mode == AdaptMode::Cbna && cbna_idx < 0) cbna_idx = static_cast<int>(i);
    if (policies[i].mode == AdaptMode::NoAdapt && none_idx < 0) none_idx = static_cast<int>(i);
  }
  if (cbna_idx >= 0 && none_idx >= 0) {
    table.has_delta = true;
    const size_t delta_bins = static_cast<size_t>(std::ceil(2.0 / delta_bin_width));
    table.delta_counts.assign(delta_bins, 0);
    const auto& a = table.per_image[static_cast<size_t>(cbna_idx)];
    const auto& b = table.per_image[static_cast<size_t>(none_idx)];
    for (size_t i = 0; i < a.size(); ++i) {
      const double d = a[i] - b[i];
      if (d > 0.0)
        ++table.positive_deltas;
      else if (d < 0.0)
        ++table.negative_deltas;
      else
        ++table.zero_deltas;
      size_t bin = static_cast<size_t>((d + 1.0) / delta_bin_width);
      if (bin >= delta_bins) bin = delta_bins - 1;
      table.delta_counts[bin] = table.delta_counts[bin] + 1;
    }
  }
  return table;
}

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path) {
  if (points.empty()) throw ArgumentError("no sweep points to write");
  std::vector<std::string> header = {"eta", "miou"};
  for (size_t s = 0; s < points[0].class_iou.size(); ++s)
    header.push_back("iou_" + std::to_string(s));
  std::vector<std::vector<std::string>> rows;
  for (const SweepPoint& p : points) {
    std::vector<std::string> row = {fmt_g6(p.eta), fmt_g6(p.miou)};
    for (double v : p.class_iou) row.push_back(fmt_g6(v));
    rows.push_back(std::move(row));
  }
  write_csv(path, header, rows);
}

void write_window_csv(const std::vector<WindowPoint>& points,
                      const std::filesystem::path& path) {
  std::vector<std::vector<std::string>> rows;
  for (const WindowPoint& p : points)
    rows.push_back({std::to_string(p.window), fmt_g6(p.miou)});
  write_csv(path, {"dn", "miou"}, rows);
}

void write_hist_csv(const HistogramTable& table, const std::filesystem::path& abs_path,
                    const std::filesystem::path& delta_path) {
  std::vector<std::string> header = {"bin_low"};
  for (const std::string& m : table.mode_labels) header.push_back("count_" + m);
  std::vector<std::vector<std::string>> rows;
  const size_t bins = table.abs_counts.empty() ? 0 : table.abs_counts[0].size();
  for (size_t b = 0; b < bins; ++b) {
    std::vector<std::string> row = {fmt_g6(static_cast<double>(b) * table.abs_bin_width)};
    for (const auto& counts : table.abs_counts) row.push_back(std::to_string(counts[b]));
    rows.push_back(std::move(row));
  }
  write_csv(abs_path, header, rows);

  if (table.has_delta) {
    std::vector<std::vector<std::string>> drows;
    for (size_t b = 0; b < table.delta_counts.size(); ++b)
      drows.push_back({fmt_g6(-1.0 + static_cast<double>(b) * table.delta_bin_width),
                       std::to_string(table.delta_counts[b])});
    write_csv(delta_path, {"bin_low", "count"}, drows);
  }
}

}  // namespace cbna
