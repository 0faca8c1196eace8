#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cbna/adapt.hpp"
#include "cbna/datagen.hpp"

namespace cbna {

// Per-class true/false positive and false negative pixel counters,
// accumulated over an evaluation set. Merging is associative and commutative.
struct ConfusionAccumulator {
  std::vector<uint64_t> tp, fp, fn;

  explicit ConfusionAccumulator(int num_classes);
  int num_classes() const { return static_cast<int>(tp.size()); }
  void merge(const ConfusionAccumulator& other);
};

void accumulate(ConfusionAccumulator& acc, const ClassMap& pred, const ClassMap& truth);

// Mean over classes of TP / (TP + FP + FN). Classes with TP+FP+FN == 0 are
// excluded from the mean; `subset`, when given, restricts the classes
// considered. Throws MetricError if no class contributes.
double miou(const ConfusionAccumulator& acc, const std::vector<int>* subset = nullptr);

// Per-class IoU; NaN where a class never occurs.
std::vector<double> per_class_iou(const ConfusionAccumulator& acc);

// Dataset-level mIoU (accumulate, then divide) for one policy. Windows larger
// than 1 pool each frame with its predecessors in index order, clamped at the
// start of the sequence. `jobs` parallelizes over images.
double dataset_miou(const SegModel& model, const Dataset& data, const AdaptPolicy& policy,
                    int jobs = 1, ConfusionAccumulator* out_acc = nullptr);

struct SweepPoint {
  double eta = 0.0;
  double miou = 0.0;
  std::vector<double> class_iou;
};

// One full-dataset evaluation per grid entry.
std::vector<SweepPoint> sweep_eta(const SegModel& model, const Dataset& data,
                                  const std::vector<double>& grid, AdaptMode mode, int jobs = 1);

// Per curve: argmax eta (ties toward the smaller eta); then the arithmetic
// mean of the winners, rounded to the nearest grid entry (halfway cases also
// toward the smaller eta).
double select_eta(const std::vector<std::vector<SweepPoint>>& curves,
                  const std::vector<double>& grid);

struct WindowPoint {
  int window = 1;
  double miou = 0.0;
};

std::vector<WindowPoint> ablate_window(const SegModel& model, const Dataset& data,
                                       const std::vector<int>& windows, AdaptMode mode,
                                       double eta, int jobs = 1);

// Per-image mIoU distributions per policy plus the per-image difference
// between the first Cbna entry and the first NoAdapt entry, binned.
struct HistogramTable {
  double abs_bin_width = 0.02;
  double delta_bin_width = 0.01;
  std::vector<std::string> mode_labels;
  std::vector<std::vector<double>> per_image;      // [mode][image]
  std::vector<std::vector<uint32_t>> abs_counts;   // [mode][bin], bins over [0, 1]
  std::vector<uint32_t> delta_counts;              // bins over [-1, 1]; empty without a pair
  uint32_t positive_deltas = 0, negative_deltas = 0, zero_deltas = 0;
  bool has_delta = false;
};

HistogramTable per_image_miou_histogram(const SegModel& model, const Dataset& data,
                                        const std::vector<AdaptPolicy>& policies,
                                        double abs_bin_width = 0.02,
                                        double delta_bin_width = 0.01, int jobs = 1);

void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);
void write_window_csv(const std::vector<WindowPoint>& points, const std::filesystem::path& path);
void write_hist_csv(const HistogramTable& table, const std::filesystem::path& abs_path,
                    const std::filesystem::path& delta_path);

}  // namespace cbna
