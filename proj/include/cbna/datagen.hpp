#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "cbna/tensor.hpp"

namespace cbna {

// Scene parameters for the synthetic shape corpus. Classes are
// 0 background, 1 circle, 2 square, 3 triangle; with fewer classes the
// trailing shape kinds are dropped.
struct SceneSpec {
  int height = 64;
  int width = 64;
  int num_classes = 4;
  int min_shapes = 1;
  int max_shapes = 4;
  uint64_t seed = 0;

  void validate() const;
};

// Photometric corruption applied to pixels only, never to labels. Applied as
//   v = contrast_gain * p + 0.5 * (1 - contrast_gain)
//   v = v + brightness_offset
//   v = v * channel_gain[c]
//   v = v + noise_sigma * n,  n ~ N(0, 1)
// and clamped to [0, 1] at the end.
struct DomainShift {
  float brightness_offset = 0.0f;  // in [-0.5, 0.5]
  float contrast_gain = 1.0f;      // in (0, 2]
  std::array<float, 3> channel_gain = {1.0f, 1.0f, 1.0f};
  float noise_sigma = 0.0f;

  static DomainShift none() { return DomainShift{}; }
  // Default target shift for benchmark runs.
  static DomainShift night_preset() {
    return DomainShift{-0.25f, 0.7f, {1.0f, 0.85f, 0.7f}, 0.02f};
  }

  bool is_identity() const;
  void validate() const;
};

struct Sample {
  Tensor image;    // 1 x H x W x 3, values in [0, 1]
  ClassMap label;  // 1 x H x W
};

// Bumped whenever the rendering recipe changes, so cached directories from an
// older generator are regenerated rather than silently reused.
constexpr int kSceneGeneratorVersion = 2;

// Index order doubles as frame order for windowed evaluation.
struct Dataset {
  SceneSpec spec;
  DomainShift shift;
  int generator_version = kSceneGeneratorVersion;
  std::vector<Tensor> images;
  std::vector<ClassMap> labels;

  size_t size() const { return images.size(); }
};

// Renders scene `index` deterministically from spec.seed ^ index, before any
// domain shift.
Sample render_scene(const SceneSpec& spec, int index);

// Shifts pixels; geometry and labels are untouched. `noise_seed` drives the
// additive noise stream.
Tensor apply_domain_shift(const Tensor& image, const DomainShift& shift, uint64_t noise_seed);

// n samples; identical (spec, shift, n) produce bit-identical datasets.
Dataset generate(const SceneSpec& spec, const DomainShift& shift, int n);

void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

// Per-class pixel totals across the dataset's label maps.
std::vector<uint64_t> pixel_class_counts(const Dataset& ds);

}  // namespace cbna
