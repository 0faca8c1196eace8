#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "cbna/datagen.hpp"

using namespace cbna;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("identity shift reproduces the raw render bit-exactly") {
  SceneSpec spec;
  spec.seed = 91;
  const Dataset ds = generate(spec, DomainShift::none(), 6);
  for (int i = 0; i < 6; ++i) {
    const Sample raw = render_scene(spec, i);
    CHECK(ds.images[static_cast<size_t>(i)].data == raw.image.data);
    CHECK(ds.labels[static_cast<size_t>(i)].data == raw.label.data);
  }
}

TEST_CASE("generation is deterministic in the seed") {
  SceneSpec spec;
  spec.seed = 17;
  const Dataset a = generate(spec, DomainShift::night_preset(), 5);
  const Dataset b = generate(spec, DomainShift::night_preset(), 5);
  for (size_t i = 0; i < a.size(); ++i) {
    CHECK(a.images[i].data == b.images[i].data);
    CHECK(a.labels[i].data == b.labels[i].data);
  }
  spec.seed = 18;
  const Dataset c = generate(spec, DomainShift::night_preset(), 5);
  CHECK(a.images[0].data != c.images[0].data);
}

TEST_CASE("brightness shifts the pixel mean by its offset before clamping") {
  // Mid-gray inputs keep every shifted value inside [0, 1], so clamping
  // cannot bite and the mean must move by exactly the offset.
  Tensor img(1, 8, 8, 3);
  for (size_t i = 0; i < img.size(); ++i)
    img.data[i] = 0.4f + 0.2f * static_cast<float>(i % 7) / 7.0f;
  DomainShift s;
  s.brightness_offset = -0.3f;
  const Tensor shifted = apply_domain_shift(img, s, 0);
  double before = 0.0, after = 0.0;
  for (size_t i = 0; i < img.size(); ++i) {
    before += img.data[i];
    after += shifted.data[i];
  }
  before /= static_cast<double>(img.size());
  after /= static_cast<double>(img.size());
  CHECK(after == doctest::Approx(before - 0.3).epsilon(1e-6));
}

TEST_CASE("labels are shift-invariant") {
  SceneSpec spec;
  spec.seed = 55;
  const Dataset clean = generate(spec, DomainShift::none(), 8);
  const Dataset night = generate(spec, DomainShift::night_preset(), 8);
  CHECK(pixel_class_counts(clean) == pixel_class_counts(night));
  for (size_t i = 0; i < clean.size(); ++i) {
    CHECK(clean.labels[i].data == night.labels[i].data);
    CHECK(clean.images[i].data != night.images[i].data);
  }
}

TEST_CASE("every label map keeps background and at least one shape") {
  SceneSpec spec;
  spec.seed = 1000;
  const Dataset ds = generate(spec, DomainShift::none(), 40);
  for (const ClassMap& lbl : ds.labels) {
    size_t background = 0, foreground = 0;
    for (uint8_t v : lbl.data) (v == 0 ? background : foreground)++;
    CHECK(background > 0);
    CHECK(foreground > 0);
  }
}

TEST_CASE("shifted pixels stay inside the unit interval") {
  SceneSpec spec;
  spec.seed = 2;
  DomainShift s = DomainShift::night_preset();
  s.noise_sigma = 0.3f;  // exaggerated noise to exercise the clamp
  const Dataset ds = generate(spec, s, 4);
  for (const Tensor& img : ds.images)
    for (float v : img.data) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
}

TEST_CASE("night preset carries the documented defaults") {
  const DomainShift s = DomainShift::night_preset();
  CHECK(s.brightness_offset == doctest::Approx(-0.25f));
  CHECK(s.contrast_gain == doctest::Approx(0.7f));
  CHECK(s.channel_gain[0] == doctest::Approx(1.0f));
  CHECK(s.channel_gain[1] == doctest::Approx(0.85f));
  CHECK(s.channel_gain[2] == doctest::Approx(0.7f));
  CHECK(s.noise_sigma == doctest::Approx(0.02f));
}

TEST_CASE("shift parameter validation") {
  DomainShift s;
  s.brightness_offset = 0.8f;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  s = DomainShift{};
  s.contrast_gain = 0.0f;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  s = DomainShift{};
  s.noise_sigma = -0.1f;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
}

TEST_CASE("dataset round trip is bit-exact") {
  TempDir tmp("cbna_ds_roundtrip");
  SceneSpec spec;
  spec.seed = 33;
  const Dataset ds = generate(spec, DomainShift::night_preset(), 5);
  write_dataset(ds, tmp.path);
  const Dataset back = read_dataset(tmp.path);
  REQUIRE(back.size() == ds.size());
  CHECK(back.spec.seed == ds.spec.seed);
  CHECK(back.shift.brightness_offset == ds.shift.brightness_offset);
  for (size_t i = 0; i < ds.size(); ++i) {
    CHECK(back.images[i].data == ds.images[i].data);
    CHECK(back.labels[i].data == ds.labels[i].data);
  }
}

TEST_CASE("missing label file is reported by name") {
  TempDir tmp("cbna_ds_missing");
  SceneSpec spec;
  spec.seed = 3;
  write_dataset(generate(spec, DomainShift::none(), 3), tmp.path);
  fs::remove(tmp.path / "lbl_000001.bin");
  try {
    read_dataset(tmp.path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("lbl_000001.bin") != std::string::npos);
  }
}

TEST_CASE("manifest count mismatch is a format error") {
  TempDir tmp("cbna_ds_count");
  SceneSpec spec;
  spec.seed = 4;
  write_dataset(generate(spec, DomainShift::none(), 3), tmp.path);
  fs::remove(tmp.path / "img_000002.bin");
  CHECK_THROWS_AS(read_dataset(tmp.path), FormatError);
}

TEST_CASE("truncated image file is a format error") {
  TempDir tmp("cbna_ds_trunc");
  SceneSpec spec;
  spec.seed = 5;
  write_dataset(generate(spec, DomainShift::none(), 2), tmp.path);
  const auto path = tmp.path / "img_000000.bin";
  fs::resize_file(path, fs::file_size(path) / 2);
  CHECK_THROWS_AS(read_dataset(tmp.path), FormatError);
}
