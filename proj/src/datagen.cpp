#include "cbna/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "cbna/io.hpp"
#include "cbna/rng.hpp"

namespace cbna {

void SceneSpec::validate() const {
  if (height < 16 || width < 16) throw ArgumentError("scene resolution must be at least 16x16");
  if (num_classes < 2 || num_classes > 4)
    throw ArgumentError("scene num_classes must lie in [2, 4]");
  if (min_shapes < 1 || max_shapes < min_shapes)
    throw ArgumentError("invalid shape count range");
}

bool DomainShift::is_identity() const {
  return brightness_offset == 0.0f && contrast_gain == 1.0f && noise_sigma == 0.0f &&
         channel_gain[0] == 1.0f && channel_gain[1] == 1.0f && channel_gain[2] == 1.0f;
}

void DomainShift::validate() const {
  if (brightness_offset < -0.5f || brightness_offset > 0.5f)
    throw ArgumentError("brightness_offset must lie in [-0.5, 0.5]");
  if (!(contrast_gain > 0.0f) || contrast_gain > 2.0f)
    throw ArgumentError("contrast_gain must lie in (0, 2]");
  for (float g : channel_gain)
    if (!(g > 0.0f)) throw ArgumentError("channel gains must be positive");
  if (noise_sigma < 0.0f) throw ArgumentError("noise_sigma must be >= 0");
}

namespace {

constexpr char kMagic[4] = {'C', 'B', 'N', 'A'};

float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

struct ShapeDraw {
  int cls;  // 1 circle, 2 square, 3 triangle
  double cx, cy;
  double size_a, size_b;
  float color[3];
};

// Shape extents stay small enough that even four overlapping shapes cannot
// cover a 64x64 frame, so the background class always survives.
ShapeDraw draw_shape(SplitMix64& rng, const SceneSpec& spec) {
  ShapeDraw s;
  const int kinds = std::min(spec.num_classes - 1, 3);
  s.cls = 1 + rng.uniform_int(0, kinds);
  s.cx = rng.uniform(0.25 * spec.width, 0.75 * spec.width);
  s.cy = rng.uniform(0.25 * spec.height, 0.75 * spec.height);
  if (s.cls == 1) {
    s.size_a = rng.uniform(4.0, 12.0);  // radius
    s.size_b = 0.0;
  } else if (s.cls == 2) {
    s.size_a = rng.uniform(4.0, 12.0);  // half side
    s.size_b = 0.0;
  } else {
    s.size_a = rng.uniform(5.0, 13.0);  // half width
    s.size_b = rng.uniform(5.0, 13.0);  // half height
  }
  const float j = static_cast<float>(rng.uniform01());
  const float lo = 0.15f + 0.15f * static_cast<float>(rng.uniform01());
  const float hi = 0.75f + 0.20f * j;
  s.color[0] = s.cls == 1 ? hi : lo;
  s.color[1] = s.cls == 2 ? hi : lo;
  s.color[2] = s.cls == 3 ? hi : lo;
  return s;
}

bool inside(const ShapeDraw& s, int x, int y) {
  const double dx = x - s.cx;
  const double dy = y - s.cy;
  if (s.cls == 1) return dx * dx + dy * dy <= s.size_a * s.size_a;
  if (s.cls == 2) return std::abs(dx) <= s.size_a && std::abs(dy) <= s.size_a;
  // Isoceles triangle, apex up: width grows linearly from apex to base.
  const double from_apex = y - (s.cy - s.size_b);
  if (from_apex < 0.0 || from_apex > 2.0 * s.size_b) return false;
  const double half_w = s.size_a * from_apex / (2.0 * s.size_b);
  return std::abs(dx) <= half_w;
}

}  // namespace

Sample render_scene(const SceneSpec& spec, int index) {
  spec.validate();
  SplitMix64 rng(spec.seed ^ static_cast<uint64_t>(index));

  Sample out;
  out.image = Tensor(1, spec.height, spec.width, 3);
  out.label = ClassMap(1, spec.height, spec.width, 0);

  // The per-scene appearance spread stays narrow: within one domain the
  // images behave like frames from one camera, so pooled statistics over a
  // few frames stay close to single-image statistics.
  const float base = 0.42f + 0.16f * static_cast<float>(rng.uniform01());
  float bg[3];
  for (float& v : bg) v = clamp01(base + 0.08f * (static_cast<float>(rng.uniform01()) - 0.5f));

  const int nshapes = spec.min_shapes + rng.uniform_int(0, spec.max_shapes - spec.min_shapes + 1);
  std::vector<ShapeDraw> shapes;
  shapes.reserve(static_cast<size_t>(nshapes));
  for (int i = 0; i < nshapes; ++i) shapes.push_back(draw_shape(rng, spec));

  for (int y = 0; y < spec.height; ++y)
    for (int x = 0; x < spec.width; ++x) {
      const float* color = bg;
      uint8_t cls = 0;
      // Later shapes draw over earlier ones.
      for (const ShapeDraw& s : shapes)
        if (inside(s, x, y)) {
          color = s.color;
          cls = static_cast<uint8_t>(s.cls);
        }
      float* px = &out.image.at(0, y, x, 0);
      px[0] = color[0];
      px[1] = color[1];
      px[2] = color[2];
      out.label.at(0, y, x) = cls;
    }
  return out;
}

Tensor apply_domain_shift(const Tensor& image, const DomainShift& shift, uint64_t noise_seed) {
  shift.validate();
  if (image.c != 3) throw ArgumentError("domain shift expects 3-channel images");
  Tensor out(image.b, image.h, image.w, image.c);
  NormalSampler noise(noise_seed);
  const float contrast_bias = 0.5f * (1.0f - shift.contrast_gain);
  const size_t total = image.size();
  for (size_t i = 0; i < total; i += 3)
    for (int c = 0; c < 3; ++c) {
      float v = shift.contrast_gain * image.data[i + c] + contrast_bias;
      v += shift.brightness_offset;
      v *= shift.channel_gain[static_cast<size_t>(c)];
      if (shift.noise_sigma > 0.0f)
        v += shift.noise_sigma * static_cast<float>(noise.next());
      out.data[i + c] = clamp01(v);
    }
  return out;
}

Dataset generate(const SceneSpec& spec, const DomainShift& shift, int n) {
  spec.validate();
  shift.validate();
  if (n < 1) throw ArgumentError("generate needs n >= 1");
  Dataset ds;
  ds.spec = spec;
  ds.shift = shift;
  ds.images.reserve(static_cast<size_t>(n));
  ds.labels.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Sample s = render_scene(spec, i);
    // The noise stream is seeded independently of the geometry stream so the
    // same seed yields identical labels across differently shifted domains.
    const uint64_t noise_seed = (spec.seed ^ static_cast<uint64_t>(i)) ^ 0xA5A5A5A5A5A5A5A5ULL;
    ds.images.push_back(shift.is_identity() ? std::move(s.image)
                                            : apply_domain_shift(s.image, shift, noise_seed));
    ds.labels.push_back(std::move(s.label));
  }
  return ds;
}

namespace {

std::string img_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06d.bin", i);
  return buf;
}

std::string lbl_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "lbl_%06d.bin", i);
  return buf;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  nlohmann::json j;
  j["format"] = "cbna-dataset-v1";
  j["generator"] = ds.generator_version;
  j["count"] = ds.size();
  j["height"] = ds.spec.height;
  j["width"] = ds.spec.width;
  j["classes"] = ds.spec.num_classes;
  j["seed"] = ds.spec.seed;
  j["shift"] = {{"brightness_offset", ds.shift.brightness_offset},
                {"contrast_gain", ds.shift.contrast_gain},
                {"channel_gain", ds.shift.channel_gain},
                {"noise_sigma", ds.shift.noise_sigma}};
  std::ofstream mf(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!mf) throw Error("cannot write manifest in " + dir.string());
  mf << j.dump(2) << "\n";
  mf.close();

  for (size_t i = 0; i < ds.size(); ++i) {
    const Tensor& img = ds.images[i];
    ByteWriter w;
    w.put_magic(kMagic);
    w.put_u32(static_cast<uint32_t>(img.h));
    w.put_u32(static_cast<uint32_t>(img.w));
    w.put_u32(static_cast<uint32_t>(img.c));
    w.put_f32_array(img.data);
    write_file_bytes(dir / img_name(static_cast<int>(i)), w.bytes);

    const ClassMap& lbl = ds.labels[i];
    ByteWriter lw;
    lw.put_magic(kMagic);
    lw.put_u32(static_cast<uint32_t>(lbl.h));
    lw.put_u32(static_cast<uint32_t>(lbl.w));
    lw.bytes.insert(lw.bytes.end(), lbl.data.begin(), lbl.data.end());
    write_file_bytes(dir / lbl_name(static_cast<int>(i)), lw.bytes);
  }
}

Dataset read_dataset(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream mf(manifest_path);
  if (!mf) throw FormatError("missing manifest: " + manifest_path.string());
  nlohmann::json j;
  try {
    mf >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest " + manifest_path.string() + ": " + e.what());
  }

  Dataset ds;
  int count = 0;
  try {
    count = j.at("count").get<int>();
    ds.generator_version = j.value("generator", 1);
    ds.spec.height = j.at("height").get<int>();
    ds.spec.width = j.at("width").get<int>();
    ds.spec.num_classes = j.at("classes").get<int>();
    ds.spec.seed = j.at("seed").get<uint64_t>();
    const auto& s = j.at("shift");
    ds.shift.brightness_offset = s.at("brightness_offset").get<float>();
    ds.shift.contrast_gain = s.at("contrast_gain").get<float>();
    const auto gains = s.at("channel_gain").get<std::vector<float>>();
    if (gains.size() != 3) throw FormatError("manifest channel_gain must have 3 entries");
    std::copy(gains.begin(), gains.end(), ds.shift.channel_gain.begin());
    ds.shift.noise_sigma = s.at("noise_sigma").get<float>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad manifest " + manifest_path.string() + ": " + e.what());
  }
  if (count < 1) throw FormatError("manifest count must be >= 1");

  // The manifest count must agree with the files actually present.
  int found = 0;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("img_", 0) == 0 && name.size() == 14) ++found;
  }
  if (found != count)
    throw FormatError("manifest count " + std::to_string(count) + " does not match " +
                      std::to_string(found) + " image files in " + dir.string());

  for (int i = 0; i < count; ++i) {
    const auto ipath = dir / img_name(i);
    const auto lpath = dir / lbl_name(i);
    if (!std::filesystem::exists(ipath))
      throw FormatError("missing image file: " + ipath.string());
    if (!std::filesystem::exists(lpath))
      throw FormatError("missing label file: " + lpath.string());

    const auto ibytes = read_file_bytes(ipath);
    ByteReader ir(ibytes, ipath.filename().string());
    ir.expect_magic(kMagic);
    const int h = static_cast<int>(ir.get_u32());
    const int w = static_cast<int>(ir.get_u32());
    const int c = static_cast<int>(ir.get_u32());
    if (h != ds.spec.height || w != ds.spec.width || c != 3)
      throw FormatError("image dims disagree with manifest: " + ipath.string());
    Tensor img(1, h, w, c);
    img.data = ir.get_f32_array(img.size());
    ir.expect_end();
    ds.images.push_back(std::move(img));

    const auto lbytes = read_file_bytes(lpath);
    ByteReader lr(lbytes, lpath.filename().string());
    lr.expect_magic(kMagic);
    const int lh = static_cast<int>(lr.get_u32());
    const int lw = static_cast<int>(lr.get_u32());
    if (lh != h || lw != w)
      throw FormatError("label dims disagree with image: " + lpath.string());
    ClassMap lbl(1, lh, lw);
    if (lbytes.size() != 12 + lbl.size())
      throw FormatError("truncated label file: " + lpath.string());
    std::copy(lbytes.begin() + 12, lbytes.end(), lbl.data.begin());
    ds.labels.push_back(std::move(lbl));
  }
  return ds;
}

std::vector<uint64_t> pixel_class_counts(const Dataset& ds) {
  std::vector<uint64_t> counts(static_cast<size_t>(ds.spec.num_classes), 0);
  for (const ClassMap& lbl : ds.labels)
    for (uint8_t v : lbl.data) {
      if (v >= counts.size()) throw DataError("label index out of range in dataset");
      ++counts[v];
    }
  return counts;
}

}  // namespace cbna
