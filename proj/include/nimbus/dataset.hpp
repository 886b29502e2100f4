#pragma once

// Dataset manifest loading, sample preparation, seeded splitting and
// procedurally generated sky scenes.
//
// Manifest format: UTF-8 text, one `image_path<TAB>mask_path<TAB>id` row per
// sample, `#` starts a comment line. Relative paths resolve against the
// manifest's directory. Masks are 8-bit grayscale with one code per label
// (0 sky, 128 thin, 255 thick by default).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/image.hpp"
#include "nimbus/masks.hpp"
#include "nimbus/random.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus {

inline constexpr int kWorkingResolution = 128;

struct SkyImage {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> rgb;  // interleaved
  std::string path;
};

struct Sample {
  std::string id;
  Tensor<float> image;          // (1, 3, r, r), values in [0, 1]
  std::vector<float> target;    // r * r values in {0, 0.5, 1}
  LabelMask gt;                 // r x r
};

/// Grayscale code of each label in mask PNGs.
struct MaskCodes {
  std::uint8_t sky = 0;
  std::uint8_t thin = 128;
  std::uint8_t thick = 255;

  std::uint8_t code(Label l) const {
    switch (l) {
      case Label::Sky: return sky;
      case Label::Thin: return thin;
      case Label::Thick: return thick;
    }
    return sky;
  }
};

struct LoadOptions {
  MaskCodes codes;
  int resolution = kWorkingResolution;
  std::function<void(const std::string&)> warn = [](const std::string& msg) {
    std::cerr << "warning: " << msg << "\n";
  };
};

struct ManifestRow {
  std::string image_path;
  std::string mask_path;
  std::string id;
};

inline std::vector<ManifestRow> read_manifest(const std::string& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DatasetError(manifest_path, "cannot open manifest");
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path fp(p);
    return (fp.is_absolute() ? fp : base / fp).string();
  };

  std::vector<ManifestRow> rows;
  std::set<std::string> ids;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty() || fields[2].empty())
      throw DatasetError(manifest_path, "line " + std::to_string(line_no) +
                                            ": expected image<TAB>mask<TAB>id");
    if (!ids.insert(fields[2]).second)
      throw DatasetError(manifest_path, "line " + std::to_string(line_no) + ": duplicate id " + fields[2]);
    rows.push_back({resolve(fields[0]), resolve(fields[1]), fields[2]});
  }
  return rows;
}

inline SkyImage decode_sky_image(const std::string& path,
                                 const std::function<void(const std::string&)>& warn = {}) {
  const Image img = read_png(path);
  if (img.bit_depth != 8)
    throw DatasetError(path, "expected 8-bit samples, got " + std::to_string(img.bit_depth) + "-bit");
  if (img.channels != 3 && img.channels != 4)
    throw DatasetError(path, "expected an RGB image, got " + std::to_string(img.channels) + " channel(s)");
  if (img.width < 8 || img.height < 8)
    throw DatasetError(path, "image must be at least 8x8, got " + std::to_string(img.width) + "x" +
                                 std::to_string(img.height));
  if (img.channels == 4 && warn) warn(path + ": alpha channel ignored");
  SkyImage out{img.height, img.width, {}, path};
  out.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  for (std::size_t p = 0; p < static_cast<std::size_t>(img.width) * img.height; ++p)
    for (int c = 0; c < 3; ++c)
      out.rgb[p * 3 + c] = static_cast<std::uint8_t>(img.samples[p * img.channels + c]);
  return out;
}

inline LabelMask decode_label_mask(const std::string& path, const MaskCodes& codes = {}) {
  const Image img = read_png(path);
  if (img.channels != 1 || img.bit_depth != 8)
    throw DatasetError(path, "mask must be 8-bit grayscale, got " + std::to_string(img.channels) +
                                 " channel(s) at " + std::to_string(img.bit_depth) + "-bit");
  LabelMask mask(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      const auto v = img.at(y, x, 0);
      if (v == codes.sky) {
        mask.at(y, x) = Label::Sky;
      } else if (v == codes.thin) {
        mask.at(y, x) = Label::Thin;
      } else if (v == codes.thick) {
        mask.at(y, x) = Label::Thick;
      } else {
        throw DatasetError(path, "mask value " + std::to_string(v) + " at (" + std::to_string(x) +
                                     "," + std::to_string(y) + ") is not one of " +
                                     std::to_string(codes.sky) + "/" + std::to_string(codes.thin) +
                                     "/" + std::to_string(codes.thick));
      }
    }
  }
  return mask;
}

/// Resizes to the working resolution (bilinear image, nearest mask) and
/// encodes the regression target.
inline Sample make_sample(std::string id, const SkyImage& image, const LabelMask& mask,
                          int resolution = kWorkingResolution) {
  if (image.height != mask.height || image.width != mask.width)
    throw DatasetError(image.path, "image is " + std::to_string(image.width) + "x" +
                                       std::to_string(image.height) + " but its mask is " +
                                       std::to_string(mask.width) + "x" + std::to_string(mask.height));
  const std::size_t plane = static_cast<std::size_t>(image.height) * image.width;
  std::vector<float> planar(plane * 3);
  for (std::size_t p = 0; p < plane; ++p)
    for (int c = 0; c < 3; ++c) planar[c * plane + p] = image.rgb[p * 3 + c] / 255.0f;

  Sample s;
  s.id = std::move(id);
  s.image = Tensor<float>(Shape{1, 3, resolution, resolution},
                          resize_bilinear(planar, 3, image.height, image.width, resolution, resolution));
  s.gt = LabelMask(resolution, resolution);
  s.gt.labels = resize_nearest(mask.labels, mask.height, mask.width, resolution, resolution);
  s.target = encode_target(s.gt);
  return s;
}

/// One Sample per manifest row, in manifest order.
inline std::vector<Sample> load_dataset(const std::string& manifest_path, const LoadOptions& options = {}) {
  std::vector<Sample> samples;
  for (const auto& row : read_manifest(manifest_path)) {
    const SkyImage image = decode_sky_image(row.image_path, options.warn);
    const LabelMask mask = decode_label_mask(row.mask_path, options.codes);
    samples.push_back(make_sample(row.id, image, mask, options.resolution));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitSpec {
  std::vector<std::string> train_ids;
  std::vector<std::string> test_ids;
  std::uint64_t seed = 0;
};

/// Seeded uniform permutation; the first round(ratio * n) ids train, the
/// rest test. The train count is clamped to [1, n - 1].
inline SplitSpec random_split(std::vector<std::string> ids, double ratio, std::uint64_t seed) {
  if (ids.size() < 2) throw ConfigError("random_split: need at least 2 ids, got " + std::to_string(ids.size()));
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("random_split: ratio must lie in (0, 1)");
  Rng rng(seed);
  rng.shuffle(std::span<std::string>(ids));
  const auto n = static_cast<long>(ids.size());
  const long train = std::clamp(std::lround(ratio * static_cast<double>(n)), 1L, n - 1);
  SplitSpec split;
  split.seed = seed;
  split.train_ids.assign(ids.begin(), ids.begin() + train);
  split.test_ids.assign(ids.begin() + train, ids.end());
  return split;
}

inline std::vector<std::string> sample_ids(const std::vector<Sample>& samples) {
  std::vector<std::string> ids;
  for (const auto& s : samples) ids.push_back(s.id);
  return ids;
}

/// Samples matching `ids`, in the order of `ids`.
inline std::vector<Sample> select_samples(const std::vector<Sample>& samples,
                                          const std::vector<std::string>& ids) {
  std::vector<Sample> out;
  for (const auto& id : ids) {
    auto it = std::find_if(samples.begin(), samples.end(), [&](const Sample& s) { return s.id == id; });
    if (it == samples.end()) throw ConfigError("unknown sample id " + id);
    out.push_back(*it);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SyntheticScene {
  SkyImage image;
  LabelMask mask;
};

/// Blue gradient sky with soft gray blobs (thin cloud, alpha < 0.5) and dense
/// white blobs (thick cloud, alpha >= 0.5). Every scene contains all three
/// labels.
inline SyntheticScene synth_scene(std::uint64_t seed, int resolution = kWorkingResolution) {
  struct Blob {
    double cx, cy, rx, ry, alpha;
    bool thick;
  };
  const int r = resolution;
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng rng(derive_seed(seed, attempt));
    const std::array<double, 3> top{rng.uniform(40, 90), rng.uniform(100, 150), rng.uniform(190, 230)};
    const std::array<double, 3> bottom{rng.uniform(130, 170), rng.uniform(170, 205), rng.uniform(225, 250)};

    std::vector<Blob> blobs;
    const int thin_count = 2 + static_cast<int>(rng.below(2));
    const int thick_count = 1 + static_cast<int>(rng.below(2));
    for (int i = 0; i < thin_count + thick_count; ++i) {
      const bool thick = i >= thin_count;
      blobs.push_back({rng.uniform(0.1, 0.9) * r, rng.uniform(0.1, 0.9) * r, rng.uniform(0.08, 0.2) * r,
                       rng.uniform(0.06, 0.16) * r, thick ? rng.uniform(0.75, 0.95) : rng.uniform(0.25, 0.45),
                       thick});
    }

    SyntheticScene scene{SkyImage{r, r, std::vector<std::uint8_t>(static_cast<std::size_t>(r) * r * 3), "synthetic"},
                         LabelMask(r, r)};
    std::array<std::size_t, 3> counts{};
    for (int y = 0; y < r; ++y) {
      const double t = (y + 0.5) / r;
      for (int x = 0; x < r; ++x) {
        std::array<double, 3> px{};
        for (int c = 0; c < 3; ++c) px[c] = top[c] + (bottom[c] - top[c]) * t;
        Label label = Label::Sky;
        // Thin blobs first so dense cloud composites on top.
        for (int pass = 0; pass < 2; ++pass) {
          for (const auto& b : blobs) {
            if (b.thick != (pass == 1)) continue;
            const double dx = (x + 0.5 - b.cx) / b.rx;
            const double dy = (y + 0.5 - b.cy) / b.ry;
            const double d2 = dx * dx + dy * dy;
            if (d2 >= 1.0) continue;
            const double a = b.alpha * (1.0 - 0.2 * d2);
            const std::array<double, 3> tint = b.thick ? std::array<double, 3>{246, 246, 248}
                                                       : std::array<double, 3>{196, 200, 208};
            for (int c = 0; c < 3; ++c) px[c] = px[c] * (1.0 - a) + tint[c] * a;
            label = b.thick ? Label::Thick : std::max(label, Label::Thin);
          }
        }
        const double noise = rng.uniform(-3.0, 3.0);
        const std::size_t o = (static_cast<std::size_t>(y) * r + x) * 3;
        for (int c = 0; c < 3; ++c)
          scene.image.rgb[o + c] = static_cast<std::uint8_t>(std::clamp(std::lround(px[c] + noise), 0L, 255L));
        scene.mask.at(y, x) = label;
        ++counts[static_cast<std::size_t>(label)];
      }
    }
    if (counts[0] > 0 && counts[1] > 0 && counts[2] > 0) return scene;
  }
}

inline std::string synthetic_id(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "synth_%03zu", index);
  return buf;
}

/// `count` synthetic samples at the given resolution, deterministic per seed.
inline std::vector<Sample> synth_fixture(std::size_t count, std::uint64_t seed,
                                         int resolution = kWorkingResolution) {
  if (count < 1) throw ConfigError("synth_fixture: count must be >= 1");
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticScene scene = synth_scene(derive_seed(seed, i), resolution);
    samples.push_back(make_sample(synthetic_id(i), scene.image, scene.mask, resolution));
  }
  return samples;
}

/// Writes images/, masks/ and manifest.tsv for a synthetic dataset under `dir`.
inline std::string write_synthetic_dataset(const std::string& dir, std::size_t count, std::uint64_t seed,
                                           int resolution = kWorkingResolution,
                                           const MaskCodes& codes = {}) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "masks");
  const std::string manifest = (fs::path(dir) / "manifest.tsv").string();
  std::ofstream out(manifest, std::ios::binary);
  if (!out) throw Error("cannot write " + manifest);
  out << "# image\tmask\tid\n";
  for (std::size_t i = 0; i < count; ++i) {
    const SyntheticScene scene = synth_scene(derive_seed(seed, i), resolution);
    const std::string id = synthetic_id(i);
    Image rgb(resolution, resolution, 3);
    std::copy(scene.image.rgb.begin(), scene.image.rgb.end(), rgb.samples.begin());
    Image mask(resolution, resolution, 1);
    for (std::size_t p = 0; p < scene.mask.size(); ++p) mask.samples[p] = codes.code(scene.mask.labels[p]);
    write_png((fs::path(dir) / "images" / (id + ".png")).string(), rgb);
    write_png((fs::path(dir) / "masks" / (id + ".png")).string(), mask);
    out << "images/" << id << ".png\tmasks/" << id << ".png\t" << id << "\n";
  }
  return manifest;
}

}  // namespace nimbus
