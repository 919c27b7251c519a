#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "mtkd/error.hpp"
#include "mtkd/image_io.hpp"
#include "mtkd/mask.hpp"
#include "mtkd/rng.hpp"
#include "mtkd/tensor.hpp"

namespace mtkd {

/// Pre-event image, post-event image and ground-truth change mask of one
/// scene. Images are [3,H,W] planar floats in [0,1].
struct BitemporalSample {
  std::string id;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> image_a;
  std::vector<float> image_b;
  BinaryMask label;

  Tensor<float> tensor_a() const { return Tensor<float>({3, height, width}, image_a); }
  Tensor<float> tensor_b() const { return Tensor<float>({3, height, width}, image_b); }

  /// Label as a [1,1,H,W] float target.
  Tensor<float> target() const {
    return Tensor<float>({1, 1, height, width},
                         std::vector<float>(label.values.begin(), label.values.end()));
  }

  void validate() const {
    const std::size_t px = height * width;
    if (image_a.size() != 3 * px || image_b.size() != 3 * px || label.height != height ||
        label.width != width || label.values.size() != px) {
      throw DataError("sample '" + id + "': images and label do not share H x W");
    }
    for (auto v : label.values) {
      if (v > 1) throw DataError("sample '" + id + "': label is not binary");
    }
  }
};

enum class Split { train, val, test };

inline std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

struct Dataset {
  Split split = Split::train;
  std::vector<BitemporalSample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }

  void validate() const {
    std::set<std::string> ids;
    for (const auto& s : samples) {
      s.validate();
      if (!ids.insert(s.id).second) {
        throw DataError("duplicate sample id '" + s.id + "' in " + to_string(split) + " split");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Disk layout: root/<split>/{A,B,label}/<id>.png

namespace detail {

inline std::set<std::string> png_ids(const std::filesystem::path& dir) {
  std::set<std::string> ids;
  if (!std::filesystem::is_directory(dir)) return ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      ids.insert(entry.path().stem().string());
    }
  }
  return ids;
}

inline float to_unit(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

inline std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace detail

/// Loads one split. Samples are ordered by filename; any nonzero label pixel
/// counts as changed.
inline Dataset load_dataset(const std::filesystem::path& root, Split split) {
  const auto base = root / to_string(split);
  const auto dir_a = base / "A", dir_b = base / "B", dir_l = base / "label";
  const auto ids_a = detail::png_ids(dir_a), ids_b = detail::png_ids(dir_b),
             ids_l = detail::png_ids(dir_l);
  std::set<std::string> all;
  all.insert(ids_a.begin(), ids_a.end());
  all.insert(ids_b.begin(), ids_b.end());
  all.insert(ids_l.begin(), ids_l.end());
  if (all.empty() || ids_l.empty()) {
    throw DataError("no samples under " + base.string() + " (expected A/, B/, label/ with .png files)");
  }

  Dataset ds;
  ds.split = split;
  for (const auto& id : all) {
    for (const auto& [ids, dir] : {std::pair{&ids_a, &dir_a}, {&ids_b, &dir_b}, {&ids_l, &dir_l}}) {
      if (!ids->count(id)) {
        throw DataError("sample '" + id + "' has no counterpart in " + dir->string());
      }
    }
    const Image8 a = read_png(dir_a / (id + ".png"), 3);
    const Image8 b = read_png(dir_b / (id + ".png"), 3);
    const Image8 l = read_png(dir_l / (id + ".png"), 1);
    if (a.height != b.height || a.width != b.width || a.height != l.height || a.width != l.width) {
      throw DataError("sample '" + id + "': A, B and label sizes differ");
    }
    BitemporalSample s;
    s.id = id;
    s.height = a.height;
    s.width = a.width;
    const std::size_t px = s.height * s.width;
    s.image_a.resize(3 * px);
    s.image_b.resize(3 * px);
    for (std::size_t i = 0; i < px; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        s.image_a[c * px + i] = detail::to_unit(a.pixels[3 * i + c]);
        s.image_b[c * px + i] = detail::to_unit(b.pixels[3 * i + c]);
      }
    }
    s.label = BinaryMask(s.height, s.width);
    for (std::size_t i = 0; i < px; ++i) s.label.values[i] = l.pixels[i] != 0 ? 1 : 0;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

inline void write_mask_png(const std::filesystem::path& path, const BinaryMask& mask) {
  Image8 img{mask.height, mask.width, 1, {}};
  img.pixels.resize(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) img.pixels[i] = mask.values[i] ? 255 : 0;
  write_png(path, img);
}

inline BinaryMask read_mask_png(const std::filesystem::path& path) {
  const Image8 img = read_png(path, 1);
  BinaryMask mask(img.height, img.width);
  for (std::size_t i = 0; i < mask.size(); ++i) mask.values[i] = img.pixels[i] != 0 ? 1 : 0;
  return mask;
}

/// Writes one split; labels are stored as 0 / 255.
inline void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
  const auto base = root / to_string(ds.split);
  for (const char* sub : {"A", "B", "label"}) std::filesystem::create_directories(base / sub);
  for (const auto& s : ds.samples) {
    const std::size_t px = s.height * s.width;
    Image8 a{s.height, s.width, 3, std::vector<std::uint8_t>(3 * px)};
    Image8 b = a;
    for (std::size_t i = 0; i < px; ++i) {
      for (std::size_t c = 0; c < 3; ++c) {
        a.pixels[3 * i + c] = detail::to_byte(s.image_a[c * px + i]);
        b.pixels[3 * i + c] = detail::to_byte(s.image_b[c * px + i]);
      }
    }
    write_png(base / "A" / (s.id + ".png"), a);
    write_png(base / "B" / (s.id + ".png"), b);
    write_mask_png(base / "label" / (s.id + ".png"), s.label);
  }
}

// ---------------------------------------------------------------------------
// Synthetic bitemporal data

enum class ShapeKind { rectangle, ellipse };

struct SyntheticSpec {
  std::size_t count = 100;
  std::size_t size = 32;
  // Either a uniform CAR range or a weighted list of CAR targets.
  bool uniform_car = true;
  double car_min = 0.0;
  double car_max = 0.6;
  std::vector<std::pair<double, double>> car_targets;  // (target, weight)
  double noise = 0.02;
  std::vector<ShapeKind> shapes = {ShapeKind::rectangle, ShapeKind::ellipse};
  std::string id_prefix;

  void validate() const {
    if (count == 0) throw ConfigError("synthetic spec: count must be positive");
    if (size == 0 || size % 4 != 0) {
      throw ConfigError("synthetic spec: size " + std::to_string(size) + " must be a positive multiple of 4");
    }
    if (uniform_car) {
      if (!(0.0 <= car_min && car_min <= car_max && car_max <= 1.0)) {
        throw ConfigError("synthetic spec: need 0 <= car_min <= car_max <= 1");
      }
    } else {
      if (car_targets.empty()) throw ConfigError("synthetic spec: empty CAR target list");
      for (auto [t, w] : car_targets) {
        if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("synthetic spec: CAR target outside [0,1]");
        if (!(w > 0.0)) throw ConfigError("synthetic spec: CAR weights must be positive");
      }
    }
    if (noise < 0.0) throw ConfigError("synthetic spec: noise must be nonnegative");
    if (shapes.empty()) throw ConfigError("synthetic spec: empty shape vocabulary");
  }
};

inline constexpr double kSyntheticCarTolerance = 0.2;

namespace detail {

/// Accepted changed-pixel counts for a CAR target: [lo, hi] within ±20%
/// relative, or exactly 0 for a zero target.
inline std::pair<std::size_t, std::size_t> car_count_range(double target, std::size_t pixels) {
  if (target <= 0.0) return {0, 0};
  const double exact = target * static_cast<double>(pixels);
  const auto lo = static_cast<std::size_t>(std::ceil(exact * (1.0 - kSyntheticCarTolerance) - 1e-9));
  const auto hi = std::min(
      pixels, static_cast<std::size_t>(std::floor(exact * (1.0 + kSyntheticCarTolerance) + 1e-9)));
  if (std::max<std::size_t>(lo, 1) > hi) {
    throw DataError("CAR target " + std::to_string(target) + " is unreachable on a " +
                    std::to_string(pixels) + "-pixel image");
  }
  return {std::max<std::size_t>(lo, 1), hi};
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

inline double quantize8(double v) { return std::round(clamp01(v) * 255.0) / 255.0; }

}  // namespace detail

/// One synthetic pair. The label is exactly the set of re-coloured pixels.
inline BitemporalSample generate_sample(const SyntheticSpec& spec, double car_target, Rng& rng,
                                        std::string id) {
  const std::size_t S = spec.size, P = S * S;
  BitemporalSample s;
  s.id = std::move(id);
  s.height = s.width = S;
  s.image_a.resize(3 * P);
  s.image_b.resize(3 * P);
  s.label = BinaryMask(S, S);

  // Background: base colour, two low-frequency waves, fine grain.
  std::array<double, 3> base{};
  for (auto& c : base) c = rng.uniform(0.2, 0.8);
  struct Wave { double fy, fx, phase, amp; };
  std::array<std::array<Wave, 2>, 3> waves{};
  for (auto& ch : waves) {
    for (auto& w : ch) {
      w = {rng.uniform(0.05, 0.4), rng.uniform(0.05, 0.4), rng.uniform(0.0, 6.283185307179586),
           rng.uniform(0.02, 0.08)};
    }
  }
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < S; ++y) {
      for (std::size_t x = 0; x < S; ++x) {
        double v = base[c];
        for (const auto& w : waves[c]) {
          v += w.amp * std::sin(w.fy * static_cast<double>(y) + w.fx * static_cast<double>(x) + w.phase);
        }
        v += 0.02 * std::clamp(rng.normal(), -3.0, 3.0);
        s.image_a[c * P + y * S + x] = static_cast<float>(detail::quantize8(v));
      }
    }
  }

  // Change shapes, each with its own colour; later shapes paint over earlier.
  std::vector<int> owner(P, -1);
  std::vector<std::array<double, 3>> colours;
  std::size_t changed = 0;
  if (car_target >= 1.0) {
    colours.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
    std::fill(owner.begin(), owner.end(), 0);
    changed = P;
  } else if (car_target > 0.0) {
    const auto [lo, hi] = detail::car_count_range(car_target, P);
    const auto goal = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(car_target * static_cast<double>(P))), lo, hi);
    std::size_t failures = 0;
    while (changed < goal) {
      const int shape_id = static_cast<int>(colours.size());
      if (failures > 200) {
        // Packing failed repeatedly: change single free pixels.
        std::size_t start = static_cast<std::size_t>(rng.below(P));
        for (std::size_t k = 0; k < P; ++k) {
          const std::size_t i = (start + k) % P;
          if (owner[i] < 0) {
            owner[i] = shape_id;
            ++changed;
            break;
          }
        }
        colours.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
        continue;
      }
      const double deficit = static_cast<double>(goal - changed);
      const double area = std::max(1.0, std::round(deficit * rng.uniform(0.3, 1.0)));
      const double aspect = rng.uniform(0.5, 2.0);
      const auto h = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(std::sqrt(area * aspect))), 1, S);
      const auto w = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(area / static_cast<double>(h))), 1, S);
      const auto y0 = static_cast<std::size_t>(rng.below(S - h + 1));
      const auto x0 = static_cast<std::size_t>(rng.below(S - w + 1));
      const ShapeKind kind = spec.shapes[rng.below(spec.shapes.size())];

      std::vector<std::size_t> fresh;
      const double cy = static_cast<double>(y0) + static_cast<double>(h) / 2.0;
      const double cx = static_cast<double>(x0) + static_cast<double>(w) / 2.0;
      for (std::size_t y = y0; y < y0 + h; ++y) {
        for (std::size_t x = x0; x < x0 + w; ++x) {
          if (kind == ShapeKind::ellipse && h > 2 && w > 2) {
            const double dy = (static_cast<double>(y) + 0.5 - cy) / (static_cast<double>(h) / 2.0);
            const double dx = (static_cast<double>(x) + 0.5 - cx) / (static_cast<double>(w) / 2.0);
            if (dy * dy + dx * dx > 1.0) continue;
          }
          if (owner[y * S + x] < 0) fresh.push_back(y * S + x);
        }
      }
      if (fresh.empty() || changed + fresh.size() > hi) {
        ++failures;
        continue;
      }
      colours.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
      for (std::size_t y = y0; y < y0 + h; ++y) {
        for (std::size_t x = x0; x < x0 + w; ++x) {
          const std::size_t i = y * S + x;
          if (kind == ShapeKind::ellipse && h > 2 && w > 2) {
            const double dy = (static_cast<double>(y) + 0.5 - cy) / (static_cast<double>(h) / 2.0);
            const double dx = (static_cast<double>(x) + 0.5 - cx) / (static_cast<double>(w) / 2.0);
            if (dy * dy + dx * dx > 1.0) continue;
          }
          owner[i] = shape_id;
        }
      }
      changed += fresh.size();
    }
  }

  // Post-event image: the pre-event image under a small global illumination
  // shift and sensor noise, with changed pixels re-coloured.
  const double shift = rng.uniform(-spec.noise, spec.noise);
  for (std::size_t i = 0; i < P; ++i) {
    std::array<double, 3> a{};
    for (std::size_t c = 0; c < 3; ++c) a[c] = s.image_a[c * P + i];
    std::array<double, 3> b{};
    if (owner[i] >= 0) {
      const auto& col = colours[static_cast<std::size_t>(owner[i])];
      double dist = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        b[c] = col[c] + 0.03 * std::clamp(rng.normal(), -3.0, 3.0);
        dist = std::max(dist, std::abs(b[c] - a[c]));
      }
      // A re-coloured pixel must visibly differ from the original.
      if (dist < 0.3) b[0] = a[0] > 0.5 ? a[0] - 0.4 : a[0] + 0.4;
      s.label.values[i] = 1;
    } else {
      for (std::size_t c = 0; c < 3; ++c) {
        b[c] = a[c] + shift + spec.noise * std::clamp(rng.normal(), -3.0, 3.0);
      }
    }
    for (std::size_t c = 0; c < 3; ++c) s.image_b[c * P + i] = static_cast<float>(detail::quantize8(b[c]));
  }
  return s;
}

/// Generates `spec.count` samples with ids "<prefix>NNNNN". Each sample uses
/// its own random stream derived from (seed, index).
inline Dataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed,
                                  Split split = Split::train) {
  spec.validate();
  const std::size_t P = spec.size * spec.size;
  if (!spec.uniform_car) {
    for (auto [t, w] : spec.car_targets) {
      if (t > 0.0 && t < 1.0) detail::car_count_range(t, P);
    }
  }
  double weight_total = 0.0;
  for (auto [t, w] : spec.car_targets) weight_total += w;

  Dataset ds;
  ds.split = split;
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng(derive_seed(seed, "data", i));
    double target = 0.0;
    if (spec.uniform_car) {
      // Drawn targets snap to the pixel grid so they are always reachable.
      target = std::round(rng.uniform(spec.car_min, spec.car_max) * static_cast<double>(P)) /
               static_cast<double>(P);
    } else {
      double pick = rng.uniform() * weight_total;
      target = spec.car_targets.back().first;
      for (auto [t, w] : spec.car_targets) {
        if (pick < w) {
          target = t;
          break;
        }
        pick -= w;
      }
    }
    char id[32];
    std::snprintf(id, sizeof id, "%05zu", i);
    ds.samples.push_back(generate_sample(spec, target, rng, spec.id_prefix + id));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double rotate_prob = 0.5;       // rotate by k*90 degrees, k uniform in {0..3}
  double hflip_prob = 0.5;
  double vflip_prob = 0.5;
  double brightness_prob = 0.5;
  double brightness_delta = 0.125;
  double contrast_prob = 0.5;
  double contrast_low = 0.75;
  double contrast_high = 1.25;

  static AugmentConfig none() { return {0, 0, 0, 0, 0.125, 0, 0.75, 1.25}; }
};

namespace detail {

/// Applies a pixel remapping (dest index <- source index) to images and label.
template <typename Map>
void remap(BitemporalSample& s, std::size_t new_h, std::size_t new_w, Map src_of) {
  const std::size_t P = s.height * s.width;
  std::vector<float> a(3 * P), b(3 * P);
  std::vector<std::uint8_t> l(P);
  for (std::size_t y = 0; y < new_h; ++y) {
    for (std::size_t x = 0; x < new_w; ++x) {
      const std::size_t dst = y * new_w + x;
      const std::size_t src = src_of(y, x);
      for (std::size_t c = 0; c < 3; ++c) {
        a[c * P + dst] = s.image_a[c * P + src];
        b[c * P + dst] = s.image_b[c * P + src];
      }
      l[dst] = s.label.values[src];
    }
  }
  s.height = new_h;
  s.width = new_w;
  s.image_a = std::move(a);
  s.image_b = std::move(b);
  s.label = BinaryMask(new_h, new_w, std::move(l));
}

}  // namespace detail

/// Rotates clockwise by k * 90 degrees.
inline BitemporalSample rotate90(BitemporalSample s, unsigned k) {
  for (unsigned r = 0; r < k % 4; ++r) {
    const std::size_t H = s.height, W = s.width;
    // dest (y, x) in a W x H image takes source (H - 1 - x, y).
    detail::remap(s, W, H, [H, W](std::size_t y, std::size_t x) { return (H - 1 - x) * W + y; });
  }
  return s;
}

inline BitemporalSample flip_horizontal(BitemporalSample s) {
  const std::size_t W = s.width;
  detail::remap(s, s.height, W, [W](std::size_t y, std::size_t x) { return y * W + (W - 1 - x); });
  return s;
}

inline BitemporalSample flip_vertical(BitemporalSample s) {
  const std::size_t H = s.height, W = s.width;
  detail::remap(s, H, W, [H, W](std::size_t y, std::size_t x) { return (H - 1 - y) * W + x; });
  return s;
}

/// Random geometric transforms (images and label alike) followed by
/// photometric jitter (both images alike, label untouched).
inline BitemporalSample augment(BitemporalSample s, const AugmentConfig& cfg, Rng& rng) {
  // Every draw happens unconditionally so the stream position does not
  // depend on which transforms fire.
  const bool rotate = rng.bernoulli(cfg.rotate_prob);
  const auto k = static_cast<unsigned>(rng.below(4));
  const bool hflip = rng.bernoulli(cfg.hflip_prob);
  const bool vflip = rng.bernoulli(cfg.vflip_prob);
  const bool bright = rng.bernoulli(cfg.brightness_prob);
  const double delta = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta);
  const bool contrast = rng.bernoulli(cfg.contrast_prob);
  const double alpha = rng.uniform(cfg.contrast_low, cfg.contrast_high);

  if (rotate && k != 0) s = rotate90(std::move(s), k);
  if (hflip) s = flip_horizontal(std::move(s));
  if (vflip) s = flip_vertical(std::move(s));
  if (bright || contrast) {
    for (auto* img : {&s.image_a, &s.image_b}) {
      for (auto& v : *img) {
        double x = v;
        if (bright) x += delta;
        if (contrast) x *= alpha;
        v = static_cast<float>(std::clamp(x, 0.0, 1.0));
      }
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Splitting

/// Deterministic shuffled split into (train, val, test). Val and test sizes
/// are floor(n * fraction); the remainder goes to train. Each subset keeps
/// the input order.
inline std::tuple<Dataset, Dataset, Dataset> split_dataset(const Dataset& ds,
                                                          std::array<double, 3> fractions,
                                                          std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split fractions must be nonnegative");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ConfigError("split fractions sum to " + std::to_string(total) + ", expected 1");
  }
  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(derive_seed(seed, "split"));
  rng.shuffle(order);

  const auto floor_of = [n](double f) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * f + 1e-9));
  };
  const std::size_t n_val = floor_of(fractions[1]);
  const std::size_t n_test = floor_of(fractions[2]);
  const std::size_t n_train = n - n_val - n_test;

  std::array<std::vector<std::size_t>, 3> picks;
  for (std::size_t i = 0; i < n; ++i) {
    picks[i < n_train ? 0 : (i < n_train + n_val ? 1 : 2)].push_back(order[i]);
  }
  std::array<Dataset, 3> out;
  const Split tags[3] = {Split::train, Split::val, Split::test};
  for (std::size_t k = 0; k < 3; ++k) {
    std::sort(picks[k].begin(), picks[k].end());
    out[k].split = tags[k];
    for (auto i : picks[k]) {
      out[k].samples.push_back(ds.samples[i]);
    }
  }
  return {std::move(out[0]), std::move(out[1]), std::move(out[2])};
}

}  // namespace mtkd
