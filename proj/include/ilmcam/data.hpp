#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilmcam/image_io.hpp"
#include "ilmcam/tensor.hpp"

namespace ilmcam {

/// Binary attention region, row-major, 1 = attended.
struct AttentionMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;

  AttentionMask() = default;
  AttentionMask(std::size_t h, std::size_t w) : height(h), width(w), bits(h * w, 0) {}

  std::uint8_t& at(std::size_t y, std::size_t x) { return bits[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return bits[y * width + x]; }

  std::size_t positive() const {
    std::size_t n = 0;
    for (auto b : bits) n += b ? 1 : 0;
    return n;
  }

  bool empty() const { return positive() == 0; }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;
};

/// One image in [0,1], shape [3,H,W].
struct Sample {
  std::string id;
  std::size_t label = 0;
  Tensor image;
  std::optional<AttentionMask> mask;

  std::size_t height() const { return image.dim(1); }
  std::size_t width() const { return image.dim(2); }
};

using Dataset = std::vector<Sample>;

/// The id a derived sample came from: text before the first '#' or '@'.
inline std::string base_id(const std::string& id) { return id.substr(0, id.find_first_of("#@")); }

inline void validate_mask_for(const AttentionMask& m, std::size_t h, std::size_t w) {
  if (m.height != h || m.width != w) {
    throw ShapeError("mask is " + std::to_string(m.height) + "x" + std::to_string(m.width) + ", image is " +
                     std::to_string(h) + "x" + std::to_string(w));
  }
  if (m.bits.size() != h * w) throw ShapeError("mask buffer size mismatch");
  if (m.empty()) throw std::invalid_argument("empty mask");
}

// ---- geometry --------------------------------------------------------------

/// Bilinear resampling with half-pixel centers (corners not aligned);
/// source coordinates are clamped to the border.
inline Tensor bilinear_resize(const Tensor& img, std::size_t out_h, std::size_t out_w) {
  if (img.rank() != 3) throw ShapeError("bilinear_resize expects [C,H,W], got " + shape_str(img.shape()));
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: zero target size");
  const std::size_t c = img.dim(0), h = img.dim(1), w = img.dim(2);
  if (out_h == h && out_w == w) return img;
  Tensor out({c, out_h, out_w});
  auto coord = [](std::size_t dst, std::size_t in, std::size_t outn, std::size_t& i0, std::size_t& i1, double& f) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in - 1);
    f = s - static_cast<double>(i0);
  };
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t y0, y1;
    double fy;
    coord(y, h, out_h, y0, y1, fy);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t x0, x1;
      double fx;
      coord(x, w, out_w, x0, x1, fx);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const float* p = img.data().data() + ch * h * w;
        const double top = p[y0 * w + x0] * (1 - fx) + p[y0 * w + x1] * fx;
        const double bot = p[y1 * w + x0] * (1 - fx) + p[y1 * w + x1] * fx;
        out[(ch * out_h + y) * out_w + x] = static_cast<float>(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

/// Nearest-neighbour resampling keeps masks binary.
inline AttentionMask resize_mask(const AttentionMask& m, std::size_t out_h, std::size_t out_w) {
  if (out_h == m.height && out_w == m.width) return m;
  AttentionMask out(out_h, out_w);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) out.at(y, x) = m.at(y * m.height / out_h, x * m.width / out_w);
  return out;
}

enum class Transform { Identity, Rot90, Rot180, Rot270, FlipH, FlipV };

inline const char* transform_tag(Transform t) {
  switch (t) {
    case Transform::Identity: return "orig";
    case Transform::Rot90: return "rot90";
    case Transform::Rot180: return "rot180";
    case Transform::Rot270: return "rot270";
    case Transform::FlipH: return "fliph";
    case Transform::FlipV: return "flipv";
  }
  return "?";
}

inline constexpr Transform kSixTransforms[] = {Transform::Identity, Transform::Rot90,  Transform::Rot180,
                                               Transform::Rot270,   Transform::FlipH, Transform::FlipV};

/// Source pixel (y, x) for destination (i, j) on an n x n grid.
/// Rotations are counter-clockwise; FlipH mirrors left-right.
inline std::pair<std::size_t, std::size_t> transform_source(Transform t, std::size_t n, std::size_t i, std::size_t j) {
  switch (t) {
    case Transform::Identity: return {i, j};
    case Transform::Rot90: return {j, n - 1 - i};
    case Transform::Rot180: return {n - 1 - i, n - 1 - j};
    case Transform::Rot270: return {n - 1 - j, i};
    case Transform::FlipH: return {i, n - 1 - j};
    case Transform::FlipV: return {n - 1 - i, j};
  }
  return {i, j};
}

inline Tensor transform_image(const Tensor& img, Transform t) {
  if (img.rank() != 3 || img.dim(1) != img.dim(2)) {
    throw ShapeError("transform_image expects a square [C,H,W] image, got " + shape_str(img.shape()));
  }
  const std::size_t c = img.dim(0), n = img.dim(1);
  Tensor out(img.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        const auto [y, x] = transform_source(t, n, i, j);
        out[(ch * n + i) * n + j] = img[(ch * n + y) * n + x];
      }
  return out;
}

inline AttentionMask transform_mask(const AttentionMask& m, Transform t) {
  if (m.height != m.width) throw ShapeError("transform_mask expects a square mask");
  const std::size_t n = m.height;
  AttentionMask out(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const auto [y, x] = transform_source(t, n, i, j);
      out.at(i, j) = m.at(y, x);
    }
  return out;
}

/// Pads a non-square sample to square by bilinear resizing to the larger side.
inline Sample make_square(Sample s) {
  const std::size_t h = s.height(), w = s.width();
  if (h == w) return s;
  const std::size_t n = std::max(h, w);
  s.image = bilinear_resize(s.image, n, n);
  if (s.mask) s.mask = resize_mask(*s.mask, n, n);
  return s;
}

/// Original, three rotations and two mirrors; labels kept, masks moved with
/// the pixels. Derived ids carry a "#tag" suffix.
inline std::vector<Sample> augment_6x(const Sample& input) {
  const Sample s = make_square(input);
  std::vector<Sample> out;
  out.reserve(6);
  for (Transform t : kSixTransforms) {
    Sample a;
    a.id = s.id + "#" + transform_tag(t);
    a.label = s.label;
    a.image = transform_image(s.image, t);
    if (s.mask) a.mask = transform_mask(*s.mask, t);
    out.push_back(std::move(a));
  }
  return out;
}

inline Dataset augment_dataset(const Dataset& d) {
  Dataset out;
  out.reserve(d.size() * 6);
  for (const Sample& s : d)
    for (Sample& a : augment_6x(s)) out.push_back(std::move(a));
  return out;
}

/// Pixels outside the mask scaled by alpha; inside untouched.
inline Sample apply_mask_emphasis(const Sample& s, const AttentionMask& mask, float alpha = 0.1f) {
  validate_mask_for(mask, s.height(), s.width());
  Sample out = s;
  out.id = s.id + "@emph";
  const std::size_t hw = s.height() * s.width();
  for (std::size_t ch = 0; ch < s.image.dim(0); ++ch)
    for (std::size_t p = 0; p < hw; ++p)
      if (!mask.bits[p]) out.image[ch * hw + p] *= alpha;
  out.mask = mask;
  return out;
}

// ---- splits ----------------------------------------------------------------

struct SplitRatios {
  double train = 0.25;
  double val = 0.25;
  double test = 0.5;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Seeded shuffle, then floor(N*val) to val, floor(N*test) to test, and the
/// remainder to train.
inline SplitIndices split_indices(std::size_t n, const SplitRatios& r, std::uint64_t seed) {
  if (r.train < 0 || r.val < 0 || r.test < 0 || std::abs(r.train + r.val + r.test - 1.0) > 1e-9) {
    throw ConfigError("split ratios must be nonnegative and sum to 1");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  const auto nv = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r.val + 1e-9));
  const auto nt = static_cast<std::size_t>(std::floor(static_cast<double>(n) * r.test + 1e-9));
  SplitIndices s;
  s.val.assign(idx.begin(), idx.begin() + nv);
  s.test.assign(idx.begin() + nv, idx.begin() + nv + nt);
  s.train.assign(idx.begin() + nv + nt, idx.end());
  return s;
}

struct DataSplit {
  Dataset train, val, test;
};

inline DataSplit split(const Dataset& d, const SplitRatios& r, std::uint64_t seed) {
  const SplitIndices s = split_indices(d.size(), r, seed);
  DataSplit out;
  for (auto i : s.train) out.train.push_back(d[i]);
  for (auto i : s.val) out.val.push_back(d[i]);
  for (auto i : s.test) out.test.push_back(d[i]);
  return out;
}

// ---- batching --------------------------------------------------------------

/// Stacks images into [N,3,H,W], resizing any that differ from `size`.
inline Tensor stack_images(const Dataset& d, std::span<const std::size_t> idx, std::size_t size) {
  Tensor out({idx.size(), 3, size, size});
  const std::size_t per = 3 * size * size;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = d.at(idx[i]);
    const Tensor img = (s.height() == size && s.width() == size) ? s.image : bilinear_resize(s.image, size, size);
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + i * per);
  }
  return out;
}

inline Tensor stack_images(const Dataset& d, std::size_t size) {
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), 0);
  return stack_images(d, idx, size);
}

inline std::vector<std::size_t> labels_of(const Dataset& d) {
  std::vector<std::size_t> out;
  out.reserve(d.size());
  for (const auto& s : d) out.push_back(s.label);
  return out;
}

// ---- storage ---------------------------------------------------------------

inline Image8 to_image8(const Tensor& img) {
  const std::size_t h = img.dim(1), w = img.dim(2);
  Image8 out{w, h, 3, std::vector<std::uint8_t>(h * w * 3)};
  for (std::size_t ch = 0; ch < 3; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) {
      const float v = std::clamp(img[ch * h * w + p], 0.0f, 1.0f);
      out.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return out;
}

inline Tensor from_image8(const Image8& img) {
  if (img.channels != 3) throw ImageError("expected an RGB image");
  Tensor out({3, img.height, img.width});
  const std::size_t hw = img.height * img.width;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) out[ch * hw + p] = static_cast<float>(img.pixels[p * 3 + ch]) / 255.0f;
  return out;
}

inline Image8 mask_to_image8(const AttentionMask& m) {
  Image8 out{m.width, m.height, 1, std::vector<std::uint8_t>(m.bits.size())};
  for (std::size_t i = 0; i < m.bits.size(); ++i) out.pixels[i] = m.bits[i] ? 255 : 0;
  return out;
}

/// Any nonzero pixel counts as attended.
inline AttentionMask mask_from_image8(const Image8& img) {
  if (img.channels != 1) throw ImageError("mask must be single-channel");
  AttentionMask m(img.height, img.width);
  for (std::size_t i = 0; i < m.bits.size(); ++i) m.bits[i] = img.pixels[i] ? 1 : 0;
  return m;
}

inline std::string encode_mask_png(const AttentionMask& m) { return encode_png(mask_to_image8(m)); }
inline AttentionMask decode_mask_png(std::string_view bytes) { return mask_from_image8(decode_png(bytes, 1)); }

/// Snaps values to the 8-bit grid so a PNG round trip is exact.
inline void quantize_8bit(Tensor& img) {
  for (float& v : img.data()) v = static_cast<float>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
}

struct ManifestRecord {
  std::string id;
  std::string relative_path;
  std::size_t label = 0;
  std::string split;
  std::optional<std::string> mask_path;

  nlohmann::json to_json() const {
    nlohmann::json j{{"id", id}, {"relative_path", relative_path}, {"label", label}, {"split", split}};
    if (mask_path) j["mask_path"] = *mask_path;
    return j;
  }

  static ManifestRecord from_json(const nlohmann::json& j) {
    ManifestRecord r;
    r.id = j.at("id").get<std::string>();
    r.relative_path = j.at("relative_path").get<std::string>();
    r.label = j.at("label").get<std::size_t>();
    r.split = j.value("split", std::string());
    if (j.contains("mask_path") && !j["mask_path"].is_null()) r.mask_path = j["mask_path"].get<std::string>();
    return r;
  }
};

inline constexpr const char* kManifestName = "manifest.jsonl";

/// Writes images/<id>.png, masks/<id>.png and one manifest line per sample.
inline void save_dataset(const std::filesystem::path& root, const DataSplit& d) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  std::ostringstream manifest;
  auto emit = [&](const Dataset& part, const char* name) {
    for (const Sample& s : part) {
      ManifestRecord r{s.id, "images/" + s.id + ".png", s.label, name, std::nullopt};
      write_png(root / r.relative_path, to_image8(s.image));
      if (s.mask) {
        r.mask_path = "masks/" + s.id + ".png";
        write_png(root / *r.mask_path, mask_to_image8(*s.mask));
      }
      manifest << r.to_json().dump() << '\n';
    }
  };
  emit(d.train, "train");
  emit(d.val, "val");
  emit(d.test, "test");
  std::ofstream f(root / kManifestName, std::ios::trunc);
  f << manifest.str();
  if (!f) throw ImageError("cannot write manifest in " + root.string());
}

inline std::vector<ManifestRecord> read_manifest(const std::filesystem::path& root) {
  std::ifstream f(root / kManifestName);
  if (!f) throw ImageError("no manifest at " + (root / kManifestName).string());
  std::vector<ManifestRecord> out;
  std::string line;
  std::set<std::string> seen;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    out.push_back(ManifestRecord::from_json(nlohmann::json::parse(line)));
    if (!seen.insert(out.back().id).second) throw ImageError("duplicate id '" + out.back().id + "' in manifest");
  }
  return out;
}

inline DataSplit load_dataset(const std::filesystem::path& root) {
  DataSplit d;
  for (const auto& r : read_manifest(root)) {
    const auto path = root / r.relative_path;
    if (!std::filesystem::exists(path)) throw ImageError("manifest path missing: " + path.string());
    Sample s{r.id, r.label, from_image8(read_png(path, 3)), std::nullopt};
    if (r.mask_path) s.mask = mask_from_image8(read_png(root / *r.mask_path, 1));
    if (r.split == "train") d.train.push_back(std::move(s));
    else if (r.split == "val") d.val.push_back(std::move(s));
    else if (r.split == "test") d.test.push_back(std::move(s));
    else throw ImageError("unknown split '" + r.split + "' for " + r.id);
  }
  return d;
}

// ---- leak audit ------------------------------------------------------------

struct LeakReport {
  std::vector<std::string> test_ids_in_training;
  std::vector<std::string> val_ids_in_training;

  bool clean() const { return test_ids_in_training.empty(); }

  nlohmann::json to_json() const {
    return {{"test_leak", test_ids_in_training},
            {"val_in_training", val_ids_in_training},
            {"clean", clean()}};
  }
};

/// Compares base ids of the training corpus with the held-out sets. Test
/// leakage is a failure; validation ids entering training are reported
/// because annotated validation errors are added to the corpus.
inline LeakReport leak_audit(const Dataset& training, const Dataset& val, const Dataset& test) {
  std::set<std::string> train_ids;
  for (const auto& s : training) train_ids.insert(base_id(s.id));
  LeakReport r;
  for (const auto& s : test)
    if (train_ids.count(base_id(s.id))) r.test_ids_in_training.push_back(s.id);
  for (const auto& s : val)
    if (train_ids.count(base_id(s.id))) r.val_ids_in_training.push_back(s.id);
  return r;
}

}  // namespace ilmcam
