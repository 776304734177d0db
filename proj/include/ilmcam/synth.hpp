#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "ilmcam/data.hpp"

namespace ilmcam {

struct SynthConfig {
  std::size_t count = 1400;
  std::size_t classes = 2;  // 2 or 9
  std::size_t size = 64;
  std::uint64_t seed = 0;
  double hard_fraction = 0.08;  // faint region plus an outside decoy
};

namespace detail {

using RGB = std::array<float, 3>;

struct Canvas {
  std::size_t n;
  std::vector<float> px;  // [3][n][n]

  explicit Canvas(std::size_t size) : n(size), px(3 * size * size) {}
  float& at(std::size_t ch, std::size_t y, std::size_t x) { return px[(ch * n + y) * n + x]; }

  void blend(std::size_t y, std::size_t x, const RGB& c, float a) {
    for (std::size_t ch = 0; ch < 3; ++ch) at(ch, y, x) = at(ch, y, x) * (1 - a) + c[ch] * a;
  }
};

// Region of interest in normalized polar form around (cy, cx).
struct Region {
  double cy, cx, a, b, theta;
  std::array<double, 4> harm_amp{};
  std::array<double, 4> harm_phase{};
  int shape = 0;  // 0 ellipse, 1 irregular blob, 2 rounded square

  // < 1 inside, scaled radial coordinate.
  double radius(double y, double x) const {
    const double dy = y - cy, dx = x - cx;
    const double u = (dx * std::cos(theta) + dy * std::sin(theta)) / a;
    const double v = (-dx * std::sin(theta) + dy * std::cos(theta)) / b;
    if (shape == 2) {
      const double p = 4.0;
      return std::pow(std::pow(std::abs(u), p) + std::pow(std::abs(v), p), 1.0 / p);
    }
    double r = std::sqrt(u * u + v * v);
    if (shape == 1) {
      const double phi = std::atan2(v, u);
      double scale = 1.0;
      for (std::size_t k = 0; k < harm_amp.size(); ++k) scale += harm_amp[k] * std::cos((k + 2) * phi + harm_phase[k]);
      r /= scale;
    }
    return r;
  }
};

inline RGB jitter(RGB c, std::mt19937_64& rng, float sd) {
  std::normal_distribution<float> d(0.0f, sd);
  for (float& v : c) v = std::clamp(v + d(rng), 0.0f, 1.0f);
  return c;
}

inline void dot(Canvas& cv, const AttentionMask* inside_only, const AttentionMask* outside_only, double cy, double cx,
                double r, const RGB& c, float alpha) {
  const auto n = static_cast<long>(cv.n);
  for (long y = std::max(0L, static_cast<long>(cy - r - 1)); y <= std::min(n - 1, static_cast<long>(cy + r + 1)); ++y)
    for (long x = std::max(0L, static_cast<long>(cx - r - 1)); x <= std::min(n - 1, static_cast<long>(cx + r + 1));
         ++x) {
      const double d = std::hypot(y - cy, x - cx);
      if (d > r) continue;
      const auto uy = static_cast<std::size_t>(y), ux = static_cast<std::size_t>(x);
      if (inside_only && !inside_only->at(uy, ux)) continue;
      if (outside_only && outside_only->at(uy, ux)) continue;
      cv.blend(uy, ux, c, alpha * static_cast<float>(std::min(1.0, (r - d) + 0.5)));
    }
}

}  // namespace detail

/// One synthetic tissue-like image.
///
/// Two classes: 0 is a smooth oval gland with a thin nuclear rim and a pale
/// lumen, 1 an irregular blob crowded with large dark nuclei. Nine classes:
/// 3 outlines x 3 interior textures, each with its own tint. The
/// discriminative region is returned as the mask; clutter is drawn only
/// outside it and does not depend on the label.
inline Sample synth_sample(const SynthConfig& cfg, std::size_t index) {
  using namespace detail;
  std::mt19937_64 rng(cfg.seed * 0x9E3779B97F4A7C15ull + index * 0xBF58476D1CE4E5B9ull + 17);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const std::size_t n = cfg.size;
  const double N = static_cast<double>(n);
  const std::size_t label = static_cast<std::size_t>(rng() % cfg.classes);

  Canvas cv(n);
  const RGB bg = jitter({0.88f, 0.72f, 0.82f}, rng, 0.03f);
  const double fy = uni(1.0, 3.0), fx = uni(1.0, 3.0), ph = uni(0.0, 6.28);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      const float wave = 0.03f * static_cast<float>(std::sin(fy * y / N * 6.28 + ph) * std::cos(fx * x / N * 6.28));
      for (std::size_t ch = 0; ch < 3; ++ch) cv.at(ch, y, x) = bg[ch] + wave;
    }

  int shape = 0, texture = 0;
  if (cfg.classes == 2) {
    shape = label == 0 ? 0 : 1;
    texture = label == 0 ? 0 : 1;
  } else {
    shape = static_cast<int>(label / 3);
    texture = static_cast<int>(label % 3);
  }

  Region reg{uni(0.38, 0.62) * N, uni(0.38, 0.62) * N, uni(0.22, 0.3) * N, uni(0.18, 0.26) * N, uni(0.0, 3.14)};
  reg.shape = shape;
  for (std::size_t k = 0; k < reg.harm_amp.size(); ++k) {
    reg.harm_amp[k] = uni(0.06, 0.14);
    reg.harm_phase[k] = uni(0.0, 6.28);
  }
  AttentionMask mask(n, n);
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) mask.at(y, x) = reg.radius(y + 0.5, x + 0.5) < 1.0 ? 1 : 0;
  if (mask.empty()) mask.at(static_cast<std::size_t>(reg.cy), static_cast<std::size_t>(reg.cx)) = 1;

  const bool hard = u01(rng) < cfg.hard_fraction;
  const float contrast = hard ? static_cast<float>(uni(0.04, 0.1)) : static_cast<float>(uni(0.75, 1.0));

  static const RGB kTints[9] = {{0.95f, 0.88f, 0.93f}, {0.75f, 0.55f, 0.75f}, {0.85f, 0.65f, 0.60f},
                                {0.70f, 0.80f, 0.90f}, {0.90f, 0.80f, 0.55f}, {0.60f, 0.75f, 0.60f},
                                {0.80f, 0.60f, 0.90f}, {0.95f, 0.70f, 0.75f}, {0.65f, 0.65f, 0.70f}};
  const RGB nucleus = jitter({0.32f, 0.16f, 0.46f}, rng, 0.03f);
  const RGB fill = jitter(cfg.classes == 2 ? kTints[label] : kTints[label], rng, 0.02f);

  // Interior fill and rim.
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      if (!mask.at(y, x)) continue;
      const double r = reg.radius(y + 0.5, x + 0.5);
      cv.blend(y, x, fill, 0.9f * contrast);
      if (texture == 0 && r > 0.78) cv.blend(y, x, nucleus, 0.85f * contrast);
      if (texture == 2 && static_cast<int>((x + y) / std::max<std::size_t>(2, n / 16)) % 2 == 0) {
        cv.blend(y, x, nucleus, 0.45f * contrast);
      }
    }
  if (texture == 1) {
    const int count = static_cast<int>(uni(10, 18));
    for (int i = 0; i < count; ++i) {
      const double r = uni(0.045, 0.075) * N;
      const double ang = uni(0.0, 6.28), rad = std::sqrt(u01(rng)) * 0.85;
      const double cy = reg.cy + rad * reg.b * std::sin(ang), cx = reg.cx + rad * reg.a * std::cos(ang);
      dot(cv, &mask, nullptr, cy, cx, r, nucleus, 0.9f * contrast);
    }
  } else if (texture == 0) {
    const int count = static_cast<int>(uni(0, 3));
    for (int i = 0; i < count; ++i) {
      const double ang = uni(0.0, 6.28), rad = std::sqrt(u01(rng)) * 0.5;
      dot(cv, &mask, nullptr, reg.cy + rad * reg.b * std::sin(ang), reg.cx + rad * reg.a * std::cos(ang),
          uni(0.02, 0.03) * N, nucleus, 0.8f * contrast);
    }
  }

  // Hard samples carry a decoy outside the region whose family is independent of the label.
  if (hard) {
    const bool ring_decoy = u01(rng) < 0.5;
    double dy = 0, dx = 0;
    const double dr = 0.16 * N;
    for (int attempt = 0; attempt < 32; ++attempt) {
      dy = uni(dr, N - dr);
      dx = uni(dr, N - dr);
      if (reg.radius(dy, dx) > 1.6) break;
    }
    if (ring_decoy) {
      const RGB pale = jitter(kTints[0], rng, 0.02f);
      dot(cv, nullptr, &mask, dy, dx, dr, nucleus, 0.85f);
      dot(cv, nullptr, &mask, dy, dx, dr * 0.75, pale, 0.95f);
    } else {
      const int count = static_cast<int>(uni(5, 8));
      for (int i = 0; i < count; ++i) {
        const double ang = uni(0.0, 6.28), rad = std::sqrt(u01(rng)) * dr;
        dot(cv, nullptr, &mask, dy + rad * std::sin(ang), dx + rad * std::cos(ang), uni(0.045, 0.07) * N, nucleus,
            0.9f);
      }
    }
  }

  // Label-independent clutter, outside the region only.
  const int clutter = static_cast<int>(uni(4, 10));
  for (int i = 0; i < clutter; ++i) {
    const RGB c = jitter({0.45f, 0.25f, 0.55f}, rng, 0.08f);
    dot(cv, nullptr, &mask, uni(0, N), uni(0, N), uni(0.02, 0.07) * N, c, static_cast<float>(uni(0.5, 0.9)));
  }

  std::normal_distribution<float> noise(0.0f, 0.02f);
  Sample s;
  s.id = "s" + std::string(6 - std::min<std::size_t>(6, std::to_string(index).size()), '0') + std::to_string(index);
  s.label = label;
  s.image = Tensor({3, n, n});
  for (std::size_t i = 0; i < cv.px.size(); ++i) s.image[i] = cv.px[i] + noise(rng);
  quantize_8bit(s.image);
  s.mask = std::move(mask);
  return s;
}

inline Dataset synth_generate(const SynthConfig& cfg) {
  if (cfg.classes != 2 && cfg.classes != 9) throw ConfigError("synthetic data supports 2 or 9 classes");
  if (cfg.size < 16) throw ConfigError("synthetic images must be at least 16 pixels");
  Dataset d;
  d.reserve(cfg.count);
  for (std::size_t i = 0; i < cfg.count; ++i) d.push_back(synth_sample(cfg, i));
  return d;
}

/// Replaces the masked region with the mean colour of the rest of the image.
inline Sample ablate_region(const Sample& s) {
  if (!s.mask) throw std::invalid_argument("ablate_region needs a mask");
  Sample out = s;
  const std::size_t hw = s.height() * s.width();
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0.0;
    std::size_t cnt = 0;
    for (std::size_t p = 0; p < hw; ++p)
      if (!s.mask->bits[p]) {
        sum += s.image[ch * hw + p];
        ++cnt;
      }
    const float mean = cnt ? static_cast<float>(sum / static_cast<double>(cnt)) : 0.5f;
    for (std::size_t p = 0; p < hw; ++p)
      if (s.mask->bits[p]) out.image[ch * hw + p] = mean;
  }
  return out;
}

/// Mean and standard deviation of each colour channel inside the mask.
inline std::array<double, 6> mask_interior_stats(const Sample& s) {
  const std::size_t hw = s.height() * s.width();
  std::array<double, 6> f{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double sum = 0.0, sq = 0.0;
    std::size_t cnt = 0;
    for (std::size_t p = 0; p < hw; ++p)
      if (s.mask->bits[p]) {
        const double v = s.image[ch * hw + p];
        sum += v;
        sq += v * v;
        ++cnt;
      }
    const double mean = sum / static_cast<double>(cnt);
    f[ch] = mean;
    f[3 + ch] = std::sqrt(std::max(0.0, sq / static_cast<double>(cnt) - mean * mean));
  }
  return f;
}

/// Softmax regression on mask-interior colour statistics, fit on even-indexed
/// samples and scored on odd-indexed ones. Returns held-out accuracy.
inline double linear_probe_accuracy(const Dataset& d, std::size_t classes) {
  if (d.size() < 4) throw std::invalid_argument("linear probe needs at least 4 samples");
  constexpr std::size_t F = 6;
  std::vector<std::array<double, F>> x;
  for (const auto& s : d) x.push_back(mask_interior_stats(s));
  std::array<double, F> mu{}, sd{};
  for (const auto& v : x)
    for (std::size_t f = 0; f < F; ++f) mu[f] += v[f] / static_cast<double>(x.size());
  for (const auto& v : x)
    for (std::size_t f = 0; f < F; ++f) sd[f] += (v[f] - mu[f]) * (v[f] - mu[f]) / static_cast<double>(x.size());
  for (auto& v : x)
    for (std::size_t f = 0; f < F; ++f) v[f] = sd[f] > 1e-12 ? (v[f] - mu[f]) / std::sqrt(sd[f]) : 0.0;

  std::vector<double> w(classes * (F + 1), 0.0);
  auto logits = [&](const std::array<double, F>& v, std::vector<double>& z) {
    for (std::size_t k = 0; k < classes; ++k) {
      z[k] = w[k * (F + 1) + F];
      for (std::size_t f = 0; f < F; ++f) z[k] += w[k * (F + 1) + f] * v[f];
    }
  };
  std::vector<double> z(classes), grad(w.size());
  for (int it = 0; it < 400; ++it) {
    std::fill(grad.begin(), grad.end(), 0.0);
    std::size_t m = 0;
    for (std::size_t i = 0; i < d.size(); i += 2, ++m) {
      logits(x[i], z);
      const double mx = *std::max_element(z.begin(), z.end());
      double s = 0.0;
      for (auto& v : z) s += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < classes; ++k) {
        const double g = z[k] / s - (d[i].label == k ? 1.0 : 0.0);
        for (std::size_t f = 0; f < F; ++f) grad[k * (F + 1) + f] += g * x[i][f];
        grad[k * (F + 1) + F] += g;
      }
    }
    for (std::size_t j = 0; j < w.size(); ++j) w[j] -= 0.5 * grad[j] / static_cast<double>(m);
  }
  std::size_t hit = 0, total = 0;
  for (std::size_t i = 1; i < d.size(); i += 2, ++total) {
    logits(x[i], z);
    hit += static_cast<std::size_t>(std::max_element(z.begin(), z.end()) - z.begin()) == d[i].label ? 1 : 0;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

struct ProbeReport {
  double accuracy = 0.0;
  double ablated_accuracy = 0.0;
};

inline ProbeReport probe_dataset(const Dataset& d, std::size_t classes) {
  Dataset ablated;
  ablated.reserve(d.size());
  for (const auto& s : d) ablated.push_back(ablate_region(s));
  return {linear_probe_accuracy(d, classes), linear_probe_accuracy(ablated, classes)};
}

}  // namespace ilmcam
