#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>

#include "nimbus/image.hpp"
#include "nimbus/masks.hpp"

namespace nimbus {

using Rgb = std::array<std::uint8_t, 3>;

// Three-point blue / neutral / red diverging map.
inline constexpr std::array<double, 3> kCoolwarmLow{59, 76, 192};
inline constexpr std::array<double, 3> kCoolwarmMid{221, 221, 221};
inline constexpr std::array<double, 3> kCoolwarmHigh{180, 4, 38};

/// Unrounded colour for p in [0, 1], linear per channel on each half.
inline std::array<double, 3> coolwarm(double p) {
  p = std::clamp(p, 0.0, 1.0);
  std::array<double, 3> c{};
  for (int i = 0; i < 3; ++i) {
    c[i] = p <= 0.5 ? kCoolwarmLow[i] + (kCoolwarmMid[i] - kCoolwarmLow[i]) * (p / 0.5)
                    : kCoolwarmMid[i] + (kCoolwarmHigh[i] - kCoolwarmMid[i]) * ((p - 0.5) / 0.5);
  }
  return c;
}

/// coolwarm(p) rounded half-up to 8 bits.
inline Rgb coolwarm_rgb(double p) {
  const auto c = coolwarm(p);
  Rgb out{};
  for (int i = 0; i < 3; ++i) out[i] = static_cast<std::uint8_t>(std::floor(c[i] + 0.5));
  return out;
}

inline Image render_prob(const ProbabilityMask& mask) {
  Image img(mask.width, mask.height, 3);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const Rgb c = coolwarm_rgb(mask.values[i]);
    for (int k = 0; k < 3; ++k) img.samples[i * 3 + k] = c[k];
  }
  return img;
}

/// Gray level shared with the ground-truth mask encoding.
inline std::uint8_t ternary_gray(Label l) {
  switch (l) {
    case Label::Sky: return 0;
    case Label::Thin: return 128;
    case Label::Thick: return 255;
  }
  return 0;
}

inline Image render_ternary(const LabelMask& mask) {
  Image img(mask.width, mask.height, 3);
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const std::uint8_t g = ternary_gray(mask.labels[i]);
    for (int k = 0; k < 3; ++k) img.samples[i * 3 + k] = g;
  }
  return img;
}

/// Raw mask as 16-bit grayscale, round(p * 65535).
inline Image render_raw16(const ProbabilityMask& mask) {
  Image img(mask.width, mask.height, 1, 16);
  for (std::size_t i = 0; i < mask.size(); ++i)
    img.samples[i] = static_cast<std::uint16_t>(std::lround(std::clamp<double>(mask.values[i], 0.0, 1.0) * 65535.0));
  return img;
}

/// Inverse of render_raw16 (up to quantisation).
inline ProbabilityMask decode_raw16(const Image& img) {
  if (img.channels != 1 || img.bit_depth != 16)
    throw Error("expected a 16-bit grayscale probability mask");
  ProbabilityMask m{img.height, img.width, {}};
  m.values.resize(img.samples.size());
  for (std::size_t i = 0; i < img.samples.size(); ++i) m.values[i] = static_cast<float>(img.samples[i] / 65535.0);
  return m;
}

}  // namespace nimbus
