#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/tensor.hpp"

namespace nimbus {

/// Per-pixel sky category, ordered by cloudiness.
enum class Label : std::uint8_t { Sky = 0, Thin = 1, Thick = 2 };

inline constexpr Label kAllLabels[] = {Label::Sky, Label::Thin, Label::Thick};

inline const char* label_name(Label l) {
  switch (l) {
    case Label::Sky: return "sky";
    case Label::Thin: return "thin";
    case Label::Thick: return "thick";
  }
  return "?";
}

struct LabelMask {
  int height = 0;
  int width = 0;
  std::vector<Label> labels;

  LabelMask() = default;
  LabelMask(int h, int w, Label fill = Label::Sky)
      : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

  Label& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  Label at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return labels.size(); }

  friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Per-pixel cloudiness in [0, 1].
struct ProbabilityMask {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  float at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return values.size(); }
};

/// Regression target for a label: Sky 0, Thin 0.5, Thick 1.
inline float label_target(Label l) {
  switch (l) {
    case Label::Sky: return 0.0f;
    case Label::Thin: return 0.5f;
    case Label::Thick: return 1.0f;
  }
  return 0.0f;
}

inline std::vector<float> encode_target(const LabelMask& mask) {
  std::vector<float> out(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) out[i] = label_target(mask.labels[i]);
  return out;
}

/// Reinterprets a (1, 1, h, w) network output as a probability mask.
template <typename T>
ProbabilityMask mask_of(const Tensor<T>& output) {
  const Shape& s = output.shape();
  if (s.n != 1 || s.c != 1)
    throw ShapeError("mask_of: expected a (1,1,h,w) tensor, got " + s.str());
  ProbabilityMask m{s.h, s.w, {}};
  m.values.assign(output.values().begin(), output.values().end());
  return m;
}

}  // namespace nimbus
