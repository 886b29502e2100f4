#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "nimbus/error.hpp"
#include "nimbus/masks.hpp"

namespace nimbus {

/// Half-open bins: [0, t1) sky, [t1, t2) thin, [t2, 1] thick.
struct Thresholds {
  double t1 = 0.3;
  double t2 = 0.6;

  void validate() const {
    if (!(t1 > 0.0 && t1 < t2 && t2 < 1.0))
      throw ConfigError("thresholds must satisfy 0 < t1 < t2 < 1, got t1=" + std::to_string(t1) +
                        " t2=" + std::to_string(t2));
  }
};

inline Label ternarize(double p, const Thresholds& th) {
  if (p < th.t1) return Label::Sky;
  if (p < th.t2) return Label::Thin;
  return Label::Thick;
}

inline LabelMask ternarize(const ProbabilityMask& mask, const Thresholds& th = {}) {
  th.validate();
  LabelMask out(mask.height, mask.width);
  for (std::size_t i = 0; i < mask.size(); ++i) out.labels[i] = ternarize(mask.values[i], th);
  return out;
}

/// Misclassification percentage per ground-truth label; absent when the
/// label has no ground-truth pixels.
struct LabelErrors {
  std::optional<double> sky_pct;
  std::optional<double> thin_pct;
  std::optional<double> thick_pct;

  std::optional<double>& operator[](Label l) {
    return l == Label::Sky ? sky_pct : (l == Label::Thin ? thin_pct : thick_pct);
  }
  const std::optional<double>& operator[](Label l) const {
    return l == Label::Sky ? sky_pct : (l == Label::Thin ? thin_pct : thick_pct);
  }

  friend bool operator==(const LabelErrors&, const LabelErrors&) = default;
};

/// Raw pixel counts behind LabelErrors.
struct LabelCounts {
  std::array<std::size_t, 3> total{};   // gt == L
  std::array<std::size_t, 3> missed{};  // gt == L and pred != L

  void add(const LabelMask& pred, const LabelMask& gt) {
    if (pred.height != gt.height || pred.width != gt.width)
      throw ShapeError("per_label_error: prediction " + std::to_string(pred.width) + "x" +
                       std::to_string(pred.height) + " vs ground truth " + std::to_string(gt.width) +
                       "x" + std::to_string(gt.height));
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const auto g = static_cast<std::size_t>(gt.labels[i]);
      ++total[g];
      if (pred.labels[i] != gt.labels[i]) ++missed[g];
    }
  }

  LabelErrors errors() const {
    LabelErrors e;
    for (Label l : kAllLabels) {
      const auto i = static_cast<std::size_t>(l);
      if (total[i] > 0) e[l] = 100.0 * static_cast<double>(missed[i]) / static_cast<double>(total[i]);
    }
    return e;
  }
};

/// Pixel counts pooled over all image pairs.
inline LabelErrors per_label_error(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt) {
  if (pred.size() != gt.size())
    throw ShapeError("per_label_error: " + std::to_string(pred.size()) + " predictions vs " +
                     std::to_string(gt.size()) + " ground-truth masks");
  LabelCounts counts;
  for (std::size_t i = 0; i < pred.size(); ++i) counts.add(pred[i], gt[i]);
  return counts.errors();
}

/// Per-label arithmetic mean over the runs where the label is present, summed
/// in run order.
inline LabelErrors aggregate(const std::vector<LabelErrors>& runs) {
  if (runs.empty()) throw ConfigError("aggregate: no runs");
  LabelErrors mean;
  for (Label l : kAllLabels) {
    double sum = 0.0;
    int n = 0;
    for (const auto& r : runs) {
      if (r[l]) {
        sum += *r[l];
        ++n;
      }
    }
    if (n > 0) mean[l] = sum / n;
  }
  return mean;
}

/// Mean of per-image percentages (the unpooled alternative).
inline LabelErrors per_image_mean_error(const std::vector<LabelMask>& pred, const std::vector<LabelMask>& gt) {
  if (pred.size() != gt.size())
    throw ShapeError("per_image_mean_error: list lengths differ");
  std::vector<LabelErrors> each;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    LabelCounts c;
    c.add(pred[i], gt[i]);
    each.push_back(c.errors());
  }
  if (each.empty()) return {};
  return aggregate(each);
}

}  // namespace nimbus
