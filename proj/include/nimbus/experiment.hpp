#pragma once

// The repeated random-split protocol: for run i the data is split 80:20 with
// seed master + i, a fresh network is trained on the train part and scored on
// the test part, and per-label errors are averaged over runs.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "nimbus/dataset.hpp"
#include "nimbus/metrics.hpp"
#include "nimbus/trainer.hpp"
#include "nimbus/unet.hpp"

namespace nimbus {

struct ExperimentConfig {
  std::uint64_t master_seed = 0;
  int runs = 10;
  double train_ratio = 0.8;
  TrainConfig train;
  UNetConfig net;
  Thresholds thresholds;
  /// Skip training and use the ground truth encoding as the prediction.
  bool oracle = false;

  void validate() const {
    if (runs < 1) throw ConfigError("experiment: runs must be >= 1, got " + std::to_string(runs));
    train.validate();
    net.validate();
    thresholds.validate();
  }
};

struct RunRecord {
  int run = 0;
  std::uint64_t seed = 0;
  SplitSpec split;
  LabelErrors errors;            // pooled over test images
  LabelErrors per_image_errors;  // mean of per-image percentages
  double final_train_loss = 0.0;
};

struct ExperimentReport {
  std::vector<RunRecord> runs;
  LabelErrors mean;
  LabelErrors per_image_mean;
  Thresholds thresholds;
  std::uint64_t master_seed = 0;
};

/// Published per-label error percentages, kept only as reference rows.
struct ReferenceRow {
  const char* label;
  double sky, thin, thick;
};
inline constexpr ReferenceRow kPublishedBaseline{"multivariate-distribution baseline (published)", 15.4, 52.0, 23.4};
inline constexpr ReferenceRow kPublishedUNet{"U-Net (published)", 7.3, 4.4, 4.4};

using RunCallback = std::function<void(const RunRecord&)>;

inline ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::vector<Sample>& samples,
                                       const RunCallback& on_run = {}, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  ExperimentReport report;
  report.thresholds = cfg.thresholds;
  report.master_seed = cfg.master_seed;
  const auto ids = sample_ids(samples);

  for (int i = 0; i < cfg.runs; ++i) {
    RunRecord rec;
    rec.run = i;
    rec.seed = cfg.master_seed + static_cast<std::uint64_t>(i);
    rec.split = random_split(ids, cfg.train_ratio, rec.seed);
    const auto test = select_samples(samples, rec.split.test_ids);

    std::vector<ProbabilityMask> masks;
    if (cfg.oracle) {
      for (const auto& s : test) masks.push_back(ProbabilityMask{s.gt.height, s.gt.width, s.target});
    } else {
      UNetConfig net = cfg.net;
      net.seed = rec.seed;
      TrainConfig tc = cfg.train;
      tc.seed = rec.seed;
      const auto result = train(tc, net, select_samples(samples, rec.split.train_ids), on_epoch);
      rec.final_train_loss = result.loss_history.back();
      masks = predict(result.params, test);
    }
    const Evaluation ev = evaluate_masks(masks, test, cfg.thresholds);
    rec.errors = ev.pooled;
    rec.per_image_errors = ev.per_image_mean;
    if (on_run) on_run(rec);
    report.runs.push_back(std::move(rec));
  }

  std::vector<LabelErrors> pooled, per_image;
  for (const auto& r : report.runs) {
    pooled.push_back(r.errors);
    per_image.push_back(r.per_image_errors);
  }
  report.mean = aggregate(pooled);
  report.per_image_mean = aggregate(per_image);
  return report;
}

namespace detail {

/// Shortest text that parses back to exactly `v`.
inline std::string exact_number(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

inline std::string csv_cell(const std::optional<double>& v) { return v ? exact_number(*v) : std::string(); }

inline std::string pct_cell(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.1f%%", *v);
  return buf;
}

}  // namespace detail

/// Columns: run, seed, sky_pct, thin_pct, thick_pct; one row per run then a
/// `mean` row. Absent values are empty cells.
inline std::string report_csv(const ExperimentReport& report) {
  std::ostringstream o;
  o << "run,seed,sky_pct,thin_pct,thick_pct\n";
  for (const auto& r : report.runs) {
    o << r.run << ',' << r.seed << ',' << detail::csv_cell(r.errors.sky_pct) << ','
      << detail::csv_cell(r.errors.thin_pct) << ',' << detail::csv_cell(r.errors.thick_pct) << '\n';
  }
  o << "mean,," << detail::csv_cell(report.mean.sky_pct) << ',' << detail::csv_cell(report.mean.thin_pct) << ','
    << detail::csv_cell(report.mean.thick_pct) << '\n';
  return o.str();
}

inline std::string report_markdown(const ExperimentReport& report, bool verbose = false) {
  using detail::pct_cell;
  std::ostringstream o;
  const auto n = report.runs.size();
  o << "# Multi-label sky/cloud segmentation: " << n << "-run evaluation\n\n";
  o << "Random 80:20 train/test split per run (seed = " << report.master_seed << " + run), thresholds "
    << report.thresholds.t1 << " / " << report.thresholds.t2
    << ". Values are misclassification percentages per ground-truth label, pooled over the test images.\n\n";
  o << "| Approach | Sky | Thin cloud | Thick cloud |\n";
  o << "|---|---:|---:|---:|\n";
  for (const auto& ref : {kPublishedBaseline, kPublishedUNet}) {
    o << "| Reference: " << ref.label << " | " << pct_cell(ref.sky) << " | " << pct_cell(ref.thin) << " | "
      << pct_cell(ref.thick) << " |\n";
  }
  o << "| This build: mean of " << n << " runs | " << pct_cell(report.mean.sky_pct) << " | "
    << pct_cell(report.mean.thin_pct) << " | " << pct_cell(report.mean.thick_pct) << " |\n\n";
  o << "Reference rows are published figures, not computed here.\n\n";

  o << "## Per-run errors\n\n";
  o << "| Run | Seed | Train | Test | Sky | Thin cloud | Thick cloud |\n";
  o << "|---:|---:|---:|---:|---:|---:|---:|\n";
  for (const auto& r : report.runs) {
    o << "| " << r.run << " | " << r.seed << " | " << r.split.train_ids.size() << " | " << r.split.test_ids.size()
      << " | " << pct_cell(r.errors.sky_pct) << " | " << pct_cell(r.errors.thin_pct) << " | "
      << pct_cell(r.errors.thick_pct) << " |\n";
  }
  if (verbose) {
    o << "\n## Per-image mean errors\n\n";
    o << "| Run | Sky | Thin cloud | Thick cloud |\n";
    o << "|---:|---:|---:|---:|\n";
    for (const auto& r : report.runs) {
      o << "| " << r.run << " | " << pct_cell(r.per_image_errors.sky_pct) << " | "
        << pct_cell(r.per_image_errors.thin_pct) << " | " << pct_cell(r.per_image_errors.thick_pct) << " |\n";
    }
    o << "| mean | " << pct_cell(report.per_image_mean.sky_pct) << " | " << pct_cell(report.per_image_mean.thin_pct)
      << " | " << pct_cell(report.per_image_mean.thick_pct) << " |\n";
  }
  return o.str();
}

}  // namespace nimbus
