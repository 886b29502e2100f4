// nimbus: train, evaluate and run the repeated-split experiment for the
// sky/cloud segmentation network.
//
// Exit codes: 0 success, 2 input error, 3 numeric divergence.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "nimbus.hpp"

namespace fs = std::filesystem;
using namespace nimbus;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitDiverged = 3;

struct DataOptions {
  std::string manifest;
  std::size_t synthetic = 0;
};

struct ModelOptions {
  int depth = 3;
  int base_channels = 16;
  int epochs = 300;
  int batch = 4;
  double lr = TrainConfig{}.learning_rate;
};

void add_data_options(CLI::App* cmd, DataOptions& d) {
  auto* m = cmd->add_option("--manifest", d.manifest, "Tab-separated image/mask/id manifest");
  auto* s = cmd->add_option("--synthetic", d.synthetic, "Use N generated scenes instead of a manifest")
                ->check(CLI::PositiveNumber);
  m->excludes(s);
}

void add_model_options(CLI::App* cmd, ModelOptions& o) {
  cmd->add_option("--depth", o.depth, "Encoder levels")->capture_default_str();
  cmd->add_option("--base-channels", o.base_channels, "Channels at the first level")->capture_default_str();
  cmd->add_option("--epochs", o.epochs, "Training epochs")->capture_default_str();
  cmd->add_option("--batch", o.batch, "Mini-batch size")->capture_default_str();
  cmd->add_option("--lr", o.lr, "Adam learning rate")->capture_default_str();
}

std::vector<Sample> load_samples(const DataOptions& d, std::uint64_t seed) {
  if (d.synthetic > 0) return synth_fixture(d.synthetic, seed);
  if (d.manifest.empty()) throw UsageError("one of --manifest or --synthetic is required");
  return load_dataset(d.manifest);
}

UNetConfig net_config(const ModelOptions& o, std::uint64_t seed) {
  UNetConfig c;
  c.depth = o.depth;
  c.base_channels = o.base_channels;
  c.seed = seed;
  c.validate();
  return c;
}

TrainConfig train_config(const ModelOptions& o, std::uint64_t seed) {
  TrainConfig c;
  c.epochs = o.epochs;
  c.batch_size = o.batch;
  c.learning_rate = o.lr;
  c.seed = seed;
  c.validate();
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("failed writing " + path.string());
}

std::string fmt_errors(const LabelErrors& e) {
  auto one = [](const std::optional<double>& v) {
    if (!v) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", *v);
    return std::string(buf);
  };
  return "sky " + one(e.sky_pct) + "  thin " + one(e.thin_pct) + "  thick " + one(e.thick_pct);
}

EpochCallback epoch_logger(bool verbose) {
  if (!verbose) return {};
  return [](int epoch, double loss) { std::fprintf(stderr, "  epoch %4d  loss %.6f\n", epoch, loss); };
}

/// Writes prob.png, ternary.png and mask16.png for one probability mask.
void write_mask_set(const fs::path& dir, const ProbabilityMask& mask, const Thresholds& th, bool raw) {
  fs::create_directories(dir);
  write_png((dir / "prob.png").string(), render_prob(mask));
  write_png((dir / "ternary.png").string(), render_ternary(ternarize(mask, th)));
  if (raw) write_png((dir / "mask16.png").string(), render_raw16(mask));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sky/cloud segmentation with a U-Net"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  std::string out = ".";
  double t1 = 0.3, t2 = 0.6;
  bool verbose = false;
  DataOptions data;
  ModelOptions model;
  std::string checkpoint, image, input, resume;
  int runs = 10;
  bool oracle = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--seed", seed, "Master seed")->capture_default_str();
    cmd->add_option("--out", out, "Output directory")->capture_default_str();
    cmd->add_flag("-v,--verbose", verbose, "Per-epoch loss on stderr, per-image errors in reports");
  };
  auto add_thresholds = [&](CLI::App* cmd) {
    cmd->add_option("--t1", t1, "Sky / thin cloud threshold")->capture_default_str();
    cmd->add_option("--t2", t2, "Thin / thick cloud threshold")->capture_default_str();
  };

  auto* experiment = app.add_subcommand("experiment", "Repeated 80:20 split: train, evaluate, report");
  add_common(experiment);
  add_data_options(experiment, data);
  add_model_options(experiment, model);
  add_thresholds(experiment);
  experiment->add_option("--runs", runs, "Number of runs")->capture_default_str()->check(CLI::PositiveNumber);
  experiment->add_flag("--oracle", oracle, "Score the ground truth itself instead of a trained network");

  auto* train_cmd = app.add_subcommand("train", "Train once on the train part of a seeded split");
  add_common(train_cmd);
  add_data_options(train_cmd, data);
  add_model_options(train_cmd, model);
  add_thresholds(train_cmd);
  train_cmd->add_option("--checkpoint", checkpoint, "Checkpoint path (default OUT/model.nmbs)");
  train_cmd->add_option("--resume", resume, "Continue from this checkpoint up to --epochs")->check(CLI::ExistingFile);

  auto* eval_cmd = app.add_subcommand("eval", "Per-label errors of a checkpoint on a dataset");
  add_common(eval_cmd);
  add_data_options(eval_cmd, data);
  add_thresholds(eval_cmd);
  eval_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();

  auto* infer_cmd = app.add_subcommand("infer", "Segment one sky image");
  add_common(infer_cmd);
  add_thresholds(infer_cmd);
  infer_cmd->add_option("--checkpoint", checkpoint, "Trained checkpoint")->required();
  infer_cmd->add_option("--image", image, "RGB PNG")->required();

  auto* render_cmd = app.add_subcommand("render", "Colour and ternary renders of a 16-bit mask PNG");
  add_common(render_cmd);
  add_thresholds(render_cmd);
  render_cmd->add_option("--input", input, "16-bit grayscale probability mask")->required();

  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset with a manifest");
  add_common(synth_cmd);
  std::size_t synth_count = 32;
  synth_cmd->add_option("--synthetic", synth_count, "Number of scenes")->capture_default_str()->check(
      CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitInput;
  }

  try {
    const Thresholds th{t1, t2};
    th.validate();
    const fs::path out_dir(out);

    if (*experiment) {
      ExperimentConfig cfg;
      cfg.master_seed = seed;
      cfg.runs = runs;
      cfg.oracle = oracle;
      cfg.thresholds = th;
      cfg.net = net_config(model, seed);
      cfg.train = train_config(model, seed);
      const auto samples = load_samples(data, seed);
      const auto report = run_experiment(
          cfg, samples,
          [](const RunRecord& r) {
            std::printf("run %d (seed %llu, %zu train / %zu test): %s\n", r.run,
                        static_cast<unsigned long long>(r.seed), r.split.train_ids.size(), r.split.test_ids.size(),
                        fmt_errors(r.errors).c_str());
            std::fflush(stdout);
          },
          epoch_logger(verbose));
      fs::create_directories(out_dir);
      write_text(out_dir / "report.csv", report_csv(report));
      write_text(out_dir / "report.md", report_markdown(report, verbose));
      std::printf("mean: %s\n", fmt_errors(report.mean).c_str());
      std::printf("wrote %s and %s\n", (out_dir / "report.csv").string().c_str(),
                  (out_dir / "report.md").string().c_str());
    } else if (*train_cmd) {
      const auto samples = load_samples(data, seed);
      const SplitSpec split = random_split(sample_ids(samples), 0.8, seed);
      const auto train_set = select_samples(samples, split.train_ids);
      const auto test_set = select_samples(samples, split.test_ids);

      UNetConfig net = net_config(model, seed);
      TrainConfig tc = train_config(model, seed);
      TrainState state;
      if (!resume.empty()) {
        Checkpoint c = load_checkpoint(resume);
        net = c.net;
        tc = c.train;
        tc.epochs = model.epochs;
        state = std::move(c.state);
        std::printf("resuming at epoch %d\n", state.epoch);
      } else {
        state = TrainState::fresh(net);
      }
      train_until(state, tc, train_set, tc.epochs, epoch_logger(verbose));

      const fs::path ckpt = checkpoint.empty() ? out_dir / "model.nmbs" : fs::path(checkpoint);
      if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
      save_checkpoint(Checkpoint::from_state(net, tc, state), ckpt.string());
      if (!state.loss_history.empty()) std::printf("final train loss: %.6f\n", state.loss_history.back());
      std::printf("train errors: %s\n", fmt_errors(evaluate(state.params, train_set, th).pooled).c_str());
      std::printf("test errors:  %s\n", fmt_errors(evaluate(state.params, test_set, th).pooled).c_str());
      std::printf("wrote %s\n", ckpt.string().c_str());
    } else if (*eval_cmd) {
      const Checkpoint c = load_checkpoint(checkpoint);
      const auto samples = load_samples(data, seed);
      const Evaluation ev = evaluate(c.state.params, samples, th);
      std::printf("pooled:         %s\n", fmt_errors(ev.pooled).c_str());
      std::printf("per-image mean: %s\n", fmt_errors(ev.per_image_mean).c_str());
    } else if (*infer_cmd) {
      const Checkpoint c = load_checkpoint(checkpoint);
      const SkyImage sky = decode_sky_image(image, [](const std::string& m) {
        std::fprintf(stderr, "warning: %s\n", m.c_str());
      });
      const int r = c.net.resolution;
      const LabelMask blank(sky.height, sky.width);
      const Sample s = make_sample("input", sky, blank, r);
      const auto masks = predict(c.state.params, std::vector<Sample>{s});
      write_mask_set(out_dir, masks.front(), th, true);
      std::printf("wrote prob.png, ternary.png and mask16.png to %s\n", out_dir.string().c_str());
    } else if (*render_cmd) {
      const Image img = read_png(input);
      if (img.channels != 1 || img.bit_depth != 16)
        throw DatasetError(input, "expected a 16-bit grayscale mask");
      write_mask_set(out_dir, decode_raw16(img), th, false);
      std::printf("wrote prob.png and ternary.png to %s\n", out_dir.string().c_str());
    } else if (*synth_cmd) {
      const std::string manifest = write_synthetic_dataset(out, synth_count, seed);
      std::printf("wrote %zu scenes, manifest %s\n", synth_count, manifest.c_str());
    }
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: training diverged: %s\n", e.what());
    return kExitDiverged;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitInput;
  }
  return kExitOk;
}
