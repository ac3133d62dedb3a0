#include "cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <modeseg/checkpoint.hpp>

#include "experiment_config.hpp"

namespace modeseg::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kRunsDirEnv = "MODESEG_RUNS_DIR";

// Flags shared by every config-driven subcommand. Each one overrides the
// matching config field when given.
struct Overrides {
  std::string config_path;
  std::optional<std::string> arch, norm, optimizer, loss, raster, mask, run_id, runs_dir;
  std::optional<int> modes, depth, base_channels, epochs, patience;
  std::optional<double> dropout, lr, coverage;
  std::optional<std::size_t> batch_size, tile_size;
  std::optional<std::uint64_t> seed;
};

void add_overrides(CLI::App* app, Overrides& o) {
  app->add_option("-c,--config", o.config_path, "Experiment config (JSON); defaults apply when omitted")
      ->check(CLI::ExistingFile);
  app->add_option("--arch", o.arch, "Architecture: unet or segnet");
  app->add_option("--norm", o.norm, "Normalization: none, batch or mode");
  app->add_option("--modes", o.modes, "Number of modes K for --norm mode");
  app->add_option("--depth", o.depth, "Pooling levels");
  app->add_option("--base-channels", o.base_channels, "Channels at the first level");
  app->add_option("--dropout", o.dropout, "Dropout rate after encoder blocks");
  app->add_option("--optimizer", o.optimizer, "Optimizer: adam or sgd");
  app->add_option("--lr", o.lr, "Learning rate");
  app->add_option("--loss", o.loss, "Loss: dice, focal or combined");
  app->add_option("--epochs", o.epochs, "Maximum epochs");
  app->add_option("--patience", o.patience, "Early-stopping patience in epochs");
  app->add_option("--batch-size", o.batch_size, "Mini-batch size");
  app->add_option("--seed", o.seed, "Seed for weights, split and batch order");
  app->add_option("--raster", o.raster, "Input raster (float32 + .json sidecar); synthetic data when omitted");
  app->add_option("--mask", o.mask, "Ground-truth mask (PGM or raster format)");
  app->add_option("--tile-size", o.tile_size, "Tile extent in pixels");
  app->add_option("--coverage", o.coverage, "Water fraction of the synthetic scene");
  app->add_option("--run-id", o.run_id, "Run directory name");
  app->add_option("--runs-dir", o.runs_dir,
                  std::string("Root directory for runs (default: $") + kRunsDirEnv + " or ./runs)");
}

ExperimentConfig resolve(const Overrides& o) {
  ExperimentConfig c = o.config_path.empty() ? ExperimentConfig{} : load_config(o.config_path);
  if (o.arch) c.model.arch = parse_arch(*o.arch);
  if (o.norm) c.model.norm.kind = parse_norm_kind(*o.norm);
  if (o.modes) c.model.norm.modes = *o.modes;
  if (o.depth) c.model.depth = *o.depth;
  if (o.base_channels) c.model.base_channels = *o.base_channels;
  if (o.dropout) c.model.dropout_rate = *o.dropout;
  if (o.optimizer) c.optimizer.kind = parse_optimizer_kind(*o.optimizer);
  if (o.lr) c.optimizer.learning_rate = *o.lr;
  if (o.loss) c.loss.kind = parse_loss_kind(*o.loss);
  if (o.epochs) c.train.max_epochs = *o.epochs;
  if (o.patience) c.train.patience = *o.patience;
  if (o.batch_size) c.train.batch_size = *o.batch_size;
  if (o.seed) c.seed = *o.seed;
  if (o.raster) c.data.raster = *o.raster;
  if (o.mask) c.data.mask = *o.mask;
  if (o.tile_size) c.data.tile_size = *o.tile_size;
  if (o.coverage) c.data.synth.coverage = *o.coverage;
  if (o.run_id) c.run_id = *o.run_id;
  c.validate();
  return c;
}

fs::path runs_root(const Overrides& o) {
  if (o.runs_dir) return *o.runs_dir;
  if (const char* env = std::getenv(kRunsDirEnv); env && *env) return env;
  return "runs";
}

fs::path prepare_run_dir(const Overrides& o, const ExperimentConfig& c, const std::string& cmd) {
  const std::string id = !c.run_id.empty()
                             ? c.run_id
                             : cmd + "-" + c.model.display_name() + "-seed" + std::to_string(c.seed);
  fs::path dir = runs_root(o) / id;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
  std::ofstream out(dir / "config.json", std::ios::trunc);
  if (!out) throw IoError("cannot write " + (dir / "config.json").string());
  out << to_json(c).dump(2) << '\n';
  return dir;
}

std::vector<Tile> load_tiles(const ExperimentConfig& c) {
  std::vector<Tile> tiles;
  if (c.data.synthetic()) {
    auto [r, m] = synth_scene(c.data.synth_width, c.data.synth_height, c.data.synth, c.data.synth_seed);
    tiles = tile(r, m, c.data.tile_size);
  } else {
    const Raster r = load_raster(c.data.raster);
    const BinaryMask m = load_mask(c.data.mask);
    tiles = tile(r, m, c.data.tile_size);
  }
  if (tiles.empty()) throw DataError("the scene yields no complete tiles of size " +
                                     std::to_string(c.data.tile_size));
  return tiles;
}

struct PreparedSplit {
  SplitPlan plan;
  StandardizationStats stats;
  std::vector<Tile> train, val, test;
};

PreparedSplit prepare_split(const ExperimentConfig& c) {
  const auto raw = load_tiles(c);
  PreparedSplit p;
  p.plan = stratified_split(raw, c.data.split, c.seed);
  auto [tiles, st] = standardize(raw, p.plan.train);
  p.stats = st;
  p.train = select(tiles, p.plan.train);
  p.val = select(tiles, p.plan.val);
  p.test = select(tiles, p.plan.test);
  return p;
}

TrainConfig train_config(const ExperimentConfig& c) {
  TrainConfig t = c.train;
  t.seed = c.seed;
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
}

void print_epoch(const EpochRecord& e) {
  std::printf("epoch %3d  train_loss %.6f  val_loss %.6f  val_dsc %.4f  %.2fs\n", e.epoch,
              e.train_loss, e.val_loss, e.val_metrics.dsc, e.seconds);
  std::fflush(stdout);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::vector<double> parse_doubles(const std::string& s, const char* flag) {
  std::vector<double> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ConfigError(std::string(flag) + ": '" + item + "' is not a number");
    }
  }
  return out;
}

// ---------------------------------------------------------------- commands

struct SynthArgs {
  std::size_t width = 512, height = 512;
  double coverage = 0.35;
  std::uint64_t seed = 0;
  double blob_scale = SynthConfig{}.blob_scale;
  double speckle_looks = 0.0;
  std::string out = "synth";
};

int cmd_synth(const SynthArgs& a) {
  SynthConfig cfg;
  cfg.coverage = a.coverage;
  cfg.blob_scale = a.blob_scale;
  cfg.speckle_looks = a.speckle_looks;
  cfg.validate();
  if (a.width == 0 || a.height == 0) throw ConfigError("--width and --height must be positive");
  auto [raster, mask] = synth_scene(a.width, a.height, cfg, a.seed);
  const fs::path dir = a.out;
  write_raster(raster, dir / "scene.f32");
  write_mask_pgm(mask, dir / "mask.pgm");
  std::printf("wrote %s and %s (%zux%zu, water fraction %.4f)\n", (dir / "scene.f32").c_str(),
              (dir / "mask.pgm").c_str(), a.width, a.height, mask.water_fraction());
  return kSuccess;
}

int cmd_train(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path dir = prepare_run_dir(o, c, "train");
  const PreparedSplit s = prepare_split(c);
  write_text(dir / "split.json", s.plan.to_json() + "\n");
  std::printf("%s: %zu train / %zu val / %zu test tiles -> %s\n", c.model.display_name().c_str(),
              s.train.size(), s.val.size(), s.test.size(), dir.c_str());

  Model<float> model(c.model, c.seed);
  const RunRecord rec = train(model, s.train, s.val, train_config(c), c.optimizer, c.loss, print_epoch);
  write_record_jsonl(rec, dir / "record.jsonl");
  write_loss_curves_csv({rec}, dir / "loss_curve.csv");
  if (!rec.ok()) {
    std::fprintf(stderr, "error: training failed: %s\n", rec.error.c_str());
    return kRuntimeFailure;
  }
  save_checkpoint(model, dir / "checkpoint", CheckpointMeta{s.stats, c.data.tile_size});
  if (!s.test.empty()) {
    const EvalResult ev = evaluate(model, s.test, c.loss, c.train.batch_size, c.train.threshold);
    write_metrics_csv(ev.metrics, dir / "metrics.csv");
    std::printf("test dsc %.4f  iou %.4f\n", ev.metrics.dsc, ev.metrics.iou);
  }
  std::printf("stopped at epoch %d (best %d, val_loss %.6f) in %.2fs cpu; fingerprint %s\n",
              rec.stopped_epoch, rec.best_epoch, rec.best_val_loss, rec.total_seconds,
              fingerprint_hex(rec.final_fingerprint).c_str());
  return kSuccess;
}

int cmd_compare(const Overrides& o) {
  const ExperimentConfig c = resolve(o);
  const fs::path dir = prepare_run_dir(o, c, "compare");
  const PreparedSplit s = prepare_split(c);
  std::vector<RunRecord> records;
  for (NormKind kind : {NormKind::batch, NormKind::mode}) {
    ModelSpec spec = c.model;
    spec.norm.kind = kind;
    std::printf("== %s\n", spec.display_name().c_str());
    Model<float> model(spec, c.seed);
    records.push_back(train(model, s.train, s.val, train_config(c), c.optimizer, c.loss, print_epoch));
    write_record_jsonl(records.back(), dir / spec.display_name() / "record.jsonl");
    if (!records.back().ok()) {
      std::fprintf(stderr, "error: %s failed: %s\n", spec.display_name().c_str(),
                   records.back().error.c_str());
      return kRuntimeFailure;
    }
  }
  write_loss_curves_csv(records, dir / "loss_curve.csv");
  const auto rows = speedup_report(records[0], records[1]);
  write_speedup_csv(rows, dir / "speedup.csv");
  for (const auto& r : rows) {
    std::printf("%-10s epochs %3d  %.2fs  speed-up %.3f\n", r.model.c_str(), r.epochs, r.seconds,
                r.speedup);
  }
  return kSuccess;
}

struct GridArgs {
  unsigned workers = 1;
  std::string optimizers, lrs, dropouts, losses;
};

int cmd_gridsearch(const Overrides& o, const GridArgs& g) {
  const ExperimentConfig c = resolve(o);
  Grid grid;
  if (!g.optimizers.empty()) {
    grid.optimizers.clear();
    for (const auto& s : split_list(g.optimizers)) grid.optimizers.push_back(parse_optimizer_kind(s));
  }
  if (!g.lrs.empty()) grid.learning_rates = parse_doubles(g.lrs, "--lrs");
  if (!g.dropouts.empty()) grid.dropouts = parse_doubles(g.dropouts, "--dropouts");
  if (!g.losses.empty()) {
    grid.losses.clear();
    for (const auto& s : split_list(g.losses)) grid.losses.push_back(parse_loss_kind(s));
  }
  const auto configs = grid.enumerate();
  if (configs.empty()) throw ConfigError("the grid is empty");
  if (g.workers == 0) throw ConfigError("--workers must be at least 1");

  const fs::path dir = prepare_run_dir(o, c, "gridsearch");
  const PreparedSplit s = prepare_split(c);
  std::printf("%s: %zu configurations on %u worker(s)\n", c.model.display_name().c_str(),
              configs.size(), g.workers);
  const GridResult r = grid_search(c.model, configs, s.train, s.val, train_config(c), c.optimizer,
                                   c.loss, c.seed, g.workers);
  write_grid_results_csv(r, c.model.display_name(), dir / "grid_results.csv");
  std::size_t failed = 0;
  for (const auto& e : r.entries) failed += !e.ok;
  if (!r.any_ok) {
    std::fprintf(stderr, "error: every configuration failed\n");
    return kRuntimeFailure;
  }
  std::printf("selected #%zu %s  val_dsc %.4f  (%zu failed)\n", r.selected,
              r.best().config.label().c_str(), r.best().val_metrics.dsc, failed);
  return kSuccess;
}

struct CvArgs {
  unsigned workers = 1;
  std::string archs, norms;
};

int cmd_crossval(const Overrides& o, const CvArgs& a) {
  const ExperimentConfig c = resolve(o);
  if (a.workers == 0) throw ConfigError("--workers must be at least 1");
  std::vector<Arch> archs{c.model.arch};
  std::vector<NormKind> norms{c.model.norm.kind};
  if (!a.archs.empty()) {
    archs.clear();
    for (const auto& s : split_list(a.archs)) archs.push_back(parse_arch(s));
  }
  if (!a.norms.empty()) {
    norms.clear();
    for (const auto& s : split_list(a.norms)) norms.push_back(parse_norm_kind(s));
  }
  const fs::path dir = prepare_run_dir(o, c, "crossval");
  const auto raw = load_tiles(c);
  std::vector<CvResult> results;
  bool all_ok = true;
  for (Arch arch : archs) {
    for (NormKind kind : norms) {
      ModelSpec spec = c.model;
      spec.arch = arch;
      spec.norm.kind = kind;
      spec.validate();
      results.push_back(cross_validate(spec, raw, train_config(c), c.optimizer, c.loss, c.seed,
                                       a.workers, c.data.cv_val_fraction));
      for (const auto& f : results.back().folds) {
        std::printf("%-10s zone %d  test_dsc %s\n", results.back().model.c_str(), f.zone,
                    f.ok ? std::to_string(f.test_metrics.dsc).c_str() : ("failed: " + f.error).c_str());
        all_ok = all_ok && f.ok;
      }
    }
  }
  write_cv_results_csv(results, dir / "cv_results.csv");
  return all_ok ? kSuccess : kRuntimeFailure;
}

struct CheckpointArgs {
  std::string checkpoint, raster, mask, out;
  std::size_t batch_size = 32;
  double threshold = 0.5;
};

Model<float> open_checkpoint(const CheckpointArgs& a, CheckpointMeta& meta) {
  Model<float> model = load_checkpoint(a.checkpoint, &meta);
  if (!meta.standardization || meta.tile_size == 0) {
    throw FormatError("checkpoint " + a.checkpoint + " lacks standardization or tile size");
  }
  try {
    model.spec().check_extent(meta.tile_size, meta.tile_size);
  } catch (const ConfigError& e) {
    throw FormatError("checkpoint " + a.checkpoint + " does not match its model spec: " + e.what());
  }
  return model;
}

int cmd_evaluate(const CheckpointArgs& a) {
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  CheckpointMeta meta;
  Model<float> model = open_checkpoint(a, meta);
  const Raster r = load_raster(a.raster);
  const BinaryMask m = load_mask(a.mask);
  const auto raw = tile(r, m, meta.tile_size);
  if (raw.empty()) throw DataError("the raster yields no complete tiles of size " +
                                   std::to_string(meta.tile_size));
  const auto tiles = apply_standardization(raw, *meta.standardization);
  const EvalResult ev = evaluate(model, tiles, LossConfig{}, a.batch_size, a.threshold);
  std::printf("%s\n%s\n", metrics_csv_header().c_str(), metrics_csv_row(ev.metrics).c_str());
  if (!a.out.empty()) write_metrics_csv(ev.metrics, a.out);
  return kSuccess;
}

int cmd_predict(const CheckpointArgs& a) {
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  CheckpointMeta meta;
  Model<float> model = open_checkpoint(a, meta);
  const Raster in = load_raster(a.raster);
  const std::size_t T = meta.tile_size;
  const double mu = meta.standardization->mu, sigma = meta.standardization->sigma;

  Raster out(in.width, in.height, 0.0f);
  out.nodata.assign(in.width * in.height, 1);  // cleared for every predicted pixel
  out.nodata_value = -1.0f;

  std::vector<std::pair<std::size_t, std::size_t>> origins;
  for (std::size_t r = 0; r + T <= in.height; r += T) {
    for (std::size_t col = 0; col + T <= in.width; col += T) {
      bool clean = true;
      for (std::size_t y = 0; y < T && clean; ++y)
        for (std::size_t x = 0; x < T; ++x)
          if (in.is_nodata((r + y) * in.width + col + x)) {
            clean = false;
            break;
          }
      if (clean) origins.emplace_back(r, col);
    }
  }
  for (std::size_t start = 0; start < origins.size(); start += a.batch_size) {
    const std::size_t n = std::min(a.batch_size, origins.size() - start);
    Tensor<float> x(Shape{n, 1, T, T});
    for (std::size_t b = 0; b < n; ++b) {
      const auto [r, col] = origins[start + b];
      for (std::size_t y = 0; y < T; ++y)
        for (std::size_t xx = 0; xx < T; ++xx)
          x[(b * T + y) * T + xx] =
              static_cast<float>((in.values[(r + y) * in.width + col + xx] - mu) / sigma);
    }
    const Tensor<float> p = model.forward(Var<float>(std::move(x)), false).value();
    for (std::size_t b = 0; b < n; ++b) {
      const auto [r, col] = origins[start + b];
      for (std::size_t y = 0; y < T; ++y)
        for (std::size_t xx = 0; xx < T; ++xx) {
          const std::size_t i = (r + y) * in.width + col + xx;
          out.values[i] = p[(b * T + y) * T + xx] >= a.threshold ? 1.0f : 0.0f;
          out.nodata[i] = 0;
        }
    }
  }
  write_raster(out, a.out);
  std::printf("wrote %s (%zux%zu, %zu tiles predicted)\n", a.out.c_str(), out.width, out.height,
              origins.size());
  return kSuccess;
}

int cmd_config(const Overrides& o) {
  std::printf("%s\n", to_json(resolve(o)).dump(2).c_str());
  return kSuccess;
}

}  // namespace

int run_cli(int argc, char** argv) {
  CLI::App app{"Water segmentation of SAR rasters with batch- or mode-normalized U-Net/SegNet models"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  std::function<int()> action;

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic bimodal scene and its water mask");
  s->add_option("--width", synth.width, "Scene width in pixels")->capture_default_str();
  s->add_option("--height", synth.height, "Scene height in pixels")->capture_default_str();
  s->add_option("--coverage", synth.coverage, "Target water fraction in [0, 1]")->capture_default_str();
  s->add_option("--seed", synth.seed, "Generator seed")->capture_default_str();
  s->add_option("--blob-scale", synth.blob_scale, "Correlation length of water blobs (pixels)")
      ->capture_default_str();
  s->add_option("--speckle-looks", synth.speckle_looks, "Gamma speckle looks; 0 disables")
      ->capture_default_str();
  s->add_option("-o,--out", synth.out, "Output directory (scene.f32 + mask.pgm)")->capture_default_str();
  s->callback([&] { action = [&] { return cmd_synth(synth); }; });

  Overrides ov;
  auto* t = app.add_subcommand("train", "Train one model; writes checkpoint, record.jsonl, loss_curve.csv");
  add_overrides(t, ov);
  t->callback([&] { action = [&] { return cmd_train(ov); }; });

  auto* cmp = app.add_subcommand("compare", "Train batch- and mode-normalized variants; writes speedup.csv");
  add_overrides(cmp, ov);
  cmp->callback([&] { action = [&] { return cmd_compare(ov); }; });

  GridArgs grid;
  auto* g = app.add_subcommand("gridsearch", "Hyperparameter grid search; writes grid_results.csv");
  add_overrides(g, ov);
  g->add_option("--workers", grid.workers, "Parallel training runs")->capture_default_str();
  g->add_option("--optimizers", grid.optimizers, "Comma list restricting the optimizer axis");
  g->add_option("--lrs", grid.lrs, "Comma list restricting the learning-rate axis");
  g->add_option("--dropouts", grid.dropouts, "Comma list restricting the dropout axis");
  g->add_option("--losses", grid.losses, "Comma list restricting the loss axis");
  g->callback([&] { action = [&] { return cmd_gridsearch(ov, grid); }; });

  CvArgs cv;
  auto* x = app.add_subcommand("crossval", "Four-fold zone cross-validation; writes cv_results.csv");
  add_overrides(x, ov);
  x->add_option("--workers", cv.workers, "Parallel folds")->capture_default_str();
  x->add_option("--archs", cv.archs, "Comma list of architectures (default: config)");
  x->add_option("--norms", cv.norms, "Comma list of normalizations (default: config)");
  x->callback([&] { action = [&] { return cmd_crossval(ov, cv); }; });

  CheckpointArgs ck;
  auto* e = app.add_subcommand("evaluate", "Score a checkpoint on a labelled raster");
  e->add_option("--checkpoint", ck.checkpoint, "Checkpoint prefix or manifest")->required();
  e->add_option("--raster", ck.raster, "Input raster")->required();
  e->add_option("--mask", ck.mask, "Ground-truth mask")->required();
  e->add_option("-o,--out", ck.out, "Metrics CSV path (stdout only when omitted)");
  e->add_option("--batch-size", ck.batch_size, "Inference batch size")->capture_default_str();
  e->add_option("--threshold", ck.threshold, "Water probability cut")->capture_default_str();
  e->callback([&] { action = [&] { return cmd_evaluate(ck); }; });

  auto* p = app.add_subcommand("predict", "Predict a full-size water mask raster");
  p->add_option("--checkpoint", ck.checkpoint, "Checkpoint prefix or manifest")->required();
  p->add_option("--raster", ck.raster, "Input raster")->required();
  p->add_option("-o,--out", ck.out, "Output mask raster; uncovered margins are nodata (-1)")->required();
  p->add_option("--batch-size", ck.batch_size, "Inference batch size")->capture_default_str();
  p->add_option("--threshold", ck.threshold, "Water probability cut")->capture_default_str();
  p->callback([&] { action = [&] { return cmd_predict(ck); }; });

  auto* cfg = app.add_subcommand("config", "Print the fully resolved experiment config");
  add_overrides(cfg, ov);
  cfg->callback([&] { action = [&] { return cmd_config(ov); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    return app.exit(err) == 0 ? kSuccess : kUsageError;
  }

  try {
    return action();
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsageError;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kRuntimeFailure;
  }
}

}  // namespace modeseg::cli
