#include "modeseg/trainer.hpp"

#include <time.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "modeseg/checkpoint.hpp"

namespace modeseg {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (max_epochs < 1) throw ConfigError("train.max_epochs must be >= 1");
  if (patience < 1) throw ConfigError("train.patience must be >= 1");
  if (!(min_delta >= 0.0)) throw ConfigError("train.min_delta must be >= 0");
  if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("train.threshold must lie in (0, 1)");
}

bool EarlyStopping::update(double loss) {
  ++epoch_;
  improved_ = loss < best_ - min_delta_;
  if (improved_) {
    best_ = loss;
    best_epoch_ = epoch_;
    wait_ = 0;
    return false;
  }
  return ++wait_ >= patience_;
}

namespace {

double thread_cpu_seconds() {
  timespec ts{};
  clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return static_cast<double>(ts.tv_sec) + 1e-9 * static_cast<double>(ts.tv_nsec);
}

struct WeightSnapshot {
  std::vector<Tensor<float>> params;
  NormSnapshot<float> norms;
};

WeightSnapshot take_snapshot(Model<float>& model) {
  WeightSnapshot s;
  for (const auto& p : model.parameters()) s.params.push_back(p.var.value());
  s.norms = model.snapshot_norm_state();
  return s;
}

void restore_snapshot(Model<float>& model, const WeightSnapshot& s) {
  const auto& params = model.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Var<float> v = params[i].var;
    v.mutable_value() = s.params[i];
  }
  model.restore_norm_state(s.norms);
}

}  // namespace

std::pair<Tensor<float>, Tensor<float>> make_batch(const std::vector<Tile>& tiles,
                                                   std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("make_batch: empty batch");
  const std::size_t t = tiles.at(indices[0]).size;
  const std::size_t px = t * t;
  Tensor<float> image(Shape{indices.size(), 1, t, t});
  Tensor<float> mask(Shape{indices.size(), 1, t, t});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const Tile& tile = tiles.at(indices[b]);
    if (tile.size != t || tile.image.size() != px || tile.mask.size() != px) {
      throw DimensionError("make_batch: tiles of different sizes in one batch");
    }
    std::copy(tile.image.begin(), tile.image.end(), image.ptr() + b * px);
    std::copy(tile.mask.begin(), tile.mask.end(), mask.ptr() + b * px);
  }
  return {std::move(image), std::move(mask)};
}

EvalResult evaluate(Model<float>& model, const std::vector<Tile>& tiles, const LossConfig& loss,
                    std::size_t batch_size, double threshold) {
  if (tiles.empty()) throw ContractError("evaluate: no tiles");
  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  EvalResult r;
  double weighted = 0.0;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    auto [image, mask] = make_batch(tiles, std::span<const std::size_t>(order).subspan(start, n));
    Var<float> pred = model.forward(Var<float>(std::move(image)), false);
    weighted += static_cast<double>(segmentation_loss(pred, mask, loss).value()[0]) *
                static_cast<double>(n);
    r.confusion += confusion(pred.value(), mask, threshold);
  }
  r.loss = weighted / static_cast<double>(tiles.size());
  r.metrics = metrics(r.confusion);
  return r;
}

RunRecord train(Model<float>& model, const std::vector<Tile>& train_tiles,
                const std::vector<Tile>& val_tiles, const TrainConfig& tcfg,
                const OptimizerConfig& ocfg, const LossConfig& lcfg, const EpochCallback& on_epoch) {
  tcfg.validate();
  ocfg.validate();
  lcfg.validate();
  if (train_tiles.empty()) throw ContractError("train: empty training set");
  if (val_tiles.empty()) throw ContractError("train: empty validation set");
  model.spec().check_extent(train_tiles[0].size, train_tiles[0].size);

  RunRecord rec;
  rec.model = model.spec().display_name();
  rec.best_val_loss = std::numeric_limits<double>::infinity();
  Optimizer<float> opt(model.parameters(), ocfg);
  std::mt19937_64 rng(tcfg.seed);
  std::vector<std::size_t> order(train_tiles.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  WeightSnapshot best;
  EarlyStopping stopper(tcfg.patience, tcfg.min_delta);
  double elapsed = 0.0;
  for (int epoch = 1; epoch <= tcfg.max_epochs; ++epoch) {
    const double t0 = thread_cpu_seconds();
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    EpochRecord er;
    er.epoch = epoch;
    try {
      for (std::size_t start = 0; start < order.size(); start += tcfg.batch_size) {
        const std::size_t n = std::min(tcfg.batch_size, order.size() - start);
        auto [image, mask] =
            make_batch(train_tiles, std::span<const std::size_t>(order).subspan(start, n));
        Var<float> pred = model.forward(Var<float>(std::move(image)), true);
        Var<float> loss = segmentation_loss(pred, mask, lcfg);
        const double lv = loss.value()[0];
        if (!std::isfinite(lv)) {
          throw NumericError("non-finite training loss at epoch " + std::to_string(epoch));
        }
        model.zero_grad();
        backward(loss);
        opt.step();
        loss_sum += lv * static_cast<double>(n);
      }
      er.train_loss = loss_sum / static_cast<double>(order.size());
      const EvalResult ev = evaluate(model, val_tiles, lcfg, tcfg.batch_size, tcfg.threshold);
      if (!std::isfinite(ev.loss)) {
        throw NumericError("non-finite validation loss at epoch " + std::to_string(epoch));
      }
      er.val_loss = ev.loss;
      er.val_metrics = ev.metrics;
    } catch (const NumericError& e) {
      rec.diverged = true;
      rec.error = e.what();
      elapsed += thread_cpu_seconds() - t0;
      break;
    }
    er.seconds = thread_cpu_seconds() - t0;
    elapsed += er.seconds;
    er.cumulative_seconds = elapsed;
    rec.epochs.push_back(er);
    rec.stopped_epoch = epoch;
    if (on_epoch) on_epoch(er);

    const bool stop = stopper.update(er.val_loss);
    if (stopper.improved()) {
      rec.best_val_loss = er.val_loss;
      rec.best_epoch = epoch;
      if (tcfg.restore_best) best = take_snapshot(model);
      rec.best_fingerprint = weight_fingerprint(model);
    }
    if (stop) {
      rec.early_stopped = true;
      break;
    }
  }
  rec.total_seconds = elapsed;
  if (tcfg.restore_best && rec.best_epoch > 0) restore_snapshot(model, best);
  rec.final_fingerprint = weight_fingerprint(model);
  return rec;
}

std::string GridConfig::label() const {
  std::ostringstream os;
  os << to_string(optimizer) << "/lr=" << learning_rate << "/dropout=" << dropout << "/"
     << to_string(loss);
  return os.str();
}

std::vector<GridConfig> Grid::enumerate() const {
  std::vector<GridConfig> out;
  for (auto o : optimizers)
    for (double lr : learning_rates)
      for (double d : dropouts)
        for (auto l : losses) out.push_back(GridConfig{o, lr, d, l});
  return out;
}

std::size_t select_best(const std::vector<GridEntry>& entries) {
  std::size_t best = entries.size();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const GridEntry& e = entries[i];
    if (!e.ok || !std::isfinite(e.val_metrics.dsc)) continue;
    if (best == entries.size()) {
      best = i;
      continue;
    }
    const GridEntry& b = entries[best];
    const bool better =
        e.val_metrics.dsc > b.val_metrics.dsc ||
        (e.val_metrics.dsc == b.val_metrics.dsc &&
         (e.config.learning_rate < b.config.learning_rate ||
          (e.config.learning_rate == b.config.learning_rate && e.index < b.index)));
    if (better) best = i;
  }
  return best == entries.size() ? 0 : best;
}

void run_parallel(std::size_t count, unsigned workers,
                  const std::function<void(std::size_t)>& job) {
  const std::size_t nthreads = std::clamp<std::size_t>(workers, 1, std::max<std::size_t>(count, 1));
  if (nthreads == 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < nthreads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!first) first = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first) std::rethrow_exception(first);
}

GridResult grid_search(const ModelSpec& base, const std::vector<GridConfig>& configs,
                       const std::vector<Tile>& train_tiles, const std::vector<Tile>& val_tiles,
                       const TrainConfig& tcfg, const OptimizerConfig& base_opt,
                       const LossConfig& base_loss, std::uint64_t model_seed, unsigned workers) {
  if (configs.empty()) throw ConfigError("grid_search: empty grid");
  GridResult result;
  result.entries.resize(configs.size());
  run_parallel(configs.size(), workers, [&](std::size_t i) {
    GridEntry& e = result.entries[i];
    e.index = i;
    e.config = configs[i];
    try {
      ModelSpec spec = base;
      spec.dropout_rate = configs[i].dropout;
      OptimizerConfig ocfg = base_opt;
      ocfg.kind = configs[i].optimizer;
      ocfg.learning_rate = configs[i].learning_rate;
      LossConfig lcfg = base_loss;
      lcfg.kind = configs[i].loss;
      Model<float> model(spec, model_seed);
      e.record = train(model, train_tiles, val_tiles, tcfg, ocfg, lcfg);
      if (e.record.ok()) {
        e.val_metrics = evaluate(model, val_tiles, lcfg, tcfg.batch_size, tcfg.threshold).metrics;
        e.ok = true;
      } else {
        e.error = e.record.error;
      }
    } catch (const std::exception& ex) {
      e.ok = false;
      e.error = ex.what();
    }
  });
  result.any_ok = std::any_of(result.entries.begin(), result.entries.end(),
                              [](const GridEntry& e) { return e.ok; });
  result.selected = select_best(result.entries);
  return result;
}

CvResult cross_validate(const ModelSpec& spec, const std::vector<Tile>& raw_tiles,
                        const TrainConfig& tcfg, const OptimizerConfig& ocfg,
                        const LossConfig& lcfg, std::uint64_t model_seed, unsigned workers,
                        double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw ConfigError("cross_validate: val_fraction must lie in (0, 1)");
  }
  const std::vector<SplitPlan> folds = zone_folds(raw_tiles);
  CvResult result;
  result.model = spec.display_name();
  run_parallel(folds.size(), workers, [&](std::size_t f) {
    FoldResult& fr = result.folds[f];
    const SplitPlan& plan = folds[f];
    fr.zone = plan.test_zone;
    try {
      std::vector<std::size_t> pool = plan.train;
      std::mt19937_64 rng(tcfg.seed + static_cast<std::uint64_t>(fr.zone));
      std::shuffle(pool.begin(), pool.end(), rng);
      const auto n_val = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(pool.size()))), 1,
          pool.size() - 1);
      std::vector<std::size_t> val(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(n_val));
      std::vector<std::size_t> train_idx(pool.begin() + static_cast<std::ptrdiff_t>(n_val), pool.end());
      std::sort(val.begin(), val.end());
      std::sort(train_idx.begin(), train_idx.end());

      fr.standardization = compute_standardization(raw_tiles, plan.train);
      const auto train_tiles = apply_standardization(select(raw_tiles, train_idx), fr.standardization);
      const auto val_tiles = apply_standardization(select(raw_tiles, val), fr.standardization);
      const auto test_tiles = apply_standardization(select(raw_tiles, plan.test), fr.standardization);
      fr.train_count = train_tiles.size();
      fr.val_count = val_tiles.size();
      fr.test_count = test_tiles.size();

      Model<float> model(spec, model_seed);
      fr.record = train(model, train_tiles, val_tiles, tcfg, ocfg, lcfg);
      if (!fr.record.ok()) {
        fr.error = fr.record.error;
        return;
      }
      fr.test_metrics = evaluate(model, test_tiles, lcfg, tcfg.batch_size, tcfg.threshold).metrics;
      fr.ok = true;
    } catch (const std::exception& ex) {
      fr.ok = false;
      fr.error = ex.what();
    }
  });
  return result;
}

std::vector<SpeedupRow> speedup_report(const RunRecord& baseline, const RunRecord& normalized) {
  SpeedupRow b{baseline.model, baseline.stopped_epoch, baseline.total_seconds, 1.0};
  SpeedupRow m{normalized.model, normalized.stopped_epoch, normalized.total_seconds, 0.0};
  m.speedup = normalized.total_seconds > 0.0 ? baseline.total_seconds / normalized.total_seconds
                                             : std::numeric_limits<double>::infinity();
  return {b, m};
}

}  // namespace modeseg
