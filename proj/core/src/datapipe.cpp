#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <numeric>
#include <random>
#include <set>

#include "modeseg/datapipe.hpp"

namespace modeseg {

int zone_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  const bool bottom = 2 * row >= height;
  const bool right = 2 * col >= width;
  return 1 + (right ? 1 : 0) + (bottom ? 2 : 0);
}

std::vector<Tile> tile(const Raster& raster, const BinaryMask& mask, std::size_t tile_size) {
  if (tile_size == 0) throw ContractError("tile: tile size must be positive");
  if (raster.width != mask.width || raster.height != mask.height) {
    throw DimensionError("tile: raster is " + std::to_string(raster.width) + "x" +
                         std::to_string(raster.height) + " but mask is " +
                         std::to_string(mask.width) + "x" + std::to_string(mask.height));
  }
  const std::size_t T = tile_size;
  const std::size_t rows = raster.height / T, cols = raster.width / T;
  std::vector<Tile> tiles;
  tiles.reserve(rows * cols);
  for (std::size_t tr = 0; tr < rows; ++tr) {
    for (std::size_t tc = 0; tc < cols; ++tc) {
      const std::size_t r0 = tr * T, c0 = tc * T;
      bool usable = true;
      if (raster.has_nodata()) {
        for (std::size_t r = 0; r < T && usable; ++r) {
          const std::size_t off = (r0 + r) * raster.width + c0;
          usable = std::none_of(raster.nodata.begin() + static_cast<std::ptrdiff_t>(off),
                                raster.nodata.begin() + static_cast<std::ptrdiff_t>(off + T),
                                [](std::uint8_t f) { return f != 0; });
        }
      }
      if (!usable) continue;
      Tile t;
      t.size = T;
      t.row = r0;
      t.col = c0;
      t.image.resize(T * T);
      t.mask.resize(T * T);
      std::size_t water = 0;
      for (std::size_t r = 0; r < T; ++r) {
        const std::size_t off = (r0 + r) * raster.width + c0;
        std::copy_n(raster.values.begin() + static_cast<std::ptrdiff_t>(off), T,
                    t.image.begin() + static_cast<std::ptrdiff_t>(r * T));
        for (std::size_t c = 0; c < T; ++c) {
          const std::uint8_t m = mask.values[off + c] ? 1 : 0;
          t.mask[r * T + c] = m;
          water += m;
        }
      }
      t.water_fraction = static_cast<double>(water) / static_cast<double>(T * T);
      t.zone = zone_of(r0 + T / 2, c0 + T / 2, raster.height, raster.width);
      tiles.push_back(std::move(t));
    }
  }
  return tiles;
}

StandardizationStats compute_standardization(const std::vector<Tile>& tiles,
                                             const std::vector<std::size_t>& train_indices) {
  if (train_indices.empty()) throw ContractError("standardize: no training tiles");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i : train_indices) {
    for (float v : tiles.at(i).image) sum += v;
    n += tiles[i].image.size();
  }
  if (n == 0) throw ContractError("standardize: training tiles are empty");
  const double mu = sum / static_cast<double>(n);
  double sq = 0.0;
  for (std::size_t i : train_indices) {
    for (float v : tiles[i].image) sq += (v - mu) * (v - mu);
  }
  const double sigma = std::sqrt(sq / static_cast<double>(n));
  if (!(sigma > 0.0)) {
    throw DataError("standardize: training pixels have zero standard deviation");
  }
  return {mu, sigma};
}

std::vector<Tile> apply_standardization(const std::vector<Tile>& tiles,
                                        const StandardizationStats& stats) {
  std::vector<Tile> out = tiles;
  for (Tile& t : out) {
    for (float& v : t.image) v = static_cast<float>((v - stats.mu) / stats.sigma);
  }
  return out;
}

std::pair<std::vector<Tile>, StandardizationStats> standardize(
    const std::vector<Tile>& tiles, const std::vector<std::size_t>& train_indices) {
  const StandardizationStats stats = compute_standardization(tiles, train_indices);
  return {apply_standardization(tiles, stats), stats};
}

void SplitPlan::check_partition(std::size_t total) const {
  std::vector<int> seen(total, 0);
  for (const auto* part : {&train, &val, &test}) {
    for (std::size_t i : *part) {
      if (i >= total) throw ContractError("split: index " + std::to_string(i) + " out of range");
      if (seen[i]++) throw ContractError("split: tile " + std::to_string(i) + " appears twice");
    }
  }
  for (std::size_t i = 0; i < total; ++i) {
    if (!seen[i]) throw ContractError("split: tile " + std::to_string(i) + " is unassigned");
  }
}

std::string SplitPlan::to_json() const {
  nlohmann::json j{{"seed", seed}, {"train", train}, {"val", val}, {"test", test}};
  if (!strata_edges.empty()) j["strata_edges"] = strata_edges;
  if (test_zone) j["test_zone"] = test_zone;
  return j.dump();
}

SplitPlan stratified_split(const std::vector<Tile>& tiles, std::array<double, 3> fractions,
                           std::uint64_t seed, const std::vector<double>& edges) {
  if (tiles.size() < 10) {
    throw ContractError("stratified_split: need at least 10 tiles, got " +
                        std::to_string(tiles.size()));
  }
  const double fsum = fractions[0] + fractions[1] + fractions[2];
  if (std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0.0; }) ||
      std::abs(fsum - 1.0) > 1e-9) {
    throw ConfigError("stratified_split: fractions must be non-negative and sum to 1");
  }
  if (edges.size() < 2) throw ConfigError("stratified_split: need at least one stratum");

  const std::size_t bins = edges.size() - 1;
  std::vector<std::vector<std::size_t>> strata(bins);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const double f = tiles[i].water_fraction;
    std::size_t b = 0;
    while (b + 1 < bins && f >= edges[b + 1]) ++b;
    strata[b].push_back(i);
  }
  // Fold undersized strata into the next non-empty one (or the previous, at the end).
  for (bool merged = true; merged;) {
    merged = false;
    std::vector<std::size_t> nonempty;
    for (std::size_t b = 0; b < bins; ++b)
      if (!strata[b].empty()) nonempty.push_back(b);
    if (nonempty.size() < 2) break;
    for (std::size_t j = 0; j < nonempty.size(); ++j) {
      auto& s = strata[nonempty[j]];
      if (s.size() >= 3) continue;
      auto& into = strata[j + 1 < nonempty.size() ? nonempty[j + 1] : nonempty[j - 1]];
      into.insert(into.end(), s.begin(), s.end());
      s.clear();
      merged = true;
      break;
    }
  }

  SplitPlan plan;
  plan.seed = seed;
  plan.strata_edges = edges;
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>*> train_of;
  for (auto& s : strata) {
    if (s.empty()) continue;
    std::sort(s.begin(), s.end());
    std::shuffle(s.begin(), s.end(), rng);
    const auto n = static_cast<double>(s.size());
    auto n_train = static_cast<std::size_t>(std::lround(fractions[0] * n));
    auto n_val = static_cast<std::size_t>(std::lround(fractions[1] * n));
    n_train = std::min(n_train, s.size());
    n_val = std::min(n_val, s.size() - n_train);
    plan.train.insert(plan.train.end(), s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n_train));
    plan.val.insert(plan.val.end(), s.begin() + static_cast<std::ptrdiff_t>(n_train),
                    s.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    plan.test.insert(plan.test.end(), s.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                     s.end());
  }
  // Small strata can round a partition away entirely; borrow from train.
  for (auto* part : {&plan.val, &plan.test}) {
    const double want = part == &plan.val ? fractions[1] : fractions[2];
    if (part->empty() && want > 0.0 && plan.train.size() > 1) {
      part->push_back(plan.train.back());
      plan.train.pop_back();
    }
  }
  plan.check_partition(tiles.size());
  return plan;
}

std::vector<SplitPlan> zone_folds(const std::vector<Tile>& tiles) {
  std::vector<SplitPlan> folds(4);
  for (int z = 1; z <= 4; ++z) {
    SplitPlan& p = folds[static_cast<std::size_t>(z - 1)];
    p.test_zone = z;
    for (std::size_t i = 0; i < tiles.size(); ++i) {
      if (tiles[i].zone < 1 || tiles[i].zone > 4) {
        throw ConfigError("zone_folds: tile " + std::to_string(i) + " has no zone label");
      }
      (tiles[i].zone == z ? p.test : p.train).push_back(i);
    }
    if (p.test.empty()) throw ConfigError("zone_folds: zone " + std::to_string(z) + " is empty");
  }
  return folds;
}

std::vector<Tile> select(const std::vector<Tile>& tiles, const std::vector<std::size_t>& indices) {
  std::vector<Tile> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(tiles.at(i));
  return out;
}

}  // namespace modeseg
