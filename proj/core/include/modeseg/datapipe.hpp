#pragma once

// Raster ingestion, tiling, standardization, dataset splits and the synthetic
// bimodal scene generator.
//
// Raster files are a flat little-endian float32 buffer plus a JSON sidecar at
// `<path>.json`:  {"width": W, "height": H, "dtype": "f32le", "nodata": s}
// where `nodata` is optional. Masks are either the same raster format
// (values > 0.5 are water) or binary PGM (P5, maxval 255, 255 = water).

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "modeseg/tensor.hpp"

namespace modeseg {

struct Raster {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;           // row-major, dB
  std::vector<std::uint8_t> nodata;    // empty, or one flag per pixel
  std::optional<float> nodata_value;   // sentinel written to / read from the sidecar

  Raster() = default;
  Raster(std::size_t w, std::size_t h, float fill = 0.0f)
      : width(w), height(h), values(w * h, fill) {}

  bool has_nodata() const noexcept { return !nodata.empty(); }
  bool is_nodata(std::size_t i) const noexcept { return !nodata.empty() && nodata[i] != 0; }
};

struct BinaryMask {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> values;  // 0 or 1, row-major

  BinaryMask() = default;
  BinaryMask(std::size_t w, std::size_t h) : width(w), height(h), values(w * h, 0) {}
  double water_fraction() const;
};

Raster load_raster(const std::filesystem::path& path);
void write_raster(const Raster& raster, const std::filesystem::path& path);

/// Loads a mask from PGM (by `.pgm` extension) or from the raster format.
BinaryMask load_mask(const std::filesystem::path& path);
void write_mask_pgm(const BinaryMask& mask, const std::filesystem::path& path);

struct Tile {
  std::size_t size = 0;              // T
  std::vector<float> image;          // T*T, raw or standardized
  std::vector<float> mask;           // T*T, 0 or 1
  std::size_t row = 0, col = 0;      // origin in the parent raster
  int zone = 0;                      // 1..4: image quarter containing the tile center
  double water_fraction = 0.0;
};

/// Zone of a pixel: 1 top-left, 2 top-right, 3 bottom-left, 4 bottom-right.
int zone_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width);

/// Non-overlapping T x T grid from (0, 0). Partial edge tiles and tiles that
/// contain any nodata pixel are dropped.
std::vector<Tile> tile(const Raster& raster, const BinaryMask& mask, std::size_t tile_size = 256);

struct StandardizationStats {
  double mu = 0.0;
  double sigma = 1.0;
  friend bool operator==(const StandardizationStats&, const StandardizationStats&) = default;
};

StandardizationStats compute_standardization(const std::vector<Tile>& tiles,
                                             const std::vector<std::size_t>& train_indices);

/// Computes mu and (population) sigma over the training tiles only and applies
/// them to every tile. Throws DataError when sigma is zero.
std::pair<std::vector<Tile>, StandardizationStats> standardize(
    const std::vector<Tile>& tiles, const std::vector<std::size_t>& train_indices);

std::vector<Tile> apply_standardization(const std::vector<Tile>& tiles,
                                        const StandardizationStats& stats);

struct SplitPlan {
  std::vector<std::size_t> train, val, test;
  std::uint64_t seed = 0;
  std::vector<double> strata_edges;  // empty for zone folds
  int test_zone = 0;                 // 1..4 for zone folds, 0 otherwise

  /// Throws ContractError when partitions overlap or miss an index < total.
  void check_partition(std::size_t total) const;
  std::string to_json() const;
};

inline const std::vector<double>& default_strata_edges() {
  static const std::vector<double> edges{0.0, 0.01, 0.1, 0.3, 0.6, 1.0};
  return edges;
}

/// Water-fraction stratified split with seeded shuffling inside each stratum.
/// Strata with fewer than 3 tiles merge into a neighbour.
SplitPlan stratified_split(const std::vector<Tile>& tiles,
                           std::array<double, 3> fractions = {0.7, 0.1, 0.2},
                           std::uint64_t seed = 0,
                           const std::vector<double>& edges = default_strata_edges());

/// Four folds; fold i tests on zone i+1 and trains on the remaining zones.
std::vector<SplitPlan> zone_folds(const std::vector<Tile>& tiles);

std::vector<Tile> select(const std::vector<Tile>& tiles, const std::vector<std::size_t>& indices);

struct SynthConfig {
  double water_mean_db = -20.0;
  double water_std_db = 2.5;
  double land_mean_db = -7.0;
  double land_std_db = 3.5;
  double coverage = 0.35;       // target water fraction in [0, 1]
  double blob_scale = 48.0;     // correlation length of the water field, pixels
  double speckle_looks = 0.0;   // 0 disables multiplicative speckle
  double min_db = -48.85;       // observed backscatter range
  double max_db = 11.79;

  void validate() const;
};

/// Generates a bimodal SAR-like scene: a smooth random field thresholded at
/// its coverage quantile gives contiguous water blobs; pixels are drawn from
/// the water or land mode, optionally with gamma speckle in linear power.
std::pair<Raster, BinaryMask> synth_scene(std::size_t width, std::size_t height,
                                          const SynthConfig& cfg, std::uint64_t seed);

}  // namespace modeseg
