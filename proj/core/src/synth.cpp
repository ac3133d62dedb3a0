#include <algorithm>
#include <cmath>
#include <random>

#include "modeseg/datapipe.hpp"

namespace modeseg {

void SynthConfig::validate() const {
  if (!(coverage >= 0.0 && coverage <= 1.0)) {
    throw ConfigError("synth: coverage must lie in [0, 1], got " + std::to_string(coverage));
  }
  if (!(water_std_db > 0.0 && land_std_db > 0.0)) throw ConfigError("synth: stds must be positive");
  if (!(blob_scale >= 1.0)) throw ConfigError("synth: blob_scale must be >= 1 pixel");
  if (speckle_looks < 0.0) throw ConfigError("synth: speckle_looks must be >= 0");
  if (!(min_db < max_db)) throw ConfigError("synth: min_db must be below max_db");
}

namespace {

// Value noise: Gaussian lattice values at spacing `scale`, smoothstep-blended.
void add_value_noise(std::vector<float>& field, std::size_t width, std::size_t height,
                     double scale, double weight, std::mt19937_64& rng) {
  const std::size_t gw = static_cast<std::size_t>(std::ceil(static_cast<double>(width) / scale)) + 2;
  const std::size_t gh = static_cast<std::size_t>(std::ceil(static_cast<double>(height) / scale)) + 2;
  std::normal_distribution<float> n01(0.0f, 1.0f);
  std::vector<float> lattice(gw * gh);
  for (float& v : lattice) v = n01(rng);
  auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
  std::vector<std::size_t> x0(width);
  std::vector<float> wx(width);
  for (std::size_t c = 0; c < width; ++c) {
    const double gx = static_cast<double>(c) / scale;
    x0[c] = static_cast<std::size_t>(gx);
    wx[c] = static_cast<float>(smooth(gx - std::floor(gx)));
  }
  for (std::size_t r = 0; r < height; ++r) {
    const double gy = static_cast<double>(r) / scale;
    const auto y0 = static_cast<std::size_t>(gy);
    const auto wy = static_cast<float>(smooth(gy - std::floor(gy)));
    const float* top = lattice.data() + y0 * gw;
    const float* bot = top + gw;
    float* row = field.data() + r * width;
    for (std::size_t c = 0; c < width; ++c) {
      const std::size_t i = x0[c];
      const float a = top[i] + wx[c] * (top[i + 1] - top[i]);
      const float b = bot[i] + wx[c] * (bot[i + 1] - bot[i]);
      row[c] += static_cast<float>(weight) * (a + wy * (b - a));
    }
  }
}

}  // namespace

std::pair<Raster, BinaryMask> synth_scene(std::size_t width, std::size_t height,
                                          const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (width == 0 || height == 0) throw ConfigError("synth: width and height must be positive");
  const std::size_t n = width * height;
  std::mt19937_64 rng(seed);

  std::vector<float> field(n, 0.0f);
  add_value_noise(field, width, height, cfg.blob_scale, 1.0, rng);
  if (cfg.blob_scale >= 4.0) add_value_noise(field, width, height, cfg.blob_scale / 2.0, 0.5, rng);

  BinaryMask mask(width, height);
  const auto n_water = static_cast<std::size_t>(std::llround(cfg.coverage * static_cast<double>(n)));
  if (n_water >= n) {
    std::fill(mask.values.begin(), mask.values.end(), 1);
  } else if (n_water > 0) {
    std::vector<float> sorted = field;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n_water),
                     sorted.end());
    const float threshold = sorted[n_water];
    for (std::size_t i = 0; i < n; ++i) mask.values[i] = field[i] < threshold ? 1 : 0;
  }
  field.clear();
  field.shrink_to_fit();

  Raster raster(width, height);
  std::normal_distribution<double> water(cfg.water_mean_db, cfg.water_std_db);
  std::normal_distribution<double> land(cfg.land_mean_db, cfg.land_std_db);
  std::gamma_distribution<double> speckle(cfg.speckle_looks > 0.0 ? cfg.speckle_looks : 1.0,
                                          cfg.speckle_looks > 0.0 ? 1.0 / cfg.speckle_looks : 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    double db = mask.values[i] ? water(rng) : land(rng);
    if (cfg.speckle_looks > 0.0) {
      const double power = std::pow(10.0, db / 10.0) * speckle(rng);
      db = 10.0 * std::log10(std::max(power, 1e-30));
    }
    raster.values[i] = static_cast<float>(std::clamp(db, cfg.min_db, cfg.max_db));
  }
  return {std::move(raster), std::move(mask)};
}

}  // namespace modeseg
