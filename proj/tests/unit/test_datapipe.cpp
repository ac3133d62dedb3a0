#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <unistd.h>

#include <modeseg/datapipe.hpp>

using namespace modeseg;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("modeseg_datapipe_" + std::to_string(::getpid()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

// Raster whose pixel value encodes its position.
std::pair<Raster, BinaryMask> ramp(std::size_t w, std::size_t h) {
  Raster r(w, h);
  BinaryMask m(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    r.values[i] = static_cast<float>(i % 997);
    m.values[i] = (i / w) % 3 == 0 ? 1 : 0;
  }
  return {r, m};
}

std::vector<Tile> tiles_with_fractions(const std::vector<double>& fr) {
  std::vector<Tile> out(fr.size());
  for (std::size_t i = 0; i < fr.size(); ++i) {
    out[i].water_fraction = fr[i];
    out[i].size = 2;
    out[i].image = {float(i), float(i) + 1, float(i) + 2, float(i) + 3};
    out[i].mask = {0, 0, 0, 0};
  }
  return out;
}

}  // namespace

TEST_CASE("raster round-trips through the sidecar format") {
  TempDir tmp;
  Raster r(4, 4, 0.0f);
  write_raster(r, tmp.path / "zeros.f32");
  Raster back = load_raster(tmp.path / "zeros.f32");
  CHECK(back.width == 4);
  CHECK(back.height == 4);
  CHECK(back.values == r.values);
  CHECK_FALSE(back.has_nodata());

  Raster nd(3, 2);
  nd.values = {1, 2, 3, 4, 5, 6};
  nd.nodata = {0, 1, 0, 0, 0, 1};
  nd.nodata_value = -9999.0f;
  write_raster(nd, tmp.path / "nd.f32");
  Raster nb = load_raster(tmp.path / "nd.f32");
  CHECK(nb.nodata == nd.nodata);
  CHECK(nb.values[1] == -9999.0f);
  CHECK(nb.values[2] == 3.0f);
}

TEST_CASE("a truncated raster reports expected and actual byte counts") {
  TempDir tmp;
  write_raster(Raster(4, 4, 1.0f), tmp.path / "r.f32");
  fs::resize_file(tmp.path / "r.f32", 60);
  try {
    load_raster(tmp.path / "r.f32");
    FAIL("expected a FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("64") != std::string::npos);
    CHECK(msg.find("60") != std::string::npos);
  }
}

TEST_CASE("a full-scene header with the right byte count loads") {
  TempDir tmp;
  const fs::path p = tmp.path / "big.f32";
  {
    std::ofstream h(p.string() + ".json");
    h << R"({"width": 11112, "height": 6706, "dtype": "f32le"})";
  }
  { std::ofstream(p, std::ios::binary); }
  fs::resize_file(p, std::uintmax_t{11112} * 6706 * 4);  // sparse zeros
  Raster r = load_raster(p);
  CHECK(r.width == 11112);
  CHECK(r.height == 6706);
}

TEST_CASE("non-finite pixels outside nodata are a data error") {
  TempDir tmp;
  Raster r(2, 2, 0.0f);
  r.values[3] = std::numeric_limits<float>::infinity();
  write_raster(r, tmp.path / "inf.f32");
  CHECK_THROWS_AS(load_raster(tmp.path / "inf.f32"), DataError);
}

TEST_CASE("missing files are IO errors") {
  CHECK_THROWS_AS(load_raster("/nonexistent/scene.f32"), IoError);
  CHECK_THROWS_AS(load_mask("/nonexistent/mask.pgm"), IoError);
}

TEST_CASE("PGM masks round-trip and raster masks threshold at one half") {
  TempDir tmp;
  BinaryMask m(5, 3);
  for (std::size_t i = 0; i < 15; ++i) m.values[i] = i % 4 == 0;
  write_mask_pgm(m, tmp.path / "m.pgm");
  BinaryMask back = load_mask(tmp.path / "m.pgm");
  CHECK(back.width == 5);
  CHECK(back.values == m.values);
  CHECK(back.water_fraction() == doctest::Approx(4.0 / 15.0));

  Raster r(2, 1);
  r.values = {0.4f, 0.6f};
  write_raster(r, tmp.path / "m.f32");
  BinaryMask rm = load_mask(tmp.path / "m.f32");
  CHECK(rm.values == std::vector<std::uint8_t>{0, 1});

  std::ofstream(tmp.path / "bad.pgm") << "P2\n1 1\n255\n0\n";
  CHECK_THROWS_AS(load_mask(tmp.path / "bad.pgm"), FormatError);
}

TEST_CASE("tile counts follow the floor rule") {
  auto [r1, m1] = ramp(256, 256);
  auto t1 = tile(r1, m1, 256);
  REQUIRE(t1.size() == 1);
  CHECK(t1[0].zone == 4);  // the center pixel (128, 128) lies in the bottom-right quarter
  auto [r2, m2] = ramp(300, 300);
  CHECK(tile(r2, m2, 256).size() == 1);
  auto [r3, m3] = ramp(83, 50);
  CHECK(tile(r3, m3, 16).size() == (50 / 16) * (83 / 16));
}

TEST_CASE("tiles copy the right pixels and water fractions") {
  auto [r, m] = ramp(40, 24);
  auto tiles = tile(r, m, 8);
  REQUIRE(tiles.size() == 15);
  std::set<std::pair<std::size_t, std::size_t>> origins;
  for (const Tile& t : tiles) {
    origins.insert({t.row, t.col});
    CHECK(t.row % 8 == 0);
    CHECK(t.col % 8 == 0);
    std::size_t water = 0;
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) {
        const std::size_t src = (t.row + y) * 40 + t.col + x;
        CHECK(t.image[y * 8 + x] == r.values[src]);
        CHECK(t.mask[y * 8 + x] == m.values[src]);
        water += m.values[src];
      }
    CHECK(t.water_fraction == doctest::Approx(water / 64.0));
    CHECK(t.zone == zone_of(t.row + 4, t.col + 4, 24, 40));
  }
  CHECK(origins.size() == tiles.size());
}

TEST_CASE("tiles touching nodata are dropped") {
  auto [r, m] = ramp(32, 32);
  r.nodata.assign(32 * 32, 0);
  r.nodata[5 * 32 + 20] = 1;  // inside tile (0, 16)
  auto tiles = tile(r, m, 16);
  CHECK(tiles.size() == 3);
  for (const Tile& t : tiles) CHECK_FALSE((t.row == 0 && t.col == 16));
}

TEST_CASE("tiling rejects mismatched masks") {
  Raster r(16, 16);
  BinaryMask m(16, 8);
  CHECK_THROWS_AS(tile(r, m, 8), DimensionError);
}

TEST_CASE("zones are image quarters") {
  CHECK(zone_of(0, 0, 100, 200) == 1);
  CHECK(zone_of(0, 150, 100, 200) == 2);
  CHECK(zone_of(60, 10, 100, 200) == 3);
  CHECK(zone_of(99, 199, 100, 200) == 4);
  CHECK(zone_of(49, 99, 100, 200) == 1);
  CHECK(zone_of(50, 100, 100, 200) == 4);
}

TEST_CASE("standardization uses training tiles only") {
  auto tiles = tiles_with_fractions(std::vector<double>(12, 0.5));
  const std::vector<std::size_t> train{0, 1, 2, 3};
  auto [out, st] = standardize(tiles, train);
  double sum = 0, sq = 0, n = 0;
  for (std::size_t i : train)
    for (float v : out[i].image) sum += v, sq += double(v) * v, n += 1;
  CHECK(std::abs(sum / n) <= 1e-5);
  CHECK(sq / n - (sum / n) * (sum / n) == doctest::Approx(1.0).epsilon(1e-5));

  // population statistics of {0..3, 1..4, 2..5, 3..6}
  double mu = 0, var = 0;
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 4; ++k) mu += t + k;
  mu /= 16;
  for (int t = 0; t < 4; ++t)
    for (int k = 0; k < 4; ++k) var += (t + k - mu) * (t + k - mu);
  var /= 16;
  CHECK(st.mu == doctest::Approx(mu));
  CHECK(st.sigma == doctest::Approx(std::sqrt(var)));
  CHECK(compute_standardization(tiles, train) == st);
  CHECK(out[11].image[0] == doctest::Approx((11.0 - mu) / std::sqrt(var)));
  CHECK(apply_standardization(tiles, st)[7].image == out[7].image);
}

TEST_CASE("constant training pixels cannot be standardized") {
  auto tiles = tiles_with_fractions(std::vector<double>(3, 0.0));
  for (auto& t : tiles) t.image.assign(4, 2.0f);
  CHECK_THROWS_AS(standardize(tiles, {0, 1}), DataError);
  CHECK_THROWS_AS(standardize(tiles, {}), ContractError);
}

TEST_CASE("stratified split partitions, keeps proportions and is reproducible") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> fr(100);
  for (double& f : fr) f = u(rng) * u(rng);
  auto tiles = tiles_with_fractions(fr);
  SplitPlan a = stratified_split(tiles, {0.7, 0.1, 0.2}, 42);
  SplitPlan b = stratified_split(tiles, {0.7, 0.1, 0.2}, 42);
  SplitPlan c = stratified_split(tiles, {0.7, 0.1, 0.2}, 43);
  CHECK_NOTHROW(a.check_partition(100));
  CHECK(a.train == b.train);
  CHECK(a.val == b.val);
  CHECK(a.test == b.test);
  CHECK(a.train != c.train);
  CHECK(a.train.size() + a.val.size() + a.test.size() == 100);

  const auto& e = default_strata_edges();
  for (std::size_t s = 0; s + 1 < e.size(); ++s) {
    auto in = [&](std::size_t i) {
      return fr[i] >= e[s] && (s + 2 == e.size() || fr[i] < e[s + 1]);
    };
    double n = 0, tr = 0, va = 0, te = 0;
    for (std::size_t i = 0; i < 100; ++i) n += in(i);
    if (n < 3) continue;
    for (auto i : a.train) tr += in(i);
    for (auto i : a.val) va += in(i);
    for (auto i : a.test) te += in(i);
    CHECK(std::abs(tr - 0.7 * n) <= 1.0);
    CHECK(std::abs(va - 0.1 * n) <= 1.0);
    CHECK(std::abs(te - 0.2 * n) <= 1.0);
  }
}

TEST_CASE("identical water fractions fall back to a single random split") {
  auto tiles = tiles_with_fractions(std::vector<double>(50, 0.2));
  SplitPlan p = stratified_split(tiles, {0.7, 0.1, 0.2}, 3);
  CHECK(p.train.size() == 35);
  CHECK(p.val.size() == 5);
  CHECK(p.test.size() == 10);
}

TEST_CASE("split preconditions") {
  CHECK_THROWS_AS(stratified_split(tiles_with_fractions(std::vector<double>(9, 0.1))),
                  ContractError);
  CHECK_THROWS_AS(stratified_split(tiles_with_fractions(std::vector<double>(20, 0.1)),
                                   {0.5, 0.1, 0.1}),
                  ConfigError);
  SplitPlan bad;
  bad.train = {0, 1};
  bad.test = {1};
  CHECK_THROWS_AS(bad.check_partition(2), ContractError);
  bad.test = {};
  CHECK_THROWS_AS(bad.check_partition(3), ContractError);
}

TEST_CASE("zone folds test each zone once") {
  std::vector<Tile> tiles(5);
  const int zones[] = {1, 1, 2, 3, 4};
  for (int i = 0; i < 5; ++i) tiles[i].zone = zones[i];
  auto folds = zone_folds(tiles);
  REQUIRE(folds.size() == 4);
  CHECK(folds[0].test.size() == 2);
  std::vector<int> seen(5, 0);
  for (const auto& f : folds) {
    CHECK_NOTHROW(f.check_partition(5));
    for (auto i : f.test) {
      ++seen[i];
      CHECK(tiles[i].zone == f.test_zone);
    }
    for (auto i : f.train) CHECK(tiles[i].zone != f.test_zone);
  }
  for (int s : seen) CHECK(s == 1);
  tiles[3].zone = 2;
  CHECK_THROWS_AS(zone_folds(tiles), ConfigError);
}

TEST_CASE("split plans serialize") {
  auto tiles = tiles_with_fractions(std::vector<double>(10, 0.0));
  const std::string j = stratified_split(tiles, {0.7, 0.1, 0.2}, 9).to_json();
  CHECK(j.find("\"train\"") != std::string::npos);
  CHECK(j.find("\"seed\"") != std::string::npos);
}

TEST_CASE("synthetic scenes are reproducible and hit their coverage") {
  SynthConfig cfg;
  cfg.coverage = 0.4;
  auto [r1, m1] = synth_scene(512, 512, cfg, 7);
  auto [r2, m2] = synth_scene(512, 512, cfg, 7);
  auto [r3, m3] = synth_scene(512, 512, cfg, 8);
  CHECK(r1.values == r2.values);
  CHECK(m1.values == m2.values);
  CHECK(r1.values != r3.values);
  CHECK(std::abs(m1.water_fraction() - 0.4) <= 0.05);
  for (float v : r1.values) {
    CHECK(v >= cfg.min_db);
    CHECK(v <= cfg.max_db);
  }
}

TEST_CASE("water forms contiguous blobs") {
  SynthConfig cfg;
  auto [r, m] = synth_scene(256, 256, cfg, 3);
  // Fraction of horizontally adjacent pairs that disagree; independent
  // pixels at coverage 0.35 would disagree 2*0.35*0.65 = 45% of the time.
  std::size_t edges = 0, total = 0;
  for (std::size_t y = 0; y < 256; ++y)
    for (std::size_t x = 0; x + 1 < 256; ++x, ++total)
      edges += m.values[y * 256 + x] != m.values[y * 256 + x + 1];
  CHECK(static_cast<double>(edges) / total < 0.05);
}

TEST_CASE("synthetic pixels follow the two modes") {
  SynthConfig cfg;
  auto [r, m] = synth_scene(256, 256, cfg, 11);
  double sw = 0, nw = 0, sl = 0, nl = 0;
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    if (m.values[i]) sw += r.values[i], nw += 1;
    else sl += r.values[i], nl += 1;
  }
  CHECK(sw / nw == doctest::Approx(cfg.water_mean_db).epsilon(0.02));
  CHECK(sl / nl == doctest::Approx(cfg.land_mean_db).epsilon(0.03));
}

TEST_CASE("synthetic coverage extremes and validation") {
  SynthConfig cfg;
  cfg.coverage = 0.0;
  auto [r0, m0] = synth_scene(64, 64, cfg, 1);
  CHECK(m0.water_fraction() == 0.0);
  cfg.coverage = 1.0;
  auto [r1, m1] = synth_scene(64, 64, cfg, 1);
  CHECK(m1.water_fraction() == 1.0);
  cfg.coverage = 1.5;
  CHECK_THROWS_AS(synth_scene(64, 64, cfg, 1), ConfigError);
  cfg.coverage = -0.1;
  CHECK_THROWS_AS(synth_scene(64, 64, cfg, 1), ConfigError);
}

TEST_CASE("speckle stays inside the observed range") {
  SynthConfig cfg;
  cfg.speckle_looks = 4.0;
  auto [r, m] = synth_scene(128, 128, cfg, 5);
  for (float v : r.values) {
    CHECK(std::isfinite(v));
    CHECK(v >= cfg.min_db);
    CHECK(v <= cfg.max_db);
  }
}
