#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "modeseg/binary_io.hpp"
#include "modeseg/datapipe.hpp"

namespace modeseg {

using nlohmann::json;

double BinaryMask::water_fraction() const {
  if (values.empty()) return 0.0;
  std::size_t n = 0;
  for (auto v : values) n += v != 0;
  return static_cast<double>(n) / static_cast<double>(values.size());
}

namespace {

std::filesystem::path sidecar_of(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": invalid JSON header: " + e.what());
  }
}

}  // namespace

Raster load_raster(const std::filesystem::path& path) {
  const auto header_path = sidecar_of(path);
  if (!std::filesystem::exists(header_path)) {
    throw IoError("raster header not found: " + header_path.string());
  }
  const json header = read_json_file(header_path);
  Raster r;
  try {
    r.width = header.at("width").get<std::size_t>();
    r.height = header.at("height").get<std::size_t>();
    const auto dtype = header.value("dtype", std::string("f32le"));
    if (dtype != "f32le") throw FormatError(header_path.string() + ": unsupported dtype " + dtype);
    if (header.contains("nodata") && !header.at("nodata").is_null()) {
      r.nodata_value = header.at("nodata").get<float>();
    }
  } catch (const json::exception& e) {
    throw FormatError(header_path.string() + ": " + e.what());
  }
  const std::size_t count = r.width * r.height;
  const std::uintmax_t expected = count * sizeof(float);
  if (!std::filesystem::exists(path)) throw IoError("raster data not found: " + path.string());
  const std::uintmax_t actual = std::filesystem::file_size(path);
  if (actual != expected) {
    throw FormatError(path.string() + ": expected " + std::to_string(expected) + " bytes for " +
                      std::to_string(r.width) + "x" + std::to_string(r.height) +
                      " float32 raster, found " + std::to_string(actual));
  }
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  r.values = read_f32le(in, count);
  if (!in) throw FormatError(path.string() + ": short read");

  if (r.nodata_value) {
    r.nodata.assign(count, 0);
    const float s = *r.nodata_value;
    for (std::size_t i = 0; i < count; ++i) {
      r.nodata[i] = std::isnan(s) ? std::isnan(r.values[i]) : r.values[i] == s;
    }
  }
  for (std::size_t i = 0; i < count; ++i) {
    if (!r.is_nodata(i) && !std::isfinite(r.values[i])) {
      throw DataError(path.string() + ": non-finite value at pixel " + std::to_string(i));
    }
  }
  return r;
}

void write_raster(const Raster& raster, const std::filesystem::path& path) {
  if (raster.values.size() != raster.width * raster.height) {
    throw ContractError("write_raster: buffer length does not match width*height");
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  if (raster.has_nodata() && raster.nodata_value) {
    std::vector<float> copy = raster.values;
    for (std::size_t i = 0; i < copy.size(); ++i) {
      if (raster.nodata[i]) copy[i] = *raster.nodata_value;
    }
    write_f32le(out, copy);
  } else {
    write_f32le(out, raster.values);
  }
  if (!out) throw IoError("failed writing " + path.string());

  json header{{"width", raster.width}, {"height", raster.height}, {"dtype", "f32le"}};
  if (raster.nodata_value) header["nodata"] = *raster.nodata_value;
  std::ofstream h(sidecar_of(path), std::ios::trunc);
  if (!h) throw IoError("cannot write " + sidecar_of(path).string());
  h << header.dump(2) << '\n';
}

namespace {

std::string next_pgm_token(std::istream& in) {
  std::string tok;
  while (in) {
    int ch = in.peek();
    if (ch == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(ch)) {
      in.get();
    } else {
      break;
    }
  }
  in >> tok;
  return tok;
}

BinaryMask load_mask_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  if (next_pgm_token(in) != "P5") throw FormatError(path.string() + ": not a binary PGM (P5)");
  BinaryMask m;
  try {
    m.width = std::stoul(next_pgm_token(in));
    m.height = std::stoul(next_pgm_token(in));
    const auto maxval = std::stoul(next_pgm_token(in));
    if (maxval != 255) throw FormatError(path.string() + ": PGM maxval must be 255");
  } catch (const std::logic_error&) {
    throw FormatError(path.string() + ": malformed PGM header");
  }
  in.get();  // single whitespace before the raster
  std::vector<char> bytes(m.width * m.height);
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) {
    throw FormatError(path.string() + ": expected " + std::to_string(bytes.size()) +
                      " mask bytes, found " + std::to_string(in.gcount()));
  }
  m.values.resize(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    m.values[i] = static_cast<unsigned char>(bytes[i]) >= 128 ? 1 : 0;
  }
  return m;
}

}  // namespace

BinaryMask load_mask(const std::filesystem::path& path) {
  if (path.extension() == ".pgm") return load_mask_pgm(path);
  const Raster r = load_raster(path);
  BinaryMask m(r.width, r.height);
  for (std::size_t i = 0; i < r.values.size(); ++i) {
    m.values[i] = !r.is_nodata(i) && r.values[i] > 0.5f ? 1 : 0;
  }
  return m;
}

void write_mask_pgm(const BinaryMask& mask, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  std::vector<char> bytes(mask.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    bytes[i] = static_cast<char>(mask.values[i] ? 255 : 0);
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace modeseg
