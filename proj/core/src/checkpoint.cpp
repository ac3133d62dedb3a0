#include "modeseg/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <map>

#include "modeseg/binary_io.hpp"

namespace modeseg {

using nlohmann::json;

namespace {

json spec_json(const ModelSpec& s) {
  return json{{"arch", to_string(s.arch)},
              {"depth", s.depth},
              {"base_channels", s.base_channels},
              {"dropout", s.dropout_rate},
              {"in_channels", s.in_channels},
              {"out_channels", s.out_channels},
              {"norm",
               {{"kind", to_string(s.norm.kind)},
                {"modes", s.norm.modes},
                {"epsilon", s.norm.epsilon},
                {"momentum", s.norm.momentum},
                {"em_iters", s.norm.em_iters},
                {"min_mode_weight", s.norm.min_mode_weight}}}};
}

ModelSpec spec_from(const json& j) {
  ModelSpec s;
  s.arch = parse_arch(j.at("arch").get<std::string>());
  s.depth = j.at("depth").get<int>();
  s.base_channels = j.at("base_channels").get<int>();
  s.dropout_rate = j.at("dropout").get<double>();
  s.in_channels = j.value("in_channels", 1);
  s.out_channels = j.value("out_channels", 1);
  const json& n = j.at("norm");
  s.norm.kind = parse_norm_kind(n.at("kind").get<std::string>());
  s.norm.modes = n.at("modes").get<int>();
  s.norm.epsilon = n.at("epsilon").get<double>();
  s.norm.momentum = n.at("momentum").get<double>();
  s.norm.em_iters = n.at("em_iters").get<int>();
  s.norm.min_mode_weight = n.at("min_mode_weight").get<double>();
  s.validate();
  return s;
}

std::filesystem::path with_suffix(const std::filesystem::path& prefix, const char* suffix) {
  std::string p = prefix.string();
  if (p.size() > 5 && p.ends_with(".json")) p.resize(p.size() - 5);
  return std::filesystem::path(p + suffix);
}

}  // namespace

std::string model_spec_to_json(const ModelSpec& spec) { return spec_json(spec).dump(); }

ModelSpec model_spec_from_json(const std::string& text) {
  try {
    return spec_from(json::parse(text));
  } catch (const json::exception& e) {
    throw FormatError(std::string("model spec: ") + e.what());
  }
}

std::filesystem::path manifest_path(const std::filesystem::path& prefix) {
  return with_suffix(prefix, ".json");
}

std::uint64_t weight_fingerprint(Model<float>& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : model.parameters()) {
    h = fnv1a(p.var.value().ptr(), p.var.numel() * sizeof(float), h);
  }
  for (const auto& b : model.buffers()) {
    h = fnv1a(b.values->data(), b.values->size() * sizeof(float), h);
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

void save_checkpoint(Model<float>& model, const std::filesystem::path& prefix,
                     const CheckpointMeta& meta) {
  const auto json_path = with_suffix(prefix, ".json");
  const auto bin_path = with_suffix(prefix, ".bin");
  if (json_path.has_parent_path()) std::filesystem::create_directories(json_path.parent_path());

  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("cannot write " + bin_path.string());
  json tensors = json::array();
  std::size_t offset = 0;
  auto emit = [&](const std::string& name, const char* kind, const Shape& shape,
                  std::span<const float> values) {
    write_f32le(bin, values);
    tensors.push_back({{"name", name},
                       {"kind", kind},
                       {"shape", shape},
                       {"offset", offset},
                       {"count", values.size()}});
    offset += values.size() * sizeof(float);
  };
  for (const auto& p : model.parameters()) emit(p.name, "param", p.var.shape(), p.var.value().data());
  for (const auto& b : model.buffers()) {
    emit(b.name, "buffer", Shape{b.values->size()}, *b.values);
  }
  if (!bin) throw IoError("failed writing " + bin_path.string());

  json layers = json::array();
  auto norms = model.norm_layers();
  for (std::size_t i = 0; i < norms.size(); ++i) {
    layers.push_back({{"index", i},
                      {"kind", to_string(norms[i]->kind())},
                      {"mixture_initialized", norms[i]->mixture().initialized},
                      {"batch_count", norms[i]->batch_stats().count}});
  }
  json manifest{{"format", "modeseg-checkpoint"},
                {"version", 1},
                {"dtype", "f32le"},
                {"binary", bin_path.filename().string()},
                {"bytes", offset},
                {"spec", spec_json(model.spec())},
                {"tensors", tensors},
                {"norm_layers", layers},
                {"fingerprint", fingerprint_hex(weight_fingerprint(model))}};
  if (meta.standardization) {
    manifest["standardization"] = {{"mu", meta.standardization->mu},
                                   {"sigma", meta.standardization->sigma}};
  }
  if (meta.tile_size) manifest["tile_size"] = meta.tile_size;
  std::ofstream out(json_path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + json_path.string());
  out << manifest.dump(2) << '\n';
}

Model<float> load_checkpoint(const std::filesystem::path& prefix, CheckpointMeta* meta) {
  const auto json_path = with_suffix(prefix, ".json");
  std::ifstream in(json_path);
  if (!in) throw IoError("cannot open checkpoint manifest " + json_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
  try {
    if (manifest.at("format") != "modeseg-checkpoint") {
      throw FormatError(json_path.string() + ": not a modeseg checkpoint");
    }
    Model<float> model(spec_from(manifest.at("spec")), 0);
    const auto bin_path = json_path.parent_path() / manifest.at("binary").get<std::string>();
    const auto bytes = manifest.at("bytes").get<std::size_t>();
    if (!std::filesystem::exists(bin_path) || std::filesystem::file_size(bin_path) != bytes) {
      throw FormatError(bin_path.string() + ": expected " + std::to_string(bytes) + " bytes");
    }
    std::ifstream bin(bin_path, std::ios::binary);
    const std::vector<float> blob = read_f32le(bin, bytes / sizeof(float));

    std::map<std::string, const json*> table;
    for (const auto& t : manifest.at("tensors")) table[t.at("name").get<std::string>()] = &t;
    auto fetch = [&](const std::string& name, std::size_t count) {
      auto it = table.find(name);
      if (it == table.end()) throw FormatError("checkpoint is missing tensor " + name);
      const json& t = *it->second;
      if (t.at("count").get<std::size_t>() != count) {
        throw FormatError("checkpoint tensor " + name + " has " +
                          std::to_string(t.at("count").get<std::size_t>()) +
                          " values, model expects " + std::to_string(count));
      }
      const std::size_t first = t.at("offset").get<std::size_t>() / sizeof(float);
      return std::span<const float>(blob).subspan(first, count);
    };
    for (const auto& p : model.parameters()) {
      auto src = fetch(p.name, p.var.numel());
      Var<float> v = p.var;
      std::copy(src.begin(), src.end(), v.mutable_value().ptr());
    }
    for (const auto& b : model.buffers()) {
      auto src = fetch(b.name, b.values->size());
      std::copy(src.begin(), src.end(), b.values->begin());
    }
    auto norms = model.norm_layers();
    const json& layers = manifest.at("norm_layers");
    if (layers.size() != norms.size()) throw FormatError("checkpoint norm layer count mismatch");
    for (std::size_t i = 0; i < norms.size(); ++i) {
      norms[i]->mixture().initialized = layers[i].at("mixture_initialized").get<bool>();
      norms[i]->batch_stats().count = layers[i].at("batch_count").get<std::size_t>();
    }
    if (meta) {
      *meta = CheckpointMeta{};
      if (manifest.contains("standardization")) {
        meta->standardization = StandardizationStats{manifest["standardization"].at("mu"),
                                                     manifest["standardization"].at("sigma")};
      }
      meta->tile_size = manifest.value("tile_size", std::size_t{0});
    }
    return model;
  } catch (const json::exception& e) {
    throw FormatError(json_path.string() + ": " + e.what());
  }
}

}  // namespace modeseg
