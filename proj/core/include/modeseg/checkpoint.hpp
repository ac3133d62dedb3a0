#pragma once

// Checkpoint = JSON manifest (spec, tensor table with byte offsets, layer
// flags) + one binary file of concatenated little-endian float32 buffers.
// `save_checkpoint(model, "run/checkpoint")` writes run/checkpoint.json and
// run/checkpoint.bin.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "modeseg/datapipe.hpp"
#include "modeseg/models.hpp"

namespace modeseg {

struct CheckpointMeta {
  std::optional<StandardizationStats> standardization;
  std::size_t tile_size = 0;
};

void save_checkpoint(Model<float>& model, const std::filesystem::path& prefix,
                     const CheckpointMeta& meta = {});

/// Rebuilds the model from the manifest's spec and loads every tensor.
Model<float> load_checkpoint(const std::filesystem::path& prefix, CheckpointMeta* meta = nullptr);

/// Manifest path for a prefix (accepts the prefix itself or `<prefix>.json`).
std::filesystem::path manifest_path(const std::filesystem::path& prefix);

/// FNV-1a over all parameter and buffer values in declaration order.
std::uint64_t weight_fingerprint(Model<float>& model);
std::string fingerprint_hex(std::uint64_t fp);

std::string model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const std::string& text);

}  // namespace modeseg
