#pragma once

#include <string>

#include "dsmoe/model.hpp"

namespace dsmoe {

inline constexpr int kCheckpointFormatVersion = 1;

// Directory layout: manifest.json (config, mode, tensor table, blob checksum)
// + weights.bin (tensors as little-endian 64-bit floats, concatenated in
// manifest order). Save -> load -> save is byte-identical.
void save_checkpoint(const Model& model, const std::string& dir);
Model load_checkpoint(const std::string& dir);

}  // namespace dsmoe
