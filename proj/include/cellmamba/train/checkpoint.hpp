#pragma once

#include <string>

#include "cellmamba/model/detector.hpp"

namespace cm {

// Checkpoint file layout (little-endian host required):
//   bytes 0-7    magic "CMCKPT01"
//   bytes 8-15   u64: manifest length in bytes
//   manifest     JSON: model config, epoch, coupling state, RNG state, and a
//                tensor index of {name, shape, byte offset into the blob}
//   blob         all parameters as raw 32-bit floats, in index order
// The tensor offsets partition the blob exactly; save -> load -> save
// reproduces the file byte for byte.

struct CheckpointMeta {
  int epoch = 0;  // completed epochs
  CouplingState coupling;
  std::string rng_state;  // serialized data-order stream, may be empty
};

void save_checkpoint(const std::string& path, Detector<float>& model,
                     const CheckpointMeta& meta);

// Rebuilds `model` from the stored config and fills every tensor bitwise.
CheckpointMeta load_checkpoint(const std::string& path, Detector<float>& model);

}  // namespace cm
