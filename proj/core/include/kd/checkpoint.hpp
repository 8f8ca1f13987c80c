#pragma once

#include <map>
#include <string>

#include "kd/tensor.hpp"

namespace kd {

/// KDCKPT01 checkpoint: little-endian binary, magic "KDCKPT01",
/// u32 entry count, then per entry u16 name length, UTF-8 name,
/// u8 dtype (0=f32, 1=f64), u8 rank, u32 extents[rank], raw row-major values.
void save_checkpoint(const std::string& path,
                     const std::map<std::string, Tensor>& params);

/// Loads every entry as f64 tensors (f32 entries are widened).
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

/// Loads a checkpoint into an existing parameter map; names and shapes
/// must match exactly.
void load_checkpoint_into(const std::string& path,
                          std::map<std::string, Tensor>& params);

}  // namespace kd
