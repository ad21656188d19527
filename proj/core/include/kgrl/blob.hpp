#pragma once

#include <map>
#include <string>

#include "kgrl/tensor.hpp"

namespace kgrl {

// Parameter blob layout (single file, magic "KGRLPB1"):
//   bytes 0..6   magic
//   bytes 7..10  uint32 little-endian index length L
//   bytes 11..   L bytes of JSON index {name: {"offset": o, "shape": [...]}}
//   rest         little-endian 32-bit-real data; each offset is relative to
//                the start of the data section, in bytes
// Training tensors are 64-bit; writing narrows, reading widens.
void write_param_blob(const std::string& path,
                      const std::map<std::string, TensorBuf>& tensors);

std::map<std::string, TensorBuf> read_param_blob(const std::string& path);

}  // namespace kgrl
