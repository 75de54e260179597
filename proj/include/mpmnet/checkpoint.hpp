#pragma once

#include <string>

#include "mpmnet/model.hpp"

namespace mpmnet::ckpt {

// Directory layout: manifest.txt (one "name f64 dims..." line per tensor),
// head.txt (scalar head state), and one raw little-endian f64 .bin per tensor.
void save(const BinaryModel& m, const std::string& dir);
// Bit-exact inverse of save(); FormatError on missing/truncated/edited files.
BinaryModel load(const std::string& dir);

}  // namespace mpmnet::ckpt
