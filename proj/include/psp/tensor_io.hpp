#pragma once

#include <iosfwd>
#include <string>

#include "psp/tensor.hpp"

namespace psp {

// Flat binary tensor container: 8-byte magic "PSPTENS1", u32 rank, rank x u64
// dims, then the row-major f64 payload, all little-endian. Used by checkpoints
// and dump files.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

void save_tensor_file(const Tensor& t, const std::string& path);
Tensor load_tensor_file(const std::string& path);

}  // namespace psp
