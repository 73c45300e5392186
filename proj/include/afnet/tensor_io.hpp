#pragma once

#include <string>

#include "afnet/tensor.hpp"

namespace afnet {

// Binary tensor file, used for checkpoints and golden fixtures.
//
//   bytes 0..3   magic "AFTN"
//   byte  4      format version (currently 1)
//   8 bytes      rank, unsigned little-endian
//   8*rank bytes dims, unsigned little-endian
//   8*numel      IEEE-754 doubles, little-endian, row-major
void write_tensor(const std::string& path, const Tensor& t);
Tensor read_tensor(const std::string& path);

// Plane(s) to a binary PPM (P6) for eyeballing. Accepts [3,H,W] in [0,1]
// or [1,H,W]/[H,W] rendered as grayscale.
void write_ppm(const std::string& path, const Tensor& image);

}  // namespace afnet
