#pragma once

#include <string>

#include "aligndet/tensor.hpp"

namespace aligndet {

// "RTEN" container: magic, version=1, dtype (1=f32, 2=f64), rank,
// rank x u32 little-endian dims, row-major little-endian payload.
void save_rten(const std::string& path, const Tensor& t);
void save_rten(const std::string& path, const TensorF& t);

// Loads either dtype; f32 payloads are widened to double.
Tensor load_rten(const std::string& path);

}  // namespace aligndet
