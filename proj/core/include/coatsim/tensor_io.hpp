#pragma once

#include <iosfwd>
#include <string>

#include "coatsim/expand.hpp"
#include "coatsim/quantize.hpp"
#include "coatsim/tensor.hpp"

namespace coatsim {

// Binary formats (little-endian throughout):
//   CTEN: "CTEN" | version u16 | rank u16 | dims u64[rank] | payload f32[n]
//   CQT8: "CQT8" | version u16 | format tag u8 | geometry (axis u8, size u32)
//         | rank u16 | dims u64[rank] | scales f32[groups] | codes u8[n]
//   EXPK: "EXPK" | per group (k f32, c f32), appended after a CQT8 record
// Geometry axis byte: 0xFF per-tensor, 0xFE per-block (size = B), otherwise
// the axis index that the 1xG runs lie along (size = G).

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

void write_quantized(std::ostream& os, const QuantizedTensor& q);
QuantizedTensor read_quantized(std::istream& is);

void write_expanded(std::ostream& os, const ExpandedQuantState& state);
ExpandedQuantState read_expanded(std::istream& is);

}  // namespace coatsim
