#pragma once

#include <filesystem>
#include <iosfwd>

#include "aquafuse/tensor.hpp"

namespace aquafuse {

// Tensor dump layout:
//   ASCII header line "TNS <rank> <e0> ... <e{rank-1}>\n"
//   followed by prod(extents) IEEE-754 doubles, little-endian, row-major.

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const Tensor& t, const std::filesystem::path& path);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace aquafuse
