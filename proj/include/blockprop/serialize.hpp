#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "blockprop/tensor.hpp"

namespace blockprop {

// BCT1 layout: "BCT1", u32 rank, rank x u32 extents, float32 data; all little-endian.
void write_bct1(std::ostream& os, const Tensor& t);
Tensor read_bct1(std::istream& is);
void save_bct1(const std::filesystem::path& path, const Tensor& t);
Tensor load_bct1(const std::filesystem::path& path);

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

// Directory container: manifest.txt with one "name d0 d1 ..." line per tensor,
// and one <name>.bct1 file per entry.
void save_tensor_set(const std::filesystem::path& dir, const NamedTensors& tensors);
NamedTensors load_tensor_set(const std::filesystem::path& dir);

}  // namespace blockprop
