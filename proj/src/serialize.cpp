#include "blockprop/serialize.hpp"

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

namespace blockprop {

namespace {

constexpr std::array<char, 4> kMagic{'B', 'C', 'T', '1'};
constexpr std::uint32_t kMaxRank = 16;

void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw Error("bct1: truncated stream");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

bool valid_name(const std::string& name) {
  if (name.empty()) return false;
  for (char c : name) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
  }
  return true;
}

}  // namespace

void write_bct1(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), kMagic.size());
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
  for (float v : t.values()) put_u32(os, std::bit_cast<std::uint32_t>(v));
  if (!os) throw Error("bct1: write failed");
}

Tensor read_bct1(std::istream& is) {
  std::array<char, 4> magic{};
  if (!is.read(magic.data(), magic.size()) || magic != kMagic) throw Error("bct1: bad magic");
  const std::uint32_t rank = get_u32(is);
  if (rank > kMaxRank) throw Error("bct1: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& d : shape) d = get_u32(is);
  std::vector<float> data(shape_numel(shape));
  for (auto& v : data) v = std::bit_cast<float>(get_u32(is));
  return Tensor(std::move(shape), std::move(data));
}

void save_bct1(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("bct1: cannot open " + path.string() + " for writing");
  write_bct1(os, t);
}

Tensor load_bct1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("bct1: cannot open " + path.string());
  return read_bct1(is);
}

void save_tensor_set(const std::filesystem::path& dir, const NamedTensors& tensors) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("tensor set: cannot write manifest in " + dir.string());
  for (const auto& [name, t] : tensors) {
    if (!valid_name(name)) throw Error("tensor set: invalid tensor name '" + name + "'");
    manifest << name;
    for (auto d : t.shape()) manifest << ' ' << d;
    manifest << '\n';
    save_bct1(dir / (name + ".bct1"), t);
  }
}

NamedTensors load_tensor_set(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw Error("tensor set: missing manifest in " + dir.string());
  NamedTensors out;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string name;
    ls >> name;
    Shape shape;
    std::size_t d;
    while (ls >> d) shape.push_back(d);
    Tensor t = load_bct1(dir / (name + ".bct1"));
    if (t.shape() != shape) {
      throw Error("tensor set: manifest shape " + shape_str(shape) + " for '" + name + "' but file holds " +
                  shape_str(t.shape()));
    }
    out.emplace_back(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace blockprop
