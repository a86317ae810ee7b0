#include "blockprop/image_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>

namespace blockprop {

Image8 to_image8(const Tensor& t) {
  require_rank4(t, "to_image8");
  if (t.n() != 1 || (t.c() != 1 && t.c() != 3)) throw Error("to_image8: expected (1,1|3,H,W), got " + shape_str(t.shape()));
  Image8 img{t.w(), t.h(), t.c(), std::vector<std::uint8_t>(t.numel())};
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c) {
        const float v = std::clamp(t.at(0, c, y, x), 0.0f, 1.0f);
        img.pixels[(y * img.width + x) * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

Tensor from_image8(const Image8& img) {
  if (img.pixels.size() != img.width * img.height * img.channels) throw Error("from_image8: pixel count mismatch");
  Tensor t = Tensor::nchw(1, img.channels, img.height, img.width);
  for (std::size_t y = 0; y < img.height; ++y)
    for (std::size_t x = 0; x < img.width; ++x)
      for (std::size_t c = 0; c < img.channels; ++c)
        t.at(0, c, y, x) = static_cast<float>(img.pixels[(y * img.width + x) * img.channels + c]) / 255.0f;
  return t;
}

void write_pnm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw Error("write_pnm: channels must be 1 or 3");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("write_pnm: cannot open " + path.string());
  os << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
  os.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!os) throw Error("write_pnm: write failed for " + path.string());
}

namespace {

// Next header token, skipping whitespace and '#' comments.
std::string token(std::istream& is) {
  std::string tok;
  char ch;
  while (is.get(ch)) {
    if (ch == '#') {
      std::string skip;
      std::getline(is, skip);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok += ch;
  }
  return tok;
}

}  // namespace

Image8 read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("read_pnm: cannot open " + path.string());
  const std::string magic = token(is);
  if (magic != "P5" && magic != "P6") throw Error("read_pnm: " + path.string() + " is not a binary PGM/PPM");
  Image8 img;
  try {
    img.width = std::stoul(token(is));
    img.height = std::stoul(token(is));
    if (std::stoul(token(is)) != 255) throw Error("read_pnm: only maxval 255 is supported");
  } catch (const std::logic_error&) {
    throw Error("read_pnm: malformed header in " + path.string());
  }
  img.channels = magic == "P6" ? 3 : 1;
  img.pixels.resize(img.width * img.height * img.channels);
  is.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(is.gcount()) != img.pixels.size()) throw Error("read_pnm: truncated " + path.string());
  return img;
}

}  // namespace blockprop
