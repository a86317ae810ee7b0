#include "blockprop/synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "blockprop/image_io.hpp"
#include "blockprop/rng.hpp"

namespace blockprop {

const std::array<ColorKey, kObjectClasses>& palette() {
  // Exact 8-bit levels so quantised frames still hit the keys.
  static const std::array<ColorKey, kObjectClasses> keys{{
      {230.0f / 255, 30.0f / 255, 30.0f / 255},
      {30.0f / 255, 200.0f / 255, 60.0f / 255},
      {40.0f / 255, 70.0f / 255, 230.0f / 255},
  }};
  return keys;
}

int match_color(float r, float g, float b, float tol) {
  const auto& keys = palette();
  for (int k = 0; k < kObjectClasses; ++k) {
    if (std::abs(r - keys[k].r) <= tol && std::abs(g - keys[k].g) <= tol && std::abs(b - keys[k].b) <= tol) {
      return k + 1;
    }
  }
  return 0;
}

void SyntheticClipSpec::validate(std::size_t block_size) const {
  if (width < 8 || height < 8) throw Error("clip spec: frame extents must be at least 8x8");
  if (frames == 0) throw Error("clip spec: frame count must be positive");
  if (block_size && (width % block_size || height % block_size)) {
    throw Error("clip spec: extents " + std::to_string(width) + "x" + std::to_string(height) +
                " not divisible by block size " + std::to_string(block_size));
  }
  if (noise_amplitude < 0.0f || noise_amplitude > 0.2f) throw Error("clip spec: noise amplitude must lie in [0, 0.2]");
  for (const auto& o : objects) {
    if (o.class_id < 1 || o.class_id > kObjectClasses) {
      throw Error("clip spec: object " + std::to_string(o.id) + " has class " + std::to_string(o.class_id));
    }
    if (o.w <= 0 || o.h <= 0) throw Error("clip spec: object " + std::to_string(o.id) + " has empty extents");
    if (o.spawn < 0 || (o.despawn >= 0 && o.despawn <= o.spawn)) {
      throw Error("clip spec: object " + std::to_string(o.id) + " has an empty lifetime");
    }
  }
}

SyntheticClipSpec random_clip_spec(std::uint64_t seed, std::size_t width, std::size_t height, std::size_t frames,
                                   std::size_t objects) {
  Rng rng(seed);
  SyntheticClipSpec s;
  s.width = width;
  s.height = height;
  s.frames = frames;
  s.background_seed = rng.next_u64();
  const long W = static_cast<long>(width), H = static_cast<long>(height);
  for (std::size_t i = 0; i < objects; ++i) {
    ObjectSpec o;
    o.id = static_cast<int>(i);
    o.class_id = static_cast<int>(rng.integer(1, kObjectClasses));
    o.w = static_cast<int>(rng.integer(8, std::min(20L, W / 3)));
    o.h = static_cast<int>(rng.integer(6, std::min(14L, H / 3)));
    o.x = static_cast<int>(rng.integer(1, W - o.w - 1));
    o.y = static_cast<int>(rng.integer(1, H - o.h - 1));
    if (rng.uniform() >= 0.25) {
      o.vx = static_cast<int>(rng.integer(-2, 2));
      o.vy = static_cast<int>(rng.integer(-1, 1));
    }
    s.objects.push_back(o);
  }
  const long half = static_cast<long>(frames) / 2;
  if (objects >= 2 && half >= 1 && rng.uniform() < 0.5) s.objects.back().spawn = rng.integer(1, half);
  if (objects >= 1 && half >= 1 && rng.uniform() < 0.5) {
    s.objects.front().despawn = rng.integer(std::max(half, s.objects.front().spawn + 1), static_cast<long>(frames));
  }
  return s;
}

Clip generate_clip(const SyntheticClipSpec& spec) {
  spec.validate();
  Clip clip;
  clip.spec = spec;
  const std::size_t W = spec.width, H = spec.height;

  Image8 background{W, H, 3, std::vector<std::uint8_t>(W * H * 3)};
  Rng rng(spec.background_seed);
  for (std::size_t i = 0; i < W * H; ++i) {
    const double v = 0.5 + spec.noise_amplitude * (2.0 * rng.uniform() - 1.0);
    const auto q = static_cast<std::uint8_t>(std::lround(v * 255.0));
    for (std::size_t c = 0; c < 3; ++c) background.pixels[i * 3 + c] = q;
  }

  std::vector<bool> gone(spec.objects.size(), false);
  clip.gt.resize(spec.frames);
  for (std::size_t t = 0; t < spec.frames; ++t) {
    Image8 img = background;
    for (std::size_t k = 0; k < spec.objects.size(); ++k) {
      const ObjectSpec& o = spec.objects[k];
      const long ft = static_cast<long>(t);
      if (gone[k] || ft < o.spawn) continue;
      if (o.despawn >= 0 && ft >= o.despawn) {
        gone[k] = true;
        continue;
      }
      const long dt = ft - o.spawn;
      const long x1 = o.x + o.vx * dt, y1 = o.y + o.vy * dt;
      const long x2 = x1 + o.w, y2 = y1 + o.h;
      if (x1 < 1 || y1 < 1 || x2 > static_cast<long>(W) - 1 || y2 > static_cast<long>(H) - 1) {
        gone[k] = true;
        continue;
      }
      const ColorKey& key = palette()[o.class_id - 1];
      const std::uint8_t rgb[3] = {static_cast<std::uint8_t>(std::lround(key.r * 255)),
                                   static_cast<std::uint8_t>(std::lround(key.g * 255)),
                                   static_cast<std::uint8_t>(std::lround(key.b * 255))};
      for (long y = y1; y < y2; ++y)
        for (long x = x1; x < x2; ++x)
          for (std::size_t c = 0; c < 3; ++c) img.pixels[(y * W + x) * 3 + c] = rgb[c];
      GtObject g;
      g.frame = ft;
      g.object_id = o.id;
      g.box = {static_cast<float>(x1), static_cast<float>(y1), static_cast<float>(x2), static_cast<float>(y2)};
      g.class_id = o.class_id;
      clip.gt[t].push_back(g);
    }
    clip.frames.push_back(from_image8(img));
  }
  return clip;
}

void write_ground_truth(std::ostream& os, const GroundTruth& gt) {
  for (const auto& frame : gt)
    for (const auto& g : frame) {
      os << g.frame << ' ' << g.object_id << ' ' << g.box.x1 << ' ' << g.box.y1 << ' ' << g.box.x2 << ' ' << g.box.y2
         << ' ' << g.class_id << '\n';
    }
}

GroundTruth read_ground_truth(std::istream& is, std::size_t frames) {
  GroundTruth gt(frames);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    GtObject g;
    if (!(ls >> g.frame >> g.object_id >> g.box.x1 >> g.box.y1 >> g.box.x2 >> g.box.y2 >> g.class_id)) {
      throw Error("ground truth: malformed line " + std::to_string(lineno) + ": '" + line + "'");
    }
    if (g.frame < 0 || static_cast<std::size_t>(g.frame) >= frames) {
      throw Error("ground truth: line " + std::to_string(lineno) + " refers to frame " + std::to_string(g.frame) +
                  " outside a clip of " + std::to_string(frames));
    }
    gt[g.frame].push_back(g);
  }
  return gt;
}

namespace {

std::string frame_name(std::size_t t) {
  std::ostringstream os;
  os << "frame_" << std::setw(4) << std::setfill('0') << t << ".ppm";
  return os.str();
}

}  // namespace

void save_clip(const std::filesystem::path& dir, const Clip& clip) {
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.txt");
  if (!index) throw Error("save_clip: cannot write " + (dir / "index.txt").string());
  index << clip.spec.width << ' ' << clip.spec.height << ' ' << clip.frames.size() << '\n';
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    write_pnm(dir / frame_name(t), to_image8(clip.frames[t]));
    index << frame_name(t) << '\n';
  }
  std::ofstream gt(dir / "gt.txt");
  if (!gt) throw Error("save_clip: cannot write " + (dir / "gt.txt").string());
  write_ground_truth(gt, clip.gt);
}

Clip load_clip(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw Error("load_clip: missing " + (dir / "index.txt").string());
  Clip clip;
  std::size_t frames = 0;
  if (!(index >> clip.spec.width >> clip.spec.height >> frames)) throw Error("load_clip: malformed index header");
  clip.spec.frames = frames;
  for (std::size_t t = 0; t < frames; ++t) {
    std::string name;
    if (!(index >> name)) throw Error("load_clip: index lists fewer than " + std::to_string(frames) + " frames");
    const Image8 img = read_pnm(dir / name);
    if (img.channels != 3 || img.width != clip.spec.width || img.height != clip.spec.height) {
      throw Error("load_clip: frame " + name + " does not match the index extents");
    }
    clip.frames.push_back(from_image8(img));
  }
  std::ifstream gt(dir / "gt.txt");
  clip.gt = gt ? read_ground_truth(gt, frames) : GroundTruth(frames);
  return clip;
}

Tensor label_map(const std::vector<GtObject>& objects, std::size_t height, std::size_t width) {
  Tensor m = Tensor::nchw(1, 1, height, width);
  std::vector<const GtObject*> order;
  for (const auto& o : objects) order.push_back(&o);
  std::stable_sort(order.begin(), order.end(),
                   [](const GtObject* a, const GtObject* b) { return a->object_id < b->object_id; });
  for (const GtObject* o : order) {
    const PixelRange r = box_pixels(o->box, height, width);
    for (std::size_t y = r.y0; y < r.y1; ++y)
      for (std::size_t x = r.x0; x < r.x1; ++x) m.at(0, 0, y, x) = static_cast<float>(o->class_id);
  }
  return m;
}

}  // namespace blockprop
