#include "blockprop/config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace blockprop {

void RunConfig::validate() const {
  if (block_size == 0) throw Error("config: block_size must be positive");
  if (width % block_size || height % block_size) {
    throw Error("config: frame extents " + std::to_string(width) + "x" + std::to_string(height) +
                " must be divisible by block_size " + std::to_string(block_size));
  }
  if (block_size < 16) throw Error("config: block_size must be at least 16 (policy resolution)");
  if (width % 16 || height % 16) throw Error("config: frame extents must be divisible by 16");
  // Halos are derived from the kernels; all task convs are 3x3 same-padded.
  if (halo != 1) throw Error("config: halo must be 1 for the 3x3 task network");
  if (frames < 2) throw Error("config: clips need at least 2 frames");
  if (objects > 16) throw Error("config: at most 16 objects per clip");
  policy.validate();
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw Error("config: '" + key + "' expects a non-negative integer, got '" + v + "'");
  }
  try {
    return std::stoull(v);
  } catch (const std::out_of_range&) {
    throw Error("config: '" + key + "' value out of range: '" + v + "'");
  }
}

double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double d = 0.0;
  try {
    d = std::stod(v, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw Error("config: '" + key + "' expects a number, got '" + v + "'");
  return d;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw Error("config: '" + key + "' expects a boolean, got '" + v + "'");
}

}  // namespace

const std::vector<std::string>& config_keys() {
  static const std::vector<std::string> keys{
      "width",        "height",        "frames",         "block_size",   "halo",          "task",
      "seed",         "warmup_clips",  "clips",          "objects",      "tau",           "gamma",
      "mu",           "update_period", "online",         "average_mode", "policy_width",  "learning_rate",
      "weight_decay", "detector_seed", "detector_fit_epochs", "timing"};
  return keys;
}

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (key == "width") cfg.width = parse_uint(key, v);
  else if (key == "height") cfg.height = parse_uint(key, v);
  else if (key == "frames") cfg.frames = parse_uint(key, v);
  else if (key == "block_size") cfg.block_size = parse_uint(key, v);
  else if (key == "halo") cfg.halo = parse_uint(key, v);
  else if (key == "task") cfg.task = task_from_name(v);
  else if (key == "seed") cfg.seed = parse_uint(key, v);
  else if (key == "warmup_clips") cfg.warmup_clips = parse_uint(key, v);
  else if (key == "clips") cfg.clips = parse_uint(key, v);
  else if (key == "objects") cfg.objects = parse_uint(key, v);
  else if (key == "tau") cfg.policy.target = parse_real(key, v);
  else if (key == "gamma") cfg.policy.gamma = parse_real(key, v);
  else if (key == "mu") cfg.policy.momentum = parse_real(key, v);
  else if (key == "update_period") cfg.policy.update_period = parse_uint(key, v);
  else if (key == "online") cfg.policy.online = parse_bool(key, v);
  else if (key == "average_mode") {
    if (v == "recursive") cfg.policy.average_mode = MovingAverageMode::Recursive;
    else if (v == "two-term") cfg.policy.average_mode = MovingAverageMode::TwoTerm;
    else throw Error("config: 'average_mode' expects recursive or two-term, got '" + v + "'");
  } else if (key == "policy_width") cfg.policy.width = parse_uint(key, v);
  else if (key == "learning_rate") cfg.policy.optimizer.learning_rate = static_cast<float>(parse_real(key, v));
  else if (key == "weight_decay") cfg.policy.optimizer.weight_decay = static_cast<float>(parse_real(key, v));
  else if (key == "detector_seed") cfg.detector_seed = parse_uint(key, v);
  else if (key == "detector_fit_epochs") cfg.detector_fit_epochs = parse_uint(key, v);
  else if (key == "timing") cfg.timing = parse_bool(key, v);
  else throw Error("config: unknown key '" + key + "'");
}

RunConfig parse_config(std::istream& is, RunConfig cfg) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw Error("config line " + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error("config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream is(path);
  if (!is) throw Error("config: cannot open " + path.string());
  return parse_config(is, std::move(base));
}

void apply_env_overrides(RunConfig& cfg, const std::function<const char*(const char*)>& lookup) {
  for (const auto& key : config_keys()) {
    std::string name = kEnvPrefix;
    for (char c : key) name += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    const char* v = lookup ? lookup(name.c_str()) : std::getenv(name.c_str());
    if (!v) continue;
    try {
      set_config_value(cfg, key, v);
    } catch (const Error& e) {
      throw Error(name + ": " + e.what());
    }
  }
}

std::string format_config(const RunConfig& c) {
  std::ostringstream os;
  os << "width = " << c.width << '\n'
     << "height = " << c.height << '\n'
     << "frames = " << c.frames << '\n'
     << "block_size = " << c.block_size << '\n'
     << "halo = " << c.halo << '\n'
     << "task = " << task_name(c.task) << '\n'
     << "seed = " << c.seed << '\n'
     << "warmup_clips = " << c.warmup_clips << '\n'
     << "clips = " << c.clips << '\n'
     << "objects = " << c.objects << '\n'
     << "tau = " << c.policy.target << '\n'
     << "gamma = " << c.policy.gamma << '\n'
     << "mu = " << c.policy.momentum << '\n'
     << "update_period = " << c.policy.update_period << '\n'
     << "online = " << (c.policy.online ? "true" : "false") << '\n'
     << "average_mode = " << (c.policy.average_mode == MovingAverageMode::Recursive ? "recursive" : "two-term")
     << '\n'
     << "policy_width = " << c.policy.width << '\n'
     << "learning_rate = " << c.policy.optimizer.learning_rate << '\n'
     << "weight_decay = " << c.policy.optimizer.weight_decay << '\n'
     << "detector_seed = " << c.detector_seed << '\n'
     << "detector_fit_epochs = " << c.detector_fit_epochs << '\n'
     << "timing = " << (c.timing ? "true" : "false") << '\n';
  return os.str();
}

}  // namespace blockprop
