#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "blockprop/policy.hpp"
#include "blockprop/tasks.hpp"

namespace blockprop {

struct RunConfig {
  std::size_t width = 128;
  std::size_t height = 64;
  std::size_t frames = 20;  // clip length
  std::size_t block_size = 16;
  std::size_t halo = 1;
  TaskKind task = TaskKind::OracleDetector;
  std::uint64_t seed = 1;
  std::size_t warmup_clips = 40;
  std::size_t clips = 10;  // evaluation clips
  std::size_t objects = 3;
  // The optimizer's own default (1e-4) learns too slowly for a few hundred
  // desk-scale clips; pipeline runs start from 1e-3.
  PolicyConfig policy = [] {
    PolicyConfig p;
    p.optimizer.learning_rate = 1e-3f;
    return p;
  }();
  std::uint64_t detector_seed = 7;
  std::size_t detector_fit_epochs = 0;
  bool timing = false;  // wall-clock fields in reports (breaks byte-identical output)

  void validate() const;
};

// Keys accepted by set_config_value, in documentation order.
const std::vector<std::string>& config_keys();

void set_config_value(RunConfig& cfg, const std::string& key, const std::string& value);

// "key = value" lines; '#' starts a comment.
RunConfig parse_config(std::istream& is, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

inline constexpr const char* kEnvPrefix = "BLOCKPROP_";

// BLOCKPROP_<KEY> (key upper-cased) overrides each key when set.
void apply_env_overrides(RunConfig& cfg,
                         const std::function<const char*(const char*)>& lookup = nullptr);

std::string format_config(const RunConfig& cfg);

}  // namespace blockprop
