#include "blockprop/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>

#include "blockprop/rng.hpp"
#include "json.hpp"

namespace blockprop {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

// Runs fn, prefixing any library error with the stage name.
template <typename F>
auto stage(const char* name, F&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    throw Error(std::string("stage ") + name + ": " + e.what());
  }
}

std::uint64_t clip_seed(std::uint64_t seed, long clip) {
  return mix64(seed ^ mix64(static_cast<std::uint64_t>(clip) + 0x51ed270bULL));
}

}  // namespace

ActionGrid random_subset(const BlockGrid& grid, std::size_t n, std::uint64_t seed, long clip, long frame) {
  if (n > grid.count()) throw Error("random_subset: " + std::to_string(n) + " blocks requested from a grid of " +
                                    std::to_string(grid.count()));
  std::vector<std::size_t> idx(grid.count());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(clip_seed(seed, clip) ^ mix64(static_cast<std::uint64_t>(frame)));
  for (std::size_t i = 0; i < n; ++i) {
    const auto j = static_cast<std::size_t>(rng.integer(static_cast<long>(i), static_cast<long>(idx.size()) - 1));
    std::swap(idx[i], idx[j]);
  }
  ActionGrid a = ActionGrid::filled(grid, 0, frame);
  for (std::size_t i = 0; i < n; ++i) a.values[idx[i]] = 1;
  return a;
}

std::vector<std::uint8_t> moving_object_blocks(const GroundTruth& gt, long frame, const BlockGrid& grid) {
  std::vector<std::uint8_t> mask(grid.count(), 0);
  if (frame <= 0 || static_cast<std::size_t>(frame) >= gt.size()) return mask;
  for (const auto& g : gt[frame]) {
    bool moved = true;
    for (const auto& p : gt[frame - 1]) {
      if (p.object_id == g.object_id) moved = !(p.box == g.box);
    }
    if (!moved) continue;
    const PixelRange r = box_pixels(g.box, grid.height, grid.width);
    if (r.y0 >= r.y1 || r.x0 >= r.x1) continue;
    for (std::size_t by = r.y0 / grid.block_size; by <= (r.y1 - 1) / grid.block_size; ++by)
      for (std::size_t bx = r.x0 / grid.block_size; bx <= (r.x1 - 1) / grid.block_size; ++bx) {
        mask[by * grid.cols + bx] = 1;
      }
  }
  return mask;
}

// ---------------------------------------------------------------------------

ClipRun::ClipRun(Pipeline& pipeline, long clip_index)
    : pipe_(pipeline), clip_(clip_index), task_(pipeline.cfg_.task, pipeline.grid_, pipeline.detector_) {}

ActionGrid ClipRun::override_actions(const ActionOverride& ov, long t) const {
  const BlockGrid& g = pipe_.grid_;
  std::size_t n = 0;
  if (ov.kind == ActionOverride::Kind::Fraction) {
    if (ov.fraction < 0.0 || ov.fraction > 1.0) throw Error("forced fraction must lie in [0,1]");
    n = static_cast<std::size_t>(std::lround(ov.fraction * static_cast<double>(g.count())));
  } else {
    if (static_cast<std::size_t>(t) >= ov.counts.size()) {
      throw Error("forced counts cover " + std::to_string(ov.counts.size()) + " frames, frame " +
                  std::to_string(t) + " requested");
    }
    n = ov.counts[t];
  }
  return random_subset(g, n, ov.seed, clip_, t);
}

FrameRecord ClipRun::process_frame(long t, const Tensor& frame, const std::vector<GtObject>& gt,
                                   const GroundTruth* full_gt, const ActionOverride* ov) {
  if (t != next_frame_) {
    throw Error("pipeline: frame " + std::to_string(t) + " out of order, expected " + std::to_string(next_frame_));
  }
  if (ov && ov->kind == ActionOverride::Kind::None) ov = nullptr;
  const RunConfig& cfg = pipe_.cfg_;
  const BlockGrid& grid = pipe_.grid_;
  OnlinePolicy& policy = *pipe_.policy_;
  FrameRecord r;
  r.clip = clip_;
  r.frame = t;
  TaskOutput out;
  ActionGrid actions;

  if (t == 0) {
    policy.begin_clip();
    actions = ActionGrid::filled(grid, 1, 0);
    state_ = frame;
    const auto t0 = Clock::now();
    out = stage("task", [&] { return task_.run_dense(state_, 0); });
    r.time_task = seconds_since(t0);
    ig_map_ = Tensor::nchw(1, 1, grid.height, grid.width);
  } else {
    PolicyNet::Cache cache;
    if (ov) {
      actions = stage("actions", [&] { return override_actions(*ov, t); });
    } else {
      const auto t0 = Clock::now();
      const Tensor s = stage("assemble_state", [&] {
        return assemble_state(frame, state_, prev_rendered_, prev_actions_, grid);
      });
      cache = stage("policy_forward", [&] { return policy.evaluate(s, grid); });
      actions = sample_actions(cache.probs, clip_seed(cfg.seed, clip_), t);
      r.macs_policy = policy.net().forward_macs(grid.height, grid.width);
      r.time_policy = seconds_since(t0);
    }
    actions.frame = t;

    auto t0 = Clock::now();
    stage("commit", [&] {
      commit_blocks(frame, actions, grid, state_);
      return 0;
    });
    r.time_gather_scatter = seconds_since(t0);

    t0 = Clock::now();
    out = stage("task", [&] { return task_.run_sparse(state_, actions); });
    const double copy = task_.executor() ? task_.executor()->last_copy_seconds() : 0.0;
    r.time_task = seconds_since(t0) - copy;
    r.time_gather_scatter += copy;

    t0 = Clock::now();
    const Tensor block_ig = stage("info_gain", [&] {
      const std::size_t HW = grid.height * grid.width;
      if (out.is_segmentation()) {
        ig_map_ = ig_semseg(out.probs, prev_output_.probs);
        r.macs_ig = out.probs.c() * HW;
      } else {
        ig_map_ = ig_detection(out.detections, prev_output_.detections, grid.height, grid.width);
        std::uint64_t area = 0;
        for (const auto* set : {&out.detections, &prev_output_.detections})
          for (const auto& d : *set) {
            const PixelRange pr = box_pixels(d.box, grid.height, grid.width);
            area += (pr.y1 - pr.y0) * (pr.x1 - pr.x0);
          }
        r.macs_ig = HW + area;
      }
      r.macs_ig += HW;  // block max-pool
      return block_maxpool(ig_map_, grid);
    });
    r.time_ig = seconds_since(t0);
    for (float v : block_ig.values()) r.ig_max = std::max(r.ig_max, static_cast<double>(v));

    if (!ov) {
      t0 = Clock::now();
      const PolicyStep st = stage("policy_update", [&] { return policy.learn(cache, actions, block_ig); });
      r.time_update = seconds_since(t0);
      r.loss = st.loss;
      r.reward_mean = st.reward_mean;
      r.moving_avg = st.moving_avg;
      r.updated = st.updated;
    }
  }

  const MacCounter& m = task_.last_frame_stats();
  r.macs_task = m.task;
  // Plus the RGB frame-state commit, which happens outside the task backend.
  r.bytes_moved = m.bytes_moved + (t ? actions.executed() * grid.block_size * grid.block_size * 3 * sizeof(float) : 0);
  r.executed_blocks = actions.executed();
  r.executed_fraction = actions.fraction();

  if (out.is_segmentation()) {
    r.metric = mean_iou(out.probs, label_map(gt, grid.height, grid.width), out.probs.c());
  } else {
    r.metric = evaluate_detections(out.detections, gt, 0.5f, 0.5f, cfg.task == TaskKind::OracleDetector).f1;
  }
  if (full_gt && t > 0) {
    const auto moving = moving_object_blocks(*full_gt, t, grid);
    std::size_t total = 0, hit = 0;
    for (std::size_t b = 0; b < moving.size(); ++b) {
      total += moving[b];
      hit += moving[b] && actions.values[b];
    }
    if (total) r.overlap = static_cast<double>(hit) / static_cast<double>(total);
  }

  prev_rendered_ = task_.render(out);
  prev_output_ = std::move(out);
  prev_actions_ = std::move(actions);
  ++next_frame_;
  return r;
}

// ---------------------------------------------------------------------------

Pipeline::Pipeline(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  grid_ = BlockGrid::make(cfg_.height, cfg_.width, cfg_.block_size, 2);
  if (cfg_.task == TaskKind::ToyDetector) {
    detector_ = std::make_shared<ToyDetector>(cfg_.detector_seed);
    if (cfg_.detector_fit_epochs > 0) detector_->fit_heads(make_clips(cfg_, 4, 2), cfg_.detector_fit_epochs);
  }
  policy_ = std::make_unique<OnlinePolicy>(state_channels(), cfg_.policy, cfg_.seed);
}

std::size_t Pipeline::state_channels() const { return 7 + TaskBackend::channels_for(cfg_.task); }

ClipResult Pipeline::run_clip(const Clip& clip, long clip_index, const ActionOverride& override,
                              const FrameObserver& observer) {
  if (clip.frames.empty()) throw Error("pipeline: clip has no frames");
  if (clip.frames[0].h() != cfg_.height || clip.frames[0].w() != cfg_.width) {
    throw Error("pipeline: clip frames are " + shape_str(clip.frames[0].shape()) + ", config expects " +
                std::to_string(cfg_.height) + "x" + std::to_string(cfg_.width));
  }
  if (clip.gt.size() != clip.frames.size()) throw Error("pipeline: ground truth does not cover every frame");
  ClipRun run(*this, clip_index);
  ClipResult res;
  for (std::size_t t = 0; t < clip.frames.size(); ++t) {
    res.records.push_back(run.process_frame(static_cast<long>(t), clip.frames[t], clip.gt[t], &clip.gt, &override));
    res.outputs.push_back(run.last_output());
    res.actions.push_back(run.last_actions());
    if (observer) {
      observer(FrameView{clip_index, static_cast<long>(t), clip.frames[t], run.frame_state(), run.last_actions(),
                         run.last_ig(), run.last_output(), clip.gt[t]});
    }
  }
  return res;
}

void Pipeline::warmup(const std::vector<Clip>& clips) {
  if (clips.empty()) throw Error("warmup: empty clip set");
  // Warmup clip indices are kept apart from evaluation indices so the two
  // never share sampling streams.
  for (std::size_t i = 0; i < clips.size(); ++i) run_clip(clips[i], 1000000 + static_cast<long>(i));
}

std::vector<Clip> make_clips(const RunConfig& cfg, std::size_t count, std::uint64_t stream) {
  std::vector<Clip> clips;
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = mix64(mix64(cfg.seed ^ (stream << 40)) ^ i);
    clips.push_back(generate_clip(random_clip_spec(s, cfg.width, cfg.height, cfg.frames, cfg.objects)));
  }
  return clips;
}

std::vector<ClipResult> evaluate_clips(Pipeline& pipeline, const std::vector<Clip>& clips,
                                       const ActionOverride& override, const FrameObserver& observer) {
  std::vector<ClipResult> out;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    out.push_back(pipeline.run_clip(clips[i], static_cast<long>(i), override, observer));
  }
  return out;
}

std::vector<std::size_t> executed_counts(const ClipResult& run) {
  std::vector<std::size_t> c;
  for (const auto& r : run.records) c.push_back(r.executed_blocks);
  return c;
}

RunSummary summarize(const std::vector<ClipResult>& clips, std::uint64_t dense_macs_task,
                     std::size_t policy_updates) {
  RunSummary s;
  s.clips = clips.size();
  s.dense_macs_task = static_cast<double>(dense_macs_task);
  s.policy_updates = policy_updates;
  std::size_t sparse = 0;
  for (const auto& c : clips) {
    double metric = 0.0;
    for (const auto& r : c.records) {
      ++s.frames;
      s.mean_executed_fraction += r.executed_fraction;
      if (r.frame > 0) {
        s.mean_sparse_executed_fraction += r.executed_fraction;
        ++sparse;
      }
      metric += r.metric;
      if (r.overlap) {
        s.mean_overlap += *r.overlap;
        ++s.overlap_frames;
      }
      s.mean_macs_task += static_cast<double>(r.macs_task);
      s.mean_macs_policy += static_cast<double>(r.macs_policy);
      s.mean_macs_ig += static_cast<double>(r.macs_ig);
      s.time_policy += r.time_policy;
      s.time_gather_scatter += r.time_gather_scatter;
      s.time_task += r.time_task;
      s.time_ig += r.time_ig;
      s.time_update += r.time_update;
    }
    if (!c.records.empty()) s.mean_metric += metric / static_cast<double>(c.records.size());
  }
  if (s.clips) s.mean_metric /= static_cast<double>(s.clips);
  if (sparse) s.mean_sparse_executed_fraction /= static_cast<double>(sparse);
  if (s.overlap_frames) s.mean_overlap /= static_cast<double>(s.overlap_frames);
  if (s.frames) {
    const auto n = static_cast<double>(s.frames);
    s.mean_executed_fraction /= n;
    s.mean_macs_task /= n;
    s.mean_macs_policy /= n;
    s.mean_macs_ig /= n;
    s.time_policy /= n;
    s.time_gather_scatter /= n;
    s.time_task /= n;
    s.time_ig /= n;
    s.time_update /= n;
  }
  return s;
}

namespace {

template <typename T>
nlohmann::ordered_json opt(const std::optional<T>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

void write_records_jsonl(std::ostream& os, const std::vector<ClipResult>& clips, bool with_timing) {
  for (const auto& c : clips)
    for (const auto& r : c.records) {
      nlohmann::ordered_json j;
      j["schema"] = 1;
      j["clip"] = r.clip;
      j["frame"] = r.frame;
      j["executed_fraction"] = r.executed_fraction;
      j["executed_blocks"] = r.executed_blocks;
      j["macs_task"] = r.macs_task;
      j["macs_policy"] = r.macs_policy;
      j["macs_ig"] = r.macs_ig;
      j["bytes_moved"] = r.bytes_moved;
      j["metric"] = r.metric;
      j["overlap"] = opt(r.overlap);
      j["loss"] = opt(r.loss);
      j["reward_mean"] = opt(r.reward_mean);
      j["moving_avg"] = opt(r.moving_avg);
      j["updated"] = r.updated;
      j["ig_max"] = r.ig_max;
      if (with_timing) {
        j["time_policy"] = r.time_policy;
        j["time_gather_scatter"] = r.time_gather_scatter;
        j["time_task"] = r.time_task;
        j["time_ig"] = r.time_ig;
        j["time_update"] = r.time_update;
      }
      os << j.dump() << '\n';
    }
}

std::string summary_json(const RunSummary& s, const RunConfig& cfg, bool with_timing) {
  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["task"] = task_name(cfg.task);
  j["tau"] = cfg.policy.target;
  j["seed"] = cfg.seed;
  j["clips"] = s.clips;
  j["frames"] = s.frames;
  j["mean_executed_fraction"] = s.mean_executed_fraction;
  j["mean_sparse_executed_fraction"] = s.mean_sparse_executed_fraction;
  j["mean_metric"] = s.mean_metric;
  j["mean_overlap"] = s.mean_overlap;
  j["overlap_frames"] = s.overlap_frames;
  j["mean_macs_task"] = s.mean_macs_task;
  j["dense_macs_task"] = s.dense_macs_task;
  j["mean_macs_policy"] = s.mean_macs_policy;
  j["mean_macs_ig"] = s.mean_macs_ig;
  j["policy_updates"] = s.policy_updates;
  if (with_timing) {
    j["time_policy"] = s.time_policy;
    j["time_gather_scatter"] = s.time_gather_scatter;
    j["time_task"] = s.time_task;
    j["time_ig"] = s.time_ig;
    j["time_update"] = s.time_update;
  }
  return j.dump(2);
}

}  // namespace blockprop
