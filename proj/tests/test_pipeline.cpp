#include <algorithm>
#include <map>
#include <sstream>

#include "blockprop/pipeline.hpp"
#include "doctest.h"
#include "json.hpp"

using namespace blockprop;

namespace {

Clip static_clip(std::size_t frames = 20) {
  SyntheticClipSpec spec;
  spec.frames = frames;
  spec.background_seed = 5;
  spec.objects = {{1, 1, 10, 10, 12, 9, 0, 0}, {2, 3, 70, 30, 20, 14, 0, 0}};
  return generate_clip(spec);
}

RunConfig small_config(TaskKind task, double tau = 0.3) {
  RunConfig cfg;
  cfg.task = task;
  cfg.policy.target = tau;
  cfg.warmup_clips = 4;
  cfg.clips = 2;
  return cfg;
}

}  // namespace

TEST_CASE("static clip: copied outputs and vanishing IG") {
  for (TaskKind task : {TaskKind::OracleDetector, TaskKind::OracleSegmenter, TaskKind::ToyDetector}) {
    CAPTURE(task_name(task));
    Pipeline pipe(small_config(task));
    const Clip clip = static_clip();
    const ClipResult res = pipe.run_clip(clip, 0);
    REQUIRE(res.records.size() == 20);
    for (std::size_t t = 1; t < 20; ++t) {
      CHECK(res.outputs[t] == res.outputs[0]);
      if (t >= 2) CHECK(res.records[t].ig_max == 0.0);
    }
    if (task == TaskKind::ToyDetector) {
      const TaskBackend backend(task, pipe.grid(), pipe.detector());
      const auto dense = backend.dense_task_macs();
      for (std::size_t t = 1; t < 20; ++t) {
        const auto& r = res.records[t];
        CHECK(r.macs_task * pipe.grid().count() == dense * r.executed_blocks);
      }
    }
  }
}

TEST_CASE("forced full execution reproduces dense processing") {
  RunConfig cfg = small_config(TaskKind::ToyDetector);
  cfg.detector_seed = 11;
  Pipeline pipe(cfg);
  const auto clips = make_clips(cfg, 2, 1);
  for (std::size_t c = 0; c < clips.size(); ++c) {
    const ClipResult res = pipe.run_clip(clips[c], static_cast<long>(c), ActionOverride::full());
    for (std::size_t t = 0; t < clips[c].frames.size(); ++t) {
      TaskBackend fresh(TaskKind::ToyDetector, pipe.grid(), pipe.detector());
      const TaskOutput dense = fresh.run_dense(clips[c].frames[t], 0);
      const DetectionSet& got = res.outputs[t].detections;
      REQUIRE(got.size() == dense.detections.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(std::abs(got[i].score - dense.detections[i].score) <= 1e-5f);
        CHECK(std::abs(got[i].box.x1 - dense.detections[i].box.x1) <= 1e-4f);
        CHECK(std::abs(got[i].box.y2 - dense.detections[i].box.y2) <= 1e-4f);
      }
      CHECK(res.records[t].macs_task == fresh.dense_task_macs());
      CHECK(res.records[t].executed_fraction == 1.0);
    }
  }
}

TEST_CASE("frame protocol") {
  Pipeline pipe(small_config(TaskKind::OracleDetector));
  const auto clips = make_clips(pipe.config(), 1, 1);
  const ClipResult res = pipe.run_clip(clips[0], 0);
  CHECK(res.records[0].executed_fraction == 1.0);
  CHECK(res.records[0].executed_blocks == pipe.grid().count());
  CHECK_FALSE(res.records[0].loss);
  CHECK(res.records[0].macs_policy == 0);
  for (std::size_t t = 0; t < res.records.size(); ++t) {
    CHECK(res.records[t].frame == static_cast<long>(t));
    if (t) {
      CHECK(res.records[t].loss);
      CHECK(res.records[t].macs_policy == pipe.policy().net().forward_macs(64, 128));
    }
  }
  // Update cadence counts policy frames only: 19 frames, period 4.
  CHECK(pipe.policy().updates() == 4);
  CHECK(pipe.policy().pending_frames() == 3);

  SUBCASE("out-of-order frames") {
    ClipRun run(pipe, 0);
    CHECK_THROWS_AS(run.process_frame(1, clips[0].frames[1], clips[0].gt[1]), Error);
  }
  SUBCASE("stage errors name the stage") {
    ClipRun run(pipe, 0);
    run.process_frame(0, clips[0].frames[0], clips[0].gt[0]);
    const Tensor wrong = Tensor::nchw(1, 3, 32, 128);
    try {
      run.process_frame(1, wrong, clips[0].gt[1]);
      FAIL("expected an error");
    } catch (const Error& e) {
      CHECK(std::string(e.what()).find("stage assemble_state") == 0);
    }
  }
  SUBCASE("mismatched clip extents") {
    SyntheticClipSpec spec;
    spec.width = 64;
    CHECK_THROWS_AS(pipe.run_clip(generate_clip(spec), 0), Error);
  }
}

TEST_CASE("overrides") {
  const BlockGrid grid = BlockGrid::make(64, 128, 16, 2);
  const ActionGrid a = random_subset(grid, 9, 4, 2, 3);
  CHECK(a.executed() == 9);
  CHECK(a == random_subset(grid, 9, 4, 2, 3));
  CHECK_FALSE(a == random_subset(grid, 9, 5, 2, 3));
  CHECK(random_subset(grid, 32, 0, 0, 1).executed() == 32);
  CHECK_THROWS_AS(random_subset(grid, 33, 0, 0, 1), Error);

  Pipeline pipe(small_config(TaskKind::OracleDetector));
  const auto clips = make_clips(pipe.config(), 1, 1);
  std::vector<std::size_t> counts(20);
  for (std::size_t t = 0; t < counts.size(); ++t) counts[t] = t % 5 * 8;
  const ClipResult res = pipe.run_clip(clips[0], 0, ActionOverride::with_counts(counts, 3));
  for (std::size_t t = 1; t < 20; ++t) CHECK(res.records[t].executed_blocks == counts[t]);
  CHECK(executed_counts(res)[0] == 32);
  CHECK(pipe.policy().updates() == 0);
  CHECK_THROWS_AS(pipe.run_clip(clips[0], 0, ActionOverride::with_counts({0, 1}, 3)), Error);
  // Forced fractions round to whole blocks: 0.25 * 32 = 8.
  const ClipResult q = pipe.run_clip(clips[0], 0, ActionOverride::with_fraction(0.25, 1));
  for (std::size_t t = 1; t < 20; ++t) CHECK(q.records[t].executed_blocks == 8);
}

TEST_CASE("moving-object blocks") {
  const BlockGrid grid = BlockGrid::make(64, 128, 16, 2);
  GroundTruth gt(2);
  gt[0] = {{0, 1, {10, 10, 20, 20}, 1}, {0, 2, {40, 40, 50, 50}, 2}};
  // Object 1 moves across a block boundary, object 2 stays, object 3 appears.
  gt[1] = {{1, 1, {12, 10, 22, 20}, 1}, {1, 2, {40, 40, 50, 50}, 2}, {1, 3, {100, 2, 104, 6}, 3}};
  const auto m = moving_object_blocks(gt, 1, grid);
  std::vector<std::size_t> on;
  for (std::size_t b = 0; b < m.size(); ++b)
    if (m[b]) on.push_back(b);
  CHECK(on == std::vector<std::size_t>{0, 1, 6, 8, 9});
  CHECK(std::count(moving_object_blocks(gt, 0, grid).begin(), moving_object_blocks(gt, 0, grid).end(), 1) == 0);
}

TEST_CASE("warmup") {
  RunConfig cfg = small_config(TaskKind::OracleDetector);
  const auto train = make_clips(cfg, cfg.warmup_clips, 0);
  Pipeline a(cfg), b(cfg);
  a.warmup(train);
  b.warmup(train);
  CHECK(a.policy().net().to_tensors() == b.policy().net().to_tensors());
  // The update window runs across clip boundaries.
  CHECK(a.policy().updates() == 19 * train.size() / 4);
  CHECK_THROWS_AS(a.warmup({}), Error);

  // Warmup and evaluation streams never coincide.
  CHECK_FALSE(make_clips(cfg, 1, 0)[0].frames == make_clips(cfg, 1, 1)[0].frames);
}

TEST_CASE("executed fraction after warmup stays near tau") {
  RunConfig cfg;
  cfg.policy.target = 0.3;
  Pipeline pipe(cfg);
  pipe.warmup(make_clips(cfg, cfg.warmup_clips, 0));
  const auto results = evaluate_clips(pipe, make_clips(cfg, cfg.clips, 1));
  const RunSummary s = summarize(results, 0, pipe.policy().updates());
  CHECK(s.mean_sparse_executed_fraction >= 0.2);
  CHECK(s.mean_sparse_executed_fraction <= 0.4);
}

TEST_CASE("summary and reports") {
  RunConfig cfg = small_config(TaskKind::OracleSegmenter);
  const auto run = [&] {
    Pipeline pipe(cfg);
    return evaluate_clips(pipe, make_clips(cfg, 2, 1));
  };
  const auto results = run();
  const RunSummary s = summarize(results, 8192, 0);
  double sum = 0.0, metric0 = 0.0;
  std::size_t n = 0;
  for (const auto& c : results)
    for (const auto& r : c.records) {
      sum += r.executed_fraction;
      ++n;
    }
  for (const auto& r : results[0].records) metric0 += r.metric / 20.0;
  CHECK(s.frames == 40);
  CHECK(s.mean_executed_fraction == doctest::Approx(sum / n).epsilon(1e-12));
  CHECK(s.dense_macs_task == 8192.0);
  double metric1 = 0.0;
  for (const auto& r : results[1].records) metric1 += r.metric / 20.0;
  CHECK(s.mean_metric == doctest::Approx((metric0 + metric1) / 2));

  std::ostringstream a, b;
  write_records_jsonl(a, results, false);
  write_records_jsonl(b, run(), false);
  CHECK(a.str() == b.str());

  std::istringstream lines(a.str());
  std::string line;
  std::size_t count = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j["schema"] == 1);
    CHECK(j.contains("macs_task"));
    CHECK_FALSE(j.contains("time_task"));
    CHECK(j["frame"] == static_cast<long>(count % 20));
    CHECK(j["loss"].is_null() == (count % 20 == 0));
    ++count;
  }
  CHECK(count == 40);
  std::ostringstream timed;
  write_records_jsonl(timed, results, true);
  CHECK(nlohmann::json::parse(timed.str().substr(0, timed.str().find('\n'))).contains("time_gather_scatter"));

  const auto sj = nlohmann::json::parse(summary_json(s, cfg, false));
  CHECK(sj["task"] == "oracle-seg");
  CHECK(sj["frames"] == 40);
  CHECK_FALSE(sj.contains("time_policy"));
}

TEST_CASE("observer is pure") {
  RunConfig cfg = small_config(TaskKind::ToyDetector);
  const auto clips = make_clips(cfg, 1, 1);
  Pipeline a(cfg), b(cfg);
  std::size_t seen = 0;
  const auto plain = a.run_clip(clips[0], 0);
  const auto watched = b.run_clip(clips[0], 0, {}, [&](const FrameView& v) {
    CHECK(v.frame == static_cast<long>(seen));
    CHECK(v.ig_map.h() == 64);
    ++seen;
  });
  CHECK(seen == 20);
  CHECK(plain.outputs == watched.outputs);
  CHECK(plain.actions == watched.actions);
  CHECK(a.policy().net().to_tensors() == b.policy().net().to_tensors());
}

TEST_CASE("config parsing") {
  std::istringstream is(
      "# desk run\n"
      "tau = 0.45\n"
      "block_size=32   # coarser grid\n"
      "task = oracle-seg\n"
      "\n"
      "online = false\n"
      "average_mode = two-term\n");
  const RunConfig cfg = parse_config(is);
  CHECK(cfg.policy.target == 0.45);
  CHECK(cfg.block_size == 32);
  CHECK(cfg.task == TaskKind::OracleSegmenter);
  CHECK_FALSE(cfg.policy.online);
  CHECK(cfg.policy.average_mode == MovingAverageMode::TwoTerm);
  CHECK(cfg.policy.gamma == 5.0);
  CHECK(cfg.policy.momentum == 0.9);
  CHECK(cfg.policy.update_period == 4);
  CHECK(cfg.halo == 1);

  std::istringstream back(format_config(cfg));
  const RunConfig again = parse_config(back);
  CHECK(format_config(again) == format_config(cfg));

  const auto fails = [](const std::string& text, const std::string& needle) {
    std::istringstream s(text);
    try {
      parse_config(s).validate();
    } catch (const Error& e) {
      const std::string msg = e.what();
      CAPTURE(msg);
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
      return;
    }
    FAIL("accepted: " << text);
  };
  fails("tau = 0.3\nbogus = 1\n", "line 2");
  fails("seed = -4\n", "non-negative");
  fails("tau = 0.3x\n", "number");
  fails("update_period = 0\n", "update period");
  fails("block_size = 24\n", "divisible");
  fails("block_size = 8\nwidth = 64\n", "at least 16");
  fails("halo = 2\n", "halo");
  fails("just words\n", "key = value");
  fails("task = yolo\n", "yolo");
  fails("online = maybe\n", "boolean");

  std::map<std::string, std::string> env{{"BLOCKPROP_TAU", "0.7"}, {"BLOCKPROP_SEED", "99"},
                                         {"BLOCKPROP_TASK", "toy-det"}};
  RunConfig e = cfg;
  apply_env_overrides(e, [&](const char* k) -> const char* {
    const auto it = env.find(k);
    return it == env.end() ? nullptr : it->second.c_str();
  });
  CHECK(e.policy.target == 0.7);
  CHECK(e.seed == 99);
  CHECK(e.task == TaskKind::ToyDetector);
  CHECK(e.block_size == 32);
  env["BLOCKPROP_FRAMES"] = "many";
  CHECK_THROWS_WITH_AS(apply_env_overrides(e, [&](const char* k) -> const char* {
                         const auto it = env.find(k);
                         return it == env.end() ? nullptr : it->second.c_str();
                       }),
                       doctest::Contains("BLOCKPROP_FRAMES"), Error);
}
