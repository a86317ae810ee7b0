// blockprop command-line front end: gen, run, eval, bench, selftest.
#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "blockprop/bench.hpp"
#include "blockprop/checks.hpp"
#include "blockprop/image_io.hpp"
#include "blockprop/pipeline.hpp"
#include "blockprop/rng.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace blockprop;

namespace {

struct Flags {
  std::string config;
  std::optional<double> tau;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> block_size;
  std::optional<std::string> task;
  std::optional<std::size_t> frames;
  std::optional<std::size_t> clips;
  std::optional<std::size_t> warmup;
  std::string out;
  std::string input;
  bool viz = false;
  bool timing = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "key = value run configuration");
  cmd->add_option("--tau", f.tau, "cost target (fraction of executed blocks)");
  cmd->add_option("--seed", f.seed, "master seed");
  cmd->add_option("--block-size", f.block_size, "block edge in pixels");
  cmd->add_option("--task", f.task, "task backend")->check(CLI::IsMember({"toy-det", "oracle-det", "oracle-seg"}));
  cmd->add_option("--frames", f.frames, "frames per clip");
  cmd->add_option("--clips", f.clips, "evaluation clips");
  cmd->add_option("--out", f.out, "output directory");
}

// defaults < config file < BLOCKPROP_* environment < flags
RunConfig resolve(Flags& f) {
  if (f.config.empty())
    if (const char* p = std::getenv("BLOCKPROP_CONFIG")) f.config = p;
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  apply_env_overrides(cfg);
  if (f.tau) cfg.policy.target = *f.tau;
  if (f.seed) cfg.seed = *f.seed;
  if (f.block_size) cfg.block_size = *f.block_size;
  if (f.task) cfg.task = task_from_name(*f.task);
  if (f.frames) cfg.frames = *f.frames;
  if (f.clips) cfg.clips = *f.clips;
  if (f.warmup) cfg.warmup_clips = *f.warmup;
  if (f.timing) cfg.timing = true;
  if (f.out.empty()) {
    const char* o = std::getenv("BLOCKPROP_OUT");
    f.out = o ? o : "blockprop_out";
  }
  if (const char* v = std::getenv("BLOCKPROP_VIZ"); v && !f.viz) f.viz = std::string(v) == "1" || std::string(v) == "true";
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot write " + p.string());
  os << text;
}

std::string clip_dir_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%03zu", i);
  return buf;
}

std::vector<Clip> input_clips(const Flags& f, const RunConfig& cfg) {
  if (f.input.empty()) return make_clips(cfg, cfg.clips, 1);
  if (!fs::is_directory(f.input)) throw Error("stage load: " + f.input + " is not a directory");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(f.input))
    if (e.is_directory() && fs::exists(e.path() / "index.txt")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw Error("stage load: no clip directories under " + f.input);
  std::vector<Clip> clips;
  for (const auto& d : dirs) {
    try {
      clips.push_back(load_clip(d));
    } catch (const Error& e) {
      throw Error(std::string("stage load: ") + e.what());
    }
  }
  return clips;
}

// Composite frame state with executed blocks outlined in yellow.
Image8 block_overlay(const FrameView& v, const BlockGrid& g) {
  Image8 img = to_image8(v.frame_state);
  const auto paint = [&](std::size_t y, std::size_t x) {
    std::uint8_t* p = &img.pixels[(y * img.width + x) * 3];
    p[0] = 255;
    p[1] = 230;
    p[2] = 0;
  };
  for (std::size_t b : v.actions.executed_indices()) {
    const std::size_t y0 = b / g.cols * g.block_size, x0 = b % g.cols * g.block_size, s = g.block_size;
    for (std::size_t k = 0; k < s; ++k) {
      paint(y0 + k, x0);
      paint(y0 + k, x0 + s - 1);
      paint(y0, x0 + k);
      paint(y0 + s - 1, x0 + k);
    }
  }
  return img;
}

FrameObserver viz_writer(const fs::path& root, const BlockGrid& grid) {
  return [root, grid](const FrameView& v) {
    const fs::path dir = root / clip_dir_name(static_cast<std::size_t>(v.clip));
    fs::create_directories(dir);
    char name[64];
    std::snprintf(name, sizeof name, "frame_%04ld_blocks.ppm", v.frame);
    write_pnm(dir / name, block_overlay(v, grid));
    // IG is clamped to [0,1] so heatmaps are comparable across frames.
    std::snprintf(name, sizeof name, "frame_%04ld_ig.pgm", v.frame);
    write_pnm(dir / name, to_image8(v.ig_map));
  };
}

int cmd_gen(Flags& f) {
  const RunConfig cfg = resolve(f);
  fs::create_directories(f.out);
  const auto clips = make_clips(cfg, cfg.clips, 1);
  for (std::size_t i = 0; i < clips.size(); ++i) save_clip(fs::path(f.out) / clip_dir_name(i), clips[i]);
  write_text(fs::path(f.out) / "config.txt", format_config(cfg));
  std::cout << "wrote " << clips.size() << " clips of " << cfg.frames << " frames to " << f.out << "\n";
  return 0;
}

struct RunOutcome {
  RunConfig cfg;
  std::vector<Clip> clips;
  std::vector<ClipResult> results;
  RunSummary summary;
};

RunOutcome run_policy(Flags& f) {
  RunOutcome o;
  o.cfg = resolve(f);
  fs::create_directories(f.out);
  Pipeline pipe(o.cfg);
  if (o.cfg.warmup_clips) pipe.warmup(make_clips(o.cfg, o.cfg.warmup_clips, 0));
  o.clips = input_clips(f, o.cfg);
  const FrameObserver obs = f.viz ? viz_writer(fs::path(f.out) / "viz", pipe.grid()) : nullptr;
  o.results = evaluate_clips(pipe, o.clips, {}, obs);
  const TaskBackend probe(o.cfg.task, pipe.grid(), pipe.detector());
  o.summary = summarize(o.results, probe.dense_task_macs(), pipe.policy().updates());
  std::ofstream jl(fs::path(f.out) / "records.jsonl", std::ios::binary);
  write_records_jsonl(jl, o.results, o.cfg.timing);
  write_text(fs::path(f.out) / "summary.json", summary_json(o.summary, o.cfg, o.cfg.timing) + "\n");
  write_text(fs::path(f.out) / "config.txt", format_config(o.cfg));
  pipe.policy().save(fs::path(f.out) / "policy");
  return o;
}

int cmd_run(Flags& f) {
  const RunOutcome o = run_policy(f);
  std::printf("%zu clips, %zu frames: executed %.3f, metric %.4f, overlap %.3f, task MACs %.0f of %.0f\n",
              o.summary.clips, o.summary.frames, o.summary.mean_sparse_executed_fraction, o.summary.mean_metric,
              o.summary.mean_overlap, o.summary.mean_macs_task, o.summary.dense_macs_task);
  return 0;
}

int cmd_eval(Flags& f) {
  const RunOutcome o = run_policy(f);
  Pipeline base(o.cfg);
  const BenchRow policy = bench_row("policy", o.cfg.policy.target, o.results, o.summary.policy_updates);
  const BenchRow full = bench_row("full", 1.0, evaluate_clips(base, o.clips, ActionOverride::full()), 0);
  std::vector<ClipResult> rnd;
  for (std::size_t i = 0; i < o.clips.size(); ++i) {
    rnd.push_back(base.run_clip(o.clips[i], static_cast<long>(i),
                                ActionOverride::with_counts(executed_counts(o.results[i]), mix64(o.cfg.seed ^ 0x7a11ULL))));
  }
  const BenchRow random = bench_row("random", o.cfg.policy.target, rnd, 0);

  nlohmann::ordered_json j;
  j["schema"] = 1;
  j["task"] = task_name(o.cfg.task);
  j["metric_name"] = o.cfg.task == TaskKind::OracleSegmenter ? "miou" : "f1";
  j["per_clip"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < o.clips.size(); ++i) {
    const ClipMetrics m = evaluate_clip(o.results[i].outputs, o.clips[i].gt, o.cfg.height, o.cfg.width,
                                        o.cfg.task == TaskKind::OracleDetector);
    nlohmann::ordered_json c;
    c["clip"] = i;
    c["metric"] = m.mean;
    if (o.cfg.task != TaskKind::OracleSegmenter) {
      c["tp"] = m.tp;
      c["fp"] = m.fp;
      c["fn"] = m.fn;
    }
    j["per_clip"].push_back(c);
  }
  for (const BenchRow* r : {&policy, &full, &random}) {
    j[r->label] = {{"executed_fraction", r->executed_fraction}, {"metric", r->metric}, {"overlap", r->overlap},
                   {"macs_task", r->macs_task}};
  }
  j["overlap_ratio"] = random.overlap > 0 ? policy.overlap / random.overlap : 0.0;
  write_text(fs::path(f.out) / "eval.json", j.dump(2) + "\n");
  std::printf("%-8s %9s %9s %9s\n", "", "executed", "metric", "overlap");
  for (const BenchRow* r : {&policy, &random, &full})
    std::printf("%-8s %9.3f %9.4f %9.3f\n", r->label.c_str(), r->executed_fraction, r->metric, r->overlap);
  return 0;
}

int cmd_bench(Flags& f) {
  const RunConfig cfg = resolve(f);
  fs::create_directories(f.out);
  const BenchTable t = run_bench(cfg, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9});
  write_text(fs::path(f.out) / "bench.csv", bench_csv(t));
  write_text(fs::path(f.out) / "bench.json", bench_json(t, cfg) + "\n");
  std::printf("%-18s %9s %9s %9s %14s\n", "", "executed", "metric", "overlap", "task MACs");
  const auto row = [](const BenchRow& r) {
    std::printf("%-18s %9.3f %9.4f %9.3f %14.0f\n", r.label.c_str(), r.executed_fraction, r.metric, r.overlap,
                r.macs_task);
  };
  row(t.full);
  for (std::size_t i = 0; i < t.policy.size(); ++i) {
    row(t.policy[i]);
    row(t.random[i]);
  }
  std::printf("spearman(tau, executed) %.3f  spearman(executed, metric) %.3f\n", t.spearman_tau_fraction,
              t.spearman_fraction_metric);
  return 0;
}

int cmd_selftest() {
  int failed = 0;
  for (const auto& r : checks::invariant_suite()) {
    failed += !r.pass;
    std::printf("%s %s: %s (%.1fs)\n", r.pass ? "PASS" : "FAIL", r.name.c_str(), r.detail.c_str(), r.seconds);
  }
  std::printf("%s\n", failed ? "selftest FAILED" : "selftest passed");
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Block-sparse video inference with a learned block-selection policy"};
  app.require_subcommand(1);
  Flags f;
  auto* gen = app.add_subcommand("gen", "write synthetic clips and ground truth");
  auto* run = app.add_subcommand("run", "warm up the policy, process clips, write JSONL records");
  auto* eval = app.add_subcommand("eval", "run plus metrics against ground truth and baselines");
  auto* bench = app.add_subcommand("bench", "sweep tau over 0.1..0.9 with full and random baselines");
  auto* self = app.add_subcommand("selftest", "run the invariant checks");
  for (auto* c : {gen, run, eval, bench}) add_common(c, f);
  for (auto* c : {run, eval, bench}) {
    c->add_option("--warmup", f.warmup, "warmup clips");
    c->add_flag("--timing", f.timing, "include wall-clock fields in reports");
  }
  for (auto* c : {run, eval}) {
    c->add_flag("--viz", f.viz, "write block overlays (PPM) and IG heatmaps (PGM)");
    c->add_option("--input", f.input, "directory of clips written by gen");
  }
  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (name == "gen") return cmd_gen(f);
    if (name == "run") return cmd_run(f);
    if (name == "eval") return cmd_eval(f);
    if (name == "bench") return cmd_bench(f);
    if (self->parsed()) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "blockprop " << name << ": " << e.what() << "\n";
    return 2;
  }
  return 1;
}
