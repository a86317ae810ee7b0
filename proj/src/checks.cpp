#include "blockprop/checks.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "blockprop/reference.hpp"

namespace blockprop::checks {

namespace {

CheckResult timed(std::string name, const std::function<bool(std::ostringstream&)>& body) {
  CheckResult r;
  r.name = std::move(name);
  std::ostringstream detail;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    r.pass = body(detail);
  } catch (const std::exception& e) {
    r.pass = false;
    detail << "exception: " << e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.detail = detail.str();
  return r;
}

Tensor random_frame(Rng& rng, std::size_t h = 64, std::size_t w = 128) {
  Tensor t = Tensor::nchw(1, 3, h, w);
  for (auto& v : t.storage()) v = static_cast<float>(rng.uniform());
  return t;
}

const BlockGrid& desk_grid() {
  static const BlockGrid g = BlockGrid::make(64, 128, 16, 2);
  return g;
}

}  // namespace

CheckResult full_execution_equivalence(std::size_t seeds) {
  return timed("full-execution equivalence", [&](std::ostringstream& os) {
    const auto detector = std::make_shared<ToyDetector>(7);
    float worst = 0.0f;
    std::size_t mismatched_sets = 0, boxes = 0;
    for (std::uint64_t seed = 0; seed < seeds; ++seed) {
      // Distinct detector weights per seed as well as distinct frames.
      const auto det = seed == 0 ? detector : std::make_shared<ToyDetector>(100 + seed);
      Rng rng(seed);
      const Tensor f0 = random_frame(rng), f1 = random_frame(rng);
      TaskBackend dense(TaskKind::ToyDetector, desk_grid(), det), sparse(TaskKind::ToyDetector, desk_grid(), det);
      dense.run_dense(f0, 0);
      sparse.run_dense(f0, 0);
      const TaskOutput od = dense.run_dense(f1, 1);
      const TaskOutput osp = sparse.run_sparse(f1, ActionGrid::filled(desk_grid(), 1, 1));
      for (std::size_t l = 0; l < det->network().size(); ++l) {
        worst = std::max(worst, max_abs_diff(dense.executor()->canvas(l), sparse.executor()->canvas(l)));
      }
      if (od.detections.size() != osp.detections.size()) {
        ++mismatched_sets;
        continue;
      }
      for (std::size_t i = 0; i < od.detections.size(); ++i) {
        worst = std::max(worst, std::abs(od.detections[i].score - osp.detections[i].score));
        ++boxes;
      }
    }
    os << seeds << " seeds, " << boxes << " detections, max |diff| " << worst << ", set-size mismatches "
       << mismatched_sets;
    return seeds >= 20 && worst <= 1e-5f && mismatched_sets == 0;
  });
}

CheckResult copy_purity(std::size_t clips) {
  return timed("copy purity", [&](std::ostringstream& os) {
    std::size_t frames_checked = 0, failures = 0;
    for (TaskKind task : {TaskKind::ToyDetector, TaskKind::OracleDetector, TaskKind::OracleSegmenter}) {
      RunConfig cfg;
      cfg.task = task;
      Pipeline pipe(cfg);
      const auto set = make_clips(cfg, clips, 3);
      for (std::size_t c = 0; c < set.size(); ++c) {
        ClipRun run(pipe, static_cast<long>(c));
        std::vector<std::size_t> counts(set[c].frames.size());
        for (std::size_t t = 0; t < counts.size(); ++t) counts[t] = t % 2 ? 0 : 11;
        const ActionOverride ov = ActionOverride::with_counts(counts, 5 + c);
        for (std::size_t t = 0; t < set[c].frames.size(); ++t) {
          std::vector<Tensor> before;
          const TaskOutput prev = run.last_output();
          const auto* ex = run.task().executor();
          if (ex && t > 0)
            for (std::size_t l = 0; l < ex->network().size(); ++l) before.push_back(ex->canvas(l));
          run.process_frame(static_cast<long>(t), set[c].frames[t], set[c].gt[t], &set[c].gt, &ov);
          if (t == 0 || counts[t] != 0) continue;
          ++frames_checked;
          bool same = run.last_output() == prev;
          if (const auto* ex = run.task().executor())
            for (std::size_t l = 0; l < before.size(); ++l) same &= ex->canvas(l) == before[l];
          failures += !same;
        }
      }
    }
    os << frames_checked << " zero-block frames over 3 backends, " << failures << " differ";
    return frames_checked > 0 && failures == 0;
  });
}

CheckResult mac_linearity() {
  return timed("MAC linearity", [&](std::ostringstream& os) {
    RunConfig cfg;
    cfg.task = TaskKind::ToyDetector;
    Pipeline pipe(cfg);
    const auto clip = make_clips(cfg, 1, 4)[0];
    const TaskBackend probe(cfg.task, pipe.grid(), pipe.detector());
    const std::uint64_t dense = probe.dense_task_macs();
    bool ok = true;
    for (double c : {0.0, 0.25, 0.5, 0.75, 1.0}) {
      const ClipResult r = pipe.run_clip(clip, 0, ActionOverride::with_fraction(c, 9));
      const auto expect = static_cast<std::uint64_t>(std::llround(c * static_cast<double>(dense)));
      for (std::size_t t = 1; t < r.records.size(); ++t) ok &= r.records[t].macs_task == expect;
      os << "c=" << c << ": " << r.records[1].macs_task << "/" << dense << "  ";
    }
    return ok;
  });
}

CheckResult reinforce_gradient(std::size_t instances) {
  return timed("REINFORCE gradient", [&](std::ostringstream& os) {
    const BlockGrid& g = desk_grid();
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < instances; ++seed) {
      Rng rng(seed + 500);
      Tensor z = Tensor::nchw(1, 1, g.rows, g.cols), r = Tensor::nchw(1, 1, g.rows, g.cols);
      ActionGrid a = ActionGrid::filled(g, 0);
      for (std::size_t b = 0; b < g.count(); ++b) {
        z[b] = static_cast<float>(rng.uniform(-3.0, 3.0));
        r[b] = static_cast<float>(rng.uniform(-2.0, 2.0));
        a.values[b] = rng.uniform() < 0.5;
      }
      const auto loss_of = [&](const Tensor& logits) {
        double l = 0.0;
        for (std::size_t b = 0; b < logits.numel(); ++b) {
          const double p = 1.0 / (1.0 + std::exp(-static_cast<double>(logits[b])));
          l -= r[b] * std::log(a.values[b] ? p : 1.0 - p);
        }
        return l;
      };
      const Tensor analytic = reinforce_loss(sigmoid(z), a, r).grad_logits;
      double diff = 0.0, norm = 0.0;
      const float h = 1e-3f;
      for (std::size_t b = 0; b < z.numel(); ++b) {
        Tensor up = z, down = z;
        up[b] += h;
        down[b] -= h;
        const double fd = (loss_of(up) - loss_of(down)) / (static_cast<double>(up[b]) - down[b]);
        diff += (fd - analytic[b]) * (fd - analytic[b]);
        norm += fd * fd;
      }
      worst = std::max(worst, std::sqrt(diff / norm));
    }
    os << instances << " instances, worst relative error " << worst;
    return instances >= 10 && worst < 1e-3;
  });
}

CheckResult ig_reference(std::size_t pairs) {
  return timed("detection IG reference", [&](std::ostringstream& os) {
    Rng rng(77);
    double worst = 0.0;
    const std::size_t H = 12, W = 16;
    for (std::size_t i = 0; i < pairs; ++i) {
      const DetectionSet curr = reference::random_detections(rng, H, W, 5);
      const DetectionSet prev = reference::random_detections(rng, H, W, 5);
      const Tensor ig = ig_detection(curr, prev, H, W);
      const auto ref = reference::brute_force_ig(curr, prev, H, W);
      for (std::size_t p = 0; p < ref.size(); ++p) worst = std::max(worst, std::fabs(ref[p] - ig[p]));
    }
    // prev 0.8 at [0,10)x[0,10), curr 0.9 shifted by 5: IoU 1/3.
    Detection p, c;
    p.box = {0, 0, 10, 10};
    p.score = 0.8f;
    c.box = {5, 0, 15, 10};
    c.score = 0.9f;
    const Tensor w = ig_detection({c}, {p}, 10, 20);
    const bool worked = std::fabs(w.at(0, 0, 5, 7) - 0.6) <= 1e-6 && std::fabs(w.at(0, 0, 5, 2) - 0.8 * 2 / 3.0) <= 1e-6;
    const Tensor gone = ig_detection({}, {p}, 10, 20);
    const bool vanished = gone.at(0, 0, 3, 3) == 0.8f && gone.at(0, 0, 3, 15) == 0.0f;
    os << pairs << " random pairs, max |diff| " << worst << "; worked example " << (worked ? "ok" : "WRONG")
       << "; disappearing object " << (vanished ? "ok" : "WRONG");
    return pairs >= 1000 && worst <= 1e-6 && worked && vanished;
  });
}

CheckResult kl_properties(std::size_t pairs) {
  return timed("KL IG properties", [&](std::ostringstream& os) {
    Rng rng(31);
    const auto random_probs = [&](std::size_t C, std::size_t H, std::size_t W) {
      Tensor t = Tensor::nchw(1, C, H, W);
      for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
          std::vector<double> v(C);
          double s = 0.0;
          for (auto& e : v) s += (e = rng.uniform() < 0.15 ? 0.0 : rng.uniform());
          if (s == 0.0) v[0] = s = 1.0;
          for (std::size_t k = 0; k < C; ++k) t.at(0, k, y, x) = static_cast<float>(v[k] / s);
        }
      return t;
    };
    float self_max = 0.0f, min_val = 0.0f;
    for (std::size_t i = 0; i < pairs; ++i) {
      const Tensor a = random_probs(4, 3, 3), b = random_probs(4, 3, 3);
      const Tensor self = ig_semseg(a, a), cross = ig_semseg(a, b);
      for (float v : self.values()) self_max = std::max(self_max, std::fabs(v));
      for (float v : cross.values()) min_val = std::min(min_val, v);
    }
    const Tensor curr(Shape{1, 2, 1, 1}, {1.0f, 0.0f}), prev(Shape{1, 2, 1, 1}, {0.5f, 0.5f});
    const double ln2 = std::fabs(ig_semseg(curr, prev)[0] - std::log(2.0));
    os << "self max " << self_max << ", ln2 error " << ln2 << ", min over " << pairs << " pairs " << min_val;
    return self_max == 0.0f && ln2 <= 1e-6 && min_val >= 0.0f;
  });
}

CheckResult cost_tracking(double tau, std::uint64_t seed) {
  char name[48];
  std::snprintf(name, sizeof name, "cost-target tracking tau=%.1f", tau);
  return timed(name, [&](std::ostringstream& os) {
    const BlockGrid& g = desk_grid();
    PolicyConfig cfg;
    cfg.target = tau;
    bool ok = true;
    // Saturated head biases start the policy far from tau in both directions.
    for (float bias : {-3.0f, 3.0f}) {
      OnlinePolicy policy(8, cfg, seed);
      policy.net().head().bias.fill(bias);
      Rng rng(seed + 1000);
      const Tensor frame = random_frame(rng);
      Tensor state = frame;
      const Tensor output = Tensor::nchw(1, 1, 64, 128);
      const Tensor zero_ig = Tensor::nchw(1, 1, g.rows, g.cols);
      ActionGrid actions = ActionGrid::filled(g, 1);
      long settled = 1;
      double lo = 1.0, hi = 0.0;
      for (long t = 1; t <= 600; ++t) {
        const Tensor s = assemble_state(frame, state, output, actions, g);
        const auto cache = policy.evaluate(s, g);
        actions = sample_actions(cache.probs, seed, t);
        commit_blocks(frame, actions, g, state);
        const double m = policy.learn(cache, actions, zero_ig).moving_avg;
        if (std::abs(m - tau) > 0.1) settled = t + 1;
        if (t > 300) {
          lo = std::min(lo, m);
          hi = std::max(hi, m);
        }
      }
      ok &= settled <= 300;
      os << "bias " << bias << " settled from frame " << settled << ", 301-600 in [" << lo << ", " << hi << "]; ";
    }
    return ok;
  });
}

std::vector<CheckResult> invariant_suite() {
  std::vector<CheckResult> out{full_execution_equivalence(), copy_purity(), mac_linearity(), reinforce_gradient(),
                               ig_reference(), kl_properties()};
  for (double tau : {0.3, 0.5, 0.7}) out.push_back(cost_tracking(tau));
  return out;
}

SteeringResult importance_steering(const RunConfig& cfg, bool online_evaluation) {
  Pipeline pipe(cfg);
  pipe.warmup(make_clips(cfg, cfg.warmup_clips, 0));
  pipe.set_online(online_evaluation);
  const auto test = make_clips(cfg, cfg.clips, 1);
  const auto runs = evaluate_clips(pipe, test);
  std::vector<ClipResult> rnd;
  for (std::size_t i = 0; i < test.size(); ++i) {
    rnd.push_back(pipe.run_clip(test[i], static_cast<long>(i),
                                ActionOverride::with_counts(executed_counts(runs[i]), mix64(cfg.seed ^ 0x7a11ULL))));
  }
  const RunSummary s = summarize(runs, 0, 0), r = summarize(rnd, 0, 0);
  SteeringResult out;
  out.overlap = s.mean_overlap;
  out.random_overlap = r.mean_overlap;
  out.ratio = r.mean_overlap > 0.0 ? s.mean_overlap / r.mean_overlap : 0.0;
  out.executed_fraction = s.mean_sparse_executed_fraction;
  return out;
}

}  // namespace blockprop::checks
