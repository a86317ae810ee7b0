#include "blockprop/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "blockprop/rng.hpp"
#include "json.hpp"

namespace blockprop {

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::string tau_label(const char* prefix, double tau) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%stau=%.2f", prefix, tau);
  return buf;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw Error("spearman: length mismatch");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

BenchRow bench_row(std::string label, double tau, const std::vector<ClipResult>& runs, std::size_t updates) {
  const RunSummary s = summarize(runs, 0, updates);
  BenchRow r;
  r.label = std::move(label);
  r.tau = tau;
  r.executed_fraction = s.mean_sparse_executed_fraction;
  r.metric = s.mean_metric;
  r.overlap = s.mean_overlap;
  r.macs_task = s.mean_macs_task;
  r.macs_policy = s.mean_macs_policy;
  r.policy_updates = updates;
  if (runs.size() > 1) {
    double var = 0.0;
    for (const auto& c : runs) {
      double m = 0.0;
      for (const auto& f : c.records) m += f.metric / static_cast<double>(c.records.size());
      var += (m - s.mean_metric) * (m - s.mean_metric);
    }
    var /= static_cast<double>(runs.size() - 1);
    r.metric_stderr = std::sqrt(var / static_cast<double>(runs.size()));
  }
  return r;
}

BenchTable run_bench(const RunConfig& cfg, const std::vector<double>& taus) {
  if (taus.empty()) throw Error("bench: empty tau sweep");
  const auto train = make_clips(cfg, cfg.warmup_clips, 0);
  const auto test = make_clips(cfg, cfg.clips, 1);
  BenchTable t;
  {
    Pipeline full(cfg);
    t.full = bench_row("full", 1.0, evaluate_clips(full, test, ActionOverride::full()), 0);
  }
  std::vector<double> fractions, metrics;
  for (double tau : taus) {
    RunConfig c = cfg;
    c.policy.target = tau;
    Pipeline pipe(c);
    if (c.warmup_clips) pipe.warmup(train);
    const auto runs = evaluate_clips(pipe, test);
    t.policy.push_back(bench_row(tau_label("", tau), tau, runs, pipe.policy().updates()));
    std::vector<ClipResult> rnd;
    for (std::size_t i = 0; i < test.size(); ++i) {
      rnd.push_back(pipe.run_clip(test[i], static_cast<long>(i),
                                  ActionOverride::with_counts(executed_counts(runs[i]), mix64(c.seed ^ 0x7a11ULL))));
    }
    t.random.push_back(bench_row(tau_label("random@", tau), tau, rnd, 0));
    fractions.push_back(t.policy.back().executed_fraction);
    metrics.push_back(t.policy.back().metric);
  }
  t.spearman_fraction_metric = spearman(fractions, metrics);
  t.spearman_tau_fraction = spearman(taus, fractions);
  return t;
}

std::string bench_csv(const BenchTable& t) {
  std::ostringstream os;
  os << "label,tau,executed_fraction,metric,metric_stderr,overlap,macs_task,macs_policy\n";
  const auto row = [&](const BenchRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.2f,%.6f,%.6f,%.6f,%.6f,%.1f,%.1f\n", r.label.c_str(), r.tau,
                  r.executed_fraction, r.metric, r.metric_stderr, r.overlap, r.macs_task, r.macs_policy);
    os << buf;
  };
  row(t.full);
  for (const auto& r : t.policy) row(r);
  for (const auto& r : t.random) row(r);
  return os.str();
}

std::string bench_json(const BenchTable& t, const RunConfig& cfg) {
  using nlohmann::ordered_json;
  const auto row = [](const BenchRow& r) {
    ordered_json j;
    j["label"] = r.label;
    j["tau"] = r.tau;
    j["executed_fraction"] = r.executed_fraction;
    j["metric"] = r.metric;
    j["metric_stderr"] = r.metric_stderr;
    j["overlap"] = r.overlap;
    j["macs_task"] = r.macs_task;
    j["macs_policy"] = r.macs_policy;
    j["policy_updates"] = r.policy_updates;
    return j;
  };
  ordered_json j;
  j["schema"] = 1;
  j["task"] = task_name(cfg.task);
  j["seed"] = cfg.seed;
  j["warmup_clips"] = cfg.warmup_clips;
  j["clips"] = cfg.clips;
  j["full"] = row(t.full);
  j["policy"] = ordered_json::array();
  for (const auto& r : t.policy) j["policy"].push_back(row(r));
  j["random"] = ordered_json::array();
  for (const auto& r : t.random) j["random"].push_back(row(r));
  j["spearman_fraction_metric"] = t.spearman_fraction_metric;
  j["spearman_tau_fraction"] = t.spearman_tau_fraction;
  return j.dump(2);
}

}  // namespace blockprop
