#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "blockprop/bench.hpp"
#include "blockprop/checks.hpp"
#include "blockprop/pipeline.hpp"

namespace py = pybind11;
using namespace blockprop;

namespace {

using Array = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<float>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data(), t.data() + t.numel(), out.mutable_data());
  return out;
}

// Detections cross the boundary as (x1, y1, x2, y2, score, class_id) tuples.
using DetTuple = std::tuple<float, float, float, float, float, int>;

DetectionSet to_dets(const std::vector<DetTuple>& v) {
  DetectionSet out;
  for (const auto& [x1, y1, x2, y2, s, c] : v) {
    Detection d;
    d.box = {x1, y1, x2, y2};
    d.score = s;
    d.class_id = c;
    out.push_back(d);
  }
  return out;
}

std::vector<DetTuple> from_dets(const DetectionSet& d) {
  std::vector<DetTuple> out;
  for (const auto& x : d) out.emplace_back(x.box.x1, x.box.y1, x.box.x2, x.box.y2, x.score, x.class_id);
  return out;
}

ActionGrid to_actions(const py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>& a) {
  if (a.ndim() != 2) throw Error("actions must be a 2-d (rows, cols) array");
  ActionGrid g;
  g.rows = static_cast<std::size_t>(a.shape(0));
  g.cols = static_cast<std::size_t>(a.shape(1));
  g.values.assign(a.data(), a.data() + a.size());
  for (auto& v : g.values) v = v ? 1 : 0;
  return g;
}

py::array_t<std::uint8_t> from_actions(const ActionGrid& g) {
  py::array_t<std::uint8_t> out({static_cast<py::ssize_t>(g.rows), static_cast<py::ssize_t>(g.cols)});
  std::copy(g.values.begin(), g.values.end(), out.mutable_data());
  return out;
}

py::dict record_dict(const FrameRecord& r) {
  py::dict d;
  d["clip"] = r.clip;
  d["frame"] = r.frame;
  d["executed_fraction"] = r.executed_fraction;
  d["executed_blocks"] = r.executed_blocks;
  d["macs_task"] = r.macs_task;
  d["macs_policy"] = r.macs_policy;
  d["macs_ig"] = r.macs_ig;
  d["metric"] = r.metric;
  d["overlap"] = r.overlap ? py::object(py::float_(*r.overlap)) : py::object(py::none());
  d["loss"] = r.loss ? py::object(py::float_(*r.loss)) : py::object(py::none());
  d["ig_max"] = r.ig_max;
  return d;
}

struct PyClip {
  Clip clip;
};

}  // namespace

PYBIND11_MODULE(_blockprop, m) {
  m.doc() = "Block-sparse video inference runtime and block-selection policy";
  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def(
      "conv2d",
      [](const Array& x, const Array& w, const Array& b, std::size_t stride, std::size_t pad) {
        const Tensor wt = to_tensor(w);
        if (wt.rank() != 4) throw Error("conv2d: weight must be (out, in, kh, kw)");
        ConvSpec spec = ConvSpec::make(wt.dim(1), wt.dim(0), wt.dim(2), stride, pad);
        if (wt.dim(2) != wt.dim(3)) throw Error("conv2d: only square kernels are exposed");
        spec.weights = wt;
        spec.bias = to_tensor(b).reshaped({wt.dim(0)});
        return to_array(conv2d(to_tensor(x), spec));
      },
      py::arg("x"), py::arg("weight"), py::arg("bias"), py::arg("stride") = 1, py::arg("pad") = 0);

  m.def(
      "ig_detection",
      [](const std::vector<DetTuple>& curr, const std::vector<DetTuple>& prev, std::size_t h, std::size_t w) {
        return to_array(ig_detection(to_dets(curr), to_dets(prev), h, w));
      },
      py::arg("curr"), py::arg("prev"), py::arg("height"), py::arg("width"));
  m.def(
      "ig_semseg", [](const Array& c, const Array& p) { return to_array(ig_semseg(to_tensor(c), to_tensor(p))); },
      py::arg("curr"), py::arg("prev"));
  m.def(
      "block_maxpool",
      [](const Array& map, std::size_t block) {
        const Tensor t = to_tensor(map);
        require_rank4(t, "block_maxpool");
        return to_array(block_maxpool(t, BlockGrid::make(t.h(), t.w(), block)));
      },
      py::arg("ig_map"), py::arg("block_size"));

  m.def(
      "reinforce_loss",
      [](const Array& probs, py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> actions,
         const Array& rewards) {
        const ReinforceLoss l = reinforce_loss(to_tensor(probs), to_actions(actions), to_tensor(rewards));
        return py::make_tuple(l.loss, to_array(l.grad_logits));
      },
      py::arg("probs"), py::arg("actions"), py::arg("rewards"),
      "Loss -sum R log pi(a) and its gradient w.r.t. the logits; arrays are (1,1,rows,cols).");
  m.def(
      "sample_actions",
      [](const Array& probs, std::uint64_t seed, long frame) {
        return from_actions(sample_actions(to_tensor(probs), seed, frame));
      },
      py::arg("probs"), py::arg("seed"), py::arg("frame"));

  py::class_<PyClip>(m, "Clip")
      .def_property_readonly("frames",
                             [](const PyClip& c) {
                               py::list out;
                               for (const auto& f : c.clip.frames) out.append(to_array(f));
                               return out;
                             })
      .def_property_readonly("ground_truth",
                             [](const PyClip& c) {
                               py::list out;
                               for (const auto& frame : c.clip.gt) {
                                 py::list objs;
                                 for (const auto& g : frame)
                                   objs.append(py::make_tuple(g.object_id, g.box.x1, g.box.y1, g.box.x2, g.box.y2,
                                                              g.class_id));
                                 out.append(objs);
                               }
                               return out;
                             })
      .def("__len__", [](const PyClip& c) { return c.clip.frames.size(); })
      .def("save", [](const PyClip& c, const std::string& dir) { save_clip(dir, c.clip); });
  m.def(
      "generate_clip",
      [](std::uint64_t seed, std::size_t width, std::size_t height, std::size_t frames, std::size_t objects) {
        return PyClip{generate_clip(random_clip_spec(seed, width, height, frames, objects))};
      },
      py::arg("seed"), py::arg("width") = 128, py::arg("height") = 64, py::arg("frames") = 20,
      py::arg("objects") = 3);
  m.def(
      "load_clip", [](const std::string& dir) { return PyClip{load_clip(dir)}; }, py::arg("dir"));
  m.def(
      "oracle_detect", [](const Array& frame) { return from_dets(oracle_detect(to_tensor(frame))); },
      py::arg("frame_state"));
  m.def(
      "oracle_segment", [](const Array& frame) { return to_array(oracle_segment(to_tensor(frame))); },
      py::arg("frame_state"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_static(
          "parse",
          [](const std::string& text) {
            std::istringstream is(text);
            return parse_config(is);
          },
          py::arg("text"))
      .def("set", &set_config_value, py::arg("key"), py::arg("value"))
      .def("validate", &RunConfig::validate)
      .def("__str__", &format_config)
      .def_readwrite("width", &RunConfig::width)
      .def_readwrite("height", &RunConfig::height)
      .def_readwrite("frames", &RunConfig::frames)
      .def_readwrite("block_size", &RunConfig::block_size)
      .def_readwrite("seed", &RunConfig::seed)
      .def_readwrite("warmup_clips", &RunConfig::warmup_clips)
      .def_readwrite("clips", &RunConfig::clips)
      .def_property(
          "task", [](const RunConfig& c) { return task_name(c.task); },
          [](RunConfig& c, const std::string& n) { c.task = task_from_name(n); })
      .def_property(
          "tau", [](const RunConfig& c) { return c.policy.target; },
          [](RunConfig& c, double v) { c.policy.target = v; });

  py::class_<Pipeline>(m, "Pipeline")
      .def(py::init<RunConfig>(), py::arg("config"))
      .def_property_readonly("config", &Pipeline::config)
      .def("warmup",
           [](Pipeline& p, std::size_t clips) { p.warmup(make_clips(p.config(), clips, 0)); }, py::arg("clips"))
      .def("set_online", &Pipeline::set_online)
      .def_property_readonly("policy_updates", [](const Pipeline& p) { return p.policy().updates(); })
      .def(
          "run_clip",
          [](Pipeline& p, const PyClip& c, long index, std::optional<double> forced_fraction) {
            const ActionOverride ov =
                forced_fraction ? ActionOverride::with_fraction(*forced_fraction, 0) : ActionOverride{};
            const ClipResult r = p.run_clip(c.clip, index, ov);
            py::list records, actions;
            for (const auto& rec : r.records) records.append(record_dict(rec));
            for (const auto& a : r.actions) actions.append(from_actions(a));
            py::dict out;
            out["records"] = records;
            out["actions"] = actions;
            return out;
          },
          py::arg("clip"), py::arg("index") = 0, py::arg("forced_fraction") = py::none())
      .def(
          "evaluate_jsonl",
          [](Pipeline& p, std::size_t clips) {
            const auto results = evaluate_clips(p, make_clips(p.config(), clips, 1));
            std::ostringstream os;
            write_records_jsonl(os, results, false);
            return os.str();
          },
          py::arg("clips"), "Per-frame records of held-out clips as JSONL text.");

  m.def(
      "bench",
      [](const RunConfig& cfg, const std::vector<double>& taus) { return bench_json(run_bench(cfg, taus), cfg); },
      py::arg("config"), py::arg("taus"), "Tau sweep with baselines; returns the bench JSON document.");
  m.def("spearman", &spearman, py::arg("x"), py::arg("y"));
  m.def("selftest", [] {
    std::vector<std::tuple<std::string, bool, std::string>> out;
    for (const auto& r : checks::invariant_suite()) out.emplace_back(r.name, r.pass, r.detail);
    return out;
  });
}
