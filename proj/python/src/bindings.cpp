#include <pybind11/pybind11.h>
#include <pybind11/numpy.h>
#include <pybind11/stl.h>

#include <sstream>

#include "egam/inference.hpp"
#include "egam/model.hpp"
#include "egam/oracles.hpp"
#include "egam/training.hpp"

namespace py = pybind11;
using namespace egam;

namespace {

py::array_t<double> tensor_to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  auto* dst = out.mutable_data();
  for (std::size_t i = 0; i < t.size(); ++i) dst[i] = t[i];
  return out;
}

py::dict cost_dict(const SolutionCost& c) {
  py::dict d;
  d["cost"] = c.cost;
  d["length"] = c.length;
  d["feasible"] = c.feasible;
  d["n_out"] = c.n_out;
  d["t_out"] = c.t_out;
  d["d_out"] = c.d_out;
  d["unvisited"] = c.unvisited;
  return d;
}

EgamConfig config_from_kwargs(const py::kwargs& kwargs) {
  EgamConfig cfg;
  for (auto item : kwargs) {
    const std::string key = py::str(item.first);
    const std::string value = py::str(item.second);
    std::string text = value;
    if (py::isinstance<py::bool_>(item.second)) text = item.second.cast<bool>() ? "true" : "false";
    if (!set_config_field(cfg, key, text)) throw Error("unknown model config key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Edge-aware graph attention policies for routing problems";

  auto& error = py::register_exception<Error>(m, "Error");
  py::register_exception<NumericalError>(m, "NumericalError", error.ptr());
  py::register_exception<DimensionError>(m, "DimensionError", error.ptr());
  py::register_exception<InvalidTransition>(m, "InvalidTransition", error.ptr());

  py::enum_<ProblemKind>(m, "Kind")
      .value("TSP", ProblemKind::TSP)
      .value("CVRP", ProblemKind::CVRP)
      .value("PCTSP", ProblemKind::PCTSP)
      .value("TSPTW", ProblemKind::TSPTW)
      .value("VRPTW", ProblemKind::VRPTW)
      .value("TSPDL", ProblemKind::TSPDL);
  m.def("parse_kind", &parse_kind);
  m.def("kind_name", &kind_name);

  py::class_<Instance>(m, "Instance")
      .def_property_readonly("kind", [](const Instance& i) { return i.kind; })
      .def_property_readonly("seed", [](const Instance& i) { return i.seed; })
      .def_property_readonly("coords", [](const Instance& i) { return i.coords; })
      .def_property_readonly("demand", [](const Instance& i) { return i.demand; })
      .def_property_readonly("tw", [](const Instance& i) { return i.tw; })
      .def_property_readonly("draft", [](const Instance& i) { return i.draft; })
      .def_property_readonly("prize", [](const Instance& i) { return i.prize; })
      .def_property_readonly("penalty", [](const Instance& i) { return i.penalty; })
      .def_property_readonly("threshold", [](const Instance& i) { return i.threshold; })
      .def("__len__", &Instance::size)
      .def("dist", &Instance::dist)
      .def("to_json", &instance_to_json)
      .def_static("from_json", &instance_from_json)
      .def("__repr__", [](const Instance& i) {
        return "<Instance " + kind_name(i.kind) + "-" + std::to_string(i.size()) + ">";
      });

  m.def("generate_instance", [](const std::string& kind, std::size_t n, std::uint64_t seed) {
    return generate_instance(parse_kind(kind), n, seed);
  }, py::arg("kind"), py::arg("n"), py::arg("seed"));
  m.def("generate_dataset", [](const std::string& kind, std::size_t n, std::size_t count, std::uint64_t seed) {
    return generate_dataset(parse_kind(kind), n, count, seed);
  }, py::arg("kind"), py::arg("n"), py::arg("count"), py::arg("seed"));
  m.def("read_dataset", &read_dataset_file);
  m.def("write_dataset", &write_dataset_file);
  m.def("dihedral_transform", &dihedral_transform, py::arg("instance"), py::arg("k"));
  m.def("node_features", [](const Instance& i) { return tensor_to_array(node_features(i)); });
  m.def("edge_features", [](const Instance& i) { return tensor_to_array(edge_features(i)); });
  m.def("solution_cost", [](const Instance& i, const std::vector<std::size_t>& seq) {
    return cost_dict(solution_cost(i, seq));
  }, py::arg("instance"), py::arg("sequence"));

  py::class_<Solution>(m, "Solution")
      .def_readonly("sequence", &Solution::sequence)
      .def_readonly("log_prob", &Solution::log_prob)
      .def_property_readonly("cost", [](const Solution& s) { return s.cost.cost; })
      .def_property_readonly("length", [](const Solution& s) { return s.cost.length; })
      .def_property_readonly("feasible", [](const Solution& s) { return s.cost.feasible; })
      .def("details", [](const Solution& s) { return cost_dict(s.cost); })
      .def("__repr__", [](const Solution& s) {
        std::ostringstream os;
        os << "<Solution cost=" << s.cost.cost << (s.cost.feasible ? "" : " infeasible") << ">";
        return os.str();
      });

  m.def("held_karp", &held_karp, py::call_guard<py::gil_scoped_release>());
  m.def("nearest_neighbor", [](const Instance& i) { return nearest_neighbor(i); });
  m.def("exhaustive", [](const Instance& i) { return exhaustive_constrained(i).best; },
        py::call_guard<py::gil_scoped_release>());
  m.def("reference_solution", [](const Instance& i, const std::string& method) {
    const Reference r = reference_solution(i, method);
    py::dict d;
    d["cost"] = r.cost;
    d["feasible"] = r.feasible;
    d["method"] = r.method;
    d["sequence"] = r.sequence;
    return d;
  }, py::arg("instance"), py::arg("method") = "auto");

  py::class_<Policy>(m, "Policy")
      .def(py::init([](const std::string& kind, std::uint64_t seed, const py::kwargs& kwargs) {
             return Policy(config_from_kwargs(kwargs), parse_kind(kind), seed);
           }),
           py::arg("kind"), py::arg("seed") = 1)
      .def_static("load", &load_checkpoint)
      .def("save", &save_checkpoint)
      .def_property_readonly("kind", &Policy::kind)
      .def_property_readonly("config", [](const Policy& p) { return p.config().to_text(); })
      .def_property_readonly("parameter_count", [](const Policy& p) { return p.params().scalar_count(); })
      .def("greedy", [](const Policy& p, const Instance& i) { return greedy_solve(p, i); },
           py::call_guard<py::gil_scoped_release>())
      .def("sample", [](const Policy& p, const Instance& i, std::size_t k, std::uint64_t seed) {
             return sample_solve(p, i, k, seed);
           }, py::arg("instance"), py::arg("k"), py::arg("seed") = 1, py::call_guard<py::gil_scoped_release>())
      .def("augmented", [](const Policy& p, const Instance& i, std::size_t aug, std::size_t n, std::uint64_t seed) {
             return augmented_solve(p, i, aug, n, seed);
           }, py::arg("instance"), py::arg("m") = 8, py::arg("n") = 20, py::arg("seed") = 1,
           py::call_guard<py::gil_scoped_release>())
      .def("solve", [](const Policy& p, const std::vector<Instance>& data, const std::string& mode, std::uint64_t seed,
                       std::size_t workers) {
             InferenceOptions opt;
             opt.workers = workers;
             return solve_dataset(p, data, parse_mode(mode), seed, opt);
           }, py::arg("instances"), py::arg("mode") = "greedy", py::arg("seed") = 1, py::arg("workers") = 1,
           py::call_guard<py::gil_scoped_release>())
      .def("log_prob", [](const Policy& p, const Instance& i, const std::vector<std::size_t>& seq) {
             return log_prob_of_tour(p, i, seq);
           }, py::arg("instance"), py::arg("sequence"));

  m.def("gradcheck", [](const std::string& kind, std::size_t n, std::size_t dm, std::size_t heads, std::uint64_t seed,
                        double h) {
    EgamConfig cfg;
    cfg.d_model = dm;
    cfg.heads = heads;
    cfg.d_key = dm / heads;
    cfg.d_ff = 2 * dm;
    cfg.encoder_layers = 2;
    cfg.validate();
    Policy policy(cfg, parse_kind(kind), seed);
    const Instance inst = generate_instance(policy.kind(), n, seed);
    const auto tour = rollout_one(policy, inst, Decoding::Sample, seed).sequence;
    auto params = policy.params().all();
    GradCheckResult r;
    {
      py::gil_scoped_release release;
      r = grad_check([&](Tape& tape) { return log_prob_of_tour_var(tape, policy, inst, tour); }, params, h,
                     Stencil::FivePoint);
    }
    py::dict d;
    d["max_rel_error"] = r.max_rel_error_active;
    d["literal_max_rel_error"] = r.max_rel_error;
    d["coordinates"] = r.coordinates;
    d["stationary"] = r.stationary;
    d["passed"] = r.passed(1e-5);
    return d;
  }, py::arg("kind") = "tsp", py::arg("n") = 5, py::arg("dm") = 8, py::arg("heads") = 2, py::arg("seed") = 3,
     py::arg("h") = 1e-3);

  m.def("train", [](const std::string& profile_name, const std::string& config_text, const std::string& out_dir,
                    const std::string& log_path) {
    RunConfig rc = profile(profile_name);
    apply_config_text(rc, config_text);
    rc.validate();
    std::vector<EpochStats> epochs;
    std::optional<Policy> trained;
    {
      py::gil_scoped_release release;
      Trainer trainer(rc);
      epochs = train(trainer, {out_dir, log_path, nullptr});
      trained = trainer.policy();
    }
    py::list stats;
    for (const auto& e : epochs) {
      py::dict d;
      d["epoch"] = e.epoch;
      d["mean_cost"] = e.mean_cost;
      d["grad_norm"] = e.grad_norm;
      d["feasible_rate"] = e.feasible_rate;
      d["skipped"] = e.skipped;
      d["validation_cost"] = e.validation_cost ? py::cast(*e.validation_cost) : py::none();
      stats.append(d);
    }
    return py::make_tuple(std::move(*trained), stats);
  }, py::arg("profile") = "toy", py::arg("config") = "", py::arg("out_dir") = "", py::arg("log_path") = "");
}
