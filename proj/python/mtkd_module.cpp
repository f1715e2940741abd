#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mtkd/checkpoint.hpp"
#include "mtkd/harness.hpp"

namespace py = pybind11;
using namespace mtkd;

namespace {

// Checkpoints cross the boundary as [(name, shape, values), ...].
using PyTensors = std::vector<std::tuple<std::string, std::vector<std::size_t>, std::vector<float>>>;

PyTensors to_py(const NamedTensors& ts) {
  PyTensors out;
  out.reserve(ts.size());
  for (const auto& [name, t] : ts) out.emplace_back(name, t.shape, t.values);
  return out;
}

NamedTensors from_py(const PyTensors& ts) {
  NamedTensors out;
  out.reserve(ts.size());
  for (const auto& [name, shape, values] : ts) out.emplace_back(name, Tensor(shape, values));
  return out;
}

}  // namespace

PYBIND11_MODULE(_mtkd, m) {
  m.doc() = "multi-teacher knowledge-distillation workbench";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<IntegrityError>(m, "IntegrityError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  py::enum_<TaskKind>(m, "TaskKind")
      .value("SENT2", TaskKind::Sent2)
      .value("NLI2", TaskKind::Nli2)
      .value("TOPIC18", TaskKind::Topic18);
  py::enum_<WeightingMode>(m, "WeightingMode")
      .value("LOSS_WEIGHTED", WeightingMode::LossWeighted)
      .value("UNIFORM", WeightingMode::Uniform)
      .value("SINGLE", WeightingMode::Single)
      .value("ENSEMBLE_AVERAGE", WeightingMode::EnsembleAverage);
  py::enum_<StudentInitScheme>(m, "StudentInitScheme")
      .value("FIRST_K", StudentInitScheme::FirstK)
      .value("LAST_K", StudentInitScheme::LastK)
      .value("SKIP", StudentInitScheme::Skip);

  py::class_<Example>(m, "Example")
      .def(py::init<>())
      .def_readwrite("ids", &Example::ids)
      .def_readwrite("label", &Example::label)
      .def("__repr__", [](const Example& e) {
        return "Example(label=" + std::to_string(e.label) + ", len=" +
               std::to_string(e.ids.size()) + ")";
      });

  py::class_<TaskSpec>(m, "TaskSpec")
      .def(py::init<>())
      .def_readwrite("kind", &TaskSpec::kind)
      .def_readwrite("num_classes", &TaskSpec::num_classes)
      .def_readwrite("n_train", &TaskSpec::n_train)
      .def_readwrite("n_dev", &TaskSpec::n_dev)
      .def_readwrite("n_test", &TaskSpec::n_test)
      .def_readwrite("vocab_size", &TaskSpec::vocab_size)
      .def_readwrite("max_seq_len", &TaskSpec::max_seq_len)
      .def_readwrite("noise_rate", &TaskSpec::noise_rate)
      .def_readwrite("imbalance", &TaskSpec::imbalance)
      .def_readwrite("seed", &TaskSpec::seed)
      .def("validate", &TaskSpec::validate);

  py::class_<SplitDatasets>(m, "SplitDatasets")
      .def_readwrite("train", &SplitDatasets::train)
      .def_readwrite("dev", &SplitDatasets::dev)
      .def_readwrite("test", &SplitDatasets::test);

  m.def("gen_synthetic", &gen_synthetic, py::arg("spec"));
  m.def("recover_label", &recover_label, py::arg("spec"), py::arg("example"));
  m.def("dataset_hash", &dataset_hash, py::arg("splits"));
  m.def("save_dataset", &save_dataset, py::arg("path"), py::arg("data"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("save_manifest", &save_manifest, py::arg("path"), py::arg("spec"));
  m.def("load_manifest", &load_manifest, py::arg("path"));

  py::class_<EncoderConfig>(m, "EncoderConfig")
      .def(py::init<>())
      .def_readwrite("vocab_size", &EncoderConfig::vocab_size)
      .def_readwrite("max_seq_len", &EncoderConfig::max_seq_len)
      .def_readwrite("hidden_dim", &EncoderConfig::hidden_dim)
      .def_readwrite("num_heads", &EncoderConfig::num_heads)
      .def_readwrite("ffn_dim", &EncoderConfig::ffn_dim)
      .def_readwrite("num_layers", &EncoderConfig::num_layers)
      .def_readwrite("dropout", &EncoderConfig::dropout);

  py::class_<DistillSpec>(m, "DistillSpec")
      .def(py::init<>())
      .def_readwrite("num_teachers", &DistillSpec::num_teachers)
      .def_readwrite("student_layers", &DistillSpec::student_layers)
      .def_readwrite("layer_ratio", &DistillSpec::layer_ratio)
      .def_readwrite("temperature", &DistillSpec::temperature)
      .def_readwrite("use_hidden", &DistillSpec::use_hidden)
      .def_readwrite("use_distill", &DistillSpec::use_distill)
      .def_readwrite("use_task", &DistillSpec::use_task)
      .def_readwrite("weighting", &DistillSpec::weighting)
      .def_readwrite("single_index", &DistillSpec::single_index)
      .def_readwrite("student_init", &DistillSpec::student_init)
      .def("validate", &DistillSpec::validate);

  m.def("map_layer", &map_layer, py::arg("student_layer"), py::arg("ratio"),
        py::arg("student_layers"));
  m.def("teacher_weight", &teacher_weight, py::arg("gold_onehot"), py::arg("teacher_probs"));
  m.def("softmax_values", &softmax_values, py::arg("logits"), py::arg("temperature") = 1.0);
  m.def("cross_entropy_value", &cross_entropy_value, py::arg("target"), py::arg("pred"));

  m.def("accuracy", &accuracy, py::arg("preds"), py::arg("golds"));
  m.def("macro_f1", &macro_f1, py::arg("preds"), py::arg("golds"), py::arg("num_classes"));

  m.def("save_checkpoint",
        [](const std::string& path, const PyTensors& ts) { save_checkpoint(path, from_py(ts)); },
        py::arg("path"), py::arg("tensors"));
  m.def("load_checkpoint",
        [](const std::string& path) { return to_py(load_checkpoint(path)); }, py::arg("path"));

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<>())
      .def_readwrite("task", &RunConfig::task)
      .def_readwrite("teacher", &RunConfig::teacher)
      .def_readwrite("distill", &RunConfig::distill)
      .def_readwrite("pool_query_dim", &RunConfig::pool_query_dim)
      .def_readwrite("teacher_lr", &RunConfig::teacher_lr)
      .def_readwrite("student_lr", &RunConfig::student_lr)
      .def_readwrite("pretrain_epochs", &RunConfig::pretrain_epochs)
      .def_readwrite("cofinetune_epochs", &RunConfig::cofinetune_epochs)
      .def_readwrite("distill_epochs", &RunConfig::distill_epochs)
      .def_readwrite("patience", &RunConfig::patience)
      .def_readwrite("batch_size", &RunConfig::batch_size)
      .def_readwrite("repeats", &RunConfig::repeats)
      .def_readwrite("master_seed", &RunConfig::master_seed)
      .def_readwrite("out_dir", &RunConfig::out_dir)
      .def_readwrite("cofinetune", &RunConfig::cofinetune)
      .def_readwrite("distill_fraction", &RunConfig::distill_fraction)
      .def_readwrite("teacher_shard_fraction", &RunConfig::teacher_shard_fraction)
      .def_readwrite("teacher_token_dropout", &RunConfig::teacher_token_dropout)
      .def_readwrite("noisy_teacher", &RunConfig::noisy_teacher)
      .def_readwrite("noisy_teacher_rate", &RunConfig::noisy_teacher_rate)
      .def("student_config", &RunConfig::student_config)
      .def("validate", &RunConfig::validate);

  m.def("load_run_config", &load_run_config, py::arg("path"));
  m.def("save_run_config", &save_run_config, py::arg("path"), py::arg("config"));
  m.def("serialize_run_config", &serialize_run_config, py::arg("config"));
  m.def("config_hash", &config_hash, py::arg("config"));

  py::class_<EpochRow>(m, "EpochRow")
      .def_readonly("epoch", &EpochRow::epoch)
      .def_readonly("split", &EpochRow::split)
      .def_readonly("accuracy", &EpochRow::accuracy)
      .def_readonly("macro_f1", &EpochRow::macro_f1)
      .def_readonly("loss_task", &EpochRow::loss_task)
      .def_readonly("loss_hid", &EpochRow::loss_hid)
      .def_readonly("loss_dis", &EpochRow::loss_dis);

  py::class_<RunRecord>(m, "RunRecord")
      .def_readonly("run_id", &RunRecord::run_id)
      .def_readonly("variant", &RunRecord::variant)
      .def_readonly("seed", &RunRecord::seed)
      .def_readonly("config_digest", &RunRecord::config_digest)
      .def_readonly("data_hash", &RunRecord::data_hash)
      .def_readonly("rows", &RunRecord::rows)
      .def_readonly("best_epoch", &RunRecord::best_epoch)
      .def_readonly("test_accuracy", &RunRecord::test_accuracy)
      .def_readonly("test_macro_f1", &RunRecord::test_macro_f1)
      .def_readonly("wall_clock_s", &RunRecord::wall_clock_s)
      .def_readonly("failed", &RunRecord::failed)
      .def_readonly("fail_phase", &RunRecord::fail_phase)
      .def("__repr__", [](const RunRecord& r) {
        return "RunRecord(" + r.run_id + ", test_accuracy=" + std::to_string(r.test_accuracy) + ")";
      });

  m.def("teacher_combos", &teacher_combos, py::arg("num_teachers"));
  m.def("ablation_variants", &ablation_variants, py::arg("num_teachers"));

  py::class_<Workbench>(m, "Workbench")
      .def(py::init<RunConfig>(), py::arg("config"))
      .def("run_single",
           [](Workbench& wb, const std::string& variant, std::uint64_t seed) {
             return wb.run_single(variant, seed);
           },
           py::arg("variant"), py::arg("seed"))
      .def("run_repeats", &Workbench::run_repeats, py::arg("variant"))
      .def("run_ablations", &Workbench::run_ablations)
      .def("teacher_dev_accuracy", &Workbench::teacher_dev_accuracy, py::arg("seed"),
           py::arg("shared"));

  m.def("metrics_csv", &metrics_csv, py::arg("records"));
  m.def("report_csv", &report_csv, py::arg("records"));
  m.def("report_markdown", &report_markdown, py::arg("records"));
  m.def("summarize_metrics_csv", &summarize_metrics_csv, py::arg("csv_text"));
  m.def("emit_report", &emit_report, py::arg("records"), py::arg("dir"));
}
