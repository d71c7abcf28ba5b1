// Python bindings for the scanning pipeline: forge a zoo, scan models,
// score verdicts, and evaluate the expected-time analysis.

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "karm/analysis.hpp"
#include "karm/baselines.hpp"
#include "karm/forge.hpp"
#include "karm/metrics.hpp"
#include "karm/scanner.hpp"

namespace py = pybind11;
using namespace karm;

namespace {

ScanReport scan_model_file(const std::string& model_path, const SyntheticSpec& dataset_spec,
                           const SchedulerConfig& sched, const OptimizerConfig& opt,
                           const PreScreenConfig& pre) {
    Model model = load_model(model_path);
    LabeledDataset data = generate_dataset(dataset_spec);
    return scan(model, data, sched, opt, pre);
}

ScanReport scan_model_file_nc(const std::string& model_path, const SyntheticSpec& dataset_spec,
                              int rounds_per_arm, double tau, const OptimizerConfig& opt) {
    Model model = load_model(model_path);
    LabeledDataset data = generate_dataset(dataset_spec);
    auto arms = enumerate_arms(model.num_classes, ArmMode::Both);
    return scan_nc(model, data, arms, rounds_per_arm, tau, opt);
}

}  // namespace

PYBIND11_MODULE(_karm, m) {
    m.doc() = "k-arm backdoor scanning toolkit";

    py::class_<InputShape>(m, "InputShape")
        .def(py::init<>())
        .def_readwrite("channels", &InputShape::channels)
        .def_readwrite("height", &InputShape::height)
        .def_readwrite("width", &InputShape::width);

    py::class_<SyntheticSpec>(m, "SyntheticSpec")
        .def(py::init<>())
        .def_readwrite("num_classes", &SyntheticSpec::num_classes)
        .def_readwrite("input_shape", &SyntheticSpec::input_shape)
        .def_readwrite("samples_per_class", &SyntheticSpec::samples_per_class)
        .def_readwrite("background_noise_std", &SyntheticSpec::background_noise_std)
        .def_readwrite("seed", &SyntheticSpec::seed);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("epochs", &TrainConfig::epochs)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("learning_rate", &TrainConfig::learning_rate);

    py::class_<ForgeCounts>(m, "ForgeCounts")
        .def(py::init<>())
        .def_readwrite("n_clean", &ForgeCounts::n_clean)
        .def_readwrite("n_universal", &ForgeCounts::n_universal)
        .def_readwrite("n_label_specific", &ForgeCounts::n_label_specific)
        .def_readwrite("n_adaptive", &ForgeCounts::n_adaptive)
        .def_readwrite("adaptive_coefficient", &ForgeCounts::adaptive_coefficient);

    py::class_<ForgeConfig>(m, "ForgeConfig")
        .def(py::init<>())
        .def_readwrite("dataset", &ForgeConfig::dataset)
        .def_readwrite("train", &ForgeConfig::train)
        .def_readwrite("poison_fraction", &ForgeConfig::poison_fraction)
        .def_readwrite("patch_side", &ForgeConfig::patch_side);

    py::class_<ZooEntry>(m, "ZooEntry")
        .def_readonly("model_id", &ZooEntry::model_id)
        .def_readonly("model_path", &ZooEntry::model_path)
        .def_readonly("is_trojaned", &ZooEntry::is_trojaned)
        .def_readonly("clean_accuracy", &ZooEntry::clean_accuracy)
        .def_readonly("attack_success_rate", &ZooEntry::attack_success_rate);

    py::class_<ZooManifest>(m, "ZooManifest")
        .def_readonly("dataset_spec", &ZooManifest::dataset_spec)
        .def_readonly("entries", &ZooManifest::entries);

    py::class_<OptimizerConfig>(m, "OptimizerConfig")
        .def(py::init<>())
        .def_readwrite("alpha", &OptimizerConfig::alpha)
        .def_readwrite("asr_threshold", &OptimizerConfig::asr_threshold)
        .def_readwrite("epochs_per_round", &OptimizerConfig::epochs_per_round)
        .def_readwrite("learning_rate", &OptimizerConfig::learning_rate);

    py::enum_<ArmMode>(m, "ArmMode")
        .value("BOTH", ArmMode::Both)
        .value("UNIVERSAL_ONLY", ArmMode::UniversalOnly)
        .value("PAIRS_ONLY", ArmMode::PairsOnly);

    py::class_<SchedulerConfig>(m, "SchedulerConfig")
        .def(py::init<>())
        .def_readwrite("epsilon", &SchedulerConfig::epsilon)
        .def_readwrite("beta", &SchedulerConfig::beta)
        .def_readwrite("tau", &SchedulerConfig::tau)
        .def_readwrite("warmup_rounds", &SchedulerConfig::warmup_rounds)
        .def_readwrite("max_rounds", &SchedulerConfig::max_rounds)
        .def_readwrite("rng_seed", &SchedulerConfig::rng_seed)
        .def_readwrite("symmetric", &SchedulerConfig::symmetric)
        .def_readwrite("arm_mode", &SchedulerConfig::arm_mode)
        .def_readwrite("max_samples_per_arm", &SchedulerConfig::max_samples_per_arm);

    py::class_<PreScreenConfig>(m, "PreScreenConfig")
        .def(py::init<>())
        .def_readwrite("gamma_pct", &PreScreenConfig::gamma_pct)
        .def_readwrite("theta_pct_universal", &PreScreenConfig::theta_pct_universal)
        .def_readwrite("theta_pct_pair", &PreScreenConfig::theta_pct_pair);

    py::class_<ArmSummary>(m, "ArmSummary")
        .def_readonly("id", &ArmSummary::id)
        .def_readonly("victim", &ArmSummary::victim)
        .def_readonly("target", &ArmSummary::target);

    py::class_<ScanReport>(m, "ScanReport")
        .def_readonly("model_id", &ScanReport::model_id)
        .def_readonly("scanner_kind", &ScanReport::scanner_kind)
        .def_readonly("trojaned", &ScanReport::trojaned)
        .def_readonly("trojan_score", &ScanReport::trojan_score)
        .def_readonly("min_trigger_size", &ScanReport::min_trigger_size)
        .def_readonly("winning_arm", &ScanReport::winning_arm)
        .def_readonly("arms_before_prescreen", &ScanReport::arms_before_prescreen)
        .def_readonly("arms_after_prescreen", &ScanReport::arms_after_prescreen)
        .def_readonly("total_rounds", &ScanReport::total_rounds)
        .def_readonly("total_epochs", &ScanReport::total_epochs)
        .def_readonly("tau", &ScanReport::tau);

    py::class_<ModelRow>(m, "ModelRow")
        .def(py::init([](std::string id, bool truth, double score, bool verdict, double t) {
                 return ModelRow{std::move(id), truth, score, verdict, t};
             }),
             py::arg("model_id"), py::arg("ground_truth_trojaned"), py::arg("trojan_score"),
             py::arg("verdict_trojaned"), py::arg("scan_time") = 0.0)
        .def_readonly("model_id", &ModelRow::model_id)
        .def_readonly("ground_truth_trojaned", &ModelRow::ground_truth_trojaned)
        .def_readonly("trojan_score", &ModelRow::trojan_score)
        .def_readonly("verdict_trojaned", &ModelRow::verdict_trojaned)
        .def_readonly("scan_time", &ModelRow::scan_time);

    py::class_<DetectionMetrics>(m, "DetectionMetrics")
        .def_readonly("accuracy", &DetectionMetrics::accuracy)
        .def_readonly("roc_auc", &DetectionMetrics::roc_auc)
        .def_readonly("cross_entropy", &DetectionMetrics::cross_entropy);

    py::class_<AnalysisParams>(m, "AnalysisParams")
        .def(py::init<>())
        .def_readwrite("arm_count", &AnalysisParams::arm_count)
        .def_readwrite("rounds_needed", &AnalysisParams::rounds_needed)
        .def_readwrite("time_per_round", &AnalysisParams::time_per_round)
        .def_readwrite("greedy_hit_prob", &AnalysisParams::greedy_hit_prob)
        .def_readwrite("epsilon", &AnalysisParams::epsilon)
        .def_readwrite("preselect_m", &AnalysisParams::preselect_m);

    py::class_<SimulationResult>(m, "SimulationResult")
        .def_readonly("mean_time", &SimulationResult::mean_time)
        .def_readonly("variance", &SimulationResult::variance)
        .def_readonly("mean_selective_rounds", &SimulationResult::mean_selective_rounds)
        .def_readonly("mean_failures", &SimulationResult::mean_failures)
        .def_readonly("trials", &SimulationResult::trials);

    m.def("forge_zoo", &forge_zoo, py::arg("counts"), py::arg("config"), py::arg("seed"),
          py::arg("out_dir"), "Train a zoo of clean and trojaned models under out_dir.");
    m.def("save_manifest", &save_manifest, py::arg("manifest"), py::arg("path"));
    m.def("load_manifest", &load_manifest, py::arg("path"));

    m.def("scan_model_file", &scan_model_file, py::arg("model_path"), py::arg("dataset_spec"),
          py::arg("scheduler") = SchedulerConfig{}, py::arg("optimizer") = OptimizerConfig{},
          py::arg("prescreen") = PreScreenConfig{},
          "Multi-armed scan of one saved model against its zoo's clean dataset.");
    m.def("scan_model_file_nc", &scan_model_file_nc, py::arg("model_path"),
          py::arg("dataset_spec"), py::arg("rounds_per_arm") = 6, py::arg("tau") = 40.0,
          py::arg("optimizer") = OptimizerConfig{},
          "Exhaustive fixed-order scan of one saved model.");

    m.def("report_to_json", &report_to_json, py::arg("report"));
    m.def("trojan_score_from_size", &trojan_score_from_size, py::arg("min_trigger_size"),
          py::arg("tau"));
    m.def("calibrate_tau", &calibrate_tau, py::arg("trojaned_sizes"), py::arg("clean_sizes"));

    m.def("compute_metrics", &compute_metrics, py::arg("rows"));
    m.def("roc_auc", &roc_auc, py::arg("trojaned_scores"), py::arg("clean_scores"));

    m.def("scheduled_prob", &scheduled_prob, py::arg("params"));
    m.def("expected_time_karm", &expected_time_karm, py::arg("params"));
    m.def("expected_time_nc", &expected_time_nc, py::arg("params"));
    m.def("expected_time_preselect", &expected_time_preselect, py::arg("params"));
    m.def("simulate_schedule", &simulate_schedule, py::arg("params"), py::arg("trials"),
          py::arg("seed"));
}
