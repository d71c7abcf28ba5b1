#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "karm/model.hpp"

namespace karm {

struct SyntheticSpec {
    int num_classes = 5;
    InputShape input_shape;
    int samples_per_class = 20;
    double background_noise_std = 0.05;
    std::uint64_t seed = 0;
    // salt for the noise stream only; class signatures depend on `seed` alone,
    // so held-out draws share signatures with training draws
    std::uint64_t noise_salt = 0xda7a;
};

struct PatchSpec {
    int row = 0;
    int col = 0;
    int side = 3;
    std::vector<double> pattern;  // C*side*side values in [0,1]
};

struct AttackSpec {
    enum class Kind { Universal, LabelSpecific, Adaptive };
    Kind kind = Kind::Universal;
    int target_label = 0;
    int victim_label = -1;  // required for LabelSpecific / Adaptive
    PatchSpec patch;
    double poison_fraction = 0.1;
    double adaptive_coefficient = 0.0;
    std::uint64_t seed = 0;
};

struct GroundTruthTrigger {
    std::vector<double> mask;     // (C,H,W) flat, {0,1}
    std::vector<double> pattern;  // (C,H,W) flat
};

struct ZooEntry {
    std::string model_id;
    std::string model_path;  // relative to the manifest
    bool is_trojaned = false;
    std::optional<AttackSpec> attack;
    std::optional<GroundTruthTrigger> ground_truth_trigger;
    double clean_accuracy = 0.0;
    double attack_success_rate = 0.0;
    std::uint64_t train_seed = 0;
};

struct ZooManifest {
    SyntheticSpec dataset_spec;
    std::vector<ZooEntry> entries;
};

/// Deterministic per-class signatures plus gaussian background noise,
/// clipped to [0,1].
LabeledDataset generate_dataset(const SyntheticSpec& spec);

/// Class signature image (C,H,W flat) for one class; noise-free.
std::vector<double> class_signature(const SyntheticSpec& spec, int cls);

GroundTruthTrigger trigger_from_patch(const PatchSpec& patch, const InputShape& in);

/// Appends stamped-and-relabeled copies of max(1, floor(fraction*eligible))
/// eligible samples. Universal: eligible = every class != target;
/// label-specific/adaptive: victim class only. Originals retained.
LabeledDataset poison(const LabeledDataset& dataset, const AttackSpec& attack,
                      const InputShape& in);

/// Stamps the ground-truth trigger on an image (out-of-graph, plain data).
Tensor stamp_raw(const Tensor& image, const GroundTruthTrigger& trigger);

struct ForgeCounts {
    int n_clean = 0;
    int n_universal = 0;
    int n_label_specific = 0;
    int n_adaptive = 0;
    double adaptive_coefficient = 10.0;
};

struct ForgeConfig {
    SyntheticSpec dataset;
    TrainConfig train;
    double poison_fraction = 0.1;
    int patch_side = 3;
    // label-preserving copies stamped with random patches, per clean sample;
    // hardens every model against small incidental patches so that only the
    // deliberately poisoned trigger stays easy to reverse-engineer
    int augment_copies = 1;
};

/// Trains the full zoo and writes model files under `out_dir`; returns the
/// manifest (not yet written).
ZooManifest forge_zoo(const ForgeCounts& counts, const ForgeConfig& cfg,
                      std::uint64_t seed, const std::string& out_dir);

void save_manifest(const ZooManifest& manifest, const std::string& path);
ZooManifest load_manifest(const std::string& path);

}  // namespace karm
