#pragma once

#include "karm/scanner.hpp"

namespace karm {

struct BaselineConfig {
    enum class Kind { NC, NCPreSelect };
    Kind kind = Kind::NC;
    int preselect_m = 3;      // top-m by trigger size kept after initial rounds
    int initial_rounds = 2;   // matches the K-Arm warm-up
    int rounds_per_arm = 6;
};

/// Exhaustive NC-style scan: every arm in ascending index order gets
/// rounds_per_arm rounds; verdict via the smallest trigger vs tau.
/// No early termination: the round budget is exactly K * rounds_per_arm.
ScanReport scan_nc(const Model& model, const LabeledDataset& clean_samples,
                   const std::vector<Arm>& arms, int rounds_per_arm, double tau,
                   const OptimizerConfig& opt, int max_samples_per_arm = 20);

/// NC with pre-selection: initial_rounds everywhere, keep the m smallest
/// current triggers, finish those with rounds_per_arm - initial_rounds more.
ScanReport scan_preselect(const Model& model, const LabeledDataset& clean_samples,
                          const std::vector<Arm>& arms, const BaselineConfig& cfg, double tau,
                          const OptimizerConfig& opt, int max_samples_per_arm = 20);

}  // namespace karm
