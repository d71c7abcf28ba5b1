#pragma once

#include <cstdint>

namespace karm {

struct AnalysisParams {
    int arm_count = 5;          // K
    int rounds_needed = 50;     // R, warm-up included (R >= 2)
    double time_per_round = 1;  // t
    double greedy_hit_prob = 1; // p, chance the objective picks the target
    double epsilon = 0.0;
    int preselect_m = 3;        // m
};

/// (1-eps)*p + eps/K — per-round probability the target arm is scheduled.
double scheduled_prob(const AnalysisParams& p);

/// 2Kt + (R-2)t / p_s. Throws when p_s == 0.
double expected_time_karm(const AnalysisParams& p);

/// (K+1)Rt / 2 — fixed-order exhaustive scan.
double expected_time_nc(const AnalysisParams& p);

/// 2Kt + (m+1)(R-2)t / 2, conditioned on the target surviving pre-selection.
double expected_time_preselect(const AnalysisParams& p);

struct SimulationResult {
    double mean_time = 0.0;
    double variance = 0.0;
    double mean_selective_rounds = 0.0;
    double mean_failures = 0.0;
    std::int64_t trials = 0;
};

/// Monte-Carlo of the scheduling process: a 2Kt warm-up charge, then
/// Bernoulli(p_s) per selective round until the target accrues R-2 rounds.
/// Per-trial RNG streams derive from seed + trial index, so the result is
/// independent of evaluation order.
SimulationResult simulate_schedule(const AnalysisParams& p, std::int64_t trials,
                                   std::uint64_t seed);

}  // namespace karm
