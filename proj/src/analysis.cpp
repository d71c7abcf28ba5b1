#include "karm/analysis.hpp"

#include <random>
#include <stdexcept>

namespace karm {

namespace {

void check(const AnalysisParams& p) {
    if (p.arm_count < 1) throw std::invalid_argument("analysis: K must be >= 1");
    if (p.rounds_needed < 2) throw std::invalid_argument("analysis: R must be >= 2");
    if (p.greedy_hit_prob < 0.0 || p.greedy_hit_prob > 1.0)
        throw std::invalid_argument("analysis: p must be in [0,1]");
    if (p.epsilon < 0.0 || p.epsilon >= 1.0)
        throw std::invalid_argument("analysis: epsilon must be in [0,1)");
}

}  // namespace

double scheduled_prob(const AnalysisParams& p) {
    check(p);
    return (1.0 - p.epsilon) * p.greedy_hit_prob + p.epsilon / p.arm_count;
}

double expected_time_karm(const AnalysisParams& p) {
    double ps = scheduled_prob(p);
    if (ps <= 0.0) throw std::domain_error("expected_time_karm: p_s is zero");
    return 2.0 * p.arm_count * p.time_per_round +
           (p.rounds_needed - 2) * p.time_per_round / ps;
}

double expected_time_nc(const AnalysisParams& p) {
    check(p);
    return (p.arm_count + 1) * p.rounds_needed * p.time_per_round / 2.0;
}

double expected_time_preselect(const AnalysisParams& p) {
    check(p);
    if (p.preselect_m < 1) throw std::invalid_argument("analysis: m must be >= 1");
    return 2.0 * p.arm_count * p.time_per_round +
           (p.preselect_m + 1) * (p.rounds_needed - 2) * p.time_per_round / 2.0;
}

SimulationResult simulate_schedule(const AnalysisParams& p, std::int64_t trials,
                                   std::uint64_t seed) {
    double ps = scheduled_prob(p);
    if (trials < 1) throw std::invalid_argument("simulate_schedule: trials must be >= 1");
    if (ps <= 0.0) throw std::domain_error("simulate_schedule: p_s is zero");

    const int needed = p.rounds_needed - 2;
    const double warmup = 2.0 * p.arm_count * p.time_per_round;

    double sum = 0.0, sum_sq = 0.0, sum_rounds = 0.0, sum_failures = 0.0;
    for (std::int64_t i = 0; i < trials; ++i) {
        std::mt19937_64 rng(seed + static_cast<std::uint64_t>(i));
        std::uniform_real_distribution<double> u(0.0, 1.0);
        std::int64_t rounds = 0, hits = 0;
        while (hits < needed) {
            ++rounds;
            if (u(rng) < ps) ++hits;
        }
        double total = warmup + rounds * p.time_per_round;
        sum += total;
        sum_sq += total * total;
        sum_rounds += static_cast<double>(rounds);
        sum_failures += static_cast<double>(rounds - hits);
    }
    SimulationResult r;
    r.trials = trials;
    r.mean_time = sum / trials;
    r.variance = sum_sq / trials - r.mean_time * r.mean_time;
    r.mean_selective_rounds = sum_rounds / trials;
    r.mean_failures = sum_failures / trials;
    return r;
}

}  // namespace karm
