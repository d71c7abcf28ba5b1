#pragma once

#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "karm/model.hpp"
#include "karm/trigger.hpp"

namespace karm {

enum class ArmMode { UniversalOnly, PairsOnly, Both };

struct Arm {
    enum class Kind { Universal, Pair };
    int id = 0;
    Kind kind = Kind::Universal;
    int victim = -1;  // -1 for universal arms
    int target = 0;
};

/// Per-arm optimization bookkeeping.
struct ArmState {
    Trigger trigger;
    double tm = 0.0;  // accumulated optimization time, in epochs
    int rounds = 0;
    std::vector<std::pair<int, double>> size_history;  // (round_index, size) of Improved rounds
    std::optional<double> first_valid_size;
    std::optional<double> current_size;  // latest valid trigger size
};

struct SchedulerConfig {
    double epsilon = 0.3;
    double beta = 1e5;
    double tau = 16.0;  // desk-scale default for 3x3 patches; see calibrate_tau
    int warmup_rounds = 2;
    int max_rounds = 100;  // selective rounds budget
    std::uint64_t rng_seed = 0;
    bool symmetric = true;
    ArmMode arm_mode = ArmMode::Both;
    int max_samples_per_arm = 20;
};

struct PreScreenConfig {
    double gamma_pct = 25.0;
    double theta_pct_universal = 65.0;
    double theta_pct_pair = 90.0;
};

struct TrajectoryRow {
    int round_index = 0;
    int arm_id = 0;
    Arm::Kind arm_kind = Arm::Kind::Universal;
    int victim = -1;
    int target = 0;
    double trigger_l1 = 0.0;
    int epochs_used = 0;
    std::string selected_by;  // greedy | explore | warmup
    bool improved = false;    // round yielded a new valid trigger of this size
};

struct ArmSummary {
    int id = -1;
    Arm::Kind kind = Arm::Kind::Universal;
    int victim = -1;
    int target = -1;
};

struct ScanReport {
    std::string model_id;
    std::string scanner_kind = "karm";
    bool trojaned = false;
    double trojan_score = 0.0;
    double min_trigger_size = std::numeric_limits<double>::infinity();
    ArmSummary winning_arm;
    int arms_before_prescreen = 0;
    int arms_after_prescreen = 0;
    int total_rounds = 0;
    double total_epochs = 0.0;
    double wall_time_seconds = 0.0;
    double tau = 0.0;
    std::vector<TrajectoryRow> trajectory;
};

/// N universal arms, N*(N-1) ordered pairs, or both, ids in enumeration order.
std::vector<Arm> enumerate_arms(int num_classes, ArmMode mode);

struct PreScreenResult {
    std::vector<Arm> kept;
    // pass rate of the universal rank test per candidate target label
    std::vector<double> universal_pass_rate;
};

/// Logits-rank filter (top gamma% in at least theta% of the relevant
/// samples). Keeps the best-scoring arm if everything would be filtered.
PreScreenResult prescreen(const Model& model,
                          const std::vector<std::vector<Tensor>>& samples_by_class,
                          const std::vector<Arm>& arms, const PreScreenConfig& cfg);

/// Eq-style promise score: (||M||1 - ||M1||1)/tm + beta/||M||1.
/// Empty when the arm has no valid trigger yet.
std::optional<double> objective_A(const ArmState& state, double beta);

/// Forward/backward objective ratio for a pair arm. A never-valid opposite
/// direction counts as maximal asymmetry (ratio = beta).
std::optional<double> symmetric_objective(const ArmState& forward, const ArmState& backward,
                                          double beta);

/// Epsilon-greedy pick among candidate indices. `objectives[i]` empty means
/// the arm is excluded from the greedy argmax but stays explorable.
int select_arm(const std::vector<std::optional<double>>& objectives, double epsilon,
               std::mt19937_64& rng, bool* was_greedy = nullptr);

ScanReport scan(const Model& model, const LabeledDataset& clean_samples,
                const SchedulerConfig& sched, const OptimizerConfig& opt,
                const PreScreenConfig& pre);

/// Midpoint of the gap between the largest trojaned and smallest clean
/// min-trigger-size; falls back to the joint median when they overlap.
double calibrate_tau(std::vector<double> trojaned_sizes, std::vector<double> clean_sizes);

/// Maps a minimal trigger size to a score in (0,1) via
/// sigmoid((tau - size)/(tau/4)).
double trojan_score_from_size(double min_trigger_size, double tau);

// report + trajectory serialization
std::string report_to_json(const ScanReport& report);
ScanReport report_from_json(const std::string& text);
void save_report(const ScanReport& report, const std::string& path);
ScanReport load_report(const std::string& path);
void save_trajectory_csv(const ScanReport& report, const std::string& path);

/// Groups dataset images by label.
std::vector<std::vector<Tensor>> group_by_class(const LabeledDataset& data);

/// Inputs for one arm: victim-class samples for pairs, a round-robin draw
/// over all classes != target for universal arms, capped at max_samples.
std::vector<Tensor> arm_inputs(const std::vector<std::vector<Tensor>>& by_class,
                               const Arm& arm, int max_samples);

}  // namespace karm
