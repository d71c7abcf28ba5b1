#include "karm/baselines.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace karm {

namespace {

struct BaselineRunner {
    const Model& model;
    const std::vector<Arm>& arms;
    const OptimizerConfig& opt;
    std::vector<std::vector<Tensor>> by_class;
    std::vector<ArmState> states;
    std::vector<std::vector<Tensor>> inputs;
    ScanReport report;
    int round_index = 0;
    int max_samples;

    BaselineRunner(const Model& m, const LabeledDataset& data, const std::vector<Arm>& a,
                   const OptimizerConfig& o, int max_samples_per_arm)
        : model(m), arms(a), opt(o), max_samples(max_samples_per_arm) {
        by_class = group_by_class(data);
        states.resize(arms.size());
        inputs.resize(arms.size());
        for (auto& s : states) s.trigger = Trigger::init(m.input_shape, o);
        report.arms_before_prescreen = static_cast<int>(arms.size());
        report.arms_after_prescreen = static_cast<int>(arms.size());
    }

    void run_one(size_t idx, const char* selected_by) {
        ArmState& st = states[idx];
        if (inputs[idx].empty()) inputs[idx] = arm_inputs(by_class, arms[idx], max_samples);
        RoundResult r =
            run_round(model, inputs[idx], arms[idx].target, st.trigger, opt, st.current_size);
        st.tm += r.epochs_used;
        st.rounds += 1;
        double size = r.improved ? r.new_size : st.trigger.trigger_size();
        if (r.improved) {
            st.size_history.emplace_back(round_index, r.new_size);
            if (!st.first_valid_size) st.first_valid_size = r.new_size;
            st.current_size = r.new_size;
        }
        report.trajectory.push_back({round_index, arms[idx].id, arms[idx].kind,
                                     arms[idx].victim, arms[idx].target, size, r.epochs_used,
                                     selected_by, r.improved});
        report.total_epochs += r.epochs_used;
        ++round_index;
    }

    void finish(double tau) {
        report.tau = tau;
        report.min_trigger_size = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < arms.size(); ++i)
            if (states[i].current_size && *states[i].current_size < report.min_trigger_size) {
                report.min_trigger_size = *states[i].current_size;
                report.winning_arm = {arms[i].id, arms[i].kind, arms[i].victim, arms[i].target};
            }
        report.trojaned = report.min_trigger_size < tau;
        report.trojan_score = trojan_score_from_size(report.min_trigger_size, tau);
        report.total_rounds = round_index;
    }
};

}  // namespace

ScanReport scan_nc(const Model& model, const LabeledDataset& clean_samples,
                   const std::vector<Arm>& arms, int rounds_per_arm, double tau,
                   const OptimizerConfig& opt, int max_samples_per_arm) {
    auto t0 = std::chrono::steady_clock::now();
    BaselineRunner run(model, clean_samples, arms, opt, max_samples_per_arm);
    run.report.scanner_kind = "nc";
    for (size_t i = 0; i < arms.size(); ++i)
        for (int r = 0; r < rounds_per_arm; ++r) run.run_one(i, "greedy");
    run.finish(tau);
    run.report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run.report;
}

ScanReport scan_preselect(const Model& model, const LabeledDataset& clean_samples,
                          const std::vector<Arm>& arms, const BaselineConfig& cfg, double tau,
                          const OptimizerConfig& opt, int max_samples_per_arm) {
    if (cfg.preselect_m < 1)
        throw std::invalid_argument("scan_preselect: preselect_m must be >= 1");
    auto t0 = std::chrono::steady_clock::now();
    BaselineRunner run(model, clean_samples, arms, opt, max_samples_per_arm);
    run.report.scanner_kind = "preselect";
    for (size_t i = 0; i < arms.size(); ++i)
        for (int r = 0; r < cfg.initial_rounds; ++r) run.run_one(i, "warmup");

    // keep the m smallest current triggers (raw mask size when no valid one)
    std::vector<size_t> order(arms.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    auto size_of = [&](size_t i) {
        return run.states[i].current_size.value_or(run.states[i].trigger.trigger_size());
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](size_t a, size_t b) { return size_of(a) < size_of(b); });
    size_t m = std::min<size_t>(cfg.preselect_m, order.size());
    int remaining = std::max(0, cfg.rounds_per_arm - cfg.initial_rounds);
    for (size_t k = 0; k < m; ++k)
        for (int r = 0; r < remaining; ++r) run.run_one(order[k], "greedy");

    run.finish(tau);
    run.report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return run.report;
}

}  // namespace karm
