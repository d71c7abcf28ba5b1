#include "karm/scanner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace karm {

namespace {

using nlohmann::json;

const char* kind_str(Arm::Kind k) {
    return k == Arm::Kind::Universal ? "universal" : "pair";
}

Arm::Kind kind_from_str(const std::string& s) {
    if (s == "universal") return Arm::Kind::Universal;
    if (s == "pair") return Arm::Kind::Pair;
    throw std::runtime_error("unknown arm kind '" + s + "'");
}

}  // namespace

std::vector<Arm> enumerate_arms(int num_classes, ArmMode mode) {
    if (num_classes < 2)
        throw std::invalid_argument("enumerate_arms: need at least 2 classes");
    std::vector<Arm> arms;
    int id = 0;
    if (mode != ArmMode::PairsOnly)
        for (int t = 0; t < num_classes; ++t)
            arms.push_back({id++, Arm::Kind::Universal, -1, t});
    if (mode != ArmMode::UniversalOnly)
        for (int v = 0; v < num_classes; ++v)
            for (int t = 0; t < num_classes; ++t)
                if (v != t) arms.push_back({id++, Arm::Kind::Pair, v, t});
    return arms;
}

std::vector<std::vector<Tensor>> group_by_class(const LabeledDataset& data) {
    std::vector<std::vector<Tensor>> by_class(data.num_classes);
    for (size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(data.images[i]);
    return by_class;
}

std::vector<Tensor> arm_inputs(const std::vector<std::vector<Tensor>>& by_class,
                               const Arm& arm, int max_samples) {
    std::vector<Tensor> out;
    if (arm.kind == Arm::Kind::Pair) {
        const auto& v = by_class[arm.victim];
        for (size_t i = 0; i < v.size() && static_cast<int>(out.size()) < max_samples; ++i)
            out.push_back(v[i]);
        return out;
    }
    // round-robin over classes != target
    size_t depth = 0;
    bool more = true;
    while (more && static_cast<int>(out.size()) < max_samples) {
        more = false;
        for (int c = 0; c < static_cast<int>(by_class.size()); ++c) {
            if (c == arm.target) continue;
            if (depth < by_class[c].size()) {
                more = true;
                if (static_cast<int>(out.size()) < max_samples) out.push_back(by_class[c][depth]);
            }
        }
        ++depth;
    }
    return out;
}

PreScreenResult prescreen(const Model& model,
                          const std::vector<std::vector<Tensor>>& samples_by_class,
                          const std::vector<Arm>& arms, const PreScreenConfig& cfg) {
    const int N = model.num_classes;
    for (const auto& cls : samples_by_class)
        if (cls.empty())
            throw std::invalid_argument("prescreen: every class needs at least one sample");

    // per-sample logits ranks per class
    // in_top[c][i] = true if label i's logit ranks within top ceil(gamma%*N)
    int top_k = static_cast<int>(std::ceil(cfg.gamma_pct / 100.0 * N));
    top_k = std::clamp(top_k, 1, N);
    std::vector<std::vector<std::vector<bool>>> in_top(samples_by_class.size());
    for (size_t c = 0; c < samples_by_class.size(); ++c) {
        Tensor logits = predict_logits(model, stack_batch(samples_by_class[c]));
        for (size_t s = 0; s < samples_by_class[c].size(); ++s) {
            const double* row = &logits.data()[s * N];
            std::vector<int> order(N);
            for (int i = 0; i < N; ++i) order[i] = i;
            std::stable_sort(order.begin(), order.end(),
                             [&](int a, int b) { return row[a] > row[b]; });
            std::vector<bool> top(N, false);
            for (int r = 0; r < top_k; ++r) top[order[r]] = true;
            in_top[c].push_back(std::move(top));
        }
    }

    auto universal_rate = [&](int t) {
        size_t total = 0, pass = 0;
        for (int c = 0; c < static_cast<int>(in_top.size()); ++c) {
            if (c == t) continue;
            for (const auto& top : in_top[c]) {
                ++total;
                if (top[t]) ++pass;
            }
        }
        return total ? static_cast<double>(pass) / total : 0.0;
    };
    auto pair_rate = [&](int victim, int t) {
        size_t pass = 0;
        for (const auto& top : in_top[victim])
            if (top[t]) ++pass;
        return static_cast<double>(pass) / in_top[victim].size();
    };

    PreScreenResult res;
    res.universal_pass_rate.resize(N);
    for (int t = 0; t < N; ++t) res.universal_pass_rate[t] = universal_rate(t);

    int best_arm = -1;
    double best_rate = -1.0;
    for (const auto& arm : arms) {
        double rate, threshold;
        if (arm.kind == Arm::Kind::Universal) {
            rate = res.universal_pass_rate[arm.target];
            threshold = cfg.theta_pct_universal / 100.0;
        } else {
            rate = pair_rate(arm.victim, arm.target);
            threshold = cfg.theta_pct_pair / 100.0;
        }
        if (rate >= threshold) res.kept.push_back(arm);
        if (rate > best_rate) {
            best_rate = rate;
            best_arm = static_cast<int>(&arm - arms.data());
        }
    }
    if (res.kept.empty() && best_arm >= 0) res.kept.push_back(arms[best_arm]);
    return res;
}

std::optional<double> objective_A(const ArmState& state, double beta) {
    if (!state.first_valid_size || !state.current_size || state.tm <= 0.0) return std::nullopt;
    return (*state.current_size - *state.first_valid_size) / state.tm +
           beta / *state.current_size;
}

std::optional<double> symmetric_objective(const ArmState& forward, const ArmState& backward,
                                          double beta) {
    auto fwd = objective_A(forward, beta);
    if (!fwd) return std::nullopt;
    auto bwd = objective_A(backward, beta);
    if (!bwd) return beta;  // opposite never valid: maximal asymmetry sentinel
    return *fwd / *bwd;
}

int select_arm(const std::vector<std::optional<double>>& objectives, double epsilon,
               std::mt19937_64& rng, bool* was_greedy) {
    if (objectives.empty()) throw std::invalid_argument("select_arm: no arms");
    double s = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (s >= epsilon) {  // s == epsilon counts as greedy
        int best = -1;
        for (size_t i = 0; i < objectives.size(); ++i)
            if (objectives[i] && (best < 0 || *objectives[i] > *objectives[best]))
                best = static_cast<int>(i);
        if (best >= 0) {
            if (was_greedy) *was_greedy = true;
            return best;
        }
        // nothing valid yet: fall through to exploration
    }
    if (was_greedy) *was_greedy = false;
    return static_cast<int>(
        std::uniform_int_distribution<size_t>(0, objectives.size() - 1)(rng));
}

double trojan_score_from_size(double min_trigger_size, double tau) {
    double score;
    if (!std::isfinite(min_trigger_size)) {
        score = 0.0;
    } else {
        score = 1.0 / (1.0 + std::exp(-(tau - min_trigger_size) / (tau / 4.0)));
    }
    return std::clamp(score, 1e-9, 1.0 - 1e-9);
}

double calibrate_tau(std::vector<double> trojaned_sizes, std::vector<double> clean_sizes) {
    if (trojaned_sizes.empty() || clean_sizes.empty())
        throw std::invalid_argument("calibrate_tau: both distributions must be non-empty");
    auto finite_median = [](std::vector<double>& v) {
        std::sort(v.begin(), v.end());
        return v[v.size() / 2];
    };
    double max_troj = *std::max_element(trojaned_sizes.begin(), trojaned_sizes.end());
    double min_clean = *std::min_element(clean_sizes.begin(), clean_sizes.end());
    if (max_troj < min_clean && std::isfinite(max_troj) && std::isfinite(min_clean))
        return 0.5 * (max_troj + min_clean);
    // overlapping distributions: midpoint of the medians
    double mt = finite_median(trojaned_sizes);
    double mc = finite_median(clean_sizes);
    if (!std::isfinite(mc)) mc = 2.0 * mt;
    return 0.5 * (mt + mc);
}

ScanReport scan(const Model& model, const LabeledDataset& clean_samples,
                const SchedulerConfig& sched, const OptimizerConfig& opt,
                const PreScreenConfig& pre) {
    auto t0 = std::chrono::steady_clock::now();
    ScanReport report;
    report.tau = sched.tau;

    auto by_class = group_by_class(clean_samples);
    auto all_arms = enumerate_arms(model.num_classes, sched.arm_mode);
    report.arms_before_prescreen = static_cast<int>(all_arms.size());
    auto kept = prescreen(model, by_class, all_arms, pre).kept;
    report.arms_after_prescreen = static_cast<int>(kept.size());

    // states for every enumerated arm (opposite directions included)
    std::vector<ArmState> states(all_arms.size());
    std::vector<std::vector<Tensor>> inputs(all_arms.size());
    for (auto& s : states) s.trigger = Trigger::init(model.input_shape, opt);

    // reverse-direction arm id lookup for pair arms
    std::vector<int> opposite(all_arms.size(), -1);
    for (const auto& a : all_arms)
        if (a.kind == Arm::Kind::Pair)
            for (const auto& b : all_arms)
                if (b.kind == Arm::Kind::Pair && b.victim == a.target && b.target == a.victim) {
                    opposite[a.id] = b.id;
                    break;
                }

    auto get_inputs = [&](int arm_id) -> const std::vector<Tensor>& {
        if (inputs[arm_id].empty())
            inputs[arm_id] = arm_inputs(by_class, all_arms[arm_id], sched.max_samples_per_arm);
        return inputs[arm_id];
    };

    int round_index = 0;
    auto run_one = [&](int arm_id, const char* selected_by) {
        ArmState& st = states[arm_id];
        RoundResult r = run_round(model, get_inputs(arm_id), all_arms[arm_id].target,
                                  st.trigger, opt, st.current_size);
        st.tm += r.epochs_used;
        st.rounds += 1;
        double size = r.improved ? r.new_size : st.trigger.trigger_size();
        if (r.improved) {
            st.size_history.emplace_back(round_index, r.new_size);
            if (!st.first_valid_size) st.first_valid_size = r.new_size;
            st.current_size = r.new_size;
        }
        report.trajectory.push_back({round_index, arm_id, all_arms[arm_id].kind,
                                     all_arms[arm_id].victim, all_arms[arm_id].target, size,
                                     r.epochs_used, selected_by, r.improved});
        report.total_epochs += r.epochs_used;
        ++round_index;
    };

    // warm-up: every surviving arm, plus the opposite direction of pair arms
    // when symmetry is on
    for (const auto& arm : kept)
        for (int w = 0; w < sched.warmup_rounds; ++w) run_one(arm.id, "warmup");
    if (sched.symmetric)
        for (const auto& arm : kept)
            if (arm.kind == Arm::Kind::Pair && opposite[arm.id] >= 0 &&
                states[opposite[arm.id]].rounds == 0)
                for (int w = 0; w < sched.warmup_rounds; ++w)
                    run_one(opposite[arm.id], "warmup");

    auto min_valid_size = [&]() {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& arm : kept)
            if (states[arm.id].current_size)
                best = std::min(best, *states[arm.id].current_size);
        return best;
    };

    std::mt19937_64 rng(sched.rng_seed);
    double stop_threshold = sched.tau / 2.0;
    for (int r = 0; r < sched.max_rounds && !kept.empty(); ++r) {
        if (min_valid_size() < stop_threshold) break;
        std::vector<std::optional<double>> objectives(kept.size());
        for (size_t i = 0; i < kept.size(); ++i) {
            const auto& arm = kept[i];
            if (sched.symmetric && arm.kind == Arm::Kind::Pair && opposite[arm.id] >= 0)
                objectives[i] =
                    symmetric_objective(states[arm.id], states[opposite[arm.id]], sched.beta);
            else
                objectives[i] = objective_A(states[arm.id], sched.beta);
        }
        bool greedy = false;
        int pick = select_arm(objectives, sched.epsilon, rng, &greedy);
        const Arm& arm = kept[pick];
        const char* how = greedy ? "greedy" : "explore";
        run_one(arm.id, how);
        if (sched.symmetric && arm.kind == Arm::Kind::Pair && opposite[arm.id] >= 0 &&
            states[opposite[arm.id]].rounds + 2 < states[arm.id].rounds)
            run_one(opposite[arm.id], how);
    }

    report.min_trigger_size = std::numeric_limits<double>::infinity();
    for (const auto& arm : kept) {
        const auto& st = states[arm.id];
        if (st.current_size && *st.current_size < report.min_trigger_size) {
            report.min_trigger_size = *st.current_size;
            report.winning_arm = {arm.id, arm.kind, arm.victim, arm.target};
        }
    }
    report.trojaned = report.min_trigger_size < sched.tau;
    report.trojan_score = trojan_score_from_size(report.min_trigger_size, sched.tau);
    report.total_rounds = round_index;
    report.wall_time_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

std::string report_to_json(const ScanReport& r) {
    json j;
    j["model_id"] = r.model_id;
    j["scanner_kind"] = r.scanner_kind;
    j["verdict"] = r.trojaned ? "trojaned" : "benign";
    j["trojan_score"] = r.trojan_score;
    j["min_trigger_size"] =
        std::isfinite(r.min_trigger_size) ? json(r.min_trigger_size) : json(nullptr);
    j["winning_arm"] = {{"id", r.winning_arm.id},
                        {"kind", kind_str(r.winning_arm.kind)},
                        {"victim", r.winning_arm.victim},
                        {"target", r.winning_arm.target}};
    j["arms_before_prescreen"] = r.arms_before_prescreen;
    j["arms_after_prescreen"] = r.arms_after_prescreen;
    j["total_rounds"] = r.total_rounds;
    j["total_epochs"] = r.total_epochs;
    j["tau"] = r.tau;
    j["wall_time_seconds"] = r.wall_time_seconds;
    j["trajectory"] = json::array();
    for (const auto& row : r.trajectory)
        j["trajectory"].push_back({{"round_index", row.round_index},
                                   {"arm_id", row.arm_id},
                                   {"arm_kind", kind_str(row.arm_kind)},
                                   {"victim", row.victim},
                                   {"target", row.target},
                                   {"trigger_l1", row.trigger_l1},
                                   {"epochs_used", row.epochs_used},
                                   {"selected_by", row.selected_by},
                                   {"improved", row.improved}});
    return j.dump(2);
}

ScanReport report_from_json(const std::string& text) {
    json j = json::parse(text);
    ScanReport r;
    r.model_id = j.at("model_id");
    r.scanner_kind = j.at("scanner_kind");
    r.trojaned = j.at("verdict") == "trojaned";
    r.trojan_score = j.at("trojan_score");
    r.min_trigger_size = j.at("min_trigger_size").is_null()
                             ? std::numeric_limits<double>::infinity()
                             : j.at("min_trigger_size").get<double>();
    const auto& w = j.at("winning_arm");
    r.winning_arm = {w.at("id"), kind_from_str(w.at("kind")), w.at("victim"), w.at("target")};
    r.arms_before_prescreen = j.at("arms_before_prescreen");
    r.arms_after_prescreen = j.at("arms_after_prescreen");
    r.total_rounds = j.at("total_rounds");
    r.total_epochs = j.at("total_epochs");
    r.tau = j.at("tau");
    r.wall_time_seconds = j.at("wall_time_seconds");
    for (const auto& row : j.at("trajectory"))
        r.trajectory.push_back({row.at("round_index"), row.at("arm_id"),
                                kind_from_str(row.at("arm_kind")), row.at("victim"),
                                row.at("target"), row.at("trigger_l1"), row.at("epochs_used"),
                                row.at("selected_by"), row.value("improved", false)});
    return r;
}

void save_report(const ScanReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_report: cannot open " + path);
    f << report_to_json(report) << "\n";
}

ScanReport load_report(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_report: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return report_from_json(text);
}

void save_trajectory_csv(const ScanReport& report, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_trajectory_csv: cannot open " + path);
    f << "round_index,arm_id,arm_kind,victim,target,trigger_l1,epochs_used,selected_by\n";
    char buf[64];
    for (const auto& row : report.trajectory) {
        std::snprintf(buf, sizeof(buf), "%.10g", row.trigger_l1);
        f << row.round_index << "," << row.arm_id << "," << kind_str(row.arm_kind) << ","
          << row.victim << "," << row.target << "," << buf << "," << row.epochs_used << ","
          << row.selected_by << "\n";
    }
}

}  // namespace karm
