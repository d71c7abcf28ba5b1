// Command-line front end: forge model zoos, scan them, score the verdicts,
// sweep hyper-parameters, and evaluate the scheduling analysis.

#include <CLI11.hpp>
#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "karm/analysis.hpp"
#include "karm/baselines.hpp"
#include "karm/forge.hpp"
#include "karm/metrics.hpp"
#include "karm/scanner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace karm;

namespace {

std::uint64_t mix(std::uint64_t seed, std::uint64_t salt) {
    std::uint64_t z = seed + salt * 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

// --seed wins; otherwise the KARM_SEED environment variable; otherwise 0
std::uint64_t resolve_seed(const CLI::App* cmd, std::uint64_t flag_value) {
    if (cmd->count("--seed") > 0) return flag_value;
    if (const char* env = std::getenv("KARM_SEED")) return std::strtoull(env, nullptr, 10);
    return flag_value;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << text;
}

ArmMode parse_arm_mode(const std::string& s) {
    if (s == "both") return ArmMode::Both;
    if (s == "universal") return ArmMode::UniversalOnly;
    if (s == "pairs") return ArmMode::PairsOnly;
    throw CLI::ValidationError("--arm-mode", "must be both, universal or pairs");
}

// everything needed to scan one model with any scanner
struct ScanOptions {
    std::string scanner = "karm";
    SchedulerConfig sched;
    PreScreenConfig pre;
    OptimizerConfig opt;
    int rounds_per_arm = 6;   // nc / preselect budget
    int initial_rounds = 2;   // preselect first phase
    int preselect_m = 3;
};

ScanReport scan_one_model(const Model& model, const LabeledDataset& data,
                          const ScanOptions& o, std::uint64_t seed) {
    if (o.scanner == "karm") {
        SchedulerConfig s = o.sched;
        s.rng_seed = seed;
        return scan(model, data, s, o.opt, o.pre);
    }
    auto arms = enumerate_arms(model.num_classes, o.sched.arm_mode);
    if (o.scanner == "nc")
        return scan_nc(model, data, arms, o.rounds_per_arm, o.sched.tau, o.opt,
                       o.sched.max_samples_per_arm);
    if (o.scanner == "preselect") {
        BaselineConfig cfg;
        cfg.kind = BaselineConfig::Kind::NCPreSelect;
        cfg.preselect_m = o.preselect_m;
        cfg.initial_rounds = o.initial_rounds;
        cfg.rounds_per_arm = o.rounds_per_arm;
        return scan_preselect(model, data, arms, cfg, o.sched.tau, o.opt,
                              o.sched.max_samples_per_arm);
    }
    throw CLI::ValidationError("--scanner", "must be karm, nc or preselect");
}

struct ZooScanResult {
    std::vector<ScanReport> reports;  // indexed like manifest entries
    std::vector<std::string> errors;  // empty string = success
};

// Bounded worker pool over manifest entries. Each worker loads its own model
// and regenerates the clean dataset, so no mutable state crosses threads and
// the per-model result is independent of scheduling order.
ZooScanResult scan_zoo(const ZooManifest& manifest, const std::string& zoo_dir,
                       const ScanOptions& opts, std::uint64_t seed, int parallelism) {
    ZooScanResult out;
    out.reports.resize(manifest.entries.size());
    out.errors.resize(manifest.entries.size());
    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            size_t i = next.fetch_add(1);
            if (i >= manifest.entries.size()) return;
            const ZooEntry& e = manifest.entries[i];
            try {
                Model model = load_model(zoo_dir + "/" + e.model_path);
                LabeledDataset data = generate_dataset(manifest.dataset_spec);
                ScanReport rep = scan_one_model(model, data, opts, mix(seed, i));
                rep.model_id = e.model_id;
                out.reports[i] = std::move(rep);
            } catch (const std::exception& ex) {
                out.errors[i] = ex.what();
            }
        }
    };
    int n = std::max(1, parallelism);
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    return out;
}

void add_scan_flags(CLI::App* cmd, ScanOptions& o, std::string& arm_mode) {
    cmd->add_option("--scanner", o.scanner, "karm, nc or preselect")
        ->check(CLI::IsMember({"karm", "nc", "preselect"}));
    cmd->add_flag("--symmetric,!--no-symmetric", o.sched.symmetric,
                  "two-direction objective for pair arms");
    cmd->add_option("--epsilon", o.sched.epsilon)->check(CLI::Range(0.0, 1.0));
    cmd->add_option("--beta", o.sched.beta)->check(CLI::PositiveNumber);
    cmd->add_option("--tau", o.sched.tau)->check(CLI::PositiveNumber);
    cmd->add_option("--gamma-pct", o.pre.gamma_pct)->check(CLI::Range(0.0, 100.0));
    cmd->add_option("--theta-pct", o.pre.theta_pct_universal)->check(CLI::Range(0.0, 100.0));
    cmd->add_option("--theta-pct-pair", o.pre.theta_pct_pair)->check(CLI::Range(0.0, 100.0));
    cmd->add_option("--warmup-rounds", o.sched.warmup_rounds)->check(CLI::PositiveNumber);
    cmd->add_option("--max-rounds", o.sched.max_rounds)->check(CLI::PositiveNumber);
    cmd->add_option("--max-samples", o.sched.max_samples_per_arm)->check(CLI::PositiveNumber);
    cmd->add_option("--alpha", o.opt.alpha)->check(CLI::PositiveNumber);
    cmd->add_option("--epochs-per-round", o.opt.epochs_per_round)->check(CLI::PositiveNumber);
    cmd->add_option("--rounds-per-arm", o.rounds_per_arm)->check(CLI::PositiveNumber);
    cmd->add_option("--initial-rounds", o.initial_rounds)->check(CLI::PositiveNumber);
    cmd->add_option("--preselect-m", o.preselect_m)->check(CLI::PositiveNumber);
    cmd->add_option("--arm-mode", arm_mode, "both, universal or pairs");
}

int run_forge(const std::string& out_dir, const ForgeCounts& counts, ForgeConfig cfg,
              std::uint64_t seed) {
    fs::create_directories(out_dir);
    ZooManifest manifest = forge_zoo(counts, cfg, seed, out_dir);
    save_manifest(manifest, out_dir + "/manifest.json");
    for (const auto& e : manifest.entries)
        std::cout << e.model_id << " trojaned=" << e.is_trojaned
                  << " clean_acc=" << e.clean_accuracy << " asr=" << e.attack_success_rate
                  << "\n";
    std::cout << "wrote " << manifest.entries.size() << " models to " << out_dir << "\n";
    return 0;
}

int run_scan(const std::string& manifest_path, const std::string& out_dir,
             const ScanOptions& opts, std::uint64_t seed, int parallelism) {
    ZooManifest manifest = load_manifest(manifest_path);
    std::string zoo_dir = fs::path(manifest_path).parent_path().string();
    if (zoo_dir.empty()) zoo_dir = ".";
    fs::create_directories(out_dir);
    auto result = scan_zoo(manifest, zoo_dir, opts, seed, parallelism);
    int failures = 0;
    for (size_t i = 0; i < manifest.entries.size(); ++i) {
        const std::string& id = manifest.entries[i].model_id;
        if (!result.errors[i].empty()) {
            ++failures;
            json err = {{"model_id", id}, {"error", result.errors[i]}};
            write_text(out_dir + "/" + id + ".error.json", err.dump(2) + "\n");
            std::cerr << id << ": " << result.errors[i] << "\n";
            continue;
        }
        const ScanReport& rep = result.reports[i];
        save_report(rep, out_dir + "/" + id + ".report.json");
        save_trajectory_csv(rep, out_dir + "/" + id + ".trajectory.csv");
        std::cout << id << " trojaned=" << rep.trojaned << " score=" << rep.trojan_score
                  << " min_size=" << rep.min_trigger_size << " rounds=" << rep.total_rounds
                  << "\n";
    }
    return failures == 0 ? 0 : 1;
}

std::vector<ModelRow> rows_from_reports(const ZooManifest& manifest,
                                        const std::string& reports_dir) {
    std::map<std::string, const ZooEntry*> by_id;
    for (const auto& e : manifest.entries) by_id[e.model_id] = &e;
    std::vector<ModelRow> rows;
    for (const auto& entry : fs::directory_iterator(reports_dir)) {
        std::string name = entry.path().filename().string();
        const std::string suffix = ".report.json";
        if (name.size() <= suffix.size() || name.substr(name.size() - suffix.size()) != suffix)
            continue;
        ScanReport rep = load_report(entry.path().string());
        auto it = by_id.find(rep.model_id);
        if (it == by_id.end())
            throw std::runtime_error("report " + name + " has no manifest entry for id '" +
                                     rep.model_id + "'");
        rows.push_back({rep.model_id, it->second->is_trojaned, rep.trojan_score, rep.trojaned,
                        rep.total_epochs});
    }
    if (rows.size() != manifest.entries.size())
        throw std::runtime_error("expected " + std::to_string(manifest.entries.size()) +
                                 " reports in " + reports_dir + ", found " +
                                 std::to_string(rows.size()));
    return rows;
}

int run_metrics(const std::string& manifest_path, const std::string& reports_dir,
                const std::string& out_csv) {
    ZooManifest manifest = load_manifest(manifest_path);
    DetectionMetrics m = compute_metrics(rows_from_reports(manifest, reports_dir));
    if (!out_csv.empty()) save_metrics_csv(m, out_csv);
    std::cout << "accuracy=" << m.accuracy << " roc_auc=" << m.roc_auc
              << " cross_entropy=" << m.cross_entropy << "\n";
    return 0;
}

void apply_sweep_value(ScanOptions& o, const std::string& parameter, double value) {
    if (parameter == "beta") {
        if (value <= 0) throw std::runtime_error("beta values must be positive");
        o.sched.beta = value;
    } else if (parameter == "epsilon") {
        if (value < 0 || value > 1) throw std::runtime_error("epsilon values must be in [0,1]");
        o.sched.epsilon = value;
    } else if (parameter == "tau") {
        if (value <= 0) throw std::runtime_error("tau values must be positive");
        o.sched.tau = value;
    } else if (parameter == "gamma_pct") {
        if (value <= 0 || value > 100)
            throw std::runtime_error("gamma_pct values must be in (0,100]");
        o.pre.gamma_pct = value;
    } else if (parameter == "theta_pct") {
        if (value <= 0 || value > 100)
            throw std::runtime_error("theta_pct values must be in (0,100]");
        o.pre.theta_pct_universal = value;
        o.pre.theta_pct_pair = value;
    } else {
        throw std::runtime_error("unknown sweep parameter '" + parameter + "'");
    }
}

int run_sweep(const std::string& manifest_path, const std::string& parameter,
              const std::vector<double>& values, const std::string& out_csv,
              const ScanOptions& base, std::uint64_t seed, int parallelism) {
    if (values.empty()) throw std::runtime_error("sweep grid is empty");
    ZooManifest manifest = load_manifest(manifest_path);
    std::string zoo_dir = fs::path(manifest_path).parent_path().string();
    if (zoo_dir.empty()) zoo_dir = ".";

    std::ostringstream csv;
    csv << "parameter,value,accuracy,mean_scan_time\n";
    for (double v : values) {
        ScanOptions opts = base;
        apply_sweep_value(opts, parameter, v);
        auto result = scan_zoo(manifest, zoo_dir, opts, seed, parallelism);
        std::vector<ModelRow> rows;
        double total_epochs = 0.0;
        for (size_t i = 0; i < manifest.entries.size(); ++i) {
            if (!result.errors[i].empty())
                throw std::runtime_error(manifest.entries[i].model_id + ": " +
                                         result.errors[i]);
            const ScanReport& rep = result.reports[i];
            rows.push_back({rep.model_id, manifest.entries[i].is_trojaned, rep.trojan_score,
                            rep.trojaned, rep.total_epochs});
            total_epochs += rep.total_epochs;
        }
        DetectionMetrics m = compute_metrics(std::move(rows));
        double mean_time = total_epochs / static_cast<double>(manifest.entries.size());
        char line[256];
        std::snprintf(line, sizeof line, "%s,%.10g,%.10g,%.10g\n", parameter.c_str(), v,
                      m.accuracy, mean_time);
        csv << line;
        std::cout << parameter << "=" << v << " accuracy=" << m.accuracy
                  << " mean_scan_time=" << mean_time << "\n";
    }
    if (!out_csv.empty()) write_text(out_csv, csv.str());
    return 0;
}

// Greedy hit rate from trajectory CSVs: per file, the fraction of
// greedy-selected rounds that landed on the arm with the smallest recorded
// trigger size. Averaged over files that have greedy rounds.
double fit_p_from_trajectories(const std::string& dir) {
    double sum = 0.0;
    int files = 0;
    for (const auto& entry : fs::directory_iterator(dir)) {
        std::string name = entry.path().filename().string();
        const std::string suffix = ".trajectory.csv";
        if (name.size() <= suffix.size() || name.substr(name.size() - suffix.size()) != suffix)
            continue;
        std::ifstream in(entry.path());
        std::string line;
        std::getline(in, line);  // header
        struct Row { int arm; double size; std::string sel; };
        std::vector<Row> rows;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string f[8];
            for (int i = 0; i < 8 && std::getline(ls, f[i], ','); ++i) {}
            rows.push_back({std::stoi(f[1]), std::stod(f[5]), f[7]});
        }
        if (rows.empty()) continue;
        int best_arm = rows[0].arm;
        double best = rows[0].size;
        for (const auto& r : rows)
            if (r.size < best) { best = r.size; best_arm = r.arm; }
        int greedy = 0, hits = 0;
        for (const auto& r : rows)
            if (r.sel == "greedy") {
                ++greedy;
                if (r.arm == best_arm) ++hits;
            }
        if (greedy == 0) continue;
        sum += static_cast<double>(hits) / greedy;
        ++files;
    }
    if (files == 0) throw std::runtime_error("no trajectory CSVs with greedy rounds in " + dir);
    return sum / files;
}

int run_analyze(AnalysisParams p, std::int64_t trials, std::uint64_t sim_seed,
                const std::string& fit_dir, const std::string& out_path) {
    json doc;
    if (!fit_dir.empty()) {
        p.greedy_hit_prob = fit_p_from_trajectories(fit_dir);
        doc["fitted_p"] = p.greedy_hit_prob;
    }
    doc["params"] = {{"arm_count", p.arm_count},       {"rounds_needed", p.rounds_needed},
                     {"time_per_round", p.time_per_round}, {"greedy_hit_prob", p.greedy_hit_prob},
                     {"epsilon", p.epsilon},           {"preselect_m", p.preselect_m}};
    doc["expected"] = {{"scheduled_prob", scheduled_prob(p)},
                       {"karm", expected_time_karm(p)},
                       {"nc", expected_time_nc(p)},
                       {"preselect", expected_time_preselect(p)}};
    if (trials > 0) {
        SimulationResult r = simulate_schedule(p, trials, sim_seed);
        doc["simulation"] = {{"mean_time", r.mean_time},
                             {"variance", r.variance},
                             {"mean_selective_rounds", r.mean_selective_rounds},
                             {"mean_failures", r.mean_failures},
                             {"trials", r.trials}};
    }
    std::string text = doc.dump(2) + "\n";
    if (!out_path.empty()) write_text(out_path, text);
    std::cout << text;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"k-arm backdoor scanning toolkit"};
    app.require_subcommand(1);

    // forge
    auto* forge = app.add_subcommand("forge", "train a zoo of clean and trojaned models");
    std::string forge_out = "zoo";
    ForgeCounts counts;
    ForgeConfig fcfg;
    std::uint64_t forge_seed = 0;
    forge->add_option("--out", forge_out, "output directory");
    forge->add_option("--clean", counts.n_clean);
    forge->add_option("--universal", counts.n_universal);
    forge->add_option("--label-specific", counts.n_label_specific);
    forge->add_option("--adaptive", counts.n_adaptive);
    forge->add_option("--adaptive-coef", counts.adaptive_coefficient);
    forge->add_option("--seed", forge_seed);
    forge->add_option("--classes", fcfg.dataset.num_classes)->check(CLI::Range(2, 1000));
    forge->add_option("--samples-per-class", fcfg.dataset.samples_per_class)
        ->check(CLI::PositiveNumber);
    forge->add_option("--channels", fcfg.dataset.input_shape.channels);
    forge->add_option("--height", fcfg.dataset.input_shape.height);
    forge->add_option("--width", fcfg.dataset.input_shape.width);
    forge->add_option("--noise-std", fcfg.dataset.background_noise_std);
    forge->add_option("--epochs", fcfg.train.epochs)->check(CLI::PositiveNumber);
    forge->add_option("--batch-size", fcfg.train.batch_size)->check(CLI::PositiveNumber);
    forge->add_option("--poison-fraction", fcfg.poison_fraction)->check(CLI::Range(0.0, 1.0));
    forge->add_option("--patch-side", fcfg.patch_side)->check(CLI::PositiveNumber);
    forge->add_option("--augment-copies", fcfg.augment_copies)->check(CLI::NonNegativeNumber);

    // scan
    auto* scan_cmd = app.add_subcommand("scan", "scan every model in a zoo");
    std::string scan_manifest, scan_out = "reports";
    ScanOptions scan_opts;
    std::string scan_arm_mode = "both";
    std::uint64_t scan_seed = 0;
    int parallelism = 1;
    scan_cmd->add_option("--manifest", scan_manifest)->required();
    scan_cmd->add_option("--out", scan_out, "reports directory");
    scan_cmd->add_option("--seed", scan_seed);
    scan_cmd->add_option("--parallelism", parallelism)->check(CLI::Range(1, 64));
    add_scan_flags(scan_cmd, scan_opts, scan_arm_mode);

    // metrics
    auto* metrics_cmd = app.add_subcommand("metrics", "detection metrics from scan reports");
    std::string met_manifest, met_reports, met_out;
    metrics_cmd->add_option("--manifest", met_manifest)->required();
    metrics_cmd->add_option("--reports", met_reports)->required();
    metrics_cmd->add_option("--out", met_out, "metrics CSV path");

    // sweep
    auto* sweep_cmd = app.add_subcommand("sweep", "hyper-parameter grid over a fixed zoo");
    std::string swp_manifest, swp_param, swp_out;
    std::vector<double> swp_values;
    ScanOptions swp_opts;
    std::string swp_arm_mode = "both";
    std::uint64_t swp_seed = 0;
    int swp_parallelism = 1;
    sweep_cmd->add_option("--manifest", swp_manifest)->required();
    sweep_cmd->add_option("--parameter", swp_param)
        ->required()
        ->check(CLI::IsMember({"beta", "epsilon", "tau", "gamma_pct", "theta_pct"}));
    sweep_cmd->add_option("--values", swp_values, "grid values")->required()->delimiter(',');
    sweep_cmd->add_option("--out", swp_out, "sweep CSV path");
    sweep_cmd->add_option("--seed", swp_seed);
    sweep_cmd->add_option("--parallelism", swp_parallelism)->check(CLI::Range(1, 64));
    add_scan_flags(sweep_cmd, swp_opts, swp_arm_mode);

    // analyze
    auto* analyze_cmd = app.add_subcommand("analyze", "expected scan time: closed forms + MC");
    AnalysisParams ap;
    std::int64_t trials = 0;
    std::uint64_t sim_seed = 0;
    std::string fit_dir, analyze_out;
    analyze_cmd->add_option("--arms", ap.arm_count)->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--rounds", ap.rounds_needed)->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--time", ap.time_per_round)->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--p", ap.greedy_hit_prob)->check(CLI::Range(0.0, 1.0));
    analyze_cmd->add_option("--epsilon", ap.epsilon)->check(CLI::Range(0.0, 1.0));
    analyze_cmd->add_option("--preselect-m", ap.preselect_m)->check(CLI::PositiveNumber);
    analyze_cmd->add_option("--trials", trials);
    analyze_cmd->add_option("--sim-seed", sim_seed);
    analyze_cmd->add_option("--fit-p", fit_dir, "estimate p from trajectory CSVs in this dir");
    analyze_cmd->add_option("--out", analyze_out, "write the analysis JSON here too");

    CLI11_PARSE(app, argc, argv);

    try {
        if (forge->parsed()) return run_forge(forge_out, counts, fcfg, resolve_seed(forge, forge_seed));
        if (scan_cmd->parsed()) {
            scan_opts.sched.arm_mode = parse_arm_mode(scan_arm_mode);
            return run_scan(scan_manifest, scan_out, scan_opts, resolve_seed(scan_cmd, scan_seed),
                            parallelism);
        }
        if (metrics_cmd->parsed()) return run_metrics(met_manifest, met_reports, met_out);
        if (sweep_cmd->parsed()) {
            swp_opts.sched.arm_mode = parse_arm_mode(swp_arm_mode);
            return run_sweep(swp_manifest, swp_param, swp_values, swp_out, swp_opts,
                             resolve_seed(sweep_cmd, swp_seed), swp_parallelism);
        }
        if (analyze_cmd->parsed()) return run_analyze(ap, trials, sim_seed, fit_dir, analyze_out);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << "\n";
        return 1;
    }
    return 0;
}
