#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "karm/forge.hpp"
#include "karm/scanner.hpp"

using namespace karm;

TEST_CASE("arm enumeration counts") {
    CHECK(enumerate_arms(5, ArmMode::Both).size() == 25);
    CHECK(enumerate_arms(5, ArmMode::UniversalOnly).size() == 5);
    CHECK(enumerate_arms(5, ArmMode::PairsOnly).size() == 20);
    CHECK(enumerate_arms(1000, ArmMode::UniversalOnly).size() == 1000);
    CHECK_THROWS_AS(enumerate_arms(1, ArmMode::Both), std::invalid_argument);

    auto pairs = enumerate_arms(2, ArmMode::PairsOnly);
    REQUIRE(pairs.size() == 2);
    CHECK(pairs[0].victim == 0);
    CHECK(pairs[0].target == 1);
    CHECK(pairs[1].victim == 1);
    CHECK(pairs[1].target == 0);

    // no duplicates
    auto arms = enumerate_arms(6, ArmMode::Both);
    std::set<std::tuple<int, int, int>> seen;
    for (const auto& a : arms)
        seen.insert({a.kind == Arm::Kind::Universal ? 0 : 1, a.victim, a.target});
    CHECK(seen.size() == arms.size());
}

namespace {

// brute-force oracle for the rank-and-count rule
bool oracle_pair_kept(const std::vector<std::vector<double>>& victim_logits, int target,
                      int top_k, double theta_pct) {
    int pass = 0;
    for (const auto& row : victim_logits) {
        int rank = 1;
        for (size_t j = 0; j < row.size(); ++j)
            if (row[j] > row[target]) ++rank;
        if (rank <= top_k) ++pass;
    }
    return pass >= theta_pct / 100.0 * victim_logits.size();
}

// tiny model: input (1,1,N) flattened straight into an identity-ish dense
// layer, so logits == scaled input pixels. Lets tests dictate logits exactly.
Model passthrough_model(int n) {
    Model m;
    m.num_classes = n;
    m.input_shape = {1, 1, n};
    m.layers = {LayerSpec::flatten(), LayerSpec::dense(n, n)};
    std::vector<double> w(static_cast<size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) w[i * n + i] = 1.0;
    m.parameters.push_back(Tensor::from_data({n, n}, std::move(w), true));
    m.parameters.push_back(Tensor::zeros({n}, true));
    return m;
}

Tensor logit_image(const std::vector<double>& logits) {
    return Tensor::from_data({1, 1, static_cast<int>(logits.size())}, logits);
}

}  // namespace

TEST_CASE("prescreen matches the brute-force rank oracle") {
    // 3 classes; class-0 samples produce the spec's logit table
    Model m = passthrough_model(3);
    std::vector<std::vector<Tensor>> samples(3);
    samples[0] = {logit_image({1.0, 3.0, 2.0}), logit_image({0.5, 2.5, 1.0})};
    samples[1] = {logit_image({0.0, 5.0, 0.0})};
    samples[2] = {logit_image({0.0, 0.0, 5.0})};

    PreScreenConfig cfg;
    cfg.gamma_pct = 30.0;  // ceil(0.3*3) = 1: top-1 counts
    cfg.theta_pct_pair = 90.0;
    auto arms = enumerate_arms(3, ArmMode::PairsOnly);
    auto res = prescreen(m, samples, arms, cfg);

    auto kept = [&](int v, int t) {
        for (const auto& a : res.kept)
            if (a.victim == v && a.target == t) return true;
        return false;
    };
    CHECK(kept(0, 1));
    CHECK_FALSE(kept(0, 2));
    // oracle agreement on every class-0 pair
    std::vector<std::vector<double>> v0 = {{1.0, 3.0, 2.0}, {0.5, 2.5, 1.0}};
    CHECK(oracle_pair_kept(v0, 1, 1, 90.0) == kept(0, 1));
    CHECK(oracle_pair_kept(v0, 2, 1, 90.0) == kept(0, 2));
}

TEST_CASE("gamma=100 keeps every arm") {
    Model m = passthrough_model(3);
    std::vector<std::vector<Tensor>> samples(3);
    for (int c = 0; c < 3; ++c) samples[c] = {logit_image({0.1, 0.2, 0.3})};
    PreScreenConfig cfg;
    cfg.gamma_pct = 100.0;
    auto arms = enumerate_arms(3, ArmMode::Both);
    auto res = prescreen(m, samples, arms, cfg);
    CHECK(res.kept.size() == arms.size());
}

TEST_CASE("prescreen requires samples for every class") {
    Model m = passthrough_model(3);
    std::vector<std::vector<Tensor>> samples(3);
    samples[0] = {logit_image({1, 2, 3})};
    samples[1] = {logit_image({1, 2, 3})};
    auto arms = enumerate_arms(3, ArmMode::Both);
    CHECK_THROWS_AS(prescreen(m, samples, arms, {}), std::invalid_argument);
}

TEST_CASE("prescreen always keeps at least one arm") {
    Model m = passthrough_model(3);
    std::vector<std::vector<Tensor>> samples(3);
    // logits where no label consistently ranks on top
    samples[0] = {logit_image({3, 1, 2})};
    samples[1] = {logit_image({2, 3, 1})};
    samples[2] = {logit_image({1, 2, 3})};
    PreScreenConfig cfg;
    cfg.gamma_pct = 10.0;
    cfg.theta_pct_universal = 100.0;
    cfg.theta_pct_pair = 101.0;  // unreachable on purpose
    auto arms = enumerate_arms(3, ArmMode::Both);
    auto res = prescreen(m, samples, arms, cfg);
    CHECK(res.kept.size() == 1);
}

TEST_CASE("objective_A closed forms") {
    ArmState st;
    st.first_valid_size = 400.0;
    st.current_size = 100.0;
    st.tm = 30.0;
    auto a = objective_A(st, 1e5);
    REQUIRE(a.has_value());
    CHECK(*a == doctest::Approx(-10.0 + 1000.0).epsilon(1e-12));

    st.first_valid_size = 500.0;
    st.current_size = 500.0;
    auto b = objective_A(st, 1e5);
    CHECK(*b == doctest::Approx(200.0).epsilon(1e-12));

    ArmState empty;
    CHECK_FALSE(objective_A(empty, 1e5).has_value());
}

TEST_CASE("objective_A direct-evaluation oracle on sampled histories") {
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> size(50.0, 600.0), tdist(5.0, 60.0);
    for (int i = 0; i < 50; ++i) {
        ArmState st;
        double first = size(rng), cur = size(rng);
        st.first_valid_size = std::max(first, cur);
        st.current_size = std::min(first, cur);
        st.tm = tdist(rng);
        double beta = 1e5;
        double expect = (*st.current_size - *st.first_valid_size) / st.tm +
                        beta / *st.current_size;
        CHECK(*objective_A(st, beta) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("symmetric objective closed form and symmetry") {
    ArmState fwd;
    fwd.first_valid_size = 400.0;
    fwd.current_size = 100.0;
    fwd.tm = 30.0;
    ArmState bwd;
    bwd.first_valid_size = 700.0;
    bwd.current_size = 600.0;
    bwd.tm = 30.0;
    auto r = symmetric_objective(fwd, bwd, 1e5);
    REQUIRE(r.has_value());
    double back = -100.0 / 30.0 + 1e5 / 600.0;
    CHECK(*r == doctest::Approx(990.0 / back).epsilon(1e-9));
    CHECK(*r == doctest::Approx(6.06).epsilon(1e-3));

    // identical histories: perfectly symmetric
    CHECK(*symmetric_objective(fwd, fwd, 1e5) == doctest::Approx(1.0));

    // opposite never valid: sentinel beta
    ArmState never;
    CHECK(*symmetric_objective(fwd, never, 1e5) == doctest::Approx(1e5));
    CHECK_FALSE(symmetric_objective(never, fwd, 1e5).has_value());
}

TEST_CASE("select_arm branches") {
    std::vector<std::optional<double>> obj = {10.0, 50.0, std::nullopt, 50.0};

    // epsilon = 0: always greedy, dominant arm wins, ties to lowest index
    std::mt19937_64 rng(1);
    for (int i = 0; i < 20; ++i) {
        bool greedy = false;
        CHECK(select_arm(obj, 0.0, rng, &greedy) == 1);
        CHECK(greedy);
    }

    // epsilon = 1-2^-53 ~ always explore: every arm reachable incl. the
    // one with no objective
    std::set<int> seen;
    for (int i = 0; i < 200; ++i) seen.insert(select_arm(obj, 0.9999999, rng));
    CHECK(seen.size() == 4);

    // explore floor: each arm selected at least eps/K of the time
    std::map<int, int> counts;
    std::mt19937_64 rng2(7);
    const int trials = 20000;
    for (int i = 0; i < trials; ++i) ++counts[select_arm(obj, 0.3, rng2)];
    for (int arm : {0, 1, 2, 3})
        CHECK(counts[arm] >= 0.5 * (0.3 / 4) * trials);
    // greedy mass concentrates on the argmax
    CHECK(counts[1] > 0.6 * trials);
}

TEST_CASE("greedy pick is invariant under monotone rescaling") {
    std::vector<std::optional<double>> obj = {3.0, 42.0, 17.0};
    std::vector<std::optional<double>> scaled;
    for (auto& o : obj) scaled.push_back(o ? std::optional<double>(2.0 * *o + 5.0) : o);
    std::mt19937_64 a(3), b(3);
    for (int i = 0; i < 50; ++i)
        CHECK(select_arm(obj, 0.3, a) == select_arm(scaled, 0.3, b));
}

TEST_CASE("trojan score mapping") {
    CHECK(trojan_score_from_size(std::numeric_limits<double>::infinity(), 40.0) ==
          doctest::Approx(1e-9));
    CHECK(trojan_score_from_size(40.0, 40.0) == doctest::Approx(0.5));
    CHECK(trojan_score_from_size(0.0, 40.0) > 0.95);
    CHECK(trojan_score_from_size(1000.0, 40.0) < 0.05);
}

TEST_CASE("calibrate_tau midpoint of the gap") {
    CHECK(calibrate_tau({10, 20, 30}, {80, 90}) == doctest::Approx(55.0));
    // overlap falls back to median midpoint
    double t = calibrate_tau({10, 40, 70}, {30, 60, 90});
    CHECK(t > 10);
    CHECK(t < 90);
}

TEST_CASE("scan: budget exhaustion with no valid trigger returns benign") {
    Model m = passthrough_model(3);
    LabeledDataset d;
    d.num_classes = 3;
    for (int c = 0; c < 3; ++c) {
        std::vector<double> v(3, 0.0);
        v[c] = 5.0;
        d.images.push_back(logit_image(v));
        d.labels.push_back(c);
    }
    SchedulerConfig sched;
    sched.max_rounds = 0;
    sched.warmup_rounds = 1;
    sched.tau = 1.0;  // sigmoid masks can never get this small in one round
    OptimizerConfig opt;
    opt.epochs_per_round = 1;
    auto rep = scan(m, d, sched, opt, {});
    CHECK_FALSE(rep.trojaned);
    CHECK(std::isinf(rep.min_trigger_size));
    CHECK(rep.trojan_score < 1e-6);
}

TEST_CASE("report json and trajectory csv round-trip") {
    ScanReport r;
    r.model_id = "m1";
    r.scanner_kind = "karm";
    r.trojaned = true;
    r.trojan_score = 0.93;
    r.min_trigger_size = 12.5;
    r.winning_arm = {3, Arm::Kind::Pair, 1, 2};
    r.arms_before_prescreen = 25;
    r.arms_after_prescreen = 7;
    r.total_rounds = 40;
    r.total_epochs = 212;
    r.tau = 40.0;
    r.trajectory.push_back({0, 3, Arm::Kind::Pair, 1, 2, 91.25, 10, "warmup"});
    r.trajectory.push_back({1, 0, Arm::Kind::Universal, -1, 0, 88.0, 3, "greedy"});

    auto text = report_to_json(r);
    auto back = report_from_json(text);
    CHECK(report_to_json(back) == text);

    auto path = (std::filesystem::temp_directory_path() / "karm_traj.csv").string();
    save_trajectory_csv(r, path);
    std::ifstream f(path);
    std::string header;
    std::getline(f, header);
    CHECK(header == "round_index,arm_id,arm_kind,victim,target,trigger_l1,epochs_used,selected_by");
    std::string line;
    std::getline(f, line);
    CHECK(line == "0,3,pair,1,2,91.25,10,warmup");
    std::filesystem::remove(path);
}

TEST_CASE("scan report is reproducible and budget is conserved") {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.input_shape = {3, 12, 12};
    spec.samples_per_class = 6;
    spec.seed = 77;
    ForgeConfig fc;
    fc.dataset = spec;
    fc.train.epochs = 40;
    fc.poison_fraction = 0.5;
    fc.augment_copies = 2;  // hardens spurious universal arms below tau
    ForgeCounts counts;
    counts.n_universal = 1;
    auto dir = (std::filesystem::temp_directory_path() / "karm_scan_repro").string();
    auto zoo = forge_zoo(counts, fc, 3, dir);
    Model m = load_model(dir + "/" + zoo.entries[0].model_path);
    auto d = generate_dataset(spec);

    SchedulerConfig sched;
    sched.rng_seed = 5;
    sched.max_rounds = 150;
    sched.tau = 40.0;
    OptimizerConfig opt;
    // 3 classes: default gamma (top-1 rank) filters every arm on an accurate
    // model; keep them all and let the bandit do the work
    PreScreenConfig pre;
    pre.gamma_pct = 100.0;
    auto r1 = scan(m, d, sched, opt, pre);
    auto r2 = scan(m, d, sched, opt, pre);
    r1.wall_time_seconds = r2.wall_time_seconds = 0.0;
    CHECK(report_to_json(r1) == report_to_json(r2));

    // conservation: per-arm rounds sum to the trajectory length
    std::map<int, int> per_arm;
    for (const auto& row : r1.trajectory) ++per_arm[row.arm_id];
    int total = 0;
    for (auto& [arm, n] : per_arm) total += n;
    CHECK(total == r1.total_rounds);
    CHECK(static_cast<size_t>(r1.total_rounds) == r1.trajectory.size());

    // the trojaned universal model should be caught with its true target
    CHECK(r1.trojaned);
    CHECK(r1.winning_arm.target == zoo.entries[0].attack->target_label);
    std::filesystem::remove_all(dir);
}
