#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "karm/forge.hpp"
#include "karm/trigger.hpp"

using namespace karm;

namespace {

bool rel_close(double a, double b, double rel = 1e-4, double abs_floor = 1e-7) {
    return std::abs(a - b) <= std::max(abs_floor, rel * std::max(std::abs(a), std::abs(b)));
}

Model zero_logit_model(const InputShape& in, int n_classes) {
    Model m = init_model(default_arch(in, n_classes), in, n_classes, 0);
    for (auto& p : m.parameters)
        for (auto& v : p.data()) v = 0.0;
    return m;
}

}  // namespace

TEST_CASE("stamp identity and full-mask cases") {
    auto x = Tensor::from_data({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.4});
    auto p = Tensor::from_data({1, 2, 2}, {0.9, 0.8, 0.7, 0.6});
    auto m0 = Tensor::zeros({1, 2, 2});
    auto m1 = Tensor::full({1, 2, 2}, 1.0);
    CHECK(stamp(x, m0, p).data() == x.data());
    CHECK(stamp(x, m1, p).data() == p.data());
}

TEST_CASE("stamp closed-form cell") {
    auto x = Tensor::from_data({1, 1, 1, 1}, {0.4});
    auto p = Tensor::from_data({1, 1, 1}, {0.8});
    auto m = Tensor::from_data({1, 1, 1}, {0.5});
    CHECK(stamp(x, m, p).data()[0] == doctest::Approx(0.6).epsilon(1e-12));
}

TEST_CASE("stamp output stays in [0,1] and is idempotent for binary masks") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> xd(12), pd(12), md(12);
    for (auto& v : xd) v = u(rng);
    for (auto& v : pd) v = u(rng);
    for (auto& v : md) v = u(rng) < 0.5 ? 0.0 : 1.0;
    auto x = Tensor::from_data({1, 3, 2, 2}, xd);
    auto p = Tensor::from_data({3, 2, 2}, pd);
    auto m = Tensor::from_data({3, 2, 2}, md);
    auto once = stamp(x, m, p);
    for (double v : once.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
    auto twice = stamp(once, m, p);
    CHECK(twice.data() == once.data());
}

TEST_CASE("stamp rejects mismatched shapes") {
    auto x = Tensor::zeros({1, 3, 4, 4});
    CHECK_THROWS_AS(stamp(x, Tensor::zeros({3, 4, 4}), Tensor::zeros({3, 3, 3})),
                    std::invalid_argument);
}

TEST_CASE("ASR is 1 for the argmax label and ties break to label 0") {
    InputShape in{3, 8, 8};
    Model m = zero_logit_model(in, 4);
    OptimizerConfig cfg;
    Trigger t = Trigger::init(in, cfg);
    std::vector<Tensor> X = {Tensor::full({3, 8, 8}, 0.2), Tensor::full({3, 8, 8}, 0.8)};
    // all-zero logits: every argmax resolves to label 0
    CHECK(attack_success_rate(m, X, t, 0) == 1.0);
    CHECK(attack_success_rate(m, X, t, 1) == 0.0);
}

TEST_CASE("empty input set is rejected") {
    InputShape in{3, 8, 8};
    Model m = zero_logit_model(in, 4);
    OptimizerConfig cfg;
    Trigger t = Trigger::init(in, cfg);
    CHECK_THROWS_AS(attack_success_rate(m, {}, t, 0), std::invalid_argument);
    CHECK_THROWS_AS(run_round(m, {}, 0, t, cfg, std::nullopt), std::invalid_argument);
}

TEST_CASE("round loss is non-negative and its gradient matches finite differences") {
    InputShape in{2, 6, 6};
    Model model = init_model(default_arch(in, 3), in, 3, 8);
    OptimizerConfig cfg;
    Trigger trig = Trigger::init(in, cfg);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<double> xd(2 * 2 * 6 * 6);
    for (auto& v : xd) v = u(rng);
    Tensor batch = Tensor::from_data({2, 2, 6, 6}, xd);

    Tensor loss = round_loss(model, batch, 1, trig, cfg.alpha);
    CHECK(loss.item() >= 0.0);
    backward(loss);

    auto eval_at = [&](std::vector<double>& logits_data, bool mask_side) {
        Trigger t2 = Trigger::init(in, cfg);
        if (mask_side)
            t2.mask_logits = Tensor::from_data({2, 6, 6}, logits_data, true);
        else
            t2.pattern_logits = Tensor::from_data({2, 6, 6}, logits_data, true);
        return round_loss(model, batch, 1, t2, cfg.alpha).item();
    };

    const double h = 1e-5;
    std::mt19937_64 pick(3);
    for (int side = 0; side < 2; ++side) {
        auto base = side ? trig.mask_logits.data() : trig.pattern_logits.data();
        const auto& grad = side ? trig.mask_logits.grad() : trig.pattern_logits.grad();
        for (int rep = 0; rep < 10; ++rep) {
            size_t i = std::uniform_int_distribution<size_t>(0, base.size() - 1)(pick);
            auto v = base;
            v[i] += h;
            double fp = eval_at(v, side == 1);
            v[i] -= 2 * h;
            double fm = eval_at(v, side == 1);
            CHECK(rel_close(grad[i], (fp - fm) / (2 * h), 1e-4, 1e-8));
        }
    }
}

TEST_CASE("run_round returns Improved(1) when the trigger is already valid") {
    InputShape in{3, 8, 8};
    Model m = zero_logit_model(in, 4);  // everything classifies as label 0
    OptimizerConfig cfg;
    Trigger t = Trigger::init(in, cfg);
    std::vector<Tensor> X = {Tensor::full({3, 8, 8}, 0.5)};
    auto r = run_round(m, X, 0, t, cfg, std::nullopt);
    CHECK(r.improved);
    CHECK(r.epochs_used == 1);
    CHECK(r.asr_achieved == 1.0);
    CHECK(r.new_size == doctest::Approx(t.trigger_size()));
}

TEST_CASE("run_round fails in 10 epochs when the threshold is unreachable") {
    InputShape in{3, 8, 8};
    Model m = zero_logit_model(in, 4);  // argmax tie-break: always label 0
    OptimizerConfig cfg;
    Trigger t = Trigger::init(in, cfg);
    std::vector<Tensor> X = {Tensor::full({3, 8, 8}, 0.5)};
    auto r = run_round(m, X, 2, t, cfg, std::nullopt);
    CHECK_FALSE(r.improved);
    CHECK(r.epochs_used == 10);
}

TEST_CASE("successive improved sizes are strictly decreasing on a trojaned model") {
    SyntheticSpec spec;
    spec.num_classes = 3;
    spec.input_shape = {3, 12, 12};
    spec.samples_per_class = 8;
    spec.seed = 30;
    ForgeConfig fc;
    fc.dataset = spec;
    fc.train.epochs = 40;
    fc.poison_fraction = 0.5;
    ForgeCounts counts;
    counts.n_universal = 1;
    auto dir = (std::filesystem::temp_directory_path() / "karm_trig_round").string();
    auto zoo = forge_zoo(counts, fc, 8, dir);
    REQUIRE(zoo.entries[0].attack_success_rate >= 0.9);
    Model m = load_model(dir + "/" + zoo.entries[0].model_path);
    int target = zoo.entries[0].attack->target_label;

    auto data = generate_dataset(spec);
    std::vector<Tensor> X;
    for (size_t i = 0; i < data.size(); ++i)
        if (data.labels[i] != target) X.push_back(data.images[i]);

    OptimizerConfig cfg;
    Trigger t = Trigger::init(spec.input_shape, cfg);
    std::optional<double> prev;
    std::vector<double> sizes;
    for (int round = 0; round < 80; ++round) {
        auto r = run_round(m, X, target, t, cfg, prev);
        if (r.improved) {
            if (prev) CHECK(r.new_size < *prev);
            prev = r.new_size;
            sizes.push_back(r.new_size);
        }
    }
    CHECK(sizes.size() >= 2);
    // true-target arm converges toward the ground-truth footprint scale
    double gt_l1 = 0.0;
    for (double v : zoo.entries[0].ground_truth_trigger->mask) gt_l1 += v;
    CHECK(sizes.back() < 1.5 * gt_l1);
    std::filesystem::remove_all(dir);
}
