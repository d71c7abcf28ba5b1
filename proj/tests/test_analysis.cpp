#include <doctest.h>

#include <cmath>
#include <initializer_list>
#include <stdexcept>

#include "karm/analysis.hpp"

using namespace karm;

TEST_CASE("closed forms at the reference point") {
    AnalysisParams p{.arm_count = 5, .rounds_needed = 50, .time_per_round = 1,
                     .greedy_hit_prob = 1, .epsilon = 0.0, .preselect_m = 3};
    CHECK(expected_time_karm(p) == doctest::Approx(58.0));
    CHECK(expected_time_nc(p) == doctest::Approx(150.0));
    CHECK(expected_time_preselect(p) == doctest::Approx(106.0));
}

TEST_CASE("degenerate cases") {
    AnalysisParams p{.arm_count = 5, .rounds_needed = 50, .time_per_round = 1,
                     .greedy_hit_prob = 0.0, .epsilon = 0.0};
    CHECK_THROWS_AS(expected_time_karm(p), std::domain_error);

    AnalysisParams single{.arm_count = 1, .rounds_needed = 50, .time_per_round = 1};
    CHECK(expected_time_nc(single) == doctest::Approx(50.0));

    AnalysisParams mixed{.arm_count = 5, .rounds_needed = 50, .time_per_round = 1,
                         .greedy_hit_prob = 0.5, .epsilon = 0.3};
    CHECK(scheduled_prob(mixed) == doctest::Approx(0.41));
    CHECK(expected_time_karm(mixed) == doctest::Approx(10.0 + 48.0 / 0.41));
}

TEST_CASE("m=1 pre-selection equals karm at p_s=1") {
    AnalysisParams p{.arm_count = 7, .rounds_needed = 30, .time_per_round = 2,
                     .greedy_hit_prob = 1.0, .epsilon = 0.0, .preselect_m = 1};
    CHECK(expected_time_preselect(p) == doctest::Approx(expected_time_karm(p)));
}

TEST_CASE("karm beats nc when p = 2/K and R > 2K") {
    // with p_s = 2/K: 2Kt + (R-2)Kt/2 < (K+1)Rt/2 iff 2K < R
    for (int K : {3, 5, 10, 25})
        for (int R : {2 * K + 1, 5 * K, 10 * K}) {
            AnalysisParams p{.arm_count = K, .rounds_needed = R, .time_per_round = 1,
                             .greedy_hit_prob = 2.0 / K, .epsilon = 0.0};
            CHECK(expected_time_karm(p) < expected_time_nc(p));
        }
}

TEST_CASE("karm beats pre-selection when p_s > 2/(m+1)") {
    // 2Kt cancels; (R-2)t/p_s < (m+1)(R-2)t/2 iff p_s > 2/(m+1)
    for (int m : {2, 3, 5}) {
        AnalysisParams p{.arm_count = 10, .rounds_needed = 60, .time_per_round = 1,
                         .greedy_hit_prob = 0.9, .epsilon = 0.1, .preselect_m = m};
        REQUIRE(scheduled_prob(p) > 2.0 / (m + 1));
        CHECK(expected_time_karm(p) < expected_time_preselect(p));
    }
}

TEST_CASE("closed forms are monotone in R and t") {
    AnalysisParams a{.arm_count = 5, .rounds_needed = 20, .time_per_round = 1,
                     .greedy_hit_prob = 0.5, .epsilon = 0.3, .preselect_m = 3};
    auto b = a;
    b.rounds_needed = 21;
    auto c = a;
    c.time_per_round = 1.5;
    CHECK(expected_time_karm(b) > expected_time_karm(a));
    CHECK(expected_time_nc(b) > expected_time_nc(a));
    CHECK(expected_time_preselect(b) > expected_time_preselect(a));
    CHECK(expected_time_karm(c) > expected_time_karm(a));
    CHECK(expected_time_nc(c) > expected_time_nc(a));
    CHECK(expected_time_preselect(c) > expected_time_preselect(a));
}

TEST_CASE("deterministic simulation at p_s = 1") {
    AnalysisParams p{.arm_count = 5, .rounds_needed = 50, .time_per_round = 1,
                     .greedy_hit_prob = 1.0, .epsilon = 0.0};
    auto r = simulate_schedule(p, 100, 9);
    CHECK(r.mean_time == doctest::Approx(58.0));
    CHECK(r.variance == doctest::Approx(0.0));
}

TEST_CASE("simulation matches the closed form within 2% at 1e5 trials") {
    AnalysisParams p{.arm_count = 5, .rounds_needed = 50, .time_per_round = 1,
                     .greedy_hit_prob = 0.5, .epsilon = 0.3};
    auto r = simulate_schedule(p, 100000, 11);
    double expect = expected_time_karm(p);
    CHECK(std::abs(r.mean_time - expect) / expect < 0.02);
}

TEST_CASE("negative-binomial identities") {
    AnalysisParams p{.arm_count = 4, .rounds_needed = 30, .time_per_round = 1,
                     .greedy_hit_prob = 0.4, .epsilon = 0.2};
    double ps = scheduled_prob(p);
    auto r = simulate_schedule(p, 100000, 21);
    double expect_rounds = (p.rounds_needed - 2) / ps;
    double expect_failures = (p.rounds_needed - 2) * (1 - ps) / ps;
    CHECK(std::abs(r.mean_selective_rounds - expect_rounds) / expect_rounds < 0.02);
    CHECK(std::abs(r.mean_failures - expect_failures) / expect_failures < 0.02);
}

TEST_CASE("simulation is order-independent by construction") {
    AnalysisParams p{.arm_count = 3, .rounds_needed = 10, .time_per_round = 1,
                     .greedy_hit_prob = 0.5, .epsilon = 0.1};
    auto a = simulate_schedule(p, 500, 42);
    auto b = simulate_schedule(p, 500, 42);
    CHECK(a.mean_time == b.mean_time);
    CHECK(a.variance == b.variance);
}
