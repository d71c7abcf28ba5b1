#pragma once

#include <vector>

#include "karm/tensor.hpp"

namespace karm {

struct AdamState {
    std::int64_t step_count = 0;
    std::vector<double> first_moment;
    std::vector<double> second_moment;
    double learning_rate = 0.1;
    double beta1 = 0.5;
    double beta2 = 0.9;
    double epsilon_stability = 1e-8;

    static AdamState for_variable(const Tensor& v, double lr, double b1, double b2);
};

/// One bias-corrected Adam update in place; clears the variable's grad.
/// Throws if the grad is absent or the state does not match the variable.
void adam_step(Tensor& variable, AdamState& state);

}  // namespace karm
