#include "karm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace karm {

AdamState AdamState::for_variable(const Tensor& v, double lr, double b1, double b2) {
    AdamState s;
    s.first_moment.assign(v.size(), 0.0);
    s.second_moment.assign(v.size(), 0.0);
    s.learning_rate = lr;
    s.beta1 = b1;
    s.beta2 = b2;
    return s;
}

void adam_step(Tensor& variable, AdamState& state) {
    if (!variable.has_grad())
        throw std::invalid_argument("adam_step: variable has no grad");
    if (state.first_moment.size() != variable.data().size())
        throw std::invalid_argument("adam_step: state size does not match variable");

    state.step_count += 1;
    double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step_count));
    double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step_count));
    auto& d = variable.data();
    const auto& g = variable.grad();
    for (size_t i = 0; i < d.size(); ++i) {
        double m = state.first_moment[i] = state.beta1 * state.first_moment[i] +
                                           (1.0 - state.beta1) * g[i];
        double v = state.second_moment[i] = state.beta2 * state.second_moment[i] +
                                            (1.0 - state.beta2) * g[i] * g[i];
        double mhat = m / bc1;
        double vhat = v / bc2;
        d[i] -= state.learning_rate * mhat / (std::sqrt(vhat) + state.epsilon_stability);
    }
    variable.clear_grad();
}

}  // namespace karm
