#include "karm/trigger.hpp"

#include <cmath>
#include <stdexcept>

namespace karm {

Trigger Trigger::init(const InputShape& in, const OptimizerConfig& cfg) {
    Trigger t;
    std::vector<int> shape{in.channels, in.height, in.width};
    t.mask_logits = Tensor::full(shape, cfg.mask_logit_init, true);
    t.pattern_logits = Tensor::full(shape, cfg.pattern_logit_init, true);
    t.mask_state = AdamState::for_variable(t.mask_logits, cfg.learning_rate, cfg.beta1, cfg.beta2);
    t.pattern_state =
        AdamState::for_variable(t.pattern_logits, cfg.learning_rate, cfg.beta1, cfg.beta2);
    return t;
}

std::vector<double> Trigger::mask_values() const {
    std::vector<double> m(mask_logits.data());
    for (auto& v : m) v = 1.0 / (1.0 + std::exp(-v));
    return m;
}

std::vector<double> Trigger::pattern_values() const {
    std::vector<double> p(pattern_logits.data());
    for (auto& v : p) v = 1.0 / (1.0 + std::exp(-v));
    return p;
}

double Trigger::trigger_size() const {
    double s = 0.0;
    for (double v : mask_logits.data()) s += 1.0 / (1.0 + std::exp(-v));
    return s;
}

Tensor stamp(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
    if (mask.shape() != pattern.shape())
        throw std::invalid_argument("stamp: mask " + shape_str(mask.shape()) +
                                    " vs pattern " + shape_str(pattern.shape()));
    if (x.shape().size() != 4)
        throw std::invalid_argument("stamp: batch must be 4-d, got " + shape_str(x.shape()));
    int B = x.shape()[0];
    Tensor mb = repeat_batch(mask, B);
    Tensor pb = repeat_batch(pattern, B);
    // x - M*x + M*P
    return add(add(x, scale(mul_elementwise(mb, x), -1.0)), mul_elementwise(mb, pb));
}

Tensor stamp_image(const Tensor& x, const Trigger& trigger) {
    auto m = trigger.mask_values();
    auto p = trigger.pattern_values();
    std::vector<double> out(x.data());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 - m[i]) * out[i] + m[i] * p[i];
    return Tensor::from_data(x.shape(), std::move(out));
}

double attack_success_rate(const Model& model, const std::vector<Tensor>& X,
                           const Trigger& trigger, int target) {
    if (X.empty()) throw std::invalid_argument("attack_success_rate: empty input set");
    std::vector<Tensor> stamped;
    stamped.reserve(X.size());
    for (const auto& x : X) stamped.push_back(stamp_image(x, trigger));
    auto pred = predict_labels(model, stamped);
    size_t hit = 0;
    for (int p : pred)
        if (p == target) ++hit;
    return static_cast<double>(hit) / pred.size();
}

Tensor round_loss(const Model& model, const Tensor& batch, int target,
                  const Trigger& trigger, double alpha) {
    Tensor mask = sigmoid(trigger.mask_logits);
    Tensor pattern = sigmoid(trigger.pattern_logits);
    Tensor stamped = stamp(batch, mask, pattern);
    Tensor logits = predict_logits(model, stamped);
    std::vector<int> labels(batch.shape()[0], target);
    return add(softmax_cross_entropy(logits, labels), scale(l1_norm(mask), alpha));
}

RoundResult run_round(const Model& model, const std::vector<Tensor>& X, int target,
                      Trigger& trigger, const OptimizerConfig& cfg,
                      std::optional<double> previous_valid_size) {
    if (X.empty()) throw std::invalid_argument("run_round: empty input set");
    Tensor batch = stack_batch(X);

    RoundResult res;
    for (int epoch = 1; epoch <= cfg.epochs_per_round; ++epoch) {
        double asr = attack_success_rate(model, X, trigger, target);
        double size = trigger.trigger_size();
        res.asr_achieved = asr;
        bool valid = asr >= cfg.asr_threshold &&
                     (!previous_valid_size || size < *previous_valid_size);
        if (valid) {
            res.improved = true;
            res.new_size = size;
            res.epochs_used = epoch;
            return res;
        }
        Tensor loss = round_loss(model, batch, target, trigger, cfg.alpha);
        backward(loss);
        adam_step(trigger.mask_logits, trigger.mask_state);
        adam_step(trigger.pattern_logits, trigger.pattern_state);
    }
    res.epochs_used = cfg.epochs_per_round;
    return res;
}

}  // namespace karm
