#pragma once

#include <optional>
#include <vector>

#include "karm/model.hpp"
#include "karm/optim.hpp"

namespace karm {

struct OptimizerConfig {
    double alpha = 1e-2;          // L1 weight in the round loss
    double asr_threshold = 0.99;  // valid-trigger attack success rate
    int epochs_per_round = 10;
    double learning_rate = 0.1;
    double beta1 = 0.5;
    double beta2 = 0.9;
    double mask_logit_init = -2.0;
    double pattern_logit_init = 0.0;
};

/// Trigger under optimization. The mask M = sigmoid(mask_logits) and the
/// pattern P = sigmoid(pattern_logits) live in [0,1] by construction;
/// the optimizer works on the unconstrained logits.
struct Trigger {
    Tensor mask_logits;     // (C,H,W)
    Tensor pattern_logits;  // (C,H,W)
    AdamState mask_state;
    AdamState pattern_state;

    static Trigger init(const InputShape& in, const OptimizerConfig& cfg);

    std::vector<double> mask_values() const;
    std::vector<double> pattern_values() const;
    /// L1 norm of M over all C*H*W cells.
    double trigger_size() const;
};

struct RoundResult {
    bool improved = false;
    double new_size = 0.0;  // valid only when improved
    int epochs_used = 0;
    double asr_achieved = 0.0;
};

/// (1-M)*x + M*P with full autodiff recording. x is (B,C,H,W); mask and
/// pattern are (C,H,W), broadcast over the batch.
Tensor stamp(const Tensor& x, const Tensor& mask, const Tensor& pattern);

/// Out-of-graph stamping of one (C,H,W) image with current trigger values.
Tensor stamp_image(const Tensor& x, const Trigger& trigger);

/// Fraction of X classified as `target` after stamping. Ties in the argmax
/// go to the lowest label index.
double attack_success_rate(const Model& model, const std::vector<Tensor>& X,
                           const Trigger& trigger, int target);

/// The per-round loss: cross_entropy(target, F(stamp(X))) + alpha*||M||_1.
Tensor round_loss(const Model& model, const Tensor& batch, int target,
                  const Trigger& trigger, double alpha);

/// One optimization round. Evaluates the trigger at each epoch, returning
/// Improved as soon as ASR >= threshold and the size beats
/// `previous_valid_size` (no size condition when there is no previous valid
/// trigger); otherwise runs an Adam epoch. Fails once the epoch budget is
/// spent. The trigger state is mutated in place and resumes across rounds.
RoundResult run_round(const Model& model, const std::vector<Tensor>& X, int target,
                      Trigger& trigger, const OptimizerConfig& cfg,
                      std::optional<double> previous_valid_size);

}  // namespace karm
