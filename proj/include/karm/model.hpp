#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "karm/tensor.hpp"

namespace karm {

struct LayerSpec {
    enum class Kind { Conv2d, Relu, Flatten, Dense };
    Kind kind;
    // Conv2d: kernel, in_ch, out_ch. Dense: in, out.
    int kernel = 0;
    int in = 0;
    int out = 0;

    static LayerSpec conv2d(int kernel, int in_ch, int out_ch) {
        return {Kind::Conv2d, kernel, in_ch, out_ch};
    }
    static LayerSpec relu() { return {Kind::Relu}; }
    static LayerSpec flatten() { return {Kind::Flatten}; }
    static LayerSpec dense(int in, int out) { return {Kind::Dense, 0, in, out}; }

    bool operator==(const LayerSpec&) const = default;
};

struct InputShape {
    int channels = 3;
    int height = 16;
    int width = 16;
    bool operator==(const InputShape&) const = default;
};

/// Classifier under scan: ordered layers plus their parameter tensors.
/// Immutable after training; safe to share read-only across scans.
struct Model {
    std::vector<LayerSpec> layers;
    // one entry per parametric layer, in layer order: {weight, bias}
    std::vector<Tensor> parameters;
    int num_classes = 0;
    InputShape input_shape;
};

struct LabeledDataset {
    std::vector<Tensor> images;  // each (C,H,W), values in [0,1]
    std::vector<int> labels;
    int num_classes = 0;

    size_t size() const { return images.size(); }
};

struct TrainConfig {
    int epochs = 40;
    int batch_size = 20;
    double learning_rate = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    // adaptive logit suppression: coef * mean(target_logit^2) over benign
    // victim-class samples, added to the training loss
    double adaptive_coefficient = 0.0;
    int adaptive_target = -1;
    int adaptive_victim = -1;
};

/// Default desk-scale architecture for the given input shape / class count:
/// conv3x3(C->8), relu, conv3x3(8->16), relu, flatten, dense(->N).
std::vector<LayerSpec> default_arch(const InputShape& in, int num_classes);

/// Seeded random initialization of all parameters (no training).
Model init_model(const std::vector<LayerSpec>& arch, const InputShape& in,
                 int num_classes, std::uint64_t seed);

/// Pre-softmax logits, shape (batch, N). `batch` is (B,C,H,W).
Tensor predict_logits(const Model& model, const Tensor& batch);

/// Stacks (C,H,W) images into a (B,C,H,W) batch tensor.
Tensor stack_batch(const std::vector<Tensor>& images);

/// argmax with ties broken toward the lowest label index
int argmax_label(const double* logits, int n);

std::vector<int> predict_labels(const Model& model, const std::vector<Tensor>& images);

double accuracy(const Model& model, const LabeledDataset& data);

Model train_model(const LabeledDataset& dataset, const std::vector<LayerSpec>& arch,
                  const InputShape& in, int num_classes, std::uint64_t seed,
                  const TrainConfig& cfg = {});

/// Mean softmax cross-entropy over the whole dataset.
double dataset_loss(const Model& model, const LabeledDataset& data);

void save_model(const Model& model, const std::string& path);
Model load_model(const std::string& path);

}  // namespace karm
