#include "karm/model.hpp"

#include "karm/optim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace karm {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'K', 'A', 'R', 'M', 'M', 'O', 'D', 'L'};
constexpr std::uint32_t kVersion = 1;

json layer_to_json(const LayerSpec& l) {
    switch (l.kind) {
        case LayerSpec::Kind::Conv2d:
            return {{"type", "conv2d"}, {"kernel", l.kernel}, {"in", l.in}, {"out", l.out}};
        case LayerSpec::Kind::Relu:
            return {{"type", "relu"}};
        case LayerSpec::Kind::Flatten:
            return {{"type", "flatten"}};
        case LayerSpec::Kind::Dense:
            return {{"type", "dense"}, {"in", l.in}, {"out", l.out}};
    }
    throw std::logic_error("unknown layer kind");
}

LayerSpec layer_from_json(const json& j) {
    std::string t = j.at("type");
    if (t == "conv2d") return LayerSpec::conv2d(j.at("kernel"), j.at("in"), j.at("out"));
    if (t == "relu") return LayerSpec::relu();
    if (t == "flatten") return LayerSpec::flatten();
    if (t == "dense") return LayerSpec::dense(j.at("in"), j.at("out"));
    throw std::runtime_error("model header: unknown layer type '" + t + "'");
}

// shapes of {weight, bias} for each parametric layer, with shape checking
// against the input shape chain
std::vector<std::vector<std::vector<int>>> param_shapes(const std::vector<LayerSpec>& layers,
                                                        const InputShape& in, int num_classes) {
    std::vector<std::vector<std::vector<int>>> out;
    int c = in.channels, h = in.height, w = in.width;
    bool flat = false;
    int flat_len = 0;
    for (const auto& l : layers) {
        switch (l.kind) {
            case LayerSpec::Kind::Conv2d:
                if (flat || c != l.in)
                    throw std::invalid_argument("conv2d layer expects " + std::to_string(l.in) +
                                                " channels, got " + std::to_string(c));
                out.push_back({{l.out, l.in, l.kernel, l.kernel}, {l.out}});
                c = l.out;
                h -= l.kernel - 1;
                w -= l.kernel - 1;
                if (h <= 0 || w <= 0)
                    throw std::invalid_argument("conv2d output shape is empty");
                break;
            case LayerSpec::Kind::Relu:
                break;
            case LayerSpec::Kind::Flatten:
                flat = true;
                flat_len = c * h * w;
                break;
            case LayerSpec::Kind::Dense:
                if (!flat || flat_len != l.in)
                    throw std::invalid_argument("dense layer expects " + std::to_string(l.in) +
                                                " inputs, got " + std::to_string(flat_len));
                out.push_back({{l.in, l.out}, {l.out}});
                flat_len = l.out;
                break;
        }
    }
    if (!flat || flat_len != num_classes)
        throw std::invalid_argument("final layer output " + std::to_string(flat_len) +
                                    " does not match num_classes " + std::to_string(num_classes));
    return out;
}

}  // namespace

std::vector<LayerSpec> default_arch(const InputShape& in, int num_classes) {
    int h = in.height - 4, w = in.width - 4;
    return {LayerSpec::conv2d(3, in.channels, 8), LayerSpec::relu(),
            LayerSpec::conv2d(3, 8, 16),          LayerSpec::relu(),
            LayerSpec::flatten(),                 LayerSpec::dense(16 * h * w, num_classes)};
}

Model init_model(const std::vector<LayerSpec>& arch, const InputShape& in,
                 int num_classes, std::uint64_t seed) {
    Model m;
    m.layers = arch;
    m.num_classes = num_classes;
    m.input_shape = in;
    std::mt19937_64 rng(seed);
    for (const auto& shapes : param_shapes(arch, in, num_classes)) {
        const auto& wshape = shapes[0];
        // fan-in: all dims but the output one
        std::int64_t fan_in;
        if (wshape.size() == 4) fan_in = static_cast<std::int64_t>(wshape[1]) * wshape[2] * wshape[3];
        else fan_in = wshape[0];
        double std_dev = std::sqrt(2.0 / static_cast<double>(fan_in));
        std::normal_distribution<double> dist(0.0, std_dev);
        std::int64_t n = 1;
        for (int d : wshape) n *= d;
        std::vector<double> wd(n);
        for (auto& v : wd) v = dist(rng);
        m.parameters.push_back(Tensor::from_data(wshape, std::move(wd), true));
        m.parameters.push_back(Tensor::zeros(shapes[1], true));
    }
    return m;
}

Tensor stack_batch(const std::vector<Tensor>& images) {
    if (images.empty()) throw std::invalid_argument("stack_batch: empty image list");
    const auto& s = images[0].shape();
    std::vector<int> shape{static_cast<int>(images.size())};
    shape.insert(shape.end(), s.begin(), s.end());
    std::vector<double> data;
    data.reserve(images.size() * images[0].size());
    for (const auto& im : images) {
        if (im.shape() != s)
            throw std::invalid_argument("stack_batch: inconsistent shapes " + shape_str(s) +
                                        " vs " + shape_str(im.shape()));
        data.insert(data.end(), im.data().begin(), im.data().end());
    }
    return Tensor::from_data(std::move(shape), std::move(data));
}

Tensor predict_logits(const Model& model, const Tensor& batch) {
    if (batch.shape().size() != 4 || batch.shape()[1] != model.input_shape.channels ||
        batch.shape()[2] != model.input_shape.height ||
        batch.shape()[3] != model.input_shape.width)
        throw std::invalid_argument(
            "predict_logits: batch " + shape_str(batch.shape()) + " does not match input shape (" +
            std::to_string(model.input_shape.channels) + "," +
            std::to_string(model.input_shape.height) + "," +
            std::to_string(model.input_shape.width) + ")");
    Tensor h = batch;
    size_t p = 0;
    for (const auto& l : model.layers) {
        switch (l.kind) {
            case LayerSpec::Kind::Conv2d:
                h = conv2d(h, model.parameters[p], model.parameters[p + 1]);
                p += 2;
                break;
            case LayerSpec::Kind::Relu:
                h = relu(h);
                break;
            case LayerSpec::Kind::Flatten: {
                int b = h.shape()[0];
                h = reshape(h, {b, static_cast<int>(h.size() / b)});
                break;
            }
            case LayerSpec::Kind::Dense:
                h = add(matmul(h, model.parameters[p]), model.parameters[p + 1]);
                p += 2;
                break;
        }
    }
    return h;
}

int argmax_label(const double* logits, int n) {
    int best = 0;
    for (int j = 1; j < n; ++j)
        if (logits[j] > logits[best]) best = j;
    return best;
}

std::vector<int> predict_labels(const Model& model, const std::vector<Tensor>& images) {
    std::vector<int> out;
    out.reserve(images.size());
    // batch in chunks to bound memory
    const size_t chunk = 64;
    for (size_t i = 0; i < images.size(); i += chunk) {
        std::vector<Tensor> part(images.begin() + i,
                                 images.begin() + std::min(i + chunk, images.size()));
        Tensor logits = predict_logits(model, stack_batch(part));
        int n = model.num_classes;
        for (size_t b = 0; b < part.size(); ++b)
            out.push_back(argmax_label(&logits.data()[b * n], n));
    }
    return out;
}

double accuracy(const Model& model, const LabeledDataset& data) {
    auto pred = predict_labels(model, data.images);
    size_t hit = 0;
    for (size_t i = 0; i < pred.size(); ++i)
        if (pred[i] == data.labels[i]) ++hit;
    return data.size() ? static_cast<double>(hit) / data.size() : 0.0;
}

double dataset_loss(const Model& model, const LabeledDataset& data) {
    Tensor logits = predict_logits(model, stack_batch(data.images));
    return softmax_cross_entropy(logits, data.labels).item();
}

Model train_model(const LabeledDataset& dataset, const std::vector<LayerSpec>& arch,
                  const InputShape& in, int num_classes, std::uint64_t seed,
                  const TrainConfig& cfg) {
    if (dataset.images.empty()) throw std::invalid_argument("train_model: empty dataset");
    for (int y : dataset.labels)
        if (y < 0 || y >= num_classes)
            throw std::invalid_argument("train_model: label " + std::to_string(y) +
                                        " out of range [0," + std::to_string(num_classes) + ")");

    Model model = init_model(arch, in, num_classes, seed);
    if (cfg.epochs == 0) return model;

    std::vector<AdamState> states;
    for (auto& p : model.parameters)
        states.push_back(AdamState::for_variable(p, cfg.learning_rate, cfg.beta1, cfg.beta2));

    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
            size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<Tensor> imgs;
            std::vector<int> labels;
            for (size_t i = start; i < end; ++i) {
                imgs.push_back(dataset.images[order[i]]);
                labels.push_back(dataset.labels[order[i]]);
            }
            Tensor logits = predict_logits(model, stack_batch(imgs));
            Tensor loss = softmax_cross_entropy(logits, labels);
            if (cfg.adaptive_coefficient > 0.0 && cfg.adaptive_target >= 0) {
                // suppress the target label's logit on benign victim-class samples
                int B = static_cast<int>(labels.size());
                std::vector<double> sel(static_cast<size_t>(B) * num_classes, 0.0);
                int count = 0;
                for (int i = 0; i < B; ++i)
                    if (labels[i] == cfg.adaptive_victim) {
                        sel[i * num_classes + cfg.adaptive_target] = 1.0;
                        ++count;
                    }
                if (count > 0) {
                    Tensor mask = Tensor::from_data({B, num_classes}, std::move(sel));
                    Tensor picked = mul_elementwise(logits, mask);
                    Tensor sq = mul_elementwise(picked, picked);
                    loss = add(loss, scale(sum(sq), cfg.adaptive_coefficient / count));
                }
            }
            backward(loss);
            for (size_t p = 0; p < model.parameters.size(); ++p)
                adam_step(model.parameters[p], states[p]);
        }
    }
    return model;
}

void save_model(const Model& model, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_model: cannot open " + path);
    f.write(kMagic, 8);
    auto write_u32 = [&](std::uint32_t v) {
        unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16),
                              static_cast<unsigned char>(v >> 24)};
        f.write(reinterpret_cast<char*>(b), 4);
    };
    write_u32(kVersion);
    json header;
    header["layers"] = json::array();
    for (const auto& l : model.layers) header["layers"].push_back(layer_to_json(l));
    header["num_classes"] = model.num_classes;
    header["input_shape"] = {model.input_shape.channels, model.input_shape.height,
                             model.input_shape.width};
    std::string htxt = header.dump();
    write_u32(static_cast<std::uint32_t>(htxt.size()));
    f.write(htxt.data(), htxt.size());
    for (const auto& p : model.parameters)
        for (double v : p.data()) {
            float fv = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &fv, 4);
            write_u32(bits);
        }
    if (!f) throw std::runtime_error("save_model: write failed for " + path);
}

Model load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_model: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_model: bad magic at offset 0 in " + path);
    auto read_u32 = [&]() {
        unsigned char b[4];
        f.read(reinterpret_cast<char*>(b), 4);
        if (!f) throw std::runtime_error("load_model: truncated file " + path);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    };
    std::uint32_t version = read_u32();
    if (version != kVersion)
        throw std::runtime_error("load_model: unsupported format version " +
                                 std::to_string(version));
    std::uint32_t hlen = read_u32();
    std::string htxt(hlen, '\0');
    f.read(htxt.data(), hlen);
    if (!f) throw std::runtime_error("load_model: truncated header in " + path);
    json header = json::parse(htxt);

    Model m;
    for (const auto& j : header.at("layers")) m.layers.push_back(layer_from_json(j));
    m.num_classes = header.at("num_classes");
    auto is = header.at("input_shape");
    m.input_shape = {is.at(0), is.at(1), is.at(2)};

    // validates header consistency (e.g. N vs final layer width)
    auto shapes = param_shapes(m.layers, m.input_shape, m.num_classes);
    for (const auto& pair : shapes)
        for (const auto& shape : pair) {
            std::int64_t n = 1;
            for (int d : shape) n *= d;
            std::vector<double> data(n);
            for (auto& v : data) {
                std::uint32_t bits = read_u32();
                float fv;
                std::memcpy(&fv, &bits, 4);
                v = static_cast<double>(fv);
            }
            m.parameters.push_back(Tensor::from_data(shape, std::move(data), true));
        }
    return m;
}

}  // namespace karm
