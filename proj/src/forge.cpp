#include "karm/forge.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

#include <json.hpp>

namespace karm {

namespace {

using nlohmann::json;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    // splitmix64
    std::uint64_t z = seed + salt * 0x9e3779b97f4a7c15ull + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

json attack_to_json(const AttackSpec& a) {
    json j;
    switch (a.kind) {
        case AttackSpec::Kind::Universal: j["kind"] = "universal"; break;
        case AttackSpec::Kind::LabelSpecific: j["kind"] = "label_specific"; break;
        case AttackSpec::Kind::Adaptive: j["kind"] = "adaptive"; break;
    }
    j["target_label"] = a.target_label;
    if (a.victim_label >= 0) j["victim_label"] = a.victim_label;
    j["patch"] = {{"row", a.patch.row}, {"col", a.patch.col}, {"side", a.patch.side},
                  {"pattern", a.patch.pattern}};
    j["poison_fraction"] = a.poison_fraction;
    j["adaptive_coefficient"] = a.adaptive_coefficient;
    j["seed"] = a.seed;
    return j;
}

AttackSpec attack_from_json(const json& j) {
    AttackSpec a;
    std::string k = j.at("kind");
    if (k == "universal") a.kind = AttackSpec::Kind::Universal;
    else if (k == "label_specific") a.kind = AttackSpec::Kind::LabelSpecific;
    else if (k == "adaptive") a.kind = AttackSpec::Kind::Adaptive;
    else throw std::runtime_error("manifest: unknown attack kind '" + k + "'");
    a.target_label = j.at("target_label");
    a.victim_label = j.value("victim_label", -1);
    const auto& p = j.at("patch");
    a.patch.row = p.at("row");
    a.patch.col = p.at("col");
    a.patch.side = p.at("side");
    a.patch.pattern = p.at("pattern").get<std::vector<double>>();
    a.poison_fraction = j.at("poison_fraction");
    a.adaptive_coefficient = j.at("adaptive_coefficient");
    a.seed = j.at("seed");
    return a;
}

}  // namespace

std::vector<double> class_signature(const SyntheticSpec& spec, int cls) {
    const int C = spec.input_shape.channels, H = spec.input_shape.height,
              W = spec.input_shape.width;
    const int grid = 4;
    if (H < grid || W < grid)
        throw std::invalid_argument("generate_dataset: input " + std::to_string(H) + "x" +
                                    std::to_string(W) + " smaller than signature footprint");
    std::mt19937_64 rng(mix_seed(spec.seed, 0xc1a55ull + cls));
    std::uniform_real_distribution<double> cell(0.1, 0.9);
    std::vector<double> coarse(static_cast<size_t>(C) * grid * grid);
    for (auto& v : coarse) v = cell(rng);
    std::vector<double> sig(static_cast<size_t>(C) * H * W);
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                int gh = h * grid / H, gw = w * grid / W;
                sig[(c * H + h) * W + w] = coarse[(c * grid + gh) * grid + gw];
            }
    return sig;
}

LabeledDataset generate_dataset(const SyntheticSpec& spec) {
    if (spec.num_classes < 2 || spec.samples_per_class < 1)
        throw std::invalid_argument("generate_dataset: need >= 2 classes and >= 1 sample/class");
    const int C = spec.input_shape.channels, H = spec.input_shape.height,
              W = spec.input_shape.width;

    std::vector<std::vector<double>> sigs;
    for (int cls = 0; cls < spec.num_classes; ++cls)
        sigs.push_back(class_signature(spec, cls));
    // distinctness floor between class signatures
    for (size_t a = 0; a < sigs.size(); ++a)
        for (size_t b = a + 1; b < sigs.size(); ++b) {
            double d2 = 0.0;
            for (size_t i = 0; i < sigs[a].size(); ++i) {
                double d = sigs[a][i] - sigs[b][i];
                d2 += d * d;
            }
            if (std::sqrt(d2) < 1.0)
                throw std::runtime_error("generate_dataset: degenerate class signatures " +
                                         std::to_string(a) + "," + std::to_string(b));
        }

    LabeledDataset out;
    out.num_classes = spec.num_classes;
    std::mt19937_64 rng(mix_seed(spec.seed, spec.noise_salt));
    std::normal_distribution<double> noise(0.0, 1.0);
    for (int cls = 0; cls < spec.num_classes; ++cls)
        for (int s = 0; s < spec.samples_per_class; ++s) {
            std::vector<double> img(sigs[cls]);
            if (spec.background_noise_std > 0.0)
                for (auto& v : img)
                    v = std::clamp(v + spec.background_noise_std * noise(rng), 0.0, 1.0);
            out.images.push_back(Tensor::from_data({C, H, W}, std::move(img)));
            out.labels.push_back(cls);
        }
    return out;
}

GroundTruthTrigger trigger_from_patch(const PatchSpec& patch, const InputShape& in) {
    const int C = in.channels, H = in.height, W = in.width;
    GroundTruthTrigger t;
    t.mask.assign(static_cast<size_t>(C) * H * W, 0.0);
    t.pattern.assign(static_cast<size_t>(C) * H * W, 0.0);
    for (int c = 0; c < C; ++c)
        for (int r = 0; r < patch.side; ++r)
            for (int q = 0; q < patch.side; ++q) {
                size_t idx = (static_cast<size_t>(c) * H + patch.row + r) * W + patch.col + q;
                t.mask[idx] = 1.0;
                t.pattern[idx] = patch.pattern[(c * patch.side + r) * patch.side + q];
            }
    return t;
}

Tensor stamp_raw(const Tensor& image, const GroundTruthTrigger& trigger) {
    std::vector<double> out(image.data());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = (1.0 - trigger.mask[i]) * out[i] + trigger.mask[i] * trigger.pattern[i];
    return Tensor::from_data(image.shape(), std::move(out));
}

LabeledDataset poison(const LabeledDataset& dataset, const AttackSpec& attack,
                      const InputShape& in) {
    if (attack.target_label < 0 || attack.target_label >= dataset.num_classes)
        throw std::invalid_argument("poison: target label out of range");
    bool label_specific = attack.kind != AttackSpec::Kind::Universal;
    if (label_specific) {
        if (attack.victim_label < 0 || attack.victim_label >= dataset.num_classes)
            throw std::invalid_argument("poison: victim label out of range");
        if (attack.victim_label == attack.target_label)
            throw std::invalid_argument("poison: victim equals target");
    }
    if (static_cast<double>(attack.patch.side) * attack.patch.side >
        0.10 * in.height * in.width)
        throw std::invalid_argument("poison: patch footprint exceeds 10% of the image");

    std::vector<size_t> eligible;
    for (size_t i = 0; i < dataset.size(); ++i) {
        if (label_specific ? dataset.labels[i] == attack.victim_label
                           : dataset.labels[i] != attack.target_label)
            eligible.push_back(i);
    }
    size_t count = std::max<size_t>(
        1, static_cast<size_t>(attack.poison_fraction * eligible.size()));
    count = std::min(count, eligible.size());
    std::mt19937_64 rng(mix_seed(attack.seed, 0x1707ull));
    std::shuffle(eligible.begin(), eligible.end(), rng);

    GroundTruthTrigger trig = trigger_from_patch(attack.patch, in);
    LabeledDataset out = dataset;
    for (size_t k = 0; k < count; ++k) {
        out.images.push_back(stamp_raw(dataset.images[eligible[k]], trig));
        out.labels.push_back(attack.target_label);
    }
    return out;
}

namespace {

AttackSpec make_attack(AttackSpec::Kind kind, const SyntheticSpec& spec, int patch_side,
                       double poison_fraction, double adaptive_coef, std::mt19937_64& rng) {
    AttackSpec a;
    a.kind = kind;
    a.poison_fraction = poison_fraction;
    a.seed = rng();
    std::uniform_int_distribution<int> label(0, spec.num_classes - 1);
    a.target_label = label(rng);
    if (kind != AttackSpec::Kind::Universal) {
        do {
            a.victim_label = label(rng);
        } while (a.victim_label == a.target_label);
    }
    if (kind == AttackSpec::Kind::Adaptive) a.adaptive_coefficient = adaptive_coef;
    const int H = spec.input_shape.height, W = spec.input_shape.width;
    std::uniform_int_distribution<int> row(0, H - patch_side), col(0, W - patch_side);
    a.patch.row = row(rng);
    a.patch.col = col(rng);
    a.patch.side = patch_side;
    a.patch.pattern.resize(static_cast<size_t>(spec.input_shape.channels) * patch_side *
                           patch_side);
    // high-contrast checker-ish pattern; random bright/dark cells
    std::uniform_int_distribution<int> coin(0, 1);
    for (auto& v : a.patch.pattern) v = coin(rng) ? 0.95 : 0.05;
    return a;
}

double measure_asr(const Model& model, const LabeledDataset& heldout,
                   const AttackSpec& attack, const InputShape& in) {
    GroundTruthTrigger trig = trigger_from_patch(attack.patch, in);
    std::vector<Tensor> stamped;
    for (size_t i = 0; i < heldout.size(); ++i) {
        bool eligible = attack.kind == AttackSpec::Kind::Universal
                            ? heldout.labels[i] != attack.target_label
                            : heldout.labels[i] == attack.victim_label;
        if (eligible) stamped.push_back(stamp_raw(heldout.images[i], trig));
    }
    if (stamped.empty()) return 0.0;
    auto pred = predict_labels(model, stamped);
    size_t hit = 0;
    for (int p : pred)
        if (p == attack.target_label) ++hit;
    return static_cast<double>(hit) / pred.size();
}

}  // namespace

ZooManifest forge_zoo(const ForgeCounts& counts, const ForgeConfig& cfg,
                      std::uint64_t seed, const std::string& out_dir) {
    std::filesystem::create_directories(out_dir);
    ZooManifest zoo;
    zoo.dataset_spec = cfg.dataset;

    LabeledDataset clean = generate_dataset(cfg.dataset);
    SyntheticSpec heldout_spec = cfg.dataset;
    heldout_spec.noise_salt = 0x4e1d0;  // fresh noise, same class signatures
    LabeledDataset heldout = generate_dataset(heldout_spec);

    std::mt19937_64 attack_rng(mix_seed(seed, 0xa77acull));
    int idx = 0;
    auto forge_one = [&](bool trojaned, AttackSpec::Kind kind) {
        ZooEntry e;
        e.model_id = (trojaned ? "trojaned_" : "clean_") + std::to_string(idx);
        e.model_path = "model_" + std::to_string(idx) + ".karm";
        e.train_seed = mix_seed(seed, 0x7121ull + idx);
        TrainConfig tc = cfg.train;
        LabeledDataset train_set = clean;
        if (trojaned) {
            AttackSpec a = make_attack(kind, cfg.dataset, cfg.patch_side, cfg.poison_fraction,
                                       counts.adaptive_coefficient, attack_rng);
            if (kind == AttackSpec::Kind::Adaptive) {
                tc.adaptive_coefficient = a.adaptive_coefficient;
                tc.adaptive_target = a.target_label;
                tc.adaptive_victim = a.victim_label;
            }
            train_set = poison(clean, a, cfg.dataset.input_shape);
            e.attack = a;
            e.ground_truth_trigger = trigger_from_patch(a.patch, cfg.dataset.input_shape);
            e.is_trojaned = true;
        }
        // robustness augmentation: random patches that do not change the label
        if (cfg.augment_copies > 0) {
            std::mt19937_64 aug_rng(mix_seed(e.train_seed, 0xa09ull));
            const int H = cfg.dataset.input_shape.height, W = cfg.dataset.input_shape.width;
            std::uniform_int_distribution<int> row(0, H - cfg.patch_side);
            std::uniform_int_distribution<int> col(0, W - cfg.patch_side);
            std::uniform_int_distribution<int> coin(0, 1);
            for (int k = 0; k < cfg.augment_copies; ++k)
                for (size_t i = 0; i < clean.size(); ++i) {
                    PatchSpec p;
                    p.side = cfg.patch_side;
                    p.row = row(aug_rng);
                    p.col = col(aug_rng);
                    p.pattern.resize(
                        static_cast<size_t>(cfg.dataset.input_shape.channels) * p.side * p.side);
                    for (auto& v : p.pattern) v = coin(aug_rng) ? 0.95 : 0.05;
                    train_set.images.push_back(stamp_raw(
                        clean.images[i], trigger_from_patch(p, cfg.dataset.input_shape)));
                    train_set.labels.push_back(clean.labels[i]);
                }
        }
        auto arch = default_arch(cfg.dataset.input_shape, cfg.dataset.num_classes);
        Model m = train_model(train_set, arch, cfg.dataset.input_shape,
                              cfg.dataset.num_classes, e.train_seed, tc);
        e.clean_accuracy = accuracy(m, heldout);
        if (trojaned)
            e.attack_success_rate = measure_asr(m, heldout, *e.attack, cfg.dataset.input_shape);
        save_model(m, out_dir + "/" + e.model_path);
        zoo.entries.push_back(std::move(e));
        ++idx;
    };

    for (int i = 0; i < counts.n_clean; ++i) forge_one(false, AttackSpec::Kind::Universal);
    for (int i = 0; i < counts.n_universal; ++i) forge_one(true, AttackSpec::Kind::Universal);
    for (int i = 0; i < counts.n_label_specific; ++i)
        forge_one(true, AttackSpec::Kind::LabelSpecific);
    for (int i = 0; i < counts.n_adaptive; ++i) forge_one(true, AttackSpec::Kind::Adaptive);
    return zoo;
}

void save_manifest(const ZooManifest& manifest, const std::string& path) {
    json j;
    j["dataset_spec"] = {
        {"num_classes", manifest.dataset_spec.num_classes},
        {"channels", manifest.dataset_spec.input_shape.channels},
        {"height", manifest.dataset_spec.input_shape.height},
        {"width", manifest.dataset_spec.input_shape.width},
        {"samples_per_class", manifest.dataset_spec.samples_per_class},
        {"background_noise_std", manifest.dataset_spec.background_noise_std},
        {"seed", manifest.dataset_spec.seed}};
    j["entries"] = json::array();
    for (const auto& e : manifest.entries) {
        json je;
        je["model_id"] = e.model_id;
        je["model_path"] = e.model_path;
        je["is_trojaned"] = e.is_trojaned;
        if (e.attack) je["attack"] = attack_to_json(*e.attack);
        if (e.ground_truth_trigger)
            je["ground_truth_trigger"] = {{"mask", e.ground_truth_trigger->mask},
                                          {"pattern", e.ground_truth_trigger->pattern}};
        je["clean_accuracy"] = e.clean_accuracy;
        je["attack_success_rate"] = e.attack_success_rate;
        je["train_seed"] = e.train_seed;
        j["entries"].push_back(std::move(je));
    }
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
    f << j.dump(2) << "\n";
}

ZooManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
    json j = json::parse(f);
    ZooManifest m;
    const auto& ds = j.at("dataset_spec");
    m.dataset_spec.num_classes = ds.at("num_classes");
    m.dataset_spec.input_shape = {ds.at("channels"), ds.at("height"), ds.at("width")};
    m.dataset_spec.samples_per_class = ds.at("samples_per_class");
    m.dataset_spec.background_noise_std = ds.at("background_noise_std");
    m.dataset_spec.seed = ds.at("seed");
    for (const auto& je : j.at("entries")) {
        ZooEntry e;
        e.model_id = je.at("model_id");
        e.model_path = je.at("model_path");
        e.is_trojaned = je.at("is_trojaned");
        if (je.contains("attack")) e.attack = attack_from_json(je.at("attack"));
        if (je.contains("ground_truth_trigger")) {
            GroundTruthTrigger t;
            t.mask = je.at("ground_truth_trigger").at("mask").get<std::vector<double>>();
            t.pattern = je.at("ground_truth_trigger").at("pattern").get<std::vector<double>>();
            e.ground_truth_trigger = std::move(t);
        }
        e.clean_accuracy = je.at("clean_accuracy");
        e.attack_success_rate = je.at("attack_success_rate");
        e.train_seed = je.at("train_seed");
        if (e.is_trojaned != e.attack.has_value())
            throw std::runtime_error("manifest: is_trojaned inconsistent with attack for " +
                                     e.model_id);
        m.entries.push_back(std::move(e));
    }
    return m;
}

}  // namespace karm
