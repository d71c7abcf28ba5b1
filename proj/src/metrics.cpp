#include "karm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace karm {

double roc_auc(const std::vector<double>& trojaned_scores,
               const std::vector<double>& clean_scores) {
    if (trojaned_scores.empty() || clean_scores.empty())
        throw std::invalid_argument("roc_auc: need both positive and negative scores");
    double credit = 0.0;
    for (double t : trojaned_scores)
        for (double c : clean_scores) {
            if (t > c) credit += 1.0;
            else if (t == c) credit += 0.5;
        }
    return credit / (trojaned_scores.size() * clean_scores.size());
}

double binary_cross_entropy(const std::vector<ModelRow>& rows) {
    if (rows.empty()) throw std::invalid_argument("binary_cross_entropy: no rows");
    double loss = 0.0;
    for (const auto& r : rows) {
        double s = std::clamp(r.trojan_score, 1e-6, 1.0 - 1e-6);
        loss += r.ground_truth_trojaned ? -std::log(s) : -std::log(1.0 - s);
    }
    return loss / rows.size();
}

DetectionMetrics compute_metrics(std::vector<ModelRow> rows) {
    if (rows.empty()) throw std::invalid_argument("compute_metrics: no rows");
    // order-independence: sort by model id
    std::sort(rows.begin(), rows.end(),
              [](const ModelRow& a, const ModelRow& b) { return a.model_id < b.model_id; });
    DetectionMetrics m;
    std::vector<double> pos, neg;
    size_t correct = 0;
    for (const auto& r : rows) {
        (r.ground_truth_trojaned ? pos : neg).push_back(r.trojan_score);
        if (r.verdict_trojaned == r.ground_truth_trojaned) ++correct;
    }
    m.accuracy = static_cast<double>(correct) / rows.size();
    m.roc_auc = (pos.empty() || neg.empty()) ? 0.5 : roc_auc(pos, neg);
    m.cross_entropy = binary_cross_entropy(rows);
    m.rows = std::move(rows);
    return m;
}

void save_metrics_csv(const DetectionMetrics& m, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("save_metrics_csv: cannot open " + path);
    char buf[64];
    f << "model_id,ground_truth,trojan_score,verdict,scan_time\n";
    for (const auto& r : m.rows) {
        std::snprintf(buf, sizeof(buf), "%.10g", r.trojan_score);
        f << r.model_id << "," << (r.ground_truth_trojaned ? "trojaned" : "benign") << ","
          << buf << "," << (r.verdict_trojaned ? "trojaned" : "benign") << "," << r.scan_time
          << "\n";
    }
    std::snprintf(buf, sizeof(buf), "%.10g", m.accuracy);
    f << "# accuracy," << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.10g", m.roc_auc);
    f << "# roc_auc," << buf << "\n";
    std::snprintf(buf, sizeof(buf), "%.10g", m.cross_entropy);
    f << "# cross_entropy," << buf << "\n";
}

}  // namespace karm
