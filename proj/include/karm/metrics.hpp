#pragma once

#include <string>
#include <vector>

namespace karm {

struct ModelRow {
    std::string model_id;
    bool ground_truth_trojaned = false;
    double trojan_score = 0.0;
    bool verdict_trojaned = false;
    double scan_time = 0.0;  // epochs
};

struct DetectionMetrics {
    double accuracy = 0.0;
    double roc_auc = 0.0;
    double cross_entropy = 0.0;
    std::vector<ModelRow> rows;
};

/// Pairwise ROC-AUC with 0.5 credit for score ties.
double roc_auc(const std::vector<double>& trojaned_scores,
               const std::vector<double>& clean_scores);

/// Mean binary cross-entropy with scores clamped to [1e-6, 1-1e-6].
double binary_cross_entropy(const std::vector<ModelRow>& rows);

DetectionMetrics compute_metrics(std::vector<ModelRow> rows);

void save_metrics_csv(const DetectionMetrics& m, const std::string& path);

}  // namespace karm
