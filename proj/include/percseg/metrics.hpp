#pragma once
// Segmentation evaluation: confusion matrix, per-class F1 / IoU, mean F1
// with NaN propagation, mIoU, average accuracy, and CSV reporting.

#include <cstdint>
#include <string>
#include <vector>

namespace percseg {

struct MaskRaster;  // data.hpp

class ConfusionMatrix {
public:
    explicit ConfusionMatrix(int num_classes);

    void add(int true_class, int pred_class, int64_t count = 1);
    void add_labels(const std::vector<int64_t>& truth, const std::vector<int64_t>& pred);
    ConfusionMatrix& merge(const ConfusionMatrix& other);

    int64_t at(int true_class, int pred_class) const;
    int num_classes() const { return k_; }
    int64_t total() const;

private:
    int k_;
    std::vector<int64_t> counts_;  // row = true class, col = predicted
};

// Per-class scores are NaN when undefined: a class with no true positives
// has precision and/or recall of 0/0, so its F1 is NaN rather than 0.
std::vector<double> precision_per_class(const ConfusionMatrix& cm);
std::vector<double> recall_per_class(const ConfusionMatrix& cm);
std::vector<double> f1_per_class(const ConfusionMatrix& cm);
std::vector<double> iou_per_class(const ConfusionMatrix& cm);

// NaN if any per-class F1 is NaN.
double mean_f1(const ConfusionMatrix& cm);
// Classes with an empty union are excluded; throws if every class is empty.
double miou(const ConfusionMatrix& cm);
// Mean of per-class recalls over classes that appear in the ground truth.
double average_accuracy(const ConfusionMatrix& cm);

// Binary positive-class scores (class 1 = positive); requires K == 2.
std::pair<double, double> precision_recall_binary(const ConfusionMatrix& cm);

std::vector<double> class_proportions(const std::vector<MaskRaster>& masks, int num_classes);

struct MetricsReport {
    std::vector<double> f1;
    std::vector<double> iou;
    std::vector<double> precision;
    std::vector<double> recall;
    double mean_f1 = 0.0;
    double miou = 0.0;
    double aa = 0.0;
    ConfusionMatrix cm{2};

    static MetricsReport from(const ConfusionMatrix& cm);
    // One row per class followed by a summary row; NaN is spelled "NaN".
    std::string to_csv() const;
};

}  // namespace percseg
