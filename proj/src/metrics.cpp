#include "percseg/metrics.hpp"

#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "percseg/data.hpp"

namespace percseg {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string cell(double v) {
    if (std::isnan(v)) return "NaN";
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(int num_classes) : k_(num_classes) {
    if (num_classes < 2) throw std::invalid_argument("ConfusionMatrix needs at least two classes");
    counts_.assign(static_cast<size_t>(k_) * static_cast<size_t>(k_), 0);
}

void ConfusionMatrix::add(int true_class, int pred_class, int64_t count) {
    if (true_class < 0 || true_class >= k_ || pred_class < 0 || pred_class >= k_) {
        throw std::invalid_argument("ConfusionMatrix class index out of range");
    }
    if (count < 0) throw std::invalid_argument("ConfusionMatrix counts must be non-negative");
    counts_[static_cast<size_t>(true_class) * k_ + pred_class] += count;
}

void ConfusionMatrix::add_labels(const std::vector<int64_t>& truth,
                                 const std::vector<int64_t>& pred) {
    if (truth.size() != pred.size()) {
        throw std::invalid_argument("ConfusionMatrix label vectors differ in length");
    }
    for (size_t i = 0; i < truth.size(); ++i) {
        add(static_cast<int>(truth[i]), static_cast<int>(pred[i]));
    }
}

ConfusionMatrix& ConfusionMatrix::merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw std::invalid_argument("ConfusionMatrix class count mismatch");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
}

int64_t ConfusionMatrix::at(int true_class, int pred_class) const {
    if (true_class < 0 || true_class >= k_ || pred_class < 0 || pred_class >= k_) {
        throw std::invalid_argument("ConfusionMatrix class index out of range");
    }
    return counts_[static_cast<size_t>(true_class) * k_ + pred_class];
}

int64_t ConfusionMatrix::total() const {
    int64_t t = 0;
    for (int64_t c : counts_) t += c;
    return t;
}

namespace {

struct ClassTallies {
    std::vector<int64_t> tp, fp, fn;
};

ClassTallies tallies(const ConfusionMatrix& cm) {
    const int k = cm.num_classes();
    ClassTallies t;
    t.tp.assign(k, 0);
    t.fp.assign(k, 0);
    t.fn.assign(k, 0);
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
            const int64_t c = cm.at(i, j);
            if (i == j) {
                t.tp[i] += c;
            } else {
                t.fn[i] += c;
                t.fp[j] += c;
            }
        }
    }
    return t;
}

}  // namespace

std::vector<double> precision_per_class(const ConfusionMatrix& cm) {
    ClassTallies t = tallies(cm);
    std::vector<double> out(cm.num_classes());
    for (int i = 0; i < cm.num_classes(); ++i) {
        const int64_t denom = t.tp[i] + t.fp[i];
        out[i] = denom == 0 ? kNaN : static_cast<double>(t.tp[i]) / static_cast<double>(denom);
    }
    return out;
}

std::vector<double> recall_per_class(const ConfusionMatrix& cm) {
    ClassTallies t = tallies(cm);
    std::vector<double> out(cm.num_classes());
    for (int i = 0; i < cm.num_classes(); ++i) {
        const int64_t denom = t.tp[i] + t.fn[i];
        out[i] = denom == 0 ? kNaN : static_cast<double>(t.tp[i]) / static_cast<double>(denom);
    }
    return out;
}

std::vector<double> f1_per_class(const ConfusionMatrix& cm) {
    std::vector<double> p = precision_per_class(cm);
    std::vector<double> r = recall_per_class(cm);
    std::vector<double> out(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
        if (std::isnan(p[i]) || std::isnan(r[i]) || p[i] + r[i] == 0.0) {
            out[i] = kNaN;
        } else {
            out[i] = 2.0 * p[i] * r[i] / (p[i] + r[i]);
        }
    }
    return out;
}

std::vector<double> iou_per_class(const ConfusionMatrix& cm) {
    ClassTallies t = tallies(cm);
    std::vector<double> out(cm.num_classes());
    for (int i = 0; i < cm.num_classes(); ++i) {
        const int64_t uni = t.tp[i] + t.fp[i] + t.fn[i];
        out[i] = uni == 0 ? kNaN : static_cast<double>(t.tp[i]) / static_cast<double>(uni);
    }
    return out;
}

double mean_f1(const ConfusionMatrix& cm) {
    std::vector<double> f1 = f1_per_class(cm);
    double acc = 0.0;
    for (double v : f1) {
        if (std::isnan(v)) return kNaN;
        acc += v;
    }
    return acc / static_cast<double>(f1.size());
}

double miou(const ConfusionMatrix& cm) {
    std::vector<double> iou = iou_per_class(cm);
    double acc = 0.0;
    int n = 0;
    for (double v : iou) {
        if (std::isnan(v)) continue;
        acc += v;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("miou: every class has an empty union");
    return acc / static_cast<double>(n);
}

double average_accuracy(const ConfusionMatrix& cm) {
    std::vector<double> recall = recall_per_class(cm);
    double acc = 0.0;
    int n = 0;
    for (double v : recall) {
        if (std::isnan(v)) continue;  // class absent from ground truth
        acc += v;
        ++n;
    }
    if (n == 0) throw std::invalid_argument("average_accuracy: no true samples");
    return acc / static_cast<double>(n);
}

std::pair<double, double> precision_recall_binary(const ConfusionMatrix& cm) {
    if (cm.num_classes() != 2) {
        throw std::invalid_argument("precision_recall_binary requires exactly two classes");
    }
    const double p = precision_per_class(cm)[1];
    double r = recall_per_class(cm)[1];
    if (std::isnan(r)) r = 0.0;  // no positives in truth
    return {p, r};
}

std::vector<double> class_proportions(const std::vector<MaskRaster>& masks, int num_classes) {
    if (masks.empty()) throw std::invalid_argument("class_proportions: no masks");
    std::vector<int64_t> counts(static_cast<size_t>(num_classes), 0);
    int64_t total = 0;
    for (const MaskRaster& m : masks) {
        for (uint8_t v : m.v) {
            if (v >= num_classes) throw std::invalid_argument("class_proportions: label out of range");
            counts[v]++;
            ++total;
        }
    }
    if (total == 0) throw std::invalid_argument("class_proportions: empty masks");
    std::vector<double> out(counts.size());
    for (size_t i = 0; i < counts.size(); ++i) {
        out[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
    }
    return out;
}

MetricsReport MetricsReport::from(const ConfusionMatrix& cm) {
    MetricsReport r;
    r.f1 = f1_per_class(cm);
    r.iou = iou_per_class(cm);
    r.precision = precision_per_class(cm);
    r.recall = recall_per_class(cm);
    r.mean_f1 = percseg::mean_f1(cm);
    r.miou = percseg::miou(cm);
    r.aa = average_accuracy(cm);
    r.cm = cm;
    return r;
}

std::string MetricsReport::to_csv() const {
    std::ostringstream os;
    os << "class,f1,iou,precision,recall\n";
    for (size_t i = 0; i < f1.size(); ++i) {
        os << i << "," << cell(f1[i]) << "," << cell(iou[i]) << "," << cell(precision[i]) << ","
           << cell(recall[i]) << "\n";
    }
    os << "summary," << cell(mean_f1) << "," << cell(miou) << "," << cell(aa) << ",\n";
    return os.str();
}

}  // namespace percseg
