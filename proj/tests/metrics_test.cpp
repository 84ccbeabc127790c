#include <cmath>
#include <sstream>

#include "doctest.h"
#include "percseg/data.hpp"
#include "percseg/metrics.hpp"

using namespace percseg;

TEST_CASE("f1 closed forms") {
    // precision = recall = 1
    ConfusionMatrix perfect(2);
    perfect.add(0, 0, 5);
    perfect.add(1, 1, 3);
    CHECK(f1_per_class(perfect)[0] == 1.0);
    CHECK(f1_per_class(perfect)[1] == 1.0);

    // precision 0.5, recall 1 -> F1 = 2/3
    ConfusionMatrix cm(2);
    cm.add(1, 1, 1);  // TP for class 1
    cm.add(0, 1, 1);  // FP for class 1
    cm.add(0, 0, 1);
    CHECK(f1_per_class(cm)[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));

    // class never predicted and never hit -> NaN, and the mean propagates
    ConfusionMatrix nan_cm(3);
    nan_cm.add(0, 0, 4);
    nan_cm.add(1, 1, 4);
    nan_cm.add(2, 0, 2);  // class 2 exists but is never predicted
    CHECK(std::isnan(f1_per_class(nan_cm)[2]));
    CHECK(std::isnan(mean_f1(nan_cm)));
    CHECK_FALSE(std::isnan(mean_f1(perfect)));
}

TEST_CASE("iou and average accuracy closed forms") {
    ConfusionMatrix diag(3);
    for (int i = 0; i < 3; ++i) diag.add(i, i, 2);
    for (double v : iou_per_class(diag)) CHECK(v == 1.0);
    CHECK(average_accuracy(diag) == 1.0);

    // [[2,2],[0,4]]
    ConfusionMatrix cm(2);
    cm.add(0, 0, 2);
    cm.add(0, 1, 2);
    cm.add(1, 1, 4);
    std::vector<double> iou = iou_per_class(cm);
    CHECK(iou[0] == 0.5);
    CHECK(iou[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(miou(cm) == doctest::Approx((0.5 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
    CHECK(average_accuracy(cm) == 0.75);

    // disjoint prediction: zero diagonal -> IoU 0
    ConfusionMatrix disjoint(2);
    disjoint.add(0, 1, 3);
    disjoint.add(1, 0, 3);
    CHECK(iou_per_class(disjoint)[0] == 0.0);
    CHECK(iou_per_class(disjoint)[1] == 0.0);

    // absent classes are excluded from the mIoU mean
    ConfusionMatrix partial(3);
    partial.add(0, 0, 2);
    partial.add(1, 1, 2);
    CHECK(miou(partial) == 1.0);
}

TEST_CASE("binary precision/recall") {
    ConfusionMatrix all(2);
    all.add(0, 0, 3);
    all.add(1, 1, 5);
    auto [p0, r0] = precision_recall_binary(all);
    CHECK(p0 == 1.0);
    CHECK(r0 == 1.0);

    // TP=3, FP=1, FN=2 -> (0.75, 0.6)
    ConfusionMatrix cm(2);
    cm.add(1, 1, 3);
    cm.add(0, 1, 1);
    cm.add(1, 0, 2);
    cm.add(0, 0, 4);
    auto [p, r] = precision_recall_binary(cm);
    CHECK(p == 0.75);
    CHECK(r == doctest::Approx(0.6).epsilon(1e-15));

    // no positive predictions while positives exist
    ConfusionMatrix none(2);
    none.add(1, 0, 4);
    none.add(0, 0, 4);
    auto [pn, rn] = precision_recall_binary(none);
    CHECK(std::isnan(pn));
    CHECK(rn == 0.0);

    CHECK_THROWS_AS(precision_recall_binary(ConfusionMatrix(3)), std::invalid_argument);
}

TEST_CASE("f1 equals the dice coefficient of hard predictions") {
    Rng rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const int k = 2 + static_cast<int>(rng.next_u64() % 4);
        ConfusionMatrix cm(k);
        for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) cm.add(i, j, 1 + static_cast<int64_t>(rng.next_u64() % 20));
        std::vector<double> f1 = f1_per_class(cm);
        for (int c = 0; c < k; ++c) {
            int64_t tp = cm.at(c, c), fp = 0, fn = 0;
            for (int j = 0; j < k; ++j) {
                if (j != c) {
                    fp += cm.at(j, c);
                    fn += cm.at(c, j);
                }
            }
            const double dice = 2.0 * tp / static_cast<double>(2 * tp + fp + fn);
            CHECK(f1[c] == doctest::Approx(dice).epsilon(1e-12));
        }
    }
}

TEST_CASE("metrics are permutation-equivariant in the class labels") {
    ConfusionMatrix cm(3);
    Rng rng(5);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cm.add(i, j, 1 + static_cast<int64_t>(rng.next_u64() % 9));
    const std::vector<int> perm = {2, 0, 1};  // new = perm[old]
    ConfusionMatrix pcm(3);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) pcm.add(perm[i], perm[j], cm.at(i, j));
    std::vector<double> f1 = f1_per_class(cm), pf1 = f1_per_class(pcm);
    std::vector<double> iou = iou_per_class(cm), piou = iou_per_class(pcm);
    for (int c = 0; c < 3; ++c) {
        CHECK(pf1[perm[c]] == doctest::Approx(f1[c]).epsilon(1e-15));
        CHECK(piou[perm[c]] == doctest::Approx(iou[c]).epsilon(1e-15));
    }
    CHECK(miou(pcm) == doctest::Approx(miou(cm)).epsilon(1e-15));
    CHECK(average_accuracy(pcm) == doctest::Approx(average_accuracy(cm)).epsilon(1e-15));
}

TEST_CASE("class proportions") {
    MaskRaster single(4, 4, 2);
    std::vector<double> p1 = class_proportions({single}, 3);
    CHECK(p1[0] == 0.0);
    CHECK(p1[2] == 1.0);

    MaskRaster half(2, 2);
    half.v = {0, 0, 1, 1};
    std::vector<double> p2 = class_proportions({half}, 2);
    CHECK(p2[0] == 0.5);
    CHECK(p2[1] == 0.5);

    // 4096 pixels with 64 marked -> fraction 64/4096
    MaskRaster big(64, 64, 0);
    for (int i = 0; i < 64; ++i) big.v[static_cast<size_t>(i)] = 1;
    std::vector<double> p3 = class_proportions({big}, 2);
    CHECK(p3[1] == doctest::Approx(0.015625).epsilon(1e-12));
    double total = 0;
    for (double v : p3) total += v;
    CHECK(total == doctest::Approx(1.0).epsilon(1e-9));

    CHECK_THROWS_AS(class_proportions({}, 3), std::invalid_argument);
}

TEST_CASE("report CSV spells NaN and has K+1 rows") {
    ConfusionMatrix cm(3);
    cm.add(0, 0, 4);
    cm.add(1, 1, 4);
    cm.add(2, 0, 2);  // class 2 never predicted
    MetricsReport report = MetricsReport::from(cm);
    const std::string csv = report.to_csv();
    CHECK(csv.find("NaN") != std::string::npos);
    int rows = 0;
    std::istringstream is(csv);
    std::string line;
    while (std::getline(is, line)) ++rows;
    CHECK(rows == 1 + 3 + 1);  // header + K class rows + summary
    CHECK(csv.rfind("summary,") != std::string::npos);
}

TEST_CASE("confusion matrix merge is additive") {
    ConfusionMatrix a(2), b(2);
    a.add(0, 1, 2);
    b.add(0, 1, 3);
    b.add(1, 1, 1);
    a.merge(b);
    CHECK(a.at(0, 1) == 5);
    CHECK(a.at(1, 1) == 1);
    CHECK(a.total() == 6);
}
