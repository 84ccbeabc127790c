#include <cmath>

#include "doctest.h"
#include "percseg/losses.hpp"
#include "percseg/tensor.hpp"

using namespace percseg;

namespace {

TensorT<double> uniform_probs(int64_t n, int64_t k) {
    return TensorT<double>::full({n, k}, 1.0 / static_cast<double>(k));
}

}  // namespace

TEST_CASE("dice closed forms") {
    // perfect one-hot prediction -> 0
    TensorT<double> y = onehot_rows<double>({0, 1, 2, 1}, 3);
    CHECK(dice_loss(y, y).item() == doctest::Approx(0.0).epsilon(1e-12));

    // uniform prediction over K=6 -> 1 - 2/7 = 5/7
    TensorT<double> u = uniform_probs(10, 6);
    TensorT<double> yu = onehot_rows<double>({0, 1, 2, 3, 4, 5, 0, 1, 2, 3}, 6);
    CHECK(dice_loss(u, yu).item() == doctest::Approx(5.0 / 7.0).epsilon(1e-9));

    // zero mass on the true class -> 1
    TensorT<double> p = TensorT<double>::from({1, 2}, {0.0, 1.0});
    TensorT<double> t = TensorT<double>::from({1, 2}, {1.0, 0.0});
    CHECK(dice_loss(p, t).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("soft cross-entropy closed forms") {
    TensorT<double> y = onehot_rows<double>({2, 0, 1}, 3);
    CHECK(soft_ce_loss(y, y).item() <= 1e-7);

    TensorT<double> u = uniform_probs(5, 6);
    TensorT<double> yu = onehot_rows<double>({0, 1, 2, 3, 4}, 6);
    CHECK(soft_ce_loss(u, yu).item() == doctest::Approx(std::log(6.0)).epsilon(1e-9));

    TensorT<double> half = TensorT<double>::from({1, 2}, {0.5, 0.5});
    TensorT<double> th = TensorT<double>::from({1, 2}, {1.0, 0.0});
    CHECK(soft_ce_loss(half, th).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
}

TEST_CASE("joint loss is the exact sum of its parts") {
    TensorT<double> probs = TensorT<double>::uniform({8, 4}, 3, 0.05, 0.95);
    TensorT<double> onehot = onehot_rows<double>({0, 1, 2, 3, 0, 1, 2, 3}, 4);
    const double joint = joint_loss(probs, onehot).item();
    const double parts = dice_loss(probs, onehot).item() + soft_ce_loss(probs, onehot).item();
    CHECK(joint == parts);  // identical computation path, bitwise

    // uniform K=6: 5/7 + ln 6
    TensorT<double> u = uniform_probs(6, 6);
    TensorT<double> yu = onehot_rows<double>({0, 1, 2, 3, 4, 5}, 6);
    CHECK(joint_loss(u, yu).item() ==
          doctest::Approx(5.0 / 7.0 + std::log(6.0)).epsilon(1e-9));
}

TEST_CASE("loss ranges on random batches") {
    for (uint64_t seed = 1; seed <= 20; ++seed) {
        TensorT<double> raw = TensorT<double>::uniform({16, 5}, seed, -3.0, 3.0);
        TensorT<double> probs = softmax(raw, -1);
        std::vector<int64_t> labels;
        Rng rng(seed);
        for (int i = 0; i < 16; ++i) labels.push_back(static_cast<int64_t>(rng.next_u64() % 5));
        TensorT<double> onehot = onehot_rows<double>(labels, 5);
        const double dice = dice_loss(probs, onehot).item();
        const double ce = soft_ce_loss(probs, onehot).item();
        CHECK(dice >= 0.0);
        CHECK(dice <= 1.0);
        CHECK(ce >= 0.0);
        CHECK(joint_loss(probs, onehot).item() >= 0.0);
    }
}

TEST_CASE("loss gradients match finite differences") {
    TensorT<double> probs = TensorT<double>::uniform({4, 3}, 70, 0.05, 0.95);
    TensorT<double> onehot = onehot_rows<double>({0, 2, 1, 2}, 3);
    double dice_err = gradcheck(
        [&](TapeT<double>&, const TensorT<double>& p) { return dice_loss(p, onehot); }, probs,
        1e-5);
    CHECK(dice_err < 1e-6);
    double ce_err = gradcheck(
        [&](TapeT<double>&, const TensorT<double>& p) { return soft_ce_loss(p, onehot); },
        probs, 1e-5);
    CHECK(ce_err < 1e-4);
}

TEST_CASE("loss input validation") {
    TensorT<double> probs = uniform_probs(2, 3);
    CHECK_THROWS_AS(dice_loss(probs, uniform_probs(3, 3)), std::invalid_argument);
    CHECK_THROWS_AS(onehot_rows<double>({}, 3), std::invalid_argument);
    CHECK_THROWS_AS(onehot_rows<double>({5}, 3), std::invalid_argument);
}
