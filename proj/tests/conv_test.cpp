#include <cmath>
#include <vector>

#include "doctest.h"
#include "percseg/conv.hpp"

using namespace percseg;

namespace {

// Independent 6-loop reference.
template <typename T>
TensorT<T> conv2d_oracle(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                         int64_t s, int64_t p) {
    const int64_t ci = x.size(0), h = x.size(1), wd = x.size(2);
    const int64_t co = w.size(0), kh = w.size(2), kw = w.size(3);
    const int64_t oh = (h + 2 * p - kh) / s + 1;
    const int64_t ow = (wd + 2 * p - kw) / s + 1;
    TensorT<T> out = TensorT<T>::zeros({co, oh, ow});
    T* op = out.mutable_data();
    for (int64_t c = 0; c < co; ++c)
        for (int64_t y = 0; y < oh; ++y)
            for (int64_t z = 0; z < ow; ++z) {
                T acc = b.data()[c];
                for (int64_t i = 0; i < ci; ++i)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kz = 0; kz < kw; ++kz) {
                            const int64_t sy = y * s - p + ky;
                            const int64_t sz = z * s - p + kz;
                            if (sy < 0 || sy >= h || sz < 0 || sz >= wd) continue;
                            acc += w.at({c, i, ky, kz}) * x.at({i, sy, sz});
                        }
                op[(c * oh + y) * ow + z] = acc;
            }
    return out;
}

template <typename T>
TensorT<T> conv3d_oracle(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                         Triple s, Triple p) {
    const int64_t ci = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    const int64_t co = w.size(0), kd = w.size(2), kh = w.size(3), kw = w.size(4);
    const int64_t od = (d + 2 * p.d - kd) / s.d + 1;
    const int64_t oh = (h + 2 * p.h - kh) / s.h + 1;
    const int64_t ow = (wd + 2 * p.w - kw) / s.w + 1;
    TensorT<T> out = TensorT<T>::zeros({co, od, oh, ow});
    T* op = out.mutable_data();
    for (int64_t c = 0; c < co; ++c)
        for (int64_t zd = 0; zd < od; ++zd)
            for (int64_t y = 0; y < oh; ++y)
                for (int64_t z = 0; z < ow; ++z) {
                    T acc = b.data()[c];
                    for (int64_t i = 0; i < ci; ++i)
                        for (int64_t kz2 = 0; kz2 < kd; ++kz2)
                            for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t sd = zd * s.d - p.d + kz2;
                                    const int64_t sy = y * s.h - p.h + ky;
                                    const int64_t sz = z * s.w - p.w + kx;
                                    if (sd < 0 || sd >= d || sy < 0 || sy >= h || sz < 0 ||
                                        sz >= wd)
                                        continue;
                                    acc += w.at({c, i, kz2, ky, kx}) * x.at({i, sd, sy, sz});
                                }
                    op[((c * od + zd) * oh + y) * ow + z] = acc;
                }
    return out;
}

double dot_all(const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]) * double(b.data()[i]);
    return acc;
}

}  // namespace

TEST_CASE("conv2d basics") {
    // 1x1 kernel with unit weight is the identity map
    Tensor x = Tensor::uniform({1, 4, 4}, 1, -1, 1);
    Tensor w = Tensor::from({1, 1, 1, 1}, {1.f});
    Tensor b = Tensor::zeros({1});
    CHECK(conv2d(x, w, b, 1, 0).vec() == x.vec());

    // all-ones 3x3 kernel on a constant-1 image: 9 at interior pixels
    Tensor ones = Tensor::full({1, 5, 5}, 1.f);
    Tensor w9 = Tensor::full({1, 1, 3, 3}, 1.f);
    Tensor y = conv2d(ones, w9, b, 1, 1);
    CHECK(y.at({0, 2, 2}) == 9.f);
    CHECK(y.at({0, 0, 0}) == 4.f);  // zero padding at the corner

    // shape rule
    Tensor big = Tensor::uniform({5, 64, 64}, 2, -1, 1);
    Rng rng(3);
    auto layer = Conv2dLayer<float>::make(5, 16, 3, 1, 1, rng);
    CHECK(layer.forward(big).shape() == Shape{16, 64, 64});

    CHECK_THROWS_AS(conv2d(Tensor::zeros({3, 4, 4}), Tensor::zeros({2, 2, 3, 3}),
                           Tensor::zeros({2}), 1, 1),
                    std::invalid_argument);
}

TEST_CASE("conv2d matches the reference loop on random shapes") {
    Rng rng(42);
    for (int trial = 0; trial < 25; ++trial) {
        const int64_t ci = 1 + static_cast<int64_t>(rng.next_u64() % 3);
        const int64_t co = 1 + static_cast<int64_t>(rng.next_u64() % 3);
        const int64_t h = 3 + static_cast<int64_t>(rng.next_u64() % 6);
        const int64_t wd = 3 + static_cast<int64_t>(rng.next_u64() % 6);
        const int64_t k = 1 + 2 * static_cast<int64_t>(rng.next_u64() % 2);
        const int64_t s = 1 + static_cast<int64_t>(rng.next_u64() % 2);
        const int64_t p = static_cast<int64_t>(rng.next_u64() % 2);
        TensorT<double> x = TensorT<double>::uniform({ci, h, wd}, 100 + trial, -2, 2);
        TensorT<double> w = TensorT<double>::uniform({co, ci, k, k}, 200 + trial, -1, 1);
        TensorT<double> b = TensorT<double>::uniform({co}, 300 + trial, -1, 1);
        TensorT<double> got = conv2d(x, w, b, s, p);
        TensorT<double> want = conv2d_oracle(x, w, b, s, p);
        REQUIRE(got.shape() == want.shape());
        for (int64_t i = 0; i < got.numel(); ++i) {
            CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv3d basics and oracle") {
    // 1x1x1 kernel mixes channels per voxel like a matmul over channels
    TensorT<double> x = TensorT<double>::uniform({3, 2, 4, 4}, 5, -1, 1);
    TensorT<double> w = TensorT<double>::uniform({2, 3, 1, 1, 1}, 6, -1, 1);
    TensorT<double> b = TensorT<double>::uniform({2}, 7, -1, 1);
    TensorT<double> y = conv3d(x, w, b, Triple{1, 1, 1}, Triple{0, 0, 0});
    for (int64_t vox = 0; vox < 2 * 4 * 4; ++vox) {
        for (int64_t c = 0; c < 2; ++c) {
            double want = b.data()[c];
            for (int64_t i = 0; i < 3; ++i)
                want += w.data()[c * 3 + i] * x.data()[i * 32 + vox];
            CHECK(y.data()[c * 32 + vox] == doctest::Approx(want).epsilon(1e-12));
        }
    }

    // shape rule with same padding
    Rng rng(8);
    auto layer =
        Conv3dLayer<float>::make(1, 16, Triple{3, 3, 3}, Triple{1, 1, 1}, Triple{1, 1, 1}, rng);
    Tensor big = Tensor::uniform({1, 5, 64, 64}, 9, -1, 1);
    CHECK(layer.forward(big).shape() == Shape{16, 5, 64, 64});

    // all-zero weights, bias only
    Tensor zw = Tensor::zeros({2, 1, 3, 3, 3});
    Tensor zb = Tensor::from({2}, {0.5f, -1.f});
    Tensor zy = conv3d(Tensor::uniform({1, 3, 4, 4}, 10, -1, 1), zw, zb, Triple{1, 1, 1},
                       Triple{1, 1, 1});
    CHECK(zy.at({0, 1, 1, 1}) == 0.5f);
    CHECK(zy.at({1, 2, 3, 3}) == -1.f);

    // full-depth kernel without depth padding collapses depth to 1
    Tensor fd = conv3d(Tensor::uniform({1, 5, 6, 6}, 11, -1, 1),
                       Tensor::uniform({2, 1, 5, 3, 3}, 12, -1, 1), Tensor::zeros({2}),
                       Triple{1, 1, 1}, Triple{0, 1, 1});
    CHECK(fd.shape() == Shape{2, 1, 6, 6});

    // random-shape oracle comparison
    Rng shapes(13);
    for (int trial = 0; trial < 15; ++trial) {
        const int64_t ci = 1 + static_cast<int64_t>(shapes.next_u64() % 2);
        const int64_t co = 1 + static_cast<int64_t>(shapes.next_u64() % 2);
        const int64_t d = 2 + static_cast<int64_t>(shapes.next_u64() % 4);
        const int64_t h = 3 + static_cast<int64_t>(shapes.next_u64() % 5);
        const int64_t wd = 3 + static_cast<int64_t>(shapes.next_u64() % 5);
        TensorT<double> xx = TensorT<double>::uniform({ci, d, h, wd}, 400 + trial, -2, 2);
        TensorT<double> ww = TensorT<double>::uniform({co, ci, 3, 3, 3}, 500 + trial, -1, 1);
        TensorT<double> bb = TensorT<double>::uniform({co}, 600 + trial, -1, 1);
        TensorT<double> got = conv3d(xx, ww, bb, Triple{1, 1, 1}, Triple{1, 1, 1});
        TensorT<double> want = conv3d_oracle(xx, ww, bb, Triple{1, 1, 1}, Triple{1, 1, 1});
        for (int64_t i = 0; i < got.numel(); ++i) {
            CHECK(got.data()[i] == doctest::Approx(want.data()[i]).epsilon(1e-12));
        }
    }
}

TEST_CASE("conv3d_transpose shape law and adjoint identity") {
    Rng rng(20);
    auto up = Conv3dTransposeLayer<float>::make(4, 2, Triple{1, 2, 2}, Triple{1, 2, 2},
                                                Triple{0, 0, 0}, rng);
    Tensor x = Tensor::uniform({4, 5, 32, 32}, 21, -1, 1);
    Tensor y = up.forward(x);
    CHECK(y.shape() == Shape{2, 5, 64, 64});  // (32-1)*2 - 0 + 2 = 64, depth stride 1 keeps 5

    // <conv(x), y> == <x, conv_transpose(y)> with shared weights
    TensorT<float> w = Tensor::uniform({3, 2, 2, 2, 2}, 22, -1, 1);  // [co, ci, k, k, k]
    Tensor cx = Tensor::uniform({2, 3, 4, 4}, 23, -1, 1);
    Triple s{1, 2, 2}, p{0, 0, 0};
    Tensor fwd = conv3d(cx, w, Tensor::zeros({3}), s, p);
    Tensor cy = Tensor::uniform(fwd.shape(), 24, -1, 1);
    Tensor back = conv3d_transpose(cy, w, Tensor::zeros({2}), s, p);
    CHECK(dot_all(fwd, cy) == doctest::Approx(dot_all(cx, back)).epsilon(1e-5));

    CHECK_THROWS_AS(conv3d_transpose(Tensor::zeros({1, 1, 1, 1}), Tensor::zeros({1, 1, 1, 2, 2}),
                                     Tensor::zeros({1}), Triple{1, 1, 1}, Triple{0, 2, 2}),
                    std::invalid_argument);
}

TEST_CASE("maxpool") {
    Tensor x = Tensor::uniform({1, 5, 64, 64}, 30, -1, 1);
    CHECK(maxpool3d(x, Triple{1, 2, 2}).shape() == Shape{1, 5, 32, 32});

    Tensor win = Tensor::from({1, 2, 2}, {1, 3, 2, 0});
    Tensor pooled = maxpool2d(win, 2, 2);
    CHECK(pooled.numel() == 1);
    CHECK(pooled.data()[0] == 3.f);

    // ties route the gradient to the first occurrence only
    {
        Tape tape;
        Tensor t = tape.watch(Tensor::from({1, 2, 2}, {2, 2, 2, 2}));
        GradTable<float> g = tape.backward(sum(maxpool2d(t, 2, 2)));
        const Tensor& gx = g.at(t.node());
        CHECK(gx.data()[0] == 1.f);
        CHECK(gx.data()[1] == 0.f);
        CHECK(gx.data()[2] == 0.f);
        CHECK(gx.data()[3] == 0.f);
    }

    CHECK_THROWS_AS(maxpool2d(Tensor::zeros({1, 5, 4}), 2, 2), std::invalid_argument);
}

TEST_CASE("conv gradients flow to inputs, weights, and bias") {
    Tape tape;
    Tensor x = tape.watch(Tensor::uniform({2, 4, 4}, 40, -1, 1));
    Tensor w = tape.watch(Tensor::uniform({3, 2, 3, 3}, 41, -1, 1));
    Tensor b = tape.watch(Tensor::uniform({3}, 42, -1, 1));
    GradTable<float> g = tape.backward(sum(conv2d(x, w, b, 1, 1)));
    CHECK(g.has(x.node()));
    CHECK(g.has(w.node()));
    CHECK(g.has(b.node()));
    // bias gradient of a plain sum is the output pixel count per channel
    CHECK(g.at(b.node()).data()[0] == doctest::Approx(16.f));
}
