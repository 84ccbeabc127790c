// Acceptance suite. Each test prints one [PASS]/[FAIL] line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "percseg/conv.hpp"
#include "percseg/data.hpp"
#include "percseg/gradchecks.hpp"
#include "percseg/losses.hpp"
#include "percseg/metrics.hpp"
#include "percseg/perceiver.hpp"
#include "percseg/posenc.hpp"
#include "percseg/train.hpp"

using namespace percseg;
namespace fs = std::filesystem;

namespace {

struct Stopwatch {
    std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
};

void report(int criterion, const char* what, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %d: %s (%s)\n", ok ? "PASS" : "FAIL", criterion, what,
                detail.c_str());
    std::fflush(stdout);
}

// ---- independent reference kernels (kept deliberately naive) ---------------

template <typename T>
TensorT<T> ref_conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, int64_t s,
                      int64_t p) {
    const int64_t ci = x.size(0), h = x.size(1), wd = x.size(2);
    const int64_t co = w.size(0), kh = w.size(2), kw = w.size(3);
    TensorT<T> out = TensorT<T>::zeros({co, (h + 2 * p - kh) / s + 1, (wd + 2 * p - kw) / s + 1});
    for (int64_t c = 0; c < co; ++c)
        for (int64_t y = 0; y < out.size(1); ++y)
            for (int64_t z = 0; z < out.size(2); ++z) {
                T acc = b.data()[c];
                for (int64_t i = 0; i < ci; ++i)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kz = 0; kz < kw; ++kz) {
                            const int64_t sy = y * s - p + ky, sz = z * s - p + kz;
                            if (sy >= 0 && sy < h && sz >= 0 && sz < wd)
                                acc += w.at({c, i, ky, kz}) * x.at({i, sy, sz});
                        }
                out.mutable_data()[(c * out.size(1) + y) * out.size(2) + z] = acc;
            }
    return out;
}

template <typename T>
TensorT<T> ref_conv3d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b, Triple s,
                      Triple p) {
    const int64_t ci = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    const int64_t co = w.size(0), kd = w.size(2), kh = w.size(3), kw = w.size(4);
    TensorT<T> out = TensorT<T>::zeros({co, (d + 2 * p.d - kd) / s.d + 1,
                                        (h + 2 * p.h - kh) / s.h + 1,
                                        (wd + 2 * p.w - kw) / s.w + 1});
    for (int64_t c = 0; c < co; ++c)
        for (int64_t zd = 0; zd < out.size(1); ++zd)
            for (int64_t y = 0; y < out.size(2); ++y)
                for (int64_t z = 0; z < out.size(3); ++z) {
                    T acc = b.data()[c];
                    for (int64_t i = 0; i < ci; ++i)
                        for (int64_t kz = 0; kz < kd; ++kz)
                            for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t sd = zd * s.d - p.d + kz;
                                    const int64_t sy = y * s.h - p.h + ky;
                                    const int64_t sz = z * s.w - p.w + kx;
                                    if (sd >= 0 && sd < d && sy >= 0 && sy < h && sz >= 0 &&
                                        sz < wd)
                                        acc += w.at({c, i, kz, ky, kx}) * x.at({i, sd, sy, sz});
                                }
                    out.mutable_data()[((c * out.size(1) + zd) * out.size(2) + y) * out.size(3) +
                                       z] = acc;
                }
    return out;
}

template <typename T>
TensorT<T> ref_conv3d_transpose(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b,
                                Triple s, Triple p) {
    const int64_t ci = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    const int64_t co = w.size(1), kd = w.size(2), kh = w.size(3), kw = w.size(4);
    TensorT<T> out = TensorT<T>::zeros({co, (d - 1) * s.d - 2 * p.d + kd,
                                        (h - 1) * s.h - 2 * p.h + kh,
                                        (wd - 1) * s.w - 2 * p.w + kw});
    T* op = out.mutable_data();
    for (int64_t c = 0; c < co; ++c)
        for (int64_t i = 0; i < out.size(1) * out.size(2) * out.size(3); ++i)
            op[c * out.size(1) * out.size(2) * out.size(3) + i] = b.data()[c];
    for (int64_t i = 0; i < ci; ++i)
        for (int64_t c = 0; c < co; ++c)
            for (int64_t zd = 0; zd < d; ++zd)
                for (int64_t y = 0; y < h; ++y)
                    for (int64_t z = 0; z < wd; ++z)
                        for (int64_t kz = 0; kz < kd; ++kz)
                            for (int64_t ky = 0; ky < kh; ++ky)
                                for (int64_t kx = 0; kx < kw; ++kx) {
                                    const int64_t od = zd * s.d - p.d + kz;
                                    const int64_t oy = y * s.h - p.h + ky;
                                    const int64_t oz = z * s.w - p.w + kx;
                                    if (od < 0 || od >= out.size(1) || oy < 0 ||
                                        oy >= out.size(2) || oz < 0 || oz >= out.size(3))
                                        continue;
                                    op[((c * out.size(1) + od) * out.size(2) + oy) * out.size(3) +
                                       oz] += x.at({i, zd, y, z}) * w.at({i, c, kz, ky, kx});
                                }
    return out;
}

template <typename T>
TensorT<T> ref_maxpool3d(const TensorT<T>& x, Triple k) {
    const int64_t c = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    TensorT<T> out = TensorT<T>::zeros({c, d / k.d, h / k.h, wd / k.w});
    T* op = out.mutable_data();
    int64_t idx = 0;
    for (int64_t cc = 0; cc < c; ++cc)
        for (int64_t zd = 0; zd < d / k.d; ++zd)
            for (int64_t y = 0; y < h / k.h; ++y)
                for (int64_t z = 0; z < wd / k.w; ++z) {
                    T best = x.at({cc, zd * k.d, y * k.h, z * k.w});
                    for (int64_t a = 0; a < k.d; ++a)
                        for (int64_t b2 = 0; b2 < k.h; ++b2)
                            for (int64_t c2 = 0; c2 < k.w; ++c2)
                                best = std::max(best,
                                                x.at({cc, zd * k.d + a, y * k.h + b2, z * k.w + c2}));
                    op[idx++] = best;
                }
    return out;
}

template <typename T>
double max_abs_diff(const TensorT<T>& a, const TensorT<T>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::fabs(double(a.data()[i]) - double(b.data()[i])));
    return m;
}

template <typename T>
double max_rel_diff(const TensorT<T>& a, const TensorT<T>& b) {
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i], y = b.data()[i];
        m = std::max(m, std::fabs(x - y) / (std::max(std::fabs(x), std::fabs(y)) + 1.0));
    }
    return m;
}

double dot_all(const Tensor& a, const Tensor& b) {
    double acc = 0;
    for (int64_t i = 0; i < a.numel(); ++i) acc += double(a.data()[i]) * double(b.data()[i]);
    return acc;
}

// Shared overfit configuration: 8 synthetic 64x64x5 tiles, 4 classes,
// volumetric preprocessor, 300 optimiser steps at the desk-scale model size.
TrainConfig overfit_config() {
    TrainConfig cfg;
    cfg.pre.kind = PreprocessorKind::UNet3d;
    cfg.steps = 300;
    cfg.batch_size = 1;
    cfg.lr = 3e-3;
    cfg.seed = 7;
    cfg.dataset.synth_seed = 1234;
    cfg.dataset.synth_train = 8;
    return cfg;
}

}  // namespace

TEST_CASE("criterion 1: gradient integrity") {
    Stopwatch watch;
    std::vector<GradCheckReport> reports = run_gradchecks("all");
    bool ok = true;
    double worst = 0;
    std::string worst_name;
    for (const GradCheckReport& r : reports) {
        ok = ok && r.passed;
        if (r.max_error > worst) {
            worst = r.max_error;
            worst_name = r.name;
        }
        if (!r.passed) {
            std::printf("  gradcheck %s: max_err %.3g over threshold %.3g\n", r.name.c_str(),
                        r.max_error, r.threshold);
        }
    }
    const double elapsed = watch.seconds();
    ok = ok && elapsed < 120.0;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "%zu checks, worst %s=%.3g, %.1f s", reports.size(),
                  worst_name.c_str(), worst, elapsed);
    report(1, "gradient integrity", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 2: kernel oracles") {
    Rng rng(2026);
    double worst32 = 0, worst64 = 0, worst_adj = 0;
    int shapes = 0;
    auto rnd = [&rng](int64_t lo, int64_t hi) {
        return lo + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(hi - lo + 1));
    };
    // 70 conv2d + 70 conv3d + 30 transpose + 30 pool = 200 random shapes
    for (int t = 0; t < 70; ++t, ++shapes) {
        const int64_t ci = rnd(1, 3), co = rnd(1, 3), h = rnd(3, 8), wd = rnd(3, 8);
        const int64_t k = rnd(0, 1) ? 3 : 1, s = rnd(1, 2), p = rnd(0, 1);
        TensorT<double> x = TensorT<double>::uniform({ci, h, wd}, 10 + t, -2, 2);
        TensorT<double> w = TensorT<double>::uniform({co, ci, k, k}, 400 + t, -1, 1);
        TensorT<double> b = TensorT<double>::uniform({co}, 800 + t, -1, 1);
        worst64 = std::max(worst64, max_abs_diff(conv2d(x, w, b, s, p), ref_conv2d(x, w, b, s, p)));
        Tensor x32 = to_float(x), w32 = to_float(w), b32 = to_float(b);
        worst32 = std::max(worst32,
                           max_rel_diff(conv2d(x32, w32, b32, s, p), ref_conv2d(x32, w32, b32, s, p)));
    }
    for (int t = 0; t < 70; ++t, ++shapes) {
        const int64_t ci = rnd(1, 2), co = rnd(1, 2), d = rnd(2, 6), h = rnd(3, 8), wd = rnd(3, 8);
        const Triple s{1, rnd(1, 2), rnd(1, 2)}, p{rnd(0, 1), 1, 1};
        TensorT<double> x = TensorT<double>::uniform({ci, d, h, wd}, 20 + t, -2, 2);
        TensorT<double> w = TensorT<double>::uniform({co, ci, rnd(0, 1) ? 3 : 1, 3, 3}, 500 + t, -1, 1);
        TensorT<double> b = TensorT<double>::uniform({co}, 900 + t, -1, 1);
        if (d + 2 * p.d < w.size(2)) continue;
        worst64 = std::max(worst64, max_abs_diff(conv3d(x, w, b, s, p), ref_conv3d(x, w, b, s, p)));
        Tensor x32 = to_float(x), w32 = to_float(w), b32 = to_float(b);
        worst32 = std::max(worst32,
                           max_rel_diff(conv3d(x32, w32, b32, s, p), ref_conv3d(x32, w32, b32, s, p)));
    }
    for (int t = 0; t < 30; ++t, ++shapes) {
        const int64_t ci = rnd(1, 2), co = rnd(1, 2), d = rnd(2, 5), h = rnd(2, 6), wd = rnd(2, 6);
        const Triple s{1, 2, 2}, p{0, 0, 0};
        TensorT<double> x = TensorT<double>::uniform({ci, d, h, wd}, 30 + t, -2, 2);
        TensorT<double> w = TensorT<double>::uniform({ci, co, 1, 2, 2}, 600 + t, -1, 1);
        TensorT<double> b = TensorT<double>::uniform({co}, 950 + t, -1, 1);
        worst64 = std::max(worst64, max_abs_diff(conv3d_transpose(x, w, b, s, p),
                                                 ref_conv3d_transpose(x, w, b, s, p)));
        // adjoint identity in 32-bit
        Tensor cx = Tensor::uniform({2, 3, 4, 4}, 40 + t, -1, 1);
        Tensor cw = Tensor::uniform({3, 2, 2, 2, 2}, 700 + t, -1, 1);
        Tensor fwd = conv3d(cx, cw, Tensor::zeros({3}), Triple{1, 2, 2}, Triple{0, 0, 0});
        Tensor cy = Tensor::uniform(fwd.shape(), 60 + t, -1, 1);
        Tensor back = conv3d_transpose(cy, cw, Tensor::zeros({2}), Triple{1, 2, 2}, Triple{0, 0, 0});
        const double lhs = dot_all(fwd, cy), rhs = dot_all(cx, back);
        worst_adj = std::max(worst_adj,
                             std::fabs(lhs - rhs) / (std::max(std::fabs(lhs), std::fabs(rhs)) + 1.0));
    }
    for (int t = 0; t < 30; ++t, ++shapes) {
        const int64_t c = rnd(1, 3), d = rnd(1, 3), h = 2 * rnd(1, 4), wd = 2 * rnd(1, 4);
        TensorT<double> x = TensorT<double>::uniform({c, d, h, wd}, 50 + t, -2, 2);
        worst64 = std::max(worst64,
                           max_abs_diff(maxpool3d(x, Triple{1, 2, 2}), ref_maxpool3d(x, Triple{1, 2, 2})));
    }
    const bool ok = shapes >= 200 && worst64 < 1e-12 && worst32 < 1e-6 && worst_adj < 1e-5;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "%d shapes, 64-bit %.2g, 32-bit rel %.2g, adjoint %.2g", shapes, worst64,
                  worst32, worst_adj);
    report(2, "kernel oracles", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 3: loss closed forms") {
    TensorT<double> perfect = onehot_rows<double>({0, 1, 2, 3, 4, 5}, 6);
    const double dice_perfect = dice_loss(perfect, perfect).item();
    const double ce_perfect = soft_ce_loss(perfect, perfect).item();

    TensorT<double> uniform = TensorT<double>::full({12, 6}, 1.0 / 6.0);
    TensorT<double> labels = onehot_rows<double>({0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5}, 6);
    const double dice_u = dice_loss(uniform, labels).item();
    const double ce_u = soft_ce_loss(uniform, labels).item();
    const double joint_u = joint_loss(uniform, labels).item();

    const bool ok = std::fabs(dice_perfect) <= 1e-7 && ce_perfect <= 1e-7 &&
                    std::fabs(dice_u - 5.0 / 7.0) <= 1e-6 &&
                    std::fabs(ce_u - std::log(6.0)) <= 1e-6 &&
                    joint_u == dice_u + ce_u;
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "perfect dice=%.2g ce=%.2g; uniform dice=%.8f (5/7=%.8f) ce=%.8f (ln6=%.8f)",
                  dice_perfect, ce_perfect, dice_u, 5.0 / 7.0, ce_u, std::log(6.0));
    report(3, "loss closed forms", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 4: metric closed forms") {
    // F1 = 2/3 from precision 0.5, recall 1
    ConfusionMatrix f1cm(2);
    f1cm.add(1, 1, 1);
    f1cm.add(0, 1, 1);
    f1cm.add(0, 0, 1);
    const double f1 = f1_per_class(f1cm)[1];

    // IoU {0.5, 2/3}, AA 0.75 from [[2,2],[0,4]]
    ConfusionMatrix cm(2);
    cm.add(0, 0, 2);
    cm.add(0, 1, 2);
    cm.add(1, 1, 4);
    std::vector<double> iou = iou_per_class(cm);
    const double aa = average_accuracy(cm);

    // never-predicted class: F1 and MeanF1 are NaN
    ConfusionMatrix nan_cm(3);
    nan_cm.add(0, 0, 5);
    nan_cm.add(1, 1, 5);
    nan_cm.add(2, 0, 3);
    const bool nan_ok =
        std::isnan(f1_per_class(nan_cm)[2]) && std::isnan(mean_f1(nan_cm));

    const bool ok = std::fabs(f1 - 2.0 / 3.0) < 1e-15 && iou[0] == 0.5 &&
                    std::fabs(iou[1] - 2.0 / 3.0) < 1e-15 && aa == 0.75 && nan_ok;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "F1=%.6f IoU={%.3f,%.6f} AA=%.2f NaN-propagation=%s",
                  f1, iou[0], iou[1], aa, nan_ok ? "yes" : "no");
    report(4, "metric closed forms", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 5: linear-cost encoder") {
    PerceiverConfig pc;
    pc.num_latents = 256;
    pc.latent_dim = 128;
    pc.num_heads = 4;
    pc.num_self_blocks = 4;
    pc.input_channels = 5 + fourier_pos_dim(16);
    pc.query_channels = fourier_pos_dim(16);
    pc.num_classes = 6;
    Rng rng(5);
    PerceiverT<float> model(pc, rng);
    ParamList<float> params;
    model.params(params);
    const int64_t params_before = param_count(params);

    auto activations_for = [&](int64_t h, int64_t w) {
        const int64_t m = h * w;
        Tensor pos = fourier_pos_2d(h, w, 16, 32.0);
        Tensor raw = Tensor::uniform({m, 5}, 55, -1, 1);
        Tensor features = concat<float>({raw, pos}, 1);
        Tape tape;
        bind_params(tape, params);
        model.encode(features);
        const int64_t count = tape.saved_elements_with_extent(m);
        unbind_params(params);
        return count;
    };
    const int64_t at4096 = activations_for(64, 64);
    const int64_t at8192 = activations_for(128, 64);
    const double ratio = static_cast<double>(at8192) / static_cast<double>(at4096);

    ParamList<float> params_again;
    model.params(params_again);
    const int64_t params_after = param_count(params_again);

    const bool ok = std::fabs(ratio - 2.0) <= 0.02 && params_before == params_after;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "input-sized activations %lld -> %lld, ratio %.4f; params %lld constant",
                  static_cast<long long>(at4096), static_cast<long long>(at8192), ratio,
                  static_cast<long long>(params_before));
    report(5, "linear-cost encoder", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 6: overfit convergence") {
    Stopwatch watch;
    TrainConfig cfg = overfit_config();
    TrainOutputs out = train_model(cfg);
    const float final_loss = out.record.losses.back();
    MetricsReport train_metrics = evaluate_model(out.model, out.data.train);
    const double elapsed = watch.seconds();
    const bool ok = final_loss < 0.3f && train_metrics.miou >= 0.95 && elapsed < 600.0;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "final loss %.4f, train mIoU %.4f, %.0f s", final_loss,
                  train_metrics.miou, elapsed);
    report(6, "overfit convergence", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 7: preprocessor ordering") {
    Stopwatch watch;
    TrainConfig cfg = overfit_config();
    cfg.steps = 220;
    cfg.dataset.synth_test = 4;
    const std::vector<PreprocessorKind> kinds = {
        PreprocessorKind::Identity, PreprocessorKind::SingleConv2d, PreprocessorKind::UNet2d,
        PreprocessorKind::UNet3d};
    std::vector<CompareRow> rows = compare_preprocessors(cfg, kinds, {1, 2, 3});
    std::printf("%s", compare_table_csv(rows).c_str());

    auto find = [&rows](PreprocessorKind kind) -> const CompareRow& {
        for (const CompareRow& r : rows)
            if (r.kind == kind) return r;
        throw std::runtime_error("missing row");
    };
    const CompareRow& identity = find(PreprocessorKind::Identity);
    const CompareRow& single = find(PreprocessorKind::SingleConv2d);
    const CompareRow& unet2d = find(PreprocessorKind::UNet2d);
    const CompareRow& unet3d = find(PreprocessorKind::UNet3d);

    bool identity_floor = true;
    for (double v : identity.per_seed_small_f1) {
        identity_floor = identity_floor && (std::isnan(v) || v < 0.05);
    }
    const bool ordered = identity.small_f1_rank < single.small_f1_rank &&
                         single.small_f1_rank < unet2d.small_f1_rank &&
                         unet2d.small_f1_rank < unet3d.small_f1_rank;
    bool latent_equal = true;
    for (const CompareRow& r : rows) latent_equal = latent_equal && r.latent_params == rows[0].latent_params;
    const double elapsed = watch.seconds();
    const bool ok = identity_floor && ordered && latent_equal && elapsed < 3600.0;
    char detail[200];
    std::snprintf(detail, sizeof(detail),
                  "small-class F1 means: id=%.3f single=%.3f unet2d=%.3f unet3d=%.3f, %.0f s",
                  identity.small_f1_rank, single.small_f1_rank, unet2d.small_f1_rank,
                  unet3d.small_f1_rank, elapsed);
    report(7, "preprocessor ordering", ok, detail);
    CHECK(ok);
}

TEST_CASE("criterion 8: determinism and persistence") {
    // bitwise-identical first-10-step losses
    TrainConfig cfg;
    cfg.pre.kind = PreprocessorKind::SingleConv2d;
    cfg.pre.single_filters = 8;
    cfg.latents = 16;
    cfg.latent_dim = 32;
    cfg.heads = 2;
    cfg.self_blocks = 1;
    cfg.fourier_bands = 4;
    cfg.steps = 10;
    cfg.batch_size = 1;
    cfg.tile_size = 32;
    cfg.dataset.synth_size = 32;
    cfg.dataset.synth_train = 2;
    TrainOutputs a = train_model(cfg);
    TrainOutputs b = train_model(cfg);
    bool losses_equal = a.record.losses.size() == 10 && a.record.losses == b.record.losses;

    // MMRT round trip, bit-exact bytes
    SynthParams sp;
    sp.seed = 3;
    sp.n_scenes = 1;
    sp.size = 32;
    MultimodalScene scene = synth_dataset(sp)[0];
    const std::string p1 = (fs::temp_directory_path() / "percseg_acc.mmrt").string();
    const std::string p2 = p1 + ".again";
    write_mmrt(p1, scene_to_mmrt(scene, 4));
    write_mmrt(p2, scene_to_mmrt(mmrt_to_scene(read_mmrt(p1), scene.id), 4));
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    std::string bytes1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string bytes2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    const bool mmrt_ok = !bytes1.empty() && bytes1 == bytes2;
    fs::remove(p1);
    fs::remove(p2);

    // checkpoint round trip: identical predictions and identical bytes
    const std::string ck1 = (fs::temp_directory_path() / "percseg_acc.ckpt").string();
    const std::string ck2 = ck1 + ".again";
    ParamList<float> params = a.model.parameters();
    save_checkpoint(ck1, params);
    MaskRaster pred_before = predict_mask(a.model, a.data.train[0]);
    Rng rng(99);
    SegModel fresh = build_seg_model<float>(cfg, rng);
    ParamList<float> fresh_params = fresh.parameters();
    load_checkpoint(ck1, fresh_params);
    save_checkpoint(ck2, fresh_params);
    MaskRaster pred_after = predict_mask(fresh, a.data.train[0]);
    std::ifstream c1(ck1, std::ios::binary), c2(ck2, std::ios::binary);
    std::string cb1((std::istreambuf_iterator<char>(c1)), std::istreambuf_iterator<char>());
    std::string cb2((std::istreambuf_iterator<char>(c2)), std::istreambuf_iterator<char>());
    const bool ckpt_ok = pred_before.v == pred_after.v && !cb1.empty() && cb1 == cb2;
    fs::remove(ck1);
    fs::remove(ck2);

    const bool ok = losses_equal && mmrt_ok && ckpt_ok;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "losses %s, MMRT bytes %s, checkpoint %s",
                  losses_equal ? "bitwise-equal" : "DIFFER", mmrt_ok ? "bit-exact" : "DIFFER",
                  ckpt_ok ? "bit-exact" : "DIFFER");
    report(8, "determinism and persistence", ok, detail);
    CHECK(ok);
}
