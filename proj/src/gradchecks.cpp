#include "percseg/gradchecks.hpp"

#include <stdexcept>

#include "percseg/conv.hpp"
#include "percseg/losses.hpp"
#include "percseg/perceiver.hpp"
#include "percseg/posenc.hpp"
#include "percseg/preprocess.hpp"
#include "percseg/tensor.hpp"

namespace percseg {

namespace {

using T64 = TensorT<double>;
constexpr double kEps = 1e-5;

// Random probe weights make the scalar objective sensitive to every output
// coordinate.
T64 probe_like(const Shape& shape, uint64_t seed) {
    return T64::uniform(shape, seed, -1.0, 1.0);
}

T64 objective(const T64& out, uint64_t seed) { return sum(mul(out, probe_like(out.shape(), seed))); }

// Uniform values bounded away from zero, for kinked ops.
T64 away_from_zero(Shape shape, uint64_t seed, double margin) {
    T64 t = T64::uniform(shape, seed, -2.0, 2.0);
    double* p = t.mutable_data();
    for (int64_t i = 0; i < t.numel(); ++i) {
        if (p[i] >= 0 && p[i] < margin) p[i] += margin;
        if (p[i] < 0 && p[i] > -margin) p[i] -= margin;
    }
    return t;
}

double check_inputs(const GradCheckForward& forward, std::vector<T64*> inputs) {
    return gradcheck_params(forward, inputs, kEps);
}

// ---- individual cases ------------------------------------------------------

double case_elementwise() {
    T64 a = T64::uniform({3, 4}, 11, -2.0, 2.0);
    T64 b = away_from_zero({4}, 12, 0.2);  // broadcast over rows; nonzero for div0
    double err = 0.0;
    for (Elementwise kind :
         {Elementwise::Add, Elementwise::Sub, Elementwise::Mul, Elementwise::Div0}) {
        err = std::max(err, check_inputs(
                                [&](TapeT<double>&) {
                                    return objective(elementwise(a, b, kind), 13);
                                },
                                {&a, &b}));
    }
    return err;
}

double case_relu() {
    T64 x = away_from_zero({4, 5}, 21, 0.1);
    return check_inputs([&](TapeT<double>&) { return objective(relu(x), 22); }, {&x});
}

double case_gelu() {
    T64 x = T64::uniform({4, 5}, 23, -2.0, 2.0);
    return check_inputs([&](TapeT<double>&) { return objective(gelu(x), 24); }, {&x});
}

double case_exp() {
    T64 x = T64::uniform({4, 5}, 25, -2.0, 2.0);
    return check_inputs([&](TapeT<double>&) { return objective(exp(x), 26); }, {&x});
}

double case_log() {
    T64 x = T64::uniform({4, 5}, 27, 0.5, 2.5);
    return check_inputs([&](TapeT<double>&) { return objective(log(x), 28); }, {&x});
}

double case_clamp() {
    T64 x = away_from_zero({4, 5}, 29, 0.1);  // avoids the +-1 bounds as well
    return check_inputs(
        [&](TapeT<double>&) { return objective(clamp(x, -1.5, 1.5), 30); }, {&x});
}

double case_matmul() {
    T64 a = T64::uniform({2, 3, 4}, 31, -2.0, 2.0);
    T64 b = T64::uniform({4, 5}, 32, -2.0, 2.0);
    return check_inputs([&](TapeT<double>&) { return objective(matmul(a, b), 33); }, {&a, &b});
}

double case_softmax() {
    T64 x = T64::uniform({3, 6}, 34, -2.0, 2.0);
    return check_inputs([&](TapeT<double>&) { return objective(softmax(x, -1), 35); }, {&x});
}

double case_layer_norm() {
    T64 x = T64::uniform({4, 6}, 36, -2.0, 2.0);
    T64 gamma = T64::uniform({6}, 37, 0.5, 1.5);
    T64 beta = T64::uniform({6}, 38, -0.5, 0.5);
    return check_inputs(
        [&](TapeT<double>&) { return objective(layer_norm(x, -1, gamma, beta, 1e-5), 39); },
        {&x, &gamma, &beta});
}

double case_shape_ops() {
    T64 x = T64::uniform({2, 3, 4}, 40, -2.0, 2.0);
    T64 y = T64::uniform({2, 5, 4}, 41, -2.0, 2.0);
    return check_inputs(
        [&](TapeT<double>&) {
            T64 joined = concat<double>({permute(reshape(x, {3, 2, 4}), {1, 0, 2}), y}, 1);
            return objective(slice(joined, 1, 1, 6), 42);
        },
        {&x, &y});
}

double case_reductions() {
    T64 x = T64::uniform({3, 4}, 43, -2.0, 2.0);
    return check_inputs(
        [&](TapeT<double>&) {
            return add(add(sum(x), mean(x)), objective(sum(x, 0, false), 44));
        },
        {&x});
}

double case_conv2d() {
    T64 x = T64::uniform({2, 5, 6}, 50, -2.0, 2.0);
    T64 w = T64::uniform({3, 2, 3, 3}, 51, -1.0, 1.0);
    T64 b = T64::uniform({3}, 52, -1.0, 1.0);
    return check_inputs(
        [&](TapeT<double>&) { return objective(conv2d(x, w, b, 1, 1), 53); }, {&x, &w, &b});
}

double case_conv3d() {
    T64 x = T64::uniform({2, 3, 4, 5}, 54, -2.0, 2.0);
    T64 w = T64::uniform({2, 2, 3, 3, 3}, 55, -1.0, 1.0);
    T64 b = T64::uniform({2}, 56, -1.0, 1.0);
    return check_inputs(
        [&](TapeT<double>&) {
            return objective(conv3d(x, w, b, Triple{1, 1, 1}, Triple{1, 1, 1}), 57);
        },
        {&x, &w, &b});
}

double case_conv3d_transpose() {
    T64 x = T64::uniform({2, 3, 4, 4}, 58, -2.0, 2.0);
    T64 w = T64::uniform({2, 2, 1, 2, 2}, 59, -1.0, 1.0);
    T64 b = T64::uniform({2}, 60, -1.0, 1.0);
    return check_inputs(
        [&](TapeT<double>&) {
            return objective(conv3d_transpose(x, w, b, Triple{1, 2, 2}, Triple{0, 0, 0}), 61);
        },
        {&x, &w, &b});
}

double case_maxpool2d() {
    T64 x = T64::uniform({2, 4, 6}, 62, -2.0, 2.0);
    return check_inputs([&](TapeT<double>&) { return objective(maxpool2d(x, 2, 2), 63); }, {&x});
}

double case_maxpool3d() {
    T64 x = T64::uniform({2, 3, 4, 4}, 64, -2.0, 2.0);
    return check_inputs(
        [&](TapeT<double>&) { return objective(maxpool3d(x, Triple{1, 2, 2}), 65); }, {&x});
}

double case_dice() {
    T64 probs = T64::uniform({4, 3}, 70, 0.05, 0.95);
    T64 onehot = onehot_rows<double>({0, 2, 1, 2}, 3);
    return check_inputs([&](TapeT<double>&) { return dice_loss(probs, onehot); }, {&probs});
}

double case_soft_ce() {
    T64 probs = T64::uniform({4, 3}, 71, 0.05, 0.95);
    T64 onehot = onehot_rows<double>({1, 0, 2, 1}, 3);
    return check_inputs([&](TapeT<double>&) { return soft_ce_loss(probs, onehot); }, {&probs});
}

template <typename ModuleParams>
double check_module(ModuleParams&& collect, const GradCheckForward& forward) {
    ParamList<double> params;
    collect(params);
    std::vector<T64*> tensors;
    for (auto& [name, t] : params) tensors.push_back(t);
    return gradcheck_params(forward, tensors, kEps);
}

double case_cross_attention() {
    Rng rng(80);
    auto attn = CrossAttentionT<double>::make(6, 7, 6, 2, rng);
    T64 q = T64::uniform({3, 6}, 81, -1.0, 1.0);
    T64 kv = T64::uniform({5, 7}, 82, -1.0, 1.0);
    return check_module([&](ParamList<double>& p) { attn.params("attn", p); },
                        [&](TapeT<double>&) { return objective(attn.forward(q, kv), 83); });
}

double case_self_attention_block() {
    Rng rng(84);
    auto block = SelfAttentionBlockT<double>::make(6, 2, 2, rng);
    T64 latent = T64::uniform({4, 6}, 85, -1.0, 1.0);
    return check_module([&](ParamList<double>& p) { block.params("block", p); },
                        [&](TapeT<double>&) { return objective(block.forward(latent), 86); });
}

PerceiverConfig miniature_config() {
    PerceiverConfig pc;
    pc.num_latents = 4;
    pc.latent_dim = 8;
    pc.num_heads = 2;
    pc.num_self_blocks = 2;
    pc.input_channels = 7;
    pc.query_channels = 5;
    pc.num_classes = 3;
    pc.ffn_mult = 1;
    return pc;
}

double case_decode() {
    Rng rng(87);
    PerceiverT<double> model(miniature_config(), rng);
    T64 latent = T64::uniform({4, 8}, 88, -1.0, 1.0);
    T64 queries = T64::uniform({6, 5}, 89, -1.0, 1.0);
    return check_module([&](ParamList<double>& p) { model.params(p); },
                        [&](TapeT<double>&) { return objective(model.decode(queries, latent), 90); });
}

double case_end_to_end() {
    Rng rng(91);
    PerceiverT<double> model(miniature_config(), rng);
    const int64_t m = 16;
    T64 features = T64::uniform({m, 7}, 92, -1.0, 1.0);
    T64 queries = T64::uniform({m, 5}, 93, -1.0, 1.0);
    T64 onehot = onehot_rows<double>(
        {0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2, 0}, 3);
    return check_module(
        [&](ParamList<double>& p) { model.params(p); },
        [&](TapeT<double>&) {
            T64 probs = softmax(model.forward(features, queries), -1);
            return joint_loss(probs, onehot);
        });
}

double preprocessor_case(PreprocessorKind kind) {
    PreprocessorOptions opts;
    opts.kind = kind;
    opts.single_filters = 4;
    opts.stages = 2;
    opts.base_filters = 2;
    opts.out_channels_3d = 4;
    Rng rng(95 + static_cast<uint64_t>(kind));
    auto pre = make_preprocessor<double>(opts, 5, rng);
    T64 tile = T64::uniform({5, 8, 8}, 96 + static_cast<uint64_t>(kind), -1.0, 1.0);
    ParamList<double> params;
    pre->params(params);
    std::vector<T64*> tensors;
    for (auto& [name, t] : params) tensors.push_back(t);
    tensors.push_back(&tile);
    return gradcheck_params(
        [&](TapeT<double>&) { return objective(pre->forward(tile), 99); }, tensors, kEps);
}

}  // namespace

std::vector<GradCheckCase> gradcheck_suite() {
    return {
        {"elementwise", 1e-4, case_elementwise},
        {"relu", 1e-4, case_relu},
        {"gelu", 1e-4, case_gelu},
        {"exp", 1e-4, case_exp},
        {"log", 1e-4, case_log},
        {"clamp", 1e-4, case_clamp},
        {"matmul", 1e-4, case_matmul},
        {"softmax", 1e-4, case_softmax},
        {"layer_norm", 1e-4, case_layer_norm},
        {"shape_ops", 1e-4, case_shape_ops},
        {"reductions", 1e-4, case_reductions},
        {"conv2d", 1e-4, case_conv2d},
        {"conv3d", 1e-4, case_conv3d},
        {"conv3d_transpose", 1e-4, case_conv3d_transpose},
        {"maxpool2d", 1e-4, case_maxpool2d},
        {"maxpool3d", 1e-4, case_maxpool3d},
        {"dice", 1e-6, case_dice},
        {"soft_ce", 1e-4, case_soft_ce},
        {"cross_attention", 1e-4, case_cross_attention},
        {"self_attention_block", 1e-4, case_self_attention_block},
        {"decode", 1e-4, case_decode},
        {"single_conv2d", 1e-3, [] { return preprocessor_case(PreprocessorKind::SingleConv2d); }},
        {"unet2d", 1e-3, [] { return preprocessor_case(PreprocessorKind::UNet2d); }},
        {"dual_local", 1e-3, [] { return preprocessor_case(PreprocessorKind::DualLocal); }},
        {"unet3d", 1e-3, [] { return preprocessor_case(PreprocessorKind::UNet3d); }},
        {"end_to_end", 1e-3, case_end_to_end},
    };
}

std::vector<GradCheckReport> run_gradchecks(const std::string& scope) {
    std::vector<GradCheckCase> cases = gradcheck_suite();
    std::vector<GradCheckReport> reports;
    bool found = false;
    for (GradCheckCase& c : cases) {
        if (scope != "all" && scope != c.name) continue;
        found = true;
        GradCheckReport r;
        r.name = c.name;
        r.threshold = c.threshold;
        r.max_error = c.run();
        r.passed = r.max_error < c.threshold;
        reports.push_back(std::move(r));
    }
    if (!found) throw std::invalid_argument("unknown gradcheck scope '" + scope + "'");
    return reports;
}

}  // namespace percseg
