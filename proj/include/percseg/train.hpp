#pragma once
// Training and evaluation engine: run configuration, the segmentation model
// (preprocessor + positional features + latent encoder/decoder), Adam, the
// deterministic training loop, metric evaluation, and the preprocessor
// comparison harness.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "percseg/data.hpp"
#include "percseg/metrics.hpp"
#include "percseg/perceiver.hpp"
#include "percseg/preprocess.hpp"

namespace percseg {

enum class DatasetKind { Synthetic, MmrtDir };

struct DatasetSpec {
    DatasetKind kind = DatasetKind::Synthetic;
    // synthetic
    uint64_t synth_seed = 1234;
    int synth_train = 8;
    int synth_val = 0;
    int synth_test = 0;
    int64_t synth_size = 64;
    // mmrt directory
    std::string dir;
    std::string split_file;
    StackRecipe recipe = StackRecipe::Vaihingen;
};

struct TrainConfig {
    PreprocessorOptions pre;
    int64_t latents = 256;
    int64_t latent_dim = 128;
    int64_t heads = 4;
    int64_t self_blocks = 4;
    int64_t ffn_mult = 1;
    PosEncodingKind pos_kind = PosEncodingKind::FourierFixed2D;
    int64_t fourier_bands = 16;
    double fourier_max_freq = 32.0;
    int64_t learned_pos_dim = 64;
    int64_t classes = 4;
    double lr = 1e-3;
    int64_t steps = 300;
    int64_t batch_size = 2;
    uint64_t seed = 7;
    int64_t tile_size = 64;
    int64_t val_every = 0;
    DatasetSpec dataset;

    void validate() const;
};

TrainConfig parse_config_text(const std::string& text);
TrainConfig load_config(const std::string& path);
// Every key in sorted order with normalised values; the config hash is the
// FNV-1a 64 digest of this text.
std::string canonical_config_text(const TrainConfig& cfg);
uint64_t config_hash(const TrainConfig& cfg);

struct LoadedData {
    std::vector<TileSample> train, val, test;
};

LoadedData load_dataset(const TrainConfig& cfg);

template <typename T>
struct SegModelT {
    PreprocessorOptions pre_opts;
    std::unique_ptr<PreprocessorT<T>> pre;
    std::unique_ptr<PerceiverT<T>> perceiver;
    TensorT<T> pos;  // [H*W, P]; a parameter when learned
    bool learned_pos = false;
    int64_t tile_h = 0, tile_w = 0;
    int64_t num_classes = 0;

    TensorT<T> forward(const TensorT<T>& tile, AttnProbe* probe = nullptr) const;
    ParamList<T> parameters();
    int64_t preprocessor_param_count();
    int64_t latent_param_count() { return perceiver->latent_param_count(); }
};

using SegModel = SegModelT<float>;

template <typename T>
SegModelT<T> build_seg_model(const TrainConfig& cfg, Rng& rng);

class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(const ParamList<float>& params, const GradTable<float>& grads);
    void set_lr(double lr) { lr_ = lr; }
    double lr() const { return lr_; }
    int64_t steps_taken() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    int64_t t_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

struct RunRecord {
    std::vector<float> losses;
    double wall_seconds = 0.0;
    uint64_t config_hash = 0;
    std::vector<std::pair<int64_t, MetricsReport>> val_metrics;
};

struct TrainOutputs {
    RunRecord record;
    SegModel model;
    LoadedData data;
};

// Runs the full loop on the config's dataset. Throws std::runtime_error
// with a diagnostic if the loss turns non-finite.
TrainOutputs train_model(const TrainConfig& cfg);

MaskRaster predict_mask(const SegModel& model, const TileSample& tile);

MetricsReport evaluate_model(const SegModel& model, const std::vector<TileSample>& tiles);
// Evaluation seam for injected predictors (e.g. oracles in tests).
MetricsReport evaluate_with(const std::function<MaskRaster(const TileSample&)>& predict,
                            const std::vector<TileSample>& tiles, int num_classes);

void save_run_record(const std::string& path, const RunRecord& record);

struct CompareRow {
    PreprocessorKind kind = PreprocessorKind::Identity;
    std::vector<double> per_seed_small_f1;  // NaN preserved
    std::vector<double> per_seed_miou;
    double small_f1_rank = 0.0;  // seed mean with NaN counted as 0
    double mean_miou = 0.0;
    int small_class = 0;
    int64_t preprocessor_params = 0;
    int64_t latent_params = 0;
};

// Trains every kind x seed with an identical latent configuration and
// budget; rows come back ordered by ascending small-class F1.
std::vector<CompareRow> compare_preprocessors(const TrainConfig& base,
                                              const std::vector<PreprocessorKind>& kinds,
                                              const std::vector<uint64_t>& seeds);

std::string compare_table_csv(const std::vector<CompareRow>& rows);

}  // namespace percseg
