#include "percseg/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "percseg/losses.hpp"
#include "percseg/posenc.hpp"

namespace percseg {

void TrainConfig::validate() const {
    if (lr <= 0 || steps < 1 || batch_size < 1 || tile_size < 1) {
        throw std::invalid_argument("TrainConfig: lr, steps, batch_size, tile_size must be positive");
    }
    if (classes < 2) throw std::invalid_argument("TrainConfig: need at least 2 classes");
    if (latents < 1 || latent_dim < 1 || heads < 1 || latent_dim % heads != 0) {
        throw std::invalid_argument("TrainConfig: bad latent configuration");
    }
    if (pos_kind == PosEncodingKind::FourierFixed2D && fourier_bands < 1) {
        throw std::invalid_argument("TrainConfig: fourier_bands must be >= 1");
    }
    if (pos_kind == PosEncodingKind::Learned && learned_pos_dim < 1) {
        throw std::invalid_argument("TrainConfig: learned_pos_dim must be >= 1");
    }
    if (dataset.kind == DatasetKind::Synthetic && dataset.synth_train < 1) {
        throw std::invalid_argument("TrainConfig: synthetic dataset needs training scenes");
    }
}

// ---------------------------------------------------------------------------
// Config text format: one `key = value` pair per line, '#' comments.

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
}

std::string recipe_name(StackRecipe r) {
    switch (r) {
        case StackRecipe::Vaihingen: return "vaihingen";
        case StackRecipe::Potsdam: return "potsdam";
        case StackRecipe::Custom: return "custom";
    }
    return "vaihingen";
}

StackRecipe recipe_from(const std::string& name) {
    if (name == "vaihingen") return StackRecipe::Vaihingen;
    if (name == "potsdam") return StackRecipe::Potsdam;
    if (name == "custom") return StackRecipe::Custom;
    throw std::invalid_argument("unknown stacking recipe '" + name + "'");
}

}  // namespace

TrainConfig parse_config_text(const std::string& text) {
    TrainConfig cfg;
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        try {
            if (key == "preprocessor") cfg.pre.kind = preprocessor_kind_from(value);
            else if (key == "pre.single_filters") cfg.pre.single_filters = std::stoll(value);
            else if (key == "pre.stages") cfg.pre.stages = std::stoll(value);
            else if (key == "pre.base_filters") cfg.pre.base_filters = std::stoll(value);
            else if (key == "pre.out_channels_3d") cfg.pre.out_channels_3d = std::stoll(value);
            else if (key == "perceiver.latents") cfg.latents = std::stoll(value);
            else if (key == "perceiver.latent_dim") cfg.latent_dim = std::stoll(value);
            else if (key == "perceiver.heads") cfg.heads = std::stoll(value);
            else if (key == "perceiver.self_blocks") cfg.self_blocks = std::stoll(value);
            else if (key == "perceiver.ffn_mult") cfg.ffn_mult = std::stoll(value);
            else if (key == "pos.kind") {
                if (value == "fourier") cfg.pos_kind = PosEncodingKind::FourierFixed2D;
                else if (value == "learned") cfg.pos_kind = PosEncodingKind::Learned;
                else throw std::invalid_argument("pos.kind must be fourier or learned");
            }
            else if (key == "pos.bands") cfg.fourier_bands = std::stoll(value);
            else if (key == "pos.max_freq") cfg.fourier_max_freq = std::stod(value);
            else if (key == "pos.learned_dim") cfg.learned_pos_dim = std::stoll(value);
            else if (key == "classes") cfg.classes = std::stoll(value);
            else if (key == "lr") cfg.lr = std::stod(value);
            else if (key == "steps") cfg.steps = std::stoll(value);
            else if (key == "batch_size") cfg.batch_size = std::stoll(value);
            else if (key == "seed") cfg.seed = std::stoull(value);
            else if (key == "tile_size") cfg.tile_size = std::stoll(value);
            else if (key == "val_every") cfg.val_every = std::stoll(value);
            else if (key == "dataset.kind") {
                if (value == "synthetic") cfg.dataset.kind = DatasetKind::Synthetic;
                else if (value == "mmrt") cfg.dataset.kind = DatasetKind::MmrtDir;
                else throw std::invalid_argument("dataset.kind must be synthetic or mmrt");
            }
            else if (key == "dataset.synth_seed") cfg.dataset.synth_seed = std::stoull(value);
            else if (key == "dataset.synth_train") cfg.dataset.synth_train = std::stoi(value);
            else if (key == "dataset.synth_val") cfg.dataset.synth_val = std::stoi(value);
            else if (key == "dataset.synth_test") cfg.dataset.synth_test = std::stoi(value);
            else if (key == "dataset.synth_size") cfg.dataset.synth_size = std::stoll(value);
            else if (key == "dataset.dir") cfg.dataset.dir = value;
            else if (key == "dataset.split_file") cfg.dataset.split_file = value;
            else if (key == "dataset.recipe") cfg.dataset.recipe = recipe_from(value);
            else throw std::invalid_argument("unknown config key '" + key + "'");
        } catch (const std::invalid_argument&) {
            throw;
        } catch (const std::exception&) {
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": bad value for '" + key + "'");
        }
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config_text(ss.str());
}

std::string canonical_config_text(const TrainConfig& cfg) {
    std::map<std::string, std::string> kv;
    kv["preprocessor"] = to_string(cfg.pre.kind);
    kv["pre.single_filters"] = std::to_string(cfg.pre.single_filters);
    kv["pre.stages"] = std::to_string(cfg.pre.stages);
    kv["pre.base_filters"] = std::to_string(cfg.pre.base_filters);
    kv["pre.out_channels_3d"] = std::to_string(cfg.pre.out_channels_3d);
    kv["perceiver.latents"] = std::to_string(cfg.latents);
    kv["perceiver.latent_dim"] = std::to_string(cfg.latent_dim);
    kv["perceiver.heads"] = std::to_string(cfg.heads);
    kv["perceiver.self_blocks"] = std::to_string(cfg.self_blocks);
    kv["perceiver.ffn_mult"] = std::to_string(cfg.ffn_mult);
    kv["pos.kind"] = cfg.pos_kind == PosEncodingKind::FourierFixed2D ? "fourier" : "learned";
    kv["pos.bands"] = std::to_string(cfg.fourier_bands);
    kv["pos.max_freq"] = fmt_double(cfg.fourier_max_freq);
    kv["pos.learned_dim"] = std::to_string(cfg.learned_pos_dim);
    kv["classes"] = std::to_string(cfg.classes);
    kv["lr"] = fmt_double(cfg.lr);
    kv["steps"] = std::to_string(cfg.steps);
    kv["batch_size"] = std::to_string(cfg.batch_size);
    kv["seed"] = std::to_string(cfg.seed);
    kv["tile_size"] = std::to_string(cfg.tile_size);
    kv["val_every"] = std::to_string(cfg.val_every);
    kv["dataset.kind"] = cfg.dataset.kind == DatasetKind::Synthetic ? "synthetic" : "mmrt";
    kv["dataset.synth_seed"] = std::to_string(cfg.dataset.synth_seed);
    kv["dataset.synth_train"] = std::to_string(cfg.dataset.synth_train);
    kv["dataset.synth_val"] = std::to_string(cfg.dataset.synth_val);
    kv["dataset.synth_test"] = std::to_string(cfg.dataset.synth_test);
    kv["dataset.synth_size"] = std::to_string(cfg.dataset.synth_size);
    kv["dataset.dir"] = cfg.dataset.dir;
    kv["dataset.split_file"] = cfg.dataset.split_file;
    kv["dataset.recipe"] = recipe_name(cfg.dataset.recipe);
    std::ostringstream os;
    for (const auto& [k, v] : kv) os << k << " = " << v << "\n";
    return os.str();
}

uint64_t config_hash(const TrainConfig& cfg) {
    const std::string text = canonical_config_text(cfg);
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

// ---------------------------------------------------------------------------
// Dataset loading

namespace {

SplitSpec parse_split_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open split file '" + path + "'");
    SplitSpec spec;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        std::istringstream is(line);
        std::string which, id;
        is >> which >> id;
        if (!is || id.empty()) {
            throw std::invalid_argument("split file line " + std::to_string(line_no) +
                                        ": expected '<train|val|test> <scene id>'");
        }
        if (which == "train") spec.train.push_back(id);
        else if (which == "val") spec.val.push_back(id);
        else if (which == "test") spec.test.push_back(id);
        else throw std::invalid_argument("split file line " + std::to_string(line_no) +
                                         ": unknown split '" + which + "'");
    }
    spec.validate();
    return spec;
}

std::vector<TileSample> tiles_for(const std::vector<const MultimodalScene*>& scenes,
                                  StackRecipe recipe, int64_t tile_size) {
    std::vector<TileSample> tiles;
    for (const MultimodalScene* s : scenes) {
        auto t = tile_scene(*s, recipe, tile_size, tile_size);
        tiles.insert(tiles.end(), std::make_move_iterator(t.begin()),
                     std::make_move_iterator(t.end()));
    }
    return tiles;
}

}  // namespace

LoadedData load_dataset(const TrainConfig& cfg) {
    LoadedData data;
    if (cfg.dataset.kind == DatasetKind::Synthetic) {
        SynthParams sp;
        sp.seed = cfg.dataset.synth_seed;
        sp.n_scenes = cfg.dataset.synth_train + cfg.dataset.synth_val + cfg.dataset.synth_test;
        sp.size = cfg.dataset.synth_size;
        sp.num_classes = static_cast<int>(cfg.classes);
        std::vector<MultimodalScene> scenes = synth_dataset(sp);
        int idx = 0;
        auto take = [&](int n, std::vector<TileSample>& dst) {
            for (int i = 0; i < n; ++i, ++idx) {
                auto t = tile_scene(scenes[static_cast<size_t>(idx)], StackRecipe::Vaihingen,
                                    cfg.tile_size, cfg.tile_size);
                dst.insert(dst.end(), std::make_move_iterator(t.begin()),
                           std::make_move_iterator(t.end()));
            }
        };
        take(cfg.dataset.synth_train, data.train);
        take(cfg.dataset.synth_val, data.val);
        take(cfg.dataset.synth_test, data.test);
        return data;
    }

    namespace fs = std::filesystem;
    if (!fs::is_directory(cfg.dataset.dir)) {
        throw std::runtime_error("dataset directory '" + cfg.dataset.dir + "' does not exist");
    }
    std::vector<MultimodalScene> scenes;
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(cfg.dataset.dir)) {
        if (entry.path().extension() == ".mmrt") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const fs::path& p : files) {
        scenes.push_back(mmrt_to_scene(read_mmrt(p.string()), p.stem().string()));
    }
    if (scenes.empty()) throw std::runtime_error("no .mmrt scenes in '" + cfg.dataset.dir + "'");
    SplitSpec spec = parse_split_file(cfg.dataset.split_file);
    SplitScenes split = split_by_ids(scenes, spec);
    data.train = tiles_for(split.train, cfg.dataset.recipe, cfg.tile_size);
    data.val = tiles_for(split.val, cfg.dataset.recipe, cfg.tile_size);
    data.test = tiles_for(split.test, cfg.dataset.recipe, cfg.tile_size);
    return data;
}

// ---------------------------------------------------------------------------
// SegModel

template <typename T>
TensorT<T> SegModelT<T>::forward(const TensorT<T>& tile, AttnProbe* probe) const {
    if (tile.ndim() != 3 || tile.size(1) != tile_h || tile.size(2) != tile_w) {
        throw std::invalid_argument("SegModel: tile must be [C," + std::to_string(tile_h) + "," +
                                    std::to_string(tile_w) + "]");
    }
    TensorT<T> rows = standardize(pre->forward(tile));
    TensorT<T> features = concat<T>({rows, pos}, 1);
    return perceiver->forward(features, pos, probe);
}

template <typename T>
ParamList<T> SegModelT<T>::parameters() {
    ParamList<T> out;
    pre->params(out);
    if (learned_pos) out.emplace_back("pos.learned", &pos);
    perceiver->params(out);
    return out;
}

template <typename T>
int64_t SegModelT<T>::preprocessor_param_count() {
    ParamList<T> out;
    pre->params(out);
    return param_count(out);
}

template <typename T>
SegModelT<T> build_seg_model(const TrainConfig& cfg, Rng& rng) {
    cfg.validate();
    SegModelT<T> model;
    model.pre_opts = cfg.pre;
    model.tile_h = cfg.tile_size;
    model.tile_w = cfg.tile_size;
    model.num_classes = cfg.classes;
    model.pre = make_preprocessor<T>(cfg.pre, 5, rng);
    int64_t pos_dim = 0;
    if (cfg.pos_kind == PosEncodingKind::FourierFixed2D) {
        pos_dim = fourier_pos_dim(cfg.fourier_bands);
        TensorT<double> pos64 =
            fourier_pos_2d_f64(cfg.tile_size, cfg.tile_size, cfg.fourier_bands, cfg.fourier_max_freq);
        if constexpr (std::is_same_v<T, float>) {
            model.pos = to_float(pos64);
        } else {
            model.pos = pos64;
        }
        model.learned_pos = false;
    } else {
        pos_dim = cfg.learned_pos_dim;
        model.pos = TensorT<T>::normal({cfg.tile_size * cfg.tile_size, pos_dim}, rng, T(0),
                                       static_cast<T>(0.02));
        model.learned_pos = true;
    }
    PerceiverConfig pc;
    pc.num_latents = cfg.latents;
    pc.latent_dim = cfg.latent_dim;
    pc.num_heads = cfg.heads;
    pc.num_self_blocks = cfg.self_blocks;
    pc.input_channels = model.pre->out_channels() + pos_dim;
    pc.query_channels = pos_dim;
    pc.num_classes = cfg.classes;
    pc.ffn_mult = cfg.ffn_mult;
    if (cfg.pos_kind == PosEncodingKind::FourierFixed2D) {
        pc.spatial_init = true;
        pc.pos_bands = cfg.fourier_bands;
        pc.pos_max_freq = cfg.fourier_max_freq;
    }
    model.perceiver = std::make_unique<PerceiverT<T>>(pc, rng);
    return model;
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

void Adam::step(const ParamList<float>& params, const GradTable<float>& grads) {
    if (m_.empty()) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(static_cast<size_t>(params[i].second->numel()), 0.f);
            v_[i].assign(static_cast<size_t>(params[i].second->numel()), 0.f);
        }
    }
    if (m_.size() != params.size()) throw std::invalid_argument("Adam: parameter count changed");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        TensorT<float>* p = params[i].second;
        if (m_[i].size() != static_cast<size_t>(p->numel())) {
            throw std::invalid_argument("Adam: parameter shape changed");
        }
        const TensorT<float>* g = grads.has(p->node()) ? &grads.at(p->node()) : nullptr;
        if (g && !same_shape(g->shape(), p->shape())) {
            throw std::invalid_argument("Adam: gradient shape mismatch");
        }
        float* pv = p->mutable_data();
        float* mv = m_[i].data();
        float* vv = v_[i].data();
        const float* gv = g ? g->data() : nullptr;
        const int64_t n = p->numel();
        for (int64_t j = 0; j < n; ++j) {
            const float gj = gv ? gv[j] : 0.f;
            mv[j] = static_cast<float>(b1_) * mv[j] + static_cast<float>(1.0 - b1_) * gj;
            vv[j] = static_cast<float>(b2_) * vv[j] + static_cast<float>(1.0 - b2_) * gj * gj;
            const double mhat = mv[j] / bc1;
            const double vhat = vv[j] / bc2;
            pv[j] -= static_cast<float>(lr_ * mhat / (std::sqrt(vhat) + eps_));
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::vector<int64_t> mask_labels(const MaskRaster& mask) {
    return std::vector<int64_t>(mask.v.begin(), mask.v.end());
}

}  // namespace

TrainOutputs train_model(const TrainConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    LoadedData data = load_dataset(cfg);
    if (data.train.empty()) throw std::runtime_error("train: dataset has no training tiles");
    Rng rng(cfg.seed);
    SegModel model = build_seg_model<float>(cfg, rng);
    ParamList<float> params = model.parameters();
    Adam adam(cfg.lr);
    RunRecord record;
    record.config_hash = config_hash(cfg);
    const int64_t n = static_cast<int64_t>(data.train.size());
    // Fixed schedule: short linear warmup so the first latent-attention
    // updates cannot collapse the class distribution, then cosine decay to
    // a 10% floor to consolidate late training.
    const int64_t warmup = std::min<int64_t>(cfg.steps / 10, 30);
    for (int64_t step = 0; step < cfg.steps; ++step) {
        double factor = 1.0;
        if (warmup > 0 && step < warmup) {
            factor = static_cast<double>(step + 1) / static_cast<double>(warmup);
        } else if (cfg.steps > warmup + 1) {
            const double progress = static_cast<double>(step - warmup) /
                                    static_cast<double>(cfg.steps - 1 - warmup);
            factor = 0.1 + 0.45 * (1.0 + std::cos(3.14159265358979323846 * progress));
        }
        adam.set_lr(cfg.lr * factor);
        Tape tape;
        bind_params(tape, params);
        Tensor batch_loss;
        for (int64_t j = 0; j < cfg.batch_size; ++j) {
            const TileSample& tile = data.train[static_cast<size_t>((step * cfg.batch_size + j) % n)];
            Tensor logits = model.forward(tile.features);
            Tensor probs = softmax(logits, -1);
            Tensor onehot = onehot_rows<float>(mask_labels(tile.mask), cfg.classes);
            Tensor loss = joint_loss(probs, onehot);
            batch_loss = j == 0 ? loss : add(batch_loss, loss);
        }
        Tensor loss = scale(batch_loss, 1.f / static_cast<float>(cfg.batch_size));
        const float value = loss.item();
        if (!std::isfinite(value)) {
            unbind_params(params);
            throw std::runtime_error("train: non-finite loss at step " + std::to_string(step) +
                                     " (value " + std::to_string(value) + ")");
        }
        record.losses.push_back(value);
        GradTable<float> grads = tape.backward(loss);
        adam.step(params, grads);
        unbind_params(params);
        if (cfg.val_every > 0 && (step + 1) % cfg.val_every == 0 && !data.val.empty()) {
            record.val_metrics.emplace_back(step + 1, evaluate_model(model, data.val));
        }
    }
    record.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return TrainOutputs{std::move(record), std::move(model), std::move(data)};
}

MaskRaster predict_mask(const SegModel& model, const TileSample& tile) {
    Tensor logits = model.forward(tile.features);
    std::vector<int64_t> pred = argmax_last(logits);
    MaskRaster out(model.tile_h, model.tile_w);
    for (size_t i = 0; i < pred.size(); ++i) out.v[i] = static_cast<uint8_t>(pred[i]);
    return out;
}

MetricsReport evaluate_model(const SegModel& model, const std::vector<TileSample>& tiles) {
    return evaluate_with(
        [&model](const TileSample& tile) { return predict_mask(model, tile); }, tiles,
        static_cast<int>(model.num_classes));
}

MetricsReport evaluate_with(const std::function<MaskRaster(const TileSample&)>& predict,
                            const std::vector<TileSample>& tiles, int num_classes) {
    if (tiles.empty()) throw std::invalid_argument("evaluate: no tiles");
    ConfusionMatrix cm(num_classes);
    for (const TileSample& tile : tiles) {
        if (tile.mask.v.empty()) throw std::invalid_argument("evaluate: tile has no mask");
        MaskRaster pred = predict(tile);
        if (pred.h != tile.mask.h || pred.w != tile.mask.w) {
            throw std::invalid_argument("evaluate: prediction size mismatch");
        }
        for (uint8_t v : tile.mask.v) {
            if (v >= num_classes) {
                throw std::invalid_argument("evaluate: mask label exceeds class count");
            }
        }
        cm.add_labels(mask_labels(tile.mask), mask_labels(pred));
    }
    return MetricsReport::from(cm);
}

void save_run_record(const std::string& path, const RunRecord& record) {
    nlohmann::json j;
    j["config_hash"] = record.config_hash;
    j["wall_seconds"] = record.wall_seconds;
    j["losses"] = record.losses;
    auto metrics_json = [](const MetricsReport& m) {
        nlohmann::json mj;
        auto field = [](double v) {
            return std::isnan(v) ? nlohmann::json() : nlohmann::json(v);
        };
        mj["mean_f1"] = field(m.mean_f1);
        mj["miou"] = field(m.miou);
        mj["aa"] = field(m.aa);
        std::vector<nlohmann::json> f1;
        for (double v : m.f1) f1.push_back(field(v));
        mj["f1"] = f1;
        return mj;
    };
    std::vector<nlohmann::json> vals;
    for (const auto& [step, metrics] : record.val_metrics) {
        nlohmann::json vj = metrics_json(metrics);
        vj["step"] = step;
        vals.push_back(vj);
    }
    j["val_metrics"] = vals;
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("save_run_record: cannot open '" + path + "'");
    f << j.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Preprocessor comparison

std::vector<CompareRow> compare_preprocessors(const TrainConfig& base,
                                              const std::vector<PreprocessorKind>& kinds,
                                              const std::vector<uint64_t>& seeds) {
    if (kinds.empty()) throw std::invalid_argument("compare_preprocessors: no kinds");
    if (seeds.empty()) throw std::invalid_argument("compare_preprocessors: no seeds");
    std::vector<CompareRow> rows;
    int64_t expected_latent_params = -1;
    for (PreprocessorKind kind : kinds) {
        CompareRow row;
        row.kind = kind;
        double rank_acc = 0.0, miou_acc = 0.0;
        for (uint64_t seed : seeds) {
            TrainConfig cfg = base;
            cfg.pre.kind = kind;
            cfg.seed = seed;
            TrainOutputs out = train_model(cfg);
            const std::vector<TileSample>& eval_tiles =
                out.data.test.empty() ? out.data.train : out.data.test;
            // smallest class by training-mask pixel share
            std::vector<MaskRaster> masks;
            for (const TileSample& t : out.data.train) masks.push_back(t.mask);
            std::vector<double> prop = class_proportions(masks, static_cast<int>(cfg.classes));
            row.small_class = static_cast<int>(
                std::min_element(prop.begin(), prop.end()) - prop.begin());
            MetricsReport report = evaluate_model(out.model, eval_tiles);
            const double f1 = report.f1[static_cast<size_t>(row.small_class)];
            row.per_seed_small_f1.push_back(f1);
            row.per_seed_miou.push_back(report.miou);
            rank_acc += std::isnan(f1) ? 0.0 : f1;
            miou_acc += report.miou;
            row.preprocessor_params = out.model.preprocessor_param_count();
            row.latent_params = out.model.latent_param_count();
        }
        row.small_f1_rank = rank_acc / static_cast<double>(seeds.size());
        row.mean_miou = miou_acc / static_cast<double>(seeds.size());
        if (expected_latent_params < 0) expected_latent_params = row.latent_params;
        if (row.latent_params != expected_latent_params) {
            throw std::runtime_error("compare_preprocessors: latent parameter counts diverged");
        }
        rows.push_back(std::move(row));
    }
    std::sort(rows.begin(), rows.end(),
              [](const CompareRow& a, const CompareRow& b) { return a.small_f1_rank < b.small_f1_rank; });
    return rows;
}

std::string compare_table_csv(const std::vector<CompareRow>& rows) {
    std::ostringstream os;
    os << "preprocessor,small_class,small_f1_per_seed,small_f1_mean,miou_mean,"
          "preprocessor_params,latent_params\n";
    for (const CompareRow& row : rows) {
        os << to_string(row.kind) << "," << row.small_class << ",";
        for (size_t i = 0; i < row.per_seed_small_f1.size(); ++i) {
            if (i) os << "|";
            const double v = row.per_seed_small_f1[i];
            if (std::isnan(v)) os << "NaN";
            else os << v;
        }
        os << "," << row.small_f1_rank << "," << row.mean_miou << "," << row.preprocessor_params
           << "," << row.latent_params << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------

template struct SegModelT<float>;
template struct SegModelT<double>;
template SegModelT<float> build_seg_model<float>(const TrainConfig&, Rng&);
template SegModelT<double> build_seg_model<double>(const TrainConfig&, Rng&);

}  // namespace percseg
