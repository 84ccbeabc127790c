// Command-line front end: data preparation, training, evaluation,
// prediction, preprocessor comparison, gradient checking, and class
// statistics. Exit codes: 0 success, 1 validation failure, 2 runtime error.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "percseg/data.hpp"
#include "percseg/gradchecks.hpp"
#include "percseg/losses.hpp"
#include "percseg/metrics.hpp"
#include "percseg/train.hpp"

namespace fs = std::filesystem;
using namespace percseg;

namespace {

std::string hex64(uint64_t v) {
    std::ostringstream os;
    os << std::hex << v;
    return os.str();
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    f << text;
}

std::vector<PreprocessorKind> parse_kinds(const std::string& csv) {
    std::vector<PreprocessorKind> kinds;
    std::istringstream is(csv);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) kinds.push_back(preprocessor_kind_from(item));
    }
    if (kinds.size() < 2) {
        throw std::invalid_argument("compare-preprocessors needs at least two kinds");
    }
    return kinds;
}

std::vector<uint64_t> parse_seeds(const std::string& csv) {
    std::vector<uint64_t> seeds;
    std::istringstream is(csv);
    std::string item;
    while (std::getline(is, item, ',')) {
        if (!item.empty()) seeds.push_back(std::stoull(item));
    }
    if (seeds.empty()) throw std::invalid_argument("no seeds given");
    return seeds;
}

int cmd_prepare_data(const std::string& out_dir, uint64_t seed, int scenes, int64_t size,
                     int train_n, int val_n) {
    fs::create_directories(out_dir);
    SynthParams sp;
    sp.seed = seed;
    sp.n_scenes = scenes;
    sp.size = size;
    std::vector<MultimodalScene> data = synth_dataset(sp);
    std::ostringstream split;
    for (int i = 0; i < scenes; ++i) {
        const MultimodalScene& s = data[static_cast<size_t>(i)];
        write_mmrt((fs::path(out_dir) / (s.id + ".mmrt")).string(), scene_to_mmrt(s, 4));
        const char* which = i < train_n ? "train" : (i < train_n + val_n ? "val" : "test");
        split << which << " " << s.id << "\n";
    }
    write_text((fs::path(out_dir) / "split.txt").string(), split.str());
    std::cout << "wrote " << scenes << " scenes to " << out_dir << "\n";
    return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir) {
    TrainConfig cfg = load_config(config_path);
    fs::create_directories(out_dir);
    TrainOutputs out = train_model(cfg);
    ParamList<float> params = out.model.parameters();
    save_checkpoint((fs::path(out_dir) / "model.ckpt").string(), params);
    save_run_record((fs::path(out_dir) / "run.json").string(), out.record);
    MetricsReport train_metrics = evaluate_model(out.model, out.data.train);
    write_text((fs::path(out_dir) / "train_metrics.csv").string(), train_metrics.to_csv());
    if (!out.data.val.empty()) {
        write_text((fs::path(out_dir) / "val_metrics.csv").string(),
                   evaluate_model(out.model, out.data.val).to_csv());
    }
    if (!out.data.test.empty()) {
        write_text((fs::path(out_dir) / "test_metrics.csv").string(),
                   evaluate_model(out.model, out.data.test).to_csv());
    }
    std::cout << "config hash " << hex64(out.record.config_hash) << "\n"
              << "final loss " << out.record.losses.back() << " after " << cfg.steps
              << " steps in " << out.record.wall_seconds << " s\n"
              << "checkpoint " << (fs::path(out_dir) / "model.ckpt").string() << "\n";
    return 0;
}

int cmd_evaluate(const std::string& config_path, const std::string& checkpoint,
                 const std::string& split, const std::string& out_dir) {
    TrainConfig cfg = load_config(config_path);
    fs::create_directories(out_dir);
    LoadedData data = load_dataset(cfg);
    const std::vector<TileSample>* tiles = nullptr;
    if (split == "train") tiles = &data.train;
    else if (split == "val") tiles = &data.val;
    else if (split == "test") tiles = &data.test;
    else throw std::invalid_argument("split must be train, val, or test");
    if (tiles->empty()) throw std::invalid_argument("split '" + split + "' has no tiles");
    Rng rng(cfg.seed);
    SegModel model = build_seg_model<float>(cfg, rng);
    ParamList<float> params = model.parameters();
    load_checkpoint(checkpoint, params);
    MetricsReport report = evaluate_model(model, *tiles);
    const std::string csv_path = (fs::path(out_dir) / (split + "_metrics.csv")).string();
    write_text(csv_path, report.to_csv());
    for (size_t i = 0; i < tiles->size(); ++i) {
        MaskRaster pred = predict_mask(model, (*tiles)[i]);
        write_ppm((fs::path(out_dir) / ("pred_" + std::to_string(i) + ".ppm")).string(), pred);
    }
    std::cout << report.to_csv() << "metrics written to " << csv_path << "\n";
    return 0;
}

int cmd_predict(const std::string& config_path, const std::string& checkpoint,
                const std::string& tile_path, const std::string& out_prefix) {
    TrainConfig cfg = load_config(config_path);
    MmrtTile raw = read_mmrt(tile_path);
    MultimodalScene scene = mmrt_to_scene(raw, fs::path(tile_path).stem().string());
    std::vector<TileSample> tiles =
        tile_scene(scene, cfg.dataset.recipe, cfg.tile_size, cfg.tile_size);
    Rng rng(cfg.seed);
    SegModel model = build_seg_model<float>(cfg, rng);
    ParamList<float> params = model.parameters();
    load_checkpoint(checkpoint, params);
    for (size_t i = 0; i < tiles.size(); ++i) {
        MaskRaster pred = predict_mask(model, tiles[i]);
        const std::string stem = out_prefix + (tiles.size() > 1 ? "_" + std::to_string(i) : "");
        write_pgm(stem + ".pgm", pred);
        write_ppm(stem + ".ppm", pred);
    }
    std::cout << "wrote " << tiles.size() << " prediction(s) with prefix " << out_prefix << "\n";
    return 0;
}

int cmd_compare(const std::string& config_path, const std::string& kinds_csv,
                const std::string& seeds_csv, const std::string& out_path) {
    TrainConfig cfg = load_config(config_path);
    std::vector<CompareRow> rows =
        compare_preprocessors(cfg, parse_kinds(kinds_csv), parse_seeds(seeds_csv));
    const std::string table = compare_table_csv(rows);
    std::cout << table;
    if (!out_path.empty()) write_text(out_path, table);
    return 0;
}

int cmd_gradcheck(const std::string& scope) {
    std::vector<GradCheckReport> reports = run_gradchecks(scope);
    bool all_passed = true;
    for (const GradCheckReport& r : reports) {
        std::cout << (r.passed ? "[pass] " : "[FAIL] ") << r.name << " max_err=" << r.max_error
                  << " threshold=" << r.threshold << "\n";
        all_passed = all_passed && r.passed;
    }
    return all_passed ? 0 : 2;
}

int cmd_class_stats(const std::string& config_path, const std::string& out_path) {
    TrainConfig cfg = load_config(config_path);
    LoadedData data = load_dataset(cfg);
    std::ostringstream os;
    os << "split,class,fraction\n";
    auto emit = [&](const char* name, const std::vector<TileSample>& tiles) {
        if (tiles.empty()) return;
        std::vector<MaskRaster> masks;
        for (const TileSample& t : tiles) {
            if (t.mask.v.empty()) throw std::invalid_argument("class-stats: tile without mask");
            masks.push_back(t.mask);
        }
        std::vector<double> prop = class_proportions(masks, static_cast<int>(cfg.classes));
        for (size_t k = 0; k < prop.size(); ++k) {
            os << name << "," << k << "," << prop[k] << "\n";
        }
    };
    emit("train", data.train);
    emit("val", data.val);
    emit("test", data.test);
    if (data.train.empty() && data.val.empty() && data.test.empty()) {
        throw std::invalid_argument("class-stats: dataset is empty");
    }
    std::cout << os.str();
    if (!out_path.empty()) write_text(out_path, os.str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal latent-attention segmentation engine"};
    app.require_subcommand(1);

    auto* prep = app.add_subcommand("prepare-data", "generate a synthetic MMRT dataset");
    std::string prep_out = "data";
    uint64_t prep_seed = 1234;
    int prep_scenes = 12, prep_train = 8, prep_val = 0;
    int64_t prep_size = 64;
    prep->add_option("--out", prep_out, "output directory");
    prep->add_option("--seed", prep_seed, "generator seed");
    prep->add_option("--scenes", prep_scenes, "total scene count");
    prep->add_option("--size", prep_size, "scene edge length");
    prep->add_option("--train", prep_train, "scenes assigned to train");
    prep->add_option("--val", prep_val, "scenes assigned to val");

    auto* train = app.add_subcommand("train", "train a model from a config file");
    std::string train_cfg, train_out = "runs/latest";
    train->add_option("--config", train_cfg, "config file")->required();
    train->add_option("--out", train_out, "output directory");

    auto* eval = app.add_subcommand("evaluate", "evaluate a checkpoint on a split");
    std::string eval_cfg, eval_ckpt, eval_split = "test", eval_out = "eval";
    eval->add_option("--config", eval_cfg, "config file")->required();
    eval->add_option("--checkpoint", eval_ckpt, "checkpoint path")->required();
    eval->add_option("--split", eval_split, "train|val|test");
    eval->add_option("--out", eval_out, "output directory");

    auto* predict = app.add_subcommand("predict", "segment one MMRT tile");
    std::string pred_cfg, pred_ckpt, pred_tile, pred_out = "prediction";
    predict->add_option("--config", pred_cfg, "config file")->required();
    predict->add_option("--checkpoint", pred_ckpt, "checkpoint path")->required();
    predict->add_option("--tile", pred_tile, "input .mmrt tile")->required();
    predict->add_option("--out", pred_out, "output file prefix");

    auto* compare = app.add_subcommand("compare-preprocessors",
                                       "train each preprocessor and rank small-class scores");
    std::string cmp_cfg, cmp_kinds = "identity,single_conv2d,unet2d,unet3d", cmp_seeds = "1,2,3";
    std::string cmp_out;
    compare->add_option("--config", cmp_cfg, "base config file")->required();
    compare->add_option("--kinds", cmp_kinds, "comma-separated preprocessor kinds");
    compare->add_option("--seeds", cmp_seeds, "comma-separated seeds");
    compare->add_option("--out", cmp_out, "CSV output path");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    std::string gc_scope = "all";
    gradcheck->add_option("--scope", gc_scope, "case name or 'all'");

    auto* stats = app.add_subcommand("class-stats", "per-split class proportions");
    std::string stats_cfg, stats_out;
    stats->add_option("--config", stats_cfg, "config file")->required();
    stats->add_option("--out", stats_out, "CSV output path");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (prep->parsed()) {
            return cmd_prepare_data(prep_out, prep_seed, prep_scenes, prep_size, prep_train,
                                    prep_val);
        }
        if (train->parsed()) return cmd_train(train_cfg, train_out);
        if (eval->parsed()) return cmd_evaluate(eval_cfg, eval_ckpt, eval_split, eval_out);
        if (predict->parsed()) return cmd_predict(pred_cfg, pred_ckpt, pred_tile, pred_out);
        if (compare->parsed()) return cmd_compare(cmp_cfg, cmp_kinds, cmp_seeds, cmp_out);
        if (gradcheck->parsed()) return cmd_gradcheck(gc_scope);
        if (stats->parsed()) return cmd_class_stats(stats_cfg, stats_out);
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
