#pragma once
// Multimodal raster ingestion: derived channels, modality stacking, tiling
// with scene-id splits, a synthetic dataset generator, and the MMRT tile
// container plus PGM/PPM raster export.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "percseg/tensor.hpp"

namespace percseg {

struct Raster {
    int64_t h = 0, w = 0;
    std::vector<float> v;

    Raster() = default;
    Raster(int64_t height, int64_t width, float fill = 0.f)
        : h(height), w(width), v(static_cast<size_t>(height * width), fill) {}
    float& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * w + c)]; }
    float at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * w + c)]; }
};

struct MaskRaster {
    int64_t h = 0, w = 0;
    std::vector<uint8_t> v;

    MaskRaster() = default;
    MaskRaster(int64_t height, int64_t width, uint8_t fill = 0)
        : h(height), w(width), v(static_cast<size_t>(height * width), fill) {}
    uint8_t& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * w + c)]; }
    uint8_t at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * w + c)]; }
};

struct MultimodalScene {
    std::string id;
    std::vector<std::pair<std::string, Raster>> bands;
    std::optional<MaskRaster> mask;

    const Raster* band(const std::string& name) const;
    int64_t height() const { return bands.empty() ? 0 : bands.front().second.h; }
    int64_t width() const { return bands.empty() ? 0 : bands.front().second.w; }
};

// (ir - r) / (ir + r + 1e-6); zero where both bands vanish.
Raster derive_ndvi(const Raster& ir, const Raster& r);

// Per-scene min-max normalisation to [0, 1]; a constant raster maps to zeros.
Raster normalize_ndsm(const Raster& dsm);

enum class StackRecipe { Vaihingen, Potsdam, Custom };

// Produces the stacked [5, H, W] modality tensor. Vaihingen stacks
// R, G, IR, nDSM, NDVI; Potsdam stacks R, G, B, IR, nDSM. Optical bands
// with 8-bit ranges are rescaled to [0, 1].
TensorT<float> stack_modalities(const MultimodalScene& scene, StackRecipe recipe,
                                const std::vector<std::string>& custom_bands = {});

struct TileSample {
    TensorT<float> features;  // [5, T, T]
    MaskRaster mask;          // [T, T]
    std::string scene_id;
    int64_t row = 0, col = 0;
    bool padded = false;
};

// Row-major tile enumeration; edge tiles are reflection-padded and flagged.
std::vector<TileSample> tile_scene(const MultimodalScene& scene, StackRecipe recipe,
                                   int64_t tile_size, int64_t stride,
                                   const std::vector<std::string>& custom_bands = {});

struct SplitSpec {
    std::vector<std::string> train, val, test;
    void validate() const;  // throws on duplicated or overlapping ids
};

SplitSpec vaihingen_split();
SplitSpec potsdam_split();

struct SplitScenes {
    std::vector<const MultimodalScene*> train, val, test;
    std::vector<std::string> unknown;  // listed ids with no matching scene
};

SplitScenes split_by_ids(const std::vector<MultimodalScene>& scenes, const SplitSpec& split);

// Synthetic multimodal scenes: background terrain, bright elevated
// "building" rectangles, high-NDVI "vegetation" blobs, and small "vehicle"
// rectangles whose optical bands continue the background texture while the
// height band carries a bump inside the terrain's own range. Classes:
// 0 = ground, 1 = building, 2 = vegetation, 3 = vehicle.
struct SynthParams {
    uint64_t seed = 7;
    int n_scenes = 8;
    int64_t size = 64;
    int num_classes = 4;
};

std::vector<MultimodalScene> synth_dataset(const SynthParams& params);

// -----------------------------------------------------------------------
// MMRT container: "MMRT1" magic, u32 H, W, C, K, C null-terminated band
// names, little-endian f32 band planes, then an optional u8 mask plane.

struct MmrtTile {
    uint32_t h = 0, w = 0, c = 0, k = 0;
    std::vector<std::string> band_names;
    std::vector<float> planes;  // c * h * w
    std::optional<std::vector<uint8_t>> mask;
};

void write_mmrt(const std::string& path, const MmrtTile& tile);
MmrtTile read_mmrt(const std::string& path);

MmrtTile scene_to_mmrt(const MultimodalScene& scene, int num_classes);
MultimodalScene mmrt_to_scene(const MmrtTile& tile, const std::string& id);

void write_pgm(const std::string& path, const MaskRaster& mask);
// Fixed class palette (white, blue, cyan, green, yellow, red), repeating
// beyond six classes.
void write_ppm(const std::string& path, const MaskRaster& mask);

}  // namespace percseg
