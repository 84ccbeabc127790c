#include "percseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>
#include <unordered_map>

namespace percseg {

const Raster* MultimodalScene::band(const std::string& name) const {
    for (const auto& [n, r] : bands) {
        if (n == name) return &r;
    }
    return nullptr;
}

Raster derive_ndvi(const Raster& ir, const Raster& r) {
    if (ir.h != r.h || ir.w != r.w) throw std::invalid_argument("derive_ndvi: band shape mismatch");
    Raster out(ir.h, ir.w);
    for (size_t i = 0; i < out.v.size(); ++i) {
        const float a = ir.v[i], b = r.v[i];
        out.v[i] = (a - b) / (a + b + 1e-6f);
    }
    return out;
}

Raster normalize_ndsm(const Raster& dsm) {
    Raster out(dsm.h, dsm.w);
    if (dsm.v.empty()) return out;
    float lo = dsm.v[0], hi = dsm.v[0];
    for (float v : dsm.v) {
        if (!std::isfinite(v)) throw std::invalid_argument("normalize_ndsm: non-finite height");
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    const float range = hi - lo;
    if (range <= 0.f) return out;  // constant raster -> zeros
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = (dsm.v[i] - lo) / range;
    return out;
}

namespace {

// Optical bands stored with 8-bit ranges are rescaled; data already in
// [0, 1] passes through.
Raster scale_optical(const Raster& band) {
    float hi = 0.f;
    for (float v : band.v) hi = std::max(hi, v);
    Raster out = band;
    if (hi > 1.5f) {
        for (float& v : out.v) v /= 255.f;
    }
    for (float& v : out.v) v = std::min(1.f, std::max(0.f, v));
    return out;
}

const Raster& require_band(const MultimodalScene& scene, const std::string& name) {
    const Raster* r = scene.band(name);
    if (!r) {
        throw std::invalid_argument("stack_modalities: scene '" + scene.id + "' is missing band '" +
                                    name + "'");
    }
    return *r;
}

}  // namespace

TensorT<float> stack_modalities(const MultimodalScene& scene, StackRecipe recipe,
                                const std::vector<std::string>& custom_bands) {
    const int64_t h = scene.height(), w = scene.width();
    if (h == 0 || w == 0) throw std::invalid_argument("stack_modalities: empty scene");
    std::vector<Raster> planes;
    switch (recipe) {
        case StackRecipe::Vaihingen: {
            const Raster& r = require_band(scene, "R");
            const Raster& g = require_band(scene, "G");
            const Raster& ir = require_band(scene, "IR");
            const Raster& dsm = require_band(scene, "DSM");
            planes.push_back(scale_optical(r));
            planes.push_back(scale_optical(g));
            planes.push_back(scale_optical(ir));
            planes.push_back(normalize_ndsm(dsm));
            planes.push_back(derive_ndvi(ir, r));
            break;
        }
        case StackRecipe::Potsdam: {
            planes.push_back(scale_optical(require_band(scene, "R")));
            planes.push_back(scale_optical(require_band(scene, "G")));
            planes.push_back(scale_optical(require_band(scene, "B")));
            planes.push_back(scale_optical(require_band(scene, "IR")));
            planes.push_back(normalize_ndsm(require_band(scene, "DSM")));
            break;
        }
        case StackRecipe::Custom: {
            if (custom_bands.size() != 5) {
                throw std::invalid_argument("stack_modalities: custom recipe needs 5 band names");
            }
            for (const std::string& name : custom_bands) {
                planes.push_back(scale_optical(require_band(scene, name)));
            }
            break;
        }
    }
    TensorT<float> out = TensorT<float>::zeros({5, h, w});
    float* p = out.mutable_data();
    for (size_t c = 0; c < planes.size(); ++c) {
        if (planes[c].h != h || planes[c].w != w) {
            throw std::invalid_argument("stack_modalities: band shape mismatch");
        }
        std::memcpy(p + c * h * w, planes[c].v.data(), sizeof(float) * static_cast<size_t>(h * w));
    }
    return out;
}

namespace {

// reflect-101 index map for modest overhangs
int64_t reflect_index(int64_t i, int64_t n) {
    if (i < n) return i;
    return 2 * n - 2 - i;
}

}  // namespace

std::vector<TileSample> tile_scene(const MultimodalScene& scene, StackRecipe recipe,
                                   int64_t tile_size, int64_t stride,
                                   const std::vector<std::string>& custom_bands) {
    const int64_t h = scene.height(), w = scene.width();
    if (tile_size <= 0 || stride <= 0) throw std::invalid_argument("tile_scene: bad tile/stride");
    if (tile_size > h || tile_size > w) {
        throw std::invalid_argument("tile_scene: tile larger than scene '" + scene.id + "'");
    }
    TensorT<float> stacked = stack_modalities(scene, recipe, custom_bands);
    const float* sp = stacked.data();
    auto starts = [&](int64_t extent) {
        std::vector<int64_t> s;
        const int64_t span = extent - tile_size;
        const int64_t n = span == 0 ? 1 : (span + stride - 1) / stride + 1;
        for (int64_t i = 0; i < n; ++i) s.push_back(i * stride);
        return s;
    };
    std::vector<TileSample> tiles;
    for (int64_t r0 : starts(h)) {
        for (int64_t c0 : starts(w)) {
            TileSample t;
            t.scene_id = scene.id;
            t.row = r0;
            t.col = c0;
            t.padded = (r0 + tile_size > h) || (c0 + tile_size > w);
            TensorT<float> feat = TensorT<float>::zeros({5, tile_size, tile_size});
            float* fp = feat.mutable_data();
            for (int64_t c = 0; c < 5; ++c) {
                for (int64_t i = 0; i < tile_size; ++i) {
                    const int64_t sr = reflect_index(r0 + i, h);
                    for (int64_t j = 0; j < tile_size; ++j) {
                        const int64_t sc = reflect_index(c0 + j, w);
                        fp[(c * tile_size + i) * tile_size + j] = sp[(c * h + sr) * w + sc];
                    }
                }
            }
            t.features = std::move(feat);
            if (scene.mask) {
                MaskRaster m(tile_size, tile_size);
                for (int64_t i = 0; i < tile_size; ++i) {
                    const int64_t sr = reflect_index(r0 + i, h);
                    for (int64_t j = 0; j < tile_size; ++j) {
                        m.at(i, j) = scene.mask->at(sr, reflect_index(c0 + j, w));
                    }
                }
                t.mask = std::move(m);
            }
            tiles.push_back(std::move(t));
        }
    }
    return tiles;
}

void SplitSpec::validate() const {
    std::set<std::string> seen;
    for (const auto* list : {&train, &val, &test}) {
        for (const std::string& id : *list) {
            if (!seen.insert(id).second) {
                throw std::invalid_argument("SplitSpec: id '" + id + "' appears twice");
            }
        }
    }
}

SplitSpec vaihingen_split() {
    SplitSpec s;
    for (int id : {1, 3, 5, 7, 11, 13, 15, 17, 21, 23, 26, 28, 32, 34, 37}) {
        s.train.push_back(std::to_string(id));
    }
    s.val = {"30"};
    for (int id : {2, 4, 6, 8, 10, 12, 14, 16, 20, 22, 24, 27, 29, 31, 33, 35, 38}) {
        s.test.push_back(std::to_string(id));
    }
    return s;
}

SplitSpec potsdam_split() {
    SplitSpec s;
    s.train = {"2_11", "2_12", "3_10", "3_11", "3_12", "4_10", "4_11", "4_12",
               "5_10", "5_11", "5_12", "6_7",  "6_8",  "6_9",  "6_10", "6_11",
               "6_12", "7_7",  "7_8",  "7_9",  "7_11", "7_12"};
    s.val = {"2_10"};
    s.test = {"2_13", "2_14", "3_13", "3_14", "4_13", "4_14", "4_15",
              "5_13", "5_14", "5_15", "6_13", "6_14", "6_15", "7_13"};
    return s;
}

SplitScenes split_by_ids(const std::vector<MultimodalScene>& scenes, const SplitSpec& split) {
    split.validate();
    std::unordered_map<std::string, const MultimodalScene*> by_id;
    for (const MultimodalScene& s : scenes) {
        if (!by_id.emplace(s.id, &s).second) {
            throw std::invalid_argument("split_by_ids: duplicate scene id '" + s.id + "'");
        }
    }
    SplitScenes out;
    auto fill = [&](const std::vector<std::string>& ids,
                    std::vector<const MultimodalScene*>& dst) {
        for (const std::string& id : ids) {
            auto it = by_id.find(id);
            if (it == by_id.end()) {
                out.unknown.push_back(id);
            } else {
                dst.push_back(it->second);
            }
        }
    };
    fill(split.train, out.train);
    fill(split.val, out.val);
    fill(split.test, out.test);
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes

namespace {

// Smooth value noise: coarse lattice of uniform samples, bilinear blend.
Raster value_noise(Rng& rng, int64_t size, int64_t spacing, float lo, float hi) {
    const int64_t nodes = size / spacing + 2;
    std::vector<float> grid(static_cast<size_t>(nodes * nodes));
    for (float& g : grid) g = static_cast<float>(rng.uniform(lo, hi));
    Raster out(size, size);
    for (int64_t r = 0; r < size; ++r) {
        const double gy = static_cast<double>(r) / spacing;
        const int64_t y0 = static_cast<int64_t>(gy);
        const double fy = gy - y0;
        for (int64_t c = 0; c < size; ++c) {
            const double gx = static_cast<double>(c) / spacing;
            const int64_t x0 = static_cast<int64_t>(gx);
            const double fx = gx - x0;
            const double v00 = grid[static_cast<size_t>(y0 * nodes + x0)];
            const double v01 = grid[static_cast<size_t>(y0 * nodes + x0 + 1)];
            const double v10 = grid[static_cast<size_t>((y0 + 1) * nodes + x0)];
            const double v11 = grid[static_cast<size_t>((y0 + 1) * nodes + x0 + 1)];
            out.at(r, c) = static_cast<float>((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                                              fy * ((1 - fx) * v10 + fx * v11));
        }
    }
    return out;
}

struct Rect {
    int64_t r0, c0, rh, cw;
};

bool region_is(const MaskRaster& mask, const Rect& rect, uint8_t cls) {
    for (int64_t r = rect.r0; r < rect.r0 + rect.rh; ++r) {
        for (int64_t c = rect.c0; c < rect.c0 + rect.cw; ++c) {
            if (mask.at(r, c) != cls) return false;
        }
    }
    return true;
}

}  // namespace

std::vector<MultimodalScene> synth_dataset(const SynthParams& params) {
    if (params.size < 32) throw std::invalid_argument("synth_dataset: size must be >= 32");
    if (params.num_classes != 4) throw std::invalid_argument("synth_dataset: expects 4 classes");
    std::vector<MultimodalScene> scenes;
    scenes.reserve(static_cast<size_t>(params.n_scenes));
    const int64_t s = params.size;
    for (int sc = 0; sc < params.n_scenes; ++sc) {
        Rng rng(params.seed * 1000003ull + static_cast<uint64_t>(sc));
        MultimodalScene scene;
        scene.id = "synth_" + std::to_string(sc);

        Raster red = value_noise(rng, s, 8, 0.30f, 0.50f);
        Raster green = value_noise(rng, s, 8, 0.30f, 0.50f);
        Raster ir = value_noise(rng, s, 8, 0.25f, 0.45f);
        // Terrain undulation spans the vehicle height range, so a single
        // height sample cannot identify a vehicle.
        Raster dsm = value_noise(rng, s, 16, 0.0f, 0.8f);
        for (size_t i = 0; i < dsm.v.size(); ++i) {
            red.v[i] += static_cast<float>(rng.normal(0.0, 0.01));
            green.v[i] += static_cast<float>(rng.normal(0.0, 0.01));
            ir.v[i] += static_cast<float>(rng.normal(0.0, 0.01));
            dsm.v[i] += static_cast<float>(rng.normal(0.0, 0.005));
        }
        MaskRaster mask(s, s, 0);

        // vegetation blobs: unambiguously high NDVI, near-ground height
        const int n_veg = 2 + static_cast<int>(rng.next_u64() % 3);
        for (int i = 0; i < n_veg; ++i) {
            const double cy = rng.uniform(0, static_cast<double>(s));
            const double cx = rng.uniform(0, static_cast<double>(s));
            const double ry = rng.uniform(5, 12), rx = rng.uniform(5, 12);
            for (int64_t r = 0; r < s; ++r) {
                for (int64_t c = 0; c < s; ++c) {
                    const double dy = (r - cy) / ry, dx = (c - cx) / rx;
                    if (dy * dy + dx * dx <= 1.0) {
                        ir.at(r, c) += 0.50f;
                        green.at(r, c) += 0.08f;
                        red.at(r, c) -= 0.10f;
                        dsm.at(r, c) += 0.03f;
                        mask.at(r, c) = 2;
                    }
                }
            }
        }

        // buildings: bright optical, strongly elevated
        const int n_bld = 1 + static_cast<int>(rng.next_u64() % 3);
        for (int i = 0; i < n_bld; ++i) {
            const int64_t rh = 10 + static_cast<int64_t>(rng.next_u64() % 11);
            const int64_t cw = 10 + static_cast<int64_t>(rng.next_u64() % 11);
            const int64_t r0 = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(s - rh));
            const int64_t c0 = static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(s - cw));
            const float height = static_cast<float>(rng.uniform(0.4, 0.7));
            for (int64_t r = r0; r < r0 + rh; ++r) {
                for (int64_t c = c0; c < c0 + cw; ++c) {
                    red.at(r, c) += 0.35f;
                    green.at(r, c) += 0.30f;
                    ir.at(r, c) += 0.10f;
                    dsm.at(r, c) += height;
                    mask.at(r, c) = 1;
                }
            }
        }

        // vehicles: optical continues the background; only the height band
        // carries a localised bump
        const int n_veh = 2 + static_cast<int>(rng.next_u64() % 3);
        int placed = 0;
        for (int i = 0; i < n_veh * 12 && placed < n_veh; ++i) {
            int64_t rh = 3, cw = 5;
            if (rng.next_u64() % 2) std::swap(rh, cw);
            const int64_t r0 =
                1 + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(s - rh - 2));
            const int64_t c0 =
                1 + static_cast<int64_t>(rng.next_u64() % static_cast<uint64_t>(s - cw - 2));
            Rect rect{r0 - 1, c0 - 1, rh + 2, cw + 2};
            if (!region_is(mask, rect, 0)) continue;
            const float bump = static_cast<float>(rng.uniform(0.30, 0.50));
            for (int64_t r = r0; r < r0 + rh; ++r) {
                for (int64_t c = c0; c < c0 + cw; ++c) {
                    dsm.at(r, c) += bump;
                    mask.at(r, c) = 3;
                }
            }
            ++placed;
        }

        for (Raster* band : {&red, &green, &ir}) {
            for (float& v : band->v) v = std::min(1.f, std::max(0.f, v));
        }
        for (float& v : dsm.v) v = std::max(0.f, v);

        scene.bands.emplace_back("R", std::move(red));
        scene.bands.emplace_back("G", std::move(green));
        scene.bands.emplace_back("IR", std::move(ir));
        scene.bands.emplace_back("DSM", std::move(dsm));
        scene.mask = std::move(mask);
        scenes.push_back(std::move(scene));
    }
    return scenes;
}

// ---------------------------------------------------------------------------
// MMRT

namespace {

constexpr char kMagic[5] = {'M', 'M', 'R', 'T', '1'};

void put_u32(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
    out.push_back(static_cast<char>((v >> 16) & 0xFF));
    out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32(const std::string& in, size_t& pos) {
    if (pos + 4 > in.size()) throw std::runtime_error("MMRT: truncated header");
    uint32_t v = static_cast<uint8_t>(in[pos]) | (static_cast<uint8_t>(in[pos + 1]) << 8) |
                 (static_cast<uint8_t>(in[pos + 2]) << 16) |
                 (static_cast<uint8_t>(in[pos + 3]) << 24);
    pos += 4;
    return v;
}

}  // namespace

void write_mmrt(const std::string& path, const MmrtTile& tile) {
    if (tile.band_names.size() != tile.c) {
        throw std::invalid_argument("write_mmrt: band name count mismatch");
    }
    const size_t plane = static_cast<size_t>(tile.h) * tile.w;
    if (tile.planes.size() != plane * tile.c) {
        throw std::invalid_argument("write_mmrt: plane size mismatch");
    }
    if (tile.mask && tile.mask->size() != plane) {
        throw std::invalid_argument("write_mmrt: mask size mismatch");
    }
    std::string out;
    out.append(kMagic, 5);
    put_u32(out, tile.h);
    put_u32(out, tile.w);
    put_u32(out, tile.c);
    put_u32(out, tile.k);
    for (const std::string& name : tile.band_names) {
        out.append(name);
        out.push_back('\0');
    }
    out.append(reinterpret_cast<const char*>(tile.planes.data()),
               tile.planes.size() * sizeof(float));
    if (tile.mask) {
        out.append(reinterpret_cast<const char*>(tile.mask->data()), tile.mask->size());
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_mmrt: cannot open '" + path + "'");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw std::runtime_error("write_mmrt: write failed for '" + path + "'");
}

MmrtTile read_mmrt(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_mmrt: cannot open '" + path + "'");
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (in.size() < 5 || std::memcmp(in.data(), kMagic, 5) != 0) {
        throw std::runtime_error("read_mmrt: bad magic in '" + path + "'");
    }
    size_t pos = 5;
    MmrtTile tile;
    tile.h = get_u32(in, pos);
    tile.w = get_u32(in, pos);
    tile.c = get_u32(in, pos);
    tile.k = get_u32(in, pos);
    for (uint32_t i = 0; i < tile.c; ++i) {
        const size_t end = in.find('\0', pos);
        if (end == std::string::npos) throw std::runtime_error("MMRT: unterminated band name");
        tile.band_names.push_back(in.substr(pos, end - pos));
        pos = end + 1;
    }
    const size_t plane = static_cast<size_t>(tile.h) * tile.w;
    const size_t plane_bytes = plane * tile.c * sizeof(float);
    if (pos + plane_bytes > in.size()) throw std::runtime_error("MMRT: truncated planes");
    tile.planes.resize(plane * tile.c);
    std::memcpy(tile.planes.data(), in.data() + pos, plane_bytes);
    pos += plane_bytes;
    const size_t rest = in.size() - pos;
    if (rest == plane) {
        std::vector<uint8_t> mask(plane);
        std::memcpy(mask.data(), in.data() + pos, plane);
        tile.mask = std::move(mask);
    } else if (rest != 0) {
        throw std::runtime_error("MMRT: unexpected trailing bytes in '" + path + "'");
    }
    return tile;
}

MmrtTile scene_to_mmrt(const MultimodalScene& scene, int num_classes) {
    MmrtTile tile;
    tile.h = static_cast<uint32_t>(scene.height());
    tile.w = static_cast<uint32_t>(scene.width());
    tile.c = static_cast<uint32_t>(scene.bands.size());
    tile.k = static_cast<uint32_t>(num_classes);
    const size_t plane = static_cast<size_t>(tile.h) * tile.w;
    tile.planes.reserve(plane * tile.c);
    for (const auto& [name, raster] : scene.bands) {
        tile.band_names.push_back(name);
        tile.planes.insert(tile.planes.end(), raster.v.begin(), raster.v.end());
    }
    if (scene.mask) tile.mask = scene.mask->v;
    return tile;
}

MultimodalScene mmrt_to_scene(const MmrtTile& tile, const std::string& id) {
    MultimodalScene scene;
    scene.id = id;
    const size_t plane = static_cast<size_t>(tile.h) * tile.w;
    for (uint32_t c = 0; c < tile.c; ++c) {
        Raster r(tile.h, tile.w);
        std::copy(tile.planes.begin() + static_cast<int64_t>(c * plane),
                  tile.planes.begin() + static_cast<int64_t>((c + 1) * plane), r.v.begin());
        scene.bands.emplace_back(tile.band_names[c], std::move(r));
    }
    if (tile.mask) {
        MaskRaster m(tile.h, tile.w);
        m.v = *tile.mask;
        scene.mask = std::move(m);
    }
    return scene;
}

// ---------------------------------------------------------------------------
// PGM / PPM

void write_pgm(const std::string& path, const MaskRaster& mask) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_pgm: cannot open '" + path + "'");
    f << "P5\n" << mask.w << " " << mask.h << "\n255\n";
    f.write(reinterpret_cast<const char*>(mask.v.data()),
            static_cast<std::streamsize>(mask.v.size()));
    if (!f) throw std::runtime_error("write_pgm: write failed");
}

void write_ppm(const std::string& path, const MaskRaster& mask) {
    static const uint8_t palette[6][3] = {{255, 255, 255}, {0, 0, 255},   {0, 255, 255},
                                          {0, 255, 0},     {255, 255, 0}, {255, 0, 0}};
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_ppm: cannot open '" + path + "'");
    f << "P6\n" << mask.w << " " << mask.h << "\n255\n";
    std::string body;
    body.reserve(mask.v.size() * 3);
    for (uint8_t v : mask.v) {
        const uint8_t* c = palette[v % 6];
        body.push_back(static_cast<char>(c[0]));
        body.push_back(static_cast<char>(c[1]));
        body.push_back(static_cast<char>(c[2]));
    }
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    if (!f) throw std::runtime_error("write_ppm: write failed");
}

}  // namespace percseg
