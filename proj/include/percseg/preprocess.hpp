#pragma once
// Input preprocessing modules: each maps a stacked modality tile [C, H, W]
// to per-pixel feature rows [H*W, C'] with the spatial grid unchanged.
// Variants range from the parameter-free identity flatten to a volumetric
// encoder that treats the modality axis as convolution depth.

#include <memory>
#include <string>

#include "percseg/conv.hpp"
#include "percseg/perceiver.hpp"
#include "percseg/tensor.hpp"

namespace percseg {

enum class PreprocessorKind { Identity, SingleConv2d, UNet2d, DualLocal, UNet3d };

std::string to_string(PreprocessorKind kind);
PreprocessorKind preprocessor_kind_from(const std::string& name);

struct PreprocessorOptions {
    PreprocessorKind kind = PreprocessorKind::UNet3d;
    int64_t single_filters = 32;   // SingleConv2d
    int64_t stages = 2;            // UNet2d / DualLocal resolution levels (2 or 3)
    int64_t base_filters = 16;     // filter schedule F, 2F, 4F
    int64_t out_channels_3d = 64;  // UNet3d head projection width
};

template <typename T>
class PreprocessorT {
public:
    virtual ~PreprocessorT() = default;
    virtual TensorT<T> forward(const TensorT<T>& tile) const = 0;
    virtual int64_t out_channels() const = 0;
    virtual void params(ParamList<T>& out) = 0;
};

template <typename T>
std::unique_ptr<PreprocessorT<T>> make_preprocessor(const PreprocessorOptions& opts,
                                                    int64_t in_channels, Rng& rng);

// [C, H, W] -> [H*W, C] row-major over pixels.
template <typename T>
TensorT<T> pixel_rows(const TensorT<T>& chw);

}  // namespace percseg
