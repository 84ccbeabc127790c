#include "percseg/preprocess.hpp"

#include <stdexcept>
#include <vector>

namespace percseg {

std::string to_string(PreprocessorKind kind) {
    switch (kind) {
        case PreprocessorKind::Identity: return "identity";
        case PreprocessorKind::SingleConv2d: return "single_conv2d";
        case PreprocessorKind::UNet2d: return "unet2d";
        case PreprocessorKind::DualLocal: return "dual_local";
        case PreprocessorKind::UNet3d: return "unet3d";
    }
    return "unknown";
}

PreprocessorKind preprocessor_kind_from(const std::string& name) {
    if (name == "identity") return PreprocessorKind::Identity;
    if (name == "single_conv2d") return PreprocessorKind::SingleConv2d;
    if (name == "unet2d") return PreprocessorKind::UNet2d;
    if (name == "dual_local") return PreprocessorKind::DualLocal;
    if (name == "unet3d") return PreprocessorKind::UNet3d;
    throw std::invalid_argument("unknown preprocessor kind '" + name + "'");
}

template <typename T>
TensorT<T> pixel_rows(const TensorT<T>& chw) {
    if (chw.ndim() != 3) throw std::invalid_argument("pixel_rows expects a [C,H,W] tensor");
    const int64_t c = chw.size(0), h = chw.size(1), w = chw.size(2);
    return reshape(permute(chw, {1, 2, 0}), {h * w, c});
}

namespace {

template <typename T>
void check_tile(const TensorT<T>& tile, int64_t channels, const char* what) {
    if (tile.ndim() != 3 || tile.size(0) != channels) {
        throw std::invalid_argument(std::string(what) + ": tile must be [" +
                                    std::to_string(channels) + ",H,W]");
    }
}

// conv -> channel standardisation -> activation; keeps deep conv stacks
// scale-stable during optimisation
template <typename T>
TensorT<T> channel_standardize(const TensorT<T>& x) {
    const int64_t c = x.size(0);
    TensorT<T> flat = reshape(x, {c, x.numel() / c});
    return reshape(standardize(flat), x.shape());
}

void check_divisible(int64_t h, int64_t w, int64_t factor, const char* what) {
    if (h % factor != 0 || w % factor != 0) {
        throw std::invalid_argument(std::string(what) + ": spatial extents must divide by " +
                                    std::to_string(factor));
    }
}

// ---- identity --------------------------------------------------------------

template <typename T>
class IdentityPre final : public PreprocessorT<T> {
public:
    explicit IdentityPre(int64_t in_channels) : in_(in_channels) {}
    TensorT<T> forward(const TensorT<T>& tile) const override {
        check_tile(tile, in_, "identity preprocessor");
        return pixel_rows(tile);
    }
    int64_t out_channels() const override { return in_; }
    void params(ParamList<T>&) override {}

private:
    int64_t in_;
};

// ---- single 3x3 conv -------------------------------------------------------

template <typename T>
class SingleConv2dPre final : public PreprocessorT<T> {
public:
    SingleConv2dPre(int64_t in_channels, int64_t filters, Rng& rng)
        : in_(in_channels), conv_(Conv2dLayer<T>::make(in_channels, filters, 3, 1, 1, rng)) {}

    TensorT<T> forward(const TensorT<T>& tile) const override {
        check_tile(tile, in_, "single_conv2d preprocessor");
        return pixel_rows(relu(conv_.forward(tile)));
    }
    int64_t out_channels() const override { return conv_.weight.size(0); }
    void params(ParamList<T>& out) override {
        out.emplace_back("pre.conv.weight", &conv_.weight);
        out.emplace_back("pre.conv.bias", &conv_.bias);
    }

private:
    int64_t in_;
    Conv2dLayer<T> conv_;
};

// ---- 2D UNet ---------------------------------------------------------------

// Encoder block: conv pair at one resolution. When `dual` is set each conv
// unit runs a 3x3 and a 1x1 branch fused by elementwise sum before the
// activation.
template <typename T>
struct ConvUnit2d {
    Conv2dLayer<T> main;           // 3x3
    Conv2dLayer<T> side;           // 1x1, dual-branch only
    bool dual = false;

    static ConvUnit2d make(int64_t in_ch, int64_t out_ch, bool dual, Rng& rng) {
        ConvUnit2d u;
        u.main = Conv2dLayer<T>::make(in_ch, out_ch, 3, 1, 1, rng);
        u.dual = dual;
        if (dual) u.side = Conv2dLayer<T>::make(in_ch, out_ch, 1, 1, 0, rng);
        return u;
    }
    TensorT<T> forward(const TensorT<T>& x) const {
        TensorT<T> y = main.forward(x);
        if (dual) y = add(y, side.forward(x));
        return relu(channel_standardize(y));
    }
    void params(const std::string& prefix, ParamList<T>& out) {
        out.emplace_back(prefix + ".main.weight", &main.weight);
        out.emplace_back(prefix + ".main.bias", &main.bias);
        if (dual) {
            out.emplace_back(prefix + ".side.weight", &side.weight);
            out.emplace_back(prefix + ".side.bias", &side.bias);
        }
    }
};

template <typename T>
class UNet2dPre final : public PreprocessorT<T> {
public:
    UNet2dPre(int64_t in_channels, int64_t stages, int64_t base_filters, bool dual, Rng& rng)
        : in_(in_channels), stages_(stages), filters_(base_filters) {
        if (stages < 2 || stages > 3) {
            throw std::invalid_argument("unet2d preprocessor supports 2 or 3 stages");
        }
        int64_t ch = in_channels;
        for (int64_t s = 0; s < stages; ++s) {
            const int64_t f = base_filters << s;
            enc1_.push_back(ConvUnit2d<T>::make(ch, f, dual, rng));
            enc2_.push_back(ConvUnit2d<T>::make(f, f, dual, rng));
            ch = f;
        }
        for (int64_t s = stages - 1; s >= 1; --s) {
            const int64_t f_hi = base_filters << s;
            const int64_t f_lo = base_filters << (s - 1);
            ups_.push_back(Conv2dTransposeLayer<T>::make(f_hi, f_lo, 2, 2, 0, rng));
            fuse_.push_back(Conv2dLayer<T>::make(f_lo * 2, f_lo, 3, 1, 1, rng));
        }
    }

    TensorT<T> forward(const TensorT<T>& tile) const override {
        check_tile(tile, in_, "unet2d preprocessor");
        check_divisible(tile.size(1), tile.size(2), int64_t{1} << (stages_ - 1), "unet2d");
        std::vector<TensorT<T>> skips;
        TensorT<T> x = tile;
        for (size_t s = 0; s < enc1_.size(); ++s) {
            x = enc2_[s].forward(enc1_[s].forward(x));
            if (s + 1 < enc1_.size()) {
                skips.push_back(x);
                x = maxpool2d(x, 2, 2);
            }
        }
        for (size_t d = 0; d < ups_.size(); ++d) {
            x = ups_[d].forward(x);
            x = concat<T>({skips[skips.size() - 1 - d], x}, 0);
            x = relu(channel_standardize(fuse_[d].forward(x)));
        }
        return pixel_rows(x);
    }

    int64_t out_channels() const override { return filters_; }

    void params(ParamList<T>& out) override {
        for (size_t s = 0; s < enc1_.size(); ++s) {
            enc1_[s].params("pre.enc" + std::to_string(s) + ".a", out);
            enc2_[s].params("pre.enc" + std::to_string(s) + ".b", out);
        }
        for (size_t d = 0; d < ups_.size(); ++d) {
            out.emplace_back("pre.up" + std::to_string(d) + ".weight", &ups_[d].inner.weight);
            out.emplace_back("pre.up" + std::to_string(d) + ".bias", &ups_[d].inner.bias);
            out.emplace_back("pre.fuse" + std::to_string(d) + ".weight", &fuse_[d].weight);
            out.emplace_back("pre.fuse" + std::to_string(d) + ".bias", &fuse_[d].bias);
        }
    }

private:
    int64_t in_;
    int64_t stages_;
    int64_t filters_;
    std::vector<ConvUnit2d<T>> enc1_, enc2_;
    std::vector<Conv2dTransposeLayer<T>> ups_;
    std::vector<Conv2dLayer<T>> fuse_;
};

// ---- volumetric UNet -------------------------------------------------------

// The modality axis becomes convolution depth: [C,H,W] -> [1,C,H,W]. Three
// encoder blocks of stacked 3x3x3 convs with (1,2,2) pooling keep all C
// modality planes alive; the decoder upsamples spatially twice with skip
// concatenations; the head folds depth into channels and re-projects with a
// 1x1 2D conv.
template <typename T>
class UNet3dPre final : public PreprocessorT<T> {
public:
    UNet3dPre(int64_t in_channels, int64_t base_filters, int64_t out_channels, Rng& rng)
        : in_(in_channels), out_channels_(out_channels) {
        const int64_t f = base_filters;
        const Triple k{3, 3, 3}, s1{1, 1, 1}, p1{1, 1, 1};
        enc_.push_back(Conv3dLayer<T>::make(1, f, k, s1, p1, rng));
        enc_.push_back(Conv3dLayer<T>::make(f, f, k, s1, p1, rng));
        enc_.push_back(Conv3dLayer<T>::make(f, 2 * f, k, s1, p1, rng));
        enc_.push_back(Conv3dLayer<T>::make(2 * f, 2 * f, k, s1, p1, rng));
        enc_.push_back(Conv3dLayer<T>::make(2 * f, 4 * f, k, s1, p1, rng));
        enc_.push_back(Conv3dLayer<T>::make(4 * f, 4 * f, k, s1, p1, rng));
        const Triple up_k{1, 2, 2}, up_s{1, 2, 2}, p0{0, 0, 0};
        up1_ = Conv3dTransposeLayer<T>::make(4 * f, 2 * f, up_k, up_s, p0, rng);
        dec1_ = Conv3dLayer<T>::make(4 * f, 2 * f, k, s1, p1, rng);
        up2_ = Conv3dTransposeLayer<T>::make(2 * f, f, up_k, up_s, p0, rng);
        dec2_ = Conv3dLayer<T>::make(2 * f, f, k, s1, p1, rng);
        head_ = Conv2dLayer<T>::make(f * in_channels, out_channels, 1, 1, 0, rng);
    }

    TensorT<T> forward(const TensorT<T>& tile) const override {
        check_tile(tile, in_, "unet3d preprocessor");
        check_divisible(tile.size(1), tile.size(2), 4, "unet3d");
        const int64_t h = tile.size(1), w = tile.size(2);
        TensorT<T> x = reshape(tile, {1, in_, h, w});
        const Triple pool{1, 2, 2};
        auto unit = [](const Conv3dLayer<T>& conv, const TensorT<T>& in) {
            return relu(channel_standardize(conv.forward(in)));
        };
        TensorT<T> b1 = unit(enc_[1], unit(enc_[0], x));
        TensorT<T> x2 = maxpool3d(b1, pool);
        TensorT<T> b2 = unit(enc_[3], unit(enc_[2], x2));
        TensorT<T> x3 = maxpool3d(b2, pool);
        TensorT<T> b3 = unit(enc_[5], unit(enc_[4], x3));
        TensorT<T> u1 = up1_.forward(b3);
        TensorT<T> d1 = unit(dec1_, concat<T>({b2, u1}, 0));
        TensorT<T> u2 = up2_.forward(d1);
        TensorT<T> d2 = unit(dec2_, concat<T>({b1, u2}, 0));
        // fold depth into channels: [F, C, H, W] -> [F*C, H, W]
        TensorT<T> folded = reshape(d2, {d2.size(0) * d2.size(1), h, w});
        return pixel_rows(head_.forward(folded));
    }

    int64_t out_channels() const override { return out_channels_; }

    void params(ParamList<T>& out) override {
        for (size_t i = 0; i < enc_.size(); ++i) {
            out.emplace_back("pre.enc" + std::to_string(i) + ".weight", &enc_[i].weight);
            out.emplace_back("pre.enc" + std::to_string(i) + ".bias", &enc_[i].bias);
        }
        out.emplace_back("pre.up1.weight", &up1_.weight);
        out.emplace_back("pre.up1.bias", &up1_.bias);
        out.emplace_back("pre.dec1.weight", &dec1_.weight);
        out.emplace_back("pre.dec1.bias", &dec1_.bias);
        out.emplace_back("pre.up2.weight", &up2_.weight);
        out.emplace_back("pre.up2.bias", &up2_.bias);
        out.emplace_back("pre.dec2.weight", &dec2_.weight);
        out.emplace_back("pre.dec2.bias", &dec2_.bias);
        out.emplace_back("pre.head.weight", &head_.weight);
        out.emplace_back("pre.head.bias", &head_.bias);
    }

private:
    int64_t in_;
    int64_t out_channels_;
    std::vector<Conv3dLayer<T>> enc_;
    Conv3dTransposeLayer<T> up1_, up2_;
    Conv3dLayer<T> dec1_, dec2_;
    Conv2dLayer<T> head_;
};

}  // namespace

template <typename T>
std::unique_ptr<PreprocessorT<T>> make_preprocessor(const PreprocessorOptions& opts,
                                                    int64_t in_channels, Rng& rng) {
    switch (opts.kind) {
        case PreprocessorKind::Identity:
            return std::make_unique<IdentityPre<T>>(in_channels);
        case PreprocessorKind::SingleConv2d:
            return std::make_unique<SingleConv2dPre<T>>(in_channels, opts.single_filters, rng);
        case PreprocessorKind::UNet2d:
            return std::make_unique<UNet2dPre<T>>(in_channels, opts.stages, opts.base_filters,
                                                  false, rng);
        case PreprocessorKind::DualLocal:
            return std::make_unique<UNet2dPre<T>>(in_channels, opts.stages, opts.base_filters,
                                                  true, rng);
        case PreprocessorKind::UNet3d:
            return std::make_unique<UNet3dPre<T>>(in_channels, opts.base_filters,
                                                  opts.out_channels_3d, rng);
    }
    throw std::invalid_argument("make_preprocessor: unknown kind");
}

#define PERCSEG_INSTANTIATE_PRE(T)                                                       \
    template TensorT<T> pixel_rows<T>(const TensorT<T>&);                                \
    template std::unique_ptr<PreprocessorT<T>> make_preprocessor<T>(                     \
        const PreprocessorOptions&, int64_t, Rng&);

PERCSEG_INSTANTIATE_PRE(float)
PERCSEG_INSTANTIATE_PRE(double)

#undef PERCSEG_INSTANTIATE_PRE

}  // namespace percseg
