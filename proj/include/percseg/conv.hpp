#pragma once
// 2D/3D convolution, transposed convolution, and max-pooling kernels with
// registered gradients. Inputs are unbatched channel-first tensors.

#include "percseg/tensor.hpp"

namespace percseg {

struct Triple {
    int64_t d = 1, h = 1, w = 1;
};

// x: [C_in, H, W], weight: [C_out, C_in, kh, kw], bias: [C_out].
// Output extent per axis: floor((in + 2*pad - k) / stride) + 1.
template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  int64_t stride, int64_t pad);

// x: [C_in, D, H, W], weight: [C_out, C_in, kd, kh, kw], bias: [C_out].
template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  Triple stride, Triple pad);

// Adjoint of conv3d. x: [C_in, D, H, W], weight: [C_in, C_out, kd, kh, kw].
// Output extent per axis: (in - 1)*stride - 2*pad + k.
template <typename T>
TensorT<T> conv3d_transpose(const TensorT<T>& x, const TensorT<T>& weight,
                            const TensorT<T>& bias, Triple stride, Triple pad);

// Non-overlapping max pooling; kernel must equal stride and extents must
// divide. Gradient routes to the first maximum of each window.
template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x, int64_t kh, int64_t kw);
template <typename T>
TensorT<T> maxpool3d(const TensorT<T>& x, Triple kernel);

template <typename T>
struct Conv2dLayer {
    TensorT<T> weight;  // [C_out, C_in, k, k]
    TensorT<T> bias;    // [C_out]
    int64_t stride = 1;
    int64_t pad = 0;

    static Conv2dLayer make(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
                            int64_t pad, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct Conv3dLayer {
    TensorT<T> weight;  // [C_out, C_in, kd, kh, kw]
    TensorT<T> bias;
    Triple stride;
    Triple pad;

    static Conv3dLayer make(int64_t in_ch, int64_t out_ch, Triple kernel, Triple stride,
                            Triple pad, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const { return conv3d(x, weight, bias, stride, pad); }
};

template <typename T>
struct Conv3dTransposeLayer {
    TensorT<T> weight;  // [C_in, C_out, kd, kh, kw]
    TensorT<T> bias;
    Triple stride;
    Triple pad;

    static Conv3dTransposeLayer make(int64_t in_ch, int64_t out_ch, Triple kernel, Triple stride,
                                     Triple pad, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const {
        return conv3d_transpose(x, weight, bias, stride, pad);
    }
};

// 2D transposed convolution, expressed through the 3D kernel with a
// singleton depth axis. x: [C_in, H, W].
template <typename T>
struct Conv2dTransposeLayer {
    Conv3dTransposeLayer<T> inner;

    static Conv2dTransposeLayer make(int64_t in_ch, int64_t out_ch, int64_t kernel,
                                     int64_t stride, int64_t pad, Rng& rng);
    TensorT<T> forward(const TensorT<T>& x) const;
};

}  // namespace percseg
