#pragma once
// Positional encodings for 2D grids.

#include "percseg/tensor.hpp"

namespace percseg {

// Fixed 2D Fourier features for an H x W grid, flattened row-major to
// [H*W, P] with P = 2*(2*num_bands + 1). Per axis the coordinate is scaled
// to [-1, 1] and expanded as [sin(pi f x) per band, cos(pi f x) per band, x]
// with frequencies linearly spaced from 1 to max_freq/2 cycles.
TensorT<float> fourier_pos_2d(int64_t h, int64_t w, int64_t num_bands, double max_freq);
TensorT<double> fourier_pos_2d_f64(int64_t h, int64_t w, int64_t num_bands, double max_freq);

int64_t fourier_pos_dim(int64_t num_bands);

}  // namespace percseg
