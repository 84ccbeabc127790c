#include "percseg/posenc.hpp"

#include <cmath>
#include <stdexcept>

namespace percseg {

namespace {

constexpr double kPi = 3.14159265358979323846;

template <typename T>
TensorT<T> fourier_impl(int64_t h, int64_t w, int64_t num_bands, double max_freq) {
    if (h < 1 || w < 1) throw std::invalid_argument("fourier_pos_2d requires H, W >= 1");
    if (num_bands < 1) throw std::invalid_argument("fourier_pos_2d requires num_bands >= 1");
    const int64_t per_axis = 2 * num_bands + 1;
    const int64_t p = 2 * per_axis;
    std::vector<double> freqs(static_cast<size_t>(num_bands));
    const double top = max_freq / 2.0;
    for (int64_t b = 0; b < num_bands; ++b) {
        freqs[static_cast<size_t>(b)] =
            num_bands == 1 ? 1.0 : 1.0 + (top - 1.0) * static_cast<double>(b) / static_cast<double>(num_bands - 1);
    }
    TensorT<T> out = TensorT<T>::zeros({h * w, p});
    T* op = out.mutable_data();
    auto coord = [](int64_t i, int64_t n) {
        return n == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / static_cast<double>(n - 1);
    };
    for (int64_t r = 0; r < h; ++r) {
        const double y = coord(r, h);
        for (int64_t c = 0; c < w; ++c) {
            const double x = coord(c, w);
            T* row = op + (r * w + c) * p;
            int64_t k = 0;
            for (const double axis : {y, x}) {
                for (int64_t b = 0; b < num_bands; ++b)
                    row[k++] = static_cast<T>(std::sin(kPi * freqs[static_cast<size_t>(b)] * axis));
                for (int64_t b = 0; b < num_bands; ++b)
                    row[k++] = static_cast<T>(std::cos(kPi * freqs[static_cast<size_t>(b)] * axis));
                row[k++] = static_cast<T>(axis);
            }
        }
    }
    return out;
}

}  // namespace

TensorT<float> fourier_pos_2d(int64_t h, int64_t w, int64_t num_bands, double max_freq) {
    return fourier_impl<float>(h, w, num_bands, max_freq);
}

TensorT<double> fourier_pos_2d_f64(int64_t h, int64_t w, int64_t num_bands, double max_freq) {
    return fourier_impl<double>(h, w, num_bands, max_freq);
}

int64_t fourier_pos_dim(int64_t num_bands) { return 2 * (2 * num_bands + 1); }

}  // namespace percseg
