#include "percseg/conv.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace percseg {

namespace {

int64_t ceil_div(int64_t a, int64_t b) { return a >= 0 ? (a + b - 1) / b : a / b; }
int64_t floor_div(int64_t a, int64_t b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

int64_t conv_extent(int64_t in, int64_t k, int64_t stride, int64_t pad, const char* what) {
    if (in + 2 * pad < k) {
        throw std::invalid_argument(std::string(what) + ": padded extent smaller than kernel");
    }
    return (in + 2 * pad - k) / stride + 1;
}

template <typename T>
void check_bias(const TensorT<T>& bias, int64_t out_ch, const char* what) {
    if (bias.ndim() != 1 || bias.size(0) != out_ch) {
        throw std::invalid_argument(std::string(what) + ": bias must have shape [" +
                                    std::to_string(out_ch) + "]");
    }
}

// ---- conv2d raw kernels ----------------------------------------------------

template <typename T>
void conv2d_forward_raw(const T* x, const T* w, const T* b, T* out, int64_t ci_n, int64_t co_n,
                        int64_t h, int64_t wd, int64_t kh, int64_t kw, int64_t s, int64_t p,
                        int64_t oh_n, int64_t ow_n) {
    for (int64_t co = 0; co < co_n; ++co) {
        T* plane = out + co * oh_n * ow_n;
        const T bv = b ? b[co] : T(0);
        for (int64_t i = 0; i < oh_n * ow_n; ++i) plane[i] = bv;
    }
    for (int64_t co = 0; co < co_n; ++co) {
        for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T* xplane = x + ci * h * wd;
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    const T wv = w[((co * ci_n + ci) * kh + ki) * kw + kj];
                    if (wv == T(0)) continue;
                    const int64_t lo = std::max<int64_t>(0, ceil_div(p - kj, s));
                    const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p - kj, s));
                    for (int64_t oh = 0; oh < oh_n; ++oh) {
                        const int64_t ih = oh * s - p + ki;
                        if (ih < 0 || ih >= h) continue;
                        const T* xrow = xplane + ih * wd;
                        T* orow = out + (co * oh_n + oh) * ow_n;
                        if (s == 1) {
                            const T* xr = xrow - p + kj;
                            for (int64_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * xr[ow];
                        } else {
                            for (int64_t ow = lo; ow <= hi; ++ow)
                                orow[ow] += wv * xrow[ow * s - p + kj];
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_raw(const T* x, const T* w, const T* g, T* dx, T* dw, T* db, int64_t ci_n,
                         int64_t co_n, int64_t h, int64_t wd, int64_t kh, int64_t kw, int64_t s,
                         int64_t p, int64_t oh_n, int64_t ow_n) {
    if (db) {
        for (int64_t co = 0; co < co_n; ++co) {
            const T* gplane = g + co * oh_n * ow_n;
            T acc = T(0);
            for (int64_t i = 0; i < oh_n * ow_n; ++i) acc += gplane[i];
            db[co] = acc;
        }
    }
    for (int64_t co = 0; co < co_n; ++co) {
        for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T* xplane = x + ci * h * wd;
            T* dxplane = dx ? dx + ci * h * wd : nullptr;
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj) {
                    const int64_t widx = ((co * ci_n + ci) * kh + ki) * kw + kj;
                    const T wv = w[widx];
                    const int64_t lo = std::max<int64_t>(0, ceil_div(p - kj, s));
                    const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p - kj, s));
                    T wacc = T(0);
                    for (int64_t oh = 0; oh < oh_n; ++oh) {
                        const int64_t ih = oh * s - p + ki;
                        if (ih < 0 || ih >= h) continue;
                        const T* grow = g + (co * oh_n + oh) * ow_n;
                        const T* xrow = xplane + ih * wd;
                        if (dw) {
                            if (s == 1) {
                                const T* xr = xrow - p + kj;
                                for (int64_t ow = lo; ow <= hi; ++ow) wacc += grow[ow] * xr[ow];
                            } else {
                                for (int64_t ow = lo; ow <= hi; ++ow)
                                    wacc += grow[ow] * xrow[ow * s - p + kj];
                            }
                        }
                        if (dx && wv != T(0)) {
                            T* dxrow = dxplane + ih * wd;
                            if (s == 1) {
                                T* dxr = dxrow - p + kj;
                                for (int64_t ow = lo; ow <= hi; ++ow) dxr[ow] += wv * grow[ow];
                            } else {
                                for (int64_t ow = lo; ow <= hi; ++ow)
                                    dxrow[ow * s - p + kj] += wv * grow[ow];
                            }
                        }
                    }
                    if (dw) dw[widx] += wacc;
                }
            }
        }
    }
}

// ---- conv3d im2col path ------------------------------------------------------
// For large outputs the convolution runs as one gemm over unrolled patches;
// the scratch buffer is reused across calls.

template <typename T>
std::vector<T>& conv_scratch() {
    thread_local std::vector<T> scratch;
    return scratch;
}

template <typename T>
std::vector<T>& conv_scratch2() {
    thread_local std::vector<T> scratch;
    return scratch;
}

// C[M,N] += A[M,K] * B[K,N] with explicit row strides.
template <typename T>
void conv_gemm_nn(const T* a, int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc,
                  int64_t m, int64_t k, int64_t n) {
    constexpr int64_t MR = 4;
    constexpr int64_t NR = 32;
    const int64_t m_main = m - m % MR;
    const int64_t n_main = n - n % NR;
    for (int64_t i0 = 0; i0 < m_main; i0 += MR) {
        for (int64_t j0 = 0; j0 < n_main; j0 += NR) {
            T acc[MR][NR];
            for (int64_t r = 0; r < MR; ++r)
                for (int64_t j = 0; j < NR; ++j) acc[r][j] = T(0);
            const T* brow = b + j0;
            for (int64_t p = 0; p < k; ++p, brow += ldb) {
                for (int64_t r = 0; r < MR; ++r) {
                    const T av = a[(i0 + r) * lda + p];
                    for (int64_t j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
                }
            }
            for (int64_t r = 0; r < MR; ++r) {
                T* crow = c + (i0 + r) * ldc + j0;
                for (int64_t j = 0; j < NR; ++j) crow[j] += acc[r][j];
            }
        }
        for (int64_t j0 = n_main; j0 < n; ++j0) {
            for (int64_t r = 0; r < MR; ++r) {
                const T* arow = a + (i0 + r) * lda;
                T acc = T(0);
                for (int64_t p = 0; p < k; ++p) acc += arow[p] * b[p * ldb + j0];
                c[(i0 + r) * ldc + j0] += acc;
            }
        }
    }
    for (int64_t i = m_main; i < m; ++i) {
        const T* arow = a + i * lda;
        T* crow = c + i * ldc;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b + p * ldb;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[M,N] += A[M,K] * B[N,K]^T with explicit row strides (contraction over
// the shared contiguous axis).
template <typename T>
void conv_gemm_nt(const T* a, int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc,
                  int64_t m, int64_t k, int64_t n) {
    constexpr int64_t MR = 4;
    const int64_t m_main = m - m % MR;
    for (int64_t i0 = 0; i0 < m_main; i0 += MR) {
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * ldb;
            T acc[MR] = {T(0), T(0), T(0), T(0)};
            for (int64_t p = 0; p < k; ++p) {
                const T bv = brow[p];
                for (int64_t r = 0; r < MR; ++r) acc[r] += a[(i0 + r) * lda + p] * bv;
            }
            for (int64_t r = 0; r < MR; ++r) c[(i0 + r) * ldc + j] += acc[r];
        }
    }
    for (int64_t i = m_main; i < m; ++i) {
        for (int64_t j = 0; j < n; ++j) {
            const T* arow = a + i * lda;
            const T* brow = b + j * ldb;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            c[i * ldc + j] += acc;
        }
    }
}

template <typename T>
void im2col_3d(const T* x, T* col, int64_t ci_n, int64_t d, int64_t h, int64_t wd, int64_t kd,
               int64_t kh, int64_t kw, Triple s, Triple p, int64_t od0, int64_t od1,
               int64_t oh_n, int64_t ow_n) {
    const int64_t positions = (od1 - od0) * oh_n * ow_n;
    int64_t row = 0;
    for (int64_t ci = 0; ci < ci_n; ++ci) {
        const T* xvol = x + ci * d * h * wd;
        for (int64_t kz = 0; kz < kd; ++kz) {
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj, ++row) {
                    T* dst = col + row * positions;
                    const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                    const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p.w - kj, s.w));
                    for (int64_t od = od0; od < od1; ++od) {
                        const int64_t id = od * s.d - p.d + kz;
                        for (int64_t oh = 0; oh < oh_n; ++oh) {
                            const int64_t ih = oh * s.h - p.h + ki;
                            T* out_row = dst + ((od - od0) * oh_n + oh) * ow_n;
                            if (id < 0 || id >= d || ih < 0 || ih >= h) {
                                std::fill(out_row, out_row + ow_n, T(0));
                                continue;
                            }
                            const T* xrow = xvol + (id * h + ih) * wd;
                            for (int64_t ow = 0; ow < lo; ++ow) out_row[ow] = T(0);
                            if (s.w == 1) {
                                const T* xr = xrow - p.w + kj;
                                for (int64_t ow = lo; ow <= hi; ++ow) out_row[ow] = xr[ow];
                            } else {
                                for (int64_t ow = lo; ow <= hi; ++ow)
                                    out_row[ow] = xrow[ow * s.w - p.w + kj];
                            }
                            for (int64_t ow = hi + 1; ow < ow_n; ++ow) out_row[ow] = T(0);
                        }
                    }
                }
            }
        }
    }
}

// Scatter-add of patch-gradient rows back onto the input (inverse of
// im2col_3d).
template <typename T>
void col2im_3d(const T* col, T* dx, int64_t ci_n, int64_t d, int64_t h, int64_t wd, int64_t kd,
               int64_t kh, int64_t kw, Triple s, Triple p, int64_t od0, int64_t od1,
               int64_t oh_n, int64_t ow_n) {
    const int64_t positions = (od1 - od0) * oh_n * ow_n;
    int64_t row = 0;
    for (int64_t ci = 0; ci < ci_n; ++ci) {
        T* xvol = dx + ci * d * h * wd;
        for (int64_t kz = 0; kz < kd; ++kz) {
            for (int64_t ki = 0; ki < kh; ++ki) {
                for (int64_t kj = 0; kj < kw; ++kj, ++row) {
                    const T* src = col + row * positions;
                    const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                    const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p.w - kj, s.w));
                    for (int64_t od = od0; od < od1; ++od) {
                        const int64_t id = od * s.d - p.d + kz;
                        if (id < 0 || id >= d) continue;
                        for (int64_t oh = 0; oh < oh_n; ++oh) {
                            const int64_t ih = oh * s.h - p.h + ki;
                            if (ih < 0 || ih >= h) continue;
                            const T* in_row = src + ((od - od0) * oh_n + oh) * ow_n;
                            T* xrow = xvol + (id * h + ih) * wd;
                            if (s.w == 1) {
                                T* xr = xrow - p.w + kj;
                                for (int64_t ow = lo; ow <= hi; ++ow) xr[ow] += in_row[ow];
                            } else {
                                for (int64_t ow = lo; ow <= hi; ++ow)
                                    xrow[ow * s.w - p.w + kj] += in_row[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

constexpr int64_t kIm2colMinPositions = 1024;

// ---- conv3d raw kernels ----------------------------------------------------

template <typename T>
void conv3d_forward_raw(const T* x, const T* w, const T* b, T* out, int64_t ci_n, int64_t co_n,
                        int64_t d, int64_t h, int64_t wd, int64_t kd, int64_t kh, int64_t kw,
                        Triple s, Triple p, int64_t od_n, int64_t oh_n, int64_t ow_n) {
    const int64_t ovol = od_n * oh_n * ow_n;
    for (int64_t co = 0; co < co_n; ++co) {
        T* plane = out + co * ovol;
        const T bv = b ? b[co] : T(0);
        for (int64_t i = 0; i < ovol; ++i) plane[i] = bv;
    }
    for (int64_t co = 0; co < co_n; ++co) {
        for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T* xvol = x + ci * d * h * wd;
            for (int64_t kz = 0; kz < kd; ++kz) {
                for (int64_t ki = 0; ki < kh; ++ki) {
                    for (int64_t kj = 0; kj < kw; ++kj) {
                        const T wv = w[(((co * ci_n + ci) * kd + kz) * kh + ki) * kw + kj];
                        if (wv == T(0)) continue;
                        const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                        const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p.w - kj, s.w));
                        for (int64_t od = 0; od < od_n; ++od) {
                            const int64_t id = od * s.d - p.d + kz;
                            if (id < 0 || id >= d) continue;
                            for (int64_t oh = 0; oh < oh_n; ++oh) {
                                const int64_t ih = oh * s.h - p.h + ki;
                                if (ih < 0 || ih >= h) continue;
                                const T* xrow = xvol + (id * h + ih) * wd;
                                T* orow = out + ((co * od_n + od) * oh_n + oh) * ow_n;
                                if (s.w == 1) {
                                    const T* xr = xrow - p.w + kj;
                                    for (int64_t ow = lo; ow <= hi; ++ow) orow[ow] += wv * xr[ow];
                                } else {
                                    for (int64_t ow = lo; ow <= hi; ++ow)
                                        orow[ow] += wv * xrow[ow * s.w - p.w + kj];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3d_backward_raw(const T* x, const T* w, const T* g, T* dx, T* dw, T* db, int64_t ci_n,
                         int64_t co_n, int64_t d, int64_t h, int64_t wd, int64_t kd, int64_t kh,
                         int64_t kw, Triple s, Triple p, int64_t od_n, int64_t oh_n,
                         int64_t ow_n) {
    const int64_t ovol = od_n * oh_n * ow_n;
    if (db) {
        for (int64_t co = 0; co < co_n; ++co) {
            const T* gplane = g + co * ovol;
            T acc = T(0);
            for (int64_t i = 0; i < ovol; ++i) acc += gplane[i];
            db[co] = acc;
        }
    }
    for (int64_t co = 0; co < co_n; ++co) {
        for (int64_t ci = 0; ci < ci_n; ++ci) {
            const T* xvol = x + ci * d * h * wd;
            T* dxvol = dx ? dx + ci * d * h * wd : nullptr;
            for (int64_t kz = 0; kz < kd; ++kz) {
                for (int64_t ki = 0; ki < kh; ++ki) {
                    for (int64_t kj = 0; kj < kw; ++kj) {
                        const int64_t widx = (((co * ci_n + ci) * kd + kz) * kh + ki) * kw + kj;
                        const T wv = w[widx];
                        const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                        const int64_t hi = std::min(ow_n - 1, floor_div(wd - 1 + p.w - kj, s.w));
                        T wacc = T(0);
                        for (int64_t od = 0; od < od_n; ++od) {
                            const int64_t id = od * s.d - p.d + kz;
                            if (id < 0 || id >= d) continue;
                            for (int64_t oh = 0; oh < oh_n; ++oh) {
                                const int64_t ih = oh * s.h - p.h + ki;
                                if (ih < 0 || ih >= h) continue;
                                const T* grow = g + ((co * od_n + od) * oh_n + oh) * ow_n;
                                const T* xrow = xvol + (id * h + ih) * wd;
                                if (dw) {
                                    if (s.w == 1) {
                                        const T* xr = xrow - p.w + kj;
                                        for (int64_t ow = lo; ow <= hi; ++ow)
                                            wacc += grow[ow] * xr[ow];
                                    } else {
                                        for (int64_t ow = lo; ow <= hi; ++ow)
                                            wacc += grow[ow] * xrow[ow * s.w - p.w + kj];
                                    }
                                }
                                if (dxvol && wv != T(0)) {
                                    T* dxrow = dxvol + (id * h + ih) * wd;
                                    if (s.w == 1) {
                                        T* dxr = dxrow - p.w + kj;
                                        for (int64_t ow = lo; ow <= hi; ++ow)
                                            dxr[ow] += wv * grow[ow];
                                    } else {
                                        for (int64_t ow = lo; ow <= hi; ++ow)
                                            dxrow[ow * s.w - p.w + kj] += wv * grow[ow];
                                    }
                                }
                            }
                        }
                        if (dw) dw[widx] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  int64_t stride, int64_t pad) {
    if (x.ndim() != 3) throw std::invalid_argument("conv2d input must be [C,H,W]");
    if (weight.ndim() != 4) throw std::invalid_argument("conv2d weight must be [Co,Ci,kh,kw]");
    if (stride <= 0 || pad < 0) throw std::invalid_argument("conv2d stride/pad out of range");
    const int64_t ci_n = x.size(0), h = x.size(1), wd = x.size(2);
    const int64_t co_n = weight.size(0), kh = weight.size(2), kw = weight.size(3);
    if (weight.size(1) != ci_n) {
        throw std::invalid_argument("conv2d channel mismatch: input has " + std::to_string(ci_n) +
                                    ", weight expects " + std::to_string(weight.size(1)));
    }
    check_bias(bias, co_n, "conv2d");
    const int64_t oh_n = conv_extent(h, kh, stride, pad, "conv2d");
    const int64_t ow_n = conv_extent(wd, kw, stride, pad, "conv2d");
    TensorT<T> out = TensorT<T>::zeros({co_n, oh_n, ow_n});
    conv2d_forward_raw(x.data(), weight.data(), bias.data(), out.mutable_data(), ci_n, co_n, h,
                       wd, kh, kw, stride, pad, oh_n, ow_n);
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>* t : {&x, &weight, &bias}) {
        if (!t->requires_grad()) continue;
        if (tape && t->tape() != tape) throw std::invalid_argument("operands belong to different tapes");
        tape = t->tape();
    }
    if (!tape) return out;
    const bool gx = x.requires_grad(), gw = weight.requires_grad(), gb = bias.requires_grad();
    std::vector<int> inputs;
    if (gx) inputs.push_back(x.node());
    if (gw) inputs.push_back(weight.node());
    if (gb) inputs.push_back(bias.node());
    TensorT<T> xv = x.detached();
    TensorT<T> wv = weight.detached();
    tape->note_saved(x.shape());
    tape->note_saved(weight.shape());
    auto fn = [gx, gw, gb, xv, wv, ci_n, co_n, h, wd, kh, kw, stride, pad, oh_n,
               ow_n](const TensorT<T>& g) {
        TensorT<T> dx, dw, db;
        if (gx) dx = TensorT<T>::zeros(xv.shape());
        if (gw) dw = TensorT<T>::zeros(wv.shape());
        if (gb) db = TensorT<T>::zeros({co_n});
        conv2d_backward_raw(xv.data(), wv.data(), g.data(), gx ? dx.mutable_data() : nullptr,
                            gw ? dw.mutable_data() : nullptr, gb ? db.mutable_data() : nullptr,
                            ci_n, co_n, h, wd, kh, kw, stride, pad, oh_n, ow_n);
        std::vector<TensorT<T>> out_g;
        if (gx) out_g.push_back(dx);
        if (gw) out_g.push_back(dw);
        if (gb) out_g.push_back(db);
        return out_g;
    };
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
TensorT<T> conv3d(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                  Triple stride, Triple pad) {
    if (x.ndim() != 4) throw std::invalid_argument("conv3d input must be [C,D,H,W]");
    if (weight.ndim() != 5) throw std::invalid_argument("conv3d weight must be [Co,Ci,kd,kh,kw]");
    if (stride.d <= 0 || stride.h <= 0 || stride.w <= 0 || pad.d < 0 || pad.h < 0 || pad.w < 0) {
        throw std::invalid_argument("conv3d stride/pad out of range");
    }
    const int64_t ci_n = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    const int64_t co_n = weight.size(0);
    const int64_t kd = weight.size(2), kh = weight.size(3), kw = weight.size(4);
    if (weight.size(1) != ci_n) {
        throw std::invalid_argument("conv3d channel mismatch: input has " + std::to_string(ci_n) +
                                    ", weight expects " + std::to_string(weight.size(1)));
    }
    check_bias(bias, co_n, "conv3d");
    const int64_t od_n = conv_extent(d, kd, stride.d, pad.d, "conv3d");
    const int64_t oh_n = conv_extent(h, kh, stride.h, pad.h, "conv3d");
    const int64_t ow_n = conv_extent(wd, kw, stride.w, pad.w, "conv3d");
    TensorT<T> out = TensorT<T>::zeros({co_n, od_n, oh_n, ow_n});
    const int64_t positions = od_n * oh_n * ow_n;
    const int64_t plane = oh_n * ow_n;
    const int64_t patch = ci_n * kd * kh * kw;
    // od planes per chunk keep the unrolled-patch slab cache-resident
    const int64_t chunk = std::max<int64_t>(1, 4096 / plane);
    const bool use_gemm = positions >= kIm2colMinPositions && patch > 1;
    if (use_gemm) {
        std::vector<T>& col = conv_scratch<T>();
        T* op = out.mutable_data();
        for (int64_t co = 0; co < co_n; ++co) {
            const T bv = bias.data()[co];
            T* oplane = op + co * positions;
            for (int64_t i = 0; i < positions; ++i) oplane[i] = bv;
        }
        for (int64_t od0 = 0; od0 < od_n; od0 += chunk) {
            const int64_t od1 = std::min(od_n, od0 + chunk);
            const int64_t cp = (od1 - od0) * plane;
            col.resize(static_cast<size_t>(patch * cp));
            im2col_3d(x.data(), col.data(), ci_n, d, h, wd, kd, kh, kw, stride, pad, od0, od1,
                      oh_n, ow_n);
            conv_gemm_nn(weight.data(), patch, col.data(), cp, op + od0 * plane, positions, co_n,
                         patch, cp);
        }
    } else {
        conv3d_forward_raw(x.data(), weight.data(), bias.data(), out.mutable_data(), ci_n, co_n,
                           d, h, wd, kd, kh, kw, stride, pad, od_n, oh_n, ow_n);
    }
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>* t : {&x, &weight, &bias}) {
        if (!t->requires_grad()) continue;
        if (tape && t->tape() != tape) throw std::invalid_argument("operands belong to different tapes");
        tape = t->tape();
    }
    if (!tape) return out;
    const bool gx = x.requires_grad(), gw = weight.requires_grad(), gb = bias.requires_grad();
    std::vector<int> inputs;
    if (gx) inputs.push_back(x.node());
    if (gw) inputs.push_back(weight.node());
    if (gb) inputs.push_back(bias.node());
    TensorT<T> xv = x.detached();
    TensorT<T> wv = weight.detached();
    tape->note_saved(x.shape());
    tape->note_saved(weight.shape());
    auto fn = [gx, gw, gb, xv, wv, ci_n, co_n, d, h, wd, kd, kh, kw, stride, pad, od_n, oh_n,
               ow_n, positions, plane, patch, chunk, use_gemm](const TensorT<T>& g) {
        TensorT<T> dx, dw, db;
        if (gx) dx = TensorT<T>::zeros(xv.shape());
        if (gw) dw = TensorT<T>::zeros(wv.shape());
        if (gb) db = TensorT<T>::zeros({co_n});
        if (use_gemm) {
            if (gb) {
                T* dbp = db.mutable_data();
                for (int64_t co = 0; co < co_n; ++co) {
                    const T* gplane = g.data() + co * positions;
                    T acc = T(0);
                    for (int64_t i = 0; i < positions; ++i) acc += gplane[i];
                    dbp[co] = acc;
                }
            }
            std::vector<T> wt;
            if (gx) {
                wt.resize(static_cast<size_t>(patch * co_n));
                for (int64_t co = 0; co < co_n; ++co)
                    for (int64_t pk = 0; pk < patch; ++pk)
                        wt[static_cast<size_t>(pk * co_n + co)] = wv.data()[co * patch + pk];
            }
            std::vector<T>& col = conv_scratch<T>();
            std::vector<T>& dcol = conv_scratch2<T>();
            for (int64_t od0 = 0; od0 < od_n; od0 += chunk) {
                const int64_t od1 = std::min(od_n, od0 + chunk);
                const int64_t cp = (od1 - od0) * plane;
                if (gw) {
                    col.resize(static_cast<size_t>(patch * cp));
                    im2col_3d(xv.data(), col.data(), ci_n, d, h, wd, kd, kh, kw, stride, pad,
                              od0, od1, oh_n, ow_n);
                    conv_gemm_nt(g.data() + od0 * plane, positions, col.data(), cp,
                                 dw.mutable_data(), patch, co_n, cp, patch);
                }
                if (gx) {
                    dcol.assign(static_cast<size_t>(patch * cp), T(0));
                    conv_gemm_nn(wt.data(), co_n, g.data() + od0 * plane, positions, dcol.data(),
                                 cp, patch, co_n, cp);
                    col2im_3d(dcol.data(), dx.mutable_data(), ci_n, d, h, wd, kd, kh, kw, stride,
                              pad, od0, od1, oh_n, ow_n);
                }
            }
        } else {
            conv3d_backward_raw(xv.data(), wv.data(), g.data(), gx ? dx.mutable_data() : nullptr,
                                gw ? dw.mutable_data() : nullptr, gb ? db.mutable_data() : nullptr,
                                ci_n, co_n, d, h, wd, kd, kh, kw, stride, pad, od_n, oh_n, ow_n);
        }
        std::vector<TensorT<T>> out_g;
        if (gx) out_g.push_back(dx);
        if (gw) out_g.push_back(dw);
        if (gb) out_g.push_back(db);
        return out_g;
    };
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// conv3d_transpose

namespace {

int64_t convt_extent(int64_t in, int64_t k, int64_t stride, int64_t pad, const char* what) {
    int64_t out = (in - 1) * stride - 2 * pad + k;
    if (out <= 0) throw std::invalid_argument(std::string(what) + ": output extent underflow");
    return out;
}

// out[co, od, oh, ow] += sum_ci sum_k x[ci, id, ih, iw] * w[ci, co, kz, ki, kj]
// with od = id*s - p + kz (and likewise for h, w).
template <typename T>
void conv3dt_forward_raw(const T* x, const T* w, const T* b, T* out, int64_t ci_n, int64_t co_n,
                         int64_t d, int64_t h, int64_t wd, int64_t kd, int64_t kh, int64_t kw,
                         Triple s, Triple p, int64_t od_n, int64_t oh_n, int64_t ow_n) {
    const int64_t ovol = od_n * oh_n * ow_n;
    for (int64_t co = 0; co < co_n; ++co) {
        T* plane = out + co * ovol;
        const T bv = b ? b[co] : T(0);
        for (int64_t i = 0; i < ovol; ++i) plane[i] = bv;
    }
    for (int64_t ci = 0; ci < ci_n; ++ci) {
        const T* xvol = x + ci * d * h * wd;
        for (int64_t co = 0; co < co_n; ++co) {
            for (int64_t kz = 0; kz < kd; ++kz) {
                for (int64_t ki = 0; ki < kh; ++ki) {
                    for (int64_t kj = 0; kj < kw; ++kj) {
                        const T wv = w[(((ci * co_n + co) * kd + kz) * kh + ki) * kw + kj];
                        if (wv == T(0)) continue;
                        const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                        const int64_t hi = std::min(wd - 1, floor_div(ow_n - 1 + p.w - kj, s.w));
                        for (int64_t id = 0; id < d; ++id) {
                            const int64_t od = id * s.d - p.d + kz;
                            if (od < 0 || od >= od_n) continue;
                            for (int64_t ih = 0; ih < h; ++ih) {
                                const int64_t oh = ih * s.h - p.h + ki;
                                if (oh < 0 || oh >= oh_n) continue;
                                const T* xrow = xvol + (id * h + ih) * wd;
                                T* orow = out + ((co * od_n + od) * oh_n + oh) * ow_n;
                                for (int64_t iw = lo; iw <= hi; ++iw)
                                    orow[iw * s.w - p.w + kj] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv3dt_backward_raw(const T* x, const T* w, const T* g, T* dx, T* dw, T* db, int64_t ci_n,
                          int64_t co_n, int64_t d, int64_t h, int64_t wd, int64_t kd, int64_t kh,
                          int64_t kw, Triple s, Triple p, int64_t od_n, int64_t oh_n,
                          int64_t ow_n) {
    const int64_t ovol = od_n * oh_n * ow_n;
    if (db) {
        for (int64_t co = 0; co < co_n; ++co) {
            const T* gplane = g + co * ovol;
            T acc = T(0);
            for (int64_t i = 0; i < ovol; ++i) acc += gplane[i];
            db[co] = acc;
        }
    }
    for (int64_t ci = 0; ci < ci_n; ++ci) {
        const T* xvol = x + ci * d * h * wd;
        T* dxvol = dx ? dx + ci * d * h * wd : nullptr;
        for (int64_t co = 0; co < co_n; ++co) {
            for (int64_t kz = 0; kz < kd; ++kz) {
                for (int64_t ki = 0; ki < kh; ++ki) {
                    for (int64_t kj = 0; kj < kw; ++kj) {
                        const int64_t widx = (((ci * co_n + co) * kd + kz) * kh + ki) * kw + kj;
                        const T wv = w[widx];
                        const int64_t lo = std::max<int64_t>(0, ceil_div(p.w - kj, s.w));
                        const int64_t hi = std::min(wd - 1, floor_div(ow_n - 1 + p.w - kj, s.w));
                        T wacc = T(0);
                        for (int64_t id = 0; id < d; ++id) {
                            const int64_t od = id * s.d - p.d + kz;
                            if (od < 0 || od >= od_n) continue;
                            for (int64_t ih = 0; ih < h; ++ih) {
                                const int64_t oh = ih * s.h - p.h + ki;
                                if (oh < 0 || oh >= oh_n) continue;
                                const T* xrow = xvol + (id * h + ih) * wd;
                                const T* grow = g + ((co * od_n + od) * oh_n + oh) * ow_n;
                                if (dw) {
                                    for (int64_t iw = lo; iw <= hi; ++iw)
                                        wacc += xrow[iw] * grow[iw * s.w - p.w + kj];
                                }
                                if (dxvol && wv != T(0)) {
                                    T* dxrow = dxvol + (id * h + ih) * wd;
                                    for (int64_t iw = lo; iw <= hi; ++iw)
                                        dxrow[iw] += wv * grow[iw * s.w - p.w + kj];
                                }
                            }
                        }
                        if (dw) dw[widx] += wacc;
                    }
                }
            }
        }
    }
}

}  // namespace

template <typename T>
TensorT<T> conv3d_transpose(const TensorT<T>& x, const TensorT<T>& weight, const TensorT<T>& bias,
                            Triple stride, Triple pad) {
    if (x.ndim() != 4) throw std::invalid_argument("conv3d_transpose input must be [C,D,H,W]");
    if (weight.ndim() != 5) {
        throw std::invalid_argument("conv3d_transpose weight must be [Ci,Co,kd,kh,kw]");
    }
    const int64_t ci_n = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    if (weight.size(0) != ci_n) {
        throw std::invalid_argument("conv3d_transpose channel mismatch: input has " +
                                    std::to_string(ci_n) + ", weight expects " +
                                    std::to_string(weight.size(0)));
    }
    const int64_t co_n = weight.size(1);
    const int64_t kd = weight.size(2), kh = weight.size(3), kw = weight.size(4);
    check_bias(bias, co_n, "conv3d_transpose");
    const int64_t od_n = convt_extent(d, kd, stride.d, pad.d, "conv3d_transpose");
    const int64_t oh_n = convt_extent(h, kh, stride.h, pad.h, "conv3d_transpose");
    const int64_t ow_n = convt_extent(wd, kw, stride.w, pad.w, "conv3d_transpose");
    TensorT<T> out = TensorT<T>::zeros({co_n, od_n, oh_n, ow_n});
    conv3dt_forward_raw(x.data(), weight.data(), bias.data(), out.mutable_data(), ci_n, co_n, d,
                        h, wd, kd, kh, kw, stride, pad, od_n, oh_n, ow_n);
    TapeT<T>* tape = nullptr;
    for (const TensorT<T>* t : {&x, &weight, &bias}) {
        if (!t->requires_grad()) continue;
        if (tape && t->tape() != tape) throw std::invalid_argument("operands belong to different tapes");
        tape = t->tape();
    }
    if (!tape) return out;
    const bool gx = x.requires_grad(), gw = weight.requires_grad(), gb = bias.requires_grad();
    std::vector<int> inputs;
    if (gx) inputs.push_back(x.node());
    if (gw) inputs.push_back(weight.node());
    if (gb) inputs.push_back(bias.node());
    TensorT<T> xv = x.detached();
    TensorT<T> wv = weight.detached();
    tape->note_saved(x.shape());
    tape->note_saved(weight.shape());
    auto fn = [gx, gw, gb, xv, wv, ci_n, co_n, d, h, wd, kd, kh, kw, stride, pad, od_n, oh_n,
               ow_n](const TensorT<T>& g) {
        TensorT<T> dx, dw, db;
        if (gx) dx = TensorT<T>::zeros(xv.shape());
        if (gw) dw = TensorT<T>::zeros(wv.shape());
        if (gb) db = TensorT<T>::zeros({co_n});
        conv3dt_backward_raw(xv.data(), wv.data(), g.data(), gx ? dx.mutable_data() : nullptr,
                             gw ? dw.mutable_data() : nullptr, gb ? db.mutable_data() : nullptr,
                             ci_n, co_n, d, h, wd, kd, kh, kw, stride, pad, od_n, oh_n, ow_n);
        std::vector<TensorT<T>> out_g;
        if (gx) out_g.push_back(dx);
        if (gw) out_g.push_back(dw);
        if (gb) out_g.push_back(db);
        return out_g;
    };
    int node = tape->record(std::move(inputs), std::move(fn));
    return TensorT<T>::attached(std::move(out), tape, node);
}

// ---------------------------------------------------------------------------
// max pooling

namespace {

int64_t pool_extent(int64_t in, int64_t k, const char* what) {
    if (k <= 0) throw std::invalid_argument(std::string(what) + ": window must be positive");
    if (k > 1 && in % k != 0) {
        throw std::invalid_argument(std::string(what) + ": extent " + std::to_string(in) +
                                    " not divisible by window " + std::to_string(k));
    }
    return in / k;
}

}  // namespace

template <typename T>
TensorT<T> maxpool3d(const TensorT<T>& x, Triple kernel) {
    if (x.ndim() != 4) throw std::invalid_argument("maxpool3d input must be [C,D,H,W]");
    const int64_t c = x.size(0), d = x.size(1), h = x.size(2), wd = x.size(3);
    const int64_t od = pool_extent(d, kernel.d, "maxpool3d");
    const int64_t oh = pool_extent(h, kernel.h, "maxpool3d");
    const int64_t ow = pool_extent(wd, kernel.w, "maxpool3d");
    TensorT<T> out = TensorT<T>::zeros({c, od, oh, ow});
    std::vector<int64_t> argmax(static_cast<size_t>(out.numel()));
    const T* xp = x.data();
    T* op = out.mutable_data();
    int64_t oidx = 0;
    for (int64_t cc = 0; cc < c; ++cc) {
        for (int64_t zd = 0; zd < od; ++zd) {
            for (int64_t zh = 0; zh < oh; ++zh) {
                for (int64_t zw = 0; zw < ow; ++zw) {
                    T best = -std::numeric_limits<T>::infinity();
                    int64_t best_idx = -1;
                    for (int64_t dz = 0; dz < kernel.d; ++dz) {
                        for (int64_t dh = 0; dh < kernel.h; ++dh) {
                            for (int64_t dw2 = 0; dw2 < kernel.w; ++dw2) {
                                const int64_t idx =
                                    ((cc * d + (zd * kernel.d + dz)) * h + (zh * kernel.h + dh)) * wd +
                                    (zw * kernel.w + dw2);
                                if (xp[idx] > best) {
                                    best = xp[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                    }
                    op[oidx] = best;
                    argmax[static_cast<size_t>(oidx)] = best_idx;
                    ++oidx;
                }
            }
        }
    }
    if (!x.requires_grad()) return out;
    TapeT<T>* tape = x.tape();
    Shape in_shape = x.shape();
    tape->note_saved({static_cast<int64_t>(argmax.size())});
    int node = tape->record({x.node()}, [in_shape, argmax](const TensorT<T>& g) {
        TensorT<T> dx = TensorT<T>::zeros(in_shape);
        T* dp = dx.mutable_data();
        const T* gp = g.data();
        for (size_t i = 0; i < argmax.size(); ++i) dp[argmax[i]] += gp[i];
        return std::vector<TensorT<T>>{dx};
    });
    return TensorT<T>::attached(std::move(out), tape, node);
}

template <typename T>
TensorT<T> maxpool2d(const TensorT<T>& x, int64_t kh, int64_t kw) {
    if (x.ndim() != 3) throw std::invalid_argument("maxpool2d input must be [C,H,W]");
    TensorT<T> x4 = reshape(x, {x.size(0), int64_t{1}, x.size(1), x.size(2)});
    TensorT<T> pooled = maxpool3d(x4, Triple{1, kh, kw});
    return reshape(pooled, {pooled.size(0), pooled.size(2), pooled.size(3)});
}

// ---------------------------------------------------------------------------
// layers

template <typename T>
Conv2dLayer<T> Conv2dLayer<T>::make(int64_t in_ch, int64_t out_ch, int64_t kernel, int64_t stride,
                                    int64_t pad, Rng& rng) {
    Conv2dLayer<T> layer;
    // He-style bound: keeps activation scale through stacked relu convs
    const T bound = static_cast<T>(std::sqrt(6.0 / static_cast<double>(in_ch * kernel * kernel)));
    layer.weight = TensorT<T>::uniform({out_ch, in_ch, kernel, kernel}, rng, -bound, bound);
    layer.bias = TensorT<T>::uniform({out_ch}, rng, -bound, bound);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

template <typename T>
Conv3dLayer<T> Conv3dLayer<T>::make(int64_t in_ch, int64_t out_ch, Triple kernel, Triple stride,
                                    Triple pad, Rng& rng) {
    Conv3dLayer<T> layer;
    const T bound = static_cast<T>(
        std::sqrt(6.0 / static_cast<double>(in_ch * kernel.d * kernel.h * kernel.w)));
    layer.weight =
        TensorT<T>::uniform({out_ch, in_ch, kernel.d, kernel.h, kernel.w}, rng, -bound, bound);
    layer.bias = TensorT<T>::uniform({out_ch}, rng, -bound, bound);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

template <typename T>
Conv3dTransposeLayer<T> Conv3dTransposeLayer<T>::make(int64_t in_ch, int64_t out_ch, Triple kernel,
                                                      Triple stride, Triple pad, Rng& rng) {
    Conv3dTransposeLayer<T> layer;
    const T bound = static_cast<T>(
        std::sqrt(6.0 / static_cast<double>(in_ch * kernel.d * kernel.h * kernel.w)));
    layer.weight =
        TensorT<T>::uniform({in_ch, out_ch, kernel.d, kernel.h, kernel.w}, rng, -bound, bound);
    layer.bias = TensorT<T>::uniform({out_ch}, rng, -bound, bound);
    layer.stride = stride;
    layer.pad = pad;
    return layer;
}

template <typename T>
Conv2dTransposeLayer<T> Conv2dTransposeLayer<T>::make(int64_t in_ch, int64_t out_ch,
                                                      int64_t kernel, int64_t stride, int64_t pad,
                                                      Rng& rng) {
    Conv2dTransposeLayer<T> layer;
    layer.inner = Conv3dTransposeLayer<T>::make(in_ch, out_ch, Triple{1, kernel, kernel},
                                                Triple{1, stride, stride}, Triple{0, pad, pad}, rng);
    return layer;
}

template <typename T>
TensorT<T> Conv2dTransposeLayer<T>::forward(const TensorT<T>& x) const {
    if (x.ndim() != 3) throw std::invalid_argument("conv2d_transpose input must be [C,H,W]");
    TensorT<T> x4 = reshape(x, {x.size(0), int64_t{1}, x.size(1), x.size(2)});
    TensorT<T> y = inner.forward(x4);
    return reshape(y, {y.size(0), y.size(2), y.size(3)});
}

#define PERCSEG_INSTANTIATE_CONV(T)                                                            \
    template TensorT<T> conv2d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,     \
                                  int64_t, int64_t);                                           \
    template TensorT<T> conv3d<T>(const TensorT<T>&, const TensorT<T>&, const TensorT<T>&,     \
                                  Triple, Triple);                                             \
    template TensorT<T> conv3d_transpose<T>(const TensorT<T>&, const TensorT<T>&,              \
                                            const TensorT<T>&, Triple, Triple);                \
    template TensorT<T> maxpool2d<T>(const TensorT<T>&, int64_t, int64_t);                     \
    template TensorT<T> maxpool3d<T>(const TensorT<T>&, Triple);                               \
    template struct Conv2dLayer<T>;                                                            \
    template struct Conv3dLayer<T>;                                                            \
    template struct Conv3dTransposeLayer<T>;                                                   \
    template struct Conv2dTransposeLayer<T>;

PERCSEG_INSTANTIATE_CONV(float)
PERCSEG_INSTANTIATE_CONV(double)

#undef PERCSEG_INSTANTIATE_CONV

}  // namespace percseg
