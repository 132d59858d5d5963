// Dense tensor storage plus the flat compute kernels (GEMM, im2col/col2im)
// the layer engine is built on. Scalar type is a template parameter: float
// for production storage, double for the high-precision gradient-check mode.
//
// Determinism contract: every kernel visits elements in a fixed order, so
// results are bitwise reproducible for fixed inputs. Reductions are never
// split across threads.
#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "inkstone/common.hpp"

namespace inkstone::nn {

struct shape_mismatch : error {
    using error::error;
};

template <class T>
struct tensor {
    std::vector<int> shape;
    std::vector<T> data;

    tensor() = default;
    explicit tensor(std::vector<int> s) : shape(std::move(s)) { data.assign(numel_of(shape), T(0)); }

    static std::size_t numel_of(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) n *= std::size_t(d);
        return n;
    }

    std::size_t numel() const { return data.size(); }
    bool empty() const { return data.empty(); }

    T* ptr() { return data.data(); }
    const T* ptr() const { return data.data(); }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    tensor<U> cast() const {
        tensor<U> out;
        out.shape = shape;
        out.data.resize(data.size());
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
        return out;
    }

    bool same_shape(const tensor& o) const { return shape == o.shape; }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
    return r + "]";
}

namespace kernels {

// C[M,N] += A[M,K] * B[K,N], all row-major. The k-unrolled ikj loop keeps the
// inner loop over contiguous C/B rows, which the compiler vectorizes without
// reassociating any reduction.
template <class T>
void gemm_acc(int M, int N, int K, const T* A, const T* B, T* C) {
    for (int i = 0; i < M; ++i) {
        T* c = C + std::size_t(i) * N;
        const T* a_row = A + std::size_t(i) * K;
        int k = 0;
        for (; k + 4 <= K; k += 4) {
            const T a0 = a_row[k], a1 = a_row[k + 1], a2 = a_row[k + 2], a3 = a_row[k + 3];
            const T* b0 = B + std::size_t(k) * N;
            const T* b1 = b0 + N;
            const T* b2 = b1 + N;
            const T* b3 = b2 + N;
            for (int j = 0; j < N; ++j) c[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
        }
        for (; k < K; ++k) {
            const T a = a_row[k];
            const T* b = B + std::size_t(k) * N;
            for (int j = 0; j < N; ++j) c[j] += a * b[j];
        }
    }
}

template <class T>
void transpose(int rows, int cols, const T* in, T* out) {
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) out[std::size_t(j) * rows + i] = in[std::size_t(i) * cols + j];
}

// 3x3 kernel, 1 px zero padding, stride s.
inline int conv_out_dim(int in, int stride) { return (in + 2 - 3) / stride + 1; }

// col[(ci*9 + t), (oy*ow + ox)] = x[ci][oy*s + ky - 1][ox*s + kx - 1], t = ky*3+kx
template <class T>
void im2col_3x3(const T* x, int c, int h, int w, int stride, T* col) {
    const int oh = conv_out_dim(h, stride), ow = conv_out_dim(w, stride);
    const std::size_t plane = std::size_t(h) * w;
    const std::size_t opix = std::size_t(oh) * ow;
    for (int ci = 0; ci < c; ++ci) {
        const T* xp = x + ci * plane;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                T* crow = col + (std::size_t(ci) * 9 + ky * 3 + kx) * opix;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    T* dst = crow + std::size_t(oy) * ow;
                    if (iy < 0 || iy >= h) {
                        for (int ox = 0; ox < ow; ++ox) dst[ox] = T(0);
                        continue;
                    }
                    const T* src = xp + std::size_t(iy) * w;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        dst[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
    }
}

// Scatter-add of dcol (same layout as im2col output) back into dx.
template <class T>
void col2im_3x3(const T* dcol, int c, int h, int w, int stride, T* dx) {
    const int oh = conv_out_dim(h, stride), ow = conv_out_dim(w, stride);
    const std::size_t plane = std::size_t(h) * w;
    const std::size_t opix = std::size_t(oh) * ow;
    for (int ci = 0; ci < c; ++ci) {
        T* xp = dx + ci * plane;
        for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
                const T* crow = dcol + (std::size_t(ci) * 9 + ky * 3 + kx) * opix;
                for (int oy = 0; oy < oh; ++oy) {
                    const int iy = oy * stride + ky - 1;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = xp + std::size_t(iy) * w;
                    const T* src = crow + std::size_t(oy) * ow;
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride + kx - 1;
                        if (ix >= 0 && ix < w) dst[ix] += src[ox];
                    }
                }
            }
    }
}

// im2row: rows are output pixels, columns the ci*9 taps (transpose of im2col).
// Used for the weight-gradient GEMM so its inner loop stays contiguous.
template <class T>
void im2row_3x3(const T* x, int c, int h, int w, int stride, T* row) {
    const int oh = conv_out_dim(h, stride), ow = conv_out_dim(w, stride);
    const int taps = c * 9;
    for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
            T* dst = row + (std::size_t(oy) * ow + ox) * taps;
            for (int ci = 0; ci < c; ++ci) {
                const T* xp = x + std::size_t(ci) * h * w;
                for (int ky = 0; ky < 3; ++ky) {
                    const int iy = oy * stride + ky - 1;
                    for (int kx = 0; kx < 3; ++kx) {
                        const int ix = ox * stride + kx - 1;
                        dst[ci * 9 + ky * 3 + kx] =
                            (iy >= 0 && iy < h && ix >= 0 && ix < w) ? xp[std::size_t(iy) * w + ix] : T(0);
                    }
                }
            }
        }
}

}  // namespace kernels

}  // namespace inkstone::nn
