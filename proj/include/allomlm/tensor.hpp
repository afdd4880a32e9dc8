#ifndef ALLOMLM_TENSOR_HPP
#define ALLOMLM_TENSOR_HPP

#include <cassert>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace allomlm {

/// Dense row-major matrix.
template <typename T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix&) const = default;
};

template <typename T>
double dot(std::span<const T> a, std::span<const T> b) {
    assert(a.size() == b.size());
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return s;
}

/// Cosine similarity; 0 when either vector has zero norm.
template <typename T>
double cosine(std::span<const T> a, std::span<const T> b) {
    const double aa = dot(a, a);
    const double bb = dot(b, b);
    if (aa == 0.0 || bb == 0.0) {
        return 0.0;
    }
    // single sqrt of the product
    return std::clamp(dot(a, b) / std::sqrt(aa * bb), -1.0, 1.0);
}

namespace kernel {

// Small dense kernels used by the encoder. All buffers are row-major and
// results are accumulated (+=) into the output.

/// out[n x m] += a[n x k] * b[k x m]
template <typename T>
void gemm_nn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        T* o = out + i * m;
        const T* ar = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ar[p];
            const T* br = b + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += av * br[j];
            }
        }
    }
}

/// out[n x m] += a[n x k] * b[m x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* ar = a + i * k;
        for (std::size_t j = 0; j < m; ++j) {
            const T* br = b + j * k;
            T s{};
            for (std::size_t p = 0; p < k; ++p) {
                s += ar[p] * br[p];
            }
            out[i * m + j] += s;
        }
    }
}

/// out[k x m] += a[n x k]^T * b[n x m]
template <typename T>
void gemm_tn(const T* a, const T* b, T* out, std::size_t n, std::size_t k, std::size_t m) {
    for (std::size_t i = 0; i < n; ++i) {
        const T* ar = a + i * k;
        const T* br = b + i * m;
        for (std::size_t p = 0; p < k; ++p) {
            const T av = ar[p];
            T* o = out + p * m;
            for (std::size_t j = 0; j < m; ++j) {
                o[j] += av * br[j];
            }
        }
    }
}

} // namespace kernel

} // namespace allomlm

#endif
