#pragma once

// Dense row-major matrix plus the three GEMM variants the backward passes
// need. Kernels are written so the compiler can vectorize the inner loop.

#include <cassert>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#if defined(__linux__) && __has_include(<malloc.h>)
#include <malloc.h>
#define PHYSAR_HAS_MALLOPT 1
#endif

#include "physar/rng.hpp"

namespace physar {

#ifdef PHYSAR_HAS_MALLOPT
namespace detail {
// Large activation/grad buffers churn every step; keep them on the heap
// instead of round-tripping through mmap.
inline const bool malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 256 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
    return true;
}();
}  // namespace detail
#endif

template <class T>
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<T> data;

    Mat() = default;
    Mat(int r, int c, T fill = T(0)) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {}

    static Mat randn(int r, int c, double std_dev, Rng& rng) {
        Mat m(r, c);
        for (auto& x : m.data) x = static_cast<T>(rng.gauss() * std_dev);
        return m;
    }

    T* row(int i) { return data.data() + static_cast<size_t>(i) * cols; }
    const T* row(int i) const { return data.data() + static_cast<size_t>(i) * cols; }
    T& at(int i, int j) { return data[static_cast<size_t>(i) * cols + j]; }
    T at(int i, int j) const { return data[static_cast<size_t>(i) * cols + j]; }
    int64_t numel() const { return static_cast<int64_t>(rows) * cols; }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    Mat<U> cast() const {
        Mat<U> out(rows, cols);
        for (int64_t i = 0; i < numel(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

// C (m x n) = A (m x k) * B (k x n); accumulate adds into C.
template <class T>
void gemm_nn(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, bool accumulate = false) {
    assert(A.cols == B.rows && C.rows == A.rows && C.cols == B.cols);
    if (!accumulate) C.fill(T(0));
    const int m = A.rows, k = A.cols, n = B.cols;
    for (int i = 0; i < m; ++i) {
        T* __restrict c = C.row(i);
        const T* arow = A.row(i);
        for (int p = 0; p < k; ++p) {
            const T a = arow[p];
            if (a == T(0)) continue;
            const T* __restrict b = B.row(p);
            for (int j = 0; j < n; ++j) c[j] += a * b[j];
        }
    }
}

template <class T>
Mat<T> transposed(const Mat<T>& B) {
    Mat<T> bt(B.cols, B.rows);
    constexpr int blk = 32;
    for (int i0 = 0; i0 < B.rows; i0 += blk)
        for (int j0 = 0; j0 < B.cols; j0 += blk) {
            const int i1 = std::min(B.rows, i0 + blk);
            const int j1 = std::min(B.cols, j0 + blk);
            for (int i = i0; i < i1; ++i)
                for (int j = j0; j < j1; ++j) bt.at(j, i) = B.at(i, j);
        }
    return bt;
}

// C (m x n) = A (m x k) * B^T, with B stored (n x k). A dot-product inner
// loop will not vectorize under strict FP semantics, so transpose once and
// reuse the streaming kernel.
template <class T>
void gemm_nt(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, bool accumulate = false) {
    assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows);
    const Mat<T> bt = transposed(B);
    gemm_nn(A, bt, C, accumulate);
}

// C = A * B^T keeping only columns j <= i (causal attention scores);
// rows above the diagonal stay zero.
template <class T>
void gemm_nt_causal(const Mat<T>& A, const Mat<T>& B, Mat<T>& C) {
    assert(A.cols == B.cols && C.rows == A.rows && C.cols == B.rows && A.rows == B.rows);
    const Mat<T> bt = transposed(B);
    C.fill(T(0));
    for (int i = 0; i < A.rows; ++i) {
        T* __restrict c = C.row(i);
        const T* arow = A.row(i);
        const int lim = i + 1;
        for (int p = 0; p < A.cols; ++p) {
            const T a = arow[p];
            const T* __restrict b = bt.row(p);
            for (int j = 0; j < lim; ++j) c[j] += a * b[j];
        }
    }
}

// C (m x n) = A^T * B, with A stored (k x m), B stored (k x n).
template <class T>
void gemm_tn(const Mat<T>& A, const Mat<T>& B, Mat<T>& C, bool accumulate = false) {
    assert(A.rows == B.rows && C.rows == A.cols && C.cols == B.cols);
    if (!accumulate) C.fill(T(0));
    const int k = A.rows, m = A.cols, n = B.cols;
    for (int p = 0; p < k; ++p) {
        const T* arow = A.row(p);
        const T* __restrict brow = B.row(p);
        for (int i = 0; i < m; ++i) {
            const T a = arow[i];
            if (a == T(0)) continue;
            T* __restrict c = C.row(i);
            for (int j = 0; j < n; ++j) c[j] += a * brow[j];
        }
    }
}

template <class T>
void axpy(T alpha, const Mat<T>& x, Mat<T>& y) {
    assert(x.same_shape(y));
    const int64_t n = x.numel();
    for (int64_t i = 0; i < n; ++i) y.data[i] += alpha * x.data[i];
}

template <class T>
double l2_norm(const Mat<T>& m) {
    double s = 0;
    for (const T v : m.data) s += static_cast<double>(v) * static_cast<double>(v);
    return std::sqrt(s);
}

}  // namespace physar
