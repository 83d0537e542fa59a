#include "ctxar/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "ctxar/error.hpp"

namespace ctxar::kernels {

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool trans_a,
          bool trans_b, bool accumulate) {
    using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using ConstMap = Eigen::Map<const RowMat>;
    using Map = Eigen::Map<RowMat>;

    const auto M = static_cast<Eigen::Index>(m);
    const auto K = static_cast<Eigen::Index>(k);
    const auto N = static_cast<Eigen::Index>(n);
    Map C(c, M, N);
    if (m == 0 || n == 0) return;
    if (k == 0) {
        if (!accumulate) C.setZero();
        return;
    }

    // Stored shapes: a is [M,K] or [K,M]; b is [K,N] or [N,K].
    ConstMap A(a, trans_a ? K : M, trans_a ? M : K);
    ConstMap B(b, trans_b ? N : K, trans_b ? K : N);
    auto run = [&](const auto& lhs, const auto& rhs) {
        if (accumulate) {
            C.noalias() += lhs * rhs;
        } else {
            C.noalias() = lhs * rhs;
        }
    };
    if (trans_a && trans_b) {
        run(A.transpose(), B.transpose());
    } else if (trans_a) {
        run(A.transpose(), B);
    } else if (trans_b) {
        run(A, B.transpose());
    } else {
        run(A, B);
    }
}

template <typename T>
[[gnu::noinline]] void dot_cols(const T* q, const T* cols, std::size_t ld, std::size_t n, std::size_t len, T scale,
                                T* out) {
    std::fill(out, out + n, T{0});
    for (std::size_t c = 0; c < len; ++c) {
        const T qc = q[c];
        const T* col = cols + c * ld;
        for (std::size_t j = 0; j < n; ++j) out[j] += qc * col[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[j] *= scale;
}

template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst) {
    using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    Eigen::Map<RowMat>(dst, static_cast<Eigen::Index>(cols), static_cast<Eigen::Index>(rows)) =
        Eigen::Map<const RowMat>(src, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols)).transpose();
}

template <typename T>
[[gnu::noinline]] void weighted_sum_ranges(const T* w, std::span<const std::size_t> bounds, const T* rows,
                                           std::size_t stride, std::size_t len, T* out) {
    constexpr std::size_t chunk = 64;
    T acc[4][chunk];
    for (std::size_t c0 = 0; c0 < len; c0 += chunk) {
        const std::size_t cn = std::min(chunk, len - c0);
        for (auto& a : acc) std::fill(a, a + cn, T{0});
        const T* wi = w;
        for (std::size_t b = 0; b + 1 < bounds.size(); b += 2) {
            for (std::size_t j = bounds[b]; j < bounds[b + 1]; ++j, ++wi) {
                T* a = acc[j & 3];
                const T wj = *wi;
                const T* r = rows + j * stride + c0;
                for (std::size_t c = 0; c < cn; ++c) a[c] += wj * r[c];
            }
        }
        for (std::size_t c = 0; c < cn; ++c) out[c0 + c] += (acc[0][c] + acc[1][c]) + (acc[2][c] + acc[3][c]);
    }
}

template <typename T>
void axpy(T w, const T* x, T* out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) out[i] += w * x[i];
}

template <typename T>
void masked_softmax_row(std::span<T> row, std::span<const std::uint8_t> visible) {
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();
    T max_v = neg_inf;
    for (std::size_t j = 0; j < row.size(); ++j) {
        if (!visible[j]) row[j] = neg_inf;
        if (row[j] > max_v) max_v = row[j];
    }
    if (max_v == neg_inf) {
        throw Error(ErrorCode::contract, "masked softmax row has no visible column");
    }
    T total{0};
    for (std::size_t j = 0; j < row.size(); ++j) {
        row[j] = visible[j] ? std::exp(row[j] - max_v) : T{0};
        total += row[j];
    }
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = row[j] / total;
}

#define CTXAR_KERNELS_INSTANTIATE(T)                                                               \
    template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t, bool,    \
                          bool, bool);                                                             \
    template void axpy<T>(T, const T*, T*, std::size_t);                                           \
    template void dot_cols<T>(const T*, const T*, std::size_t, std::size_t, std::size_t, T, T*);   \
    template void transpose<T>(const T*, std::size_t, std::size_t, T*);                            \
    template void weighted_sum_ranges<T>(const T*, std::span<const std::size_t>, const T*, std::size_t, \
                                         std::size_t, T*);                                          \
    template void masked_softmax_row<T>(std::span<T>, std::span<const std::uint8_t>);

CTXAR_KERNELS_INSTANTIATE(float)
CTXAR_KERNELS_INSTANTIATE(double)

}  // namespace ctxar::kernels
