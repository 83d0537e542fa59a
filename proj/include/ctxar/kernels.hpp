#pragma once

#include <cstddef>
#include <cstdint>
#include <span>

namespace ctxar::kernels {

// c[M,N] (+)= a[M,K] * b[K,N]; optional transposes refer to the stored operand.
// All matrices are row-major and contiguous.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n,
          bool trans_a, bool trans_b, bool accumulate);

// out[i] += w * x[i]
template <typename T>
void axpy(T w, const T* x, T* out, std::size_t n);

// out[j] = (sum_c q[c] * cols[c * ld + j]) * scale for j < n, summed in
// ascending c. `cols` is a transposed operand, so one call scores a whole
// range of keys; each entry's arithmetic is independent of n.
template <typename T>
void dot_cols(const T* q, const T* cols, std::size_t ld, std::size_t n, std::size_t len, T scale, T* out);

// dst[c * rows + r] = src[r * cols + c]
template <typename T>
void transpose(const T* src, std::size_t rows, std::size_t cols, T* dst);

// out += sum of w[i] * (rows + j * stride)[0:len] over keys j in the half-open
// ranges [bounds[0], bounds[1]), [bounds[2], bounds[3]), ...; i counts keys in
// order. Partial sums are split by j mod 4, so adding
// zero-weight keys never changes the result.
template <typename T>
void weighted_sum_ranges(const T* w, std::span<const std::size_t> bounds, const T* rows, std::size_t stride,
                         std::size_t len, T* out);

// In-place softmax of `row` restricted to `visible`; invisible entries become 0.
// Uses a -inf sentinel before max subtraction. Throws on a fully masked row.
template <typename T>
void masked_softmax_row(std::span<T> row, std::span<const std::uint8_t> visible);

#define CTXAR_KERNELS_EXTERN(T)                                                                     \
    extern template void gemm<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t,    \
                                 bool, bool, bool);                                                 \
    extern template void axpy<T>(T, const T*, T*, std::size_t);                                     \
    extern template void dot_cols<T>(const T*, const T*, std::size_t, std::size_t, std::size_t, T, T*); \
    extern template void transpose<T>(const T*, std::size_t, std::size_t, T*);                      \
    extern template void weighted_sum_ranges<T>(const T*, std::span<const std::size_t>, const T*, std::size_t, \
                                                std::size_t, T*);                                  \
    extern template void masked_softmax_row<T>(std::span<T>, std::span<const std::uint8_t>);

CTXAR_KERNELS_EXTERN(float)
CTXAR_KERNELS_EXTERN(double)

#undef CTXAR_KERNELS_EXTERN

}  // namespace ctxar::kernels
