#pragma once

#include <cstddef>

namespace repneuron::kernels {

// Dense row-major products used by the model. Every output element is
// accumulated over k in increasing order starting from zero, independent of
// how many rows are processed together, so a row computed alone is
// bit-identical to the same row computed inside a larger batch.

// c[m x n] = a[m x k] * w[k x n] (+ bias[n] if non-null)
void MatMul(const double* a, std::size_t m, std::size_t k, const double* w,
            std::size_t n, const double* bias, double* c);

// c[m x n] += a[m x k] * w[k x n]
void MatMulAccumulate(const double* a, std::size_t m, std::size_t k,
                      const double* w, std::size_t n, double* c);

// out[cols x rows] = in[rows x cols]^T
void Transpose(const double* in, std::size_t rows, std::size_t cols,
               double* out);

}  // namespace repneuron::kernels
