#include "repneuron/kernels.hpp"

#include <cstring>

namespace repneuron::kernels {

namespace {

// Eight doubles; one AVX-512 register, or two AVX2 registers.
typedef double Vec8 __attribute__((vector_size(64)));

constexpr std::size_t kLanes = 8;
constexpr std::size_t kColBlock = 2 * kLanes;
constexpr int kRowBlock = 4;

inline Vec8 Load(const double* p) {
  Vec8 v;
  std::memcpy(&v, p, sizeof(v));
  return v;
}

inline void Store(double* p, Vec8 v) { std::memcpy(p, &v, sizeof(v)); }

inline Vec8 Broadcast(double x) { return Vec8{x, x, x, x, x, x, x, x}; }

// Register-tiled block of `Rows` output rows. Each output element is
// acc = 0; acc = acc + a[p] * w[p] for p = 0..k-1, for every value of Rows and
// in both the vector and the scalar column paths.
template <int Rows, bool Accumulate>
void RowBlock(const double* a, std::size_t k, const double* w, std::size_t n,
              const double* bias, double* c) {
  std::size_t j0 = 0;
  for (; j0 + kColBlock <= n; j0 += kColBlock) {
    Vec8 acc0[Rows], acc1[Rows];
    for (int r = 0; r < Rows; ++r) {
      acc0[r] = Broadcast(0.0);
      acc1[r] = Broadcast(0.0);
    }
    for (std::size_t p = 0; p < k; ++p) {
      const Vec8 w0 = Load(w + p * n + j0);
      const Vec8 w1 = Load(w + p * n + j0 + kLanes);
      for (int r = 0; r < Rows; ++r) {
        const Vec8 av = Broadcast(a[r * k + p]);
        acc0[r] = acc0[r] + av * w0;
        acc1[r] = acc1[r] + av * w1;
      }
    }
    for (int r = 0; r < Rows; ++r) {
      double* cr = c + r * n + j0;
      if constexpr (Accumulate) {
        Store(cr, Load(cr) + acc0[r]);
        Store(cr + kLanes, Load(cr + kLanes) + acc1[r]);
      } else if (bias != nullptr) {
        Store(cr, acc0[r] + Load(bias + j0));
        Store(cr + kLanes, acc1[r] + Load(bias + j0 + kLanes));
      } else {
        Store(cr, acc0[r]);
        Store(cr + kLanes, acc1[r]);
      }
    }
  }
  for (std::size_t j = j0; j < n; ++j) {
    for (int r = 0; r < Rows; ++r) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc = acc + a[r * k + p] * w[p * n + j];
      if constexpr (Accumulate) {
        c[r * n + j] += acc;
      } else {
        c[r * n + j] = bias != nullptr ? acc + bias[j] : acc;
      }
    }
  }
}

template <bool Accumulate>
void Dispatch(const double* a, std::size_t m, std::size_t k, const double* w,
              std::size_t n, const double* bias, double* c) {
  std::size_t i = 0;
  for (; i + kRowBlock <= m; i += kRowBlock) {
    RowBlock<kRowBlock, Accumulate>(a + i * k, k, w, n, bias, c + i * n);
  }
  for (; i < m; ++i) {
    RowBlock<1, Accumulate>(a + i * k, k, w, n, bias, c + i * n);
  }
}

}  // namespace

void MatMul(const double* a, std::size_t m, std::size_t k, const double* w,
            std::size_t n, const double* bias, double* c) {
  Dispatch<false>(a, m, k, w, n, bias, c);
}

void MatMulAccumulate(const double* a, std::size_t m, std::size_t k,
                      const double* w, std::size_t n, double* c) {
  Dispatch<true>(a, m, k, w, n, nullptr, c);
}

void Transpose(const double* in, std::size_t rows, std::size_t cols,
               double* out) {
  constexpr std::size_t kTile = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t i1 = i0 + kTile < rows ? i0 + kTile : rows;
      const std::size_t j1 = j0 + kTile < cols ? j0 + kTile : cols;
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * rows + i] = in[i * cols + j];
      }
    }
  }
}

}  // namespace repneuron::kernels
