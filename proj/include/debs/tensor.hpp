#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "debs/common.hpp"
#include "debs/rng.hpp"

#ifdef DEBS_HAVE_CBLAS
#include <cblas.h>
#endif

namespace debs {

using shape_t = std::vector<std::size_t>;

inline std::size_t shape_numel(const shape_t& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const shape_t& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major array of T. Gradients live next to values in graph nodes;
// the tensor itself is just shape + contiguous storage.
template <class T>
struct tensor {
  shape_t shape;
  std::vector<T> data;

  tensor() = default;
  explicit tensor(shape_t s) : shape(std::move(s)), data(shape_numel(shape), T{0}) {}
  tensor(shape_t s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    require(data.size() == shape_numel(shape), "tensor: data size does not match shape");
  }

  // 1-d tensor from explicit values. Separate from the shape constructor so
  // extents and values can never be confused at a call site.
  static tensor of(std::initializer_list<T> v) { return tensor({v.size()}, std::vector<T>(v)); }

  std::size_t numel() const { return data.size(); }
  bool empty() const { return data.empty(); }
  std::size_t ndim() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape[i]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }

  static tensor zeros(shape_t s) { return tensor(std::move(s)); }
  static tensor full(shape_t s, T v) {
    tensor t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static tensor ones(shape_t s) { return full(std::move(s), T{1}); }
  static tensor scalar(T v) { return tensor({1}, {v}); }

  bool same_shape(const tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T& v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

template <class T>
bool operator==(const tensor<T>& a, const tensor<T>& b) {
  return a.shape == b.shape && a.data == b.data;
}

template <class T>
tensor<T> random_normal(shape_t s, rng& r, T stddev) {
  tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(r.normal()) * stddev;
  return t;
}

template <class T>
tensor<T> random_truncated_normal(shape_t s, rng& r, T stddev) {
  tensor<T> t(std::move(s));
  for (auto& v : t.data) v = static_cast<T>(r.truncated_normal(static_cast<double>(stddev)));
  return t;
}

// ---------------------------------------------------------------------------
// Matmul kernels. Output is always [m, n] with contraction length k.
//   nn: a[m,k] * b[k,n]      nt: a[m,k] * b[n,k]^T      tn: a[k,m]^T * b[k,n]
// beta is 0 (assign) or 1 (accumulate). float/double route through CBLAS
// when available; the loop fallback keeps the same fixed reduction order
// semantics (single-threaded, no atomics) either way.
// ---------------------------------------------------------------------------

#ifdef DEBS_HAVE_CBLAS
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t m, std::size_t n,
                 std::size_t k, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                 float beta, float* c) {
  cblas_sgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0f, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(n));
}
inline void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, std::size_t m, std::size_t n,
                 std::size_t k, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                 double beta, double* c) {
  cblas_dgemm(CblasRowMajor, ta, tb, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), 1.0, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(n));
}
#endif

template <class T>
void matmul_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, T beta) {
#ifdef DEBS_HAVE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm(CblasNoTrans, CblasNoTrans, m, n, k, a, k, b, n, beta, c);
    return;
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    T* ci = c + i * n;
    if (beta == T{0})
      for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ai[p];
      const T* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

template <class T>
void matmul_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, T beta) {
#ifdef DEBS_HAVE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm(CblasNoTrans, CblasTrans, m, n, k, a, k, b, k, beta, c);
    return;
  }
#endif
  for (std::size_t i = 0; i < m; ++i) {
    const T* ai = a + i * k;
    T* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* bj = b + j * k;
      T acc{0};
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = beta == T{0} ? acc : ci[j] + acc;
    }
  }
}

template <class T>
void matmul_tn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, T beta) {
#ifdef DEBS_HAVE_CBLAS
  if constexpr (std::is_same_v<T, float> || std::is_same_v<T, double>) {
    gemm(CblasTrans, CblasNoTrans, m, n, k, a, m, b, n, beta, c);
    return;
  }
#endif
  if (beta == T{0})
    for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t p = 0; p < k; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

#ifdef DEBS_HAVE_CBLAS
extern "C" void openblas_set_num_threads(int) __attribute__((weak));
#endif

// Force single-threaded BLAS so reduction order is fixed run to run.
inline void pin_blas_threads() {
#ifdef DEBS_HAVE_CBLAS
  if (openblas_set_num_threads) openblas_set_num_threads(1);
#endif
}

}  // namespace debs
