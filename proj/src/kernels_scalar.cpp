#include "ufedgan/kernels.hpp"

namespace ufed::kernels {

namespace {

template <typename T>
void add_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

template <typename T>
void sub_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

template <typename T>
void mul_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

template <typename T>
void mul_acc_k(const T* a, const T* b, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] += a[i] * b[i];
}

template <typename T>
void axpy_k(T alpha, const T* x, T* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_k(T alpha, const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

template <typename T>
T dot_k(const T* a, const T* b, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

template <typename T>
T sum_k(const T* x, std::size_t n) {
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
void relu_k(const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
}

template <typename T>
void leaky_relu_k(T slope, const T* x, T* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] > T(0) ? x[i] : slope * x[i];
}

template <typename T>
void relu_bwd_k(const T* x, const T* gout, T* gin, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gin[i] += x[i] > T(0) ? gout[i] : T(0);
}

template <typename T>
void leaky_relu_bwd_k(T slope, const T* x, const T* gout, T* gin, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) gin[i] += x[i] > T(0) ? gout[i] : slope * gout[i];
}

// C += A*B. Broadcast-a/stream-b form keeps the inner loop contiguous.
template <typename T>
void gemm_nn_k(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

template <typename T>
void gemm_nt_k(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

template <typename T>
void gemm_tn_k(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const T* arow = a + p * m;
    const T* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = arow[i];
      if (api == T(0)) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
}

template <typename T>
Table<T> make_table() {
  Table<T> t;
  t.add = add_k<T>;
  t.sub = sub_k<T>;
  t.mul = mul_k<T>;
  t.mul_acc = mul_acc_k<T>;
  t.axpy = axpy_k<T>;
  t.scale = scale_k<T>;
  t.dot = dot_k<T>;
  t.sum = sum_k<T>;
  t.relu = relu_k<T>;
  t.leaky_relu = leaky_relu_k<T>;
  t.relu_bwd = relu_bwd_k<T>;
  t.leaky_relu_bwd = leaky_relu_bwd_k<T>;
  t.gemm_nn = gemm_nn_k<T>;
  t.gemm_nt = gemm_nt_k<T>;
  t.gemm_tn = gemm_tn_k<T>;
  return t;
}

}  // namespace

const Table<float>& scalar_table_f32() {
  static const Table<float> t = make_table<float>();
  return t;
}

const Table<double>& scalar_table_f64() {
  static const Table<double> t = make_table<double>();
  return t;
}

}  // namespace ufed::kernels
