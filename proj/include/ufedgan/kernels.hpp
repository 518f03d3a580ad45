#pragma once

#include <cstddef>
#include <string>

// Data-parallel inner loops behind the tensor engine. Every routine exists as
// a scalar reference kernel and, on x86-64, as an AVX2 variant; a table of
// function pointers is selected once at startup (overridable via the
// UFEDGAN_KERNELS environment variable or force_backend()). Elementwise
// kernels are bit-identical across backends; reductions and GEMM reassociate
// and are equivalence-tested against the scalar reference under tolerance.

namespace ufed::kernels {

enum class Backend { scalar, avx2 };

std::string backend_name(Backend b);
bool avx2_supported();

template <typename T>
struct Table {
  // out[i] = a[i] (+,-,*) b[i]
  void (*add)(const T* a, const T* b, T* out, std::size_t n);
  void (*sub)(const T* a, const T* b, T* out, std::size_t n);
  void (*mul)(const T* a, const T* b, T* out, std::size_t n);
  // out[i] += a[i] * b[i]
  void (*mul_acc)(const T* a, const T* b, T* out, std::size_t n);
  // y[i] += alpha * x[i]
  void (*axpy)(T alpha, const T* x, T* y, std::size_t n);
  // out[i] = alpha * x[i]
  void (*scale)(T alpha, const T* x, T* out, std::size_t n);
  T (*dot)(const T* a, const T* b, std::size_t n);
  T (*sum)(const T* x, std::size_t n);
  void (*relu)(const T* x, T* out, std::size_t n);
  void (*leaky_relu)(T slope, const T* x, T* out, std::size_t n);
  // gin[i] += gout[i] * dact(x[i])
  void (*relu_bwd)(const T* x, const T* gout, T* gin, std::size_t n);
  void (*leaky_relu_bwd)(T slope, const T* x, const T* gout, T* gin, std::size_t n);
  // Row-major GEMM, accumulating into C (caller zero-fills when needed).
  // nn: C[MxN] += A[MxK] * B[KxN]
  // nt: C[MxN] += A[MxK] * B[NxK]^T
  // tn: C[MxN] += A[KxM]^T * B[KxN]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
  void (*gemm_tn)(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c);
};

// Active table for the selected backend.
template <typename T>
const Table<T>& active();

// Reference tables, always available (used by the equivalence tests).
template <typename T>
const Table<T>& table_for(Backend b);

Backend active_backend();

// Pin the backend (tests, or reproducing a run on different hardware).
// Throws ConfigError if the backend is unsupported on this machine.
void force_backend(Backend b);

}  // namespace ufed::kernels
