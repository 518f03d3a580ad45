#include "ufedgan/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <cstring>

#include "ufedgan/common.hpp"

namespace ufed::kernels {

const Table<float>& scalar_table_f32();
const Table<double>& scalar_table_f64();

#if defined(__x86_64__)
const Table<float>& avx2_table_f32();
const Table<double>& avx2_table_f64();
#endif

bool avx2_supported() {
#if defined(__x86_64__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

std::string backend_name(Backend b) {
  return b == Backend::scalar ? "scalar" : "avx2";
}

namespace {

Backend choose_initial() {
  if (const char* env = std::getenv("UFEDGAN_KERNELS")) {
    if (std::strcmp(env, "scalar") == 0) return Backend::scalar;
    if (std::strcmp(env, "avx2") == 0) {
      if (!avx2_supported()) throw ConfigError("UFEDGAN_KERNELS=avx2 but cpu lacks avx2+fma");
      return Backend::avx2;
    }
    if (std::strcmp(env, "auto") != 0)
      throw ConfigError(std::string("unknown UFEDGAN_KERNELS value: ") + env);
  }
  return avx2_supported() ? Backend::avx2 : Backend::scalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> b{choose_initial()};
  return b;
}

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

void force_backend(Backend b) {
  if (b == Backend::avx2 && !avx2_supported())
    throw ConfigError("avx2 backend requested but cpu lacks avx2+fma");
  backend_slot().store(b, std::memory_order_relaxed);
}

template <>
const Table<float>& table_for<float>(Backend b) {
#if defined(__x86_64__)
  if (b == Backend::avx2) return avx2_table_f32();
#else
  if (b == Backend::avx2) throw ConfigError("avx2 backend unavailable on this architecture");
#endif
  return scalar_table_f32();
}

template <>
const Table<double>& table_for<double>(Backend b) {
#if defined(__x86_64__)
  if (b == Backend::avx2) return avx2_table_f64();
#else
  if (b == Backend::avx2) throw ConfigError("avx2 backend unavailable on this architecture");
#endif
  return scalar_table_f64();
}

template <>
const Table<float>& active<float>() {
  return table_for<float>(active_backend());
}

template <>
const Table<double>& active<double>() {
  return table_for<double>(active_backend());
}

}  // namespace ufed::kernels
