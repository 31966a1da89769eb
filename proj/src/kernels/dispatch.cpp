#include <algorithm>
#include <atomic>
#include <vector>

#include "kernels_impl.hpp"
#include "msdm/errors.hpp"

namespace msdm::kernels {

namespace {

Backend detect() { return avx2_table() != nullptr ? Backend::Avx2 : Backend::Scalar; }

std::atomic<Backend>& current() {
  static std::atomic<Backend> b{detect()};
  return b;
}

}  // namespace

const KernelTable& scalar_table() { return detail::kScalarTable; }

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable* avx2_table() {
#if defined(MSDM_HAVE_AVX2_TU)
  static const bool ok = cpu_has_avx2();
  return ok ? &detail::kAvx2Table : nullptr;
#else
  return nullptr;
#endif
}

Backend active_backend() { return current().load(std::memory_order_relaxed); }

void set_backend(Backend b) {
  if (b == Backend::Avx2 && avx2_table() == nullptr) {
    throw ContractError("AVX2 kernels are not available on this CPU/build");
  }
  current().store(b, std::memory_order_relaxed);
}

std::string_view backend_name(Backend b) { return b == Backend::Avx2 ? "avx2" : "scalar"; }

const KernelTable& active() {
  if (active_backend() == Backend::Avx2) return *avx2_table();
  return detail::kScalarTable;
}

void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst) {
  constexpr std::size_t kTile = 16;
  for (std::size_t i0 = 0; i0 < rows; i0 += kTile) {
    const std::size_t i1 = std::min(rows, i0 + kTile);
    for (std::size_t j0 = 0; j0 < cols; j0 += kTile) {
      const std::size_t j1 = std::min(cols, j0 + kTile);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) dst[j * rows + i] = src[i * cols + j];
      }
    }
  }
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  thread_local std::vector<double> scratch;
  scratch.resize(k * n);
  transpose(n, k, b, scratch.data());
  gemm(m, n, k, a, scratch.data(), c, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  thread_local std::vector<double> scratch;
  scratch.resize(m * k);
  transpose(k, m, a, scratch.data());
  gemm(m, n, k, scratch.data(), b, c, accumulate);
}

}  // namespace msdm::kernels
