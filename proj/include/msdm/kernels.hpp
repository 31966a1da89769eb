#pragma once

// Dense double-precision inner loops shared by the tensor library and the
// metrics code. Each kernel has a scalar reference implementation and, on
// x86-64, an AVX2/FMA variant. The variant is chosen once at startup from
// CPUID and can be overridden (tests pin the scalar path to compare).

#include <cstddef>
#include <string_view>

namespace msdm::kernels {

enum class Backend { Scalar, Avx2 };

struct KernelTable {
  // C[m x n] = A[m x k] * B[k x n] (+ C when accumulate). Row-major, packed.
  void (*gemm)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
               double* c, bool accumulate);
  double (*dot)(const double* x, const double* y, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // sum_i (x_i - y_i)^2
  double (*squared_distance)(const double* x, const double* y, std::size_t n);
};

const KernelTable& scalar_table();
// nullptr when the translation unit was not built or the CPU lacks AVX2+FMA.
const KernelTable* avx2_table();

bool cpu_has_avx2();
Backend active_backend();
void set_backend(Backend b);  // throws ContractError if unavailable
std::string_view backend_name(Backend b);

const KernelTable& active();

// RAII pin for tests and benchmarks.
class ScopedBackend {
 public:
  explicit ScopedBackend(Backend b) : previous_(active_backend()) { set_backend(b); }
  ~ScopedBackend() { set_backend(previous_); }
  ScopedBackend(const ScopedBackend&) = delete;
  ScopedBackend& operator=(const ScopedBackend&) = delete;

 private:
  Backend previous_;
};

inline void gemm(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                 double* c, bool accumulate = false) {
  active().gemm(m, n, k, a, b, c, accumulate);
}
inline double dot(const double* x, const double* y, std::size_t n) { return active().dot(x, y, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}
inline double squared_distance(const double* x, const double* y, std::size_t n) {
  return active().squared_distance(x, y, n);
}

// C[m x n] (+)= A[m x k] * B[n x k]^T and C[m x n] (+)= A[k x m]^T * B[k x n].
// Both transpose into scratch and defer to gemm.
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate = false);
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate = false);
void transpose(std::size_t rows, std::size_t cols, const double* src, double* dst);

}  // namespace msdm::kernels
