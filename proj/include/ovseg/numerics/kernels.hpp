#pragma once

// Data-parallel inner loops. Every kernel has a portable scalar reference and
// an AVX2+FMA variant; the active table is chosen once at startup from CPUID
// and can be pinned with OVSEG_ISA=scalar|avx2 or set_isa().
//
// All matrices are dense row-major with no padding.

#include <cstddef>
#include <string_view>

namespace ovseg::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  /// c[m x n] (+)= a[m x k] * b[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c, bool accumulate);
  /// c[m x n] (+)= a[m x k] * b[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                  double* c, bool accumulate);
  double (*dot)(const double* x, const double* y, std::size_t n);
  /// y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
};

const KernelTable& scalar_table();
/// Null when the library was built without AVX2 support.
const KernelTable* avx2_table();

bool isa_supported(Isa isa);
Isa active_isa();
/// Throws ContractError when the ISA is unsupported on this CPU.
void set_isa(Isa isa);
std::string_view isa_name(Isa isa);

const KernelTable& active();

inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate = false) {
  active().gemm_nn(m, n, k, a, b, c, accumulate);
}
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
                    double* c, bool accumulate = false) {
  active().gemm_nt(m, n, k, a, b, c, accumulate);
}
/// c[m x n] (+)= a[k x m]^T * b[k x n]; packs a^T then runs gemm_nn.
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate = false);

inline double dot(const double* x, const double* y, std::size_t n) { return active().dot(x, y, n); }
inline void axpy(double alpha, const double* x, double* y, std::size_t n) {
  active().axpy(alpha, x, y, n);
}

}  // namespace ovseg::kernels
