#include <cstdlib>
#include <string>
#include <vector>

#include "ovseg/errors.hpp"
#include "ovseg/numerics/kernels.hpp"

namespace ovseg::kernels {

#ifndef OVSEG_HAVE_AVX2
const KernelTable* avx2_table() { return nullptr; }
#endif

namespace {

bool cpu_has_avx2() {
#if defined(OVSEG_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
  __builtin_cpu_init();
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

Isa initial_isa() {
  if (const char* env = std::getenv("OVSEG_ISA")) {
    const std::string v(env);
    if (v == "scalar") return Isa::scalar;
    if (v == "avx2" && cpu_has_avx2()) return Isa::avx2;
  }
  return cpu_has_avx2() ? Isa::avx2 : Isa::scalar;
}

Isa& current() {
  static Isa isa = initial_isa();
  return isa;
}

}  // namespace

bool isa_supported(Isa isa) { return isa == Isa::scalar || (avx2_table() && cpu_has_avx2()); }

Isa active_isa() { return current(); }

void set_isa(Isa isa) {
  if (!isa_supported(isa)) throw ContractError("ISA not supported on this CPU: " + std::string(isa_name(isa)));
  current() = isa;
}

std::string_view isa_name(Isa isa) { return isa == Isa::avx2 ? "avx2" : "scalar"; }

const KernelTable& active() { return current() == Isa::avx2 ? *avx2_table() : scalar_table(); }

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b,
             double* c, bool accumulate) {
  thread_local std::vector<double> packed;
  packed.resize(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) packed[i * k + p] = a[p * m + i];
  gemm_nn(m, n, k, packed.data(), b, c, accumulate);
}

}  // namespace ovseg::kernels
