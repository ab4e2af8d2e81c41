#include "ovseg/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "ovseg/errors.hpp"

namespace ovseg {

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_diff_check: eps must be positive");
  const bool had_flag = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();

  std::vector<double> analytic;
  {
    GradTape tape;
    TapeScope scope(tape);
    Tensor loss = f(x);
    tape.backward(loss);
    const auto g = x.grad();
    analytic.assign(g.begin(), g.end());
  }
  x.zero_grad();

  auto eval = [&] {
    NoGradScope off;
    return f(x).item();
  };

  double worst = 0.0;
  auto values = x.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double orig = values[i];
    values[i] = orig + eps;
    const double fp = eval();
    values[i] = orig - eps;
    const double fm = eval();
    values[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  x.set_requires_grad(had_flag);
  return worst;
}

}  // namespace ovseg
