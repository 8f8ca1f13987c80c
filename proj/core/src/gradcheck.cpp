#include "kd/gradcheck.hpp"

#include <cmath>

namespace kd {

std::vector<double> finite_difference_gradient(
    const std::function<double()>& f, Tensor& x, double h) {
  if (!(h > 0.0)) throw ValueError("finite difference step must be positive");
  std::vector<double>& v = x.values();
  std::vector<double> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) {
    const double saved = v[i];
    v[i] = saved + h;
    const double fp = f();
    v[i] = saved - h;
    const double fm = f();
    v[i] = saved;
    out[i] = (fp - fm) / (2.0 * h);
  }
  return out;
}

double max_rel_error(const std::vector<double>& a,
                     const std::vector<double>& b, double floor) {
  if (a.size() != b.size())
    throw ShapeError("gradient vectors differ in length");
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double denom =
        std::max({std::fabs(a[i]), std::fabs(b[i]), floor});
    worst = std::max(worst, std::fabs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace kd
