#include "uadi/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "uadi/random.hpp"

namespace uadi {

namespace {
// Central differences cannot resolve slopes below their rounding noise,
// about eps |f| / step; a multiple of that level floors the denominator.
constexpr double kNoiseFactor = 1e5;
constexpr double kRetryAbove = 1e-5;
}  // namespace

GradCheckResult grad_check_leaf(const std::function<Tensor()>& f, Tensor& leaf, double step,
                                std::size_t max_entries, Rng* rng) {
  if (!leaf.requires_grad()) throw std::invalid_argument("grad_check: leaf must require grad");
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");

  double f0a, f0b;
  {
    NoGradGuard guard;
    f0a = f().item();
    f0b = f().item();
  }
  if (f0a != f0b && !(std::isnan(f0a) && std::isnan(f0b)))
    throw std::invalid_argument("grad_check: function is not deterministic");

  leaf.zero_grad();
  Tensor out = f();
  if (out.numel() != 1) throw ShapeError("grad_check: function must return a scalar");
  backward(out);
  const std::vector<double> analytic = leaf.grad();
  leaf.zero_grad();

  std::vector<std::size_t> indices(leaf.numel());
  std::iota(indices.begin(), indices.end(), 0);
  if (indices.size() > max_entries) {
    if (rng) rng->shuffle(indices.begin(), indices.end());
    indices.resize(max_entries);
    std::sort(indices.begin(), indices.end());
  }

  GradCheckResult res;
  NoGradGuard guard;
  auto values = leaf.data();
  auto relative_error = [&](std::size_t i, double h, double& numeric) {
    const double orig = values[i];
    values[i] = orig + h;
    const double fp = f().item();
    values[i] = orig - h;
    const double fm = f().item();
    values[i] = orig;
    numeric = (fp - fm) / (2.0 * h);
    const double a = analytic[i];
    const double floor = kNoiseFactor * std::numeric_limits<double>::epsilon() * std::max(1.0, std::abs(f0a)) / h;
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    return std::isnan(err) ? INFINITY : err;
  };
  for (std::size_t i : indices) {
    double numeric = 0.0;
    double err = relative_error(i, step, numeric);
    if (err > kRetryAbove) {
      // A quotient straddling a relu/abs kink is off at one step but rarely
      // at both; a wrong analytic gradient is off at both.
      double numeric2 = 0.0;
      const double err2 = relative_error(i, step / 4.0, numeric2);
      ++res.retried;
      if (err2 < err) {
        err = err2;
        numeric = numeric2;
      }
    }
    ++res.checked;
    if (err > res.max_relative_error) {
      res.max_relative_error = err;
      res.worst_index = i;
      res.worst_analytic = analytic[i];
      res.worst_numeric = numeric;
    }
  }
  return res;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double step) {
  Tensor leaf = x.clone(true);
  return grad_check_leaf([&] { return f(leaf); }, leaf, step).max_relative_error;
}

}  // namespace uadi
