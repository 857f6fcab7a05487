#pragma once

#include <cmath>
#include <functional>
#include <utility>

namespace hbias {

struct ScalarMinimum {
  double x = 0.0;
  double fx = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Brent's bracketed minimizer: golden-section steps with parabolic
/// interpolation when it is safe. Stops once the bracket around the best
/// point is within rel_tol * |x| + abs_tol.
template <class F>
ScalarMinimum brent_minimize(F&& f, double a, double b, double rel_tol = 1e-10, double abs_tol = 1e-14,
                             int max_iter = 200) {
  const double golden = 0.5 * (3.0 - std::sqrt(5.0));
  if (a > b) std::swap(a, b);
  double x = a + golden * (b - a);
  double w = x, v = x;
  double fx = f(x);
  double fw = fx, fv = fx;
  double d = 0.0, e = 0.0;

  ScalarMinimum out;
  for (int iter = 1; iter <= max_iter; ++iter) {
    out.iterations = iter;
    const double mid = 0.5 * (a + b);
    const double tol1 = rel_tol * std::abs(x) + abs_tol;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - mid) <= tol2 - 0.5 * (b - a)) {
      out.converged = true;
      break;
    }
    bool golden_step = true;
    if (std::abs(e) > tol1) {
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double e_prev = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q * e_prev) && p > q * (a - x) && p < q * (b - x)) {
        d = p / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = x < mid ? tol1 : -tol1;
        golden_step = false;
      }
    }
    if (golden_step) {
      e = (x < mid ? b : a) - x;
      d = golden * e;
    }
    const double u = std::abs(d) >= tol1 ? x + d : x + (d > 0.0 ? tol1 : -tol1);
    const double fu = f(u);
    if (fu <= fx) {
      (u < x ? b : a) = x;
      v = w;
      fv = fw;
      w = x;
      fw = fx;
      x = u;
      fx = fu;
    } else {
      (u < x ? a : b) = u;
      if (fu <= fw || w == x) {
        v = w;
        fv = fw;
        w = u;
        fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u;
        fv = fu;
      }
    }
  }
  out.x = x;
  out.fx = fx;
  return out;
}

}  // namespace hbias
