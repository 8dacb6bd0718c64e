#include "ftrlab/squid.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "ftrlab/errors.hpp"

namespace ftrlab::squid {

namespace {

constexpr double kPhi0 = PhysicalConstants::phi0;

// Reduced zero-transport circulating-current shape
//   g(varphi) = (1 - a^2) sin(varphi) |cos(varphi)| / D,
//   D = sqrt(cos^2 + a^2 sin^2),
// written without tan() so it stays finite through varphi = pi/2.
double g_shape(double alpha, double varphi) {
  const double c = std::cos(varphi);
  const double s = std::sin(varphi);
  const double d = std::sqrt(c * c + alpha * alpha * s * s);
  if (d == 0.0) return 0.0;  // alpha = 0 and cos = 0: the sin * |cos| zero wins
  return (1.0 - alpha * alpha) * s * std::abs(c) / d;
}

// d g / d varphi. Kinked at cos(varphi) = 0 when alpha > 0; callers near the
// kink must not rely on smoothness.
double g_shape_prime(double alpha, double varphi) {
  const double c = std::cos(varphi);
  const double s = std::sin(varphi);
  const double a2 = alpha * alpha;
  const double d2 = c * c + a2 * s * s;
  const double d = std::sqrt(d2);
  if (d == 0.0) return 0.0;
  const double one_m = 1.0 - a2;
  const double core =
      std::cos(2.0 * varphi) / d + one_m * s * s * c * c / (d2 * d);
  const double sign = (c > 0.0) ? 1.0 : (c < 0.0 ? -1.0 : 0.0);
  return sign * one_m * core;
}

// Fluxoid residual F(varphi) = 2 varphi + pi beta s g(varphi) - tau,
// tau = 2 pi (Phi_e / Phi0 + m).
struct Fluxoid {
  double alpha, beta, tau;
  int sign;
  double operator()(double varphi) const {
    return 2.0 * varphi + kPi * beta * sign * g_shape(alpha, varphi) - tau;
  }
  double deriv(double varphi) const {
    return 2.0 + kPi * beta * sign * g_shape_prime(alpha, varphi);
  }
};

// Bisection on a sign-changing bracket, then a guarded Newton polish.
double refine_root(const Fluxoid& f, double lo, double hi, double flo,
                   double tol, int max_iterations) {
  double fhi = f(hi);
  (void)fhi;
  for (int i = 0; i < max_iterations && (hi - lo) > tol; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if (fm == 0.0) return mid;
    if ((fm < 0.0) == (flo < 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  double r = 0.5 * (lo + hi);
  double fr = std::abs(f(r));
  double rn = r;
  for (int k = 0; k < 6; ++k) {
    const double d = f.deriv(rn);
    if (std::abs(d) < 1e-12) break;
    const double step = f(rn) / d;
    const double next = rn - step;
    if (next < lo - tol || next > hi + tol) break;
    rn = next;
    if (std::abs(step) < 0.25 * tol) break;
  }
  if (std::abs(f(rn)) < fr) r = rn;
  return r;
}

// All roots of the fluxoid condition. The screening term is bounded by
// pi beta (1 - a^2), so every root lies within that distance of tau / 2.
// Besides the sign-change scan, the kinks of g at cos(varphi) = 0 are probed
// explicitly: exactly at half-integer applied flux the residual only touches
// zero there (V-shaped root, no sign change), and just past half-integer
// flux a near-tangent pair of roots brackets the kink.
std::vector<double> fluxoid_roots(const Fluxoid& f, double tol,
                                  int max_iterations) {
  const double half_span =
      0.5 * kPi * f.beta * (1.0 - f.alpha * f.alpha) + 1e-6;
  const double lo = 0.5 * f.tau - half_span;
  const double hi = 0.5 * f.tau + half_span;
  const int n = std::clamp(static_cast<int>((hi - lo) / 2e-3), 256, 20000);
  const double h = (hi - lo) / n;

  std::vector<double> roots;
  double x0 = lo;
  double f0 = f(x0);
  for (int i = 1; i <= n; ++i) {
    const double x1 = lo + i * h;
    const double f1 = f(x1);
    if (f0 == 0.0) {
      roots.push_back(x0);
    } else if ((f0 < 0.0) != (f1 < 0.0)) {
      roots.push_back(refine_root(f, x0, x1, f0, tol, max_iterations));
    }
    x0 = x1;
    f0 = f1;
  }
  if (f0 == 0.0) roots.push_back(x0);

  // Kink probes at varphi = pi/2 + k pi inside the bracket.
  const long k_lo = std::lround(std::ceil((lo - 0.5 * kPi) / kPi));
  const long k_hi = std::lround(std::floor((hi - 0.5 * kPi) / kPi));
  for (long k = k_lo; k <= k_hi; ++k) {
    const double xk = (0.5 + static_cast<double>(k)) * kPi;
    const double fk = f(xk);
    if (std::abs(fk) <= 1e-11) {
      roots.push_back(xk);
    } else {
      // The kink is a local extremum of F; when F crosses zero on both
      // flanks the plain scan already caught it unless both roots share a
      // scan cell. Probe both sides with expanding brackets.
      const double away = f(std::min(hi, xk + h));
      if ((fk < 0.0) != (away < 0.0) || (f(std::max(lo, xk - h)) < 0.0) != (fk < 0.0)) {
        for (int side = -1; side <= 1; side += 2) {
          double w = h;
          double edge = xk + side * w;
          while (edge > lo && edge < hi && (f(edge) < 0.0) == (fk < 0.0)) {
            w *= 2.0;
            edge = xk + side * w;
          }
          edge = std::clamp(edge, lo, hi);
          if ((f(edge) < 0.0) != (fk < 0.0)) {
            const double a = std::min(edge, xk);
            const double b = std::max(edge, xk);
            roots.push_back(refine_root(f, a, b, f(a), tol, max_iterations));
          }
        }
      }
    }
  }

  std::sort(roots.begin(), roots.end());
  std::vector<double> unique;
  for (double r : roots) {
    if (unique.empty() || r - unique.back() > 1e-9) unique.push_back(r);
  }
  return unique;
}

// Assembles the full operating point for a fluxoid root. The terminal phase
// follows the stationary branch of the loop potential: on the principal cell
// phi_l = -psi0 (+ pi for screening_sign = -1), and past |varphi| = pi/2 the
// branch index flips so that the configuration stays a stationary point.
ScreeningPoint make_point(const SquidParams& p, double Phi_e, double varphi,
                          int screening_sign, int m, bool multivalued) {
  ScreeningPoint pt;
  pt.Phi_e = Phi_e;
  pt.varphi = varphi;
  pt.screening_sign = screening_sign;
  pt.m = m;
  pt.multivalued = multivalued;
  pt.Phi_s = kPhi0 * (varphi / kPi - m);
  pt.I = 0.0;
  pt.I_circ = circulating_current_reduced(p, varphi, screening_sign);
  const int n_base = (screening_sign > 0) ? 0 : 1;
  const int n_flip = (std::cos(varphi) < 0.0) ? 1 : 0;
  pt.branch_n = (n_base + n_flip) % 2;
  const EffectiveJunction ej = transport_decomposition(p, varphi);
  pt.phi_l = -ej.psi0 + pt.branch_n * kPi;
  pt.delta1 = pt.phi_l + varphi;
  pt.delta2 = pt.phi_l - varphi;
  return pt;
}

// Scans the branch map varphi -> Phi_e(varphi) over the varphi range the
// curve visited (plus margin) and records each multivalued applied-flux
// window: a local max of the map followed by a local min bounds one fold
// interval.
void append_fold_intervals(ScreeningCurve& curve, const SquidParams& p,
                           int screening_sign, int m) {
  const double beta = p.beta_L();
  if (curve.points.empty() || beta < 1e-15) return;

  double lo = curve.points.front().varphi, hi = lo;
  for (const auto& pt : curve.points) {
    lo = std::min(lo, pt.varphi);
    hi = std::max(hi, pt.varphi);
  }
  const double margin = 0.1 * (hi - lo) + 0.1;
  lo -= margin;
  hi += margin;
  const auto slope = [&](double v) {
    return 2.0 + kPi * beta * screening_sign * g_shape_prime(p.alpha, v);
  };
  const auto map_phie = [&](double v) {
    return kPhi0 *
           ((2.0 * v + kPi * beta * screening_sign * g_shape(p.alpha, v)) /
                (2.0 * kPi) -
            m);
  };
  const int n = 4000;
  std::vector<double> turning;
  std::vector<int> kind;  // +1: local max of Phi_e(varphi), -1: local min
  double s0 = slope(lo);
  for (int i = 1; i <= n; ++i) {
    const double x1 = lo + (hi - lo) * i / n;
    const double s1 = slope(x1);
    if ((s0 < 0.0) != (s1 < 0.0)) {
      double a = lo + (hi - lo) * (i - 1) / n, b = x1, sa = s0;
      for (int k = 0; k < 80 && (b - a) > 1e-13; ++k) {
        const double mid = 0.5 * (a + b);
        const double sm = slope(mid);
        if ((sm < 0.0) == (sa < 0.0)) {
          a = mid;
          sa = sm;
        } else {
          b = mid;
        }
      }
      turning.push_back(0.5 * (a + b));
      kind.push_back(s0 > 0.0 ? 1 : -1);
    }
    s0 = s1;
  }
  for (size_t i = 0; i + 1 < turning.size(); ++i) {
    if (kind[i] == 1 && kind[i + 1] == -1) {
      const double a = map_phie(turning[i + 1]);
      const double b = map_phie(turning[i]);
      curve.fold_intervals.emplace_back(std::min(a, b), std::max(a, b));
      curve.multivalued = true;
    }
  }
}

}  // namespace

SquidParams::SquidParams(double I0_, double alpha_, double Lg_, double Cj_)
    : I0(I0_), alpha(alpha_), Lg(Lg_), Cj(Cj_) {
  if (!(I0 > 0.0)) throw DomainError("SquidParams: I0 must be positive");
  if (!(alpha >= 0.0 && alpha <= 1.0)) {
    throw DomainError("SquidParams: alpha must lie in [0, 1]");
  }
  if (!(Lg >= 0.0)) throw DomainError("SquidParams: Lg must be non-negative");
  if (!(Cj >= 0.0)) throw DomainError("SquidParams: Cj must be non-negative");
}

std::pair<double, double> junction_currents(const SquidParams& p) {
  return {p.ic1(), p.ic2()};
}

std::pair<double, double> junction_supercurrents(const SquidParams& p,
                                                 double delta1,
                                                 double delta2) {
  return {p.ic1() * std::sin(delta1), p.ic2() * std::sin(delta2)};
}

EffectiveJunction transport_decomposition(const SquidParams& p,
                                          double varphi) {
  const double c = std::cos(varphi);
  const double s = std::sin(varphi);
  const double d = std::sqrt(c * c + p.alpha * p.alpha * s * s);
  EffectiveJunction ej;
  ej.D = d;
  ej.R = 2.0 * p.I0 * d;
  ej.psi0 = std::atan2(p.alpha * s, c);
  return ej;
}

double josephson_inductance(double Ic, double delta) {
  if (!(Ic > 0.0)) {
    throw DomainError("josephson_inductance: Ic must be positive");
  }
  const double c = std::cos(delta);
  if (std::abs(c) < 1e-9) {
    throw DomainError(
        "josephson_inductance: cos(delta) vanishes, inductance diverges "
        "(unstable bias point)");
  }
  return kPhi0 / (2.0 * kPi * Ic * c);
}

double terminal_phase(const SquidParams& p, double varphi, double I,
                      int branch_n) {
  if (branch_n != 0 && branch_n != 1) {
    throw DomainError("terminal_phase: branch_n must be 0 or 1");
  }
  const EffectiveJunction ej = transport_decomposition(p, varphi);
  if (std::abs(I) > ej.R) {
    std::ostringstream msg;
    msg << "terminal_phase: |I| = " << std::abs(I)
        << " A exceeds the effective critical current " << ej.R << " A";
    throw DomainError(msg.str());
  }
  const double sgn = (branch_n == 0) ? 1.0 : -1.0;
  return -ej.psi0 + sgn * std::asin(I / ej.R) + branch_n * kPi;
}

double circulating_current(const SquidParams& p, double varphi, double I,
                           int branch_n, int screening_sign) {
  if (branch_n != 0 && branch_n != 1) {
    throw DomainError("circulating_current: branch_n must be 0 or 1");
  }
  if (screening_sign != 1 && screening_sign != -1) {
    throw DomainError("circulating_current: screening_sign must be +1 or -1");
  }
  const EffectiveJunction ej = transport_decomposition(p, varphi);
  if (std::abs(I) > ej.R) {
    throw DomainError(
        "circulating_current: |I| exceeds the effective critical current");
  }
  const double c = std::cos(varphi);
  const double s = std::sin(varphi);
  const double d = ej.D;
  if (d == 0.0) return 0.0;
  const double x = (ej.R > 0.0) ? I / ej.R : 0.0;
  return screening_sign * p.I0 * (1.0 - p.alpha * p.alpha) * c * s / d *
             std::sqrt(std::max(0.0, 1.0 - x * x)) +
         0.5 * p.alpha * I / (d * d);
}

double circulating_current_reduced(const SquidParams& p, double varphi,
                                   int screening_sign) {
  return screening_sign * p.I0 * g_shape(p.alpha, varphi);
}

ScreeningPoint solve_screening(const SquidParams& p, double Phi_e,
                               int screening_sign, int m,
                               const ScreeningSolveOptions& opt) {
  if (screening_sign != 1 && screening_sign != -1) {
    throw DomainError("solve_screening: screening_sign must be +1 or -1");
  }
  const double tau = 2.0 * kPi * (Phi_e / kPhi0 + m);
  const double beta = p.beta_L();

  if (beta < 1e-15) {
    // No screening: the fluxoid condition is linear and exact.
    return make_point(p, Phi_e, 0.5 * tau, screening_sign, m, false);
  }

  const Fluxoid f{p.alpha, beta, tau, screening_sign};
  const std::vector<double> roots =
      fluxoid_roots(f, opt.tol, opt.max_iterations);
  if (roots.empty()) {
    std::ostringstream msg;
    msg << "solve_screening: no fluxoid root found at Phi_e/Phi0 = "
        << Phi_e / kPhi0 << " (beta_L = " << beta << ")";
    throw SolverError(msg.str());
  }

  const double center = opt.seed ? *opt.seed : 0.5 * tau;
  double best = roots.front();
  for (double r : roots) {
    if (std::abs(r - center) < std::abs(best - center)) best = r;
  }
  return make_point(p, Phi_e, best, screening_sign, m, roots.size() > 1);
}

ScreeningPoint screening_point_periodic(const SquidParams& p, double Phi_e,
                                        const ScreeningSolveOptions& opt) {
  const double phie = Phi_e / kPhi0;
  const double shift = std::round(phie);
  ScreeningSolveOptions o = opt;
  o.seed.reset();  // the selection must depend on the reduced cell only
  ScreeningPoint pt = solve_screening(p, kPhi0 * (phie - shift), 1, 0, o);
  pt.Phi_e = Phi_e;
  pt.Phi_s += shift * kPhi0;
  pt.m = static_cast<int>(-shift);
  return pt;
}

ScreeningCurve screening_curve(const SquidParams& p,
                               const std::vector<double>& Phi_e,
                               int screening_sign, int m) {
  ScreeningCurve curve;
  curve.points.reserve(Phi_e.size());
  ScreeningSolveOptions opt;
  for (double phe : Phi_e) {
    if (!curve.points.empty()) opt.seed = curve.points.back().varphi;
    ScreeningPoint pt = solve_screening(p, phe, screening_sign, m, opt);
    curve.multivalued = curve.multivalued || pt.multivalued;
    curve.points.push_back(pt);
  }
  append_fold_intervals(curve, p, screening_sign, m);
  return curve;
}

ScreeningCurve swept_screening(const SquidParams& p,
                               const std::vector<double>& Phi_e,
                               const ScreeningSolveOptions& opt) {
  ScreeningCurve curve;
  curve.points.reserve(Phi_e.size());
  const double beta = p.beta_L();
  bool have_prev = false;
  double prev = 0.0;
  for (double phe : Phi_e) {
    const double tau = 2.0 * kPi * (phe / kPhi0);
    if (beta < 1e-15) {
      curve.points.push_back(make_point(p, phe, 0.5 * tau, 1, 0, false));
      continue;
    }
    const Fluxoid f{p.alpha, beta, tau, 1};
    const std::vector<double> roots =
        fluxoid_roots(f, opt.tol, opt.max_iterations);
    if (roots.empty()) {
      std::ostringstream msg;
      msg << "swept_screening: no fluxoid root found at Phi_e/Phi0 = "
          << phe / kPhi0 << " (beta_L = " << beta << ")";
      throw SolverError(msg.str());
    }
    const double center = have_prev ? prev : 0.5 * tau;
    double best_any = roots.front();
    double best_stable = std::numeric_limits<double>::quiet_NaN();
    for (double r : roots) {
      if (std::abs(r - center) < std::abs(best_any - center)) best_any = r;
      // Retrograde segments (flux map running backwards in varphi) are
      // never occupied during a sweep.
      if (f.deriv(r) > 0.0 &&
          (std::isnan(best_stable) ||
           std::abs(r - center) < std::abs(best_stable - center))) {
        best_stable = r;
      }
    }
    const double pick = std::isnan(best_stable) ? best_any : best_stable;
    curve.multivalued = curve.multivalued || roots.size() > 1;
    curve.points.push_back(make_point(p, phe, pick, 1, 0, roots.size() > 1));
    prev = pick;
    have_prev = true;
  }
  append_fold_intervals(curve, p, 1, 0);
  return curve;
}

SquidInductances squid_inductance(const SquidParams& p,
                                  const ScreeningPoint& pt) {
  SquidInductances ind;
  ind.L_J1 = josephson_inductance(p.ic1(), pt.delta1);
  ind.L_J2 = josephson_inductance(p.ic2(), pt.delta2);
  ind.L_arm1 = ind.L_J1 + 0.5 * p.Lg;
  ind.L_arm2 = ind.L_J2 + 0.5 * p.Lg;
  const double sum = ind.L_arm1 + ind.L_arm2;
  const double scale = std::abs(ind.L_arm1) + std::abs(ind.L_arm2);
  if (std::abs(sum) < 1e-12 * scale) {
    throw DomainError(
        "squid_inductance: arm inductances cancel, terminal inductance "
        "diverges");
  }
  ind.L_S = ind.L_arm1 * ind.L_arm2 / sum;
  return ind;
}

PotentialSample potential(const SquidParams& p, double phi_l, double varphi,
                          double Phi_e, double I, int m) {
  const double beta = p.beta_L();
  if (!(beta > 0.0)) {
    throw DomainError("potential: requires Lg > 0 (beta_L > 0)");
  }
  const double a1 = 1.0 + p.alpha;
  const double a2 = 1.0 - p.alpha;
  const double d1 = phi_l + varphi;
  const double d2 = phi_l - varphi;
  const double flux_dev = varphi / kPi - m - Phi_e / kPhi0;
  const double i_red = I / p.I0;

  PotentialSample ps;
  ps.E0 = kPhi0 * p.I0 / (2.0 * kPi);
  ps.u = -a1 * std::cos(d1) - a2 * std::cos(d2) +
         (2.0 * kPi / beta) * flux_dev * flux_dev - i_red * phi_l;
  ps.grad[0] = a1 * std::sin(d1) + a2 * std::sin(d2) - i_red;
  ps.grad[1] =
      a1 * std::sin(d1) - a2 * std::sin(d2) + (4.0 / beta) * flux_dev;
  const double h11 = a1 * std::cos(d1) + a2 * std::cos(d2);
  const double h12 = a1 * std::cos(d1) - a2 * std::cos(d2);
  const double h22 = h11 + 4.0 / (kPi * beta);
  ps.hessian << h11, h12, h12, h22;
  ps.det_hessian = h11 * h22 - h12 * h12;
  ps.stable = (h11 > 0.0) && (ps.det_hessian > 0.0);
  return ps;
}

StabilityClass branch_switching_onset(const SquidParams& p,
                                      const ScreeningPoint& pt,
                                      double marginal_tol) {
  const PotentialSample ps =
      potential(p, pt.phi_l, pt.varphi, pt.Phi_e, pt.I, pt.m);
  if (ps.grad.lpNorm<Eigen::Infinity>() > 1e-8) {
    std::ostringstream msg;
    msg << "branch_switching_onset: point is not stationary (|grad| = "
        << ps.grad.lpNorm<Eigen::Infinity>() << ")";
    throw DomainError(msg.str());
  }
  if (std::abs(ps.det_hessian) <= marginal_tol) return StabilityClass::marginal;
  return ps.stable ? StabilityClass::stable : StabilityClass::unstable;
}

double multivaluedness_onset_beta(double alpha, double tol) {
  if (!(alpha >= 0.0 && alpha < 1.0)) {
    throw DomainError("multivaluedness_onset_beta: alpha must lie in [0, 1)");
  }
  // The fixed-branch map folds once 2 + pi beta min(g') < 0, so the onset is
  // 2 / (pi mu) with mu = -min over varphi of g'. The minimum can sit at the
  // kink at varphi = pi/2; a dense scan plus golden-section handles both the
  // smooth and the kinked case.
  const int n = 20000;
  double best = 0.0, best_x = kPi * 0.5;
  for (int i = 0; i <= n; ++i) {
    const double x = kPi * i / n;
    const double v = g_shape_prime(alpha, x);
    if (v < best) {
      best = v;
      best_x = x;
    }
  }
  double a = std::max(0.0, best_x - kPi / n);
  double b = std::min(kPi, best_x + kPi / n);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  double x1 = b - gr * (b - a), x2 = a + gr * (b - a);
  double f1 = g_shape_prime(alpha, x1), f2 = g_shape_prime(alpha, x2);
  for (int i = 0; i < 200 && (b - a) > 1e-14; ++i) {
    if (f1 < f2) {
      b = x2;
      x2 = x1;
      f2 = f1;
      x1 = b - gr * (b - a);
      f1 = g_shape_prime(alpha, x1);
    } else {
      a = x1;
      x1 = x2;
      f1 = f2;
      x2 = a + gr * (b - a);
      f2 = g_shape_prime(alpha, x2);
    }
  }
  const double mu = -std::min(best, std::min(f1, f2));
  if (!(mu > 0.0)) {
    throw SolverError("multivaluedness_onset_beta: the map never folds");
  }
  (void)tol;
  return 2.0 / (kPi * mu);
}

}  // namespace ftrlab::squid
