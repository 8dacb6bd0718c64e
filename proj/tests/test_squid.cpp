#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "ftrlab/constants.hpp"
#include "ftrlab/errors.hpp"
#include "ftrlab/squid.hpp"

using namespace ftrlab;
using namespace ftrlab::squid;

namespace {

constexpr double kPhi0 = PhysicalConstants::phi0;

// doctest's Approx adds a default scale of 1.0, which swallows everything at
// picohenry / flux-quantum magnitudes. This is a true relative comparison.
doctest::Approx rel(double value, double eps) {
  return doctest::Approx(value).epsilon(eps).scale(0.0);
}

// Independent evaluation of the reduced zero-transport circulating-current
// shape, in the tan() form (valid away from cos = 0).
double g_tan_form(double alpha, double varphi) {
  const double t = std::tan(varphi);
  return (1.0 - alpha * alpha) * std::sin(varphi) /
         std::sqrt(1.0 + alpha * alpha * t * t);
}

// Plain bisection oracle for the fluxoid condition on a sign-changing
// bracket, written independently of the library's root finder.
double bisect_fluxoid(double alpha, double beta, double tau, double lo,
                      double hi) {
  auto f = [&](double v) {
    const double c = std::cos(v), s = std::sin(v);
    const double d = std::sqrt(c * c + alpha * alpha * s * s);
    const double g =
        (d == 0.0) ? 0.0 : (1.0 - alpha * alpha) * s * std::abs(c) / d;
    return 2.0 * v + kPi * beta * g - tau;
  };
  double flo = f(lo);
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    const double fm = f(mid);
    if ((fm < 0.0) == (flo < 0.0)) {
      lo = mid;
      flo = fm;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace

TEST_CASE("critical currents from asymmetry") {
  const SquidParams third(375e-9, 1.0 / 3.0, 0.0);
  const auto [ic1, ic2] = junction_currents(third);
  CHECK(ic1 == rel(500e-9, 1e-12));
  CHECK(ic2 == rel(250e-9, 1e-12));

  const auto [s1, s2] = junction_currents(SquidParams(400e-9, 0.0, 0.0));
  CHECK(s1 == rel(400e-9, 1e-15));
  CHECK(s2 == rel(400e-9, 1e-15));

  const auto [a1, a2] = junction_currents(SquidParams(400e-9, 0.33, 0.0));
  CHECK(a1 == rel(532e-9, 1e-12));
  CHECK(a2 == rel(268e-9, 1e-12));

  CHECK_THROWS_AS(SquidParams(400e-9, -0.1, 0.0), DomainError);
  CHECK_THROWS_AS(SquidParams(400e-9, 1.5, 0.0), DomainError);
  CHECK_THROWS_AS(SquidParams(-1e-9, 0.0, 0.0), DomainError);
}

TEST_CASE("josephson inductance golden values and divergence") {
  CHECK(josephson_inductance(400e-9, 0.0) == rel(823e-12, 0.005));
  CHECK(josephson_inductance(500e-9, 0.0) == rel(658e-12, 0.02));
  CHECK_THROWS_AS(josephson_inductance(400e-9, kPi / 2.0), DomainError);
  CHECK_THROWS_AS(josephson_inductance(0.0, 0.0), DomainError);
  // Beyond |delta| = pi/2 the linearization is valid but inverted.
  CHECK(josephson_inductance(400e-9, 2.5) < 0.0);
}

TEST_CASE("effective junction reduction") {
  const SquidParams p(400e-9, 0.3, 0.0);

  const EffectiveJunction at0 = transport_decomposition(p, 0.0);
  CHECK(at0.R == rel(2.0 * p.I0, 1e-14));
  CHECK(std::abs(at0.psi0) < 1e-14);

  const EffectiveJunction at90 = transport_decomposition(p, kPi / 2.0);
  CHECK(at90.R == rel(2.0 * p.I0 * p.alpha, 1e-12));
  CHECK(at90.psi0 == rel(kPi / 2.0, 1e-12));

  // R sin(phi_l + psi0) must reproduce the two-junction sum for all phi_l.
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> ang(-kPi, kPi);
  std::uniform_real_distribution<double> asym(0.0, 0.95);
  for (int i = 0; i < 10000; ++i) {
    const SquidParams q(400e-9, asym(rng), 0.0);
    const double varphi = ang(rng);
    const double phi_l = ang(rng);
    const EffectiveJunction ej = transport_decomposition(q, varphi);
    const auto [i1, i2] =
        junction_supercurrents(q, phi_l + varphi, phi_l - varphi);
    const double lhs = ej.R * std::sin(phi_l + ej.psi0);
    CHECK(std::abs(lhs - (i1 + i2)) < 1e-12 * 2.0 * q.I0);
  }
}

TEST_CASE("terminal phase branches carry the requested transport current") {
  const SquidParams p(400e-9, 0.3, 0.0);
  CHECK(std::abs(terminal_phase(p, 0.0, 0.0, 0)) < 1e-14);

  for (double varphi : {0.3, 1.0, 2.0, -0.7}) {
    const double psi0 = transport_decomposition(p, varphi).psi0;
    CHECK(terminal_phase(p, varphi, 0.0, 0) == rel(-psi0, 1e-13));
  }

  const double varphi = kPi / 3.0;
  const EffectiveJunction ej = transport_decomposition(p, varphi);
  const double I = 0.5 * ej.R;
  for (int n : {0, 1}) {
    const double phi_l = terminal_phase(p, varphi, I, n);
    const auto [i1, i2] =
        junction_supercurrents(p, phi_l + varphi, phi_l - varphi);
    CHECK(i1 + i2 == rel(I, 1e-12));
  }

  CHECK_THROWS_AS(terminal_phase(p, varphi, 1.01 * ej.R, 0), DomainError);
  CHECK_THROWS_AS(terminal_phase(p, varphi, 0.0, 2), DomainError);
}

TEST_CASE("circulating current forms") {
  const SquidParams p(1e-6, 0.3, 0.0);

  CHECK(std::abs(circulating_current(p, 0.0, 0.0, 0, 1)) < 1e-18);

  // A dead second junction carries no loop current at zero transport.
  const SquidParams dead(1e-6, 1.0, 0.0);
  for (double v : {0.2, 0.9, 1.4, 2.2}) {
    CHECK(std::abs(circulating_current(dead, v, 0.0, 0, 1)) < 1e-18);
  }

  CHECK(circulating_current(p, kPi / 4.0, 0.0, 0, 1) ==
        rel(0.6163291 * p.I0, 1e-5));

  // General form at I = 0 equals the reduced tan-free form on the principal
  // cell, and the reduced form is antisymmetric.
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> ang(-kPi / 2.0 + 0.01,
                                             kPi / 2.0 - 0.01);
  for (int i = 0; i < 2000; ++i) {
    const double v = ang(rng);
    const double general = circulating_current(p, v, 0.0, 0, 1);
    const double reduced = circulating_current_reduced(p, v, 1);
    CHECK(std::abs(general - reduced) < 1e-13 * p.I0);
    CHECK(std::abs(reduced - g_tan_form(p.alpha, v) * p.I0) < 1e-12 * p.I0);
    CHECK(std::abs(circulating_current_reduced(p, -v, 1) + reduced) <
          1e-14 * p.I0);
  }

  CHECK_THROWS_AS(circulating_current(p, 0.3, 1.0, 0, 1), DomainError);
  CHECK_THROWS_AS(circulating_current(p, 0.3, 0.0, 3, 1), DomainError);
  CHECK_THROWS_AS(circulating_current(p, 0.3, 0.0, 0, 2), DomainError);
}

TEST_CASE("screening solver: closed forms and fixed points") {
  // No loop inductance: pass-through.
  const SquidParams no_loop(400e-9, 0.3, 0.0);
  for (double phie : {-0.7, 0.0, 0.31, 1.42}) {
    const ScreeningPoint pt = solve_screening(no_loop, phie * kPhi0);
    CHECK(std::abs(pt.Phi_s - phie * kPhi0) < 1e-13 * kPhi0);
  }

  // Dead junction: zero circulating current, pass-through for any beta.
  const SquidParams dead(400e-9, 1.0, 2e-9);
  const ScreeningPoint pd = solve_screening(dead, 0.37 * kPhi0);
  CHECK(std::abs(pd.Phi_s - 0.37 * kPhi0) < 1e-12 * kPhi0);

  // Half-integer and integer applied flux are exact fixed points of the
  // screening map (asymmetric device; loop current vanishes there).
  auto params_with_beta = [](double alpha, double beta) {
    const double I0 = 400e-9;
    return SquidParams(I0, alpha, beta * kPhi0 / (2.0 * I0));
  };
  const SquidParams gentle = params_with_beta(0.3, 0.2);
  const SquidParams strong = params_with_beta(0.3, 0.8);
  for (const SquidParams& p : {gentle, strong}) {
    for (double k : {-1.0, 0.0, 0.5, 1.0, 1.5}) {
      const ScreeningPoint pt = screening_point_periodic(p, k * kPhi0);
      CHECK(std::abs(pt.Phi_s - k * kPhi0) < 1e-12 * kPhi0);
    }
  }

  // Above the fold onset the half-integer point coexists with another root;
  // the solver must still land exactly on the fixed point.
  const ScreeningPoint folded = solve_screening(strong, 0.5 * kPhi0);
  CHECK(folded.multivalued);
  CHECK(std::abs(folded.Phi_s - 0.5 * kPhi0) < 1e-12 * kPhi0);
  const ScreeningPoint single = solve_screening(gentle, 0.5 * kPhi0);
  CHECK_FALSE(single.multivalued);
}

TEST_CASE("screening solver vs independent bisection oracle") {
  // Symmetric case, beta = 0.3, Phi_e = 0.3 Phi0: monotone in (0, pi/2).
  const double I0 = 1e-6;
  const SquidParams sym(I0, 0.0, 0.3 * kPhi0 / (2.0 * I0));
  const ScreeningPoint pt = solve_screening(sym, 0.3 * kPhi0);
  const double oracle =
      bisect_fluxoid(0.0, 0.3, 2.0 * kPi * 0.3, 0.0, kPi / 2.0);
  CHECK(pt.varphi == rel(oracle, 1e-10));
  CHECK(pt.Phi_s / kPhi0 == rel(0.20861, 1e-3));

  // Asymmetric device at the measured operating scale.
  const SquidParams asym(I0, 0.33, 0.27 * kPhi0 / (2.0 * I0));
  const ScreeningPoint pa = solve_screening(asym, 0.25 * kPhi0);
  const double oracle2 =
      bisect_fluxoid(0.33, 0.27, 2.0 * kPi * 0.25, 0.0, kPi / 2.0);
  CHECK(pa.varphi == rel(oracle2, 1e-10));

  // Residual of the fluxoid condition in reduced units.
  const double res = 2.0 * pa.varphi +
                     kPi * asym.beta_L() * (pa.I_circ / asym.I0) -
                     2.0 * kPi * 0.25;
  CHECK(std::abs(res) < 1e-12);
}

TEST_CASE("screened flux identity, periodicity, parity") {
  const double I0 = 1e-6;
  std::mt19937_64 rng(23);
  std::uniform_real_distribution<double> flux(-2.0, 2.0);
  std::uniform_real_distribution<double> asym(0.05, 0.6);
  std::uniform_real_distribution<double> betad(0.01, 1.2);
  for (int i = 0; i < 300; ++i) {
    const SquidParams p(I0, asym(rng), betad(rng) * kPhi0 / (2.0 * I0));
    const double phie = flux(rng) * kPhi0;
    const ScreeningPoint pt = screening_point_periodic(p, phie);
    // Phi_s = Phi_e - Lg I_circ, exactly, however the root was picked.
    CHECK(std::abs(pt.Phi_s - (phie - p.Lg * pt.I_circ)) < 1e-12 * kPhi0);
    // One-quantum translation and parity of the periodic map.
    const ScreeningPoint up = screening_point_periodic(p, phie + kPhi0);
    CHECK(std::abs(up.Phi_s - pt.Phi_s - kPhi0) < 1e-12 * kPhi0);
    const ScreeningPoint neg = screening_point_periodic(p, -phie);
    CHECK(std::abs(neg.Phi_s + pt.Phi_s) < 1e-12 * kPhi0);
  }
}

TEST_CASE("screening curve: single-valued below onset, fold above") {
  const double I0 = 1e-6;
  std::vector<double> grid;
  for (int i = 0; i <= 280; ++i) {
    grid.push_back((-0.2 + 1.4 * i / 280.0) * kPhi0);
  }

  const SquidParams below(I0, 0.0, 0.3 * kPhi0 / (2.0 * I0));
  const ScreeningCurve c1 = screening_curve(below, grid);
  CHECK_FALSE(c1.multivalued);
  CHECK(c1.fold_intervals.empty());
  for (size_t i = 1; i < c1.points.size(); ++i) {
    CHECK(c1.points[i].Phi_s > c1.points[i - 1].Phi_s);
  }

  // beta_L = 0: identity line.
  const ScreeningCurve c0 = screening_curve(SquidParams(I0, 0.0, 0.0), grid);
  for (size_t i = 0; i < grid.size(); ++i) {
    CHECK(std::abs(c0.points[i].Phi_s - grid[i]) < 1e-13 * kPhi0);
  }

  // Above onset the fixed-branch map folds. Oracle for the window: turning
  // points of Phi_e(varphi) = Phi0 (varphi/pi + 0.4 sin varphi) lie at
  // cos(varphi) = -2/(0.8 pi), giving [0.96483, 1.03517] Phi0.
  const SquidParams above(I0, 0.0, 0.8 * kPhi0 / (2.0 * I0));
  const ScreeningCurve c2 = screening_curve(above, grid);
  CHECK(c2.multivalued);
  REQUIRE(!c2.fold_intervals.empty());
  const auto [lo, hi] = c2.fold_intervals.front();
  CHECK(lo / kPhi0 == rel(0.96483, 3e-4));
  CHECK(hi / kPhi0 == rel(1.03517, 3e-4));
  // Continuation stays on one branch: varphi advances monotonically.
  for (size_t i = 1; i < c2.points.size(); ++i) {
    CHECK(c2.points[i].varphi >= c2.points[i - 1].varphi - 1e-12);
  }
}

TEST_CASE("multivaluedness onset") {
  CHECK(multivaluedness_onset_beta(0.0) == rel(2.0 / kPi, 1e-10));
  // With asymmetry the kink at pi/2 controls the onset:
  // onset = 2 a / (pi (1 - a^2)).
  for (double a : {0.1, 0.2, 0.33}) {
    CHECK(multivaluedness_onset_beta(a) ==
          rel(2.0 * a / (kPi * (1.0 - a * a)), 1e-6));
  }
  CHECK(multivaluedness_onset_beta(0.1) < multivaluedness_onset_beta(0.3));
}

TEST_CASE("squid inductance golden set") {
  const SquidParams p200(400e-9, 0.33, 697e-12);
  const SquidInductances i200 =
      squid_inductance(p200, solve_screening(p200, 0.0));
  CHECK(i200.L_S == rel(600e-12, 0.02));
  CHECK(p200.beta_L() == rel(0.27, 0.04));

  const SquidParams p10(452e-9, 0.33, 10.8e-12);
  const SquidInductances i10 = squid_inductance(p10, solve_screening(p10, 0.0));
  CHECK(i10.L_S == rel(364e-12, 0.02));

  // Identical arms with no loop inductance: L_S = L_J / 2.
  const SquidParams psym(400e-9, 0.0, 0.0);
  const SquidInductances isym =
      squid_inductance(psym, solve_screening(psym, 0.0));
  CHECK(isym.L_S == rel(0.5 * josephson_inductance(400e-9, 0.0), 1e-12));

  // Relabeling the junctions while mirroring the phases leaves the terminal
  // inductance unchanged.
  const ScreeningPoint pt = screening_point_periodic(p200, 0.31 * kPhi0);
  const double lj1 = josephson_inductance(p200.ic1(), pt.delta1);
  const double lj2 = josephson_inductance(p200.ic2(), pt.delta2);
  const double lj1x = josephson_inductance(p200.ic2(), -pt.delta2);
  const double lj2x = josephson_inductance(p200.ic1(), -pt.delta1);
  const double ls = (lj1 + 0.5 * p200.Lg) * (lj2 + 0.5 * p200.Lg) /
                    (lj1 + lj2 + p200.Lg);
  const double lsx = (lj1x + 0.5 * p200.Lg) * (lj2x + 0.5 * p200.Lg) /
                     (lj1x + lj2x + p200.Lg);
  CHECK(ls == rel(lsx, 1e-12));
}

TEST_CASE("loop potential: closed-form samples and derivative checks") {
  const double I0 = 1e-6;
  const SquidParams pa(I0, 0.3, 0.3 * kPhi0 / (2.0 * I0));
  const SquidParams psym(I0, 0.0, 0.3 * kPhi0 / (2.0 * I0));

  CHECK(potential(psym, 0.0, 0.0, 0.0).u == rel(-2.0, 1e-14));
  // Both junction phases at +-pi/2 and no flux deviation: u = 0.
  CHECK(std::abs(potential(pa, 0.0, kPi / 2.0, 0.5 * kPhi0).u) < 1e-12);

  CHECK_THROWS_AS(potential(SquidParams(I0, 0.0, 0.0), 0.0, 0.0, 0.0),
                  DomainError);

  CHECK(potential(pa, 0.1, 0.2, 0.0).E0 ==
        rel(kPhi0 * I0 / (2.0 * kPi), 1e-14));

  // Gradient and Hessian against central finite differences of u.
  std::mt19937_64 rng(37);
  std::uniform_real_distribution<double> ang(-2.2, 2.2);
  const double h = 1e-3;
  for (int i = 0; i < 200; ++i) {
    const double pl = ang(rng), v = ang(rng);
    const double phie = 0.4 * kPhi0, I = 0.3e-6;
    auto u = [&](double a, double b) { return potential(pa, a, b, phie, I).u; };
    const PotentialSample ps = potential(pa, pl, v, phie, I);

    const double gl = (u(pl + h, v) - u(pl - h, v)) / (2.0 * h);
    const double gv = (u(pl, v + h) - u(pl, v - h)) / (2.0 * h);
    CHECK(std::abs(ps.grad[0] - gl) < 1e-6 * (1.0 + std::abs(gl)));
    CHECK(std::abs(ps.grad[1] - gv) < 1e-6 * (1.0 + std::abs(gv)));

    const double h11 = (u(pl + h, v) - 2.0 * u(pl, v) + u(pl - h, v)) / (h * h);
    const double h22 = (u(pl, v + h) - 2.0 * u(pl, v) + u(pl, v - h)) / (h * h);
    const double h12 = (u(pl + h, v + h) - u(pl + h, v - h) -
                        u(pl - h, v + h) + u(pl - h, v - h)) /
                       (4.0 * h * h);
    CHECK(std::abs(ps.hessian(0, 0) - h11) < 1e-6 * (1.0 + std::abs(h11)));
    CHECK(std::abs(ps.hessian(1, 1) - h22) < 1e-6 * (1.0 + std::abs(h22)));
    CHECK(std::abs(ps.hessian(0, 1) - h12) < 1e-6 * (1.0 + std::abs(h12)));
    CHECK(ps.hessian(1, 0) == ps.hessian(0, 1));
    CHECK(ps.det_hessian == rel(ps.hessian.determinant(), 1e-12));
  }
}

TEST_CASE("solver points are stationary points of the potential") {
  const double I0 = 1e-6;
  const SquidParams p(I0, 0.33, 0.3 * kPhi0 / (2.0 * I0));
  for (double phie : {0.0, 0.1, 0.25, 0.37, 0.49, 0.73, 1.2, -0.6}) {
    const ScreeningPoint pt = screening_point_periodic(p, phie * kPhi0);
    const PotentialSample ps =
        potential(p, pt.phi_l, pt.varphi, pt.Phi_e, pt.I, pt.m);
    CHECK(ps.grad.lpNorm<Eigen::Infinity>() < 1e-10);
  }
}

TEST_CASE("grid minimum of the potential matches the screening solution") {
  const double I0 = 1e-6;
  const SquidParams p(I0, 0.3, 0.3 * kPhi0 / (2.0 * I0));
  const double phie = 0.23 * kPhi0;

  // Exhaustive search over the principal cell, independent of the solver.
  const int n = 400;
  double best_u = 1e300, best_pl = 0.0, best_v = 0.0;
  for (int i = 0; i <= n; ++i) {
    const double pl = -kPi / 2.0 + kPi * i / n;
    for (int j = 0; j <= n; ++j) {
      const double v = -kPi / 2.0 + kPi * j / n;
      const double uu = potential(p, pl, v, phie).u;
      if (uu < best_u) {
        best_u = uu;
        best_pl = pl;
        best_v = v;
      }
    }
  }
  const ScreeningPoint pt = screening_point_periodic(p, phie);
  const double step = kPi / n;
  CHECK(std::abs(best_v - pt.varphi) < step);
  CHECK(std::abs(best_pl - pt.phi_l) < step);
  CHECK(potential(p, pt.phi_l, pt.varphi, phie).u <= best_u + 1e-12);
}

TEST_CASE("stability classification along branches") {
  const double I0 = 1e-6;

  // Exactly at the symmetric fold onset the integer-flux stationary point
  // sits at cos(varphi) = -1 and the Hessian determinant vanishes.
  const SquidParams onset(I0, 0.0, (2.0 / kPi) * kPhi0 / (2.0 * I0));
  const ScreeningPoint marginal_pt = solve_screening(onset, kPhi0);
  CHECK(branch_switching_onset(onset, marginal_pt) == StabilityClass::marginal);
  CHECK(std::cos(marginal_pt.varphi) == rel(-1.0, 1e-8));

  // Below onset every physical-branch point is stable.
  const SquidParams below(I0, 0.0, 0.3 * kPhi0 / (2.0 * I0));
  for (int k = 0; k <= 9; ++k) {
    const ScreeningPoint pt = screening_point_periodic(below, kPhi0 * k / 9.0);
    CHECK(branch_switching_onset(below, pt) == StabilityClass::stable);
  }
  CHECK(branch_switching_onset(below,
                               screening_point_periodic(below, 0.5 * kPhi0)) ==
        StabilityClass::stable);

  // Well above onset an unstable stationary point exists near half flux:
  // the inter-well saddle at phi_l = varphi = pi/2 (one junction at the top
  // of its washboard, the other at the bottom).
  const SquidParams strong(I0, 0.0, 1.0 * kPhi0 / (2.0 * I0));
  ScreeningPoint saddle;
  saddle.Phi_e = 0.5 * kPhi0;
  saddle.varphi = kPi / 2.0;
  saddle.phi_l = kPi / 2.0;
  saddle.I = 0.0;
  saddle.m = 0;
  CHECK(branch_switching_onset(strong, saddle) == StabilityClass::unstable);

  // Non-stationary input is rejected.
  saddle.phi_l = 0.4;
  CHECK_THROWS_AS(branch_switching_onset(strong, saddle), DomainError);
}
