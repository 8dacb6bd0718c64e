#pragma once

#include <optional>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "ftrlab/constants.hpp"

namespace ftrlab::squid {

// Two Josephson junctions on a superconducting loop, biased by an external
// flux. Junction k carries I_k = Ic_k sin(delta_k) with critical currents
// Ic1 = I0 (1 + alpha), Ic2 = I0 (1 - alpha). The gauge-invariant phases are
// written delta_1 = phi_l + varphi, delta_2 = phi_l - varphi, so phi_l is the
// common (terminal) phase and 2*varphi the phase difference around the loop.
struct SquidParams {
  double I0;     // mean junction critical current [A], > 0
  double alpha;  // relative junction asymmetry, in [0, 1)
  double Lg;     // geometric loop inductance [H], >= 0
  double Cj = 0.0;  // per-junction shunt capacitance [F], only used for
                    // validity-frequency estimates

  SquidParams(double I0_, double alpha_, double Lg_, double Cj_ = 0.0);

  double ic1() const { return I0 * (1.0 + alpha); }
  double ic2() const { return I0 * (1.0 - alpha); }

  // Screening parameter 2 Lg I0 / Phi0 (dimensionless).
  double beta_L() const { return 2.0 * Lg * I0 / PhysicalConstants::phi0; }
};

// Per-junction critical currents (Ic1, Ic2) = I0 (1 + alpha, 1 - alpha).
std::pair<double, double> junction_currents(const SquidParams& p);

// Per-junction supercurrents (I1, I2) = (Ic1 sin delta1, Ic2 sin delta2).
std::pair<double, double> junction_supercurrents(const SquidParams& p,
                                                 double delta1, double delta2);

// The two junctions seen from the terminals act as one junction with a
// flux-dependent critical current R(varphi) and phase offset psi0(varphi):
//   I = R sin(phi_l + psi0),  R = 2 I0 sqrt(cos^2 + alpha^2 sin^2) = 2 I0 D.
struct EffectiveJunction {
  double R;     // effective critical current [A]
  double psi0;  // phase offset [rad]
  double D;     // sqrt(cos^2 varphi + alpha^2 sin^2 varphi)
};

// Decomposes the transport relation at fixed varphi into the effective
// single-junction form above; the identity
//   R sin(phi_l + psi0) = Ic1 sin(phi_l + varphi) + Ic2 sin(phi_l - varphi)
// holds for every phi_l.
EffectiveJunction transport_decomposition(const SquidParams& p, double varphi);

// Small-signal Josephson inductance Phi0 / (2 pi Ic cos delta). Negative
// beyond |delta| = pi/2; throws DomainError when cos(delta) vanishes, since
// the linearization diverges there (unstable bias point).
double josephson_inductance(double Ic, double delta);

// Terminal phase that carries transport current I on fluxoid branch n
// (n = 0 or 1): phi_l = -psi0 + (-1)^n asin(I / R) + n pi.
// Throws DomainError when |I| exceeds the effective critical current R.
double terminal_phase(const SquidParams& p, double varphi, double I,
                      int branch_n);

// Circulating current at transport current I, in the general branch form
//   I_circ = s I0 (1 - a^2) cos(varphi) sin(varphi) / D
//                 * sqrt(1 - (I / (2 I0 D))^2)  +  (alpha / 2) I / D^2,
// where s is the explicit screening sign ('+' pairs with branch_n = 0 on the
// principal cell |varphi| < pi/2). branch_n is validated and recorded but the
// sign of the screening term is carried by screening_sign alone; past the
// principal cell the occupied terminal branch flips (see ScreeningPoint), and
// the reduced form below remains the physical zero-transport value.
double circulating_current(const SquidParams& p, double varphi, double I,
                           int branch_n, int screening_sign);

// Zero-transport circulating current in the stable-evaluation form
//   I_circ = s I0 (1 - a^2) sin(varphi) |cos(varphi)| / D,
// free of tan() and finite at varphi = pi/2. Equals
// circulating_current(p, varphi, 0, n) on the principal cell |varphi| < pi/2.
double circulating_current_reduced(const SquidParams& p, double varphi,
                                   int screening_sign);

// One self-consistently screened operating point at applied flux Phi_e.
struct ScreeningPoint {
  double Phi_e = 0.0;   // applied flux [Wb]
  double Phi_s = 0.0;   // screened loop flux [Wb]
  double varphi = 0.0;  // varphi = pi (Phi_s / Phi0 + m_eff); solver variable
  double phi_l = 0.0;   // terminal phase [rad]
  double delta1 = 0.0;  // phi_l + varphi
  double delta2 = 0.0;  // phi_l - varphi
  double I = 0.0;       // transport current [A]
  double I_circ = 0.0;  // circulating current [A]
  int branch_n = 0;        // terminal-phase branch actually occupied; equals
                           // (1 - screening_sign) / 2 on the principal cell
                           // and flips where cos(varphi) < 0 so the point
                           // stays on the stationary branch of the potential
  int screening_sign = 1;  // sign of the screening term in the fluxoid
  int m = 0;               // winding number of the fluxoid condition
  bool multivalued = false;  // other roots coexisted at this Phi_e
};

struct ScreeningSolveOptions {
  double tol = 1e-13;          // absolute tolerance on varphi [rad]
  int max_iterations = 200;
  std::optional<double> seed;  // pick the root nearest this varphi
};

// Solves the zero-transport fluxoid condition
//   2 varphi + pi beta_L s g(varphi) = 2 pi (Phi_e / Phi0 + m)
// with g the reduced circulating-current shape. All roots in the admissible
// bracket are found by scan + bisection + Newton polish; the returned root is
// the one nearest the seed (if given) or nearest pi (Phi_e/Phi0 + m).
// multivalued is set when more than one root exists.
ScreeningPoint solve_screening(const SquidParams& p, double Phi_e,
                               int screening_sign = 1, int m = 0,
                               const ScreeningSolveOptions& opt = {});

// Periodic single-point evaluation: reduces Phi_e into the principal cell
// (nearest integer flux quantum), solves there with s = +1, and restores the
// winding. Produces an exactly Phi0-periodic and even map Phi_e -> Phi_s.
ScreeningPoint screening_point_periodic(const SquidParams& p, double Phi_e,
                                        const ScreeningSolveOptions& opt = {});

// Screening curve by continuation along one fixed (sign, m) branch. The seed
// of each point is the previous solution, so the curve tracks a single branch
// through folded regions instead of jumping between roots.
struct ScreeningCurve {
  std::vector<ScreeningPoint> points;
  bool multivalued = false;  // true when the branch map folds anywhere on the grid
  // Applied-flux intervals [lo, hi] (in Wb) where the fixed-branch map is
  // multivalued, estimated from the turning points of the map.
  std::vector<std::pair<double, double>> fold_intervals;
};
ScreeningCurve screening_curve(const SquidParams& p,
                               const std::vector<double>& Phi_e,
                               int screening_sign = 1, int m = 0);

// Quasi-static sweep along the fixed branch (sign = +1, m = 0). Points are
// visited in grid order; at each applied flux the kept root is the one
// nearest the previous varphi among roots where the flux map runs forward
// (d Phi_e / d varphi > 0). Retrograde fold segments are never occupied, so
// when the tracked segment terminates at a fold edge the curve snaps to the
// far segment exactly there. Sweeping the grid in the opposite direction
// snaps at the other edge: the response is hysteretic above the fold onset.
// Below it, the result matches screening_curve point for point.
ScreeningCurve swept_screening(const SquidParams& p,
                               const std::vector<double>& Phi_e,
                               const ScreeningSolveOptions& opt = {});

// Arm-by-arm linearization at an operating point. L_arm_k = L_J(Ic_k, delta_k)
// + Lg / 2; the terminal inductance is the parallel combination.
struct SquidInductances {
  double L_J1, L_J2;      // [H]
  double L_arm1, L_arm2;  // [H]
  double L_S;             // [H]
};
SquidInductances squid_inductance(const SquidParams& p,
                                  const ScreeningPoint& pt);

// Dimensionless loop potential u = U / E0, E0 = Phi0 I0 / (2 pi), at a phase
// configuration; includes gradient and Hessian in (phi_l, varphi).
// Requires Lg > 0 (the quadratic flux term has 1/beta_L in it).
struct PotentialSample {
  double u = 0.0;
  double E0 = 0.0;  // [J]
  Eigen::Vector2d grad = Eigen::Vector2d::Zero();
  Eigen::Matrix2d hessian = Eigen::Matrix2d::Zero();
  double det_hessian = 0.0;
  bool stable = false;  // Hessian positive definite
};
PotentialSample potential(const SquidParams& p, double phi_l, double varphi,
                          double Phi_e, double I = 0.0, int m = 0);

// Stability classification of a solved operating point against the loop
// potential. Throws DomainError if the point is not stationary.
enum class StabilityClass { stable, marginal, unstable };
StabilityClass branch_switching_onset(const SquidParams& p,
                                      const ScreeningPoint& pt,
                                      double marginal_tol = 1e-6);

// Smallest beta_L at which the fixed-branch flux map stops being monotone
// (fold onset). For alpha = 0 this is exactly 2 / pi.
double multivaluedness_onset_beta(double alpha, double tol = 1e-6);

}  // namespace ftrlab::squid
