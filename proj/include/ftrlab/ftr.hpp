#pragma once

#include <vector>

#include "ftrlab/constants.hpp"
#include "ftrlab/squid.hpp"

namespace ftrlab::ftr {

// Quarter-wave coplanar-waveguide section described by its length and
// per-length line constants.
struct CpwParams {
  double length;  // [m]
  double L_l;     // [H/m]
  double C_l;     // [F/m]

  CpwParams(double length_, double L_l_, double C_l_);

  double velocity() const;  // phase velocity 1/sqrt(L_l C_l) [m/s]
  double omega0() const;    // fundamental quarter-wave frequency [rad/s]
  // Frequency of mode n (n = 0 is the fundamental): (2n + 1) omega0.
  double mode_frequency(int n) const;
};

// Lumped single-mode equivalent of the shorted quarter-wave section:
// L_r = (8/pi^2) L_l l, C_r = C_l l / 2, omega0 = 1/sqrt(L_r C_r).
struct ModalParameters {
  double L_r;     // [H]
  double C_r;     // [F]
  double omega0;  // [rad/s]
};
ModalParameters modal_parameters(const CpwParams& cpw);

// A CPW resonator terminated by a flux-tunable SQUID.
struct FtrParams {
  CpwParams cpw;
  squid::SquidParams squid;
  double scaling_A = 1.0;   // phenomenological overall frequency factor
  double C_S = 0.0;         // shunt capacitance across the SQUID [F]
  bool include_Cs = false;  // use C_S in the exact eigenfrequency solve

  FtrParams(CpwParams cpw_, squid::SquidParams squid_, double scaling_A_ = 1.0,
            double C_S_ = 0.0, bool include_Cs_ = false);
};

// Inductance participation ratio gamma = Ls / (l L_l), equivalently
// (8/pi^2) Ls / L_r. Sign passes through: a negative Ls (inverted operating
// point) yields a negative ratio.
double participation_ratio(double Ls, const CpwParams& cpw);

// First-order resonance frequency A * omega0 / (1 + gamma).
// Throws DomainError when 1 + gamma <= 0 (past the divergence of Ls).
double frequency_approx(double omega0, double gamma, double A);

// Fundamental root of the transmission-line eigenfrequency condition
//   tan(k l) = (L_l / (k Ls)) (1 - omega^2 Cs Ls),   omega = k / sqrt(L_l C_l),
// solved for theta = k l in (0, pi/2). Ls = 0 returns the bare omega0;
// with_capacitance = false drops the Cs term. Throws DomainError for negative
// Ls or Cs, SolverError when no root lies on the fundamental branch.
double frequency_exact(const CpwParams& cpw, double Ls, double Cs,
                       bool with_capacitance = true);

// Frequencies bounding the lumped-SQUID treatment: the junction plasma
// frequency (harmonic-mean junction inductance against Cj) and the SQUID
// self-resonance against its shunt capacitance.
struct ValidityFrequencies {
  double omega_p;   // [rad/s]
  double omega_LC;  // [rad/s]
};
ValidityFrequencies validity_frequencies(const squid::SquidInductances& ind,
                                         const FtrParams& params);

// One point of a flux-tuning curve. Points where the SQUID inductance
// diverges or turns the mode over (1 + gamma <= 0) are reported with
// valid = false and omega_r = 0 rather than dropped, so curves keep their
// grid alignment. responsivity is NaN when either stencil leg of the central
// difference lands on such a point.
struct TuningPoint {
  double Phi_e = 0.0;         // [Wb]
  double Phi_s = 0.0;         // [Wb]
  double gamma = 0.0;
  double omega_r = 0.0;       // [rad/s]
  double responsivity = 0.0;  // d omega_r / d Phi_e [rad/s per Wb]
  int branch_n = 0;
  int m = 0;
  bool valid = false;
};

struct TuningCurveOptions {
  bool exact = false;  // solve the transcendental condition per point
  // Treat the grid as a quasi-static flux sweep in grid order. Below the
  // fold onset this is identical to the default; above it the screening
  // state rides the occupied branch and snaps at fold edges, so the curve
  // is hysteretic in the sweep direction and responsivity falls back to
  // grid differences.
  bool swept = false;
};

// Tuning curve over an ascending applied-flux grid: screening solve,
// inductance, participation ratio, frequency, and central-difference
// responsivity (step Phi0 / 2000) per point.
std::vector<TuningPoint> tuning_curve(const FtrParams& params,
                                      const std::vector<double>& Phi_e,
                                      const TuningCurveOptions& opt = {});

// Measured resonance frequency against applied bias current.
struct TuningData {
  double bias_current;  // [A]
  double f_r;           // [Hz]
};

struct TuningCurveFit {
  double A = 0.0;
  double alpha = 0.0;
  double I0 = 0.0;      // [A]
  double Lg = 0.0;      // [H]
  double I_off = 0.0;   // [A]
  double I_Phi0 = 0.0;  // [A] per flux quantum
  double rms_residual_hz = 0.0;
  int iterations = 0;
  bool converged = false;
  bool at_bound = false;  // a transformed parameter ran into its limit
};

// Least-squares fit of {A, alpha, I0, Lg, I_off, I_Phi0} to a measured
// tuning curve; CPW parameters stay fixed at their design values. The flux
// axis is calibrated as Phi_e = Phi0 (I - I_off) / I_Phi0. Requires at least
// 8 points spanning half a period of the initial I_Phi0 guess.
TuningCurveFit fit_tuning_curve(const std::vector<TuningData>& data,
                                const FtrParams& guess, double I_off_guess,
                                double I_Phi0_guess);

// Linear power dependence of the resonance: omega_r(n) = omega_r0 - K n.
struct KerrModel {
  double omega_r0;  // [rad/s]
  double K;         // [rad/s per photon]
};
double kerr_shift(const KerrModel& model, double n);

}  // namespace ftrlab::ftr
