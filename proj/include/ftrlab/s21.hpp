#pragma once

#include <complex>
#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "ftrlab/ftr.hpp"
#include "ftrlab/magnetics.hpp"

namespace ftrlab::s21 {

using Complex = std::complex<double>;

// One complex transmission trace. freqs must be strictly increasing and the
// same length as s21; fitting entry points additionally require at least 16
// samples. power_at_device is the microwave power reaching the resonator
// input, already corrected for line attenuation.
struct ComplexTrace {
  std::vector<double> freqs;  // [Hz]
  std::vector<Complex> s21;   // linear units
  std::optional<double> power_at_device;  // [W]
  double bias_current = 0.0;              // [A]
  double attenuation_db = 0.0;            // metadata only, applied upstream

  std::size_t size() const { return freqs.size(); }
};

// Smooth complex baseline multiplying the ideal response:
//   S_bg(f) = (a0 + a1 (f - f0)) * exp(i (phi0 - 2 pi tau (f - f0))).
// Positive tau is a cable delay, winding phase clockwise with increasing
// frequency. remove() then apply() is the identity to 1e-12.
struct BackgroundModel {
  double a0 = 1.0;    // amplitude at f0
  double a1 = 0.0;    // amplitude slope [1/Hz]
  double phi0 = 0.0;  // phase at f0 [rad]
  double tau = 0.0;   // delay [s]
  double f0 = 0.0;    // reference frequency [Hz]

  Complex at(double f) const;
  ComplexTrace remove(const ComplexTrace& trace) const;
  ComplexTrace apply(const ComplexTrace& trace) const;
};

// Background estimation and removal. narrow_span is a warning, not an error:
// the resonance fills most of the window, so the off-resonant baseline
// samples are contaminated and the correction is degraded.
struct BackgroundCorrection {
  ComplexTrace trace;
  BackgroundModel background;
  bool narrow_span = false;
};

// Estimates the baseline from the outer 10% of samples on each edge of the
// trace (linear fit to unwrapped phase for phi0/tau, linear fit to |S21| for
// a0/a1, both about the window center f0) and divides it out. Requires the
// edges to be off-resonant, i.e. a span of roughly ten linewidths or more.
BackgroundCorrection correct_background(const ComplexTrace& trace);

// Circle in the complex plane.
struct Circle {
  Complex center;
  double radius = 0.0;
};

// Algebraic least-squares circle fit with Taubin normalization: exact on
// noiseless circles, low bias on partial arcs. Needs at least 3 points;
// throws GeometryError for collinear or degenerate input.
Circle fit_circle_algebraic(const std::vector<Complex>& points);

// Result of a linear notch-resonance fit,
//   S21(f) = 1 - (Q_L / Q_c_abs) e^{-i phi} / (1 + 2 i Q_L (f - f_r) / f_r).
// center and r0 describe the measured circle after normalizing the
// off-resonant point to 1 + 0i: center is the circle center in that frame,
// r0 the matched radius (radial distances scaled by cos phi), which obeys
// r0 = Q_L / (2 Q_c_eff) up to the soft-constraint tolerance.
struct ResonatorFit {
  double f_r = 0.0;      // [Hz]
  double Q_L = 0.0;      // loaded quality factor
  double Q_c_abs = 0.0;  // magnitude of the complex coupling Q
  double phi = 0.0;      // impedance-mismatch angle [rad]
  double Q_c_eff = 0.0;  // Q_c_abs / cos(phi)
  double Q_i = 0.0;      // internal quality factor
  Complex center;        // normalized circle center
  double r0 = 0.0;       // matched circle radius
  double residual = 0.0;  // RMS complex residual of the final model fit
  bool overcoupled = false;  // Q_i > Q_c_eff: Q_i carries extra systematics
};

// Ideal notch model evaluated at f; the shared forward model for fits and
// synthetic data.
Complex s21_linear(double f, double f_r, double Q_L, double Q_c_abs,
                   double phi);

// Full linear extraction on a background-corrected trace: algebraic circle
// fit, off-resonant normalization, mismatch angle from the circle center,
// (f_r, Q_L) from the phase winding around the center, and a final complex
// least-squares refinement with the radius identity as a soft penalty.
// Throws FitError when no resonance stands out of the noise floor.
ResonatorFit fit_linear_resonance(const ComplexTrace& trace);

// Internal quality factor from 1/Q_i = 1/Q_L - cos(phi)/Q_c_abs. Throws
// FitError when the right-hand side is not positive (fitted coupling
// stronger than the total loss, an overcoupling inconsistency).
double qi_from(double Q_L, double Q_c_abs, double phi);

// Driven Kerr resonator parameters. kappa >= kappa_c > 0; K > 0 shifts the
// resonance down with increasing photon number.
struct DuffingParams {
  double f_r0;      // zero-photon resonance [Hz]
  double kappa;     // total linewidth [rad/s]
  double kappa_c;   // coupling linewidth [rad/s]
  double K;         // Kerr coefficient [rad/s per photon]

  DuffingParams(double f_r0_, double kappa_, double kappa_c_, double K_);
};

struct DuffingRoot {
  double n = 0.0;  // intracavity photon number
  bool stable = false;
};

// All real nonnegative roots of the steady-state cubic
//   K^2 n^3 - 2 Delta K n^2 + (Delta^2 + kappa^2/4) n - kappa_c s_in_sq = 0,
// ascending, each back-substituted to a relative residual below 1e-9.
// With three roots the smallest and largest are dynamically stable and the
// middle one is not; a single root is stable. K = 0 reduces to the linear
// response. Delta in rad/s, s_in_sq in photons/s.
std::vector<DuffingRoot> duffing_roots(double Delta, double kappa,
                                       double kappa_c, double K,
                                       double s_in_sq);

enum class Branch { low, high };

// Steady-state photon number for drive power P_g at frequency f: the photon
// flux is P_g / (hbar 2 pi f) and the cubic is solved at
// Delta = 2 pi (f - f_r0). branch picks the stable root when the response is
// bistable; low matches an upward power sweep.
double photon_number(double P_g, double f, const DuffingParams& params,
                     Branch branch = Branch::low);

// Linear notch response evaluated at the Kerr-shifted resonance
// f_r0 - (K / 2 pi) n, in the matched (phi = 0) representation:
//   1 - (kappa_c / 2) / (kappa / 2 + i 2 pi (f - f_shifted)).
// At n = 0 this equals s21_linear with Q_L = omega/kappa, Q_c = omega/kappa_c.
Complex s21_nonlinear(double f, const DuffingParams& params, double n);

// One power point of a Kerr sweep fit. fit carries the per-trace linear
// extraction, except that f_r is the interpolated |S21| minimum: on a driven
// trace the whole-window fit is pulled toward the zero-photon resonance,
// while the dip itself sits at the shifted frequency. n is the photon number
// assigned at that dip; excluded points (bistable fold detected in the raw
// trace) do not enter the slope fit.
struct PowerPointFit {
  double power = 0.0;  // at device [W]
  ResonatorFit fit;
  double n = 0.0;
  bool excluded = false;
};

struct KerrSweepFit {
  double K = 0.0;     // [rad/s per photon]
  double f_r0 = 0.0;  // zero-photon resonance [Hz]
  std::vector<PowerPointFit> points;
  int iterations = 0;
};

// Kerr coefficient from a power sweep: per-power linear fits give the
// linewidths, the tracked dip gives f_r(P), photon numbers come from the
// steady-state cubic evaluated at that dip, and a weighted straight line
// through (n, f_r) yields -K/2pi and f_r0. The photon assignment and the
// (K, f_r0) line are iterated to self-consistency. Requires >= 4 usable
// powers spanning >= 10x in photon number, each trace carrying
// power_at_device.
KerrSweepFit fit_kerr_power_sweep(const std::vector<ComplexTrace>& traces);

// Two-level-system saturation model for the internal quality factor,
//   1/Q_i(n) = delta0 + deltaTLS / (1 + (n / n_star)^beta_exp),
// monotone nondecreasing in n for admissible (nonnegative) parameters.
struct TlsModel {
  double delta0;    // residual loss
  double deltaTLS;  // low-power TLS loss
  double beta_exp;  // saturation exponent
  double n_star;    // saturation photon number

  TlsModel(double delta0_, double deltaTLS_, double beta_exp_,
           double n_star_);

  double qi(double n) const;
  double qi_low_power() const;   // 1 / (delta0 + deltaTLS)
  double qi_high_power() const;  // 1 / delta0 (infinite when delta0 = 0)
};

struct TlsPoint {
  double n = 0.0;    // intracavity photon number
  double Q_i = 0.0;
};

// Least-squares fit of the saturation model to (n, Q_i) points, relative
// residuals on 1/Q_i. Requires >= 6 points spanning >= 2 decades in n.
// Throws FitError on non-convergence.
TlsModel fit_tls(const std::vector<TlsPoint>& points);

// Flux-axis calibration from a resonance-versus-current map: the period
// I_Phi0 comes from the dominant nonzero peak of the periodogram of f_r(I),
// refined by a single-harmonic least-squares fit; the offset I_off is the
// frequency maximum (zero-flux point) nearest I = 0. Needs at least 1.5
// periods of modulation; throws CalibrationError when no periodicity stands
// out.
mag::FluxCalibration extract_period(const std::vector<ftr::TuningData>& map);

}  // namespace ftrlab::s21
