#include "ftrlab/s21.hpp"

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>

#include "ftrlab/constants.hpp"
#include "ftrlab/errors.hpp"
#include "ftrlab/levmar.hpp"

namespace ftrlab::s21 {

namespace {

constexpr double kTwoPi = 2.0 * kPi;

void check_trace(const ComplexTrace& t, std::size_t min_points,
                 const char* where) {
  if (t.freqs.size() != t.s21.size()) {
    throw DomainError(std::string(where) +
                      ": freqs and s21 have different lengths");
  }
  if (t.freqs.size() < min_points) {
    throw DomainError(std::string(where) + ": need at least " +
                      std::to_string(min_points) + " samples, got " +
                      std::to_string(t.freqs.size()));
  }
  for (std::size_t i = 0; i < t.freqs.size(); ++i) {
    if (!std::isfinite(t.freqs[i]) || !std::isfinite(t.s21[i].real()) ||
        !std::isfinite(t.s21[i].imag())) {
      throw DomainError(std::string(where) + ": non-finite sample");
    }
    if (i > 0 && !(t.freqs[i] > t.freqs[i - 1])) {
      throw DomainError(std::string(where) +
                        ": freqs must be strictly increasing");
    }
  }
}

std::size_t edge_count(std::size_t n) {
  return std::max<std::size_t>(3, n / 10);
}

// Indices of the outer `ne` samples on each edge.
std::vector<std::size_t> edge_indices(std::size_t n, std::size_t ne) {
  std::vector<std::size_t> idx;
  idx.reserve(2 * ne);
  for (std::size_t i = 0; i < ne; ++i) idx.push_back(i);
  for (std::size_t i = n - ne; i < n; ++i) idx.push_back(i);
  return idx;
}

struct Line {
  double intercept = 0.0;  // value at x = 0
  double slope = 0.0;
};

// Ordinary least-squares line through (x[i], y[i]) for i in idx.
Line fit_line(const std::vector<double>& x, const std::vector<double>& y,
              const std::vector<std::size_t>& idx) {
  double sx = 0.0, sy = 0.0;
  for (std::size_t i : idx) {
    sx += x[i];
    sy += y[i];
  }
  const double n = static_cast<double>(idx.size());
  const double mx = sx / n, my = sy / n;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i : idx) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) return {my, 0.0};
  const double slope = sxy / sxx;
  return {my - slope * mx, slope};
}

// Sequential phase unwrap: adjacent steps are folded into (-pi, pi].
std::vector<double> unwrapped_arg(const std::vector<Complex>& z) {
  std::vector<double> theta(z.size());
  theta[0] = std::arg(z[0]);
  for (std::size_t i = 1; i < z.size(); ++i) {
    double d = std::arg(z[i]) - std::arg(z[i - 1]);
    d -= kTwoPi * std::round(d / kTwoPi);
    theta[i] = theta[i - 1] + d;
  }
  return theta;
}

double median_of(std::vector<double> v) {
  const std::size_t m = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + m, v.end());
  return v[m];
}

}  // namespace

Complex BackgroundModel::at(double f) const {
  const double df = f - f0;
  const double amp = a0 + a1 * df;
  return amp * std::exp(Complex(0.0, phi0 - kTwoPi * tau * df));
}

ComplexTrace BackgroundModel::remove(const ComplexTrace& trace) const {
  ComplexTrace out = trace;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Complex bg = at(out.freqs[i]);
    if (std::abs(bg) == 0.0) {
      throw DomainError("BackgroundModel: baseline vanishes inside the trace");
    }
    out.s21[i] /= bg;
  }
  return out;
}

ComplexTrace BackgroundModel::apply(const ComplexTrace& trace) const {
  ComplexTrace out = trace;
  for (std::size_t i = 0; i < out.size(); ++i) out.s21[i] *= at(out.freqs[i]);
  return out;
}

BackgroundCorrection correct_background(const ComplexTrace& trace) {
  check_trace(trace, 16, "correct_background");
  const std::size_t n = trace.size();
  const auto idx = edge_indices(n, edge_count(n));
  const double f0 = 0.5 * (trace.freqs.front() + trace.freqs.back());

  std::vector<double> df(n), mag(n);
  for (std::size_t i = 0; i < n; ++i) {
    df[i] = trace.freqs[i] - f0;
    mag[i] = std::abs(trace.s21[i]);
  }
  const std::vector<double> theta = unwrapped_arg(trace.s21);

  const Line phase = fit_line(df, theta, idx);
  const Line amp = fit_line(df, mag, idx);
  if (!(amp.intercept > 0.0)) {
    throw DomainError("correct_background: nonpositive baseline amplitude");
  }

  BackgroundModel bg;
  bg.a0 = amp.intercept;
  bg.a1 = amp.slope;
  bg.phi0 = phase.intercept;
  bg.tau = -phase.slope / kTwoPi;
  bg.f0 = f0;

  BackgroundCorrection out;
  out.background = bg;
  out.trace = bg.remove(trace);

  // Window-crowding check: after correction the edge samples should sit on
  // the baseline. When their residual deviation is a sizable fraction of the
  // deepest point, the window is only a few linewidths wide and the baseline
  // estimate absorbed part of the resonance.
  double dev_max = 0.0;
  for (const Complex& z : out.trace.s21) {
    dev_max = std::max(dev_max, std::abs(z - 1.0));
  }
  double edge_dev = 0.0;
  for (std::size_t i : idx) {
    edge_dev = std::max(edge_dev, std::abs(out.trace.s21[i] - 1.0));
  }
  out.narrow_span = dev_max > 0.02 && edge_dev > 0.1 * dev_max;
  return out;
}

Circle fit_circle_algebraic(const std::vector<Complex>& points) {
  const std::size_t n = points.size();
  if (n < 3) throw GeometryError("circle fit needs at least 3 points");
  double mx = 0.0, my = 0.0;
  for (const Complex& p : points) {
    if (!std::isfinite(p.real()) || !std::isfinite(p.imag())) {
      throw DomainError("circle fit: non-finite point");
    }
    mx += p.real();
    my += p.imag();
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);

  double Mxx = 0.0, Myy = 0.0, Mxy = 0.0, Mxz = 0.0, Myz = 0.0, Mzz = 0.0;
  for (const Complex& p : points) {
    const double u = p.real() - mx;
    const double v = p.imag() - my;
    const double z = u * u + v * v;
    Mxx += u * u;
    Myy += v * v;
    Mxy += u * v;
    Mxz += u * z;
    Myz += v * z;
    Mzz += z * z;
  }
  const double inv_n = 1.0 / static_cast<double>(n);
  Mxx *= inv_n;
  Myy *= inv_n;
  Mxy *= inv_n;
  Mxz *= inv_n;
  Myz *= inv_n;
  Mzz *= inv_n;

  // Collinear or coincident input: the 2x2 position covariance is rank
  // deficient and no finite circle exists.
  const double tr = Mxx + Myy;
  const double det2 = Mxx * Myy - Mxy * Mxy;
  const double gap = std::sqrt(std::max(0.0, 0.25 * tr * tr - det2));
  const double lam_min = 0.5 * tr - gap;
  const double lam_max = 0.5 * tr + gap;
  if (!(lam_max > 0.0) || lam_min <= 1e-12 * lam_max) {
    throw GeometryError("circle fit: degenerate (collinear) input");
  }

  // Taubin normalization: Newton iteration on the characteristic polynomial
  // from x = 0 finds its smallest nonnegative root.
  const double Mz = Mxx + Myy;
  const double Cov_xy = det2;
  const double Var_z = Mzz - Mz * Mz;
  const double A3 = 4.0 * Mz;
  const double A2 = -3.0 * Mz * Mz - Mzz;
  const double A1 = Var_z * Mz + 4.0 * Cov_xy * Mz - Mxz * Mxz - Myz * Myz;
  const double A0 = Mxz * (Mxz * Myy - Myz * Mxy) +
                    Myz * (Myz * Mxx - Mxz * Mxy) - Var_z * Cov_xy;
  const double A22 = A2 + A2;
  const double A33 = A3 + A3 + A3;

  double x = 0.0, y = A0;
  for (int it = 0; it < 99; ++it) {
    const double dy = A1 + x * (A22 + A33 * x);
    const double xnew = x - y / dy;
    if (!std::isfinite(xnew) || xnew == x) break;
    const double ynew = A0 + xnew * (A1 + xnew * (A2 + xnew * A3));
    if (std::abs(ynew) >= std::abs(y)) break;
    x = xnew;
    y = ynew;
  }

  const double det = x * x - x * Mz + Cov_xy;
  if (!std::isfinite(det) || std::abs(det) < 1e-14 * std::max(Mz * Mz, 1e-300)) {
    throw GeometryError("circle fit: degenerate normal equations");
  }
  const double uc = (Mxz * (Myy - x) - Myz * Mxy) / det / 2.0;
  const double vc = (Myz * (Mxx - x) - Mxz * Mxy) / det / 2.0;
  Circle c;
  c.center = Complex(uc + mx, vc + my);
  c.radius = std::sqrt(uc * uc + vc * vc + Mz);
  if (!std::isfinite(c.radius) || !(c.radius > 0.0)) {
    throw GeometryError("circle fit: collapsed radius");
  }
  return c;
}

Complex s21_linear(double f, double f_r, double Q_L, double Q_c_abs,
                   double phi) {
  if (!(f_r > 0.0) || !(Q_L > 0.0) || !(Q_c_abs > 0.0)) {
    throw DomainError("s21_linear: f_r, Q_L, Q_c_abs must be positive");
  }
  const double x = (f - f_r) / f_r;
  return 1.0 - (Q_L / Q_c_abs) * std::exp(Complex(0.0, -phi)) /
                   Complex(1.0, 2.0 * Q_L * x);
}

double qi_from(double Q_L, double Q_c_abs, double phi) {
  if (!(Q_L > 0.0) || !(Q_c_abs > 0.0)) {
    throw DomainError("qi_from: quality factors must be positive");
  }
  const double inv = 1.0 / Q_L - std::cos(phi) / Q_c_abs;
  if (!(inv > 0.0)) {
    std::ostringstream msg;
    msg << "qi_from: coupling accounts for the entire loss (1/Q_i = " << inv
        << "), internal Q diverges";
    throw FitError(msg.str());
  }
  return 1.0 / inv;
}

namespace {

// Phase model around the circle center: theta0 + 2 atan(2 Q_L (1 - f/f_r)).
struct PhaseFitResult {
  double theta0 = 0.0;
  double Q_L = 0.0;
  double f_r = 0.0;
};

PhaseFitResult fit_phase(const std::vector<double>& freqs,
                         const std::vector<double>& theta, double f_r_init,
                         double Q_L_init, double theta0_init) {
  const std::size_t n = freqs.size();
  ResidualFn residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(n);
    if (!(p[1] > 0.0) || !(p[2] > 0.0)) {
      r.setConstant(1e6);
      return r;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double model =
          p[0] + 2.0 * std::atan(2.0 * p[1] * (1.0 - freqs[i] / p[2]));
      r[static_cast<Eigen::Index>(i)] = theta[i] - model;
    }
    return r;
  };
  Eigen::VectorXd p0(3);
  p0 << theta0_init, Q_L_init, f_r_init;
  LevmarOptions opt;
  opt.max_iterations = 200;
  const LevmarResult res = levmar(residuals, p0, opt);
  if (!res.converged && res.cost > 1e-3 * static_cast<double>(n)) {
    throw FitError("phase-versus-frequency fit did not converge", res.trace);
  }
  return {res.p[0], res.p[1], res.p[2]};
}

}  // namespace

ResonatorFit fit_linear_resonance(const ComplexTrace& trace) {
  check_trace(trace, 16, "fit_linear_resonance");
  const std::size_t n = trace.size();
  const auto& f = trace.freqs;
  const auto idx = edge_indices(n, edge_count(n));

  // Noise floor: detrended |S21| scatter on the off-resonant edges.
  std::vector<double> mag(n);
  for (std::size_t i = 0; i < n; ++i) mag[i] = std::abs(trace.s21[i]);
  const Line edge_line = fit_line(f, mag, idx);
  double ss = 0.0;
  for (std::size_t i : idx) {
    const double r = mag[i] - (edge_line.intercept + edge_line.slope * f[i]);
    ss += r * r;
  }
  const double noise_floor =
      std::max(std::sqrt(ss / static_cast<double>(idx.size())), 1e-12);
  double dev_max = 0.0;
  for (const Complex& z : trace.s21) {
    dev_max = std::max(dev_max, std::abs(z - 1.0));
  }
  if (dev_max < 5.0 * noise_floor) {
    throw FitError("fit_linear_resonance: no resonance above the noise floor");
  }

  const Circle raw = fit_circle_algebraic(trace.s21);

  // Off-resonant reference: edge mean projected onto the fitted circle, then
  // normalized to 1 + 0i.
  Complex edge_mean = 0.0;
  for (std::size_t i : idx) edge_mean += trace.s21[i];
  edge_mean /= static_cast<double>(idx.size());
  const Complex to_edge = edge_mean - raw.center;
  if (std::abs(to_edge) == 0.0) {
    throw FitError("fit_linear_resonance: off-resonant point indeterminate");
  }
  const Complex p_off = raw.center + raw.radius * to_edge / std::abs(to_edge);
  if (std::abs(p_off) == 0.0) {
    throw FitError("fit_linear_resonance: circle passes through the origin");
  }

  const Complex center = raw.center / p_off;
  const double r_norm = raw.radius / std::abs(p_off);
  std::vector<Complex> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = trace.s21[i] / p_off;

  const Complex lever = 1.0 - center;
  if (std::abs(lever) == 0.0) {
    throw FitError("fit_linear_resonance: circle centered on the reference");
  }
  double phi = -std::arg(lever);
  if (!(std::abs(phi) < 0.5 * kPi)) {
    throw FitError("fit_linear_resonance: mismatch angle outside (-pi/2, pi/2)");
  }

  // Initial (f_r, Q_L): deepest point and the width where the deviation from
  // the reference falls to 1/sqrt(2) of its maximum.
  std::vector<double> dev(n);
  std::size_t i_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dev[i] = std::abs(w[i] - 1.0);
    if (dev[i] > dev[i_res]) i_res = i;
  }
  const double f_r_init = f[i_res];
  const double target = dev[i_res] / std::sqrt(2.0);
  double f_left = f.front(), f_right = f.back();
  bool found_left = false, found_right = false;
  for (std::size_t i = i_res; i-- > 0;) {
    if (dev[i] <= target) {
      const double t = (target - dev[i]) / (dev[i + 1] - dev[i]);
      f_left = f[i] + t * (f[i + 1] - f[i]);
      found_left = true;
      break;
    }
  }
  for (std::size_t i = i_res + 1; i < n; ++i) {
    if (dev[i] <= target) {
      const double t = (dev[i - 1] - target) / (dev[i - 1] - dev[i]);
      f_right = f[i - 1] + t * (f[i] - f[i - 1]);
      found_right = true;
      break;
    }
  }
  double Q_L_init = (found_left && found_right && f_right > f_left)
                        ? f_r_init / (f_right - f_left)
                        : 4.0 * f_r_init / (f.back() - f.front());

  std::vector<double> theta(n);
  {
    std::vector<Complex> spokes(n);
    for (std::size_t i = 0; i < n; ++i) spokes[i] = w[i] - center;
    theta = unwrapped_arg(spokes);
  }
  const PhaseFitResult ph =
      fit_phase(f, theta, f_r_init, Q_L_init, theta[i_res]);

  const double r_matched = r_norm * std::cos(phi);
  if (!(r_matched > 0.0)) {
    throw FitError("fit_linear_resonance: matched radius collapsed");
  }
  double Q_L = ph.Q_L;
  double f_r = ph.f_r;
  double Q_c_eff = Q_L / (2.0 * r_matched);
  double Q_c_abs = Q_c_eff * std::cos(phi);

  // Final complex least squares on the notch model; the measured matched
  // radius enters as a soft constraint whose weight is set to the mean
  // squared data residual of a first pass. Two nuisance parameters absorb
  // residual background the edge-based correction cannot see (the mismatch
  // angle tilts the off-resonant magnitude asymmetrically, which aliases
  // into the estimated amplitude slope): a relative amplitude tilt p[4] and
  // a phase slope p[5], both expressed at the window edge.
  const double fc = 0.5 * (f.front() + f.back());
  const double half_span = 0.5 * (f.back() - f.front());
  const auto model_residuals = [&](const Eigen::VectorXd& p, double weight) {
    Eigen::VectorXd r(2 * n + 1);
    if (!(p[0] > 0.0) || !(p[1] > 0.0) || !(p[2] > 0.0) ||
        !(std::cos(p[3]) > 1e-3) || !(std::abs(p[4]) < 0.9) ||
        !(std::abs(p[5]) < 1.5)) {
      r.setConstant(1e6);
      return r;
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double u = (f[i] - fc) / half_span;
      const Complex base =
          (1.0 + p[4] * u) * std::exp(Complex(0.0, p[5] * u));
      const Complex m = base * s21_linear(f[i], p[0], p[1], p[2], p[3]);
      r[static_cast<Eigen::Index>(2 * i)] = w[i].real() - m.real();
      r[static_cast<Eigen::Index>(2 * i + 1)] = w[i].imag() - m.imag();
    }
    r[static_cast<Eigen::Index>(2 * n)] =
        std::sqrt(weight) * (r_matched - p[1] * std::cos(p[3]) / (2.0 * p[2]));
    return r;
  };

  Eigen::VectorXd p0(6);
  p0 << f_r, Q_L, Q_c_abs, phi, 0.0, 0.0;
  LevmarOptions opt;
  opt.max_iterations = 300;
  double weight = 1.0;
  LevmarResult res;
  for (int pass = 0; pass < 2; ++pass) {
    const double w_pass = weight;
    res = levmar([&](const Eigen::VectorXd& p) {
      return model_residuals(p, w_pass);
    }, p0, opt);
    if (!res.converged && pass == 1) {
      throw FitError("fit_linear_resonance: complex refinement did not converge",
                     res.trace);
    }
    double data_ss = 0.0;
    const Eigen::VectorXd rr = model_residuals(res.p, 0.0);
    for (std::size_t i = 0; i < 2 * n; ++i) {
      data_ss += rr[static_cast<Eigen::Index>(i)] *
                 rr[static_cast<Eigen::Index>(i)];
    }
    weight = data_ss / static_cast<double>(2 * n);
    p0 = res.p;
  }

  ResonatorFit fit;
  fit.f_r = res.p[0];
  fit.Q_L = res.p[1];
  fit.Q_c_abs = res.p[2];
  fit.phi = res.p[3];
  fit.Q_c_eff = fit.Q_c_abs / std::cos(fit.phi);
  fit.Q_i = qi_from(fit.Q_L, fit.Q_c_abs, fit.phi);
  fit.center = center;
  fit.r0 = r_matched;
  double data_ss = 0.0;
  const Eigen::VectorXd rr = model_residuals(res.p, 0.0);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    data_ss +=
        rr[static_cast<Eigen::Index>(i)] * rr[static_cast<Eigen::Index>(i)];
  }
  fit.residual = std::sqrt(data_ss / static_cast<double>(n));
  fit.overcoupled = fit.Q_i > fit.Q_c_eff;
  return fit;
}

DuffingParams::DuffingParams(double f_r0_, double kappa_, double kappa_c_,
                             double K_)
    : f_r0(f_r0_), kappa(kappa_), kappa_c(kappa_c_), K(K_) {
  if (!std::isfinite(f_r0) || !std::isfinite(kappa) || !std::isfinite(kappa_c) ||
      !std::isfinite(K)) {
    throw DomainError("DuffingParams: non-finite parameter");
  }
  if (!(f_r0 > 0.0)) throw DomainError("DuffingParams: f_r0 must be positive");
  if (!(kappa_c > 0.0) || !(kappa >= kappa_c)) {
    throw DomainError("DuffingParams: need kappa >= kappa_c > 0");
  }
}

std::vector<DuffingRoot> duffing_roots(double Delta, double kappa,
                                       double kappa_c, double K,
                                       double s_in_sq) {
  if (!std::isfinite(Delta) || !std::isfinite(K)) {
    throw DomainError("duffing_roots: non-finite parameter");
  }
  if (!(kappa > 0.0) || !(kappa_c > 0.0) || !(kappa >= kappa_c)) {
    throw DomainError("duffing_roots: need kappa >= kappa_c > 0");
  }
  if (!(s_in_sq >= 0.0)) throw DomainError("duffing_roots: negative drive");

  const double c2 = Delta * Delta + 0.25 * kappa * kappa;
  if (K == 0.0) return {{kappa_c * s_in_sq / c2, true}};
  if (s_in_sq == 0.0) return {{0.0, true}};

  // Monic cubic n^3 + B n^2 + C n + D, then rescaled so the companion matrix
  // is well conditioned for any K.
  const double B = -2.0 * Delta / K;
  const double C = c2 / (K * K);
  const double D = -kappa_c * s_in_sq / (K * K);
  const double ns =
      std::max({std::abs(B), std::sqrt(C), std::cbrt(std::abs(D))});
  const double b = B / ns;
  const double c = C / (ns * ns);
  const double d = D / (ns * ns * ns);

  // Real-root count from the discriminant of the scaled cubic; the companion
  // eigenvalues then supply starting points for a Newton polish.
  const double disc = 18.0 * b * c * d - 4.0 * b * b * b * d + b * b * c * c -
                      4.0 * c * c * c - 27.0 * d * d;

  Eigen::Matrix3d comp;
  comp << 0.0, 0.0, -d, 1.0, 0.0, -c, 0.0, 1.0, -b;
  const Eigen::EigenSolver<Eigen::Matrix3d> es(comp);
  if (es.info() != Eigen::Success) {
    throw SolverError("duffing_roots: eigenvalue solve failed");
  }
  const auto lam = es.eigenvalues();

  std::vector<double> scaled;
  if (disc >= 0.0) {
    for (int i = 0; i < 3; ++i) scaled.push_back(lam[i].real());
  } else {
    int best = 0;
    for (int i = 1; i < 3; ++i) {
      if (std::abs(lam[i].imag()) < std::abs(lam[best].imag())) best = i;
    }
    scaled.push_back(lam[best].real());
  }

  std::vector<DuffingRoot> roots;
  for (double m : scaled) {
    // Relative step criterion: when |K| is far below the linear scales the
    // physical root is many orders below ns and the eigenvalue only gives
    // its magnitude, so the polish must converge in the root's own scale.
    for (int it = 0; it < 60; ++it) {
      const double pv = d + m * (c + m * (b + m));
      const double dv = c + m * (2.0 * b + 3.0 * m);
      if (dv == 0.0) break;
      const double step = pv / dv;
      m -= step;
      if (std::abs(step) < 1e-15 * std::abs(m)) break;
    }
    const double n = m * ns;
    if (n < 0.0) continue;
    const double term3 = K * K * n * n * n;
    const double term2 = -2.0 * Delta * K * n * n;
    const double term1 = c2 * n;
    const double term0 = -kappa_c * s_in_sq;
    const double res = term3 + term2 + term1 + term0;
    const double scale = std::max({std::abs(term3), std::abs(term2),
                                   std::abs(term1), std::abs(term0)});
    if (std::abs(res) > 1e-9 * scale) {
      throw SolverError(
          "duffing_roots: back-substitution residual too large (rel " +
          std::to_string(std::abs(res) / scale) +
          " at Delta=" + std::to_string(Delta) + ", K=" + std::to_string(K) +
          ", s=" + std::to_string(s_in_sq) + ")");
    }
    roots.push_back({n, true});
  }
  std::sort(roots.begin(), roots.end(),
            [](const DuffingRoot& x, const DuffingRoot& y) { return x.n < y.n; });
  if (roots.size() == 3) roots[1].stable = false;
  return roots;
}

double photon_number(double P_g, double f, const DuffingParams& params,
                     Branch branch) {
  if (!(P_g >= 0.0)) throw DomainError("photon_number: negative power");
  if (!(f > 0.0)) throw DomainError("photon_number: frequency must be positive");
  if (P_g == 0.0) return 0.0;
  const double s = P_g / (PhysicalConstants::hbar * kTwoPi * f);
  const double Delta = kTwoPi * (f - params.f_r0);
  const auto roots =
      duffing_roots(Delta, params.kappa, params.kappa_c, params.K, s);
  return branch == Branch::low ? roots.front().n : roots.back().n;
}

Complex s21_nonlinear(double f, const DuffingParams& params, double n) {
  if (!(n >= 0.0)) throw DomainError("s21_nonlinear: negative photon number");
  const double f_shift = params.f_r0 - params.K / kTwoPi * n;
  return 1.0 - 0.5 * params.kappa_c /
                   Complex(0.5 * params.kappa, kTwoPi * (f - f_shift));
}

namespace {

struct WeightedLine {
  double intercept = 0.0;
  double slope = 0.0;
};

WeightedLine fit_weighted_line(const std::vector<double>& x,
                               const std::vector<double>& y,
                               const std::vector<double>& wgt) {
  double sw = 0.0, swx = 0.0, swy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sw += wgt[i];
    swx += wgt[i] * x[i];
    swy += wgt[i] * y[i];
  }
  const double mx = swx / sw, my = swy / sw;
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxx += wgt[i] * (x[i] - mx) * (x[i] - mx);
    sxy += wgt[i] * (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0) throw FitError("degenerate abscissa in line fit");
  const double slope = sxy / sxx;
  return {my - slope * mx, slope};
}

// A fold in a swept trace is one isolated adjacent-sample jump: far above
// the median step (noise floor), far above the runner-up step (a smooth dip
// has many near-equal large steps, a fold has exactly one), and a
// non-negligible fraction of the dip depth (guards against numerical dust on
// near-flat traces).
bool fold_detected(const ComplexTrace& t) {
  std::vector<double> diffs(t.size() - 1);
  for (std::size_t i = 0; i + 1 < t.size(); ++i) {
    diffs[i] = std::abs(t.s21[i + 1] - t.s21[i]);
  }
  const double med = median_of(diffs);
  std::nth_element(diffs.begin(), diffs.end() - 2, diffs.end());
  const double second = *(diffs.end() - 2);
  const double dmax = *(diffs.end() - 1) > second ? *(diffs.end() - 1) : second;
  double depth = 0.0;
  for (const Complex& z : t.s21) depth = std::max(depth, std::abs(z - 1.0));
  return dmax > 8.0 * med + 1e-12 && dmax > 2.0 * second &&
         dmax > 0.02 * depth;
}

// Interpolated |S21| minimum: quadratic least squares over the samples
// within a fraction of a linewidth of the deepest point, falling back to a
// three-point parabola (or the grid point itself) when the dip is barely
// sampled.
double dip_frequency(const ComplexTrace& t, double linewidth) {
  std::size_t k = 0;
  double best = std::abs(t.s21[0]);
  for (std::size_t i = 1; i < t.size(); ++i) {
    const double m = std::abs(t.s21[i]);
    if (m < best) {
      best = m;
      k = i;
    }
  }
  const double window = 0.35 * linewidth;
  std::vector<double> x, y;
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (std::abs(t.freqs[i] - t.freqs[k]) <= window) {
      x.push_back(t.freqs[i] - t.freqs[k]);
      y.push_back(std::abs(t.s21[i]));
    }
  }
  if (x.size() >= 5) {
    Eigen::MatrixXd A(x.size(), 3);
    Eigen::VectorXd b(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double u = x[i] / window;
      A(static_cast<Eigen::Index>(i), 0) = 1.0;
      A(static_cast<Eigen::Index>(i), 1) = u;
      A(static_cast<Eigen::Index>(i), 2) = u * u;
      b[static_cast<Eigen::Index>(i)] = y[i];
    }
    const Eigen::Vector3d c = A.colPivHouseholderQr().solve(b);
    if (c[2] > 0.0) {
      const double vertex = -0.5 * c[1] / c[2];
      if (std::abs(vertex) <= 1.0) return t.freqs[k] + vertex * window;
    }
  }
  if (k > 0 && k + 1 < t.size()) {
    const double ym = std::abs(t.s21[k - 1]);
    const double yp = std::abs(t.s21[k + 1]);
    const double denom = ym - 2.0 * best + yp;
    if (denom > 0.0) {
      const double h = 0.5 * (t.freqs[k + 1] - t.freqs[k - 1]);
      return t.freqs[k] + 0.5 * h * (ym - yp) / denom;
    }
  }
  return t.freqs[k];
}

}  // namespace

KerrSweepFit fit_kerr_power_sweep(const std::vector<ComplexTrace>& traces) {
  if (traces.size() < 4) {
    throw DomainError("fit_kerr_power_sweep: need at least 4 powers");
  }
  std::vector<std::size_t> order(traces.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (const ComplexTrace& t : traces) {
    if (!t.power_at_device.has_value() || !(*t.power_at_device > 0.0)) {
      throw DomainError("fit_kerr_power_sweep: trace without power_at_device");
    }
  }
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return *traces[a].power_at_device < *traces[b].power_at_device;
  });

  KerrSweepFit out;
  out.points.resize(traces.size());
  std::vector<std::size_t> used;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const ComplexTrace& t = traces[order[k]];
    PowerPointFit& pt = out.points[k];
    pt.power = *t.power_at_device;
    pt.excluded = fold_detected(t);
    if (!pt.excluded) {
      pt.fit = fit_linear_resonance(t);
      // The whole-trace fit pulls f_r toward the zero-photon resonance,
      // because the wings of a driven trace follow a smaller photon number
      // than the dip does. The interpolated |S21| minimum is the shifted dip
      // itself, so it replaces the fitted frequency here.
      pt.fit.f_r = dip_frequency(t, pt.fit.f_r / pt.fit.Q_L);
      used.push_back(k);
    }
  }
  if (used.size() < 4) {
    throw FitError(
        "fit_kerr_power_sweep: fewer than 4 usable powers after fold "
        "exclusion");
  }

  // Iterate the photon assignment against the (K, f_r0) line: photon numbers
  // come from the cubic at the fitted dip, which depends on f_r0 and K.
  double K = 0.0;
  double f_r0 = 0.0;
  for (std::size_t k : used) f_r0 = std::max(f_r0, out.points[k].fit.f_r);
  std::vector<double> ns(used.size()), frs(used.size()), wgt(used.size());
  int iters = 0;
  for (int it = 0; it < 20; ++it) {
    ++iters;
    for (std::size_t j = 0; j < used.size(); ++j) {
      const PowerPointFit& pt = out.points[used[j]];
      const double omega_r = kTwoPi * pt.fit.f_r;
      const double kap = omega_r / pt.fit.Q_L;
      const double kap_c = omega_r / pt.fit.Q_c_eff;
      const double s = pt.power / (PhysicalConstants::hbar * omega_r);
      const double Delta = kTwoPi * (pt.fit.f_r - f_r0);
      ns[j] = duffing_roots(Delta, kap, kap_c, K, s).front().n;
      frs[j] = pt.fit.f_r;
      wgt[j] = 1.0 / (pt.fit.residual * pt.fit.residual + 1e-24);
    }
    const WeightedLine line = fit_weighted_line(ns, frs, wgt);
    const double K_new = -kTwoPi * line.slope;
    f_r0 = line.intercept;
    const bool done = std::abs(K_new - K) <=
                      1e-12 * std::max(std::abs(K_new), kTwoPi * 1.0);
    K = K_new;
    if (done) break;
  }
  for (std::size_t j = 0; j < used.size(); ++j) out.points[used[j]].n = ns[j];

  const auto [nmin, nmax] = std::minmax_element(ns.begin(), ns.end());
  if (!(*nmax >= 10.0 * *nmin)) {
    throw DomainError(
        "fit_kerr_power_sweep: powers span less than a decade in photon "
        "number");
  }

  // Global refinement on the full complex traces. Any dip estimator applied
  // to a skewed line shape is pulled by some fraction of the Kerr shift
  // itself, and that fraction feeds straight into the slope. Fitting the
  // driven model to every usable trace at once involves no per-trace
  // frequency estimate at all. Linewidths are power independent, so they are
  // pinned from the lowest usable power, where the per-trace fit is
  // essentially unskewed; f_r0 and K stay free.
  {
    const PowerPointFit& rp = out.points[used.front()];
    const double omega_ref = kTwoPi * rp.fit.f_r;
    const double kap = omega_ref / rp.fit.Q_L;
    const double kap_c = omega_ref / rp.fit.Q_c_abs;
    const Complex tilt = std::exp(Complex(0.0, rp.fit.phi));
    double f_lo = std::numeric_limits<double>::max();
    double f_hi = 0.0;
    std::size_t total = 0;
    for (std::size_t k : used) {
      const ComplexTrace& t = traces[order[k]];
      f_lo = std::min(f_lo, t.freqs.front());
      f_hi = std::max(f_hi, t.freqs.back());
      total += t.size();
    }
    const double span = f_hi - f_lo;
    ResidualFn resid = [&](const Eigen::VectorXd& p) {
      Eigen::VectorXd r(2 * static_cast<Eigen::Index>(total));
      if (!(p[0] > f_lo - span) || !(p[0] < f_hi + span) ||
          !(std::abs(p[1]) < kTwoPi * 1e8)) {
        r.setConstant(1e6);
        return r;
      }
      Eigen::Index m = 0;
      try {
        for (std::size_t k : used) {
          const ComplexTrace& t = traces[order[k]];
          const double pw = out.points[k].power;
          for (std::size_t i = 0; i < t.size(); ++i) {
            const double s =
                pw / (PhysicalConstants::hbar * kTwoPi * t.freqs[i]);
            const double Delta = kTwoPi * (t.freqs[i] - p[0]);
            const double n =
                duffing_roots(Delta, kap, kap_c, p[1], s).front().n;
            const Complex model =
                1.0 - tilt * 0.5 * kap_c /
                          Complex(0.5 * kap,
                                  Delta + p[1] * n);
            r[m++] = t.s21[i].real() - model.real();
            r[m++] = t.s21[i].imag() - model.imag();
          }
        }
      } catch (const Error&) {
        r.setConstant(1e6);
      }
      return r;
    };
    Eigen::VectorXd p0(2);
    p0 << f_r0, K;
    LevmarOptions opt;
    opt.max_iterations = 60;
    const LevmarResult res = levmar(resid, p0, opt);
    if (res.converged) {
      f_r0 = res.p[0];
      K = res.p[1];
      // Final photon assignment at the refined parameters.
      for (std::size_t j = 0; j < used.size(); ++j) {
        PowerPointFit& pt = out.points[used[j]];
        const double omega_r = kTwoPi * pt.fit.f_r;
        const double s = pt.power / (PhysicalConstants::hbar * omega_r);
        const double Delta = kTwoPi * (pt.fit.f_r - f_r0);
        pt.n = duffing_roots(Delta, kap, kap_c, K, s).front().n;
      }
    }
  }

  out.K = K;
  out.f_r0 = f_r0;
  out.iterations = iters;
  return out;
}

TlsModel::TlsModel(double delta0_, double deltaTLS_, double beta_exp_,
                   double n_star_)
    : delta0(delta0_),
      deltaTLS(deltaTLS_),
      beta_exp(beta_exp_),
      n_star(n_star_) {
  if (!std::isfinite(delta0) || !std::isfinite(deltaTLS) ||
      !std::isfinite(beta_exp) || !std::isfinite(n_star)) {
    throw DomainError("TlsModel: non-finite parameter");
  }
  if (delta0 < 0.0 || deltaTLS < 0.0 || beta_exp < 0.0) {
    throw DomainError("TlsModel: loss terms and exponent must be nonnegative");
  }
  if (!(delta0 + deltaTLS > 0.0)) {
    throw DomainError("TlsModel: total low-power loss must be positive");
  }
  if (!(n_star > 0.0)) {
    throw DomainError("TlsModel: n_star must be positive");
  }
}

double TlsModel::qi(double n) const {
  if (!(n >= 0.0)) throw DomainError("TlsModel::qi: negative photon number");
  return 1.0 /
         (delta0 + deltaTLS / (1.0 + std::pow(n / n_star, beta_exp)));
}

double TlsModel::qi_low_power() const { return 1.0 / (delta0 + deltaTLS); }

double TlsModel::qi_high_power() const {
  if (delta0 == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / delta0;
}

TlsModel fit_tls(const std::vector<TlsPoint>& points) {
  if (points.size() < 6) throw DomainError("fit_tls: need at least 6 points");
  double nmin = std::numeric_limits<double>::infinity(), nmax = 0.0;
  double qmin = std::numeric_limits<double>::infinity(), qmax = 0.0;
  for (const TlsPoint& p : points) {
    if (!(p.n > 0.0) || !(p.Q_i > 0.0) || !std::isfinite(p.n) ||
        !std::isfinite(p.Q_i)) {
      throw DomainError("fit_tls: points need positive finite n and Q_i");
    }
    nmin = std::min(nmin, p.n);
    nmax = std::max(nmax, p.n);
    qmin = std::min(qmin, p.Q_i);
    qmax = std::max(qmax, p.Q_i);
  }
  if (!(nmax >= 100.0 * nmin)) {
    throw DomainError("fit_tls: points span fewer than 2 decades in n");
  }

  // Relative residuals on 1/Q_i; log parametrization keeps every parameter
  // positive without bound handling.
  ResidualFn residuals = [&](const Eigen::VectorXd& p) {
    Eigen::VectorXd r(points.size());
    const double d0 = std::exp(p[0]);
    const double dt = std::exp(p[1]);
    const double be = std::exp(p[2]);
    const double nst = std::exp(p[3]);
    for (std::size_t i = 0; i < points.size(); ++i) {
      const double inv_qi =
          d0 + dt / (1.0 + std::pow(points[i].n / nst, be));
      r[static_cast<Eigen::Index>(i)] = inv_qi * points[i].Q_i - 1.0;
    }
    return r;
  };

  const double d0_init = 0.9 / qmax;
  const double dt_init = std::max(1.0 / qmin - d0_init, 0.1 * d0_init);
  const double gm = std::sqrt(nmin * nmax);
  const double beta_starts[] = {0.25, 0.5, 1.0};
  const double nstar_starts[] = {gm, gm / 30.0};

  bool have_best = false;
  LevmarResult best;
  std::string last_trace;
  for (double be : beta_starts) {
    for (double nst : nstar_starts) {
      Eigen::VectorXd p0(4);
      p0 << std::log(d0_init), std::log(dt_init), std::log(be), std::log(nst);
      LevmarOptions opt;
      opt.max_iterations = 400;
      try {
        const LevmarResult res = levmar(residuals, p0, opt);
        last_trace = res.trace;
        if (res.converged && (!have_best || res.cost < best.cost)) {
          best = res;
          have_best = true;
        }
      } catch (const FitError&) {
        // a bad start is allowed to fail as long as one start converges
      }
    }
  }
  if (!have_best) {
    throw FitError("fit_tls: no start converged", last_trace);
  }
  return TlsModel(std::exp(best.p[0]), std::exp(best.p[1]),
                  std::exp(best.p[2]), std::exp(best.p[3]));
}

namespace {

// Residual sum of squares of fitting an offset plus `harmonics` harmonic
// pairs of frequency nu to (x, y).
double harmonic_rss(const std::vector<double>& x, const std::vector<double>& y,
                    double nu, int harmonics) {
  const int m = 1 + 2 * harmonics;
  Eigen::MatrixXd A(x.size(), m);
  Eigen::VectorXd rhs(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    A(row, 0) = 1.0;
    for (int h = 1; h <= harmonics; ++h) {
      A(row, 2 * h - 1) = std::cos(kTwoPi * h * nu * x[i]);
      A(row, 2 * h) = std::sin(kTwoPi * h * nu * x[i]);
    }
    rhs[row] = y[i];
  }
  const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(rhs);
  return (A * coef - rhs).squaredNorm();
}

}  // namespace

mag::FluxCalibration extract_period(const std::vector<ftr::TuningData>& map) {
  const std::size_t n = map.size();
  if (n < 16) throw DomainError("extract_period: need at least 16 points");
  std::vector<double> cur(n), fr(n);
  for (std::size_t i = 0; i < n; ++i) {
    cur[i] = map[i].bias_current;
    fr[i] = map[i].f_r;
    if (!std::isfinite(cur[i]) || !std::isfinite(fr[i])) {
      throw DomainError("extract_period: non-finite sample");
    }
    if (i > 0 && !(cur[i] > cur[i - 1])) {
      throw DomainError("extract_period: currents must be strictly increasing");
    }
  }

  double mean = 0.0;
  for (double v : fr) mean += v;
  mean /= static_cast<double>(n);
  std::vector<double> y(n);
  double dev = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = fr[i] - mean;
    dev = std::max(dev, std::abs(y[i]));
  }
  if (dev <= 1e-9 * std::max(1.0, std::abs(mean))) {
    throw CalibrationError("extract_period: no modulation in the map");
  }

  // Near-uniform sampling is required for the plain periodogram; anything
  // else is resampled linearly onto a uniform grid of the same size.
  const double span = cur.back() - cur.front();
  const double h = span / static_cast<double>(n - 1);
  bool uniform = true;
  for (std::size_t i = 1; i < n; ++i) {
    if (std::abs(cur[i] - cur[i - 1] - h) > 0.01 * h) {
      uniform = false;
      break;
    }
  }
  std::vector<double> yu = y;
  if (!uniform) {
    for (std::size_t i = 0; i < n; ++i) {
      const double xi = cur.front() + h * static_cast<double>(i);
      const auto it = std::upper_bound(cur.begin(), cur.end(), xi);
      const std::size_t j =
          std::min<std::size_t>(std::max<std::ptrdiff_t>(it - cur.begin(), 1),
                                n - 1);
      const double t = (xi - cur[j - 1]) / (cur[j] - cur[j - 1]);
      yu[i] = y[j - 1] + t * (y[j] - y[j - 1]);
    }
  }

  // Zero-padded periodogram; bins below 1.5 cycles over the span cannot
  // satisfy the modulation precondition.
  const std::size_t M = 8 * n;
  const auto kmin = static_cast<std::size_t>(
      std::ceil(1.5 * static_cast<double>(M) / static_cast<double>(n)));
  std::vector<double> power(M / 2 + 1, 0.0);
  for (std::size_t k = 1; k <= M / 2; ++k) {
    Complex acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double ang = -kTwoPi * static_cast<double>(k) *
                         static_cast<double>(j) / static_cast<double>(M);
      acc += yu[j] * Complex(std::cos(ang), std::sin(ang));
    }
    power[k] = std::norm(acc);
  }
  std::size_t k_glob = 1;
  for (std::size_t k = 2; k <= M / 2; ++k) {
    if (power[k] > power[k_glob]) k_glob = k;
  }
  if (k_glob < kmin) {
    throw CalibrationError(
        "extract_period: map covers fewer than 1.5 modulation periods");
  }
  double mean_power = 0.0;
  std::size_t count = 0;
  for (std::size_t k = kmin; k <= M / 2; ++k) {
    mean_power += power[k];
    ++count;
  }
  mean_power /= static_cast<double>(count);
  if (!(power[k_glob] > 5.0 * mean_power)) {
    throw CalibrationError("extract_period: no dominant period in the map");
  }

  // Parabolic peak interpolation, then least-squares refinement of the
  // fundamental with enough harmonics to absorb the non-sinusoidal shape of
  // the modulation. A deeply tuned map is nearly a sharp V per period, so a
  // low-order fit leaves structured residuals that drag the minimum; the
  // second pass raises the order once the bracket is tight.
  double k_ref = static_cast<double>(k_glob);
  if (k_glob + 1 <= M / 2 && k_glob >= 2) {
    const double pm = power[k_glob - 1], pc = power[k_glob],
                 pp = power[k_glob + 1];
    const double den = pm - 2.0 * pc + pp;
    if (den < 0.0) k_ref += 0.5 * (pm - pp) / den;
  }
  const double nu0 = k_ref / (static_cast<double>(M) * h);
  const double gr = 0.5 * (std::sqrt(5.0) - 1.0);
  const int max_harm =
      std::max(3, static_cast<int>(std::min<std::size_t>(8, n / 16)));
  double nu = nu0;
  for (const int harm : {3, max_harm}) {
    const double width = harm == 3 ? 0.2 : 0.03;
    double lo = (1.0 - width) * nu, hi = (1.0 + width * 1.25) * nu;
    double x1 = hi - gr * (hi - lo), x2 = lo + gr * (hi - lo);
    double r1 = harmonic_rss(cur, y, x1, harm);
    double r2 = harmonic_rss(cur, y, x2, harm);
    for (int it = 0; it < 80; ++it) {
      if (r1 < r2) {
        hi = x2;
        x2 = x1;
        r2 = r1;
        x1 = hi - gr * (hi - lo);
        r1 = harmonic_rss(cur, y, x1, harm);
      } else {
        lo = x1;
        x1 = x2;
        r1 = r2;
        x2 = lo + gr * (hi - lo);
        r2 = harmonic_rss(cur, y, x2, harm);
      }
    }
    nu = 0.5 * (lo + hi);
    if (harm >= max_harm) break;
  }
  const double period = 1.0 / nu;

  // Fundamental phase gives the frequency maximum nearest zero current.
  Eigen::MatrixXd A(n, 3);
  Eigen::VectorXd rhs(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    A(row, 0) = 1.0;
    A(row, 1) = std::cos(kTwoPi * nu * cur[i]);
    A(row, 2) = std::sin(kTwoPi * nu * cur[i]);
    rhs[row] = y[i];
  }
  const Eigen::VectorXd coef = A.colPivHouseholderQr().solve(rhs);
  const double psi = std::atan2(coef[2], coef[1]);
  double I_off = psi / kTwoPi * period;
  I_off -= period * std::round(I_off / period);

  // Local parabolic refinement on the data when the maximum lies inside the
  // measured window.
  std::vector<std::size_t> near;
  for (std::size_t i = 0; i < n; ++i) {
    if (std::abs(cur[i] - I_off) <= period / 8.0) near.push_back(i);
  }
  if (near.size() >= 5) {
    Eigen::MatrixXd P(near.size(), 3);
    Eigen::VectorXd q(near.size());
    for (std::size_t i = 0; i < near.size(); ++i) {
      const auto row = static_cast<Eigen::Index>(i);
      const double u = cur[near[i]] - I_off;
      P(row, 0) = 1.0;
      P(row, 1) = u;
      P(row, 2) = u * u;
      q[row] = y[near[i]];
    }
    const Eigen::VectorXd pc = P.colPivHouseholderQr().solve(q);
    if (pc[2] < 0.0) {
      const double vertex = -0.5 * pc[1] / pc[2];
      if (std::abs(vertex) <= period / 8.0) I_off += vertex;
    }
  }

  return {I_off, period};
}

}  // namespace ftrlab::s21
