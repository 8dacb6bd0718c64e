#include "ftrlab/magnetics.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <sstream>
#include <utility>
#include <vector>

#include "ftrlab/errors.hpp"

namespace ftrlab::mag {
namespace {

constexpr double kMu0Over4Pi = PhysicalConstants::mu0 / (4.0 * kPi);

struct Segment {
  Eigen::Vector3d p0;
  Eigen::Vector3d tangent;  // unit
  double length = 0.0;
};

void validate_loop(const PolylineLoop& loop, const char* where) {
  if (loop.vertices.size() < 3) {
    throw DomainError(std::string(where) + ": a loop needs at least 3 vertices");
  }
  for (const auto& v : loop.vertices) {
    if (!v.allFinite()) {
      throw DomainError(std::string(where) + ": non-finite vertex coordinate");
    }
  }
  const std::size_t n = loop.vertices.size();
  const std::size_t edges = loop.closed ? n : n - 1;
  for (std::size_t i = 0; i < edges; ++i) {
    if ((loop.vertices[(i + 1) % n] - loop.vertices[i]).squaredNorm() == 0.0) {
      throw DomainError(std::string(where) +
                        ": coincident consecutive vertices");
    }
  }
  if (!(loop.wire_width >= 0.0) || !(loop.wire_radius >= 0.0)) {
    throw DomainError(std::string(where) + ": negative wire size");
  }
}

std::vector<Segment> loop_segments(const PolylineLoop& loop) {
  const std::size_t n = loop.vertices.size();
  const std::size_t count = loop.closed ? n : n - 1;
  std::vector<Segment> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const Eigen::Vector3d d = loop.vertices[(i + 1) % n] - loop.vertices[i];
    const double len = d.norm();
    out.push_back({loop.vertices[i], d / len, len});
  }
  return out;
}

// Closest-approach distance between two segments (clamped line parameters).
double segment_distance(const Segment& a, const Segment& b) {
  const Eigen::Vector3d d1 = a.tangent * a.length;
  const Eigen::Vector3d d2 = b.tangent * b.length;
  const Eigen::Vector3d r = a.p0 - b.p0;
  const double aa = d1.squaredNorm();
  const double ee = d2.squaredNorm();
  const double ff = d2.dot(r);
  const double cc = d1.dot(r);
  const double bb = d1.dot(d2);
  const double denom = aa * ee - bb * bb;
  double s = 0.0;
  if (denom > 0.0) s = std::clamp((bb * ff - cc * ee) / denom, 0.0, 1.0);
  double t = (bb * s + ff) / ee;
  if (t < 0.0) {
    t = 0.0;
    s = std::clamp(-cc / aa, 0.0, 1.0);
  } else if (t > 1.0) {
    t = 1.0;
    s = std::clamp((bb - cc) / aa, 0.0, 1.0);
  }
  return (a.p0 + s * d1 - (b.p0 + t * d2)).norm();
}

// Antiderivative stack for the parallel-pair kernel: corner_term'' (u) =
// 1 / sqrt(u^2 + d^2). Even in u; the d = 0 (collinear) limit is
// |u| (ln|u| - 1).
double corner_term(double u, double d) {
  if (d <= 0.0) {
    if (u == 0.0) return 0.0;
    return std::abs(u) * (std::log(std::abs(u)) - 1.0);
  }
  return u * std::asinh(u / d) - std::hypot(u, d);
}

// Exact int_0^La int_0^Lb ds dt / sqrt((s - t + D)^2 + d^2) for a pair of
// co-directed parallel segments with axial offset D and transverse gap d.
double parallel_block(double La, double Lb, double D, double d) {
  return corner_term(La + D, d) - corner_term(D, d) -
         corner_term(La + D - Lb, d) + corner_term(D - Lb, d);
}

// Exact inner line integral int_0^L ds' / |r - b(s')| seen from a point off
// the segment's carrier line; log form when the point sits on the line
// beyond either end.
double line_potential(const Eigen::Vector3d& r, const Segment& b) {
  const Eigen::Vector3d w = r - b.p0;
  const double along = w.dot(b.tangent);
  const double rho = (w - along * b.tangent).norm();
  const double tail = b.length - along;
  if (rho > 0.0) return std::asinh(tail / rho) + std::asinh(along / rho);
  if (along < 0.0) return std::log1p(b.length / -along);
  if (tail < 0.0) return std::log1p(b.length / -tail);
  // The separation check keeps quadrature points off the other loop.
  throw GeometryError("neumann_mutual: quadrature point on a segment");
}

constexpr double kGlNodes[4] = {0.1834346424956498, 0.5255324099163290,
                                0.7966664774136267, 0.9602898564975363};
constexpr double kGlWeights[4] = {0.3626837833783620, 0.3137066458778873,
                                  0.2223810344533745, 0.1012285362903763};

template <class F>
double gauss8(const F& f, double x0, double x1) {
  const double mid = 0.5 * (x0 + x1);
  const double half = 0.5 * (x1 - x0);
  double acc = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double dx = half * kGlNodes[i];
    acc += kGlWeights[i] * (f(mid - dx) + f(mid + dx));
  }
  return acc * half;
}

// Interval-halving refinement; whole is gauss8 over [x0, x1]. Accepted
// intervals accumulate their defect into err as a conservative estimate.
template <class F>
void refine(const F& f, double x0, double x1, double whole, double tol,
            int depth, int max_depth, double& value, double& err) {
  const double xm = 0.5 * (x0 + x1);
  const double left = gauss8(f, x0, xm);
  const double right = gauss8(f, xm, x1);
  const double defect = std::abs(whole - (left + right));
  if (defect <= tol || depth >= max_depth) {
    value += left + right;
    err += defect;
    return;
  }
  refine(f, x0, xm, left, 0.5 * tol, depth + 1, max_depth, value, err);
  refine(f, xm, x1, right, 0.5 * tol, depth + 1, max_depth, value, err);
}

struct PairTerm {
  double value = 0.0;  // raw double line integral, scaled by the tangent dot
  double error = 0.0;
  bool exact = false;
};

// One segment pair of the Neumann sum. tol_abs < 0 requests a rough pass at
// 1e-3 of the pair's own magnitude.
PairTerm integrate_pair(const Segment& a, const Segment& b, double tol_abs,
                        int max_depth) {
  const double dot = a.tangent.dot(b.tangent);
  if (dot == 0.0) return {0.0, 0.0, true};
  if (a.tangent.cross(b.tangent).norm() < 1e-12) {
    const Eigen::Vector3d b_start =
        dot > 0.0 ? b.p0 : Eigen::Vector3d(b.p0 + b.length * b.tangent);
    const Eigen::Vector3d w = a.p0 - b_start;
    const double axial = w.dot(a.tangent);
    const double gap = (w - axial * a.tangent).norm();
    const double sign = dot > 0.0 ? 1.0 : -1.0;
    return {sign * parallel_block(a.length, b.length, axial, gap), 0.0, true};
  }
  const auto f = [&](double s) {
    return line_potential(a.p0 + s * a.tangent, b);
  };
  const double whole = gauss8(f, 0.0, a.length);
  const double tol =
      tol_abs > 0.0 ? tol_abs / std::abs(dot) : 1e-3 * std::abs(whole);
  PairTerm term;
  refine(f, 0.0, a.length, whole, tol, 0, max_depth, term.value, term.error);
  term.value *= dot;
  term.error *= std::abs(dot);
  return term;
}

struct KahanSum {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    const double y = x - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

// Deterministic operand order regardless of argument order, so the quadrature
// is bitwise symmetric in (a, b).
bool loop_precedes(const PolylineLoop& a, const PolylineLoop& b) {
  if (a.vertices.size() != b.vertices.size()) {
    return a.vertices.size() < b.vertices.size();
  }
  for (std::size_t i = 0; i < a.vertices.size(); ++i) {
    for (int k = 0; k < 3; ++k) {
      if (a.vertices[i][k] != b.vertices[i][k]) {
        return a.vertices[i][k] < b.vertices[i][k];
      }
    }
  }
  return true;
}

}  // namespace

PolylineLoop::PolylineLoop(std::vector<Eigen::Vector3d> vertices_, bool closed_,
                           double wire_width_, double wire_radius_)
    : vertices(std::move(vertices_)),
      closed(closed_),
      wire_width(wire_width_),
      wire_radius(wire_radius_) {
  if (!std::isfinite(wire_width) || !std::isfinite(wire_radius)) {
    throw DomainError("PolylineLoop: non-finite wire size");
  }
  validate_loop(*this, "PolylineLoop");
}

std::size_t PolylineLoop::segment_count() const {
  if (vertices.size() < 2) return 0;
  return closed ? vertices.size() : vertices.size() - 1;
}

PolylineLoop square_loop(double side, double z_offset, double wire_width) {
  if (!(side > 0.0) || !std::isfinite(side) || !std::isfinite(z_offset)) {
    throw DomainError("square_loop: side must be positive and finite");
  }
  const double s = 0.5 * side;
  return PolylineLoop({Eigen::Vector3d(s, s, z_offset),
                       Eigen::Vector3d(-s, s, z_offset),
                       Eigen::Vector3d(-s, -s, z_offset),
                       Eigen::Vector3d(s, -s, z_offset)},
                      true, wire_width);
}

double neumann_mutual(const PolylineLoop& a, const PolylineLoop& b,
                      const NeumannOptions& opt) {
  if (!(opt.rel_tol > 0.0) || !std::isfinite(opt.rel_tol)) {
    throw DomainError("neumann_mutual: rel_tol must be positive");
  }
  if (opt.max_depth < 1) {
    throw DomainError("neumann_mutual: max_depth must be at least 1");
  }
  if (!(opt.min_separation >= 0.0)) {
    throw DomainError("neumann_mutual: negative min_separation");
  }
  validate_loop(a, "neumann_mutual");
  validate_loop(b, "neumann_mutual");
  if (!a.closed || !b.closed) {
    throw DomainError("neumann_mutual: both loops must be closed");
  }

  const bool a_first = loop_precedes(a, b);
  const auto outer = loop_segments(a_first ? a : b);
  const auto inner = loop_segments(a_first ? b : a);

  double min_dist = std::numeric_limits<double>::infinity();
  for (const auto& sa : outer) {
    for (const auto& sb : inner) {
      min_dist = std::min(min_dist, segment_distance(sa, sb));
    }
  }
  if (min_dist < opt.min_separation) {
    std::ostringstream msg;
    msg << "neumann_mutual: loops touch or intersect (minimum segment "
           "separation "
        << min_dist << " m < " << opt.min_separation << " m)";
    throw GeometryError(msg.str());
  }

  // Rough pass sizes the absolute error budget; only non-parallel pairs carry
  // quadrature error, and they are redone below against an equal share of it.
  const std::size_t n_pairs = outer.size() * inner.size();
  std::vector<PairTerm> terms(n_pairs);
  KahanSum rough;
  KahanSum rough_abs;
  std::size_t n_adaptive = 0;
  {
    std::size_t k = 0;
    for (const auto& sa : outer) {
      for (const auto& sb : inner) {
        terms[k] = integrate_pair(sa, sb, -1.0, opt.max_depth);
        rough.add(terms[k].value);
        rough_abs.add(std::abs(terms[k].value));
        if (!terms[k].exact) ++n_adaptive;
        ++k;
      }
    }
  }

  const double scale = std::max(std::abs(rough.sum), 1e-3 * rough_abs.sum);
  if (scale == 0.0) return 0.0;
  const double budget = opt.rel_tol * scale;

  KahanSum total;
  KahanSum total_err;
  if (n_adaptive == 0) {
    for (const auto& t : terms) total.add(t.value);
    return kMu0Over4Pi * total.sum;
  }

  const double share = 0.5 * budget / static_cast<double>(n_adaptive);
  {
    std::size_t k = 0;
    for (const auto& sa : outer) {
      for (const auto& sb : inner) {
        PairTerm t = terms[k];
        if (!t.exact) t = integrate_pair(sa, sb, share, opt.max_depth);
        total.add(t.value);
        total_err.add(t.error);
        ++k;
      }
    }
  }

  if (total_err.sum > budget) {
    std::ostringstream msg;
    msg.setf(std::ios::scientific);
    msg << "neumann_mutual: quadrature missed rel_tol " << opt.rel_tol
        << " (value " << kMu0Over4Pi * total.sum << " H, achieved estimate "
        << kMu0Over4Pi * total_err.sum << " H, relative "
        << total_err.sum / scale << ")";
    throw QuadratureError(msg.str());
  }
  return kMu0Over4Pi * total.sum;
}

double square_coil_self_inductance(double side, double wire_width) {
  if (!std::isfinite(side) || !std::isfinite(wire_width) ||
      !(wire_width > 0.0)) {
    throw DomainError(
        "square_coil_self_inductance: wire width must be positive");
  }
  if (!(wire_width < side)) {
    throw DomainError(
        "square_coil_self_inductance: wire width must be below the side "
        "length");
  }
  const double sqrt2 = std::sqrt(2.0);
  return 2.0 * PhysicalConstants::mu0 * side / kPi *
         (sqrt2 - 2.0 + std::log(4.0 * side / (wire_width * (1.0 + sqrt2))));
}

double wire_self_inductance(double length, double radius) {
  if (!std::isfinite(length) || !std::isfinite(radius) || !(radius > 0.0)) {
    throw DomainError("wire_self_inductance: radius must be positive");
  }
  if (!(length > radius)) {
    throw DomainError(
        "wire_self_inductance: length must exceed the wire radius");
  }
  return PhysicalConstants::mu0 * length / (2.0 * kPi) *
         (std::log(2.0 * length / radius) - 0.75);
}

double transfer_efficiency(double M, double L_i) {
  if (!std::isfinite(M) || !std::isfinite(L_i) || !(L_i > 0.0)) {
    throw DomainError("transfer_efficiency: input inductance must be positive");
  }
  return M / L_i;
}

double chain_efficiency(const TransferChain& chain) {
  if (!std::isfinite(chain.M) || !std::isfinite(chain.L_p) ||
      !std::isfinite(chain.L_wire) || !std::isfinite(chain.L_i) ||
      chain.M < 0.0 || chain.L_p < 0.0 || chain.L_wire < 0.0 ||
      chain.L_i < 0.0) {
    throw DomainError("chain_efficiency: inductances must be non-negative");
  }
  const double denom = chain.L_p + chain.L_wire + chain.L_i;
  if (!(denom > 0.0)) {
    throw DomainError("chain_efficiency: zero total inductance");
  }
  return chain.M / denom;
}

double pickup_flux(const TransferChain& chain, double current) {
  if (!std::isfinite(chain.transduction) || !std::isfinite(current)) {
    throw DomainError("pickup_flux: non-finite input");
  }
  return chain.transduction * current;
}

double delivered_flux(const TransferChain& chain, double current) {
  return chain_efficiency(chain) * pickup_flux(chain, current);
}

double mutual_from_period(double I_Phi0) {
  if (!std::isfinite(I_Phi0) || !(I_Phi0 > 0.0)) {
    throw DomainError("mutual_from_period: period current must be positive");
  }
  return PhysicalConstants::phi0 / I_Phi0;
}

double flux_from_current(double I_in, const FluxCalibration& cal) {
  if (!std::isfinite(cal.I_Phi0) || cal.I_Phi0 == 0.0 ||
      !std::isfinite(cal.I_off)) {
    throw CalibrationError(
        "flux_from_current: calibration needs a finite, nonzero period "
        "current");
  }
  if (!std::isfinite(I_in)) {
    throw DomainError("flux_from_current: non-finite input current");
  }
  return PhysicalConstants::phi0 * (I_in - cal.I_off) / cal.I_Phi0;
}

std::vector<EfficiencyPoint> efficiency_sweep(const std::vector<double>& ratios,
                                              const std::vector<double>& heights,
                                              double source_side,
                                              double wire_width,
                                              const NeumannOptions& opt) {
  if (ratios.empty() || heights.empty()) {
    throw DomainError("efficiency_sweep: empty grid");
  }
  for (double r : ratios) {
    if (!std::isfinite(r) || !(r > 0.0)) {
      throw DomainError("efficiency_sweep: ratios must be positive");
    }
  }
  for (double h : heights) {
    if (!std::isfinite(h) || h < 0.0) {
      throw DomainError("efficiency_sweep: separations must be non-negative");
    }
  }
  if (!std::isfinite(source_side) || !(source_side > 0.0)) {
    throw DomainError("efficiency_sweep: source side must be positive");
  }

  const PolylineLoop source = square_loop(source_side, 0.0);
  std::vector<EfficiencyPoint> out;
  out.reserve(ratios.size() * heights.size());
  for (double h : heights) {
    for (double r : ratios) {
      const double input_side = r * source_side;
      const PolylineLoop input = square_loop(input_side, h, wire_width);
      EfficiencyPoint pt;
      pt.ratio = r;
      pt.h = h;
      pt.mutual = neumann_mutual(input, source, opt);
      pt.L_i = square_coil_self_inductance(input_side, wire_width);
      pt.eta2 = pt.mutual / pt.L_i;
      out.push_back(pt);
    }
  }
  return out;
}

}  // namespace ftrlab::mag
