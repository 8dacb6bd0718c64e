#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "ftrlab/constants.hpp"

namespace ftrlab::mag {

// Closed filament loop given by its wire centerline. Finite wire size enters
// only the self-inductance formulas; mutual inductances treat the loop as a
// zero-thickness filament.
struct PolylineLoop {
  std::vector<Eigen::Vector3d> vertices;  // [m]
  bool closed = true;
  double wire_width = 0.0;   // [m] rectangular-trace width (coil formula)
  double wire_radius = 0.0;  // [m] round-wire radius (cylinder formula)

  PolylineLoop() = default;
  // Throws DomainError on fewer than 3 vertices, non-finite coordinates, or
  // coincident consecutive vertices (including the closing edge).
  explicit PolylineLoop(std::vector<Eigen::Vector3d> vertices_,
                        bool closed_ = true, double wire_width_ = 0.0,
                        double wire_radius_ = 0.0);

  std::size_t segment_count() const;
};

// Axis-aligned square of the given side length, centered on the z axis in
// the plane z = z_offset, traversed counterclockwise seen from +z.
PolylineLoop square_loop(double side, double z_offset = 0.0,
                         double wire_width = 0.0);

struct NeumannOptions {
  double rel_tol = 1e-6;         // relative tolerance on the summed mutual
  int max_depth = 30;            // interval halvings per segment pair
  double min_separation = 1e-9;  // [m] below this the loops count as touching
};

// Mutual inductance between two closed filament loops,
//   M = (mu0 / 4 pi) * oint oint dl_a . dl_b / |r_a - r_b|,
// evaluated per segment pair: closed-form for parallel pairs, adaptive
// Gauss-Legendre over an exact inner line integral otherwise. Symmetric in
// (a, b) and linear in overall scale. Throws GeometryError when the loops
// touch (minimum segment separation below opt.min_separation) and
// QuadratureError when the summed error estimate misses opt.rel_tol.
double neumann_mutual(const PolylineLoop& a, const PolylineLoop& b,
                      const NeumannOptions& opt = {});

// Self-inductance of a square loop of side l traced in wire of width w:
// L = (2 mu0 l / pi) [sqrt(2) - 2 + ln(4 l / (w (1 + sqrt(2))))].
// Throws DomainError unless 0 < w < l.
double square_coil_self_inductance(double side, double wire_width);

// Self-inductance of a straight cylindrical wire of length l, radius r:
// L = (mu0 l / 2 pi) (ln(2 l / r) - 0.75). Throws DomainError unless l > r > 0.
double wire_self_inductance(double length, double radius);

// Fraction of the input coil's self-flux that threads the pickup of mutual M:
// eta2 = M / L_i. Throws DomainError unless L_i > 0.
double transfer_efficiency(double M, double L_i);

// Transformer chain from a pickup loop through wiring into an input coil.
struct TransferChain {
  double M = 0.0;            // input coil to target loop [H]
  double L_p = 0.0;          // pickup inductance [H]
  double L_wire = 0.0;       // wiring parasitics [H]
  double L_i = 0.0;          // input coil inductance [H]
  double transduction = 0.0;  // pickup flux per source current [Wb/A]
};

// End-to-end efficiency eta = M / (L_p + L_wire + L_i). Throws DomainError
// on negative inductances or a non-positive denominator.
double chain_efficiency(const TransferChain& chain);

// Flux picked up at the source, transduction * I.
double pickup_flux(const TransferChain& chain, double current);

// Flux arriving at the target loop, eta * pickup_flux.
double delivered_flux(const TransferChain& chain, double current);

// Current-to-flux calibration of a bias line: I_off is the current at which
// the applied flux sits on an integer number of flux quanta, I_Phi0 the
// current per flux quantum.
struct FluxCalibration {
  double I_off = 0.0;   // [A]
  double I_Phi0 = 0.0;  // [A] per Phi0, nonzero
};

// Mutual inductance implied by a measured modulation period: Phi0 / I_Phi0.
// Throws DomainError unless I_Phi0 > 0.
double mutual_from_period(double I_Phi0);

// Applied flux Phi_e = Phi0 (I_in - I_off) / I_Phi0.
// Throws CalibrationError when cal.I_Phi0 is zero or non-finite.
double flux_from_current(double I_in, const FluxCalibration& cal);

// One point of the coupled-square-loop efficiency surface.
struct EfficiencyPoint {
  double ratio = 0.0;   // input side / source side
  double h = 0.0;       // axial separation [m]
  double mutual = 0.0;  // [H]
  double L_i = 0.0;     // input coil self-inductance [H]
  double eta2 = 0.0;    // mutual / L_i
};

// eta2 over a grid of size ratios and separations for concentric coaxial
// square loops: the source square has the given side, the input square side
// ratio * side and wire width wire_width. Rows iterate heights in order,
// ratios fastest. Quadrature and geometry errors propagate.
std::vector<EfficiencyPoint> efficiency_sweep(const std::vector<double>& ratios,
                                              const std::vector<double>& heights,
                                              double source_side,
                                              double wire_width,
                                              const NeumannOptions& opt = {});

}  // namespace ftrlab::mag
