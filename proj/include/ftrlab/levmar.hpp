#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>

namespace ftrlab {

// Dense Levenberg-Marquardt with Marquardt diagonal scaling and a
// forward-difference Jacobian. Small problems only (tens of parameters);
// everything here is deliberately simple and deterministic.

struct LevmarOptions {
  int max_iterations = 400;
  double lambda0 = 1e-3;       // initial damping
  double ftol = 1e-14;         // relative cost decrease
  double xtol = 1e-13;         // relative step size
  double gtol = 1e-12;         // gradient infinity norm
  double fd_step = 1e-7;       // relative forward-difference step
  bool keep_trace = false;     // record per-iteration cost (for diagnostics)
};

struct LevmarResult {
  Eigen::VectorXd p;           // final parameters
  double cost = 0.0;           // 0.5 * ||r||^2
  double grad_norm = 0.0;      // ||J^T r||_inf at the solution
  int iterations = 0;
  bool converged = false;
  std::string trace;           // per-iteration log if keep_trace was set
};

using ResidualFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Minimizes 0.5 * ||residuals(p)||^2 starting at p0. Throws FitError when the
// residual function fails at p0 or when no converged point is reached and the
// cost has not decreased at all.
LevmarResult levmar(const ResidualFn& residuals, const Eigen::VectorXd& p0,
                    const LevmarOptions& opt = {});

}  // namespace ftrlab
