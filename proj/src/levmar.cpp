#include "ftrlab/levmar.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "ftrlab/errors.hpp"

namespace ftrlab {

namespace {

// Evaluates the residuals, mapping any thrown Error or non-finite entry to an
// "infinite cost" so the damping loop can back off instead of dying.
bool try_eval(const ResidualFn& f, const Eigen::VectorXd& p,
              Eigen::VectorXd& r, double& cost) {
  try {
    r = f(p);
  } catch (const Error&) {
    return false;
  }
  if (!r.allFinite()) return false;
  cost = 0.5 * r.squaredNorm();
  return true;
}

}  // namespace

LevmarResult levmar(const ResidualFn& residuals, const Eigen::VectorXd& p0,
                    const LevmarOptions& opt) {
  const int n = static_cast<int>(p0.size());
  Eigen::VectorXd p = p0;
  Eigen::VectorXd r;
  double cost = 0.0;
  if (!try_eval(residuals, p, r, cost)) {
    throw FitError("levmar: residual evaluation failed at the initial point");
  }
  const int m = static_cast<int>(r.size());
  if (m < n) {
    throw FitError("levmar: fewer residuals than parameters");
  }

  std::ostringstream trace;
  if (opt.keep_trace) {
    trace << "iter 0 cost " << cost << "\n";
  }

  double lambda = opt.lambda0;
  const double initial_cost = cost;
  LevmarResult out;
  out.p = p;
  out.cost = cost;

  Eigen::MatrixXd jac(m, n);
  Eigen::VectorXd r_step;

  for (int iter = 1; iter <= opt.max_iterations; ++iter) {
    // Forward-difference Jacobian around the current point.
    for (int j = 0; j < n; ++j) {
      const double h = opt.fd_step * std::max(1.0, std::abs(p[j]));
      Eigen::VectorXd pj = p;
      pj[j] += h;
      double cj = 0.0;
      if (!try_eval(residuals, pj, r_step, cj)) {
        pj[j] = p[j] - h;  // one-sided fallback on the other side
        if (!try_eval(residuals, pj, r_step, cj)) {
          throw FitError("levmar: Jacobian evaluation failed", trace.str());
        }
        jac.col(j) = (r - r_step) / h;
      } else {
        jac.col(j) = (r_step - r) / h;
      }
    }

    Eigen::MatrixXd jtj = jac.transpose() * jac;
    Eigen::VectorXd g = jac.transpose() * r;
    out.grad_norm = g.lpNorm<Eigen::Infinity>();
    if (out.grad_norm < opt.gtol) {
      out.converged = true;
      break;
    }

    // Marquardt scaling: damp proportionally to the curvature diagonal so
    // badly scaled parameters do not stall the step.
    Eigen::VectorXd diag = jtj.diagonal();
    const double dmax = diag.maxCoeff();
    for (int j = 0; j < n; ++j) diag[j] = std::max(diag[j], 1e-12 * dmax);

    bool accepted = false;
    double best_rejected = std::numeric_limits<double>::infinity();
    for (int back = 0; back < 40 && !accepted; ++back) {
      Eigen::MatrixXd a = jtj;
      a.diagonal() += lambda * diag;
      Eigen::LDLT<Eigen::MatrixXd> ldlt(a);
      if (ldlt.info() != Eigen::Success) {
        lambda *= 10.0;
        continue;
      }
      Eigen::VectorXd step = ldlt.solve(-g);
      Eigen::VectorXd p_try = p + step;
      double cost_try = 0.0;
      const bool evaluated = try_eval(residuals, p_try, r_step, cost_try);
      if (evaluated && cost_try < cost) {
        const double rel_drop = (cost - cost_try) / std::max(cost, 1e-300);
        const double rel_step =
            step.norm() / std::max(p.norm(), 1.0);
        p = p_try;
        r = r_step;
        cost = cost_try;
        lambda = std::max(lambda * 0.3, 1e-14);
        accepted = true;
        if (opt.keep_trace) {
          trace << "iter " << iter << " cost " << cost << " lambda " << lambda
                << "\n";
        }
        out.iterations = iter;
        // A tiny step only signals a stationary point when the damping is
        // back in the Gauss-Newton regime; heavily damped crawls do not count.
        if ((rel_drop < opt.ftol || rel_step < opt.xtol) &&
            lambda <= opt.lambda0) {
          out.converged = true;
        }
      } else {
        if (evaluated) best_rejected = std::min(best_rejected, cost_try);
        lambda *= 10.0;
        if (lambda > 1e14) break;
      }
    }

    out.p = p;
    out.cost = cost;
    if (!accepted) {
      // No downhill step at any damping. When the best rejected trial sits
      // within evaluation noise of the current cost this is the attainable
      // floor; anything else is a genuine stall, reported as such.
      if (best_rejected - cost <= 1e-9 * std::max(cost, 1e-300)) {
        out.converged = true;
      }
      break;
    }
    if (out.converged) break;
  }

  out.p = p;
  out.cost = cost;
  out.trace = trace.str();
  if (!out.converged && !(cost < initial_cost)) {
    throw FitError("levmar: no cost decrease from the initial point",
                   out.trace);
  }
  return out;
}

}  // namespace ftrlab
