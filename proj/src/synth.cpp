#include "ftrlab/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "ftrlab/constants.hpp"
#include "ftrlab/errors.hpp"
#include "ftrlab/magnetics.hpp"

namespace ftrlab::synth {

namespace {

// noise-v1 sampler. Each sample index owns an independent state derived from
// (seed, index), so traces can be generated in any order or in parallel
// without changing a single bit of the output.
constexpr std::uint64_t kGamma = 0x9E3779B97F4A7C15ull;

std::uint64_t mix(std::uint64_t z) {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

// top 53 bits -> (0, 1]; never zero, so the log below stays finite
double to_unit(std::uint64_t x) {
  return static_cast<double>((x >> 11) + 1) * 0x1.0p-53;
}

void require_grid(const std::vector<double>& freqs, const char* where) {
  if (freqs.size() < 2) throw DomainError(std::string(where) + ": need at least 2 grid points");
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    if (!std::isfinite(freqs[i])) throw DomainError(std::string(where) + ": non-finite grid point");
    if (i > 0 && !(freqs[i] > freqs[i - 1]))
      throw DomainError(std::string(where) + ": grid must be strictly increasing");
  }
}

void require_noise(const NoiseSpec& noise, const char* where) {
  if (!(noise.sigma >= 0.0) || !std::isfinite(noise.sigma))
    throw DomainError(std::string(where) + ": noise sigma must be finite and >= 0");
}

// Photon number at the low-branch dip. There the detuning equals -K n, which
// collapses the response cubic to 4 K^2 n^3 + (kappa^2/4) n = kappa_c s; that
// is strictly increasing in n, so Newton from the K=0 value (an upper bound)
// converges monotonically. The drive s depends weakly on the dip frequency,
// hence the short outer iteration.
double dip_photon_number(const s21::DuffingParams& d, double p_device) {
  const double a = 4.0 * d.K * d.K;
  const double b = 0.25 * d.kappa * d.kappa;
  double f = d.f_r0;
  double n = 0.0;
  for (int pass = 0; pass < 3; ++pass) {
    if (!(f > 0.0)) throw SolverError("gen_power_sweep: Kerr shift drove the dip frequency nonpositive");
    const double rhs = d.kappa_c * p_device / (PhysicalConstants::hbar * 2.0 * kPi * f);
    n = rhs / b;
    if (a > 0.0) {
      for (int it = 0; it < 60; ++it) {
        const double step = (a * n * n * n + b * n - rhs) / (3.0 * a * n * n + b);
        n -= step;
        if (std::abs(step) <= 1e-15 * std::max(n, 1.0)) break;
      }
    }
    if (d.K == 0.0) break;
    f = d.f_r0 - d.K / (2.0 * kPi) * n;
  }
  return n;
}

}  // namespace

std::pair<double, double> normal_pair(std::uint64_t seed, std::uint64_t index) {
  const std::uint64_t state = mix(seed ^ (kGamma * (index + 1)));
  const double u1 = to_unit(mix(state + kGamma));
  const double u2 = to_unit(mix(state + 2 * kGamma));
  const double r = std::sqrt(-2.0 * std::log(u1));
  return {r * std::cos(2.0 * kPi * u2), r * std::sin(2.0 * kPi * u2)};
}

s21::Complex complex_noise(const NoiseSpec& noise, std::uint64_t index) {
  if (noise.sigma == 0.0) return {0.0, 0.0};
  const auto [g1, g2] = normal_pair(noise.seed, index);
  return {noise.sigma * g1, noise.sigma * g2};
}

std::vector<double> frequency_grid(double f_start, double f_stop, std::size_t n) {
  if (!std::isfinite(f_start) || !std::isfinite(f_stop) || !(f_stop > f_start))
    throw DomainError("frequency_grid: need finite f_stop > f_start");
  if (n < 2) throw DomainError("frequency_grid: need at least 2 points");
  std::vector<double> freqs(n);
  const double step = (f_stop - f_start) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) freqs[i] = f_start + step * static_cast<double>(i);
  freqs.back() = f_stop;
  return freqs;
}

s21::ComplexTrace gen_linear_trace(const s21::ResonatorFit& fit,
                                   const s21::BackgroundModel& bg,
                                   const std::vector<double>& freqs,
                                   const NoiseSpec& noise) {
  require_grid(freqs, "gen_linear_trace");
  require_noise(noise, "gen_linear_trace");
  s21::ComplexTrace t;
  t.freqs = freqs;
  t.s21.resize(freqs.size());
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    const s21::Complex model = s21::s21_linear(freqs[i], fit.f_r, fit.Q_L, fit.Q_c_abs, fit.phi);
    t.s21[i] = bg.at(freqs[i]) * model + complex_noise(noise, i);
  }
  return t;
}

PowerSweep gen_power_sweep(const s21::DuffingParams& duffing,
                           const std::vector<double>& powers_dbm,
                           double attenuation_db,
                           const std::vector<double>& freqs,
                           const NoiseSpec& noise,
                           s21::Branch branch) {
  require_grid(freqs, "gen_power_sweep");
  require_noise(noise, "gen_power_sweep");
  if (powers_dbm.empty()) throw DomainError("gen_power_sweep: need at least one power");
  if (!std::is_sorted(powers_dbm.begin(), powers_dbm.end()))
    throw DomainError("gen_power_sweep: powers must be sorted ascending");
  if (!std::isfinite(attenuation_db))
    throw DomainError("gen_power_sweep: attenuation must be finite");

  PowerSweep out;
  out.traces.reserve(powers_dbm.size());
  out.n_at_dip.reserve(powers_dbm.size());
  out.bistable.reserve(powers_dbm.size());
  for (std::size_t k = 0; k < powers_dbm.size(); ++k) {
    const double p_device = dbm_to_watt(powers_dbm[k] - attenuation_db);
    const NoiseSpec local{noise.sigma, noise.seed + k};
    s21::ComplexTrace t;
    t.freqs = freqs;
    t.s21.resize(freqs.size());
    t.power_at_device = p_device;
    t.attenuation_db = attenuation_db;
    bool bistable = false;
    for (std::size_t i = 0; i < freqs.size(); ++i) {
      const double f = freqs[i];
      const double Delta = 2.0 * kPi * (f - duffing.f_r0);
      const double s_in_sq = p_device / (PhysicalConstants::hbar * 2.0 * kPi * f);
      const auto roots = s21::duffing_roots(Delta, duffing.kappa, duffing.kappa_c, duffing.K, s_in_sq);
      bistable = bistable || roots.size() == 3;
      const double n = branch == s21::Branch::low ? roots.front().n : roots.back().n;
      t.s21[i] = s21::s21_nonlinear(f, duffing, n) + complex_noise(local, i);
    }
    out.traces.push_back(std::move(t));
    out.n_at_dip.push_back(dip_photon_number(duffing, p_device));
    out.bistable.push_back(bistable);
  }
  return out;
}

std::vector<FluxMapPoint> gen_flux_map(const ftr::FtrParams& params,
                                       const mag::FluxCalibration& cal,
                                       const std::vector<double>& currents,
                                       const std::vector<double>& freq_offsets,
                                       const QModel& q,
                                       const NoiseSpec& noise,
                                       double f_r_jitter) {
  require_noise(noise, "gen_flux_map");
  if (currents.empty()) throw DomainError("gen_flux_map: need at least one bias current");
  if (freq_offsets.size() < 2) throw DomainError("gen_flux_map: need at least 2 window offsets");
  for (std::size_t i = 1; i < freq_offsets.size(); ++i)
    if (!(freq_offsets[i] > freq_offsets[i - 1]))
      throw DomainError("gen_flux_map: window offsets must be strictly increasing");
  if (!(f_r_jitter >= 0.0) || !std::isfinite(f_r_jitter))
    throw DomainError("gen_flux_map: f_r_jitter must be finite and >= 0");

  std::vector<double> phi(currents.size());
  for (std::size_t k = 0; k < currents.size(); ++k)
    phi[k] = mag::flux_from_current(currents[k], cal);
  // The map is acquired as one continuous bias sweep, so strong-screening
  // devices show the fold hysteresis of the sweep direction.
  ftr::TuningCurveOptions curve_opt;
  curve_opt.swept = true;
  const auto points = ftr::tuning_curve(params, phi, curve_opt);

  const s21::BackgroundModel identity;
  std::vector<FluxMapPoint> map(currents.size());
  std::vector<double> freqs(freq_offsets.size());
  for (std::size_t k = 0; k < currents.size(); ++k) {
    FluxMapPoint& mp = map[k];
    mp.bias_current = currents[k];
    if (!points[k].valid) continue;
    const double f_r = points[k].omega_r / (2.0 * kPi);
    mp.f_r_model = f_r;
    mp.valid = true;
    double f_obs = f_r;
    if (f_r_jitter > 0.0)
      f_obs += f_r_jitter * normal_pair(noise.seed + k, freq_offsets.size()).first;
    for (std::size_t i = 0; i < freq_offsets.size(); ++i) freqs[i] = f_r + freq_offsets[i];
    s21::ResonatorFit fit;
    fit.f_r = f_obs;
    fit.Q_L = q.Q_L;
    fit.Q_c_abs = q.Q_c_abs;
    fit.phi = q.phi;
    mp.trace = gen_linear_trace(fit, identity, freqs, NoiseSpec{noise.sigma, noise.seed + k});
    mp.trace.bias_current = currents[k];
  }
  return map;
}

}  // namespace ftrlab::synth
