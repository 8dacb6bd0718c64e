#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "ftrlab/ftr.hpp"
#include "ftrlab/s21.hpp"

namespace ftrlab::synth {

// Additive complex Gaussian noise, sigma per quadrature in linear S21 units.
// Identical (sigma, seed) gives bit-identical traces on every platform: the
// sampler is pinned to the "noise-v1" scheme documented in the README
// (splitmix64-style mixing keyed by (seed, sample index), Box-Muller).
struct NoiseSpec {
  double sigma = 0.0;
  std::uint64_t seed = 0;
};

// One standard-normal pair for sample `index` of stream `seed` (noise-v1).
// Exposed so tests and golden-file tooling can reproduce draws exactly.
std::pair<double, double> normal_pair(std::uint64_t seed, std::uint64_t index);

// sigma * (g1 + i g2) for sample `index`.
s21::Complex complex_noise(const NoiseSpec& noise, std::uint64_t index);

// n uniformly spaced points covering [f_start, f_stop], n >= 2.
std::vector<double> frequency_grid(double f_start, double f_stop, std::size_t n);

// Ideal notch response at fit.{f_r, Q_L, Q_c_abs, phi}, multiplied by the
// background and with per-point noise added. Sample i uses noise index i.
s21::ComplexTrace gen_linear_trace(const s21::ResonatorFit& fit,
                                   const s21::BackgroundModel& bg,
                                   const std::vector<double>& freqs,
                                   const NoiseSpec& noise);

// Power sweep through a Kerr resonator. Per-trace flags record whether any
// grid point had three photon-number solutions (bistable response on this
// drive), and n_at_dip is the self-consistent photon number at the shifted
// dip frequency of the low branch.
struct PowerSweep {
  std::vector<s21::ComplexTrace> traces;
  std::vector<double> n_at_dip;
  std::vector<bool> bistable;
};

// powers_dbm are generator powers, sorted ascending; the device-plane power
// is powers_dbm[k] - attenuation_db. Trace k uses noise stream seed + k.
PowerSweep gen_power_sweep(const s21::DuffingParams& duffing,
                           const std::vector<double>& powers_dbm,
                           double attenuation_db,
                           const std::vector<double>& freqs,
                           const NoiseSpec& noise,
                           s21::Branch branch = s21::Branch::low);

// Readout line shape used for every point of a flux map.
struct QModel {
  double Q_L = 1e4;
  double Q_c_abs = 2e4;
  double phi = 0.0;
};

struct FluxMapPoint {
  double bias_current = 0.0;  // [A]
  double f_r_model = 0.0;     // tuning-curve resonance before jitter [Hz]
  bool valid = false;         // false when the screening solve rejects the bias
  s21::ComplexTrace trace;    // empty when !valid
};

// One linear trace per bias current. The window is recentered on the model
// resonance (freq_offsets are offsets from f_r, monotone), so the map mimics
// a tracked measurement. f_r_jitter adds a Gaussian shift (std in Hz) to each
// point's true resonance, drawn from stream seed + k at index offsets.size();
// sample i of trace k uses stream seed + k, index i.
std::vector<FluxMapPoint> gen_flux_map(const ftr::FtrParams& params,
                                       const mag::FluxCalibration& cal,
                                       const std::vector<double>& currents,
                                       const std::vector<double>& freq_offsets,
                                       const QModel& q,
                                       const NoiseSpec& noise,
                                       double f_r_jitter = 0.0);

}  // namespace ftrlab::synth
