#pragma once

#include <cmath>

namespace ftrlab {

// Fixed physical constants (SI). These are not configurable anywhere;
// calibration-dependent quantities live in the parameter structs instead.
struct PhysicalConstants {
  static constexpr double phi0 = 2.067833848e-15;  // flux quantum [Wb]
  static constexpr double hbar = 1.054571817e-34;  // reduced Planck [J s]
  static constexpr double mu0 = 1.25663706212e-6;  // vacuum permeability [H/m]
};

inline constexpr double kPi = 3.14159265358979323846;

// Instrument powers are quoted in dBm (referenced to 1 mW).
inline double dbm_to_watt(double p_dbm) { return 1e-3 * std::pow(10.0, p_dbm / 10.0); }
inline double watt_to_dbm(double p_watt) { return 10.0 * std::log10(p_watt / 1e-3); }

}  // namespace ftrlab
