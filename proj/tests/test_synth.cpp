#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "ftrlab/constants.hpp"
#include "ftrlab/errors.hpp"
#include "ftrlab/magnetics.hpp"
#include "ftrlab/s21.hpp"
#include "ftrlab/squid.hpp"
#include "ftrlab/synth.hpp"

using namespace ftrlab;
using s21::Complex;

namespace {

doctest::Approx rel(double value, double eps) {
  return doctest::Approx(value).epsilon(eps).scale(0.0);
}

bool identical(const s21::ComplexTrace& a, const s21::ComplexTrace& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.freqs[i] != b.freqs[i]) return false;
    if (a.s21[i] != b.s21[i]) return false;
  }
  return true;
}

// dip frequency of a noiseless trace, parabola-refined around the |S21| min
double dip_frequency(const s21::ComplexTrace& t) {
  std::size_t k = 0;
  double best = 1e300;
  for (std::size_t i = 0; i < t.size(); ++i) {
    const double m = std::abs(t.s21[i]);
    if (m < best) {
      best = m;
      k = i;
    }
  }
  if (k == 0 || k + 1 == t.size()) return t.freqs[k];
  const double ym = std::abs(t.s21[k - 1]), y0 = std::abs(t.s21[k]),
               yp = std::abs(t.s21[k + 1]);
  const double denom = ym - 2.0 * y0 + yp;
  if (denom <= 0.0) return t.freqs[k];
  const double h = t.freqs[k + 1] - t.freqs[k];
  return t.freqs[k] + 0.5 * h * (ym - yp) / denom;
}

}  // namespace

TEST_CASE("power unit conversions") {
  CHECK(dbm_to_watt(0.0) == rel(1e-3, 1e-12));
  CHECK(dbm_to_watt(-30.0) == rel(1e-6, 1e-12));
  CHECK(watt_to_dbm(1e-3) == doctest::Approx(0.0).scale(1.0));
  CHECK(watt_to_dbm(dbm_to_watt(-87.3)) == rel(-87.3, 1e-12));
}

TEST_CASE("normal pairs are deterministic and well distributed") {
  const auto a = synth::normal_pair(123, 45);
  const auto b = synth::normal_pair(123, 45);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
  CHECK(synth::normal_pair(123, 46) != a);
  CHECK(synth::normal_pair(124, 45) != a);

  // fixed-seed sample moments; adjacent indices must not share draws
  const int n = 20000;
  double sum = 0.0, sumsq = 0.0, lag = 0.0;
  double prev = 0.0;
  for (int i = 0; i < n; ++i) {
    const auto [g1, g2] = synth::normal_pair(7, static_cast<std::uint64_t>(i));
    sum += g1 + g2;
    sumsq += g1 * g1 + g2 * g2;
    lag += prev * g1;
    prev = g2;
  }
  const double mean = sum / (2.0 * n);
  const double var = sumsq / (2.0 * n) - mean * mean;
  CHECK(std::abs(mean) < 0.02);
  CHECK(var == rel(1.0, 0.05));
  CHECK(std::abs(lag / n) < 0.02);
}

TEST_CASE("complex noise scales with sigma and skips the zero case") {
  CHECK(synth::complex_noise({0.0, 9}, 3) == Complex{0.0, 0.0});
  const Complex one = synth::complex_noise({1.0, 9}, 3);
  const Complex two = synth::complex_noise({2.0, 9}, 3);
  CHECK(two == 2.0 * one);
}

TEST_CASE("frequency grid endpoints and validation") {
  const auto g = synth::frequency_grid(1e9, 2e9, 11);
  REQUIRE(g.size() == 11);
  CHECK(g.front() == 1e9);
  CHECK(g.back() == 2e9);
  CHECK(g[5] == rel(1.5e9, 1e-12));
  for (std::size_t i = 1; i < g.size(); ++i) CHECK(g[i] > g[i - 1]);
  CHECK_THROWS_AS(synth::frequency_grid(2e9, 1e9, 11), DomainError);
  CHECK_THROWS_AS(synth::frequency_grid(1e9, 2e9, 1), DomainError);
}

TEST_CASE("linear trace generation is exact at zero noise and reproducible") {
  s21::ResonatorFit fit;
  fit.f_r = 6.0e9;
  fit.Q_L = 450.0;
  fit.Q_c_abs = 490.0;
  fit.phi = 0.1;
  s21::BackgroundModel bg;
  bg.a0 = 0.97;
  bg.phi0 = 0.4;
  bg.tau = 21e-9;
  bg.f0 = 6.0e9;
  const auto grid = synth::frequency_grid(5.9e9, 6.1e9, 401);

  const auto clean = synth::gen_linear_trace(fit, {}, grid, {});
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const Complex model = s21::s21_linear(grid[i], 6.0e9, 450.0, 490.0, 0.1);
    CHECK(std::abs(clean.s21[i] - model) < 1e-15);
  }

  const synth::NoiseSpec noisy{0.01, 2024};
  const auto t1 = synth::gen_linear_trace(fit, bg, grid, noisy);
  const auto t2 = synth::gen_linear_trace(fit, bg, grid, noisy);
  CHECK(identical(t1, t2));
  CHECK_FALSE(identical(t1, synth::gen_linear_trace(fit, bg, grid, {0.01, 2025})));

  // sample std of the residual against the known model and background
  double acc = 0.0;
  for (std::size_t i = 0; i < t1.size(); ++i) {
    const Complex model =
        bg.at(grid[i]) * s21::s21_linear(grid[i], 6.0e9, 450.0, 490.0, 0.1);
    acc += std::norm(t1.s21[i] - model);
  }
  const double sigma_hat = std::sqrt(acc / (2.0 * double(t1.size())));
  CHECK(sigma_hat == rel(0.01, 0.10));

  CHECK_THROWS_AS(synth::gen_linear_trace(fit, bg, grid, {-0.1, 0}), DomainError);
  CHECK_THROWS_AS(synth::gen_linear_trace(fit, bg, {6e9}, {}), DomainError);
}

TEST_CASE("power sweep: K = 0 keeps the dip put, metadata filled in") {
  const s21::DuffingParams d{5.5e9, 2.0 * kPi * 12e6, 2.0 * kPi * 11e6, 0.0};
  const auto grid = synth::frequency_grid(5.48e9, 5.52e9, 801);
  const std::vector<double> powers{-70.0, -65.0, -60.0, -55.0};
  const auto sweep = synth::gen_power_sweep(d, powers, 66.0, grid, {});
  REQUIRE(sweep.traces.size() == 4);

  const double f_dip0 = dip_frequency(sweep.traces[0]);
  for (std::size_t k = 0; k < sweep.traces.size(); ++k) {
    CHECK_FALSE(sweep.bistable[k]);
    const auto& t = sweep.traces[k];
    REQUIRE(t.power_at_device.has_value());
    CHECK(*t.power_at_device == rel(dbm_to_watt(powers[k] - 66.0), 1e-12));
    CHECK(t.attenuation_db == 66.0);
    CHECK(dip_frequency(t) == rel(f_dip0, 1e-9));
    // with K = 0 the dip photon number is the linear on-resonance response
    const double s = *t.power_at_device / (PhysicalConstants::hbar * 2.0 * kPi * 5.5e9);
    CHECK(sweep.n_at_dip[k] == rel(4.0 * d.kappa_c * s / (d.kappa * d.kappa), 1e-4));
  }

  CHECK_THROWS_AS(synth::gen_power_sweep(d, {-60.0, -65.0}, 66.0, grid, {}),
                  DomainError);
  CHECK_THROWS_AS(synth::gen_power_sweep(d, {}, 66.0, grid, {}), DomainError);
}

TEST_CASE("power sweep: dip tracks the Kerr shift linearly") {
  const s21::DuffingParams d{5.5e9, 2.0 * kPi * 12e6, 2.0 * kPi * 11e6,
                             2.0 * kPi * 216e3};
  const auto grid = synth::frequency_grid(5.492e9, 5.502e9, 2001);  // 5 kHz step
  std::vector<double> powers;
  for (int i = 0; i < 10; ++i) powers.push_back(-72.0 + 1.5 * i);
  const auto sweep = synth::gen_power_sweep(d, powers, 66.0, grid, {});

  // straight line through (n_at_dip, measured dip frequency)
  double sn = 0.0, sf = 0.0, snn = 0.0, snf = 0.0;
  const auto m = double(powers.size());
  for (std::size_t k = 0; k < powers.size(); ++k) {
    const double n = sweep.n_at_dip[k];
    const double f = dip_frequency(sweep.traces[k]);
    sn += n;
    sf += f;
    snn += n * n;
    snf += n * f;
  }
  const double slope = (snf - sn * sf / m) / (snn - sn * sn / m);
  const double intercept = (sf - slope * sn) / m;
  CHECK(slope == rel(-216e3, 0.02));
  CHECK(intercept == rel(5.5e9, 1e-6));
}

TEST_CASE("power sweep: bistable drives are flagged and visibly folded") {
  const s21::DuffingParams d{5.5e9, 2.0 * kPi * 12e6, 2.0 * kPi * 11e6,
                             2.0 * kPi * 216e3};
  const auto grid = synth::frequency_grid(5.46e9, 5.54e9, 1201);
  const auto sweep = synth::gen_power_sweep(d, {-70.0, -48.0}, 66.0, grid, {});
  CHECK_FALSE(sweep.bistable[0]);
  CHECK(sweep.bistable[1]);

  // The branch jump sits linewidths above the dip where |S21| is near one,
  // so its absolute size stays modest; what marks it is isolation. A smooth
  // trace's largest adjacent-sample step is matched by its neighbors, a fold
  // towers over the runner-up.
  auto jump_ratio = [](const s21::ComplexTrace& t, double& largest) {
    std::vector<double> d;
    for (std::size_t i = 1; i < t.size(); ++i)
      d.push_back(std::abs(t.s21[i] - t.s21[i - 1]));
    std::sort(d.begin(), d.end());
    largest = d.back();
    return d.back() / d[d.size() - 2];
  };
  double smooth_max = 0.0, folded_max = 0.0;
  CHECK(jump_ratio(sweep.traces[0], smooth_max) < 1.5);
  CHECK(jump_ratio(sweep.traces[1], folded_max) > 3.0);
  CHECK(smooth_max < 0.05);
  CHECK(folded_max > 0.05);
}

TEST_CASE("flux map generation: period, windows, determinism") {
  const ftr::FtrParams params{ftr::CpwParams{3.259e-3, 3.336e-7, 2.174e-10},
                              squid::SquidParams{361e-9, 0.3, 776e-12}, 1.1};
  const mag::FluxCalibration cal{0.3e-6, 17.8e-6};
  std::vector<double> currents(180);
  for (int i = 0; i < 180; ++i)
    currents[i] = -1.5 * 17.8e-6 + 3.0 * 17.8e-6 * i / 179.0;
  const auto offsets = synth::frequency_grid(-60e6, 60e6, 101);
  const synth::QModel q{480.0, 490.0, 0.05};

  const auto map = synth::gen_flux_map(params, cal, currents, offsets, q,
                                       {0.0, 31}, 0.0);
  REQUIRE(map.size() == currents.size());
  std::vector<ftr::TuningData> period_map;
  for (const auto& p : map) {
    REQUIRE(p.valid);
    CHECK(p.trace.bias_current == p.bias_current);
    CHECK(p.trace.freqs.front() == rel(p.f_r_model - 60e6, 1e-9));
    period_map.push_back({p.bias_current, p.f_r_model});
  }
  const auto rec = s21::extract_period(period_map);
  CHECK(rec.I_Phi0 == rel(17.8e-6, 5e-3));

  const auto again = synth::gen_flux_map(params, cal, currents, offsets, q,
                                         {0.0, 31}, 0.0);
  for (std::size_t i = 0; i < map.size(); ++i)
    CHECK(identical(map[i].trace, again[i].trace));

  // one end-to-end point: the trace fits back to the model resonance
  const auto fit = s21::fit_linear_resonance(map[10].trace);
  CHECK(fit.f_r == rel(map[10].f_r_model, 1e-6));
  CHECK(fit.Q_L == rel(480.0, 5e-3));
}

TEST_CASE("flux map generation: strong screening keeps the principal branch") {
  // Above the screening fold onset the flux relation is multivalued, and the
  // screening curve reports it. The map generator, however, follows the
  // principal periodic branch, which crosses the fold window continuously:
  // its largest step keeps shrinking under grid refinement exactly as below
  // onset. Synthesized maps never carry hysteretic jumps; folds live in
  // fold_intervals.
  const double I0 = 3.61e-6;
  const mag::FluxCalibration cal{0.0, 17.8e-6};
  const auto offsets = synth::frequency_grid(-60e6, 60e6, 5);
  const synth::QModel q;

  for (const double beta_L : {0.3, 0.8}) {
    const double Lg = beta_L * PhysicalConstants::phi0 / (2.0 * I0);
    const squid::SquidParams sq{I0, 0.0, Lg};
    const ftr::FtrParams dev{ftr::CpwParams{3.259e-3, 3.336e-7, 2.174e-10},
                             sq, 1.0};

    // the alpha = 0 fold window sits around one flux quantum
    std::vector<double> flux_grid;
    double coarse_jump = 0.0, fine_jump = 0.0;
    for (const int N : {301, 1201}) {
      std::vector<double> currents(N);
      for (int i = 0; i < N; ++i)
        currents[i] = (0.4 + 1.2 * i / (N - 1.0)) * cal.I_Phi0;
      const auto map = synth::gen_flux_map(dev, cal, currents, offsets, q, {});
      double jmax = 0.0;
      for (std::size_t i = 1; i < map.size(); ++i) {
        if (!map[i].valid || !map[i - 1].valid) continue;
        jmax = std::max(jmax, std::abs(map[i].f_r_model - map[i - 1].f_r_model));
      }
      (N == 301 ? coarse_jump : fine_jump) = jmax;
      if (N == 301) {
        for (double c : currents)
          flux_grid.push_back(mag::flux_from_current(c, cal));
      }
    }
    CHECK(fine_jump > 0.0);
    CHECK(fine_jump < 0.35 * coarse_jump);

    const auto sc = squid::screening_curve(sq, flux_grid);
    CHECK(sc.multivalued == (beta_L > 0.7));
    CHECK(sc.fold_intervals.empty() == (beta_L < 0.7));
  }
}

TEST_CASE("flux map generation: resonance jitter is seeded and bounded") {
  const ftr::FtrParams params{ftr::CpwParams{3.259e-3, 3.336e-7, 2.174e-10},
                              squid::SquidParams{361e-9, 0.3, 776e-12}, 1.1};
  const mag::FluxCalibration cal{0.0, 17.8e-6};
  std::vector<double> currents(24);
  for (int i = 0; i < 24; ++i) currents[i] = -8e-6 + 16e-6 * i / 23.0;
  const auto offsets = synth::frequency_grid(-60e6, 60e6, 201);
  const synth::QModel q{480.0, 490.0, 0.05};

  const auto map = synth::gen_flux_map(params, cal, currents, offsets, q,
                                       {0.0, 5}, 1e6);
  double dev = 0.0;
  int shifted = 0;
  for (const auto& p : map) {
    const auto fit = s21::fit_linear_resonance(p.trace);
    const double delta = fit.f_r - p.f_r_model;
    dev = std::max(dev, std::abs(delta));
    if (std::abs(delta) > 1e4) ++shifted;
  }
  CHECK(dev < 5e6);    // few-sigma bound on a 1 MHz jitter
  CHECK(shifted > 12);  // and most points really move

  const auto again = synth::gen_flux_map(params, cal, currents, offsets, q,
                                         {0.0, 5}, 1e6);
  for (std::size_t i = 0; i < map.size(); ++i)
    CHECK(identical(map[i].trace, again[i].trace));

  CHECK_THROWS_AS(synth::gen_flux_map(params, cal, currents, offsets, q, {},
                                      -1.0),
                  DomainError);
  CHECK_THROWS_AS(synth::gen_flux_map(params, cal, {}, offsets, {}, {}),
                  DomainError);
}
