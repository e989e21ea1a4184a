#pragma once

#include <fftw3.h>

#include <Eigen/Dense>
#include <complex>
#include <mutex>
#include <stdexcept>
#include <vector>

namespace braintok {

// Real 1-D FFT helpers on top of FFTW (double precision, FFTW_ESTIMATE plans
// so results do not depend on planner timing). The FFTW planner is not
// thread-safe; plan creation/destruction is serialized.

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Forward transform of a length-T real signal; returns T/2+1 coefficients
// (unscaled, FFTW convention).
inline std::vector<std::complex<double>> rfft(const std::vector<double>& x) {
  const int n = static_cast<int>(x.size());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(n / 2 + 1));
  std::vector<double> in(x);
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_r2c_1d(n, in.data(),
                                reinterpret_cast<fftw_complex*>(out.data()),
                                FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  return out;
}

// Inverse of rfft, scaled by 1/T so irfft(rfft(x)) == x up to roundoff.
inline std::vector<double> irfft(std::vector<std::complex<double>> coeffs, int n) {
  std::vector<double> out(static_cast<std::size_t>(n));
  fftw_plan plan;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    plan = fftw_plan_dft_c2r_1d(n, reinterpret_cast<fftw_complex*>(coeffs.data()),
                                out.data(), FFTW_ESTIMATE);
  }
  fftw_execute(plan);
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(plan);
  }
  for (auto& v : out) v /= static_cast<double>(n);
  return out;
}

// Zeroes every bin whose frequency lies outside [lo, hi] (inclusive band
// edges) and reconstructs. Frequency of bin k is k / (n * dt) Hz. Operating
// on the half-spectrum keeps the output exactly real.
inline std::vector<double> brickwall_bandpass(const std::vector<double>& x,
                                              double dt, double lo, double hi) {
  const int n = static_cast<int>(x.size());
  auto coeffs = rfft(x);
  for (std::size_t k = 0; k < coeffs.size(); ++k) {
    const double f = static_cast<double>(k) / (static_cast<double>(n) * dt);
    if (f < lo || f > hi) coeffs[k] = 0.0;
  }
  return irfft(std::move(coeffs), n);
}

}  // namespace braintok
