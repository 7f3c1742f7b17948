/* Copyright 2026 The kwsnas Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#ifndef KWSNAS_SINC_HPP_
#define KWSNAS_SINC_HPP_

#include <cmath>
#include <vector>

#include "kwsnas/error.hpp"

namespace kwsnas {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

/// sinc(x) = sin(x)/x with sinc(0) = 1.
inline double sinc(double x) {
  if (std::fabs(x) < 1e-8) return 1.0 - x * x / 6.0;
  return std::sin(x) / x;
}

/// d/dx sinc(x); odd, zero at the origin.
inline double dsinc(double x) {
  if (std::fabs(x) < 1e-4) return -x / 3.0 + x * x * x / 30.0;
  return (std::cos(x) - std::sin(x) / x) / x;
}

inline std::vector<double> hamming_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  if (n == 1) {
    w[0] = 1.0;
    return w;
  }
  for (int i = 0; i < n; ++i)
    w[static_cast<std::size_t>(i)] = 0.54 - 0.46 * std::cos(kTwoPi * i / (n - 1));
  return w;
}

/// Symmetric time offsets in seconds: (i - (N-1)/2)/fs. For even N the taps
/// sit on half-sample positions; the kernel stays exactly even-symmetric.
inline double tap_time(int i, int n, double fs) {
  return (static_cast<double>(i) - 0.5 * (n - 1)) / fs;
}

/// Band-pass kernel: difference of two scaled sinc low-pass prototypes,
/// evaluated at the symmetric tap times. No window applied here.
inline std::vector<double> sinc_kernel_raw(double f1, double f2, int n, double fs) {
  if (!(f1 >= 0.0 && f1 <= f2 && f2 <= fs / 2.0))
    throw ConfigError("sinc kernel: cutoffs must satisfy 0 <= f1 <= f2 <= fs/2");
  std::vector<double> g(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const double t = tap_time(i, n, fs);
    g[static_cast<std::size_t>(i)] =
        2.0 * f2 * sinc(kTwoPi * f2 * t) - 2.0 * f1 * sinc(kTwoPi * f1 * t);
  }
  return g;
}

/// Windowed band-pass kernel; this is what the front end correlates with.
/// Windowing the kernel instead of each frame is an elementwise-product
/// identity, and cheaper because kernels are cached.
inline std::vector<double> sinc_kernel(double f1, double f2, int n, double fs) {
  std::vector<double> g = sinc_kernel_raw(f1, f2, n, fs);
  std::vector<double> w = hamming_window(n);
  for (int i = 0; i < n; ++i) g[static_cast<std::size_t>(i)] *= w[static_cast<std::size_t>(i)];
  return g;
}

/// Partial derivative of the windowed kernel w.r.t. one cutoff:
/// d/df [2 f sinc(2 pi f t)] = 2 sinc(u) + 2 f t 2 pi dsinc(u), u = 2 pi f t.
/// The t = 0 tap reduces analytically to 2.
inline std::vector<double> sinc_kernel_dcutoff(double f, int n, double fs) {
  std::vector<double> d(static_cast<std::size_t>(n));
  std::vector<double> w = hamming_window(n);
  for (int i = 0; i < n; ++i) {
    const double t = tap_time(i, n, fs);
    const double u = kTwoPi * f * t;
    d[static_cast<std::size_t>(i)] =
        w[static_cast<std::size_t>(i)] * (2.0 * sinc(u) + 2.0 * f * kTwoPi * t * dsinc(u));
  }
  return d;
}

/// Unconstrained-to-valid cutoff map. For any real (t1, t2):
///   f1 = min(|t1|, fs/2 - min_bw),  f2 = min(f1 + min_bw + |t2|, fs/2)
/// which guarantees 0 <= f1 < f2 <= fs/2 and f2 - f1 >= min_bw.
struct CutoffPair {
  double f1, f2;
  double df1_dt1;              // d f1 / d t1 (0 when clamped)
  double df2_dt1, df2_dt2;     // d f2 / d (t1, t2)
};

inline CutoffPair resolve_cutoffs(double t1, double t2, double fs, double min_bw) {
  CutoffPair c{};
  const double f1_cap = fs / 2.0 - min_bw;
  const double a1 = std::fabs(t1);
  const double s1 = (t1 >= 0.0) ? 1.0 : -1.0;
  if (a1 < f1_cap) {
    c.f1 = a1;
    c.df1_dt1 = s1;
  } else {
    c.f1 = f1_cap;
    c.df1_dt1 = 0.0;
  }
  const double a2 = std::fabs(t2);
  const double s2 = (t2 >= 0.0) ? 1.0 : -1.0;
  const double raw2 = c.f1 + min_bw + a2;
  if (raw2 < fs / 2.0) {
    c.f2 = raw2;
    c.df2_dt1 = c.df1_dt1;
    c.df2_dt2 = s2;
  } else {
    c.f2 = fs / 2.0;
    c.df2_dt1 = 0.0;
    c.df2_dt2 = 0.0;
  }
  return c;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Initial cutoffs: filter edges equally spaced on the mel scale over
/// [30 Hz, fs/2]; filter k spans [edge_k, edge_{k+1}].
inline void init_mel_cutoffs(int num_filters, double fs, double min_bw,
                             std::vector<double>* t1, std::vector<double>* t2) {
  const double mel_lo = hz_to_mel(30.0);
  const double mel_hi = hz_to_mel(fs / 2.0);
  t1->resize(static_cast<std::size_t>(num_filters));
  t2->resize(static_cast<std::size_t>(num_filters));
  for (int k = 0; k < num_filters; ++k) {
    const double m1 = mel_lo + (mel_hi - mel_lo) * k / num_filters;
    const double m2 = mel_lo + (mel_hi - mel_lo) * (k + 1) / num_filters;
    const double f1 = mel_to_hz(m1);
    const double f2 = mel_to_hz(m2);
    (*t1)[static_cast<std::size_t>(k)] = f1;
    (*t2)[static_cast<std::size_t>(k)] = std::max(f2 - f1 - min_bw, 0.0);
  }
}

inline int frame_count(int num_samples, int window_len, int hop) {
  if (num_samples < window_len) return 0;
  return (num_samples - window_len) / hop + 1;
}

}  // namespace kwsnas

#endif  // KWSNAS_SINC_HPP_
