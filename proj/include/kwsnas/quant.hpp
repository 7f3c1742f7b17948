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
#ifndef KWSNAS_QUANT_HPP_
#define KWSNAS_QUANT_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "kwsnas/tensor.hpp"

namespace kwsnas {

enum class QuantTarget { kWeight, kActivation };
enum class QuantMode { kFixed, kTrained };

/// Per-tensor quantizer configuration.
///
/// Weights are quantized signed-symmetric with the dynamic range recomputed
/// from the auxiliary tensor (alpha = max|w|) on every forward pass.
/// Activations are unsigned (they sit behind ReLU): 1-bit uses a constant
/// alpha = 1 and values {0, 1}; 2 bits and up use a trainable alpha.
/// Trained mode learns a continuous bit-width b_cont >= 2; the reported and
/// exported bit-width is round(b_cont) clamped to [2, 8].
struct QuantSpec {
  QuantTarget target = QuantTarget::kWeight;
  QuantMode mode = QuantMode::kFixed;
  int bits = 8;            // fixed mode
  double b_init = 4.0;     // trained mode
  double b_min = 2.0;
  double b_max = 8.0;
};

template <typename T>
struct Quantizer {
  QuantSpec spec;

  // Trainable state. alpha is live only for activations with >= 2 bits;
  // b_cont only in trained mode.
  T alpha = T(1);
  T b_cont = T(4);
  T alpha_grad = T(0);
  T b_grad = T(0);

  // Activation-range calibration (warm-up pass): collect mean |x| and pass
  // inputs through unquantized; finish_calibration() sets alpha.
  bool calibrating = false;
  double calib_abs_sum = 0.0;
  std::uint64_t calib_count = 0;

  // Element count used by the average-bit-width terms. For weights this is
  // the weight tensor size; for activations the per-example output size.
  std::uint64_t element_count = 0;

  bool alpha_trainable() const {
    return spec.target == QuantTarget::kActivation && effective_int_bits() >= 2 &&
           !(spec.mode == QuantMode::kFixed && spec.bits == 1);
  }
  bool b_trainable() const { return spec.mode == QuantMode::kTrained; }

  /// Integer bit-width used for reporting, evaluation and export.
  int effective_int_bits() const {
    if (spec.mode == QuantMode::kFixed) return spec.bits;
    int b = static_cast<int>(std::lround(static_cast<double>(b_cont)));
    return std::clamp(b, static_cast<int>(spec.b_min), static_cast<int>(spec.b_max));
  }

  /// Bit-width entering the average-bit-width loss terms: the continuous
  /// parameter in trained mode, the constant in fixed mode.
  double loss_bits() const {
    return spec.mode == QuantMode::kTrained ? static_cast<double>(b_cont)
                                            : static_cast<double>(spec.bits);
  }

  void start_calibration() {
    calibrating = true;
    calib_abs_sum = 0.0;
    calib_count = 0;
  }

  /// alpha starts at 4x the mean |x| seen during the warm-up pass.
  void finish_calibration() {
    calibrating = false;
    if (calib_count > 0) {
      double mean_abs = calib_abs_sum / static_cast<double>(calib_count);
      alpha = static_cast<T>(std::max(4.0 * mean_abs, 1e-6));
    }
  }

  void reset(Rng& /*unused*/) {
    alpha = T(1);
    b_cont = static_cast<T>(spec.b_init);
    alpha_grad = T(0);
    b_grad = T(0);
  }
};

/// Everything backward needs about one quantize() call.
template <typename T>
struct QuantCache {
  std::vector<std::uint8_t> pass;  // inside the clip range
  std::vector<std::uint8_t> high; // clipped above (activations)
  std::vector<T> code;             // integer codes as reals
  T alpha_used = T(1);
  T qmax = T(1);
  double bits_used = 8.0;          // continuous bits actually applied
  bool sign_mode = false;          // 1-bit signed (weights): q = alpha * sign(x)
  bool active = false;             // false when pass-through (calibration)
};

namespace detail {

/// q_max for a (possibly fractional) bit-width.
inline double qmax_for(double bits, bool is_signed) {
  return is_signed ? std::pow(2.0, bits - 1.0) - 1.0 : std::pow(2.0, bits) - 1.0;
}

}  // namespace detail

/// Fake-quantizes x. In trained mode during training the grid uses the
/// continuous bit-width parameter directly (the smoothed quantizer that the
/// analytic gradients differentiate); evaluation and export round it first.
template <typename T>
Tensor<T> quantize(const Tensor<T>& x, Quantizer<T>& q, bool training,
                   QuantCache<T>* cache = nullptr) {
  const bool is_weight = q.spec.target == QuantTarget::kWeight;
  Tensor<T> y(x.shape);

  if (q.calibrating) {
    for (T v : x.data) q.calib_abs_sum += std::fabs(static_cast<double>(v));
    q.calib_count += x.numel();
    if (cache) {
      cache->active = false;
      cache->pass.assign(x.numel(), 1);
    }
    y.data = x.data;
    return y;
  }

  double bits = q.spec.mode == QuantMode::kTrained
                    ? (training ? std::clamp(static_cast<double>(q.b_cont), q.spec.b_min,
                                             q.spec.b_max)
                                : static_cast<double>(q.effective_int_bits()))
                    : static_cast<double>(q.spec.bits);

  T alpha = q.alpha;
  if (is_weight) {
    T amax = T(0);
    for (T v : x.data) amax = std::max(amax, static_cast<T>(std::fabs(static_cast<double>(v))));
    alpha = amax;
    q.alpha = amax;  // recorded for reporting/export
  } else if (q.spec.mode == QuantMode::kFixed && q.spec.bits == 1) {
    alpha = T(1);
  }

  if (cache) {
    cache->active = true;
    cache->alpha_used = alpha;
    cache->bits_used = bits;
    cache->sign_mode = false;
    cache->pass.assign(x.numel(), 0);
    cache->high.assign(x.numel(), 0);
    cache->code.assign(x.numel(), T(0));
  }

  // Degenerate all-zero tensor: alpha = 0 produces a zero output rather than
  // an error so dead layers do not kill a run.
  if (!(static_cast<double>(alpha) > 0.0)) {
    if (cache) cache->qmax = T(1);
    return y;
  }

  if (is_weight && bits <= 1.0) {
    // 1-bit signed: {-alpha, +alpha}.
    if (cache) {
      cache->sign_mode = true;
      cache->qmax = T(1);
    }
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const T s = x.data[i] >= T(0) ? T(1) : T(-1);
      y.data[i] = alpha * s;
      if (cache) {
        cache->pass[i] = 1;
        cache->code[i] = s;
      }
    }
    return y;
  }

  const double qmax = detail::qmax_for(bits, is_weight);
  if (cache) cache->qmax = static_cast<T>(qmax);
  const double lo = is_weight ? -1.0 : 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double u = static_cast<double>(x.data[i]) / static_cast<double>(alpha);
    const double c = std::clamp(u, lo, 1.0);
    const double r = std::round(c * qmax);
    y.data[i] = static_cast<T>(static_cast<double>(alpha) * (r / qmax));
    if (cache) {
      cache->pass[i] = (u >= lo && u <= 1.0) ? 1 : 0;
      cache->high[i] = (u > 1.0) ? 1 : 0;
      cache->code[i] = static_cast<T>(r);
    }
  }
  return y;
}

/// Straight-through backward for one quantize() call. Returns grad_x and
/// accumulates alpha/bit-width gradients on the quantizer:
///   grad_x: grad_out masked to the clip range (all-pass for max-abs weights).
///   grad_alpha: clipped-above region passes grad_out (learned-range rule).
///   grad_b: exact a.e. derivative of the smoothed quantizer w.r.t. the
///           continuous bit-width, -alpha * code * ln2 * 2^b / qmax^2
///           (signed grids use 2^(b-1)).
template <typename T>
Tensor<T> ste_backward(const Tensor<T>& grad_out, const QuantCache<T>& cache, Quantizer<T>& q) {
  Tensor<T> gx(grad_out.shape);
  if (!cache.active) {
    gx.data = grad_out.data;
    return gx;
  }
  const bool is_weight = q.spec.target == QuantTarget::kWeight;
  for (std::size_t i = 0; i < grad_out.numel(); ++i)
    gx.data[i] = cache.pass[i] ? grad_out.data[i] : T(0);

  if (q.alpha_trainable() && !cache.sign_mode) {
    double ga = 0.0;
    for (std::size_t i = 0; i < grad_out.numel(); ++i)
      if (cache.high[i]) ga += static_cast<double>(grad_out.data[i]);
    q.alpha_grad += static_cast<T>(ga);
  }

  if (q.b_trainable() && !cache.sign_mode && static_cast<double>(cache.qmax) > 0.0) {
    const double b = cache.bits_used;
    const double qm = static_cast<double>(cache.qmax);
    const double dqmax_db = std::log(2.0) * std::pow(2.0, is_weight ? b - 1.0 : b);
    const double scale = -static_cast<double>(cache.alpha_used) * dqmax_db / (qm * qm);
    double gb = 0.0;
    for (std::size_t i = 0; i < grad_out.numel(); ++i)
      gb += static_cast<double>(grad_out.data[i]) * static_cast<double>(cache.code[i]);
    q.b_grad += static_cast<T>(scale * gb);
  }
  return gx;
}

/// Integer export image of one weight tensor: signed codes plus the scale.
template <typename T>
struct QuantizedCodes {
  std::vector<std::int8_t> codes;
  float alpha = 0.0f;
  int bits = 8;
  bool sign_mode = false;
};

/// Quantizes a weight tensor to integer codes at the reporting bit-width.
/// Re-expansion is alpha * (code / qmax) (alpha * code for 1-bit), which
/// reproduces the fake-quantized tensor bit-exactly.
template <typename T>
QuantizedCodes<T> quantize_to_codes(const Tensor<T>& w, Quantizer<T>& q) {
  QuantizedCodes<T> out;
  out.bits = q.effective_int_bits();
  T amax = T(0);
  for (T v : w.data) amax = std::max(amax, static_cast<T>(std::fabs(static_cast<double>(v))));
  q.alpha = amax;
  out.alpha = static_cast<float>(amax);
  out.codes.resize(w.numel());
  if (!(static_cast<double>(amax) > 0.0)) return out;
  if (out.bits == 1) {
    out.sign_mode = true;
    for (std::size_t i = 0; i < w.numel(); ++i)
      out.codes[i] = w.data[i] >= T(0) ? 1 : -1;
    return out;
  }
  const double qmax = detail::qmax_for(out.bits, true);
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double u = static_cast<double>(w.data[i]) / static_cast<double>(amax);
    out.codes[i] = static_cast<std::int8_t>(std::lround(std::clamp(u, -1.0, 1.0) * qmax));
  }
  return out;
}

/// Re-expands integer codes to reals exactly the way the fake quantizer does.
template <typename T>
Tensor<T> dequantize_codes(const QuantizedCodes<T>& qc, const std::vector<int>& shape) {
  Tensor<T> w(shape);
  if (!(qc.alpha > 0.0f)) return w;
  const T alpha = static_cast<T>(qc.alpha);
  if (qc.sign_mode) {
    for (std::size_t i = 0; i < w.numel(); ++i)
      w.data[i] = alpha * static_cast<T>(qc.codes[i]);
    return w;
  }
  const T qmax = static_cast<T>(detail::qmax_for(qc.bits, true));
  for (std::size_t i = 0; i < w.numel(); ++i)
    w.data[i] = alpha * (static_cast<T>(qc.codes[i]) / qmax);
  return w;
}

}  // namespace kwsnas

#endif  // KWSNAS_QUANT_HPP_
