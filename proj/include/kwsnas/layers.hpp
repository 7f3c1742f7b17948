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
#ifndef KWSNAS_LAYERS_HPP_
#define KWSNAS_LAYERS_HPP_

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "kwsnas/quant.hpp"
#include "kwsnas/sinc.hpp"
#include "kwsnas/tensor.hpp"

namespace kwsnas {

// ---------------------------------------------------------------------------
// Layer descriptors. Plain serializable data; weights live in LayerVars.
// ---------------------------------------------------------------------------

struct Conv2dDesc {
  int kh = 1, kw = 1;
  int sh = 1, sw = 1;
  int pad = 0;
  int c_in = 1, c_out = 1;
  bool bias = false;
};

struct DepthwiseConv2dDesc {
  int k = 3;
  int sh = 1, sw = 1;
  int pad = 1;
  int c = 1;
};

struct BatchNormDesc {
  int c = 1;
  double eps = 1e-5;
  double momentum = 0.1;
};

struct ReluDesc {};

struct GlobalAvgPoolDesc {};

struct FullyConnectedDesc {
  int d_in = 1, d_out = 1;
};

struct IdentityDesc {};

/// Trainable band-pass front end: each filter is a windowed two-cutoff sinc
/// kernel, so it stores two scalars per filter. Input [B,1,1,L], output
/// [B,1,F,T] (filters down, frames across) feeding the 2-d stages.
struct SincConvDesc {
  int num_filters = 40;
  int kernel_len = 400;
  int hop = 160;
  double sample_rate = 16000.0;
  double min_bandwidth = 50.0;
};

/// Fully learnable 1-d front end with the same framing contract; frames are
/// Hamming-windowed at run time so the comparison with SincConv is fair.
struct Conv1dFrontendDesc {
  int num_filters = 40;
  int kernel_len = 400;
  int hop = 160;
};

using LayerDesc = std::variant<Conv2dDesc, DepthwiseConv2dDesc, BatchNormDesc, ReluDesc,
                               GlobalAvgPoolDesc, FullyConnectedDesc, IdentityDesc, SincConvDesc,
                               Conv1dFrontendDesc>;

inline const char* layer_kind_name(const LayerDesc& d) {
  struct V {
    const char* operator()(const Conv2dDesc&) { return "conv2d"; }
    const char* operator()(const DepthwiseConv2dDesc&) { return "depthwise_conv2d"; }
    const char* operator()(const BatchNormDesc&) { return "batch_norm"; }
    const char* operator()(const ReluDesc&) { return "relu"; }
    const char* operator()(const GlobalAvgPoolDesc&) { return "global_avg_pool"; }
    const char* operator()(const FullyConnectedDesc&) { return "fully_connected"; }
    const char* operator()(const IdentityDesc&) { return "identity"; }
    const char* operator()(const SincConvDesc&) { return "sinc_conv"; }
    const char* operator()(const Conv1dFrontendDesc&) { return "conv1d_frontend"; }
  };
  return std::visit(V{}, d);
}

inline int conv_out_dim(int in, int k, int stride, int pad, const std::string& where) {
  const int out = (in + 2 * pad - k) / stride + 1;
  if (in + 2 * pad < k || out < 1)
    throw ShapeError(where + ": input extent " + std::to_string(in) + " too small for kernel " +
                     std::to_string(k));
  return out;
}

/// Output shape for a per-example input shape (no batch dimension) or a
/// batched one; the batch extent, when present, passes through unchanged.
inline std::vector<int> output_shape(const LayerDesc& desc, const std::vector<int>& in) {
  const bool batched = in.size() == 4 || (in.size() == 2 && !std::holds_alternative<SincConvDesc>(desc) &&
                                          !std::holds_alternative<Conv1dFrontendDesc>(desc));
  std::vector<int> s = in;
  auto expect = [&](bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(std::string(layer_kind_name(desc)) + ": " + msg + " (input " +
                              shape_str(in) + ")");
  };
  if (auto* c = std::get_if<Conv2dDesc>(&desc)) {
    expect(s.size() == 4 || s.size() == 3, "need [B,C,H,W] or [C,H,W]");
    const int off = s.size() == 4 ? 1 : 0;
    expect(s[off] == c->c_in, "channel mismatch");
    s[off] = c->c_out;
    s[off + 1] = conv_out_dim(in[off + 1], c->kh, c->sh, c->pad, "conv2d.h");
    s[off + 2] = conv_out_dim(in[off + 2], c->kw, c->sw, c->pad, "conv2d.w");
    return s;
  }
  if (auto* c = std::get_if<DepthwiseConv2dDesc>(&desc)) {
    expect(s.size() == 4 || s.size() == 3, "need [B,C,H,W] or [C,H,W]");
    const int off = s.size() == 4 ? 1 : 0;
    expect(s[off] == c->c, "channel mismatch");
    s[off + 1] = conv_out_dim(in[off + 1], c->k, c->sh, c->pad, "depthwise.h");
    s[off + 2] = conv_out_dim(in[off + 2], c->k, c->sw, c->pad, "depthwise.w");
    return s;
  }
  if (auto* c = std::get_if<BatchNormDesc>(&desc)) {
    const int off = (s.size() == 4 || s.size() == 2) ? 1 : 0;
    expect(s.size() >= 2 || (s.size() == 1), "need a channel axis");
    expect(s[off] == c->c, "channel mismatch");
    return s;
  }
  if (std::holds_alternative<ReluDesc>(desc) || std::holds_alternative<IdentityDesc>(desc)) {
    return s;
  }
  if (std::holds_alternative<GlobalAvgPoolDesc>(desc)) {
    expect(s.size() == 4 || s.size() == 3, "need [B,C,H,W] or [C,H,W]");
    if (s.size() == 4) return {s[0], s[1]};
    return {s[0]};
  }
  if (auto* c = std::get_if<FullyConnectedDesc>(&desc)) {
    expect(s.size() == 2 || s.size() == 1, "need [B,D] or [D]");
    const int off = s.size() == 2 ? 1 : 0;
    expect(s[off] == c->d_in, "feature mismatch");
    s[off] = c->d_out;
    return s;
  }
  if (auto* c = std::get_if<SincConvDesc>(&desc)) {
    expect(s.size() == 4 || s.size() == 3, "need [B,1,1,L] waveform");
    const int off = s.size() == 4 ? 1 : 0;
    expect(s[off] == 1 && s[off + 1] == 1, "waveform input must be single channel");
    const int frames = frame_count(in[off + 2], c->kernel_len, c->hop);
    expect(frames >= 1, "waveform shorter than one window");
    s[off] = 1;
    s[off + 1] = c->num_filters;
    s[off + 2] = frames;
    return s;
  }
  if (auto* c = std::get_if<Conv1dFrontendDesc>(&desc)) {
    expect(s.size() == 4 || s.size() == 3, "need [B,1,1,L] waveform");
    const int off = s.size() == 4 ? 1 : 0;
    expect(s[off] == 1 && s[off + 1] == 1, "waveform input must be single channel");
    const int frames = frame_count(in[off + 2], c->kernel_len, c->hop);
    expect(frames >= 1, "waveform shorter than one window");
    s[off] = 1;
    s[off + 1] = c->num_filters;
    s[off + 2] = frames;
    return s;
  }
  throw ShapeError("unknown layer kind");
}

// ---------------------------------------------------------------------------
// Weights and buffers.
// ---------------------------------------------------------------------------

template <typename T>
struct ParamTensor {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  bool trainable = true;
};

template <typename T>
struct LayerVars {
  std::vector<ParamTensor<T>> params;
  // BatchNorm running statistics (buffers, not trained).
  Tensor<T> running_mean, running_var;
  // SincConv kernel cache, rebuilt whenever the resolved cutoffs change.
  Tensor<T> cached_kernels;
  std::vector<double> cached_f1, cached_f2;
};

template <typename T>
void zero_grads(LayerVars<T>& vars) {
  for (auto& p : vars.params) p.grad.zero();
}

/// Allocates and initializes weights for a layer.
template <typename T>
LayerVars<T> init_layer_vars(const LayerDesc& desc, Rng& rng) {
  LayerVars<T> vars;
  auto add = [&vars](const char* name, Tensor<T> t, bool trainable = true) {
    ParamTensor<T> p;
    p.name = name;
    p.grad = Tensor<T>(t.shape);
    p.value = std::move(t);
    p.trainable = trainable;
    vars.params.push_back(std::move(p));
  };
  if (auto* c = std::get_if<Conv2dDesc>(&desc)) {
    Tensor<T> w({c->c_out, c->c_in, c->kh, c->kw});
    w.fill_normal(rng, 0.0, std::sqrt(2.0 / (static_cast<double>(c->c_in) * c->kh * c->kw)));
    add("weight", std::move(w));
    if (c->bias) add("bias", Tensor<T>({c->c_out}));
  } else if (auto* c = std::get_if<DepthwiseConv2dDesc>(&desc)) {
    Tensor<T> w({c->c, c->k, c->k});
    w.fill_normal(rng, 0.0, std::sqrt(2.0 / (static_cast<double>(c->k) * c->k)));
    add("weight", std::move(w));
  } else if (auto* c = std::get_if<BatchNormDesc>(&desc)) {
    add("gamma", Tensor<T>::full({c->c}, T(1)));
    add("beta", Tensor<T>({c->c}));
    vars.running_mean = Tensor<T>({c->c});
    vars.running_var = Tensor<T>::full({c->c}, T(1));
  } else if (auto* c = std::get_if<FullyConnectedDesc>(&desc)) {
    Tensor<T> w({c->d_out, c->d_in});
    w.fill_normal(rng, 0.0, std::sqrt(2.0 / static_cast<double>(c->d_in)));
    add("weight", std::move(w));
    add("bias", Tensor<T>({c->d_out}));
  } else if (auto* c = std::get_if<SincConvDesc>(&desc)) {
    std::vector<double> t1, t2;
    init_mel_cutoffs(c->num_filters, c->sample_rate, c->min_bandwidth, &t1, &t2);
    Tensor<T> p1({c->num_filters}), p2({c->num_filters});
    for (int i = 0; i < c->num_filters; ++i) {
      p1.data[static_cast<std::size_t>(i)] = static_cast<T>(t1[static_cast<std::size_t>(i)]);
      p2.data[static_cast<std::size_t>(i)] = static_cast<T>(t2[static_cast<std::size_t>(i)]);
    }
    add("cutoff_low_raw", std::move(p1));
    add("cutoff_delta_raw", std::move(p2));
  } else if (auto* c = std::get_if<Conv1dFrontendDesc>(&desc)) {
    // Start from the same mel-spaced band-pass bank, unwindowed: window is
    // applied to frames at run time, so this reproduces SincConv exactly at
    // initialization.
    std::vector<double> t1, t2;
    init_mel_cutoffs(c->num_filters, 16000.0, 50.0, &t1, &t2);
    Tensor<T> w({c->num_filters, c->kernel_len});
    for (int f = 0; f < c->num_filters; ++f) {
      const double f1 = std::fabs(t1[static_cast<std::size_t>(f)]);
      const double f2 = f1 + 50.0 + std::fabs(t2[static_cast<std::size_t>(f)]);
      std::vector<double> g = sinc_kernel_raw(f1, std::min(f2, 8000.0), c->kernel_len, 16000.0);
      for (int i = 0; i < c->kernel_len; ++i)
        w.at2(f, i) = static_cast<T>(g[static_cast<std::size_t>(i)]);
    }
    add("weight", std::move(w));
  }
  return vars;
}

// ---------------------------------------------------------------------------
// Forward/backward caches.
// ---------------------------------------------------------------------------

template <typename T>
struct LayerCache {
  Tensor<T> input;
  // BatchNorm
  Tensor<T> xhat, invstd;
  bool bn_training = false;
  // Weight fake-quantization (set by the graph when a quantizer is attached)
  Tensor<T> wq;
  QuantCache<T> wq_cache;
  bool valid = false;
};

namespace detail {

template <typename T>
void im2col(const T* in, int c_in, int h, int w, int kh, int kw, int sh, int sw, int pad,
            int oh, int ow, T* col) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t row = 0;
  for (int ci = 0; ci < c_in; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        T* dst = col + row * static_cast<std::size_t>(oh) * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * sh - pad + ki;
          if (iy < 0 || iy >= h) {
            for (int x = 0; x < ow; ++x) dst[y * ow + x] = T(0);
            continue;
          }
          const T* src = in + ci * plane + static_cast<std::size_t>(iy) * w;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * sw - pad + kj;
            dst[y * ow + x] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_acc(const T* col, int c_in, int h, int w, int kh, int kw, int sh, int sw, int pad,
                int oh, int ow, T* in_grad) {
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::size_t row = 0;
  for (int ci = 0; ci < c_in; ++ci) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj, ++row) {
        const T* src = col + row * static_cast<std::size_t>(oh) * ow;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * sh - pad + ki;
          if (iy < 0 || iy >= h) continue;
          T* dst = in_grad + ci * plane + static_cast<std::size_t>(iy) * w;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * sw - pad + kj;
            if (ix >= 0 && ix < w) dst[ix] += src[y * ow + x];
          }
        }
      }
    }
  }
}

/// Builds the [F x N] windowed kernel bank if the resolved cutoffs moved.
template <typename T>
void refresh_sinc_kernels(const SincConvDesc& d, LayerVars<T>& vars) {
  const auto& t1 = vars.params[0].value;
  const auto& t2 = vars.params[1].value;
  std::vector<double> f1(static_cast<std::size_t>(d.num_filters));
  std::vector<double> f2(static_cast<std::size_t>(d.num_filters));
  for (int f = 0; f < d.num_filters; ++f) {
    CutoffPair c = resolve_cutoffs(static_cast<double>(t1.data[static_cast<std::size_t>(f)]),
                                   static_cast<double>(t2.data[static_cast<std::size_t>(f)]),
                                   d.sample_rate, d.min_bandwidth);
    f1[static_cast<std::size_t>(f)] = c.f1;
    f2[static_cast<std::size_t>(f)] = c.f2;
  }
  if (f1 == vars.cached_f1 && f2 == vars.cached_f2 && !vars.cached_kernels.empty()) return;
  vars.cached_kernels = Tensor<T>({d.num_filters, d.kernel_len});
  for (int f = 0; f < d.num_filters; ++f) {
    std::vector<double> k = sinc_kernel(f1[static_cast<std::size_t>(f)],
                                        f2[static_cast<std::size_t>(f)], d.kernel_len,
                                        d.sample_rate);
    for (int i = 0; i < d.kernel_len; ++i)
      vars.cached_kernels.at2(f, i) = static_cast<T>(k[static_cast<std::size_t>(i)]);
  }
  vars.cached_f1 = std::move(f1);
  vars.cached_f2 = std::move(f2);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward.
// ---------------------------------------------------------------------------

/// Runs one layer. `update_stats` controls BatchNorm running-stat updates so
/// finite-difference probes can re-run forwards without side effects. When a
/// weight quantizer is attached the graph passes the fake-quantized weight
/// in `weight_override`.
template <typename T>
Tensor<T> layer_forward(const LayerDesc& desc, LayerVars<T>& vars, const Tensor<T>& input,
                        bool training, bool update_stats, LayerCache<T>* cache,
                        const Tensor<T>* weight_override = nullptr) {
  if (cache) {
    cache->input = input;
    cache->valid = true;
  }
  const std::vector<int> out_shape = output_shape(desc, input.shape);

  if (std::holds_alternative<ReluDesc>(desc)) {
    Tensor<T> out(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i)
      out.data[i] = input.data[i] > T(0) ? input.data[i] : T(0);
    return out;
  }

  if (std::holds_alternative<IdentityDesc>(desc)) return input;

  if (std::holds_alternative<GlobalAvgPoolDesc>(desc)) {
    const int b = input.shape[0], c = input.shape[1];
    const int hw = input.shape[2] * input.shape[3];
    Tensor<T> out({b, c});
    const T inv = T(1) / static_cast<T>(hw);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < c; ++j) {
        const T* src = input.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
        T acc = T(0);
        for (int p = 0; p < hw; ++p) acc += src[p];
        out.at2(i, j) = acc * inv;
      }
    return out;
  }

  if (auto* d = std::get_if<FullyConnectedDesc>(&desc)) {
    const Tensor<T>& w = weight_override ? *weight_override : vars.params[0].value;
    const Tensor<T>& bias = vars.params[1].value;
    const int b = input.shape[0];
    Tensor<T> out({b, d->d_out});
    matmul_a_bt(input.data.data(), w.data.data(), out.data.data(), b, d->d_in, d->d_out);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < d->d_out; ++j) out.at2(i, j) += bias.data[static_cast<std::size_t>(j)];
    return out;
  }

  if (auto* d = std::get_if<Conv2dDesc>(&desc)) {
    const Tensor<T>& w = weight_override ? *weight_override : vars.params[0].value;
    const int b = input.shape[0], h = input.shape[2], wd = input.shape[3];
    const int oh = out_shape[2], ow = out_shape[3];
    const int kdim = d->c_in * d->kh * d->kw;
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    Tensor<T> out(out_shape);
    std::vector<T> col(static_cast<std::size_t>(kdim) * ohw);
    for (int bi = 0; bi < b; ++bi) {
      const T* in_ptr = input.data.data() + static_cast<std::size_t>(bi) * d->c_in * h * wd;
      detail::im2col(in_ptr, d->c_in, h, wd, d->kh, d->kw, d->sh, d->sw, d->pad, oh, ow,
                     col.data());
      T* out_ptr = out.data.data() + static_cast<std::size_t>(bi) * d->c_out * ohw;
      matmul(w.data.data(), col.data(), out_ptr, d->c_out, kdim, static_cast<int>(ohw));
      if (d->bias) {
        const Tensor<T>& bias = vars.params[1].value;
        for (int co = 0; co < d->c_out; ++co) {
          T* row = out_ptr + static_cast<std::size_t>(co) * ohw;
          for (std::size_t p = 0; p < ohw; ++p) row[p] += bias.data[static_cast<std::size_t>(co)];
        }
      }
    }
    return out;
  }

  if (auto* d = std::get_if<DepthwiseConv2dDesc>(&desc)) {
    const Tensor<T>& w = weight_override ? *weight_override : vars.params[0].value;
    const int b = input.shape[0], h = input.shape[2], wd = input.shape[3];
    const int oh = out_shape[2], ow = out_shape[3];
    Tensor<T> out(out_shape);
    for (int bi = 0; bi < b; ++bi)
      for (int c = 0; c < d->c; ++c) {
        const T* in_ptr =
            input.data.data() + (static_cast<std::size_t>(bi) * d->c + c) * h * wd;
        const T* w_ptr = w.data.data() + static_cast<std::size_t>(c) * d->k * d->k;
        T* out_ptr = out.data.data() + (static_cast<std::size_t>(bi) * d->c + c) * oh * ow;
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            T acc = T(0);
            for (int ki = 0; ki < d->k; ++ki) {
              const int iy = y * d->sh - d->pad + ki;
              if (iy < 0 || iy >= h) continue;
              for (int kj = 0; kj < d->k; ++kj) {
                const int ix = x * d->sw - d->pad + kj;
                if (ix < 0 || ix >= wd) continue;
                acc += in_ptr[static_cast<std::size_t>(iy) * wd + ix] * w_ptr[ki * d->k + kj];
              }
            }
            out_ptr[static_cast<std::size_t>(y) * ow + x] = acc;
          }
      }
    return out;
  }

  if (auto* d = std::get_if<BatchNormDesc>(&desc)) {
    const Tensor<T>& gamma = vars.params[0].value;
    const Tensor<T>& beta = vars.params[1].value;
    const int c = d->c;
    const bool four = input.ndim() == 4;
    const int b = input.shape[0];
    const int hw = four ? input.shape[2] * input.shape[3] : 1;
    const std::size_t n = static_cast<std::size_t>(b) * hw;
    Tensor<T> out(input.shape);
    if (cache) {
      cache->xhat = Tensor<T>(input.shape);
      cache->invstd = Tensor<T>({c});
      cache->bn_training = training;
    }
    for (int ch = 0; ch < c; ++ch) {
      double mean, var;
      if (training) {
        double s = 0.0;
        for (int bi = 0; bi < b; ++bi) {
          const T* src = input.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
          for (int p = 0; p < hw; ++p) s += static_cast<double>(src[p]);
        }
        mean = s / static_cast<double>(n);
        double v = 0.0;
        for (int bi = 0; bi < b; ++bi) {
          const T* src = input.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
          for (int p = 0; p < hw; ++p) {
            const double dlt = static_cast<double>(src[p]) - mean;
            v += dlt * dlt;
          }
        }
        var = v / static_cast<double>(n);
        if (update_stats) {
          const double unbiased = n > 1 ? v / static_cast<double>(n - 1) : var;
          vars.running_mean.data[static_cast<std::size_t>(ch)] = static_cast<T>(
              (1.0 - d->momentum) *
                  static_cast<double>(vars.running_mean.data[static_cast<std::size_t>(ch)]) +
              d->momentum * mean);
          vars.running_var.data[static_cast<std::size_t>(ch)] = static_cast<T>(
              (1.0 - d->momentum) *
                  static_cast<double>(vars.running_var.data[static_cast<std::size_t>(ch)]) +
              d->momentum * unbiased);
        }
      } else {
        mean = static_cast<double>(vars.running_mean.data[static_cast<std::size_t>(ch)]);
        var = static_cast<double>(vars.running_var.data[static_cast<std::size_t>(ch)]);
      }
      const double invstd = 1.0 / std::sqrt(var + d->eps);
      if (cache) cache->invstd.data[static_cast<std::size_t>(ch)] = static_cast<T>(invstd);
      const T g = gamma.data[static_cast<std::size_t>(ch)];
      const T bt = beta.data[static_cast<std::size_t>(ch)];
      for (int bi = 0; bi < b; ++bi) {
        const T* src = input.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        T* xh = cache ? cache->xhat.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw
                      : nullptr;
        T* dst = out.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        for (int p = 0; p < hw; ++p) {
          const T xn = static_cast<T>((static_cast<double>(src[p]) - mean) * invstd);
          if (xh) xh[p] = xn;
          dst[p] = g * xn + bt;
        }
      }
    }
    return out;
  }

  if (auto* d = std::get_if<SincConvDesc>(&desc)) {
    detail::refresh_sinc_kernels(*d, vars);
    const int b = input.shape[0];
    const int len = input.shape[3];
    const int frames = frame_count(len, d->kernel_len, d->hop);
    Tensor<T> out({b, 1, d->num_filters, frames});
    std::vector<T> fr(static_cast<std::size_t>(frames) * d->kernel_len);
    for (int bi = 0; bi < b; ++bi) {
      const T* wave = input.data.data() + static_cast<std::size_t>(bi) * len;
      for (int t = 0; t < frames; ++t)
        std::copy(wave + static_cast<std::size_t>(t) * d->hop,
                  wave + static_cast<std::size_t>(t) * d->hop + d->kernel_len,
                  fr.begin() + static_cast<std::size_t>(t) * d->kernel_len);
      T* out_ptr = out.data.data() + static_cast<std::size_t>(bi) * d->num_filters * frames;
      matmul_a_bt(vars.cached_kernels.data.data(), fr.data(), out_ptr, d->num_filters,
                  d->kernel_len, frames);
    }
    return out;
  }

  if (auto* d = std::get_if<Conv1dFrontendDesc>(&desc)) {
    const Tensor<T>& w = weight_override ? *weight_override : vars.params[0].value;
    const int b = input.shape[0];
    const int len = input.shape[3];
    const int frames = frame_count(len, d->kernel_len, d->hop);
    std::vector<double> window = hamming_window(d->kernel_len);
    Tensor<T> out({b, 1, d->num_filters, frames});
    std::vector<T> fr(static_cast<std::size_t>(frames) * d->kernel_len);
    for (int bi = 0; bi < b; ++bi) {
      const T* wave = input.data.data() + static_cast<std::size_t>(bi) * len;
      for (int t = 0; t < frames; ++t) {
        T* dst = fr.data() + static_cast<std::size_t>(t) * d->kernel_len;
        const T* src = wave + static_cast<std::size_t>(t) * d->hop;
        for (int i = 0; i < d->kernel_len; ++i)
          dst[i] = src[i] * static_cast<T>(window[static_cast<std::size_t>(i)]);
      }
      T* out_ptr = out.data.data() + static_cast<std::size_t>(bi) * d->num_filters * frames;
      matmul_a_bt(w.data.data(), fr.data(), out_ptr, d->num_filters, d->kernel_len, frames);
    }
    return out;
  }

  throw ShapeError("layer_forward: unknown layer kind");
}

// ---------------------------------------------------------------------------
// Backward.
// ---------------------------------------------------------------------------

/// Gradients of one layer. Accumulates parameter gradients into `vars` and
/// returns the gradient w.r.t. the layer input. Uses the fake-quantized
/// weight from the cache when one was used in the forward pass.
template <typename T>
Tensor<T> layer_backward(const LayerDesc& desc, LayerVars<T>& vars, const LayerCache<T>& cache,
                         const Tensor<T>& grad_out) {
  if (!cache.valid) throw UsageError("layer_backward: cache does not match a forward call");
  const Tensor<T>& input = cache.input;

  if (std::holds_alternative<ReluDesc>(desc)) {
    Tensor<T> gx(input.shape);
    for (std::size_t i = 0; i < input.numel(); ++i)
      gx.data[i] = input.data[i] > T(0) ? grad_out.data[i] : T(0);
    return gx;
  }

  if (std::holds_alternative<IdentityDesc>(desc)) return grad_out;

  if (std::holds_alternative<GlobalAvgPoolDesc>(desc)) {
    const int b = input.shape[0], c = input.shape[1];
    const int hw = input.shape[2] * input.shape[3];
    Tensor<T> gx(input.shape);
    const T inv = T(1) / static_cast<T>(hw);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < c; ++j) {
        const T g = grad_out.at2(i, j) * inv;
        T* dst = gx.data.data() + (static_cast<std::size_t>(i) * c + j) * hw;
        for (int p = 0; p < hw; ++p) dst[p] = g;
      }
    return gx;
  }

  if (auto* d = std::get_if<FullyConnectedDesc>(&desc)) {
    const Tensor<T>& w = cache.wq.empty() ? vars.params[0].value : cache.wq;
    const int b = input.shape[0];
    // dW += gy^T x ; db += column sums ; dx = gy W
    matmul_at_b_acc(grad_out.data.data(), input.data.data(), vars.params[0].grad.data.data(), b,
                    d->d_out, d->d_in);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < d->d_out; ++j)
        vars.params[1].grad.data[static_cast<std::size_t>(j)] += grad_out.at2(i, j);
    Tensor<T> gx(input.shape);
    matmul(grad_out.data.data(), w.data.data(), gx.data.data(), b, d->d_out, d->d_in);
    return gx;
  }

  if (auto* d = std::get_if<Conv2dDesc>(&desc)) {
    const Tensor<T>& w = cache.wq.empty() ? vars.params[0].value : cache.wq;
    const std::vector<int> out_shape = output_shape(desc, input.shape);
    const int b = input.shape[0], h = input.shape[2], wd = input.shape[3];
    const int oh = out_shape[2], ow = out_shape[3];
    const int kdim = d->c_in * d->kh * d->kw;
    const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
    Tensor<T> gx(input.shape);
    std::vector<T> col(static_cast<std::size_t>(kdim) * ohw);
    std::vector<T> dcol(static_cast<std::size_t>(kdim) * ohw);
    for (int bi = 0; bi < b; ++bi) {
      const T* in_ptr = input.data.data() + static_cast<std::size_t>(bi) * d->c_in * h * wd;
      const T* gy = grad_out.data.data() + static_cast<std::size_t>(bi) * d->c_out * ohw;
      detail::im2col(in_ptr, d->c_in, h, wd, d->kh, d->kw, d->sh, d->sw, d->pad, oh, ow,
                     col.data());
      // dW += gy col^T
      matmul_a_bt_acc(gy, col.data(), vars.params[0].grad.data.data(), d->c_out,
                      static_cast<int>(ohw), kdim);
      // dcol = W^T gy ; scatter back
      matmul_at_b(w.data.data(), gy, dcol.data(), d->c_out, kdim, static_cast<int>(ohw));
      detail::col2im_acc(dcol.data(), d->c_in, h, wd, d->kh, d->kw, d->sh, d->sw, d->pad, oh, ow,
                         gx.data.data() + static_cast<std::size_t>(bi) * d->c_in * h * wd);
      if (d->bias) {
        for (int co = 0; co < d->c_out; ++co) {
          const T* row = gy + static_cast<std::size_t>(co) * ohw;
          T acc = T(0);
          for (std::size_t p = 0; p < ohw; ++p) acc += row[p];
          vars.params[1].grad.data[static_cast<std::size_t>(co)] += acc;
        }
      }
    }
    return gx;
  }

  if (auto* d = std::get_if<DepthwiseConv2dDesc>(&desc)) {
    const Tensor<T>& w = cache.wq.empty() ? vars.params[0].value : cache.wq;
    const std::vector<int> out_shape = output_shape(desc, input.shape);
    const int b = input.shape[0], h = input.shape[2], wd = input.shape[3];
    const int oh = out_shape[2], ow = out_shape[3];
    Tensor<T> gx(input.shape);
    for (int bi = 0; bi < b; ++bi)
      for (int c = 0; c < d->c; ++c) {
        const T* in_ptr = input.data.data() + (static_cast<std::size_t>(bi) * d->c + c) * h * wd;
        const T* gy = grad_out.data.data() + (static_cast<std::size_t>(bi) * d->c + c) * oh * ow;
        const T* w_ptr = w.data.data() + static_cast<std::size_t>(c) * d->k * d->k;
        T* gw = vars.params[0].grad.data.data() + static_cast<std::size_t>(c) * d->k * d->k;
        T* gi = gx.data.data() + (static_cast<std::size_t>(bi) * d->c + c) * h * wd;
        for (int y = 0; y < oh; ++y)
          for (int x = 0; x < ow; ++x) {
            const T g = gy[static_cast<std::size_t>(y) * ow + x];
            if (g == T(0)) continue;
            for (int ki = 0; ki < d->k; ++ki) {
              const int iy = y * d->sh - d->pad + ki;
              if (iy < 0 || iy >= h) continue;
              for (int kj = 0; kj < d->k; ++kj) {
                const int ix = x * d->sw - d->pad + kj;
                if (ix < 0 || ix >= wd) continue;
                gw[ki * d->k + kj] += g * in_ptr[static_cast<std::size_t>(iy) * wd + ix];
                gi[static_cast<std::size_t>(iy) * wd + ix] += g * w_ptr[ki * d->k + kj];
              }
            }
          }
      }
    return gx;
  }

  if (auto* d = std::get_if<BatchNormDesc>(&desc)) {
    const Tensor<T>& gamma = vars.params[0].value;
    const int c = d->c;
    const bool four = input.ndim() == 4;
    const int b = input.shape[0];
    const int hw = four ? input.shape[2] * input.shape[3] : 1;
    const double n = static_cast<double>(b) * hw;
    Tensor<T> gx(input.shape);
    for (int ch = 0; ch < c; ++ch) {
      double sum_gy = 0.0, sum_gy_xhat = 0.0;
      for (int bi = 0; bi < b; ++bi) {
        const T* gy = grad_out.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        const T* xh = cache.xhat.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        for (int p = 0; p < hw; ++p) {
          sum_gy += static_cast<double>(gy[p]);
          sum_gy_xhat += static_cast<double>(gy[p]) * static_cast<double>(xh[p]);
        }
      }
      vars.params[0].grad.data[static_cast<std::size_t>(ch)] += static_cast<T>(sum_gy_xhat);
      vars.params[1].grad.data[static_cast<std::size_t>(ch)] += static_cast<T>(sum_gy);
      const double g = static_cast<double>(gamma.data[static_cast<std::size_t>(ch)]);
      const double invstd = static_cast<double>(cache.invstd.data[static_cast<std::size_t>(ch)]);
      for (int bi = 0; bi < b; ++bi) {
        const T* gy = grad_out.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        const T* xh = cache.xhat.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        T* dst = gx.data.data() + (static_cast<std::size_t>(bi) * c + ch) * hw;
        for (int p = 0; p < hw; ++p) {
          if (cache.bn_training) {
            dst[p] = static_cast<T>(
                g * invstd *
                (static_cast<double>(gy[p]) - sum_gy / n -
                 static_cast<double>(xh[p]) * sum_gy_xhat / n));
          } else {
            dst[p] = static_cast<T>(g * invstd * static_cast<double>(gy[p]));
          }
        }
      }
    }
    return gx;
  }

  if (auto* d = std::get_if<SincConvDesc>(&desc)) {
    const int b = input.shape[0];
    const int len = input.shape[3];
    const int frames = frame_count(len, d->kernel_len, d->hop);
    const int nf = d->num_filters;
    Tensor<T> gx(input.shape);
    // Accumulate dL/dK over the batch, then contract with the analytic kernel
    // derivatives w.r.t. each cutoff.
    Tensor<T> dk({nf, d->kernel_len});
    for (int bi = 0; bi < b; ++bi) {
      const T* wave = input.data.data() + static_cast<std::size_t>(bi) * len;
      const T* gy = grad_out.data.data() + static_cast<std::size_t>(bi) * nf * frames;
      for (int t = 0; t < frames; ++t) {
        // dK[f, i] += gy[f, t] * wave[t*hop + i] ; dX[t*hop+i] += sum_f gy[f,t] K[f,i]
        const T* frame = wave + static_cast<std::size_t>(t) * d->hop;
        T* gxf = gx.data.data() + static_cast<std::size_t>(bi) * len +
                 static_cast<std::size_t>(t) * d->hop;
        for (int f = 0; f < nf; ++f) {
          const T g = gy[static_cast<std::size_t>(f) * frames + t];
          if (g == T(0)) continue;
          T* dkrow = dk.data.data() + static_cast<std::size_t>(f) * d->kernel_len;
          const T* krow =
              vars.cached_kernels.data.data() + static_cast<std::size_t>(f) * d->kernel_len;
          for (int i = 0; i < d->kernel_len; ++i) {
            dkrow[i] += g * frame[i];
            gxf[i] += g * krow[i];
          }
        }
      }
    }
    const auto& t1 = vars.params[0].value;
    const auto& t2 = vars.params[1].value;
    for (int f = 0; f < nf; ++f) {
      CutoffPair cp = resolve_cutoffs(static_cast<double>(t1.data[static_cast<std::size_t>(f)]),
                                      static_cast<double>(t2.data[static_cast<std::size_t>(f)]),
                                      d->sample_rate, d->min_bandwidth);
      std::vector<double> d_hi = sinc_kernel_dcutoff(cp.f2, d->kernel_len, d->sample_rate);
      std::vector<double> d_lo = sinc_kernel_dcutoff(cp.f1, d->kernel_len, d->sample_rate);
      double gf1 = 0.0, gf2 = 0.0;
      const T* dkrow = dk.data.data() + static_cast<std::size_t>(f) * d->kernel_len;
      for (int i = 0; i < d->kernel_len; ++i) {
        gf2 += static_cast<double>(dkrow[i]) * d_hi[static_cast<std::size_t>(i)];
        gf1 -= static_cast<double>(dkrow[i]) * d_lo[static_cast<std::size_t>(i)];
      }
      vars.params[0].grad.data[static_cast<std::size_t>(f)] +=
          static_cast<T>(gf1 * cp.df1_dt1 + gf2 * cp.df2_dt1);
      vars.params[1].grad.data[static_cast<std::size_t>(f)] += static_cast<T>(gf2 * cp.df2_dt2);
    }
    return gx;
  }

  if (auto* d = std::get_if<Conv1dFrontendDesc>(&desc)) {
    const Tensor<T>& w = cache.wq.empty() ? vars.params[0].value : cache.wq;
    const int b = input.shape[0];
    const int len = input.shape[3];
    const int frames = frame_count(len, d->kernel_len, d->hop);
    const int nf = d->num_filters;
    std::vector<double> window = hamming_window(d->kernel_len);
    Tensor<T> gx(input.shape);
    for (int bi = 0; bi < b; ++bi) {
      const T* wave = input.data.data() + static_cast<std::size_t>(bi) * len;
      const T* gy = grad_out.data.data() + static_cast<std::size_t>(bi) * nf * frames;
      for (int t = 0; t < frames; ++t) {
        const T* frame = wave + static_cast<std::size_t>(t) * d->hop;
        T* gxf = gx.data.data() + static_cast<std::size_t>(bi) * len +
                 static_cast<std::size_t>(t) * d->hop;
        for (int f = 0; f < nf; ++f) {
          const T g = gy[static_cast<std::size_t>(f) * frames + t];
          if (g == T(0)) continue;
          T* gw = vars.params[0].grad.data.data() + static_cast<std::size_t>(f) * d->kernel_len;
          const T* wrow = w.data.data() + static_cast<std::size_t>(f) * d->kernel_len;
          for (int i = 0; i < d->kernel_len; ++i) {
            const T wi = static_cast<T>(window[static_cast<std::size_t>(i)]);
            gw[i] += g * frame[i] * wi;
            gxf[i] += g * wrow[i] * wi;
          }
        }
      }
    }
    return gx;
  }

  throw ShapeError("layer_backward: unknown layer kind");
}

}  // namespace kwsnas

#endif  // KWSNAS_LAYERS_HPP_
