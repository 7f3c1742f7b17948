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
#ifndef KWSNAS_GRAPH_HPP_
#define KWSNAS_GRAPH_HPP_

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kwsnas/layers.hpp"

namespace kwsnas {

enum class InputKind { kWaveform, kFeatures };

template <typename T>
struct GraphLayer {
  LayerDesc desc;
  LayerVars<T> vars;
  int skip_from = -1;  // output of this earlier layer is added to ours
  std::string name;
  std::string block;  // grouping tag for per-block reporting ("" = none)
  std::optional<Quantizer<T>> weight_quant;
  std::optional<Quantizer<T>> act_quant;
};

/// A concrete model: ordered layers, optional residual skips, quantizer
/// attachments, and the per-example input shape [C,H,W] it expects.
template <typename T>
struct ModelGraph {
  InputKind input_kind = InputKind::kWaveform;
  std::vector<int> input_shape;  // per example, no batch axis
  int num_classes = 0;
  std::vector<GraphLayer<T>> layers;
};

/// Per-example output shape of every layer; throws ShapeError on any
/// incompatibility, including skip-source shape mismatches.
template <typename T>
std::vector<std::vector<int>> infer_shapes(const ModelGraph<T>& g) {
  std::vector<std::vector<int>> shapes;
  shapes.reserve(g.layers.size());
  std::vector<int> cur = g.input_shape;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const auto& layer = g.layers[i];
    std::vector<int> out = output_shape(layer.desc, cur);
    if (layer.skip_from >= 0) {
      if (layer.skip_from >= static_cast<int>(i))
        throw ShapeError("graph: skip source must precede layer " + layer.name);
      if (shapes[static_cast<std::size_t>(layer.skip_from)] != out)
        throw ShapeError("graph: skip shape mismatch at " + layer.name);
    }
    shapes.push_back(out);
    cur = std::move(out);
  }
  return shapes;
}

/// Construction-time validation: shapes chain, skips line up, and the final
/// output is the class-logit vector.
template <typename T>
void validate_graph(const ModelGraph<T>& g) {
  if (g.layers.empty()) return;
  auto shapes = infer_shapes(g);
  const auto& last = shapes.back();
  if (!(last.size() == 1 && last[0] == g.num_classes))
    throw ShapeError("graph: final output " + shape_str(last) + " is not [num_classes=" +
                     std::to_string(g.num_classes) + "]");
}

template <typename T>
void init_graph(ModelGraph<T>& g, Rng& rng) {
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    Rng lr = rng.child("layer-init", i);
    g.layers[i].vars = init_layer_vars<T>(g.layers[i].desc, lr);
  }
}

template <typename T>
void zero_graph_grads(ModelGraph<T>& g) {
  for (auto& layer : g.layers) {
    zero_grads(layer.vars);
    if (layer.weight_quant) {
      layer.weight_quant->alpha_grad = T(0);
      layer.weight_quant->b_grad = T(0);
    }
    if (layer.act_quant) {
      layer.act_quant->alpha_grad = T(0);
      layer.act_quant->b_grad = T(0);
    }
  }
}

/// fn(layer_index, ParamTensor&) over every parameter tensor, in a fixed
/// deterministic order.
template <typename T, typename Fn>
void for_each_param(ModelGraph<T>& g, Fn&& fn) {
  for (std::size_t i = 0; i < g.layers.size(); ++i)
    for (auto& p : g.layers[i].vars.params) fn(i, p);
}

enum class QuantScalarKind { kAlpha, kBits };

/// fn(layer_index, kind, value&, grad&) over the trainable quantizer scalars.
template <typename T, typename Fn>
void for_each_quant_scalar(ModelGraph<T>& g, Fn&& fn) {
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    auto visit = [&](std::optional<Quantizer<T>>& q) {
      if (!q) return;
      if (q->alpha_trainable()) fn(i, QuantScalarKind::kAlpha, q->alpha, q->alpha_grad);
      if (q->b_trainable()) fn(i, QuantScalarKind::kBits, q->b_cont, q->b_grad);
    };
    visit(g.layers[i].weight_quant);
    visit(g.layers[i].act_quant);
  }
}

template <typename T>
struct GraphTrace {
  std::vector<Tensor<T>> outputs;  // final per-layer outputs (post skip/quant)
  std::vector<LayerCache<T>> caches;
  std::vector<QuantCache<T>> aq_caches;
};

/// Full forward pass over a batch. `training` selects batch-norm statistics
/// and the smoothed trained-bit-width grid; `update_stats` gates running-stat
/// updates so probing forwards stay side-effect free.
template <typename T>
Tensor<T> graph_forward(ModelGraph<T>& g, const Tensor<T>& batch, bool training,
                        bool update_stats = true, GraphTrace<T>* trace = nullptr) {
  if (trace) {
    trace->outputs.assign(g.layers.size(), Tensor<T>());
    trace->caches.assign(g.layers.size(), LayerCache<T>());
    trace->aq_caches.assign(g.layers.size(), QuantCache<T>());
  }
  std::vector<Tensor<T>> outputs;
  if (!trace) outputs.assign(g.layers.size(), Tensor<T>());
  Tensor<T> cur = batch;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    auto& layer = g.layers[i];
    LayerCache<T> local_cache;
    LayerCache<T>* cache = trace ? &trace->caches[i] : nullptr;
    const Tensor<T>* override_w = nullptr;
    if (layer.weight_quant) {
      LayerCache<T>& c = cache ? *cache : local_cache;
      c.wq = quantize(layer.vars.params[0].value, *layer.weight_quant, training,
                      cache ? &c.wq_cache : nullptr);
      override_w = &c.wq;
      Tensor<T> out = layer_forward(layer.desc, layer.vars, cur, training, update_stats, cache,
                                    override_w);
      cur = std::move(out);
    } else {
      cur = layer_forward(layer.desc, layer.vars, cur, training, update_stats, cache);
    }
    if (layer.skip_from >= 0) {
      const Tensor<T>& src =
          trace ? trace->outputs[static_cast<std::size_t>(layer.skip_from)]
                : outputs[static_cast<std::size_t>(layer.skip_from)];
      if (!cur.same_shape(src)) throw ShapeError("graph: skip shape mismatch at " + layer.name);
      for (std::size_t p = 0; p < cur.numel(); ++p) cur.data[p] += src.data[p];
    }
    cur.check_finite(layer.name.empty() ? layer_kind_name(layer.desc) : layer.name);
    if (layer.act_quant) {
      cur = quantize(cur, *layer.act_quant, training, trace ? &trace->aq_caches[i] : nullptr);
    }
    if (trace)
      trace->outputs[i] = cur;
    else
      outputs[i] = cur;
  }
  return cur;
}

/// Reverse pass. Accumulates parameter and quantizer gradients, returns the
/// gradient w.r.t. the batch input.
template <typename T>
Tensor<T> graph_backward(ModelGraph<T>& g, GraphTrace<T>& trace, const Tensor<T>& grad_logits,
                         const Tensor<T>& batch) {
  const std::size_t n = g.layers.size();
  if (trace.caches.size() != n) throw UsageError("graph_backward: trace does not match graph");
  std::vector<Tensor<T>> acc(n);  // grad w.r.t. each layer's final output
  acc[n - 1] = grad_logits;
  Tensor<T> grad_input;
  for (std::size_t ri = n; ri-- > 0;) {
    auto& layer = g.layers[ri];
    if (acc[ri].empty()) acc[ri] = Tensor<T>(trace.outputs[ri].shape);
    Tensor<T> gout = std::move(acc[ri]);
    if (layer.act_quant) gout = ste_backward(gout, trace.aq_caches[ri], *layer.act_quant);
    if (layer.skip_from >= 0) {
      auto& skip_acc = acc[static_cast<std::size_t>(layer.skip_from)];
      if (skip_acc.empty())
        skip_acc = Tensor<T>(trace.outputs[static_cast<std::size_t>(layer.skip_from)].shape);
      for (std::size_t p = 0; p < gout.numel(); ++p) skip_acc.data[p] += gout.data[p];
    }
    Tensor<T> gin;
    if (layer.weight_quant) {
      // Route the weight gradient through the quantizer STE.
      Tensor<T> saved = std::move(layer.vars.params[0].grad);
      layer.vars.params[0].grad = Tensor<T>(layer.vars.params[0].value.shape);
      gin = layer_backward(layer.desc, layer.vars, trace.caches[ri], gout);
      Tensor<T> gw =
          ste_backward(layer.vars.params[0].grad, trace.caches[ri].wq_cache, *layer.weight_quant);
      layer.vars.params[0].grad = std::move(saved);
      for (std::size_t p = 0; p < gw.numel(); ++p)
        layer.vars.params[0].grad.data[p] += gw.data[p];
    } else {
      gin = layer_backward(layer.desc, layer.vars, trace.caches[ri], gout);
    }
    gin.check_finite("backward:" + (layer.name.empty() ? layer_kind_name(layer.desc) : layer.name));
    if (ri == 0) {
      grad_input = std::move(gin);
    } else {
      auto& dst = acc[ri - 1];
      if (dst.empty())
        dst = std::move(gin);
      else
        for (std::size_t p = 0; p < gin.numel(); ++p) dst.data[p] += gin.data[p];
    }
  }
  (void)batch;
  return grad_input;
}

}  // namespace kwsnas

#endif  // KWSNAS_GRAPH_HPP_
