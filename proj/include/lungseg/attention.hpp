#pragma once

#include <cstddef>
#include <utility>

#include "lungseg/ops.hpp"
#include "lungseg/rng.hpp"
#include "lungseg/tensor.hpp"

namespace lungseg {

/// How a [C,H,W] feature map is reduced to one channel before the 3x3
/// spatial kernels of the context attention and the gate branches.
enum class ContextReduction { Mean, Learned1x1 };

/// Learnable weights of the channel attention: a square C x C matrix applied
/// to the globally pooled channel descriptor. No bias.
template <typename T>
struct ChannelAttentionParamsT {
  TensorT<T> w_c;  // [C,C]
};

/// Learnable weights of the context (spatial) attention: one 3x3 kernel
/// applied to the channel-reduced map. With Learned1x1 reduction, w_r is the
/// 1x1 compression kernel shared with the gate branches.
template <typename T>
struct ContextAttentionParamsT {
  TensorT<T> w_x;  // [1,1,3,3]
  TensorT<T> w_r;  // [1,C,1,1], only when reduction == Learned1x1
  ContextReduction reduction = ContextReduction::Mean;
};

/// Learnable weights of the attention gate: one 3x3 kernel per branch.
template <typename T>
struct GateParamsT {
  TensorT<T> w_g;  // [1,1,3,3], branch over the raw features
  TensorT<T> w_a;  // [1,1,3,3], branch over the combined-attention features
};

template <typename T>
struct AttentionBlockParamsT {
  ChannelAttentionParamsT<T> channel;
  ContextAttentionParamsT<T> context;
  GateParamsT<T> gate;
};

/// All intermediate maps of one attention block forward pass, kept for
/// inspection and overlay rendering.
template <typename T>
struct AttentionMapsT {
  TensorT<T> m_c;      // [C]     channel map, in (0,1)
  TensorT<T> m_x;      // [1,H,W] spatial map, in (0,1)
  TensorT<T> g;        // [1,H,W] gate map, in (0,1)
  TensorT<T> x_cca;    // [C,H,W]
  TensorT<T> x_gated;  // [C,H,W]
};

using ChannelAttentionParams = ChannelAttentionParamsT<double>;
using ContextAttentionParams = ContextAttentionParamsT<double>;
using GateParams = GateParamsT<double>;
using AttentionBlockParams = AttentionBlockParamsT<double>;
using AttentionMaps = AttentionMapsT<double>;

namespace detail {

template <typename T>
TensorT<T> zero_bias1() {
  return TensorT<T>::zeros({1});
}

/// C -> 1 channel reduction preceding every 3x3 attention kernel.
template <typename T>
TensorT<T> reduce_channels(const TensorT<T>& x, const ContextAttentionParamsT<T>& ctx) {
  if (ctx.reduction == ContextReduction::Learned1x1) {
    return conv2d(x, ctx.w_r, zero_bias1<T>(), 0);
  }
  return channel_mean(x);
}

}  // namespace detail

/// Channel attention map: sigmoid(W_C * avgpool(X)), one weight per channel.
template <typename T>
TensorT<T> channel_attention(const TensorT<T>& x, const ChannelAttentionParamsT<T>& params) {
  if (params.w_c.rank() != 2 || params.w_c.dim(0) != params.w_c.dim(1)) {
    throw ShapeError("channel attention weight must be square");
  }
  if (x.rank() != 3 || x.dim(0) != params.w_c.dim(0)) {
    throw ShapeError("channel attention weight " + shape_str(params.w_c.shape()) +
                     " does not match input " + shape_str(x.shape()));
  }
  return sigmoid(matvec(params.w_c, global_avg_pool(x)));
}

/// Context attention map: channel reduction, 3x3 same-padding correlation,
/// sigmoid. Returns a [1,H,W] map.
template <typename T>
TensorT<T> context_attention(const TensorT<T>& x, const ContextAttentionParamsT<T>& params) {
  auto reduced = detail::reduce_channels(x, params);
  return sigmoid(conv2d(reduced, params.w_x, detail::zero_bias1<T>(), 1));
}

/// Combined channel-and-context reweighting: out[j,p] = (m_c[j]*m_x[p])*x[j,p].
template <typename T>
TensorT<T> cca(const TensorT<T>& x, const TensorT<T>& m_c, const TensorT<T>& m_x) {
  return mul(mul(m_c, m_x), x);
}

/// Attention gate: G = sigmoid(conv(reduce(X)) + conv(reduce(X_CCA))),
/// X_gated = G (*) X with the single-channel gate broadcast across channels.
template <typename T>
std::pair<TensorT<T>, TensorT<T>> attention_gate(const TensorT<T>& x, const TensorT<T>& x_cca,
                                                 const GateParamsT<T>& params,
                                                 const ContextAttentionParamsT<T>& ctx) {
  if (x.shape() != x_cca.shape()) {
    throw ShapeError("attention_gate inputs must share a shape");
  }
  auto branch_x = conv2d(detail::reduce_channels(x, ctx), params.w_g, detail::zero_bias1<T>(), 1);
  auto branch_cca = conv2d(detail::reduce_channels(x_cca, ctx), params.w_a, detail::zero_bias1<T>(), 1);
  auto g = sigmoid(add(branch_x, branch_cca));
  return {g, mul(g, x)};
}

/// Full multi-modal attention block. All maps are retained in the result.
template <typename T>
AttentionMapsT<T> multimodal_attention_block(const TensorT<T>& x,
                                             const AttentionBlockParamsT<T>& params) {
  AttentionMapsT<T> maps;
  maps.m_c = channel_attention(x, params.channel);
  maps.m_x = context_attention(x, params.context);
  maps.x_cca = cca(x, maps.m_c, maps.m_x);
  auto [g, gated] = attention_gate(x, maps.x_cca, params.gate, params.context);
  maps.g = g;
  maps.x_gated = gated;
  return maps;
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)), matching the conv
/// layers elsewhere in the model.
template <typename T>
AttentionBlockParamsT<T> init_attention_params(std::size_t channels, ContextReduction reduction,
                                               Rng& rng) {
  auto uniform_tensor = [&rng](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    auto t = TensorT<T>::zeros(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) {
      t.at(i) = static_cast<T>(rng.uniform(-bound, bound));
    }
    t.set_requires_grad(true);
    return t;
  };
  AttentionBlockParamsT<T> p;
  p.channel.w_c = uniform_tensor({channels, channels}, channels);
  p.context.w_x = uniform_tensor({1, 1, 3, 3}, 9);
  p.context.reduction = reduction;
  if (reduction == ContextReduction::Learned1x1) {
    p.context.w_r = uniform_tensor({1, channels, 1, 1}, channels);
  }
  p.gate.w_g = uniform_tensor({1, 1, 3, 3}, 9);
  p.gate.w_a = uniform_tensor({1, 1, 3, 3}, 9);
  return p;
}

}  // namespace lungseg
