#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "lungseg/attention.hpp"
#include "lungseg/mask.hpp"
#include "lungseg/ops.hpp"
#include "lungseg/rng.hpp"
#include "lungseg/tensor.hpp"

namespace lungseg {

enum class AttentionKind { None, ChannelOnly, Multimodal };
enum class Chaining { Features, Probabilities };
enum class AttentionPlacement { Bottleneck, DecoderLevels };

/// One encoder-decoder stage: `depth` pooling levels with two conv+ReLU
/// layers per level on both paths, pooling indices carried across to the
/// matching unpool.
struct StageConfig {
  std::size_t depth = 2;
  std::vector<std::size_t> widths = {16, 32};  // channels per level
  AttentionKind attention = AttentionKind::None;
};

struct ModelConfig {
  std::vector<StageConfig> stages = {StageConfig{}, StageConfig{}};
  std::size_t num_classes = 2;
  std::size_t input_channels = 1;
  Chaining chaining = Chaining::Features;
  ContextReduction context_reduction = ContextReduction::Mean;
  AttentionPlacement placement = AttentionPlacement::Bottleneck;

  std::size_t max_depth() const {
    std::size_t d = 0;
    for (const auto& s : stages) d = std::max(d, s.depth);
    return d;
  }

  void validate() const {
    if (stages.empty()) throw ConfigError("model needs at least one stage");
    if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
    if (input_channels < 1) throw ConfigError("input_channels must be >= 1");
    for (const auto& s : stages) {
      if (s.depth < 1) throw ConfigError("stage depth must be >= 1");
      if (s.widths.size() != s.depth) {
        throw ConfigError("stage widths count must equal depth");
      }
      for (std::size_t w : s.widths) {
        if (w < 1) throw ConfigError("stage widths must be >= 1");
      }
    }
  }
};

struct ParamSpec {
  std::string name;
  Shape shape;
  std::size_t fan_in;  // 0 means zero-initialized (biases)
};

/// The full parameter store. Parameters are keyed by a stable hierarchical
/// name; the name set is a pure function of the config, which is what makes
/// the header-free checkpoint payload loadable.
struct Model {
  ModelConfig config;
  std::map<std::string, Tensor> params;

  const Tensor& p(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw ConfigError("unknown parameter " + name);
    return it->second;
  }

  std::vector<std::pair<std::string, Tensor>> sorted_params() const {
    return {params.begin(), params.end()};  // std::map iterates in sorted order
  }
};

namespace detail {

inline std::size_t stage_input_channels(const ModelConfig& cfg, std::size_t stage) {
  if (stage == 0) return cfg.input_channels;
  const std::size_t carry = cfg.chaining == Chaining::Features
                                ? cfg.stages[stage - 1].widths[0]
                                : cfg.num_classes;
  return cfg.input_channels + carry;
}

inline bool stage_has_head(const ModelConfig& cfg, std::size_t stage) {
  return stage + 1 == cfg.stages.size() || cfg.chaining == Chaining::Probabilities;
}

inline void append_attention_specs(std::vector<ParamSpec>& out, const std::string& prefix,
                                   AttentionKind kind, ContextReduction reduction,
                                   std::size_t channels) {
  if (kind == AttentionKind::None) return;
  out.push_back({prefix + "/w_c", {channels, channels}, channels});
  if (kind == AttentionKind::ChannelOnly) return;
  out.push_back({prefix + "/w_x", {1, 1, 3, 3}, 9});
  if (reduction == ContextReduction::Learned1x1) {
    out.push_back({prefix + "/w_r", {1, channels, 1, 1}, channels});
  }
  out.push_back({prefix + "/w_g", {1, 1, 3, 3}, 9});
  out.push_back({prefix + "/w_a", {1, 1, 3, 3}, 9});
}

}  // namespace detail

/// Parameter names, shapes and init fan-ins in creation order.
inline std::vector<ParamSpec> enumerate_parameters(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> specs;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    const StageConfig& st = cfg.stages[s];
    const std::string sp = "stage" + std::to_string(s);
    std::size_t ch = detail::stage_input_channels(cfg, s);
    for (std::size_t l = 0; l < st.depth; ++l) {
      const std::string lp = sp + "/enc" + std::to_string(l);
      const std::size_t w = st.widths[l];
      specs.push_back({lp + "/conv0/kernel", {w, ch, 3, 3}, ch * 9});
      specs.push_back({lp + "/conv0/bias", {w}, 0});
      specs.push_back({lp + "/conv1/kernel", {w, w, 3, 3}, w * 9});
      specs.push_back({lp + "/conv1/bias", {w}, 0});
      ch = w;
    }
    if (st.attention != AttentionKind::None && cfg.placement == AttentionPlacement::Bottleneck) {
      detail::append_attention_specs(specs, sp + "/attn", st.attention, cfg.context_reduction,
                                     st.widths[st.depth - 1]);
    }
    for (std::size_t l = st.depth; l-- > 0;) {
      const std::string lp = sp + "/dec" + std::to_string(l);
      const std::size_t w = st.widths[l];
      if (st.attention != AttentionKind::None &&
          cfg.placement == AttentionPlacement::DecoderLevels) {
        detail::append_attention_specs(specs, lp + "/attn", st.attention, cfg.context_reduction, w);
      }
      const std::size_t wout = l > 0 ? st.widths[l - 1] : st.widths[0];
      specs.push_back({lp + "/conv0/kernel", {w, w, 3, 3}, w * 9});
      specs.push_back({lp + "/conv0/bias", {w}, 0});
      specs.push_back({lp + "/conv1/kernel", {wout, w, 3, 3}, w * 9});
      specs.push_back({lp + "/conv1/bias", {wout}, 0});
    }
    if (detail::stage_has_head(cfg, s)) {
      specs.push_back({sp + "/head/kernel", {cfg.num_classes, st.widths[0], 1, 1}, st.widths[0]});
      specs.push_back({sp + "/head/bias", {cfg.num_classes}, 0});
    }
  }
  return specs;
}

/// Deterministic build: identical (config, seed) pairs produce bit-identical
/// parameter buffers. Weights are uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// biases zero.
inline Model build_model(const ModelConfig& cfg, std::uint64_t seed) {
  Model m;
  m.config = cfg;
  Rng rng(seed);
  for (const auto& spec : enumerate_parameters(cfg)) {
    auto t = Tensor::zeros(spec.shape);
    if (spec.fan_in > 0) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
      for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = rng.uniform(-bound, bound);
    }
    t.set_requires_grad(true);
    m.params.emplace(spec.name, std::move(t));
  }
  return m;
}

/// Attention maps captured during a forward pass, for tests and overlays.
struct StageTrace {
  Tensor bottleneck_in;
  Tensor bottleneck_out;
  std::optional<AttentionMaps> maps;                       // bottleneck placement
  std::vector<std::pair<std::string, AttentionMaps>> decoder_maps;  // decoder placement
  std::optional<Tensor> channel_map;                       // ChannelOnly: just m_c
};

struct ModelTrace {
  std::vector<StageTrace> stages;
};

namespace detail {

inline AttentionBlockParams attention_params_at(const Model& m, const std::string& prefix) {
  AttentionBlockParams p;
  p.channel.w_c = m.p(prefix + "/w_c");
  p.context.w_x = m.p(prefix + "/w_x");
  p.context.reduction = m.config.context_reduction;
  if (m.config.context_reduction == ContextReduction::Learned1x1) {
    p.context.w_r = m.p(prefix + "/w_r");
  }
  p.gate.w_g = m.p(prefix + "/w_g");
  p.gate.w_a = m.p(prefix + "/w_a");
  return p;
}

inline Tensor apply_attention(const Model& m, const std::string& prefix, AttentionKind kind,
                              const Tensor& x, StageTrace* trace, bool at_bottleneck) {
  if (kind == AttentionKind::ChannelOnly) {
    ChannelAttentionParams cp{m.p(prefix + "/w_c")};
    auto m_c = channel_attention(x, cp);
    if (trace) trace->channel_map = m_c;
    return mul(m_c, x);
  }
  auto maps = multimodal_attention_block(x, attention_params_at(m, prefix));
  if (trace) {
    if (at_bottleneck) {
      trace->maps = maps;
    } else {
      trace->decoder_maps.emplace_back(prefix, maps);
    }
  }
  return maps.x_gated;
}

}  // namespace detail

/// One encoder-decoder stage. Output spatial dims equal input dims; output
/// has widths[0] channels.
inline Tensor stage_forward(const Model& m, std::size_t stage, const Tensor& input,
                            StageTrace* trace = nullptr) {
  if (stage >= m.config.stages.size()) throw ConfigError("stage index out of range");
  const StageConfig& st = m.config.stages[stage];
  const std::string sp = "stage" + std::to_string(stage);
  if (input.rank() != 3) throw ShapeError("stage input must be [C,H,W]");
  const std::size_t div = std::size_t{1} << st.depth;
  if (input.dim(1) % div != 0 || input.dim(2) % div != 0) {
    throw ShapeError("stage input dims " + shape_str(input.shape()) + " not divisible by " +
                     std::to_string(div));
  }

  Tensor x = input;
  std::vector<PoolIndices> indices(st.depth);
  for (std::size_t l = 0; l < st.depth; ++l) {
    const std::string lp = sp + "/enc" + std::to_string(l);
    x = relu(conv2d(x, m.p(lp + "/conv0/kernel"), m.p(lp + "/conv0/bias")));
    x = relu(conv2d(x, m.p(lp + "/conv1/kernel"), m.p(lp + "/conv1/bias")));
    auto [pooled, idx] = maxpool2x2_with_indices(x);
    x = pooled;
    indices[l] = std::move(idx);
  }

  if (trace) trace->bottleneck_in = x;
  if (st.attention != AttentionKind::None &&
      m.config.placement == AttentionPlacement::Bottleneck) {
    x = detail::apply_attention(m, sp + "/attn", st.attention, x, trace, true);
  }
  if (trace) trace->bottleneck_out = x;

  for (std::size_t l = st.depth; l-- > 0;) {
    const std::string lp = sp + "/dec" + std::to_string(l);
    if (st.attention != AttentionKind::None &&
        m.config.placement == AttentionPlacement::DecoderLevels) {
      x = detail::apply_attention(m, lp + "/attn", st.attention, x, trace, false);
    }
    x = maxunpool2x2(x, indices[l]);
    x = relu(conv2d(x, m.p(lp + "/conv0/kernel"), m.p(lp + "/conv0/bias")));
    x = relu(conv2d(x, m.p(lp + "/conv1/kernel"), m.p(lp + "/conv1/bias")));
  }
  return x;
}

/// Full forward pass: stages chained on (image ++ previous output), final
/// 1x1 head and per-pixel softmax. Returns class probabilities [K,H,W].
inline Tensor model_forward(const Model& m, const Tensor& image, ModelTrace* trace = nullptr) {
  const ModelConfig& cfg = m.config;
  if (image.rank() != 3 || image.dim(0) != cfg.input_channels) {
    throw ShapeError("model input must be [" + std::to_string(cfg.input_channels) + ",H,W]");
  }
  if (trace) trace->stages.assign(cfg.stages.size(), {});

  Tensor carry;
  Tensor probs;
  for (std::size_t s = 0; s < cfg.stages.size(); ++s) {
    Tensor in = s == 0 ? image : concat_channels(image, carry);
    StageTrace* st = trace ? &trace->stages[s] : nullptr;
    Tensor f = stage_forward(m, s, in, st);
    const std::string sp = "stage" + std::to_string(s);
    const bool last = s + 1 == cfg.stages.size();
    if (last) {
      probs = softmax_over_channels(conv2d(f, m.p(sp + "/head/kernel"), m.p(sp + "/head/bias")));
    } else {
      carry = cfg.chaining == Chaining::Features
                  ? f
                  : softmax_over_channels(
                        conv2d(f, m.p(sp + "/head/kernel"), m.p(sp + "/head/bias")));
    }
  }
  return probs;
}

/// Per-pixel argmax. Exact probability ties resolve to background (class 0).
inline Mask predict_mask(const Tensor& probs) {
  if (probs.rank() != 3) throw ShapeError("predict_mask expects [K,H,W]");
  const std::size_t k = probs.dim(0), h = probs.dim(1), w = probs.dim(2);
  const std::size_t hw = h * w;
  Mask mask(h, w);
  for (std::size_t p = 0; p < hw; ++p) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < k; ++c) {
      if (probs.at(c * hw + p) > probs.at(best * hw + p)) best = c;
    }
    mask.v[p] = static_cast<std::uint8_t>(best);
  }
  return mask;
}

/// Mean per-pixel cross-entropy, optionally blended with soft Dice.
inline Tensor segmentation_loss(const Tensor& probs, const Mask& truth, double dice_weight = 0.0) {
  truth.validate();
  auto loss = cross_entropy_mean(probs, truth);
  if (dice_weight > 0.0) {
    loss = add(loss, scale(soft_dice_loss(probs, truth), dice_weight));
  }
  return loss;
}

}  // namespace lungseg
