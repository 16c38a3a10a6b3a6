#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <utility>
#include <vector>

#include "lungseg/mask.hpp"
#include "lungseg/tensor.hpp"

namespace lungseg {

// ---------------------------------------------------------------------------
// Broadcasting
//
// Supported operand pairings for binary elementwise ops:
//   same shape                       -> elementwise
//   [C]      with [C,H,W]            -> per-channel scalar
//   [1,H,W]  with [C,H,W]            -> per-pixel scalar shared across channels
//   [C]      with [1,H,W]            -> outer product, result [C,H,W]
// Gradients sum over the broadcast dimensions.
// ---------------------------------------------------------------------------

namespace detail {

enum class BcKind { Same, VecChw, MapChw, VecMap };

struct BcPlan {
  BcKind kind;
  bool swapped;  // true when the small operand arrived second
  Shape out;
  std::size_t channels = 1, hw = 1;
};

inline bool is_map(const Shape& s) { return s.size() == 3 && s[0] == 1; }

inline BcPlan broadcast_plan(const Shape& a, const Shape& b) {
  if (a == b) return {BcKind::Same, false, a, 1, numel(a)};

  auto plan = [](BcKind k, const Shape& small, const Shape& big, bool swapped) -> BcPlan {
    if (k == BcKind::VecChw) {
      if (small[0] != big[0])
        throw ShapeError("channel vector " + shape_str(small) + " does not match " + shape_str(big));
      return {k, swapped, big, big[0], big[1] * big[2]};
    }
    if (k == BcKind::MapChw) {
      if (small[1] != big[1] || small[2] != big[2])
        throw ShapeError("spatial map " + shape_str(small) + " does not match " + shape_str(big));
      return {k, swapped, big, big[0], big[1] * big[2]};
    }
    // VecMap: [C] x [1,H,W] -> [C,H,W]
    return {k, swapped, Shape{small[0], big[1], big[2]}, small[0], big[1] * big[2]};
  };

  if (a.size() == 1 && b.size() == 3 && !is_map(b)) return plan(BcKind::VecChw, a, b, false);
  if (b.size() == 1 && a.size() == 3 && !is_map(a)) return plan(BcKind::VecChw, b, a, true);
  if (is_map(a) && b.size() == 3 && !is_map(b)) return plan(BcKind::MapChw, a, b, false);
  if (is_map(b) && a.size() == 3 && !is_map(a)) return plan(BcKind::MapChw, b, a, true);
  if (a.size() == 1 && is_map(b)) return plan(BcKind::VecMap, a, b, false);
  if (b.size() == 1 && is_map(a)) return plan(BcKind::VecMap, b, a, true);
  // [1,H,W] with [1,H,W] hits the Same case above; anything else is an error.
  throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable");
}

// Index of the small operand for output element (c, p).
inline std::size_t small_index(BcKind k, std::size_t c, std::size_t p) {
  switch (k) {
    case BcKind::VecChw:
    case BcKind::VecMap:
      return c;
    case BcKind::MapChw:
      return p;
    default:
      return 0;
  }
}

// Index of the big operand for output element (c, p). For VecMap the "big"
// operand is the spatial map.
inline std::size_t big_index(BcKind k, std::size_t c, std::size_t p, std::size_t hw) {
  return k == BcKind::VecMap ? p : c * hw + p;
}

}  // namespace detail

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape());
  auto an = a.node();
  auto bn = b.node();
  const auto& sm = plan.swapped ? bn : an;  // small operand
  const auto& bg = plan.swapped ? an : bn;

  std::vector<T> out(numel(plan.out));
  if (plan.kind == detail::BcKind::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] + bn->data[i];
  } else {
    for (std::size_t c = 0; c < plan.channels; ++c)
      for (std::size_t p = 0; p < plan.hw; ++p) {
        T s = sm->data[detail::small_index(plan.kind, c, p)];
        T g = bg->data[detail::big_index(plan.kind, c, p, plan.hw)];
        out[c * plan.hw + p] = plan.swapped ? g + s : s + g;
      }
  }

  auto backward = [plan, sm, bg](detail::Node<T>& n) {
    if (sm->requires_grad) detail::ensure_grad(*sm);
    if (bg->requires_grad) detail::ensure_grad(*bg);
    if (plan.kind == detail::BcKind::Same) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        if (sm->requires_grad) sm->grad[i] += n.grad[i];
        if (bg->requires_grad) bg->grad[i] += n.grad[i];
      }
      return;
    }
    for (std::size_t c = 0; c < plan.channels; ++c)
      for (std::size_t p = 0; p < plan.hw; ++p) {
        T g = n.grad[c * plan.hw + p];
        if (sm->requires_grad) sm->grad[detail::small_index(plan.kind, c, p)] += g;
        if (bg->requires_grad) bg->grad[detail::big_index(plan.kind, c, p, plan.hw)] += g;
      }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(plan.out, std::move(out), {an, bn}, backward, "add"));
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  auto plan = detail::broadcast_plan(a.shape(), b.shape());
  auto an = a.node();
  auto bn = b.node();
  const auto& sm = plan.swapped ? bn : an;
  const auto& bg = plan.swapped ? an : bn;

  std::vector<T> out(numel(plan.out));
  if (plan.kind == detail::BcKind::Same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = an->data[i] * bn->data[i];
  } else {
    for (std::size_t c = 0; c < plan.channels; ++c)
      for (std::size_t p = 0; p < plan.hw; ++p) {
        T s = sm->data[detail::small_index(plan.kind, c, p)];
        T g = bg->data[detail::big_index(plan.kind, c, p, plan.hw)];
        out[c * plan.hw + p] = plan.swapped ? g * s : s * g;
      }
  }

  auto backward = [plan, sm, bg](detail::Node<T>& n) {
    if (sm->requires_grad) detail::ensure_grad(*sm);
    if (bg->requires_grad) detail::ensure_grad(*bg);
    if (plan.kind == detail::BcKind::Same) {
      for (std::size_t i = 0; i < n.grad.size(); ++i) {
        if (sm->requires_grad) sm->grad[i] += n.grad[i] * bg->data[i];
        if (bg->requires_grad) bg->grad[i] += n.grad[i] * sm->data[i];
      }
      return;
    }
    for (std::size_t c = 0; c < plan.channels; ++c)
      for (std::size_t p = 0; p < plan.hw; ++p) {
        T g = n.grad[c * plan.hw + p];
        std::size_t si = detail::small_index(plan.kind, c, p);
        std::size_t bi = detail::big_index(plan.kind, c, p, plan.hw);
        if (sm->requires_grad) sm->grad[si] += g * bg->data[bi];
        if (bg->requires_grad) bg->grad[bi] += g * sm->data[si];
      }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(plan.out, std::move(out), {an, bn}, backward, "mul"));
}

/// Multiply by a compile-time-known constant.
template <typename T>
TensorT<T> scale(const TensorT<T>& x, T factor) {
  auto xn = x.node();
  std::vector<T> out(xn->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->data[i] * factor;
  auto backward = [xn, factor](detail::Node<T>& n) {
    detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < n.grad.size(); ++i) xn->grad[i] += n.grad[i] * factor;
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(xn->shape, std::move(out), {xn}, backward, "scale"));
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  auto xn = x.node();
  std::vector<T> out(xn->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xn->data[i] > T(0) ? xn->data[i] : T(0);
  auto backward = [xn](detail::Node<T>& n) {
    detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (xn->data[i] > T(0)) xn->grad[i] += n.grad[i];
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(xn->shape, std::move(out), {xn}, backward, "relu"));
}

/// Logistic sigmoid, elementwise. Output is strictly inside (0,1) for finite
/// input.
template <typename T>
TensorT<T> sigmoid(const TensorT<T>& x) {
  auto xn = x.node();
  std::vector<T> out(xn->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    T v = xn->data[i];
    out[i] = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                       : std::exp(v) / (T(1) + std::exp(v));
  }
  auto backward = [xn](detail::Node<T>& n) {
    detail::ensure_grad(*xn);
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      T s = n.data[i];
      xn->grad[i] += n.grad[i] * s * (T(1) - s);
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(xn->shape, std::move(out), {xn}, backward, "sigmoid"));
}

/// Sum of all elements, as a [1] tensor.
template <typename T>
TensorT<T> sum(const TensorT<T>& x) {
  auto xn = x.node();
  T acc = 0;
  for (T v : xn->data) acc += v;
  auto backward = [xn](detail::Node<T>& n) {
    detail::ensure_grad(*xn);
    T g = n.grad[0];
    for (std::size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += g;
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{1}, std::vector<T>{acc}, {xn}, backward, "sum"));
}

template <typename T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.size()));
}

/// Dense matrix [R,C] times vector [C] -> [R].
template <typename T>
TensorT<T> matvec(const TensorT<T>& m, const TensorT<T>& v) {
  auto mn = m.node();
  auto vn = v.node();
  if (mn->shape.size() != 2 || vn->shape.size() != 1 || mn->shape[1] != vn->shape[0]) {
    throw ShapeError("matvec shapes " + shape_str(mn->shape) + " x " + shape_str(vn->shape));
  }
  std::size_t rows = mn->shape[0], cols = mn->shape[1];
  std::vector<T> out(rows, T(0));
  for (std::size_t i = 0; i < rows; ++i) {
    T acc = 0;
    const T* row = mn->data.data() + i * cols;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * vn->data[j];
    out[i] = acc;
  }
  auto backward = [mn, vn, rows, cols](detail::Node<T>& n) {
    if (mn->requires_grad) {
      detail::ensure_grad(*mn);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) mn->grad[i * cols + j] += n.grad[i] * vn->data[j];
    }
    if (vn->requires_grad) {
      detail::ensure_grad(*vn);
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) vn->grad[j] += n.grad[i] * mn->data[i * cols + j];
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{rows}, std::move(out), {mn, vn}, backward, "matvec"));
}

/// 2-D cross-correlation (deep-learning "convolution", no kernel flip) with
/// zero padding. input [Cin,H,W], kernel [Cout,Cin,k,k] with k odd,
/// bias [Cout]. The default padding k/2 keeps the spatial dims ("same").
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias,
                  std::size_t padding) {
  auto in = input.node();
  auto kn = kernel.node();
  auto bn = bias.node();
  const Shape& is = in->shape;
  const Shape& ks = kn->shape;
  if (is.size() != 3) throw ShapeError("conv2d input must be [C,H,W], got " + shape_str(is));
  if (ks.size() != 4) throw ShapeError("conv2d kernel must be [Cout,Cin,k,k], got " + shape_str(ks));
  if (ks[2] != ks[3] || ks[2] % 2 == 0) throw ShapeError("conv2d kernel must be square with odd size");
  if (ks[1] != is[0]) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(is) + " vs kernel " + shape_str(ks));
  }
  if (bn->shape != Shape{ks[0]}) throw ShapeError("conv2d bias must be [Cout]");

  const std::size_t cin = is[0], h = is[1], w = is[2];
  const std::size_t cout = ks[0], k = ks[2];
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(padding);
  const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(h) + 2 * pad - static_cast<std::ptrdiff_t>(k) + 1;
  const std::ptrdiff_t ow = static_cast<std::ptrdiff_t>(w) + 2 * pad - static_cast<std::ptrdiff_t>(k) + 1;
  if (oh < 1 || ow < 1) throw ShapeError("conv2d output would be empty");
  const std::size_t OH = static_cast<std::size_t>(oh), OW = static_cast<std::size_t>(ow);

  std::vector<T> out(cout * OH * OW);
  const T* IN = in->data.data();
  const T* K = kn->data.data();
  for (std::size_t co = 0; co < cout; ++co) {
    T* plane = out.data() + co * OH * OW;
    std::fill(plane, plane + OH * OW, bn->data[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const T* iplane = IN + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
        const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dy));
        const std::size_t y1 = static_cast<std::size_t>(
            std::min<std::ptrdiff_t>(oh, static_cast<std::ptrdiff_t>(h) - dy));
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
          const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
          const std::size_t x1 = static_cast<std::size_t>(
              std::min<std::ptrdiff_t>(ow, static_cast<std::ptrdiff_t>(w) - dx));
          const T kw = K[((co * cin + ci) * k + ky) * k + kx];
          for (std::size_t y = y0; y < y1; ++y) {
            const T* irow = iplane + (static_cast<std::ptrdiff_t>(y) + dy) * static_cast<std::ptrdiff_t>(w);
            T* orow = plane + y * OW;
            for (std::size_t x = x0; x < x1; ++x) {
              orow[x] += kw * irow[static_cast<std::ptrdiff_t>(x) + dx];
            }
          }
        }
      }
    }
  }

  auto backward = [in, kn, bn, cin, h, w, cout, k, pad, OH, OW](detail::Node<T>& n) {
    const T* G = n.grad.data();
    const std::ptrdiff_t oh = static_cast<std::ptrdiff_t>(OH), ow = static_cast<std::ptrdiff_t>(OW);
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t co = 0; co < cout; ++co) {
        T acc = 0;
        const T* gp = G + co * OH * OW;
        for (std::size_t i = 0; i < OH * OW; ++i) acc += gp[i];
        bn->grad[co] += acc;
      }
    }
    const bool need_in = in->requires_grad;
    const bool need_k = kn->requires_grad;
    if (!need_in && !need_k) return;
    if (need_in) detail::ensure_grad(*in);
    if (need_k) detail::ensure_grad(*kn);
    for (std::size_t co = 0; co < cout; ++co) {
      const T* gplane = G + co * OH * OW;
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T* iplane = in->data.data() + ci * h * w;
        T* giplane = need_in ? in->grad.data() + ci * h * w : nullptr;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(ky) - pad;
          const std::size_t y0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dy));
          const std::size_t y1 = static_cast<std::size_t>(
              std::min<std::ptrdiff_t>(oh, static_cast<std::ptrdiff_t>(h) - dy));
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(kx) - pad;
            const std::size_t x0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dx));
            const std::size_t x1 = static_cast<std::size_t>(
                std::min<std::ptrdiff_t>(ow, static_cast<std::ptrdiff_t>(w) - dx));
            const std::size_t kidx = ((co * cin + ci) * k + ky) * k + kx;
            const T kw = kn->data[kidx];
            T kacc = 0;
            for (std::size_t y = y0; y < y1; ++y) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y) + dy;
              const T* irow = iplane + iy * static_cast<std::ptrdiff_t>(w);
              const T* grow = gplane + y * OW;
              T* girow = need_in ? giplane + iy * static_cast<std::ptrdiff_t>(w) : nullptr;
              for (std::size_t x = x0; x < x1; ++x) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x) + dx;
                const T g = grow[x];
                if (need_k) kacc += g * irow[ix];
                if (need_in) girow[ix] += g * kw;
              }
            }
            if (need_k) kn->grad[kidx] += kacc;
          }
        }
      }
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{cout, OH, OW}, std::move(out),
                                                  {in, kn, bn}, backward, "conv2d"));
}

/// Same-padding convolution (the common case).
template <typename T>
TensorT<T> conv2d(const TensorT<T>& input, const TensorT<T>& kernel, const TensorT<T>& bias) {
  return conv2d(input, kernel, bias, kernel.shape().at(2) / 2);
}

/// Argmax positions recorded by maxpool2x2_with_indices; flat index into the
/// channel plane of the pooled input.
struct PoolIndices {
  std::size_t channels = 0;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::vector<std::uint32_t> argmax;  // one entry per output element
};

/// 2x2 max pooling with stride 2. Ties resolve to the first element in
/// row-major window order.
template <typename T>
std::pair<TensorT<T>, PoolIndices> maxpool2x2_with_indices(const TensorT<T>& input) {
  auto in = input.node();
  const Shape& is = in->shape;
  if (is.size() != 3) throw ShapeError("maxpool input must be [C,H,W]");
  const std::size_t c = is[0], h = is[1], w = is[2];
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2x2 requires even spatial dims, got " + shape_str(is));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(c * oh * ow);
  PoolIndices idx{c, h, w, std::vector<std::uint32_t>(c * oh * ow)};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = in->data.data() + ch * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (2 * oy) * w + 2 * ox;
        T bv = plane[best];
        const std::size_t cand[3] = {(2 * oy) * w + 2 * ox + 1, (2 * oy + 1) * w + 2 * ox,
                                     (2 * oy + 1) * w + 2 * ox + 1};
        for (std::size_t q : cand) {
          if (plane[q] > bv) {
            bv = plane[q];
            best = q;
          }
        }
        out[(ch * oh + oy) * ow + ox] = bv;
        idx.argmax[(ch * oh + oy) * ow + ox] = static_cast<std::uint32_t>(best);
      }
    }
  }
  auto indices = idx;  // captured copy for the backward route
  auto backward = [in, indices, oh, ow](detail::Node<T>& n) {
    detail::ensure_grad(*in);
    const std::size_t hw = indices.in_h * indices.in_w;
    for (std::size_t ch = 0; ch < indices.channels; ++ch) {
      T* gplane = in->grad.data() + ch * hw;
      for (std::size_t i = 0; i < oh * ow; ++i) {
        gplane[indices.argmax[ch * oh * ow + i]] += n.grad[ch * oh * ow + i];
      }
    }
  };
  auto node = detail::make_op_node<T>(Shape{c, oh, ow}, std::move(out), {in}, backward, "maxpool2x2");
  return {TensorT<T>::wrap(node), std::move(idx)};
}

/// SegNet-style sparse upsampling: scatters pooled values back to their
/// recorded argmax positions; everything else is exactly zero.
template <typename T>
TensorT<T> maxunpool2x2(const TensorT<T>& input, const PoolIndices& indices) {
  auto in = input.node();
  const Shape& is = in->shape;
  if (is.size() != 3) throw ShapeError("maxunpool input must be [C,H,W]");
  const std::size_t c = is[0], h = is[1], w = is[2];
  if (indices.channels != c || indices.in_h != 2 * h || indices.in_w != 2 * w ||
      indices.argmax.size() != c * h * w) {
    throw ShapeError("pooling indices do not match unpool input " + shape_str(is));
  }
  const std::size_t uh = 2 * h, uw = 2 * w;
  std::vector<T> out(c * uh * uw, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* plane = out.data() + ch * uh * uw;
    for (std::size_t oy = 0; oy < h; ++oy) {
      for (std::size_t ox = 0; ox < w; ++ox) {
        const std::uint32_t f = indices.argmax[(ch * h + oy) * w + ox];
        const std::size_t y = f / uw, x = f % uw;
        if (y / 2 != oy || x / 2 != ox) {
          throw NumericError("corrupted pooling index: position outside its 2x2 window");
        }
        plane[f] = in->data[(ch * h + oy) * w + ox];
      }
    }
  }
  auto idx = indices;
  auto backward = [in, idx, h, w](detail::Node<T>& n) {
    detail::ensure_grad(*in);
    const std::size_t uhw = idx.in_h * idx.in_w;
    for (std::size_t ch = 0; ch < idx.channels; ++ch) {
      const T* gplane = n.grad.data() + ch * uhw;
      for (std::size_t i = 0; i < h * w; ++i) {
        in->grad[ch * h * w + i] += gplane[idx.argmax[ch * h * w + i]];
      }
    }
  };
  return TensorT<T>::wrap(
      detail::make_op_node<T>(Shape{c, uh, uw}, std::move(out), {in}, backward, "maxunpool2x2"));
}

/// Global average pooling: [C,H,W] -> [C].
template <typename T>
TensorT<T> global_avg_pool(const TensorT<T>& input) {
  auto in = input.node();
  const Shape& is = in->shape;
  if (is.size() != 3) throw ShapeError("global_avg_pool input must be [C,H,W]");
  const std::size_t c = is[0], hw = is[1] * is[2];
  std::vector<T> out(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T acc = 0;
    const T* plane = in->data.data() + ch * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += plane[i];
    out[ch] = acc / static_cast<T>(hw);
  }
  auto backward = [in, c, hw](detail::Node<T>& n) {
    detail::ensure_grad(*in);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T g = n.grad[ch] / static_cast<T>(hw);
      T* gplane = in->grad.data() + ch * hw;
      for (std::size_t i = 0; i < hw; ++i) gplane[i] += g;
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{c}, std::move(out), {in}, backward, "global_avg_pool"));
}

/// Arithmetic mean over the channel dimension: [C,H,W] -> [1,H,W].
template <typename T>
TensorT<T> channel_mean(const TensorT<T>& input) {
  auto in = input.node();
  const Shape& is = in->shape;
  if (is.size() != 3) throw ShapeError("channel_mean input must be [C,H,W]");
  const std::size_t c = is[0], hw = is[1] * is[2];
  std::vector<T> out(hw, T(0));
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = in->data.data() + ch * hw;
    for (std::size_t p = 0; p < hw; ++p) out[p] += plane[p];
  }
  const T inv = T(1) / static_cast<T>(c);
  for (std::size_t p = 0; p < hw; ++p) out[p] *= inv;
  auto backward = [in, c, hw, inv](detail::Node<T>& n) {
    detail::ensure_grad(*in);
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* gplane = in->grad.data() + ch * hw;
      for (std::size_t p = 0; p < hw; ++p) gplane[p] += n.grad[p] * inv;
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{1, is[1], is[2]}, std::move(out), {in},
                                                  backward, "channel_mean"));
}

/// Per-pixel softmax across the channel dimension with max subtraction.
template <typename T>
TensorT<T> softmax_over_channels(const TensorT<T>& input) {
  auto in = input.node();
  const Shape& is = in->shape;
  if (is.size() != 3) throw ShapeError("softmax input must be [C,H,W]");
  if (is[0] < 2) throw ShapeError("softmax needs at least 2 channels");
  const std::size_t c = is[0], hw = is[1] * is[2];
  std::vector<T> out(c * hw);
  for (std::size_t p = 0; p < hw; ++p) {
    T m = in->data[p];
    for (std::size_t ch = 1; ch < c; ++ch) m = std::max(m, in->data[ch * hw + p]);
    T z = 0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T e = std::exp(in->data[ch * hw + p] - m);
      out[ch * hw + p] = e;
      z += e;
    }
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] /= z;
  }
  auto backward = [in, c, hw](detail::Node<T>& n) {
    detail::ensure_grad(*in);
    for (std::size_t p = 0; p < hw; ++p) {
      T dot = 0;
      for (std::size_t ch = 0; ch < c; ++ch) dot += n.grad[ch * hw + p] * n.data[ch * hw + p];
      for (std::size_t ch = 0; ch < c; ++ch) {
        in->grad[ch * hw + p] += n.data[ch * hw + p] * (n.grad[ch * hw + p] - dot);
      }
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(is, std::move(out), {in}, backward, "softmax"));
}

/// Channel concatenation: [Ca,H,W] ++ [Cb,H,W] -> [Ca+Cb,H,W].
template <typename T>
TensorT<T> concat_channels(const TensorT<T>& a, const TensorT<T>& b) {
  auto an = a.node();
  auto bn = b.node();
  const Shape& as = an->shape;
  const Shape& bs = bn->shape;
  if (as.size() != 3 || bs.size() != 3 || as[1] != bs[1] || as[2] != bs[2]) {
    throw ShapeError("concat_channels shapes " + shape_str(as) + " and " + shape_str(bs));
  }
  std::vector<T> out;
  out.reserve(an->data.size() + bn->data.size());
  out.insert(out.end(), an->data.begin(), an->data.end());
  out.insert(out.end(), bn->data.begin(), bn->data.end());
  const std::size_t na = an->data.size();
  auto backward = [an, bn, na](detail::Node<T>& n) {
    if (an->requires_grad) {
      detail::ensure_grad(*an);
      for (std::size_t i = 0; i < na; ++i) an->grad[i] += n.grad[i];
    }
    if (bn->requires_grad) {
      detail::ensure_grad(*bn);
      for (std::size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += n.grad[na + i];
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{as[0] + bs[0], as[1], as[2]}, std::move(out),
                                                  {an, bn}, backward, "concat_channels"));
}

/// Mean per-pixel cross-entropy of a probability tensor [K,H,W] against an
/// integer class mask. Probabilities are clamped at 1e-12 inside the log.
template <typename T>
TensorT<T> cross_entropy_mean(const TensorT<T>& probs, const Mask& target) {
  auto pn = probs.node();
  const Shape& ps = pn->shape;
  if (ps.size() != 3) throw ShapeError("cross_entropy probs must be [K,H,W]");
  if (ps[1] != target.h || ps[2] != target.w) {
    throw ShapeError("cross_entropy target dims do not match probs " + shape_str(ps));
  }
  const std::size_t kk = ps[0], hw = ps[1] * ps[2];
  constexpr T kEps = T(1e-12);
  T acc = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    const std::size_t cls = target.v[p];
    if (cls >= kk) throw DataError("mask class exceeds probability channels");
    acc -= std::log(std::max(pn->data[cls * hw + p], kEps));
  }
  acc /= static_cast<T>(hw);
  auto tgt = target.v;
  auto backward = [pn, tgt, hw](detail::Node<T>& n) {
    detail::ensure_grad(*pn);
    const T g = n.grad[0] / static_cast<T>(hw);
    for (std::size_t p = 0; p < hw; ++p) {
      const std::size_t cls = tgt[p];
      const T pv = pn->data[cls * hw + p];
      if (pv >= kEps) pn->grad[cls * hw + p] -= g / pv;
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{1}, std::vector<T>{acc}, {pn}, backward,
                                                  "cross_entropy_mean"));
}

/// Differentiable soft Dice loss on the foreground plane of a two-class
/// probability tensor: 1 - (2*sum(p1*t)+s)/(sum(p1)+sum(t)+s), s = 1.
template <typename T>
TensorT<T> soft_dice_loss(const TensorT<T>& probs, const Mask& target) {
  auto pn = probs.node();
  const Shape& ps = pn->shape;
  if (ps.size() != 3 || ps[0] != 2) throw ShapeError("soft_dice_loss expects [2,H,W] probs");
  if (ps[1] != target.h || ps[2] != target.w) throw ShapeError("soft_dice_loss target dim mismatch");
  const std::size_t hw = ps[1] * ps[2];
  constexpr T kSmooth = T(1);
  const T* p1 = pn->data.data() + hw;
  T inter = 0, psum = 0, tsum = 0;
  for (std::size_t p = 0; p < hw; ++p) {
    inter += p1[p] * static_cast<T>(target.v[p]);
    psum += p1[p];
    tsum += static_cast<T>(target.v[p]);
  }
  const T num = T(2) * inter + kSmooth;
  const T den = psum + tsum + kSmooth;
  const T loss = T(1) - num / den;
  auto tgt = target.v;
  auto backward = [pn, tgt, hw, num, den](detail::Node<T>& n) {
    detail::ensure_grad(*pn);
    const T g = n.grad[0];
    T* gp1 = pn->grad.data() + hw;
    for (std::size_t p = 0; p < hw; ++p) {
      const T t = static_cast<T>(tgt[p]);
      gp1[p] += g * (num - T(2) * t * den) / (den * den);
    }
  };
  return TensorT<T>::wrap(detail::make_op_node<T>(Shape{1}, std::vector<T>{loss}, {pn}, backward,
                                                  "soft_dice_loss"));
}

}  // namespace lungseg
