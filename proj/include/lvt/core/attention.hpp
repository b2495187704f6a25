#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <type_traits>
#include <string>
#include <vector>

#include "lvt/core/ops.hpp"

namespace lvt {

inline constexpr double kMaskedOut = -std::numeric_limits<double>::infinity();

/// Packing of a batched attention call. Queries are [batch*q_len × D] and
/// keys/values [batch*k_len × D]; D is split into `heads` contiguous chunks.
struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t q_len = 0;
  std::size_t k_len = 0;
  std::size_t heads = 1;
};

/// Multi-head scaled dot-product attention:
///   out = softmax(q kᵀ / sqrt(d_head) + mask) v
///
/// `mask` is additive with entries 0 or -inf, shaped [q_len × k_len] (shared
/// over the batch) or [batch × q_len × k_len]. The optional `gate` [batch*k_len]
/// multiplies each key's unnormalized weight, so a hard 0/1 gate behaves like a
/// -inf mask in the forward pass while still receiving a gradient. A query row
/// with no admissible key yields a zero output row. For a key whose gate is
/// exactly 0 the gate gradient uses the secant slope of opening that key,
/// which is finite where the derivative of the gated softmax is unbounded.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Tensor<S>& mask, AttentionLayout lay,
                 std::type_identity_t<std::optional<Var<S>>> gate = std::nullopt) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  detail::require_rank2(qv, "attention(q)");
  detail::require_rank2(kv, "attention(k)");
  detail::require_rank2(vv, "attention(v)");
  const std::size_t B = lay.batch, Tq = lay.q_len, Tk = lay.k_len, H = lay.heads;
  const std::size_t D = qv.dim(1);
  if (kv.dim(1) != D)
    throw DimensionError("attention: feature dim mismatch q " + shape_str(qv.shape()) + " vs k " + shape_str(kv.shape()));
  if (vv.dim(1) != D || vv.dim(0) != kv.dim(0))
    throw DimensionError("attention: v " + shape_str(vv.shape()) + " does not match k " + shape_str(kv.shape()));
  if (qv.dim(0) != B * Tq || kv.dim(0) != B * Tk)
    throw DimensionError("attention: row counts " + shape_str(qv.shape()) + ", " + shape_str(kv.shape()) +
                         " disagree with layout");
  if (H == 0 || D % H != 0) throw DimensionError("attention: heads must divide feature dim");
  const bool shared_mask = mask.size() == Tq * Tk;
  if (!shared_mask && mask.size() != B * Tq * Tk)
    throw DimensionError("attention: mask " + shape_str(mask.shape()) + " does not match layout");
  if (gate && gate->value().size() != B * Tk)
    throw DimensionError("attention: gate " + shape_str(gate->value().shape()) + " does not match keys");

  const std::size_t dh = D / H;
  const S inv_sqrt = S{1} / std::sqrt(static_cast<S>(dh));
  // w: normalized gated weights; p: d w / d gate per key (exp(s)/Z for open
  // keys, a bounded secant for closed ones).
  std::vector<S> w(B * H * Tq * Tk, S{0}), p(B * H * Tq * Tk, S{0});
  Tensor<S> out({B * Tq, D});
  std::vector<S> s(Tk);
  const S* gv = gate ? gate->value().data().data() : nullptr;

  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t i = 0; i < Tq; ++i) {
        const S* qi = qv.data().data() + (b * Tq + i) * D + h * dh;
        const S* mrow = mask.data().data() + (shared_mask ? i * Tk : (b * Tq + i) * Tk);
        S mx = -std::numeric_limits<S>::infinity();
        for (std::size_t j = 0; j < Tk; ++j) {
          if (std::isinf(mrow[j]) && mrow[j] < 0) {
            s[j] = -std::numeric_limits<S>::infinity();
            continue;
          }
          const S* kj = kv.data().data() + (b * Tk + j) * D + h * dh;
          S acc{0};
          for (std::size_t d = 0; d < dh; ++d) acc += qi[d] * kj[d];
          s[j] = acc * inv_sqrt + mrow[j];
          const bool active = !gv || gv[b * Tk + j] > S{0};
          if (active) mx = std::max(mx, s[j]);
        }
        S* wrow = w.data() + ((b * H + h) * Tq + i) * Tk;
        S* prow = p.data() + ((b * H + h) * Tq + i) * Tk;
        if (std::isinf(mx)) {
          // Empty scope: zero row. Switching any key on would output its value.
          for (std::size_t j = 0; j < Tk; ++j)
            if (!std::isinf(s[j])) prow[j] = S{1};
          continue;
        }
        S z{0};
        for (std::size_t j = 0; j < Tk; ++j) {
          if (std::isinf(s[j])) continue;
          const S gj = gv ? gv[b * Tk + j] : S{1};
          if (gj > S{0}) {
            prow[j] = std::exp(s[j] - mx);
            z += gj * prow[j];
          }
        }
        S* orow = out.data().data() + (b * Tq + i) * D + h * dh;
        for (std::size_t j = 0; j < Tk; ++j) {
          if (std::isinf(s[j])) continue;
          const S gj = gv ? gv[b * Tk + j] : S{1};
          if (!(gj > S{0})) {
            // Gate exactly 0: secant slope of switching the key on,
            // e_j / (Z + e_j), which stays bounded by 1.
            prow[j] = S{1} / (S{1} + z * std::exp(mx - s[j]));
            continue;
          }
          prow[j] /= z;
          wrow[j] = gj * prow[j];
          const S* vj = vv.data().data() + (b * Tk + j) * D + h * dh;
          for (std::size_t d = 0; d < dh; ++d) orow[d] += wrow[j] * vj[d];
        }
      }

  Tensor<S> saved_out = out;
  auto backward = [q, k, v, gate, lay, w, p, saved_out, dh, inv_sqrt](Tape<S>& t, const Tensor<S>& g) {
    const std::size_t B = lay.batch, Tq = lay.q_len, Tk = lay.k_len, H = lay.heads;
    const std::size_t D = dh * H;
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    Tensor<S> gq(qv.shape()), gk(kv.shape()), gvv(vv.shape());
    Tensor<S> gg(gate ? gate->value().shape() : Shape{1});
    std::vector<S> dw(Tk);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t i = 0; i < Tq; ++i) {
          const S* wrow = w.data() + ((b * H + h) * Tq + i) * Tk;
          const S* prow = p.data() + ((b * H + h) * Tq + i) * Tk;
          const S* go = g.data().data() + (b * Tq + i) * D + h * dh;
          const S* oi = saved_out.data().data() + (b * Tq + i) * D + h * dh;
          S go_dot_o{0};
          for (std::size_t d = 0; d < dh; ++d) go_dot_o += go[d] * oi[d];
          for (std::size_t j = 0; j < Tk; ++j) {
            if (prow[j] == S{0}) {
              dw[j] = S{0};
              continue;
            }
            const S* vj = vv.data().data() + (b * Tk + j) * D + h * dh;
            S acc{0};
            for (std::size_t d = 0; d < dh; ++d) acc += go[d] * vj[d];
            dw[j] = acc;
            S* gvj = gvv.data().data() + (b * Tk + j) * D + h * dh;
            for (std::size_t d = 0; d < dh; ++d) gvj[d] += wrow[j] * go[d];
          }
          const S* qi = qv.data().data() + (b * Tq + i) * D + h * dh;
          S* gqi = gq.data().data() + (b * Tq + i) * D + h * dh;
          for (std::size_t j = 0; j < Tk; ++j) {
            if (prow[j] == S{0}) continue;
            const S centered = dw[j] - go_dot_o;
            if (gate) gg[b * Tk + j] += prow[j] * centered;
            const S ds = wrow[j] * centered * inv_sqrt;
            if (ds == S{0}) continue;
            const S* kj = kv.data().data() + (b * Tk + j) * D + h * dh;
            S* gkj = gk.data().data() + (b * Tk + j) * D + h * dh;
            for (std::size_t d = 0; d < dh; ++d) {
              gqi[d] += ds * kj[d];
              gkj[d] += ds * qi[d];
            }
          }
        }
    if (q.requires_grad()) t.accumulate_grad(q, gq);
    if (k.requires_grad()) t.accumulate_grad(k, gk);
    if (v.requires_grad()) t.accumulate_grad(v, gvv);
    if (gate && gate->requires_grad()) t.accumulate_grad(*gate, gg);
  };
  if (gate) return q.tape().record("attention", std::move(out), {q, k, v, *gate}, std::move(backward));
  return q.tape().record("attention", std::move(out), {q, k, v}, std::move(backward));
}

// Single sequence, single head.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, const Tensor<S>& mask) {
  return attention(q, k, v, mask, AttentionLayout{1, q.value().dim(0), k.value().dim(0), 1});
}

/// Additive mask letting query i see keys j <= i.
template <class S>
Tensor<S> causal_mask(std::size_t n) {
  Tensor<S> m({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) m.at(i, j) = -std::numeric_limits<S>::infinity();
  return m;
}

}  // namespace lvt
