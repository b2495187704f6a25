#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "lvt/core/attention.hpp"
#include "lvt/core/ops.hpp"
#include "lvt/core/rng.hpp"

namespace lvt {

/// Owns named parameters. std::map keeps node addresses stable, so layers can
/// hold raw pointers into the store across moves of the store.
template <class S>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Parameter<S>& add(const std::string& name, Tensor<S> value, bool trainable = true) {
    auto [it, inserted] = params_.try_emplace(name, name, std::move(value), trainable);
    if (!inserted) throw ValidationError("duplicate parameter name " + name);
    return it->second;
  }

  Parameter<S>& normal(const std::string& name, Shape shape, Rng& rng, double stddev) {
    return add(name, randn<S>(std::move(shape), rng, static_cast<S>(stddev)));
  }
  Parameter<S>& zeros(const std::string& name, Shape shape) { return add(name, Tensor<S>(std::move(shape))); }
  Parameter<S>& ones(const std::string& name, Shape shape) { return add(name, Tensor<S>(std::move(shape), S{1})); }

  Parameter<S>& get(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }
  const Parameter<S>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("unknown parameter " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::map<std::string, Parameter<S>>& items() { return params_; }
  const std::map<std::string, Parameter<S>>& items() const { return params_; }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  // Deep copy with converted scalar type (float <-> double).
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>(), p.trainable);
    return out;
  }

 private:
  std::map<std::string, Parameter<S>> params_;
};

// FNV-1a over the bytes of every value, in name order; cheap checksum for
// "parameters unchanged" checks.
template <class S>
std::uint64_t checksum(const ParamStore<S>& store, const std::string& prefix = "") {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& [name, p] : store.items()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.data().data());
    for (std::size_t i = 0; i < p.value.size() * sizeof(S); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

template <class S>
struct Linear {
  Parameter<S>* weight = nullptr;  // [in × out]
  Parameter<S>* bias = nullptr;    // [out], optional

  static Linear create(ParamStore<S>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       double stddev) {
    return Linear{&store.normal(name + ".weight", {in, out}, rng, stddev), &store.zeros(name + ".bias", {out})};
  }

  static Linear create_no_bias(ParamStore<S>& store, const std::string& name, std::size_t in, std::size_t out,
                               Rng& rng, double stddev) {
    return Linear{&store.normal(name + ".weight", {in, out}, rng, stddev), nullptr};
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) const {
    auto y = matmul(x, t.param(*weight));
    return bias ? add_bias(y, t.param(*bias)) : y;
  }
};

template <class S>
struct LayerNorm {
  Parameter<S>* gamma = nullptr;
  Parameter<S>* beta = nullptr;
  S eps = static_cast<S>(1e-5);

  static LayerNorm create(ParamStore<S>& store, const std::string& name, std::size_t dim) {
    return LayerNorm{&store.ones(name + ".gamma", {dim}), &store.zeros(name + ".beta", {dim})};
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) const {
    return layer_norm(x, t.param(*gamma), t.param(*beta), eps);
  }
};

template <class S>
struct FeedForward {
  Linear<S> up;
  Linear<S> down;

  static FeedForward create(ParamStore<S>& store, const std::string& name, std::size_t dim, std::size_t hidden,
                            Rng& rng, double stddev) {
    return FeedForward{Linear<S>::create(store, name + ".up", dim, hidden, rng, stddev),
                       Linear<S>::create(store, name + ".down", hidden, dim, rng, stddev)};
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& x) const { return down(t, gelu(up(t, x))); }
};

/// Projections around attention(): queries from `xq`, keys/values from `xkv`.
template <class S>
struct MultiHeadAttention {
  Linear<S> wq, wk, wv, wo;
  std::size_t heads = 1;

  static MultiHeadAttention create(ParamStore<S>& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, Rng& rng, double stddev, bool out_bias = true) {
    auto q = Linear<S>::create(store, name + ".q", dim, dim, rng, stddev);
    auto k = Linear<S>::create(store, name + ".k", dim, dim, rng, stddev);
    auto v = Linear<S>::create(store, name + ".v", dim, dim, rng, stddev);
    auto o = out_bias ? Linear<S>::create(store, name + ".o", dim, dim, rng, stddev)
                      : Linear<S>::create_no_bias(store, name + ".o", dim, dim, rng, stddev);
    return MultiHeadAttention{q, k, v, o, heads};
  }

  Var<S> operator()(Tape<S>& t, const Var<S>& xq, const Var<S>& xkv, const Tensor<S>& mask, AttentionLayout lay,
                    std::optional<Var<S>> gate = std::nullopt) const {
    lay.heads = heads;
    return wo(t, attention(wq(t, xq), wk(t, xkv), wv(t, xkv), mask, lay, gate));
  }
};

}  // namespace lvt
