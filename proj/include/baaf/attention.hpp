#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include "baaf/ops.hpp"
#include "baaf/parameter_store.hpp"

namespace baaf {

inline constexpr std::size_t kDefaultReduction = 8;
inline constexpr std::size_t kMinSqueezedDim = 32;

/// Bottleneck width of the adaptive calibration head: max(floor(C/r), 32).
inline std::size_t acm_squeezed_dim(std::size_t channels, std::size_t reduction = kDefaultReduction) {
  return std::max(channels / reduction, kMinSqueezedDim);
}

/// Hidden width of the channel-attention MLP: max(floor(C/r), 1).
inline std::size_t channel_hidden_dim(std::size_t channels, std::size_t reduction = kDefaultReduction) {
  return std::max<std::size_t>(channels / reduction, 1);
}

template <typename T>
struct SpatialAttentionParams {
  Tensor<T> weight;  // 1 x C x 1 x 1
  Tensor<T> bias;    // [1]
};

template <typename T>
struct ChannelAttentionParams {
  Tensor<T> wf1;  // hidden x C
  Tensor<T> wf2;  // C x hidden
  std::size_t reduction = kDefaultReduction;
};

template <typename T>
struct ACMParams {
  Tensor<T> wfc1;  // d x C
  Tensor<T> wfc2;  // 2C x d
  std::size_t reduction = kDefaultReduction;
  std::size_t squeezed = kMinSqueezedDim;
};

template <typename T>
struct BAAFBlockParams {
  SpatialAttentionParams<T> spatial;
  ChannelAttentionParams<T> channel;
  ACMParams<T> acm;

  std::size_t channels() const { return spatial.weight.dim(1); }
};

namespace detail {

template <typename T>
Tensor<T> he_uniform(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  return t;
}

}  // namespace detail

/// Fan-in scaled uniform weights, zero biases. Deterministic in (C, r, seed).
template <typename T>
BAAFBlockParams<T> init_baaf(std::size_t channels, std::size_t reduction, std::uint64_t seed) {
  if (channels == 0 || reduction == 0) throw std::invalid_argument("init_baaf needs C >= 1 and r >= 1");
  std::mt19937_64 rng(seed);
  BAAFBlockParams<T> p;
  const std::size_t c = channels;
  p.spatial.weight = detail::he_uniform<T>({1, c, 1, 1}, c, rng);
  p.spatial.bias = Tensor<T>(Shape{1});
  const std::size_t hid = channel_hidden_dim(c, reduction);
  p.channel.reduction = reduction;
  p.channel.wf1 = detail::he_uniform<T>({hid, c}, c, rng);
  p.channel.wf2 = detail::he_uniform<T>({c, hid}, hid, rng);
  const std::size_t d = acm_squeezed_dim(c, reduction);
  p.acm.reduction = reduction;
  p.acm.squeezed = d;
  p.acm.wfc1 = detail::he_uniform<T>({d, c}, c, rng);
  p.acm.wfc2 = detail::he_uniform<T>({2 * c, d}, d, rng);
  return p;
}

/// Registers the block under `prefix` ("<prefix>.spatial.weight", ...).
template <typename T>
void add_to_store(ParameterStore<T>& store, const std::string& prefix, const BAAFBlockParams<T>& p, bool with_acm) {
  store.add(prefix + ".spatial.weight", p.spatial.weight);
  store.add(prefix + ".spatial.bias", p.spatial.bias);
  store.add(prefix + ".channel.wf1", p.channel.wf1);
  store.add(prefix + ".channel.wf2", p.channel.wf2);
  if (with_acm) {
    store.add(prefix + ".acm.wfc1", p.acm.wfc1);
    store.add(prefix + ".acm.wfc2", p.acm.wfc2);
  }
}

template <typename T>
struct SpatialAttentionVars {
  Var<T> weight, bias;
};
template <typename T>
struct ChannelAttentionVars {
  Var<T> wf1, wf2;
};
template <typename T>
struct ACMVars {
  Var<T> wfc1, wfc2;
};
template <typename T>
struct BAAFBlockVars {
  SpatialAttentionVars<T> spatial;
  ChannelAttentionVars<T> channel;
  std::optional<ACMVars<T>> acm;
};

template <typename T>
BAAFBlockVars<T> bind_block(Tape<T>& tape, const BAAFBlockParams<T>& p, bool with_acm = true) {
  BAAFBlockVars<T> v{{tape.input(p.spatial.weight), tape.input(p.spatial.bias)},
                     {tape.input(p.channel.wf1), tape.input(p.channel.wf2)},
                     std::nullopt};
  if (with_acm) v.acm = ACMVars<T>{tape.input(p.acm.wfc1), tape.input(p.acm.wfc2)};
  return v;
}

template <typename T>
BAAFBlockVars<T> bind_block(Tape<T>& tape, const ParameterStore<T>& store, const std::string& prefix, bool with_acm) {
  BAAFBlockVars<T> v{{tape.parameter(store, prefix + ".spatial.weight"), tape.parameter(store, prefix + ".spatial.bias")},
                     {tape.parameter(store, prefix + ".channel.wf1"), tape.parameter(store, prefix + ".channel.wf2")},
                     std::nullopt};
  if (with_acm)
    v.acm = ACMVars<T>{tape.parameter(store, prefix + ".acm.wfc1"), tape.parameter(store, prefix + ".acm.wfc2")};
  return v;
}

template <typename T>
struct SpatialAttentionOut {
  Var<T> calibrated;  // F_S, N x C x H x W
  Var<T> alpha;       // N x 1 x H x W
};

template <typename T>
struct ChannelAttentionOut {
  Var<T> calibrated;  // F_C, N x C x H x W
  Var<T> beta;        // N x C
};

template <typename T>
struct ACMOut {
  Var<T> fused;  // F_A, N x 2C x H x W
  Var<T> phi;    // N x C, weights F_C
  Var<T> gamma;  // N x C, weights F_S
};

/// alpha = sigmoid(relu(conv1x1(F))), one map shared by every channel.
template <typename T>
SpatialAttentionOut<T> spatial_attention(Var<T> f, const SpatialAttentionVars<T>& p) {
  Var<T> alpha = sigmoid(relu(conv2d(f, p.weight, std::optional<Var<T>>(p.bias))));
  return {mul(f, alpha), alpha};
}

/// beta = sigmoid(Wf2 relu(Wf1 GAP(F))), one scalar per channel.
template <typename T>
ChannelAttentionOut<T> channel_attention(Var<T> f, const ChannelAttentionVars<T>& p) {
  const std::size_t n = f.shape()[0], c = f.shape()[1];
  Var<T> squeezed = reshape(global_avg_pool(f), {n, c});
  Var<T> beta = sigmoid(dense(relu(dense(squeezed, p.wf1)), p.wf2));
  return {mul(f, reshape(beta, {n, c, 1, 1})), beta};
}

/// Adaptive calibration: per-channel softmax over the two branches, then
/// concat(phi * F_C, gamma * F_S). The first C entries of Z are K, the rest V.
template <typename T>
ACMOut<T> acm_fuse(Var<T> fs, Var<T> fc, const ACMVars<T>& p) {
  if (fs.shape() != fc.shape())
    throw ShapeError("acm_fuse branch mismatch: " + shape_str(fs.shape()) + " vs " + shape_str(fc.shape()));
  const std::size_t n = fs.shape()[0], c = fs.shape()[1];
  Var<T> stats = reshape(add(global_avg_pool(fs), global_avg_pool(fc)), {n, c});
  Var<T> z = dense(relu(dense(stats, p.wfc1)), p.wfc2);
  Var<T> weights = pair_softmax(z);
  Var<T> phi = slice_channels(weights, 0, c);
  Var<T> gamma = slice_channels(weights, c, 2 * c);
  Var<T> fused = concat_channels(mul(fc, reshape(phi, {n, c, 1, 1})), mul(fs, reshape(gamma, {n, c, 1, 1})));
  return {fused, phi, gamma};
}

template <typename T>
struct BAAFOut {
  Var<T> output;  // N x 2C x H x W
  Var<T> alpha, beta, phi, gamma;
};

template <typename T>
BAAFOut<T> baaf_forward_gates(Var<T> f, const BAAFBlockVars<T>& p) {
  if (!p.acm) throw std::invalid_argument("baaf_forward needs ACM parameters");
  auto s = spatial_attention(f, p.spatial);
  auto ch = channel_attention(f, p.channel);
  auto a = acm_fuse(s.calibrated, ch.calibrated, *p.acm);
  return {a.fused, s.alpha, ch.beta, a.phi, a.gamma};
}

template <typename T>
Var<T> baaf_forward(Var<T> f, const BAAFBlockVars<T>& p) {
  return baaf_forward_gates(f, p).output;
}

/// Ablation fusion without the calibration head: F_S + F_C.
template <typename T>
Var<T> pham_fuse_add(Var<T> f, const BAAFBlockVars<T>& p) {
  auto s = spatial_attention(f, p.spatial);
  auto ch = channel_attention(f, p.channel);
  return add(s.calibrated, ch.calibrated);
}

}  // namespace baaf
