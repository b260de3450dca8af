#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "baaf/attention.hpp"
#include "baaf/ops.hpp"
#include "baaf/parameter_store.hpp"
#include "json.hpp"

namespace baaf {

enum class Variant { unet9, deep15, deep15_pham, deep15_baaf };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::unet9: return "unet9";
    case Variant::deep15: return "deep15";
    case Variant::deep15_pham: return "deep15_pham";
    case Variant::deep15_baaf: return "deep15_baaf";
  }
  return "unknown";
}

inline Variant parse_variant(const std::string& s) {
  for (Variant v : {Variant::unet9, Variant::deep15, Variant::deep15_pham, Variant::deep15_baaf})
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + s + "' (expected unet9, deep15, deep15_pham, deep15_baaf)");
}

inline bool has_attention(Variant v) { return v == Variant::deep15_pham || v == Variant::deep15_baaf; }

inline std::vector<std::size_t> default_filters(Variant v) {
  if (v == Variant::unet9) return {64, 128, 256, 512, 1024, 512, 256, 128, 64};
  return {64, 128, 128, 256, 256, 512, 512, 1024, 512, 512, 256, 256, 128, 128, 64};
}

inline std::size_t expected_depth(Variant v) { return v == Variant::unet9 ? 9 : 15; }

struct NetworkSpec {
  Variant variant = Variant::deep15_baaf;
  std::vector<std::size_t> filters = default_filters(Variant::deep15_baaf);
  std::size_t divisor = 8;
  std::size_t height = 128, width = 128;
  std::size_t in_channels = 1, out_channels = 1;

  static NetworkSpec make(Variant v, std::size_t divisor = 8, std::size_t size = 128) {
    NetworkSpec s;
    s.variant = v;
    s.filters = default_filters(v);
    s.divisor = divisor;
    s.height = s.width = size;
    return s;
  }

  std::size_t depth() const { return filters.size(); }
  std::size_t encoder_stages() const { return (filters.size() + 1) / 2; }
  std::size_t pools() const { return encoder_stages() - 1; }

  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w;
    for (auto f : filters) w.push_back(f / divisor);
    return w;
  }

  void validate() const {
    if (filters.size() != expected_depth(variant))
      throw std::invalid_argument(to_string(variant) + " needs " + std::to_string(expected_depth(variant)) +
                                  " stage widths, got " + std::to_string(filters.size()));
    if (divisor == 0) throw std::invalid_argument("divisor must be positive");
    for (auto f : filters) {
      if (f % divisor != 0)
        throw std::invalid_argument("divisor " + std::to_string(divisor) + " does not divide width " + std::to_string(f));
      if (f / divisor < 4)
        throw std::invalid_argument("scaled width " + std::to_string(f / divisor) + " is below 4");
    }
    const std::size_t m = std::size_t{1} << pools();
    if (height == 0 || width == 0 || height % m != 0 || width % m != 0)
      throw std::invalid_argument("input size " + std::to_string(height) + "x" + std::to_string(width) +
                                  " is not divisible by " + std::to_string(m) + " for " + to_string(variant));
    if (in_channels != 1 || out_channels != 1) throw std::invalid_argument("only 1 input and 1 output channel supported");
  }
};

inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = {{"variant", to_string(s.variant)},
       {"filters", s.filters},
       {"divisor", s.divisor},
       {"input_size", {s.height, s.width}}};
}

inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  s.variant = parse_variant(j.at("variant").get<std::string>());
  s.filters = j.contains("filters") ? j.at("filters").get<std::vector<std::size_t>>() : default_filters(s.variant);
  s.divisor = j.value("divisor", std::size_t{8});
  if (j.contains("input_size")) {
    const auto& sz = j.at("input_size");
    if (sz.is_number()) {
      s.height = s.width = sz.get<std::size_t>();
    } else {
      s.height = sz.at(0).get<std::size_t>();
      s.width = sz.at(1).get<std::size_t>();
    }
  }
}

enum class LayerKind { encoder_block, pool, upsample, skip_concat, decoder_block, attention, projection, head };

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::encoder_block: return "encoder_block";
    case LayerKind::pool: return "pool";
    case LayerKind::upsample: return "upsample";
    case LayerKind::skip_concat: return "skip_concat";
    case LayerKind::decoder_block: return "decoder_block";
    case LayerKind::attention: return "attention";
    case LayerKind::projection: return "projection";
    case LayerKind::head: return "head";
  }
  return "?";
}

struct LayerDesc {
  LayerKind kind;
  std::string name;  // parameter prefix, e.g. "stage03"
  std::size_t stage = 0;
  std::size_t in_channels = 0, out_channels = 0;
  std::size_t height = 0, width = 0;  // output spatial size
  int skip_from = -1;                 // encoder stage joined by skip_concat

  friend bool operator==(const LayerDesc&, const LayerDesc&) = default;
};

inline std::string stage_name(std::size_t s) {
  std::string n = std::to_string(s);
  return "stage" + std::string(n.size() < 2 ? 2 - n.size() : 0, '0') + n;
}

/// Ordered layer list: encoder stages separated by pools, then decoder stages
/// each fed by upsample + skip concat, then the 1x1 sigmoid head.
inline std::vector<LayerDesc> plan_wiring(const NetworkSpec& spec) {
  spec.validate();
  const auto w = spec.widths();
  const std::size_t depth = w.size(), enc = spec.encoder_stages();
  std::vector<LayerDesc> out;
  std::vector<std::pair<std::size_t, std::size_t>> enc_size(enc);
  std::size_t h = spec.height, wd = spec.width, ch = spec.in_channels;
  for (std::size_t s = 0; s < enc; ++s) {
    if (s > 0) {
      h /= 2;
      wd /= 2;
      out.push_back({LayerKind::pool, stage_name(s), s, ch, ch, h, wd});
    }
    out.push_back({LayerKind::encoder_block, stage_name(s), s, ch, w[s], h, wd});
    ch = w[s];
    enc_size[s] = {h, wd};
  }
  for (std::size_t s = enc; s < depth; ++s) {
    h *= 2;
    wd *= 2;
    out.push_back({LayerKind::upsample, stage_name(s), s, ch, w[s], h, wd});
    const std::size_t skip = depth - 1 - s;
    if (enc_size[skip] != std::make_pair(h, wd))
      throw std::logic_error("skip connection joins unequal spatial sizes at " + stage_name(s));
    out.push_back({LayerKind::skip_concat, stage_name(s), s, w[s], w[skip] + w[s], h, wd, static_cast<int>(skip)});
    out.push_back({LayerKind::decoder_block, stage_name(s), s, w[skip] + w[s], w[s], h, wd});
    if (has_attention(spec.variant)) {
      const std::size_t att_out = spec.variant == Variant::deep15_baaf ? 2 * w[s] : w[s];
      out.push_back({LayerKind::attention, stage_name(s), s, w[s], att_out, h, wd});
      if (spec.variant == Variant::deep15_baaf)
        out.push_back({LayerKind::projection, stage_name(s), s, att_out, w[s], h, wd});
    }
    ch = w[s];
  }
  out.push_back({LayerKind::head, "head", depth, ch, spec.out_channels, h, wd});
  if (h != spec.height || wd != spec.width) throw std::logic_error("decoder does not return to input size");
  return out;
}

template <typename T = float>
struct Model {
  NetworkSpec spec;
  ParameterStore<T> params;
  std::vector<LayerDesc> wiring;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t seed, const std::string& tag) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : tag) h = (h ^ c) * 1099511628211ULL;
  return splitmix64(seed ^ splitmix64(h));
}

template <typename T>
void add_conv(ParameterStore<T>& store, const std::string& prefix, std::size_t cin, std::size_t cout, std::size_t k,
              std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, prefix));
  store.add(prefix + ".weight", he_uniform<T>({cout, cin, k, k}, cin * k * k, rng));
  store.add(prefix + ".bias", Tensor<T>(Shape{cout}));
}

template <typename T>
void add_bn(ParameterStore<T>& store, const std::string& prefix, std::size_t c) {
  store.add(prefix + ".gamma", Tensor<T>(Shape{c}, T(1)));
  store.add(prefix + ".beta", Tensor<T>(Shape{c}));
  store.add(prefix + ".running_mean", Tensor<T>(Shape{c}), false);
  store.add(prefix + ".running_var", Tensor<T>(Shape{c}, T(1)), false);
}

inline std::size_t conv_params(std::size_t cin, std::size_t cout, std::size_t k) { return cout * cin * k * k + cout; }

}  // namespace detail

template <typename T = float>
Model<T> build(const NetworkSpec& spec, std::uint64_t seed) {
  Model<T> m;
  m.spec = spec;
  m.wiring = plan_wiring(spec);
  auto& st = m.params;
  for (const auto& l : m.wiring) {
    switch (l.kind) {
      case LayerKind::encoder_block:
      case LayerKind::decoder_block:
        detail::add_conv(st, l.name + ".conv1", l.in_channels, l.out_channels, 3, seed);
        detail::add_bn(st, l.name + ".bn1", l.out_channels);
        detail::add_conv(st, l.name + ".conv2", l.out_channels, l.out_channels, 3, seed);
        detail::add_bn(st, l.name + ".bn2", l.out_channels);
        break;
      case LayerKind::upsample:
        detail::add_conv(st, l.name + ".up", l.in_channels, l.out_channels, 3, seed);
        break;
      case LayerKind::attention:
        add_to_store(st, l.name + ".att",
                     init_baaf<T>(l.in_channels, kDefaultReduction, detail::derive_seed(seed, l.name + ".att")),
                     spec.variant == Variant::deep15_baaf);
        break;
      case LayerKind::projection:
        detail::add_conv(st, l.name + ".proj", l.in_channels, l.out_channels, 1, seed);
        break;
      case LayerKind::head:
        detail::add_conv(st, "head", l.in_channels, l.out_channels, 1, seed);
        break;
      default:
        break;
    }
  }
  return m;
}

template <typename T>
std::size_t count_parameters(const ParameterStore<T>& store) {
  return store.trainable_count();
}

template <typename T>
std::size_t count_parameters(const Model<T>& m) {
  return m.params.trainable_count();
}

/// Trainable parameter count computed from the wiring alone, without
/// allocating weights (usable for full-scale widths).
inline std::size_t count_parameters(const NetworkSpec& spec) {
  std::size_t n = 0;
  const bool acm = spec.variant == Variant::deep15_baaf;
  for (const auto& l : plan_wiring(spec)) {
    const std::size_t ci = l.in_channels, co = l.out_channels;
    switch (l.kind) {
      case LayerKind::encoder_block:
      case LayerKind::decoder_block:
        n += detail::conv_params(ci, co, 3) + detail::conv_params(co, co, 3) + 4 * co;
        break;
      case LayerKind::upsample: n += detail::conv_params(ci, co, 3); break;
      case LayerKind::attention: {
        const std::size_t hid = channel_hidden_dim(ci), d = acm_squeezed_dim(ci);
        n += ci + 1 + 2 * hid * ci;
        if (acm) n += d * ci + 2 * ci * d;
        break;
      }
      case LayerKind::projection:
      case LayerKind::head: n += detail::conv_params(ci, co, 1); break;
      default: break;
    }
  }
  return n;
}

/// Per-layer gate values, averaged over the batch.
struct GateStats {
  std::string layer;
  std::vector<double> phi, gamma, beta;  // per channel; phi/gamma empty without ACM
  double alpha_mean = 0;
};

namespace detail {

template <typename T>
Var<T> conv_layer(Tape<T>& tape, const ParameterStore<T>& st, const std::string& prefix, Var<T> x) {
  return conv2d(x, tape.parameter(st, prefix + ".weight"),
                std::optional<Var<T>>(tape.parameter(st, prefix + ".bias")));
}

template <typename T>
Var<T> bn_layer(Tape<T>& tape, ParameterStore<T>& st, const std::string& prefix, Var<T> x, BnMode mode) {
  return batchnorm(x, tape.parameter(st, prefix + ".gamma"), tape.parameter(st, prefix + ".beta"),
                   st.value(prefix + ".running_mean"), st.value(prefix + ".running_var"), mode);
}

template <typename T>
Var<T> double_conv(Tape<T>& tape, ParameterStore<T>& st, const std::string& name, Var<T> x, BnMode mode) {
  x = leaky_relu(bn_layer(tape, st, name + ".bn1", conv_layer(tape, st, name + ".conv1", x), mode));
  return leaky_relu(bn_layer(tape, st, name + ".bn2", conv_layer(tape, st, name + ".conv2", x), mode));
}

inline std::vector<double> batch_mean_rows(const Tensor<float>& t) {
  const std::size_t n = t.dim(0), c = t.size() / n;
  std::vector<double> out(c, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < c; ++i) out[i] += t[b * c + i] / static_cast<double>(n);
  return out;
}

template <typename T>
std::vector<double> batch_mean_rows(const Tensor<T>& t) {
  return batch_mean_rows(t.template cast<float>());
}

}  // namespace detail

/// Probability map N x 1 x H x W. Train mode uses batch statistics and
/// updates the running BN statistics stored in `model.params`.
template <typename T>
Var<T> forward(Tape<T>& tape, Model<T>& model, const Tensor<T>& batch, BnMode mode,
               std::vector<GateStats>* gates = nullptr) {
  const auto& spec = model.spec;
  if (batch.rank() != 4 || batch.dim(1) != spec.in_channels || batch.dim(2) != spec.height ||
      batch.dim(3) != spec.width)
    throw ShapeError("network expects N x " + std::to_string(spec.in_channels) + " x " + std::to_string(spec.height) +
                     " x " + std::to_string(spec.width) + " input, got " + shape_str(batch.shape()));
  auto& st = model.params;
  Var<T> x = tape.constant(batch);
  std::vector<Var<T>> skips;
  for (const auto& l : model.wiring) {
    switch (l.kind) {
      case LayerKind::pool: x = maxpool2(x); break;
      case LayerKind::encoder_block:
        x = detail::double_conv(tape, st, l.name, x, mode);
        skips.push_back(x);
        break;
      case LayerKind::upsample: x = detail::conv_layer(tape, st, l.name + ".up", upsample_nearest2(x)); break;
      case LayerKind::skip_concat: x = concat_channels(skips.at(static_cast<std::size_t>(l.skip_from)), x); break;
      case LayerKind::decoder_block: x = detail::double_conv(tape, st, l.name, x, mode); break;
      case LayerKind::attention: {
        const bool acm = spec.variant == Variant::deep15_baaf;
        auto vars = bind_block(tape, st, l.name + ".att", acm);
        if (acm) {
          auto o = baaf_forward_gates(x, vars);
          if (gates) {
            const auto& a = o.alpha.value();
            gates->push_back({l.name, detail::batch_mean_rows(o.phi.value()), detail::batch_mean_rows(o.gamma.value()),
                              detail::batch_mean_rows(o.beta.value()), static_cast<double>(a.sum()) / a.size()});
          }
          x = o.output;
        } else {
          auto s = spatial_attention(x, vars.spatial);
          auto c = channel_attention(x, vars.channel);
          if (gates) {
            const auto& a = s.alpha.value();
            gates->push_back({l.name, {}, {}, detail::batch_mean_rows(c.beta.value()),
                              static_cast<double>(a.sum()) / a.size()});
          }
          x = add(s.calibrated, c.calibrated);
        }
        break;
      }
      case LayerKind::projection: x = detail::conv_layer(tape, st, l.name + ".proj", x); break;
      case LayerKind::head: x = sigmoid(detail::conv_layer(tape, st, "head", x)); break;
    }
  }
  return x;
}

/// Eval-mode forward without recording backward rules.
template <typename T>
Tensor<T> predict(Model<T>& model, const Tensor<T>& batch, std::vector<GateStats>* gates = nullptr) {
  Tape<T> tape(false);
  return forward(tape, model, batch, BnMode::eval, gates).value();
}

}  // namespace baaf
