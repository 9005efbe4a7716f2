#pragma once

// Declarative desk-scale SNNs and the T-step forward unroll.
//
// Stateless layers (conv, batchnorm, pooling, linear) are evaluated once on a
// time-major batch [T*N, ...]; LIF layers run their recurrence across the T
// blocks. For a feed-forward stack this is the same computation as stepping
// every layer t = 1..T, with batch statistics pooled over time and batch.

#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "spikelat/autodiff.hpp"
#include "spikelat/encoder.hpp"
#include "spikelat/lif.hpp"

namespace spikelat {

enum class LayerKind { Conv, Linear, BatchNorm, Lif, PoolAvg, Flatten, SewResidual };

struct LayerSpec {
  LayerKind kind = LayerKind::Linear;
  std::size_t size = 0;  // conv output channels / linear output features
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  std::size_t window = 2;  // pool

  static LayerSpec conv(std::size_t out, std::size_t k = 3, std::size_t stride = 1, std::size_t pad = 1) {
    return {LayerKind::Conv, out, k, stride, pad, 2};
  }
  static LayerSpec linear(std::size_t out) { return {LayerKind::Linear, out, 0, 0, 0, 0}; }
  static LayerSpec batchnorm() { return {LayerKind::BatchNorm, 0, 0, 0, 0, 0}; }
  static LayerSpec lif() { return {LayerKind::Lif, 0, 0, 0, 0, 0}; }
  static LayerSpec pool(std::size_t w = 2) { return {LayerKind::PoolAvg, 0, 0, 0, 0, w}; }
  static LayerSpec flatten() { return {LayerKind::Flatten, 0, 0, 0, 0, 0}; }
  static LayerSpec sew(std::size_t k = 3) { return {LayerKind::SewResidual, 0, k, 1, k / 2, 0}; }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Compact text form used by the config file, e.g.
// "conv:16:3:1:1,bn,lif,pool:2,flatten,linear:10".
inline std::string format_layers(const std::vector<LayerSpec>& layers) {
  std::ostringstream os;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) os << ',';
    const LayerSpec& l = layers[i];
    switch (l.kind) {
      case LayerKind::Conv:
        os << "conv:" << l.size << ':' << l.kernel << ':' << l.stride << ':' << l.pad;
        break;
      case LayerKind::Linear: os << "linear:" << l.size; break;
      case LayerKind::BatchNorm: os << "bn"; break;
      case LayerKind::Lif: os << "lif"; break;
      case LayerKind::PoolAvg: os << "pool:" << l.window; break;
      case LayerKind::Flatten: os << "flatten"; break;
      case LayerKind::SewResidual: os << "sew:" << l.kernel; break;
    }
  }
  return os.str();
}

inline std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    std::vector<std::string> f;
    std::stringstream ts(tok);
    std::string part;
    while (std::getline(ts, part, ':')) f.push_back(part);
    if (f.empty() || f[0].empty()) throw SpecError("empty layer token in '" + text + "'");
    auto num = [&](std::size_t i, std::size_t dflt) -> std::size_t {
      if (i >= f.size()) return dflt;
      try {
        std::size_t pos = 0;
        const unsigned long v = std::stoul(f[i], &pos);
        if (pos != f[i].size()) throw SpecError("");
        return v;
      } catch (const std::exception&) {
        throw SpecError("bad number '" + f[i] + "' in layer token '" + tok + "'");
      }
    };
    const std::string& k = f[0];
    if (k == "conv") {
      if (f.size() < 2) throw SpecError("conv layer needs output channels: '" + tok + "'");
      out.push_back(LayerSpec::conv(num(1, 0), num(2, 3), num(3, 1), num(4, num(2, 3) / 2)));
    } else if (k == "linear") {
      if (f.size() < 2) throw SpecError("linear layer needs output size: '" + tok + "'");
      out.push_back(LayerSpec::linear(num(1, 0)));
    } else if (k == "bn") {
      out.push_back(LayerSpec::batchnorm());
    } else if (k == "lif") {
      out.push_back(LayerSpec::lif());
    } else if (k == "pool") {
      out.push_back(LayerSpec::pool(num(1, 2)));
    } else if (k == "flatten") {
      out.push_back(LayerSpec::flatten());
    } else if (k == "sew") {
      out.push_back(LayerSpec::sew(num(1, 3)));
    } else {
      throw SpecError("unknown layer kind '" + k + "'");
    }
  }
  return out;
}

struct ModelSpec {
  Shape input{1, 28, 28};  // C, H, W
  EncoderConfig encoder;
  std::vector<LayerSpec> layers;
  LifConfig lif;
  LifConfig output_lif;
  std::size_t num_classes = 10;

  std::size_t T() const { return encoder.T; }
};

struct PresetOptions {
  std::size_t hidden = 256;
  std::size_t width1 = 16;
  std::size_t width2 = 32;
};

inline std::vector<LayerSpec> preset_layers(const std::string& name, std::size_t num_classes,
                                            const PresetOptions& o = {}) {
  using L = LayerSpec;
  if (name == "mlp-mini")
    return {L::flatten(), L::linear(o.hidden), L::lif(), L::linear(num_classes)};
  if (name == "vgg-mini")
    return {L::conv(o.width1), L::batchnorm(), L::lif(), L::pool(2),
            L::conv(o.width2), L::batchnorm(), L::lif(), L::pool(2),
            L::flatten(),      L::linear(num_classes)};
  if (name == "sew-mini")
    return {L::conv(o.width1), L::batchnorm(), L::lif(),       L::sew(3),    L::pool(2),
            L::conv(o.width2), L::batchnorm(), L::lif(),       L::pool(2),   L::flatten(),
            L::linear(num_classes)};
  throw SpecError("unknown model preset '" + name + "' (expected mlp-mini|vgg-mini|sew-mini)");
}

struct Parameter {
  std::string name;
  Tensor value;
};

struct NamedStats {
  std::string name;
  BatchNormStats stats;
};

namespace detail {

// Per-sample activation shape as it flows through the stack.
struct FlowShape {
  Shape dims;  // {C,H,W} or {F}
  bool spikes = false;
};

inline std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  if (k > in + 2 * pad)
    throw SpecError("kernel " + std::to_string(k) + " larger than padded extent " + std::to_string(in));
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace detail

// Walks the layer list and returns the shape after each layer; throws
// SpecError on incompatible consecutive layers.
inline std::vector<detail::FlowShape> infer_shapes(const ModelSpec& spec) {
  spec.encoder.validate();
  spec.lif.validate();
  spec.output_lif.validate();
  if (spec.num_classes < 2) throw SpecError("num_classes must be >= 2");
  if (spec.input.size() != 3 || shape_size(spec.input) == 0)
    throw SpecError("input shape must be C,H,W");
  if (spec.layers.empty() || spec.layers.back().kind != LayerKind::Linear)
    throw SpecError("network must end with a linear readout");
  if (spec.layers.back().size != spec.num_classes)
    throw SpecError("readout size " + std::to_string(spec.layers.back().size) +
                    " != num_classes " + std::to_string(spec.num_classes));

  detail::FlowShape cur;
  const auto& e = spec.encoder;
  if (e.mode == EncodeMode::LatencyModule)
    cur.dims = {e.channels, detail::conv_out(spec.input[1], e.kernel, e.stride, e.pad),
                detail::conv_out(spec.input[2], e.kernel, e.stride, e.pad)};
  else
    cur.dims = spec.input;
  cur.spikes = true;

  std::vector<detail::FlowShape> out;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + ": ";
    const bool spatial = cur.dims.size() == 3;
    switch (l.kind) {
      case LayerKind::Conv:
        if (!spatial) throw SpecError(where + "conv needs a C,H,W input");
        if (l.size == 0 || l.stride == 0) throw SpecError(where + "conv needs channels and stride");
        cur.dims = {l.size, detail::conv_out(cur.dims[1], l.kernel, l.stride, l.pad),
                    detail::conv_out(cur.dims[2], l.kernel, l.stride, l.pad)};
        cur.spikes = false;
        break;
      case LayerKind::BatchNorm:
        if (!spatial) throw SpecError(where + "batchnorm needs a C,H,W input");
        cur.spikes = false;
        break;
      case LayerKind::Lif:
        if (i + 1 == spec.layers.size()) throw SpecError(where + "LIF after the readout");
        cur.spikes = true;
        break;
      case LayerKind::PoolAvg:
        if (!spatial || l.window == 0 || l.window > cur.dims[1] || l.window > cur.dims[2])
          throw SpecError(where + "pool window does not fit");
        cur.dims = {cur.dims[0], cur.dims[1] / l.window, cur.dims[2] / l.window};
        break;
      case LayerKind::Flatten:
        cur.dims = {shape_size(cur.dims)};
        break;
      case LayerKind::Linear:
        if (cur.dims.size() != 1) throw SpecError(where + "linear needs a flat input (add flatten)");
        if (l.size == 0) throw SpecError(where + "linear needs an output size");
        cur.dims = {l.size};
        cur.spikes = false;
        break;
      case LayerKind::SewResidual:
        if (!spatial || !cur.spikes) throw SpecError(where + "sew block needs a spiking C,H,W input");
        if (l.kernel % 2 == 0) throw SpecError(where + "sew kernel must be odd to keep the shape");
        cur.spikes = false;  // values in {0,1,2}
        break;
    }
    out.push_back(cur);
  }
  return out;
}

class Model {
 public:
  Model() = default;
  explicit Model(ModelSpec spec) : spec_(std::move(spec)) {}

  const ModelSpec& spec() const { return spec_; }

  std::vector<Parameter>& params() { return params_; }
  const std::vector<Parameter>& params() const { return params_; }
  std::vector<NamedStats>& buffers() { return buffers_; }
  const std::vector<NamedStats>& buffers() const { return buffers_; }

  Tensor& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.value;
    throw ContractError("no parameter named '" + name + "'");
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<Model*>(this)->param(name);
  }
  BatchNormStats& stats(const std::string& name) {
    for (auto& b : buffers_)
      if (b.name == name) return b.stats;
    throw ContractError("no batchnorm buffer named '" + name + "'");
  }

  void add_param(std::string name, Tensor value) {
    for (const auto& p : params_)
      if (p.name == name) throw SpecError("duplicate parameter name '" + name + "'");
    params_.push_back({std::move(name), std::move(value)});
  }
  void add_buffer(std::string name, std::size_t channels) {
    buffers_.push_back({std::move(name), {Tensor({channels}, 0.0), Tensor({channels}, 1.0)}});
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  ModelSpec spec_;
  std::vector<Parameter> params_;
  std::vector<NamedStats> buffers_;
};

inline std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i); }

// Kaiming-style fan-in init: weights ~ N(0, 2/fan_in), biases 0, gamma 1, beta 0.
inline Model build_model(const ModelSpec& spec, std::uint64_t seed) {
  const auto shapes = infer_shapes(spec);
  Model m(spec);
  std::mt19937_64 rng(seed);
  auto kaiming = [&rng](Shape s, std::size_t fan_in) {
    Tensor t(std::move(s));
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (double& v : t.data()) v = dist(rng);
    return t;
  };
  auto add_bn = [&](const std::string& prefix, std::size_t c) {
    m.add_param(prefix + ".gamma", Tensor({c}, 1.0));
    m.add_param(prefix + ".beta", Tensor({c}, 0.0));
    m.add_buffer(prefix, c);
  };

  const auto& e = spec.encoder;
  Shape prev = spec.input;
  if (e.mode == EncodeMode::LatencyModule) {
    const std::size_t cin = spec.input[0];
    m.add_param("encoder.conv.weight", kaiming({e.channels, cin, e.kernel, e.kernel}, cin * e.kernel * e.kernel));
    add_bn("encoder.bn", e.channels);
    prev = {e.channels, 0, 0};
  }
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string p = layer_prefix(i);
    const std::size_t in_c = prev[0];
    switch (l.kind) {
      case LayerKind::Conv:
        m.add_param(p + ".conv.weight", kaiming({l.size, in_c, l.kernel, l.kernel}, in_c * l.kernel * l.kernel));
        break;
      case LayerKind::BatchNorm: add_bn(p + ".bn", in_c); break;
      case LayerKind::Linear:
        m.add_param(p + ".linear.weight", kaiming({prev[0], l.size}, prev[0]));
        m.add_param(p + ".linear.bias", Tensor({l.size}, 0.0));
        break;
      case LayerKind::SewResidual:
        m.add_param(p + ".sew.conv.weight", kaiming({in_c, in_c, l.kernel, l.kernel}, in_c * l.kernel * l.kernel));
        add_bn(p + ".sew.bn", in_c);
        break;
      default: break;
    }
    prev = shapes[i].dims;
  }
  return m;
}

// Element-wise ADD of two spike trains; values land in {0,1,2}.
inline Var sew_residual(Var main, Var shortcut) {
  if (main.value().shape() != shortcut.value().shape())
    throw DimensionError("sew_residual: shape mismatch " + shape_str(main.value().shape()) + " vs " +
                         shape_str(shortcut.value().shape()));
  return add(main, shortcut);
}

struct SpikeLayerStats {
  std::string name;
  double spikes = 0.0;
  double slots = 0.0;  // neurons * T * N
};

struct WeightLayerStats {
  std::string name;
  std::uint64_t flops = 0;          // MACs for one sample at one timestep
  std::size_t executions = 1;       // per sample: 1 for the encoder conv, T otherwise
  double input_activity = 0.0;      // sum of input values over T*N
  double input_slots = 0.0;         // input entries over T*N
};

struct ForwardRecord {
  std::size_t T = 0;
  std::size_t batch = 0;
  Var output_currents;               // [T, N, C], on the tape
  Tensor output_spikes;              // [T, N, C]
  Tensor output_pre_reset;           // [T, N, C]
  std::vector<SpikeLayerStats> spike_layers;  // encoder, hidden LIFs, output
  std::vector<WeightLayerStats> weight_layers;
  std::vector<Tensor> spike_maps;    // per spike layer, [T*N, ...]; filled on request
  std::map<std::string, Var> param_vars;
};

struct ForwardOptions {
  NormMode mode = NormMode::Train;
  bool track_grads = true;
  bool keep_spike_maps = false;
};

namespace detail {

inline void note_spikes(ForwardRecord& r, const std::string& name, const Tensor& s, bool keep) {
  r.spike_layers.push_back({name, s.sum(), static_cast<double>(s.size())});
  if (keep) r.spike_maps.push_back(s);
}

inline void note_weight_layer(ForwardRecord& r, std::string name, std::uint64_t flops,
                              std::size_t executions, const Tensor& input) {
  r.weight_layers.push_back(
      {std::move(name), flops, executions, input.sum(), static_cast<double>(input.size())});
}

}  // namespace detail

// batch[N,Cin,H,W] in [0,1].
inline ForwardRecord forward_unroll(Model& model, const Tensor& batch, Tape& tape,
                                    const ForwardOptions& opt = {}) {
  const ModelSpec& spec = model.spec();
  if (batch.rank() != 4 || Shape(batch.shape().begin() + 1, batch.shape().end()) != spec.input)
    throw DimensionError("forward_unroll: batch " + shape_str(batch.shape()) +
                         " does not match model input " + shape_str(spec.input));
  const std::size_t T = spec.T(), N = batch.dim(0);
  ForwardRecord rec;
  rec.T = T;
  rec.batch = N;
  auto P = [&](const std::string& name) -> Var {
    auto it = rec.param_vars.find(name);
    if (it != rec.param_vars.end()) return it->second;
    Var v = tape.leaf(model.param(name), opt.track_grads);
    rec.param_vars.emplace(name, v);
    return v;
  };

  Var x = tape.leaf(batch);
  Var cur;
  const auto& e = spec.encoder;
  if (e.mode == EncodeMode::LatencyModule) {
    Var feats = extract_features(x, P("encoder.conv.weight"), P("encoder.bn.gamma"),
                                 P("encoder.bn.beta"), model.stats("encoder.bn"), opt.mode, e);
    detail::note_weight_layer(rec, "encoder.conv",
                              static_cast<std::uint64_t>(feats.value().size() / N) * spec.input[0] *
                                  e.kernel * e.kernel,
                              1, batch);
    cur = latency_encode(feats, T);
  } else {
    cur = latency_encode(x, T);
  }
  detail::note_spikes(rec, "encoder", cur.value(), opt.keep_spike_maps);

  auto per_sample = [&](const Var& v) { return v.value().size() / (T * N); };

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string p = layer_prefix(i);
    switch (l.kind) {
      case LayerKind::Conv: {
        Var out = conv2d(cur, P(p + ".conv.weight"), l.stride, l.pad);
        const Shape& ks = out.value().shape();
        detail::note_weight_layer(rec, p + ".conv",
                                  static_cast<std::uint64_t>(ks[2] * ks[3]) * cur.value().dim(1) *
                                      ks[1] * l.kernel * l.kernel,
                                  T, cur.value());
        cur = out;
        break;
      }
      case LayerKind::BatchNorm:
        cur = batchnorm2d(cur, P(p + ".bn.gamma"), P(p + ".bn.beta"), model.stats(p + ".bn"), opt.mode);
        break;
      case LayerKind::Lif:
        cur = lif(cur, T, spec.lif);
        detail::note_spikes(rec, p + ".lif", cur.value(), opt.keep_spike_maps);
        break;
      case LayerKind::PoolAvg: cur = avgpool2d(cur, l.window); break;
      case LayerKind::Flatten: cur = reshape(cur, {T * N, per_sample(cur)}); break;
      case LayerKind::Linear: {
        const std::uint64_t in = per_sample(cur);
        detail::note_weight_layer(rec, p + ".linear", in * l.size, T, cur.value());
        cur = linear(cur, P(p + ".linear.weight"), P(p + ".linear.bias"));
        break;
      }
      case LayerKind::SewResidual: {
        Var c = conv2d(cur, P(p + ".sew.conv.weight"), l.stride, l.pad);
        const Shape& ks = c.value().shape();
        detail::note_weight_layer(rec, p + ".sew.conv",
                                  static_cast<std::uint64_t>(ks[2] * ks[3]) * cur.value().dim(1) *
                                      ks[1] * l.kernel * l.kernel,
                                  T, cur.value());
        Var b = batchnorm2d(c, P(p + ".sew.bn.gamma"), P(p + ".sew.bn.beta"),
                            model.stats(p + ".sew.bn"), opt.mode);
        Var s = lif(b, T, spec.lif);
        detail::note_spikes(rec, p + ".sew.lif", s.value(), opt.keep_spike_maps);
        cur = sew_residual(s, cur);
        break;
      }
    }
  }

  const std::size_t C = spec.num_classes;
  LifTrace out_trace;
  lif(cur, T, spec.output_lif, &out_trace);
  detail::note_spikes(rec, "output", out_trace.spikes, opt.keep_spike_maps);
  rec.output_spikes = out_trace.spikes.reshaped({T, N, C});
  rec.output_pre_reset = out_trace.pre_reset_potentials.reshaped({T, N, C});
  rec.output_currents = reshape(cur, {T, N, C});
  return rec;
}

}  // namespace spikelat
