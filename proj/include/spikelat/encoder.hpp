#pragma once

// Latency encoding: conv + batchnorm + sigmoid features, each feature value
// turned into a single spike whose time is earlier for larger values.
// The backward pass treats the encoder as the identity and sums the
// upstream gradient over the time axis.

#include <string>

#include "spikelat/autodiff.hpp"

namespace spikelat {

enum class EncodeMode { LatencyModule, Raw };

inline const char* to_string(EncodeMode m) { return m == EncodeMode::Raw ? "raw" : "le"; }

inline EncodeMode parse_encode_mode(const std::string& s) {
  if (s == "le") return EncodeMode::LatencyModule;
  if (s == "raw") return EncodeMode::Raw;
  throw SpecError("unknown encoder mode '" + s + "' (expected le|raw)");
}

struct EncoderConfig {
  std::size_t T = 4;
  std::size_t channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t pad = 1;
  EncodeMode mode = EncodeMode::LatencyModule;

  void validate() const {
    if (T < 1) throw ContractError("encoder T must be >= 1");
    if (mode == EncodeMode::LatencyModule && (channels == 0 || kernel == 0 || stride == 0))
      throw SpecError("encoder channels, kernel and stride must be positive");
  }
};

inline constexpr double kFeatureClampEps = 1e-12;

// Spike time on the grid {1..T} for a feature value in (0,1).
inline std::size_t spike_time(double x, std::size_t T) {
  if (T < 1) throw ContractError("spike_time needs T >= 1");
  const double xc = std::clamp(x, kFeatureClampEps, 1.0 - kFeatureClampEps);
  const double raw = std::ceil((1.0 - xc) * static_cast<double>(T));
  return static_cast<std::size_t>(std::clamp(raw, 1.0, static_cast<double>(T)));
}

struct EncodedInput {
  Tensor spikes;    // [T, C, H, W]
  Tensor features;  // [C, H, W]
};

namespace detail {

// features[B, ...] -> spikes[T*B, ...], time-major.
inline Tensor encode_block(const Tensor& features, std::size_t T) {
  if (features.rank() == 0) throw DimensionError("latency_encode needs a non-scalar input");
  Shape s = features.shape();
  s[0] *= T;
  Tensor spikes(s);
  const std::size_t block = features.size();
  for (std::size_t i = 0; i < block; ++i) {
    const std::size_t t = spike_time(features[i], T);
    spikes[(t - 1) * block + i] = 1.0;
  }
  return spikes;
}

inline Tensor sum_time_blocks(const Tensor& upstream, std::size_t T, Shape out_shape) {
  Tensor out(std::move(out_shape));
  const std::size_t block = out.size();
  if (upstream.size() != block * T)
    throw DimensionError("STE upstream " + shape_str(upstream.shape()) +
                         " does not match T blocks of " + shape_str(out.shape()));
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < block; ++i) out[i] += upstream[t * block + i];
  return out;
}

}  // namespace detail

// features[C,H,W] -> one spike per neuron on the T-step grid.
inline EncodedInput latency_encode(const Tensor& features, std::size_t T) {
  if (T < 1) throw ContractError("latency_encode needs T >= 1");
  Shape s{T};
  s.insert(s.end(), features.shape().begin(), features.shape().end());
  return {detail::encode_block(features, T).reshaped(s), features};
}

// upstream[T, ...] -> sum over t.
inline Tensor ste_backward(const Tensor& upstream) {
  if (upstream.rank() < 2) throw DimensionError("ste_backward expects [T, ...]");
  Shape s(upstream.shape().begin() + 1, upstream.shape().end());
  return detail::sum_time_blocks(upstream, upstream.dim(0), std::move(s));
}

// Graph op over a batch: features[N,C,H,W] -> spikes[T*N,C,H,W].
inline Var latency_encode(Var features, std::size_t T) {
  if (T < 1) throw ContractError("latency_encode needs T >= 1");
  Shape fs = features.value().shape();
  return features.tape().record(
      OpKind::LatencyEncode, {features}, detail::encode_block(features.value(), T),
      [T, fs](const Tensor& g, std::span<Tensor* const> pg) {
        *pg[0] += detail::sum_time_blocks(g, T, fs);
      });
}

// Sigmoid(BatchNorm(Conv(image))) for image[N,Cin,H,W].
inline Var extract_features(Var image, Var kernel, Var gamma, Var beta, BatchNormStats& stats,
                            NormMode mode, const EncoderConfig& cfg) {
  if (!image.value().all_finite()) throw NumericError("extract_features: non-finite image");
  Var c = conv2d(image, kernel, cfg.stride, cfg.pad);
  Var b = batchnorm2d(c, gamma, beta, stats, mode);
  return sigmoid(b);
}

}  // namespace spikelat
