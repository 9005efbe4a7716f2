#pragma once

// Temporal adaptive decision loss and the mean-current cross-entropy baseline.
//
// For each sample and step t the output current O[t] gives a confidence
// lambda[t] = 1 - H(softmax(O[t])) / ln C. The per-step cross-entropies are
// combined with weights softmax_t(lambda[t] / temperature).

#include <string>
#include <vector>

#include "spikelat/autodiff.hpp"

namespace spikelat {

struct TadConfig {
  double temperature = 2.0;
  bool detach_weights = true;

  void validate() const {
    if (!(temperature > 0.0)) throw ContractError("loss.temperature must be positive");
  }
};

enum class LossKind { Tad, Vanilla };

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "tad") return LossKind::Tad;
  if (s == "vanilla") return LossKind::Vanilla;
  throw SpecError("unknown loss '" + s + "' (expected tad|vanilla)");
}

namespace detail {

inline double entropy_nats(std::span<const double> z) {
  double h = 0.0;
  for (double v : z)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace detail

// logits[N,C] -> lambda[N] in [0,1].
inline Tensor confidence(const Tensor& logits) {
  if (logits.rank() != 2 || logits.dim(1) < 2)
    throw ContractError("confidence expects [N,C] with C >= 2, got " + shape_str(logits.shape()));
  const Tensor z = softmax_rows(logits);
  const std::size_t n = z.dim(0), c = z.dim(1);
  const double hmax = std::log(static_cast<double>(c));
  Tensor lam({n});
  for (std::size_t i = 0; i < n; ++i) {
    const double h = detail::entropy_nats(z.data().subspan(i * c, c));
    lam[i] = std::clamp(1.0 - h / hmax, 0.0, 1.0);
  }
  return lam;
}

// lams[N,T] -> per-row softmax of lams / temperature.
inline Tensor temporal_weights(const Tensor& lams, const TadConfig& cfg) {
  cfg.validate();
  if (lams.rank() != 2) throw DimensionError("temporal_weights expects [N,T]");
  Tensor scaled = lams;
  scaled *= 1.0 / cfg.temperature;
  return softmax_rows(scaled);
}

namespace detail {

struct TadTerms {
  Tensor z;        // [T*N, C] softmax of each step
  Tensor lam;      // [N, T]
  Tensor weights;  // [N, T]
  Tensor ce;       // [N, T]
  Tensor per_sample;  // [N]
};

inline TadTerms tad_terms(const Tensor& currents, std::span<const int> labels, const TadConfig& cfg) {
  if (currents.rank() != 3) throw DimensionError("TAD loss expects O as [T,N,C]");
  const std::size_t T = currents.dim(0), N = currents.dim(1), C = currents.dim(2);
  if (labels.size() != N) throw DimensionError("TAD loss: label count mismatch");
  const Tensor flat = currents.reshaped({T * N, C});
  TadTerms r;
  r.z = softmax_rows(flat);
  const Tensor lam_flat = confidence(flat);
  const auto ce_flat = cross_entropy_rows(flat, [&] {
    std::vector<int> l(T * N);
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t n = 0; n < N; ++n) l[t * N + n] = labels[n];
    return l;
  }());
  r.lam = Tensor({N, T});
  r.ce = Tensor({N, T});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t n = 0; n < N; ++n) {
      r.lam.at(n, t) = lam_flat[t * N + n];
      r.ce.at(n, t) = ce_flat[t * N + n];
    }
  r.weights = temporal_weights(r.lam, cfg);
  r.per_sample = Tensor({N});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t t = 0; t < T; ++t) r.per_sample[n] += r.weights.at(n, t) * r.ce.at(n, t);
  return r;
}

}  // namespace detail

// Batch-mean TAD loss for O[T,N,C].
inline double tad_loss_value(const Tensor& currents, std::span<const int> labels, const TadConfig& cfg) {
  const auto terms = detail::tad_terms(currents, labels, cfg);
  return terms.per_sample.sum() / static_cast<double>(terms.per_sample.size());
}

inline Var tad_loss(Var currents, std::vector<int> labels, const TadConfig& cfg) {
  cfg.validate();
  auto terms = detail::tad_terms(currents.value(), labels, cfg);
  const std::size_t T = currents.value().dim(0), N = currents.value().dim(1),
                    C = currents.value().dim(2);
  const double loss = terms.per_sample.sum() / static_cast<double>(N);
  return currents.tape().record(
      OpKind::TadLoss, {currents}, Tensor::scalar(loss),
      [terms = std::move(terms), labels = std::move(labels), T, N, C, cfg](
          const Tensor& g, std::span<Tensor* const> pg) {
        const double k = g[0] / static_cast<double>(N);
        const double inv_log_c = 1.0 / std::log(static_cast<double>(C));
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t n = 0; n < N; ++n) {
            const std::size_t row = t * N + n;
            const double w = terms.weights.at(n, t);
            // d loss_n / d lambda[t] through the softmax over time
            const double dlam = cfg.detach_weights
                                    ? 0.0
                                    : w * (terms.ce.at(n, t) - terms.per_sample[n]) / cfg.temperature;
            double h = 0.0;
            if (dlam != 0.0) h = detail::entropy_nats(terms.z.data().subspan(row * C, C));
            for (std::size_t j = 0; j < C; ++j) {
              const double z = terms.z.at(row, j);
              double d = w * (z - (static_cast<int>(j) == labels[n] ? 1.0 : 0.0));
              if (dlam != 0.0 && z > 0.0) d += dlam * z * (std::log(z) + h) * inv_log_c;
              (*pg[0])[row * C + j] += k * d;
            }
          }
      });
}

// CE of the time-mean output current; O[T,N,C].
inline Var vanilla_loss(Var currents, std::vector<int> labels) {
  if (currents.value().rank() != 3) throw DimensionError("vanilla loss expects O as [T,N,C]");
  return cross_entropy(time_mean(currents, currents.value().dim(0)), std::move(labels));
}

inline double vanilla_loss_value(const Tensor& currents, std::span<const int> labels) {
  Tape tape;
  return vanilla_loss(tape.leaf(currents), std::vector<int>(labels.begin(), labels.end())).value().item();
}

}  // namespace spikelat
