#pragma once

// First-spike decoding of the output layer. The earliest timestep with any
// output spike decides; simultaneous spikers are separated by their
// pre-reset membrane potential at that step.

#include <optional>
#include <string>
#include <vector>

#include "spikelat/network.hpp"

namespace spikelat {

enum class TieBreak { Spikers, All };

inline TieBreak parse_tiebreak(const std::string& s) {
  if (s == "spikers") return TieBreak::Spikers;
  if (s == "all") return TieBreak::All;
  throw SpecError("unknown tie-break '" + s + "' (expected spikers|all)");
}

enum class DecodeMode { Latency, Rate };

inline DecodeMode parse_decode_mode(const std::string& s) {
  if (s == "latency") return DecodeMode::Latency;
  if (s == "rate") return DecodeMode::Rate;
  throw SpecError("unknown decode mode '" + s + "' (expected latency|rate)");
}

struct Decision {
  int predicted_class = 0;
  std::size_t exit_time = 0;  // 1-based
  bool tie_broken = false;
  bool no_spike_fallback = false;
  bool exact_tie = false;  // equal potentials among the candidates; lowest index won

  friend bool operator==(const Decision&, const Decision&) = default;
};

// spikes[T,C] -> smallest 1-based t with any spike.
inline std::optional<std::size_t> first_spike_time(const Tensor& spikes) {
  if (spikes.rank() != 2) throw DimensionError("first_spike_time expects [T,C]");
  for (std::size_t t = 0; t < spikes.dim(0); ++t)
    for (std::size_t k = 0; k < spikes.dim(1); ++k)
      if (spikes.at(t, k) > 0.0) return t + 1;
  return std::nullopt;
}

// spikes[T,C], potentials[T,C] (pre-reset).
inline Decision decide(const Tensor& spikes, const Tensor& potentials, TieBreak tb = TieBreak::Spikers) {
  spikes.require_same(potentials, "decide");
  const std::size_t T = spikes.dim(0), C = spikes.dim(1);
  Decision d;
  const auto first = first_spike_time(spikes);
  std::size_t row;
  std::vector<std::size_t> candidates;
  if (first) {
    row = *first - 1;
    d.exit_time = *first;
    for (std::size_t k = 0; k < C; ++k)
      if (spikes.at(row, k) > 0.0) candidates.push_back(k);
    if (candidates.size() == 1 && tb == TieBreak::Spikers) {
      d.predicted_class = static_cast<int>(candidates[0]);
      return d;
    }
    d.tie_broken = candidates.size() > 1;
    if (tb == TieBreak::All) {
      candidates.clear();
      for (std::size_t k = 0; k < C; ++k) candidates.push_back(k);
    }
  } else {
    row = T - 1;
    d.exit_time = T;
    d.no_spike_fallback = true;
    for (std::size_t k = 0; k < C; ++k) candidates.push_back(k);
  }
  std::size_t best = candidates[0];
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const std::size_t k = candidates[i];
    if (potentials.at(row, k) > potentials.at(row, best)) best = k;
  }
  for (std::size_t k : candidates)
    if (k != best && potentials.at(row, k) == potentials.at(row, best)) d.exact_tie = true;
  d.predicted_class = static_cast<int>(best);
  return d;
}

namespace detail {

inline Tensor sample_slice(const Tensor& tnc, std::size_t n) {
  const std::size_t T = tnc.dim(0), N = tnc.dim(1), C = tnc.dim(2);
  if (n >= N) throw ContractError("sample index " + std::to_string(n) + " out of range");
  Tensor out({T, C});
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < C; ++k) out.at(t, k) = tnc.at(t, n, k);
  return out;
}

}  // namespace detail

inline Decision decide(const ForwardRecord& rec, std::size_t sample, TieBreak tb = TieBreak::Spikers) {
  return decide(detail::sample_slice(rec.output_spikes, sample),
                detail::sample_slice(rec.output_pre_reset, sample), tb);
}

// Rate comparator: most spikes over the full window, ties by summed current.
inline Decision rate_decide(const ForwardRecord& rec, std::size_t sample) {
  const Tensor s = detail::sample_slice(rec.output_spikes, sample);
  const Tensor o = detail::sample_slice(rec.output_currents.value(), sample);
  const std::size_t T = s.dim(0), C = s.dim(1);
  std::vector<double> count(C, 0.0), current(C, 0.0);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t k = 0; k < C; ++k) {
      count[k] += s.at(t, k);
      current[k] += o.at(t, k);
    }
  std::size_t best = 0;
  for (std::size_t k = 1; k < C; ++k)
    if (count[k] > count[best] || (count[k] == count[best] && current[k] > current[best])) best = k;
  Decision d;
  d.predicted_class = static_cast<int>(best);
  d.exit_time = T;
  d.no_spike_fallback = count[best] == 0.0;
  return d;
}

struct BatchDecisions {
  std::vector<Decision> decisions;
  double mean_exit_time = 0.0;
};

inline BatchDecisions batch_decide(const std::vector<const ForwardRecord*>& records,
                                   TieBreak tb = TieBreak::Spikers) {
  BatchDecisions out;
  for (const ForwardRecord* r : records)
    for (std::size_t n = 0; n < r->batch; ++n) out.decisions.push_back(decide(*r, n, tb));
  if (out.decisions.empty()) throw ContractError("batch_decide on an empty batch");
  double s = 0.0;
  for (const auto& d : out.decisions) s += static_cast<double>(d.exit_time);
  out.mean_exit_time = s / static_cast<double>(out.decisions.size());
  return out;
}

inline double mean_exit_time(const std::vector<Decision>& ds) {
  if (ds.empty()) throw ContractError("mean_exit_time on an empty batch");
  double s = 0.0;
  for (const auto& d : ds) s += static_cast<double>(d.exit_time);
  return s / static_cast<double>(ds.size());
}

}  // namespace spikelat
