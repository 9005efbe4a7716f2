#pragma once

// Operation-count energy estimates, the two-coefficient neuromorphic energy
// model, temporal similarity of spike maps and the corruption benchmark.

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "spikelat/trainer.hpp"

namespace spikelat {

// 45 nm CMOS, 32-bit float.
struct EnergyModel {
  double e_mac = 4.6;  // pJ per multiply-accumulate
  double e_ac = 0.9;   // pJ per accumulate
};

enum class Platform { TrueNorth, SpiNNaker };

struct PlatformCoefficients {
  double e_static;
  double e_dynamic;
};

inline PlatformCoefficients coefficients(Platform p) {
  return p == Platform::TrueNorth ? PlatformCoefficients{0.6, 0.4} : PlatformCoefficients{0.36, 0.64};
}

inline const char* to_string(Platform p) { return p == Platform::TrueNorth ? "truenorth" : "spinnaker"; }

inline Platform parse_platform(const std::string& s) {
  if (s == "truenorth") return Platform::TrueNorth;
  if (s == "spinnaker") return Platform::SpiNNaker;
  throw ContractError("unknown platform '" + s + "' (expected truenorth|spinnaker)");
}

inline std::uint64_t flops_conv(std::uint64_t h_out, std::uint64_t w_out, std::uint64_t c_in,
                                std::uint64_t c_out, std::uint64_t k) {
  if (!h_out || !w_out || !c_in || !c_out || !k) throw ContractError("flops_conv: zero dimension");
  return h_out * w_out * c_in * c_out * k * k;
}

inline std::uint64_t flops_fc(std::uint64_t in, std::uint64_t out) {
  if (!in || !out) throw ContractError("flops_fc: zero dimension");
  return in * out;
}

namespace detail {

// Energy coefficients are decimal quantities (4.6 pJ has no exact binary
// form). Carrying them as n / 10^k, with n recovered from the shortest decimal
// that round-trips, makes integer operation counts give correctly rounded
// totals: 4.6 * 100 + 0.9 * 50 comes out as exactly 505.
struct DecimalPair {
  double mac, ac, scale;
};

inline DecimalPair decimal_coefficients(const EnergyModel& em) {
  for (double scale = 1.0; scale <= 1e9; scale *= 10.0) {
    const double m = std::round(em.e_mac * scale), a = std::round(em.e_ac * scale);
    if (m / scale == em.e_mac && a / scale == em.e_ac) return {m, a, scale};
  }
  return {em.e_mac, em.e_ac, 1.0};
}

}  // namespace detail

inline double energy_ann(std::span<const std::uint64_t> layer_flops, const EnergyModel& em = {}) {
  if (layer_flops.empty()) throw ContractError("energy_ann: no layers");
  const auto c = detail::decimal_coefficients(em);
  double e = 0.0;
  for (std::uint64_t f : layer_flops) e += static_cast<double>(f) * c.mac;
  return e / c.scale;
}

// First layer at MAC cost; layer l >= 2 costs E_AC * alpha^{l-1} * flops^l
// per executed timestep. firing_rates[i] is the input rate of layer i+2.
inline double energy_snn(std::span<const std::uint64_t> layer_flops, std::span<const double> firing_rates,
                         double timesteps = 1.0, const EnergyModel& em = {}) {
  if (layer_flops.empty()) throw ContractError("energy_snn: no layers");
  if (firing_rates.size() + 1 != layer_flops.size())
    throw ContractError("energy_snn: expected " + std::to_string(layer_flops.size() - 1) +
                        " firing rates, got " + std::to_string(firing_rates.size()));
  double sops = 0.0;
  for (std::size_t l = 1; l < layer_flops.size(); ++l) {
    if (firing_rates[l - 1] < 0.0) throw ContractError("energy_snn: negative firing rate");
    sops += firing_rates[l - 1] * static_cast<double>(layer_flops[l]);
  }
  const auto c = detail::decimal_coefficients(em);
  return (c.mac * static_cast<double>(layer_flops[0]) + c.ac * sops * timesteps) / c.scale;
}

// Inputs are already normalised against a declared baseline run.
inline double energy_normalized(double timesteps, double spikes, Platform p) {
  if (timesteps < 0.0 || spikes < 0.0) throw ContractError("energy_normalized: negative input");
  const auto c = coefficients(p);
  return c.e_static * timesteps + c.e_dynamic * spikes;
}

struct Baseline {
  double timesteps = 0.0;
  double spikes = 0.0;
};

struct EnergyLayer {
  std::string name;
  std::uint64_t flops = 0;
  std::optional<double> input_rate;  // absent for the first (direct-coded) layer
  double sops = 0.0;
  double e_ann = 0.0;
  double e_snn = 0.0;
};

struct EnergyReport {
  std::vector<EnergyLayer> layers;
  double e_ann = 0.0;
  double e_snn = 0.0;
  double timesteps = 0.0;          // per-sample timesteps used for the SOP term
  double spikes_per_sample = 0.0;  // all spiking layers, full window
  std::map<Platform, double> normalized;
};

// Builds the per-layer report from dataset-aggregated forward statistics.
// `timesteps` defaults to the measured mean exit time.
inline EnergyReport energy_report(const EvalResult& ev, const EnergyModel& em = {},
                                  std::optional<double> timesteps = std::nullopt,
                                  std::optional<Baseline> baseline = std::nullopt) {
  if (ev.weight_layers.empty()) throw ContractError("energy_report: no weight layers recorded");
  EnergyReport r;
  r.timesteps = timesteps.value_or(ev.mean_exit_time);
  std::vector<std::uint64_t> flops;
  std::vector<double> rates;
  const auto c = detail::decimal_coefficients(em);
  for (std::size_t l = 0; l < ev.weight_layers.size(); ++l) {
    const auto& w = ev.weight_layers[l];
    EnergyLayer el{w.name, w.flops, std::nullopt, 0.0, 0.0, 0.0};
    el.e_ann = static_cast<double>(w.flops) * c.mac / c.scale;
    if (l == 0) {
      el.e_snn = el.e_ann;
    } else {
      const double rate = w.input_slots > 0.0 ? w.input_activity / w.input_slots : 0.0;
      el.input_rate = rate;
      el.sops = rate * static_cast<double>(w.flops) * r.timesteps;
      el.e_snn = c.ac * el.sops / c.scale;
      rates.push_back(rate);
    }
    flops.push_back(w.flops);
    r.layers.push_back(el);
  }
  r.e_ann = energy_ann(flops, em);
  r.e_snn = energy_snn(flops, rates, r.timesteps, em);
  double spikes = 0.0;
  for (const auto& s : ev.spike_layers) spikes += s.spikes;
  r.spikes_per_sample = spikes / static_cast<double>(ev.decisions.size());
  if (baseline && baseline->timesteps > 0.0 && baseline->spikes > 0.0)
    for (Platform p : {Platform::TrueNorth, Platform::SpiNNaker})
      r.normalized[p] = energy_normalized(ev.mean_exit_time / baseline->timesteps,
                                          r.spikes_per_sample / baseline->spikes, p);
  return r;
}

inline void write_energy_csv(const EnergyReport& r, std::ostream& os) {
  os << std::setprecision(17);
  os << "layer,flops,input_rate,sops,e_ann_pj,e_snn_pj\n";
  std::uint64_t flops = 0;
  double sops = 0.0;
  for (const auto& l : r.layers) {
    os << l.name << ',' << l.flops << ',';
    if (l.input_rate) os << *l.input_rate;
    os << ',' << l.sops << ',' << l.e_ann << ',' << l.e_snn << '\n';
    flops += l.flops;
    sops += l.sops;
  }
  os << "total," << flops << ",," << sops << ',' << r.e_ann << ',' << r.e_snn << '\n';
  os << "# timesteps=" << r.timesteps << " spikes_per_sample=" << r.spikes_per_sample << '\n';
  for (const auto& [p, e] : r.normalized) os << "normalized_" << to_string(p) << ",,,,," << e << '\n';
}

struct SimilarityMatrix {
  Tensor m;  // [T,T]
  std::string layer;
  std::size_t samples = 0;
};

// maps: one [T,D] tensor per sample. Cosine with a zero vector counts as 0.
inline SimilarityMatrix temporal_similarity(const std::vector<Tensor>& maps, std::string layer = {}) {
  if (maps.empty()) throw ContractError("temporal_similarity needs at least one sample");
  const std::size_t T = maps[0].dim(0), D = maps[0].dim(1);
  SimilarityMatrix s{Tensor({T, T}), std::move(layer), maps.size()};
  std::vector<double> sq(T);
  for (const Tensor& v : maps) {
    if (v.shape() != Shape{T, D}) throw DimensionError("temporal_similarity: inconsistent map shapes");
    for (std::size_t t = 0; t < T; ++t) {
      double q = 0.0;
      for (std::size_t d = 0; d < D; ++d) q += v.at(t, d) * v.at(t, d);
      sq[t] = q;
    }
    for (std::size_t i = 0; i < T; ++i)
      for (std::size_t j = i; j < T; ++j) {
        if (sq[i] == 0.0 || sq[j] == 0.0) continue;
        double dot = 0.0;
        for (std::size_t d = 0; d < D; ++d) dot += v.at(i, d) * v.at(j, d);
        // one square root keeps integer-count cases exact
        const double c = dot / std::sqrt(sq[i] * sq[j]);
        s.m.at(i, j) += c;
        if (j != i) s.m.at(j, i) += c;
      }
  }
  s.m *= 1.0 / static_cast<double>(maps.size());
  return s;
}

// Per-sample [T,D] spike maps of spiking layer `layer` (0 = encoder output,
// then hidden LIF layers in order, last = output layer).
inline std::vector<Tensor> collect_spike_maps(const Model& model, const Dataset& ds, std::size_t layer,
                                              std::size_t batch_size = 256, std::string* name = nullptr) {
  std::vector<Tensor> out;
  Model local = model;
  const std::size_t T = model.spec().T();
  for (const auto& idx : batches(ds.size(), batch_size, 0, false)) {
    Batch b = gather(ds, idx);
    Tape tape;
    ForwardOptions fo;
    fo.mode = NormMode::Eval;
    fo.track_grads = false;
    fo.keep_spike_maps = true;
    ForwardRecord rec = forward_unroll(local, b.images, tape, fo);
    if (layer >= rec.spike_maps.size())
      throw ContractError("spiking layer " + std::to_string(layer) + " out of range (model has " +
                          std::to_string(rec.spike_maps.size()) + ")");
    if (name) *name = rec.spike_layers[layer].name;
    const Tensor& s = rec.spike_maps[layer];
    const std::size_t N = idx.size(), D = s.size() / (T * N);
    for (std::size_t n = 0; n < N; ++n) {
      Tensor v({T, D});
      for (std::size_t t = 0; t < T; ++t)
        std::copy_n(s.raw() + (t * N + n) * D, D, v.raw() + t * D);
      out.push_back(std::move(v));
    }
  }
  return out;
}

inline void write_matrix_csv(const Tensor& m, std::ostream& os) {
  os << std::setprecision(17);
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) os << (j ? "," : "") << m.at(i, j);
    os << '\n';
  }
}

// gnuplot "matrix" layout: whitespace-separated rows.
inline void write_matrix_gnuplot(const Tensor& m, std::ostream& os) {
  os << std::setprecision(17);
  for (std::size_t i = 0; i < m.dim(0); ++i) {
    for (std::size_t j = 0; j < m.dim(1); ++j) os << (j ? " " : "") << m.at(i, j);
    os << '\n';
  }
}

using Predictor = std::function<std::vector<int>(const Dataset&)>;

inline Predictor model_predictor(const Model& model, EvalOptions opt = {}) {
  return [model, opt](const Dataset& ds) {
    const EvalResult r = evaluate(model, ds, opt);
    std::vector<int> out;
    for (const auto& d : r.decisions) out.push_back(d.predicted_class);
    return out;
  };
}

inline double error_rate(const std::vector<int>& pred, const std::vector<int>& labels) {
  if (pred.size() != labels.size() || labels.empty()) throw ContractError("error_rate: size mismatch");
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) wrong += pred[i] != labels[i];
  return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

struct RobustnessRow {
  Corruption type;
  int severity;
  double error;
};

struct RobustnessReport {
  double clean_error = 0.0;
  std::vector<RobustnessRow> rows;  // types x severities 1..5
  double mce = 0.0;                 // unweighted mean over rows

  double type_mean(Corruption c) const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows)
      if (r.type == c) s += r.error, ++n;
    return n ? s / n : 0.0;
  }
  double severity_mean(int sev) const {
    double s = 0.0;
    int n = 0;
    for (const auto& r : rows)
      if (r.severity == sev) s += r.error, ++n;
    return n ? s / n : 0.0;
  }
};

inline std::uint64_t corruption_seed(std::uint64_t seed, Corruption c, int severity) {
  return seed * 1315423911ull + static_cast<std::uint64_t>(c) * 131ull + static_cast<std::uint64_t>(severity);
}

inline RobustnessReport robustness_eval(const Predictor& predict, const Dataset& clean, std::uint64_t seed,
                                        const CorruptionParams& params = {}) {
  RobustnessReport r;
  r.clean_error = error_rate(predict(clean), clean.labels);
  double s = 0.0;
  for (Corruption c : kCorruptionSuite)
    for (int sev = 1; sev <= 5; ++sev) {
      const Dataset cd = corrupt(clean, c, sev, corruption_seed(seed, c, sev), params);
      const double e = error_rate(predict(cd), cd.labels);
      r.rows.push_back({c, sev, e});
      s += e;
    }
  r.mce = s / static_cast<double>(r.rows.size());
  return r;
}

inline void write_robustness_csv(const RobustnessReport& r, std::ostream& os) {
  os << std::setprecision(17);
  os << "corruption,severity,error\n";
  os << "clean,0," << r.clean_error << '\n';
  for (const auto& row : r.rows) os << to_string(row.type) << ',' << row.severity << ',' << row.error << '\n';
  os << "mCE,," << r.mce << '\n';
}

}  // namespace spikelat
