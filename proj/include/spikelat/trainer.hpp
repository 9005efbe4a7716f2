#pragma once

// AdamW + cosine decay training loop and batched evaluation.

#include <cmath>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

#include "spikelat/checkpoint.hpp"
#include "spikelat/data.hpp"
#include "spikelat/decoder.hpp"
#include "spikelat/parallel.hpp"
#include "spikelat/tad_loss.hpp"

namespace spikelat {

struct TrainConfig {
  double lr0 = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;
  LossKind loss = LossKind::Tad;
  TadConfig tad;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  std::size_t eval_batch_size = 256;
  TieBreak tiebreak = TieBreak::Spikers;
  DecodeMode decode = DecodeMode::Latency;

  void validate() const {
    if (!(lr0 >= 0.0)) throw ContractError("train.lr must be >= 0");
    if (epochs < 1) throw ContractError("train.epochs must be >= 1");
    if (batch_size < 1 || eval_batch_size < 1) throw ContractError("batch sizes must be >= 1");
    tad.validate();
  }
};

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::size_t step = 0;
};

// One decoupled-weight-decay Adam update over all parameters.
inline void adamw_step(std::span<Parameter> params, std::span<const Tensor> grads, AdamState& st,
                       double lr, const TrainConfig& cfg) {
  if (params.size() != grads.size()) throw DimensionError("adamw_step: gradient count mismatch");
  if (st.m.empty())
    for (const auto& p : params) {
      st.m.emplace_back(p.value.shape());
      st.v.emplace_back(p.value.shape());
    }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i].value.require_same(grads[i], "adamw_step");
    if (!grads[i].all_finite())
      throw NumericError("non-finite gradient for parameter '" + params[i].name + "' at step " +
                         std::to_string(st.step + 1));
  }
  ++st.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = params[i].value;
    Tensor& m = st.m[i];
    Tensor& v = st.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1, vhat = v[j] / bc2;
      w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps)) + lr * cfg.weight_decay * w[j];
    }
  }
}

inline double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw ContractError("cosine_lr: total_steps must be positive");
  if (step > total_steps) throw ContractError("cosine_lr: step beyond total_steps");
  return lr0 * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

struct EvalOptions {
  std::size_t batch_size = 256;
  DecodeMode decode = DecodeMode::Latency;
  TieBreak tiebreak = TieBreak::Spikers;
  std::size_t threads = 0;  // 0: worker_threads()
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_exit_time = 0.0;
  double sparsity = 0.0;
  std::vector<Decision> decisions;
  std::vector<int> labels;
  std::vector<double> mean_current_ce;  // per sample, CE of the time-mean current
  std::vector<SpikeLayerStats> spike_layers;    // summed over the dataset
  std::vector<WeightLayerStats> weight_layers;  // summed over the dataset
  std::uint64_t macs = 0;
  std::size_t T = 0;
};

inline double sparsity_of(const std::vector<SpikeLayerStats>& layers) {
  double s = 0.0, slots = 0.0;
  for (const auto& l : layers) {
    s += l.spikes;
    slots += l.slots;
  }
  return slots > 0.0 ? s / slots : 0.0;
}

// Runs the model in batchnorm eval mode over `ds` and decodes every sample.
inline EvalResult evaluate(const Model& model, const Dataset& ds, const EvalOptions& opt = {}) {
  if (ds.size() == 0) throw ContractError("evaluate on an empty dataset");
  const auto plan = batches(ds.size(), opt.batch_size, 0, false);
  struct Part {
    std::vector<Decision> decisions;
    std::vector<double> ce;
    std::vector<SpikeLayerStats> spikes;
    std::vector<WeightLayerStats> weights;
    std::uint64_t macs = 0;
  };
  std::vector<Part> parts(plan.size());
  const std::size_t threads = opt.threads ? opt.threads : worker_threads();
  parallel_for(plan.size(), threads, [&](std::size_t b) {
    Model local = model;
    Batch batch = gather(ds, plan[b]);
    Tape tape;
    ForwardOptions fo;
    fo.mode = NormMode::Eval;
    fo.track_grads = false;
    ForwardRecord rec = forward_unroll(local, batch.images, tape, fo);
    Part& part = parts[b];
    for (std::size_t n = 0; n < rec.batch; ++n)
      part.decisions.push_back(opt.decode == DecodeMode::Rate ? rate_decide(rec, n)
                                                              : decide(rec, n, opt.tiebreak));
    const Tensor& o = rec.output_currents.value();
    const std::size_t T = o.dim(0), N = o.dim(1), C = o.dim(2);
    Tensor mean_o({N, C});
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t i = 0; i < N * C; ++i) mean_o[i] += o[t * N * C + i] / static_cast<double>(T);
    part.ce = cross_entropy_rows(mean_o, batch.labels);
    part.spikes = std::move(rec.spike_layers);
    part.weights = std::move(rec.weight_layers);
    part.macs = tape.mac_count();
  });

  EvalResult r;
  r.T = model.spec().T();
  r.labels = ds.labels;
  std::size_t correct = 0;
  for (auto& p : parts) {
    r.decisions.insert(r.decisions.end(), p.decisions.begin(), p.decisions.end());
    r.mean_current_ce.insert(r.mean_current_ce.end(), p.ce.begin(), p.ce.end());
    r.macs += p.macs;
    if (r.spike_layers.empty()) {
      r.spike_layers = p.spikes;
      r.weight_layers = p.weights;
      continue;
    }
    for (std::size_t i = 0; i < p.spikes.size(); ++i) {
      r.spike_layers[i].spikes += p.spikes[i].spikes;
      r.spike_layers[i].slots += p.spikes[i].slots;
    }
    for (std::size_t i = 0; i < p.weights.size(); ++i) {
      r.weight_layers[i].input_activity += p.weights[i].input_activity;
      r.weight_layers[i].input_slots += p.weights[i].input_slots;
    }
  }
  for (std::size_t i = 0; i < r.decisions.size(); ++i)
    if (r.decisions[i].predicted_class == r.labels[i]) ++correct;
  r.accuracy = static_cast<double>(correct) / static_cast<double>(r.decisions.size());
  r.mean_exit_time = mean_exit_time(r.decisions);
  r.sparsity = sparsity_of(r.spike_layers);
  return r;
}

struct EpochMetrics {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_accuracy = 0.0;
  double mean_exit_time = 0.0;
  double sparsity = 0.0;
};

struct TrainingAborted : NumericError {
  TrainingAborted(const std::string& what, std::vector<std::size_t> batch)
      : NumericError(what), batch_indices(std::move(batch)) {}
  std::vector<std::size_t> batch_indices;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  EvalResult final_eval;
};

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) s += v * v;
  return std::sqrt(s);
}

// Seeded shuffling per epoch; evaluation after every epoch runs on the
// f32-rounded parameters, i.e. the model as a checkpoint stores it.
inline TrainResult train(Model& model, const Dataset& train_set, const Dataset& test_set,
                         const TrainConfig& cfg,
                         const std::function<void(const EpochMetrics&)>& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() == 0) throw ContractError("train on an empty dataset");
  const std::size_t per_epoch = (train_set.size() + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  AdamState adam;
  std::size_t step = 0;
  TrainResult result;
  EvalOptions eo;
  eo.batch_size = cfg.eval_batch_size;
  eo.decode = cfg.decode;
  eo.tiebreak = cfg.tiebreak;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto plan = batches(train_set.size(), cfg.batch_size, cfg.seed * 1000003ull + epoch, true);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& idx : plan) {
      Batch b = gather(train_set, idx);
      Tape tape;
      ForwardRecord rec;
      Var loss;
      try {
        rec = forward_unroll(model, b.images, tape);
        loss = cfg.loss == LossKind::Tad ? tad_loss(rec.output_currents, b.labels, cfg.tad)
                                         : vanilla_loss(rec.output_currents, b.labels);
      } catch (const NumericError& e) {
        throw TrainingAborted(std::string("loss became non-finite: ") + e.what(), idx);
      }
      tape.backward(loss);
      std::vector<Tensor> grads;
      for (const auto& p : model.params()) grads.push_back(rec.param_vars.at(p.name).grad());
      if (cfg.clip_norm > 0.0) {
        const double norm = global_norm(grads);
        if (norm > cfg.clip_norm)
          for (auto& g : grads) g *= cfg.clip_norm / norm;
      }
      try {
        adamw_step(model.params(), grads, adam, cosine_lr(step, total, cfg.lr0), cfg);
      } catch (const NumericError& e) {
        throw TrainingAborted(e.what(), idx);
      }
      ++step;
      loss_sum += loss.value().item() * static_cast<double>(idx.size());
      seen += idx.size();
    }
    const EvalResult ev = evaluate(rounded_to_f32(model), test_set, eo);
    EpochMetrics m{epoch, loss_sum / static_cast<double>(seen), ev.accuracy, ev.mean_exit_time,
                   ev.sparsity};
    result.history.push_back(m);
    if (on_epoch) on_epoch(m);
    if (epoch == cfg.epochs) result.final_eval = ev;
  }
  return result;
}

}  // namespace spikelat
