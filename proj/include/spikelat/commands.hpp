#pragma once

// Subcommand implementations behind the spikelat executable. Each returns a
// process exit code: 0 ok, 2 usage/config/input errors, 3 runtime abort.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "spikelat/config.hpp"

namespace spikelat {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitAbort = 3;

template <class F>
int run_guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const TrainingAborted& e) {
    err << "training aborted: " << e.what() << "\n  batch sample indices:";
    for (std::size_t i : e.batch_indices) err << ' ' << i;
    err << '\n';
    return kExitAbort;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kExitAbort;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const SpecError& e) {
    err << "config error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const ContractError& e) {
    err << "invalid setting: " << e.what() << '\n';
    return kExitUsage;
  } catch (const DimensionError& e) {
    err << "shape error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitAbort;
  }
}

namespace detail {

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", &tm);
  return buf;
}

inline std::filesystem::path make_run_dir(const RunConfig& cfg) {
  namespace fs = std::filesystem;
  fs::path dir;
  if (!cfg.text("run.dir").empty()) {
    dir = cfg.text("run.dir");
  } else {
    const std::string base = utc_stamp() + "-seed" + cfg.text("train.seed");
    dir = fs::path(cfg.text("run.root")) / base;
    for (int k = 2; fs::exists(dir); ++k) dir = fs::path(cfg.text("run.root")) / (base + "-" + std::to_string(k));
  }
  fs::create_directories(dir);
  return dir;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p, std::ios::trunc);
  if (!os) throw Error("cannot write '" + p.string() + "'");
  return os;
}

}  // namespace detail

struct TrainArgs {
  std::string config;
  std::vector<std::string> overrides;
};

inline int cmd_train(const TrainArgs& a, std::ostream& out, std::ostream& err,
                     std::filesystem::path* run_dir = nullptr) {
  return run_guarded(err, [&] {
    RunConfig cfg = RunConfig::load(a.config);
    for (const auto& o : a.overrides) cfg.apply_override(o);
    auto [train_set, test_set] = cfg.datasets();
    if (cfg.integer("model.classes") == 0) cfg.set("model.classes", std::to_string(train_set.num_classes));
    if (cfg.text("model.input").empty()) {
      const Shape& s = train_set.images.shape();
      cfg.set("model.input", format_shape(Shape(s.begin() + 1, s.end())));
    }
    const ModelSpec spec = cfg.model_spec();
    const TrainConfig tc = cfg.train_config();
    tc.validate();
    Model model = build_model(spec, tc.seed);

    const auto dir = detail::make_run_dir(cfg);
    if (run_dir) *run_dir = dir;
    {
      auto os = detail::open_out(dir / "config.resolved");
      cfg.write_resolved(os);
    }
    auto metrics = detail::open_out(dir / "metrics.csv");
    metrics << "epoch,train_loss,test_acc,mean_exit_time,sparsity\n" << std::setprecision(10);
    train(model, train_set, test_set, tc, [&](const EpochMetrics& m) {
      metrics << m.epoch << ',' << m.train_loss << ',' << m.test_accuracy << ',' << m.mean_exit_time << ','
              << m.sparsity << '\n'
              << std::flush;
      out << "epoch " << m.epoch << "  loss " << m.train_loss << "  test_acc " << m.test_accuracy
          << "  exit_time " << m.mean_exit_time << "  sparsity " << m.sparsity << '\n';
    });
    save_checkpoint(model, (dir / "model.spkl").string());
    out << "run directory: " << dir.string() << '\n';
    return kExitOk;
  });
}

// Model and data source shared by eval and analyze: either a run directory
// (config.resolved + model.spkl) or an explicit config and checkpoint.
struct ModelSource {
  std::string run;
  std::string config;
  std::string checkpoint;
  std::vector<std::string> overrides;
  std::string images;  // optional IDX pair replacing the configured test split
  std::string labels;
};

struct LoadedRun {
  RunConfig cfg;
  Dataset data;
  Model model;
};

inline LoadedRun load_run(const ModelSource& src) {
  namespace fs = std::filesystem;
  std::string cfg_path = src.config, ckpt = src.checkpoint;
  if (!src.run.empty()) {
    if (cfg_path.empty()) cfg_path = (fs::path(src.run) / "config.resolved").string();
    if (ckpt.empty()) ckpt = (fs::path(src.run) / "model.spkl").string();
  }
  if (cfg_path.empty() || ckpt.empty()) throw ConfigError("need --run or both --config and --checkpoint", 0);
  RunConfig cfg = RunConfig::load(cfg_path);
  for (const auto& o : src.overrides) cfg.apply_override(o);
  if (src.images.empty() != src.labels.empty()) throw ConfigError("--images and --labels go together", 0);
  Dataset data = src.images.empty() ? cfg.datasets().second : load_idx(src.images, src.labels);
  if (cfg.text("model.input").empty()) {
    const Shape& s = data.images.shape();
    cfg.set("model.input", format_shape(Shape(s.begin() + 1, s.end())));
  }
  const ModelSpec spec = cfg.model_spec(data.num_classes);
  Model model = load_checkpoint(ckpt, spec);
  return {std::move(cfg), std::move(data), std::move(model)};
}

struct EvalArgs {
  ModelSource source;
  std::string decode;    // empty: from config
  std::string tiebreak;  // empty: from config
  std::string decisions_csv;
};

inline int cmd_eval(const EvalArgs& a, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    LoadedRun run = load_run(a.source);
    EvalOptions eo = run.cfg.eval_options();
    if (!a.decode.empty()) eo.decode = parse_decode_mode(a.decode);
    if (!a.tiebreak.empty()) eo.tiebreak = parse_tiebreak(a.tiebreak);
    const EvalResult r = evaluate(run.model, run.data, eo);
    out << std::setprecision(10) << "samples " << r.decisions.size() << "\naccuracy " << r.accuracy
        << "\nmean_exit_time " << r.mean_exit_time << "\nsparsity " << r.sparsity << '\n';
    if (!a.decisions_csv.empty()) {
      auto os = detail::open_out(a.decisions_csv);
      os << "sample_id,predicted,label,exit_time,tie_broken,fallback\n";
      for (std::size_t i = 0; i < r.decisions.size(); ++i) {
        const Decision& d = r.decisions[i];
        os << i << ',' << d.predicted_class << ',' << r.labels[i] << ',' << d.exit_time << ','
           << (d.tie_broken ? 1 : 0) << ',' << (d.no_spike_fallback ? 1 : 0) << '\n';
      }
    }
    return kExitOk;
  });
}

struct AnalyzeArgs {
  ModelSource source;
  std::string which;       // energy | similarity | robustness
  std::size_t layer = 1;   // similarity: 1 = encoder output
  std::string out_dir;     // default: the run directory
};

inline int cmd_analyze(const AnalyzeArgs& a, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    namespace fs = std::filesystem;
    if (a.which != "energy" && a.which != "similarity" && a.which != "robustness")
      throw ConfigError("unknown analysis '" + a.which + "' (expected energy|similarity|robustness)", 0);
    fs::path dir = a.out_dir.empty() ? fs::path(a.source.run) : fs::path(a.out_dir);
    if (dir.empty()) throw ConfigError("--out is required without --run", 0);
    LoadedRun run = load_run(a.source);
    fs::create_directories(dir);

    if (a.which == "energy") {
      const EvalResult ev = evaluate(run.model, run.data, run.cfg.eval_options());
      const EnergyReport rep = energy_report(ev, run.cfg.energy_model(), std::nullopt, run.cfg.baseline());
      auto os = detail::open_out(dir / "energy.csv");
      write_energy_csv(rep, os);
      out << std::setprecision(10) << "e_ann_pj " << rep.e_ann << "\ne_snn_pj " << rep.e_snn << '\n';
    } else if (a.which == "similarity") {
      if (a.layer < 1) throw ConfigError("--layer counts from 1", 0);
      std::string name;
      const auto maps = collect_spike_maps(run.model, run.data, a.layer - 1,
                                           run.cfg.integer("train.eval_batch_size"), &name);
      const SimilarityMatrix s = temporal_similarity(maps, name);
      const std::string stem = "similarity_layer" + std::to_string(a.layer);
      auto csv = detail::open_out(dir / (stem + ".csv"));
      write_matrix_csv(s.m, csv);
      auto dat = detail::open_out(dir / (stem + ".dat"));
      write_matrix_gnuplot(s.m, dat);
      out << "layer " << a.layer << " (" << name << "), " << s.samples << " samples\n";
    } else {
      const RobustnessReport rep = robustness_eval(model_predictor(run.model, run.cfg.eval_options()), run.data,
                                                   run.cfg.integer("corrupt.seed"), run.cfg.corruption_params());
      auto os = detail::open_out(dir / "robustness.csv");
      write_robustness_csv(rep, os);
      out << std::setprecision(10) << "clean_error " << rep.clean_error << "\nmCE " << rep.mce << '\n';
    }
    return kExitOk;
  });
}

struct EncodeDemoArgs {
  ModelSource source;  // checkpoint optional: without one a freshly initialised encoder is used
  std::size_t sample = 0;
  std::string out_csv;
};

// One row per input neuron: its feature value and the single spike time.
inline int cmd_encode_demo(const EncodeDemoArgs& a, std::ostream& out, std::ostream& err) {
  return run_guarded(err, [&] {
    if (a.out_csv.empty()) throw ConfigError("--out is required", 0);
    RunConfig cfg;
    Dataset data;
    std::optional<Model> model;
    const bool have_ckpt = !a.source.checkpoint.empty() || !a.source.run.empty();
    if (have_ckpt) {
      LoadedRun run = load_run(a.source);
      cfg = std::move(run.cfg);
      data = std::move(run.data);
      model = std::move(run.model);
    } else {
      if (a.source.config.empty()) throw ConfigError("need --config or --run", 0);
      cfg = RunConfig::load(a.source.config);
      for (const auto& o : a.source.overrides) cfg.apply_override(o);
      data = cfg.datasets().second;
      const Shape& s = data.images.shape();
      model = build_model(cfg.model_spec(data.num_classes, Shape(s.begin() + 1, s.end())),
                          cfg.integer("train.seed"));
    }
    if (a.sample >= data.size())
      throw ConfigError("--sample " + std::to_string(a.sample) + " out of range (dataset has " +
                        std::to_string(data.size()) + ")", 0);
    const ModelSpec& spec = model->spec();
    const Batch b = gather(data, {a.sample});
    Tensor features = b.images;
    if (spec.encoder.mode == EncodeMode::LatencyModule) {
      Tape tape;
      features = extract_features(tape.leaf(b.images), tape.leaf(model->param("encoder.conv.weight")),
                                  tape.leaf(model->param("encoder.bn.gamma")),
                                  tape.leaf(model->param("encoder.bn.beta")), model->stats("encoder.bn"),
                                  NormMode::Eval, spec.encoder)
                     .value();
    }
    const EncodedInput enc = latency_encode(features, spec.T());
    auto os = detail::open_out(a.out_csv);
    os << "neuron,feature,spike_time\n" << std::setprecision(10);
    const std::size_t T = spec.T(), D = features.size();
    for (std::size_t i = 0; i < D; ++i) {
      std::size_t ts = 0;
      for (std::size_t t = 0; t < T; ++t)
        if (enc.spikes[t * D + i] > 0.5) ts = t + 1;
      os << i << ',' << features[i] << ',' << ts << '\n';
    }
    out << D << " neurons, T = " << T << ", label " << data.labels[a.sample] << '\n';
    return kExitOk;
  });
}

}  // namespace spikelat
