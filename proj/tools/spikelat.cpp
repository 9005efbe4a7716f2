#include <iostream>
#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "spikelat/commands.hpp"

namespace {

void add_source(CLI::App* app, spikelat::ModelSource& s) {
  app->add_option("--run", s.run, "run directory holding config.resolved and model.spkl");
  app->add_option("--config", s.config, "config file");
  app->add_option("--checkpoint", s.checkpoint, "checkpoint file");
  app->add_option("--set", s.overrides, "key=value config override")->take_all();
  app->add_option("--images", s.images, "IDX images replacing the configured test split");
  app->add_option("--labels", s.labels, "IDX labels for --images");
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
  // Activations are tens of MB; keep them on the heap instead of mmap churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  CLI::App app{"Latency-coded spiking network training and analysis"};
  app.require_subcommand(1);

  spikelat::TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
  train_cmd->add_option("--config", train.config, "config file")->required();
  train_cmd->add_option("--set", train.overrides, "key=value config override")->take_all();

  spikelat::EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_source(eval_cmd, eval.source);
  eval_cmd->add_option("--decode", eval.decode, "latency | rate");
  eval_cmd->add_option("--tiebreak", eval.tiebreak, "spikers | all");
  eval_cmd->add_option("--decisions", eval.decisions_csv, "write per-sample decisions to this CSV");

  spikelat::AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "energy, similarity or robustness report");
  analyze_cmd->add_option("which", analyze.which, "energy | similarity | robustness")->required();
  add_source(analyze_cmd, analyze.source);
  analyze_cmd->add_option("--layer", analyze.layer, "spiking layer for similarity, 1 = encoder");
  analyze_cmd->add_option("--out", analyze.out_dir, "output directory (default: the run directory)");

  spikelat::EncodeDemoArgs demo;
  auto* demo_cmd = app.add_subcommand("encode-demo", "dump the spike raster of one encoded sample");
  add_source(demo_cmd, demo.source);
  demo_cmd->add_option("--sample", demo.sample, "test-set sample index");
  demo_cmd->add_option("--out", demo.out_csv, "output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : spikelat::kExitUsage;
  }

  if (*train_cmd) return spikelat::cmd_train(train, std::cout, std::cerr);
  if (*eval_cmd) return spikelat::cmd_eval(eval, std::cout, std::cerr);
  if (*analyze_cmd) return spikelat::cmd_analyze(analyze, std::cout, std::cerr);
  return spikelat::cmd_encode_demo(demo, std::cout, std::cerr);
}
