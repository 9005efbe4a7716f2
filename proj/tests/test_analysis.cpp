#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "spikelat/analysis.hpp"
#include "support.hpp"

using namespace spikelat;
using spikelat::testing::random_tensor;

namespace {

ModelSpec small_spec(const std::string& preset, std::size_t T = 3) {
  ModelSpec s;
  s.input = {1, 8, 8};
  s.num_classes = 3;
  s.encoder.T = T;
  s.encoder.channels = 4;
  s.layers = preset_layers(preset, 3, PresetOptions{16, 4, 6});
  return s;
}

Dataset small_blobs(std::size_t per_class = 10) {
  BlobsConfig bc;
  bc.n_per_class = per_class;
  return synth_blobs(bc);
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Flops, Examples) {
  EXPECT_EQ(flops_conv(2, 2, 1, 2, 3), 72u);
  EXPECT_EQ(flops_fc(512, 10), 5120u);
  EXPECT_THROW(flops_conv(0, 2, 1, 2, 3), ContractError);
  EXPECT_THROW(flops_conv(2, 2, 1, 2, 0), ContractError);
  EXPECT_THROW(flops_fc(512, 0), ContractError);
}

TEST(Flops, ModelTotalsMatchIndependentCount) {
  // mlp-mini on 1x8x8, encoder 4 channels, hidden 16, 3 classes
  const std::uint64_t mlp = flops_conv(8, 8, 1, 4, 3) + flops_fc(256, 16) + flops_fc(16, 3);
  // vgg-mini: 8x8 -> conv 4 -> pool -> 4x4 conv 6 -> pool -> 2x2 -> linear 3
  const std::uint64_t vgg =
      flops_conv(8, 8, 1, 4, 3) + flops_conv(8, 8, 4, 4, 3) + flops_conv(4, 4, 4, 6, 3) + flops_fc(24, 3);
  for (auto [preset, expect] : {std::pair{"mlp-mini", mlp}, std::pair{"vgg-mini", vgg}}) {
    Model m = build_model(small_spec(preset), 1);
    Tape tape;
    const ForwardRecord r = forward_unroll(m, Tensor({2, 1, 8, 8}, 0.3), tape);
    std::uint64_t total = 0, executed = 0;
    for (const auto& w : r.weight_layers) {
      total += w.flops;
      executed += w.flops * w.executions;
    }
    EXPECT_EQ(total, expect) << preset;
    // the tape's own multiply-accumulate counter over N=2 samples
    EXPECT_EQ(tape.mac_count(), 2 * executed) << preset;
    EXPECT_EQ(executed, r.weight_layers[0].flops + 3 * (total - r.weight_layers[0].flops));
  }
}

TEST(EnergyAnn, Examples) {
  const std::vector<std::uint64_t> one{72};
  EXPECT_EQ(energy_ann(one), 331.2);
  const std::vector<std::uint64_t> trailing{72, 0, 0};
  EXPECT_EQ(energy_ann(trailing), energy_ann(one));
  EXPECT_NEAR(energy_ann(one, EnergyModel{9.2, 0.9}), 2 * 331.2, 1e-12);
  const std::vector<std::uint64_t> f{10, 20, 30}, f2{20, 40, 60};
  EXPECT_EQ(energy_ann(f2), 2 * energy_ann(f));
  EXPECT_THROW(energy_ann(std::vector<std::uint64_t>{}), ContractError);
  // coefficients without a short decimal form still work
  EXPECT_NEAR(energy_ann(std::vector<std::uint64_t>{3}, EnergyModel{1.0 / 3, 0.9}), 1.0, 1e-15);
}

TEST(EnergySnn, Examples) {
  const std::vector<std::uint64_t> f{100, 100};
  const double toy = energy_snn(f, std::vector<double>{0.5});
  // plain double arithmetic gives 504.99999999999994 here
  EXPECT_EQ(toy, 505.0);
  const std::vector<std::uint64_t> g{40, 70, 30};
  EXPECT_EQ(energy_snn(g, std::vector<double>{0, 0}), 184.0);
  EXPECT_NEAR(energy_snn(g, std::vector<double>{1, 1}) - 4.6 * 40, 0.9 * 100, 1e-12);
  EXPECT_THROW(energy_snn(g, std::vector<double>{1}), ContractError);
  EXPECT_THROW(energy_snn(g, std::vector<double>{1, -0.1}), ContractError);
}

TEST(EnergySnn, AcTermIsLinearInRates) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  const std::vector<std::uint64_t> f{128, 512, 4096, 40};
  for (int r = 0; r < 100; ++r) {
    std::vector<double> a{u(rng), u(rng), u(rng)}, b = a;
    for (double& v : b) v *= 2;
    const double base = 4.6 * 128;
    EXPECT_NEAR(energy_snn(f, b) - base, 2 * (energy_snn(f, a) - base), 1e-9);
  }
}

TEST(EnergyNormalized, Examples) {
  EXPECT_EQ(energy_normalized(1, 1, Platform::TrueNorth), 1.0);
  EXPECT_EQ(energy_normalized(1, 1, Platform::SpiNNaker), 1.0);
  EXPECT_EQ(energy_normalized(0, 0, Platform::TrueNorth), 0.0);
  EXPECT_NEAR(energy_normalized(1.31 / 680, 6.3 / 6.9, Platform::TrueNorth), 0.366, 0.005);
  EXPECT_THROW(energy_normalized(-1, 0, Platform::TrueNorth), ContractError);
  EXPECT_THROW(parse_platform("loihi"), ContractError);
  EXPECT_EQ(parse_platform("spinnaker"), Platform::SpiNNaker);
}

TEST(EnergyReport, RatesAndTotals) {
  Model m = build_model(small_spec("vgg-mini"), 2);
  EvalOptions o;
  o.threads = 1;
  const EvalResult ev = evaluate(m, small_blobs(), o);
  const EnergyReport r = energy_report(ev, {}, std::nullopt, Baseline{2.0, 100.0});
  ASSERT_EQ(r.layers.size(), 4u);
  EXPECT_FALSE(r.layers[0].input_rate.has_value());
  EXPECT_EQ(r.timesteps, ev.mean_exit_time);
  double e_snn = 0, e_ann = 0;
  for (const auto& l : r.layers) {
    e_snn += l.e_snn;
    e_ann += l.e_ann;
    EXPECT_LE(l.sops, double(l.flops) * r.timesteps + 1e-9);
    if (l.input_rate) {
      EXPECT_GE(*l.input_rate, 0.0);
      EXPECT_LE(*l.input_rate, 1.0);
    }
  }
  EXPECT_NEAR(r.e_snn, e_snn, 1e-9 * e_snn);
  EXPECT_NEAR(r.e_ann, e_ann, 1e-9 * e_ann);
  // encoder spikes feed layer 1: exactly one per neuron over the window
  EXPECT_NEAR(*r.layers[1].input_rate, 1.0 / 3, 1e-12);
  ASSERT_EQ(r.normalized.size(), 2u);
  EXPECT_NEAR(r.normalized.at(Platform::TrueNorth),
              0.6 * ev.mean_exit_time / 2.0 + 0.4 * r.spikes_per_sample / 100.0, 1e-12);

  std::ostringstream os;
  write_energy_csv(r, os);
  const auto ls = lines_of(os.str());
  ASSERT_EQ(ls.size(), 1u + 4 + 1 + 1 + 2);
  EXPECT_EQ(ls[0], "layer,flops,input_rate,sops,e_ann_pj,e_snn_pj");
  EXPECT_EQ(ls[1].rfind("encoder.conv,", 0), 0u);
  EXPECT_EQ(ls[5].rfind("total,", 0), 0u);
  EXPECT_EQ(ls[7].rfind("normalized_truenorth,", 0), 0u);
}

TEST(Similarity, WorkedBinaryPair) {
  const Tensor v({2, 4}, {1, 1, 0, 0, 1, 0, 1, 0});
  const SimilarityMatrix s = temporal_similarity({v});
  EXPECT_EQ(s.m.at(0, 1), 0.5);
  EXPECT_EQ(s.m.at(1, 0), 0.5);
  EXPECT_EQ(s.m.at(0, 0), 1.0);
}

TEST(Similarity, IdenticalAndDisjointSupports) {
  const Tensor same({3, 2}, {1, 0.5, 1, 0.5, 1, 0.5});
  const SimilarityMatrix a = temporal_similarity({same, same});
  for (double v : a.m.data()) EXPECT_NEAR(v, 1.0, 1e-15);
  const Tensor disjoint({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const SimilarityMatrix b = temporal_similarity({disjoint});
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(b.m.at(i, j), i == j ? 1.0 : 0.0);
}

TEST(Similarity, ZeroVectorsCountAsZeroAndAverageOverSamples) {
  const Tensor a({2, 2}, {1, 0, 0, 0}), b({2, 2}, {1, 1, 1, 1});
  const SimilarityMatrix s = temporal_similarity({a, b});
  EXPECT_EQ(s.m.at(0, 0), 1.0);
  EXPECT_EQ(s.m.at(1, 1), 0.5);
  EXPECT_EQ(s.m.at(0, 1), 0.5);
  EXPECT_EQ(s.samples, 2u);
  EXPECT_THROW(temporal_similarity({}), ContractError);
  EXPECT_THROW(temporal_similarity({a, Tensor({3, 2})}), DimensionError);
}

TEST(Similarity, SymmetricAndBounded) {
  std::mt19937_64 rng(2);
  std::bernoulli_distribution bit(0.3);
  for (int r = 0; r < 50; ++r) {
    std::vector<Tensor> maps;
    for (int k = 0; k < 5; ++k) {
      Tensor v({6, 20});
      for (double& x : v.data()) x = bit(rng);
      maps.push_back(v);
    }
    const SimilarityMatrix s = temporal_similarity(maps);
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) {
        EXPECT_LE(std::abs(s.m.at(i, j) - s.m.at(j, i)), 1e-12);
        EXPECT_GE(s.m.at(i, j), 0.0);
        EXPECT_LE(s.m.at(i, j), 1.0 + 1e-12);
      }
  }
}

TEST(Similarity, EncoderLayerIsIdentity) {
  const Model m = build_model(small_spec("vgg-mini", 4), 3);
  const auto maps = collect_spike_maps(m, small_blobs(4), 0, 5);
  ASSERT_EQ(maps.size(), 12u);
  const SimilarityMatrix s = temporal_similarity(maps);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      if (i != j) {
        EXPECT_EQ(s.m.at(i, j), 0.0);
      }
  EXPECT_THROW(collect_spike_maps(m, small_blobs(1), 9), ContractError);
}

TEST(Similarity, MatrixWriters) {
  const Tensor m({2, 2}, {1, 0.5, 0.5, 1});
  std::ostringstream csv, dat;
  write_matrix_csv(m, csv);
  write_matrix_gnuplot(m, dat);
  EXPECT_EQ(csv.str(), "1,0.5\n0.5,1\n");
  EXPECT_EQ(dat.str(), "1 0.5\n0.5 1\n");
}

TEST(Robustness, SeverityZeroIsCleanAndCsvComplete) {
  const Dataset ds = small_blobs(20);
  const Model m = build_model(small_spec("mlp-mini"), 4);
  const Predictor p = model_predictor(m);
  const RobustnessReport r = robustness_eval(p, ds, 5);
  EXPECT_EQ(error_rate(p(corrupt(ds, Corruption::Contrast, 0, 1)), ds.labels), r.clean_error);
  ASSERT_EQ(r.rows.size(), 25u);
  double s = 0;
  for (const auto& row : r.rows) {
    EXPECT_GE(row.error, 0.0);
    EXPECT_LE(row.error, 1.0);
    s += row.error;
  }
  EXPECT_NEAR(r.mce, s / 25, 1e-15);

  std::ostringstream os;
  write_robustness_csv(r, os);
  const auto ls = lines_of(os.str());
  ASSERT_EQ(ls.size(), 28u);
  EXPECT_EQ(ls[0], "corruption,severity,error");
  EXPECT_EQ(ls[1].rfind("clean,0,", 0), 0u);
  EXPECT_EQ(ls[2].rfind("gaussian-noise,1,", 0), 0u);
  EXPECT_EQ(ls[26].rfind("pixelate,5,", 0), 0u);
  EXPECT_EQ(ls[27].rfind("mCE,,", 0), 0u);
}

TEST(Robustness, RandomClassifierSitsAtChance) {
  BlobsConfig bc;
  bc.classes = 4;
  bc.n_per_class = 100;
  const Dataset ds = synth_blobs(bc);
  std::mt19937_64 rng(9);
  const Predictor random_guess = [&](const Dataset& d) {
    std::uniform_int_distribution<int> c(0, 3);
    std::vector<int> out(d.size());
    for (int& v : out) v = c(rng);
    return out;
  };
  const RobustnessReport r = robustness_eval(random_guess, ds, 1);
  const double p = 0.75, sigma = std::sqrt(p * (1 - p) / (25.0 * double(ds.size())));
  EXPECT_LE(std::abs(r.mce - p), 3 * sigma);
}

TEST(Robustness, ReportMeans) {
  RobustnessReport r;
  for (Corruption c : kCorruptionSuite)
    for (int s = 1; s <= 5; ++s) r.rows.push_back({c, s, 0.1 * s + (c == Corruption::Pixelate ? 0.5 : 0.0)});
  EXPECT_NEAR(r.severity_mean(2), 0.2 + 0.1, 1e-12);
  EXPECT_NEAR(r.type_mean(Corruption::Brightness), 0.3, 1e-12);
  EXPECT_NEAR(r.type_mean(Corruption::Pixelate), 0.8, 1e-12);
}
