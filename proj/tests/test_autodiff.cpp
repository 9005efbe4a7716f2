#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "spikelat/autodiff.hpp"
#include "support.hpp"

using namespace spikelat;
using spikelat::testing::gradient_rel_error;
using spikelat::testing::random_tensor;

namespace {

constexpr int kInstances = 20;
constexpr double kGradTol = 1e-5;

Tensor conv_reference(const Tensor& x, const Tensor& k, std::size_t stride, std::size_t pad) {
  const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t O = k.dim(0), K = k.dim(2);
  const std::size_t Ho = (H + 2 * pad - K) / stride + 1, Wo = (W + 2 * pad - K) / stride + 1;
  Tensor y({N, O, Ho, Wo});
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t o = 0; o < O; ++o)
      for (std::size_t i = 0; i < Ho; ++i)
        for (std::size_t j = 0; j < Wo; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c)
            for (std::size_t a = 0; a < K; ++a)
              for (std::size_t b = 0; b < K; ++b) {
                const long yy = static_cast<long>(i * stride + a) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + b) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(H) || xx >= static_cast<long>(W)) continue;
                s += x.at(n, c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx)) * k.at(o, c, a, b);
              }
          y.at(n, o, i, j) = s;
        }
  return y;
}

}  // namespace

TEST(Tensor, RejectsZeroDimensionAndLengthMismatch) {
  EXPECT_THROW(Tensor({2, 0}), DimensionError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor({2, 3}).reshaped({4, 2}), DimensionError);
  EXPECT_EQ(Tensor({2, 3}).reshaped({3, 2}).shape(), (Shape{3, 2}));
}

TEST(Linear, IdentityWeight) {
  Tape t;
  Var y = linear(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({2, 2}, {1, 0, 0, 1})), t.leaf(Tensor({2})));
  EXPECT_EQ(y.value(), Tensor({1, 2}, {1, 2}));
}

TEST(Linear, HandMatrixMultiply) {
  Tape t;
  Var y = linear(t.leaf(Tensor({1, 2}, {1, 1})), t.leaf(Tensor({2, 2}, {2, 3, 4, 5})), t.leaf(Tensor({2}, {1, 1})));
  EXPECT_EQ(y.value(), Tensor({1, 2}, {7, 9}));
}

TEST(Linear, UpstreamSelectsWeightGradient) {
  Tape t;
  Var x = t.leaf(Tensor({1, 2}, {1, 2}), true);
  Var w = t.leaf(Tensor({2, 2}, {0.3, -0.2, 0.5, 0.1}), true);
  Var b = t.leaf(Tensor({2}), true);
  t.backward(weighted_sum(linear(x, w, b), Tensor({1, 2}, {1, 0})));
  EXPECT_DOUBLE_EQ(w.grad().at(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(w.grad().at(1, 0), 2.0);
  EXPECT_DOUBLE_EQ(w.grad().at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(b.grad()[0], 1.0);
}

TEST(Linear, ShapeMismatchIsDimensionError) {
  Tape t;
  EXPECT_THROW(linear(t.leaf(Tensor({1, 3})), t.leaf(Tensor({2, 2})), t.leaf(Tensor({2}))), DimensionError);
  EXPECT_THROW(linear(t.leaf(Tensor({1, 2})), t.leaf(Tensor({2, 2})), t.leaf(Tensor({3}))), DimensionError);
}

TEST(Linear, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t n = 1 + i % 3, in = 2 + i % 4, out = 1 + i % 5;
    const Tensor up = random_tensor({n, out}, rng);
    const double err = gradient_rel_error(
        {random_tensor({n, in}, rng), random_tensor({in, out}, rng), random_tensor({out}, rng)},
        [&](Tape&, const std::vector<Var>& v) { return weighted_sum(linear(v[0], v[1], v[2]), up); });
    EXPECT_LE(err, kGradTol) << "instance " << i;
  }
}

TEST(Conv2d, SumKernel) {
  Tape t;
  Var y = conv2d(t.leaf(Tensor({1, 1, 3, 3}, 1.0)), t.leaf(Tensor({1, 1, 3, 3}, 1.0)), 1, 0);
  EXPECT_EQ(y.value(), Tensor({1, 1, 1, 1}, {9}));
}

TEST(Conv2d, DeltaKernelIsIdentity) {
  std::mt19937_64 rng(3);
  const Tensor x = random_tensor({2, 1, 5, 4}, rng);
  Tensor k({1, 1, 3, 3});
  k.at(0, 0, 1, 1) = 1.0;
  Tape t;
  EXPECT_EQ(conv2d(t.leaf(x), t.leaf(k), 1, 1).value(), x);
}

TEST(Conv2d, MatchesSlidingWindowSum) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({1, 1, 4, 4}, rng), k = random_tensor({1, 1, 2, 2}, rng);
  Tape t;
  const Tensor y = conv2d(t.leaf(x), t.leaf(k), 1, 0).value();
  ASSERT_EQ(y.shape(), (Shape{1, 1, 3, 3}));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double direct = x.at(0, 0, i, j) * k.at(0, 0, 0, 0) + x.at(0, 0, i, j + 1) * k.at(0, 0, 0, 1) +
                            x.at(0, 0, i + 1, j) * k.at(0, 0, 1, 0) + x.at(0, 0, i + 1, j + 1) * k.at(0, 0, 1, 1);
      EXPECT_NEAR(y.at(0, 0, i, j), direct, 1e-14);
    }
}

TEST(Conv2d, MatchesBruteForceOverGeometries) {
  std::mt19937_64 rng(5);
  for (std::size_t stride : {1, 2})
    for (std::size_t pad : {0, 1, 2})
      for (std::size_t k : {1, 2, 3}) {
        const Tensor x = random_tensor({2, 3, 6, 5}, rng), w = random_tensor({4, 3, k, k}, rng);
        Tape t;
        EXPECT_LE(max_abs_diff(conv2d(t.leaf(x), t.leaf(w), stride, pad).value(), conv_reference(x, w, stride, pad)),
                  1e-12);
      }
}

TEST(Conv2d, KernelLargerThanPaddedInput) {
  Tape t;
  EXPECT_THROW(conv2d(t.leaf(Tensor({1, 1, 2, 2})), t.leaf(Tensor({1, 1, 5, 5})), 1, 1), DimensionError);
  EXPECT_THROW(conv2d(t.leaf(Tensor({1, 2, 4, 4})), t.leaf(Tensor({1, 1, 3, 3})), 1, 1), DimensionError);
}

TEST(Conv2d, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(12);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t stride = 1 + i % 2, pad = i % 3, k = 1 + i % 3, c = 1 + i % 2;
    const Tensor x = random_tensor({2, c, 5, 4}, rng), w = random_tensor({2, c, k, k}, rng);
    Tape probe;
    const Shape ys = conv2d(probe.leaf(x), probe.leaf(w), stride, pad).value().shape();
    const Tensor up = random_tensor(ys, rng);
    const double err = gradient_rel_error({x, w}, [&](Tape&, const std::vector<Var>& v) {
      return weighted_sum(conv2d(v[0], v[1], stride, pad), up);
    });
    EXPECT_LE(err, kGradTol) << "instance " << i;
  }
}

TEST(BatchNorm, NormalizedInputPassesThrough) {
  // Two samples per channel at +-1: mean 0, biased variance 1.
  Tensor x({2, 2, 1, 1}, {1.0, -1.0, -1.0, 1.0});
  BatchNormStats st{Tensor({2}), Tensor({2}, 1.0)};
  Tape t;
  const Tensor y = batchnorm2d(t.leaf(x), t.leaf(Tensor({2}, 1.0)), t.leaf(Tensor({2})), st, NormMode::Train).value();
  // |y - x| <= |x| * (1 - 1/sqrt(1 + eps))
  EXPECT_LE(max_abs_diff(y, x), 1.0 - 1.0 / std::sqrt(1.0 + 1e-5) + 1e-15);
}

TEST(BatchNorm, ConstantChannelGivesBeta) {
  Tensor x({3, 2, 2, 2}, 4.2);
  BatchNormStats st{Tensor({2}), Tensor({2}, 1.0)};
  Tape t;
  const Tensor y =
      batchnorm2d(t.leaf(x), t.leaf(Tensor({2}, {1.5, 2.0})), t.leaf(Tensor({2}, {0.25, -0.5})), st, NormMode::Train)
          .value();
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t i = 0; i < 4; ++i) {
      EXPECT_DOUBLE_EQ(y[(n * 2 + 0) * 4 + i], 0.25);
      EXPECT_DOUBLE_EQ(y[(n * 2 + 1) * 4 + i], -0.5);
    }
}

TEST(BatchNorm, RunningStatisticsUseMomentum) {
  Tensor x({2, 1, 1, 2}, {1, 2, 3, 4});
  BatchNormStats st{Tensor({1}), Tensor({1}, 1.0)};
  Tape t;
  batchnorm2d(t.leaf(x), t.leaf(Tensor({1}, 1.0)), t.leaf(Tensor({1})), st, NormMode::Train);
  EXPECT_NEAR(st.mean[0], 0.1 * 2.5, 1e-15);
  EXPECT_NEAR(st.var[0], 0.9 + 0.1 * (5.0 / 3.0), 1e-15);  // unbiased batch variance
  Tape e;
  const Tensor y = batchnorm2d(e.leaf(x), e.leaf(Tensor({1}, 1.0)), e.leaf(Tensor({1})), st, NormMode::Eval).value();
  EXPECT_NEAR(y[0], (1.0 - st.mean[0]) / std::sqrt(st.var[0] + 1e-5), 1e-14);
}

TEST(BatchNorm, ChannelMismatchIsDimensionError) {
  BatchNormStats st{Tensor({3}), Tensor({3}, 1.0)};
  Tape t;
  EXPECT_THROW(batchnorm2d(t.leaf(Tensor({1, 2, 2, 2})), t.leaf(Tensor({3})), t.leaf(Tensor({3})), st, NormMode::Train),
               DimensionError);
}

TEST(BatchNorm, GradientOfMeanMatchesFiniteDifferences) {
  std::mt19937_64 rng(13);
  for (int i = 0; i < kInstances; ++i) {
    const Tensor x = random_tensor({3, 2, 2, 3}, rng), g = random_tensor({2}, rng, 0.5, 1.5),
                 b = random_tensor({2}, rng);
    const double err = gradient_rel_error({x, g, b}, [&](Tape&, const std::vector<Var>& v) {
      BatchNormStats st{Tensor({2}), Tensor({2}, 1.0)};
      return mean(batchnorm2d(v[0], v[1], v[2], st, NormMode::Train));
    });
    EXPECT_LE(err, kGradTol) << "instance " << i;
  }
}

TEST(BatchNorm, TrainAndEvalGradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  for (int i = 0; i < kInstances; ++i) {
    const NormMode mode = i % 2 ? NormMode::Eval : NormMode::Train;
    const Tensor x = random_tensor({2, 3, 3, 2}, rng), g = random_tensor({3}, rng, 0.5, 1.5),
                 b = random_tensor({3}, rng), up = random_tensor({2, 3, 3, 2}, rng);
    const Tensor rm = random_tensor({3}, rng), rv = random_tensor({3}, rng, 0.5, 2.0);
    const double err = gradient_rel_error({x, g, b}, [&](Tape&, const std::vector<Var>& v) {
      BatchNormStats st{rm, rv};
      return weighted_sum(batchnorm2d(v[0], v[1], v[2], st, mode), up);
    });
    EXPECT_LE(err, kGradTol) << "instance " << i;
  }
}

TEST(Sigmoid, ClosedForms) {
  Tape t;
  const Tensor y = sigmoid(t.leaf(Tensor({4}, {0.0, std::log(3.0), 800.0, -800.0}))).value();
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_NEAR(y[1], 0.75, 1e-15);
  EXPECT_EQ(y[2], 1.0);
  EXPECT_TRUE(std::isfinite(y[3]));
  EXPECT_GE(y[3], 0.0);
}

TEST(Sigmoid, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(15);
  for (int i = 0; i < kInstances; ++i) {
    const Tensor x = random_tensor({2, 4}, rng, -4, 4), up = random_tensor({2, 4}, rng);
    EXPECT_LE(gradient_rel_error({x}, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(sigmoid(v[0]), up); }),
              kGradTol);
  }
}

TEST(Softmax, ClosedForms) {
  const Tensor a = softmax_rows(Tensor({1, 2}, {0.0, 0.0}));
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  const Tensor b = softmax_rows(Tensor({1, 3}, {0.0, std::log(2.0), std::log(3.0)}));
  EXPECT_NEAR(b[0], 1.0 / 6, 1e-15);
  EXPECT_NEAR(b[1], 2.0 / 6, 1e-15);
  EXPECT_NEAR(b[2], 3.0 / 6, 1e-15);
}

TEST(Softmax, ShiftInvariantAndRowsSumToOne) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 50; ++i) {
    Tensor x = random_tensor({3, 5}, rng, -5, 5);
    const Tensor p = softmax_rows(x);
    Tensor shifted = x;
    for (double& v : shifted.data()) v += 17.25;
    EXPECT_LE(max_abs_diff(softmax_rows(shifted), p), 1e-12);
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 5; ++c) s += p.at(r, c);
      EXPECT_NEAR(s, 1.0, 1e-12);
    }
  }
  const Tensor big = softmax_rows(Tensor({1, 2}, {1000.0, 0.0}));
  EXPECT_TRUE(big.all_finite());
}

TEST(Softmax, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(16);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t c = 1 + i % 5;
    const Tensor x = random_tensor({2, c}, rng, -3, 3), up = random_tensor({2, c}, rng);
    EXPECT_LE(
        gradient_rel_error({x}, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(softmax_rows(v[0]), up); }),
        kGradTol);
  }
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t n = 1 + i % 4, c = 2 + i % 4;
    std::vector<int> labels(n);
    for (std::size_t j = 0; j < n; ++j) labels[j] = static_cast<int>((i + j) % c);
    EXPECT_LE(gradient_rel_error({random_tensor({n, c}, rng, -3, 3)},
                                 [&](Tape&, const std::vector<Var>& v) { return cross_entropy(v[0], labels); }),
              kGradTol);
  }
}

TEST(CrossEntropy, LabelOutOfRange) {
  Tape t;
  EXPECT_THROW(cross_entropy(t.leaf(Tensor({1, 3})), {3}), ContractError);
  EXPECT_THROW(cross_entropy(t.leaf(Tensor({1, 3})), {-1}), ContractError);
}

TEST(ElementwiseOps, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(18);
  for (int i = 0; i < kInstances; ++i) {
    const Tensor a = random_tensor({2, 3}, rng), b = random_tensor({2, 3}, rng), up = random_tensor({3, 2}, rng);
    EXPECT_LE(gradient_rel_error({a, b},
                                 [&](Tape&, const std::vector<Var>& v) {
                                   return weighted_sum(reshape(add(scale(v[0], -1.7), v[1]), {3, 2}), up);
                                 }),
              kGradTol);
    EXPECT_LE(gradient_rel_error({a}, [&](Tape&, const std::vector<Var>& v) { return sum(scale(v[0], 2.5)); }), kGradTol);
    EXPECT_LE(gradient_rel_error({a}, [&](Tape&, const std::vector<Var>& v) { return mean(v[0]); }), kGradTol);
  }
}

TEST(AvgPool, ForwardAndGradient) {
  Tape t;
  const Tensor y = avgpool2d(t.leaf(Tensor({1, 1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8})), 2).value();
  EXPECT_EQ(y, Tensor({1, 1, 1, 2}, {3.5, 5.5}));
  std::mt19937_64 rng(19);
  for (int i = 0; i < kInstances; ++i) {
    const Tensor x = random_tensor({2, 2, 4, 5}, rng);
    const std::size_t k = 1 + i % 2;
    Tape probe;
    const Tensor up = random_tensor(avgpool2d(probe.leaf(x), k).value().shape(), rng);
    EXPECT_LE(gradient_rel_error({x}, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(avgpool2d(v[0], k), up); }),
              kGradTol);
  }
}

TEST(TimeMean, ForwardAndGradient) {
  Tape t;
  const Tensor y = time_mean(t.leaf(Tensor({2, 1, 2}, {1, 2, 3, 6})), 2).value();
  EXPECT_EQ(y, Tensor({1, 2}, {2, 4}));
  std::mt19937_64 rng(20);
  for (int i = 0; i < kInstances; ++i) {
    const std::size_t T = 1 + i % 4;
    const Tensor x = random_tensor({T, 2, 3}, rng), up = random_tensor({2, 3}, rng);
    EXPECT_LE(gradient_rel_error({x}, [&](Tape&, const std::vector<Var>& v) { return weighted_sum(time_mean(v[0], T), up); }),
              kGradTol);
  }
}

TEST(Backward, SumOfLeafGivesOnes) {
  Tape t;
  Var x = t.leaf(Tensor({2, 3}, 0.7), true);
  t.backward(sum(x));
  EXPECT_EQ(x.grad(), Tensor({2, 3}, 1.0));
}

TEST(Backward, SharedWeightAccumulatesAcrossSteps) {
  std::mt19937_64 rng(7);
  const Tensor w0 = random_tensor({2, 2}, rng), b0 = random_tensor({2}, rng);
  std::vector<Tensor> xs;
  for (int s = 0; s < 3; ++s) xs.push_back(random_tensor({1, 2}, rng));

  Tape t;
  Var w = t.leaf(w0, true), b = t.leaf(b0, true);
  Var total;
  for (int s = 0; s < 3; ++s) {
    Var l = sum(linear(t.leaf(xs[s]), w, b));
    total = s == 0 ? l : add(total, l);
  }
  t.backward(total);

  Tensor expect({2, 2});
  for (int s = 0; s < 3; ++s) {
    Tape one;
    Var ws = one.leaf(w0, true);
    one.backward(sum(linear(one.leaf(xs[s]), ws, one.leaf(b0))));
    expect += ws.grad();
  }
  EXPECT_LE(max_abs_diff(w.grad(), expect), 1e-15);
}

TEST(Backward, TwoLayerChainMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  const double err = gradient_rel_error(
      {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng), random_tensor({5}, rng), random_tensor({5, 3}, rng),
       random_tensor({3}, rng)},
      [](Tape&, const std::vector<Var>& v) {
        return cross_entropy(linear(sigmoid(linear(v[0], v[1], v[2])), v[3], v[4]), {0, 2, 1});
      });
  EXPECT_LE(err, 1e-6);
}

TEST(Backward, NonScalarRootIsContractError) {
  Tape t;
  Var x = t.leaf(Tensor({2}), true);
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(Backward, ForeignParentIsGraphError) {
  Tape a, b;
  Var x = a.leaf(Tensor({1, 2}), true);
  EXPECT_THROW(add(b.leaf(Tensor({1, 2})), x), GraphError);
}

TEST(Backward, NonFiniteValueIsNumericError) {
  Tape t;
  EXPECT_THROW(scale(t.leaf(Tensor({1}, 1e308)), 10.0), NumericError);
}

TEST(Backward, DeterministicBitwise) {
  std::mt19937_64 rng(9);
  const Tensor x = random_tensor({2, 3, 5, 5}, rng), k = random_tensor({4, 3, 3, 3}, rng);
  auto run = [&] {
    Tape t;
    Var kv = t.leaf(k, true);
    t.backward(mean(sigmoid(conv2d(t.leaf(x), kv, 1, 1))));
    return kv.grad();
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, SplitBatchGradientsAdd) {
  std::mt19937_64 rng(10);
  const Tensor x = random_tensor({4, 3}, rng), w = random_tensor({3, 2}, rng), b = random_tensor({2}, rng);
  const std::vector<int> y{0, 1, 1, 0};
  auto grad_w = [&](std::size_t lo, std::size_t hi) {
    Tape t;
    Var wv = t.leaf(w, true);
    Var out = linear(t.leaf(x.rows(lo, hi)), wv, t.leaf(b));
    // Sum of per-sample losses.
    t.backward(scale(cross_entropy(out, std::vector<int>(y.begin() + lo, y.begin() + hi)), double(hi - lo)));
    return wv.grad();
  };
  Tensor halves = grad_w(0, 2);
  halves += grad_w(2, 4);
  EXPECT_LE(max_abs_diff(halves, grad_w(0, 4)), 1e-10);
}

TEST(MacCounter, CountsLinearAndConv) {
  Tape t;
  linear(t.leaf(Tensor({3, 4})), t.leaf(Tensor({4, 5})), t.leaf(Tensor({5})));
  EXPECT_EQ(t.mac_count(), 3u * 4 * 5);
  conv2d(t.leaf(Tensor({2, 1, 2, 2})), t.leaf(Tensor({2, 1, 3, 3})), 1, 1);
  EXPECT_EQ(t.mac_count(), 60u + 2 * 72);
}
