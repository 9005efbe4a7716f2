#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "spikelat/autodiff.hpp"

namespace spikelat::testing {

inline Tensor random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  std::uniform_real_distribution<double> d(lo, hi);
  for (double& v : t.data()) v = d(rng);
  return t;
}

using GraphFn = std::function<Var(Tape&, const std::vector<Var>&)>;

// Norm-wise relative error ||a - n|| / max(||a||, ||n||) between the tape's
// gradient and central differences, over all inputs taken together.
inline double gradient_rel_error(const std::vector<Tensor>& inputs, const GraphFn& f, double h = 1e-6) {
  Tape tape;
  std::vector<Var> leaves;
  for (const auto& x : inputs) leaves.push_back(tape.leaf(x, true));
  tape.backward(f(tape, leaves));

  auto eval = [&](const std::vector<Tensor>& xs) {
    Tape t;
    std::vector<Var> l;
    for (const auto& x : xs) l.push_back(t.leaf(x, true));
    return f(t, l).value().item();
  };

  double diff = 0.0, na = 0.0, nn = 0.0;
  std::vector<Tensor> xs = inputs;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = leaves[k].grad();
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double up = eval(xs);
      xs[k][i] = orig - h;
      const double down = eval(xs);
      xs[k][i] = orig;
      const double numeric = (up - down) / (2 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
  }
  return std::sqrt(diff) / std::max(std::sqrt(std::max(na, nn)), 1e-12);
}

inline double rel_diff(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300});
}

}  // namespace spikelat::testing
