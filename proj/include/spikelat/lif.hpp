#pragma once

// Iterative leaky integrate-and-fire dynamics with soft reset.
//
//   u_pre[t]  = tau * u[t-1] + I[t]
//   s[t]      = H(u_pre[t] - v_th),  H(0) = 1
//   u[t]      = u_pre[t] - s[t] * v_th
//
// The Heaviside derivative is replaced in the backward pass by a rectangular
// window g(x) = 1/a on |x| <= a/2.

#include <optional>
#include <string>

#include "spikelat/autodiff.hpp"

namespace spikelat {

struct LifConfig {
  double tau_leak = 0.5;
  double v_th = 1.0;
  double surrogate_width = 1.0;
  // Treat the reset term s[t]*v_th as a constant in the backward pass.
  bool detach_reset = false;

  void validate() const {
    if (!(tau_leak > 0.0 && tau_leak <= 1.0))
      throw ContractError("lif.tau_leak must lie in (0,1], got " + std::to_string(tau_leak));
    if (!(v_th > 0.0)) throw ContractError("lif.v_th must be positive");
    if (!(surrogate_width > 0.0)) throw ContractError("lif.surrogate_width must be positive");
  }
};

inline double surrogate_grad(double x, double width) {
  return std::abs(x) <= 0.5 * width ? 1.0 / width : 0.0;
}

struct LifStep {
  Tensor u_pre;
  Tensor spikes;
  Tensor u_next;
};

inline LifStep lif_step(const Tensor& u_prev, const Tensor& input_current, const LifConfig& cfg) {
  u_prev.require_same(input_current, "lif_step");
  LifStep r{Tensor(u_prev.shape()), Tensor(u_prev.shape()), Tensor(u_prev.shape())};
  for (std::size_t i = 0; i < u_prev.size(); ++i) {
    const double u = cfg.tau_leak * u_prev[i] + input_current[i];
    const double s = u >= cfg.v_th ? 1.0 : 0.0;
    r.u_pre[i] = u;
    r.spikes[i] = s;
    r.u_next[i] = u - s * cfg.v_th;
  }
  return r;
}

// Spikes and pre-reset potentials carry the time axis first: [T, ...].
struct LifTrace {
  Tensor spikes;
  Tensor pre_reset_potentials;
  Tensor final_potential;
};

namespace detail {

inline Shape step_shape(const Tensor& currents, std::size_t steps) {
  if (steps == 0) throw ContractError("LIF unroll needs T >= 1");
  if (currents.rank() == 0 || currents.dim(0) % steps != 0)
    throw DimensionError("LIF input " + shape_str(currents.shape()) +
                         " has no leading time axis divisible by T=" + std::to_string(steps));
  Shape s = currents.shape();
  s[0] /= steps;
  return s;
}

// Runs the recurrence over `steps` equal blocks of `currents`.
inline LifTrace run_lif(const Tensor& currents, std::size_t steps, const LifConfig& cfg,
                        const Tensor* u0) {
  cfg.validate();
  const Shape per = step_shape(currents, steps);
  const std::size_t block = shape_size(per);
  Tensor u = u0 ? *u0 : Tensor(per);
  if (u.size() != block)
    throw DimensionError("LIF initial potential " + shape_str(u.shape()) +
                         " does not match step shape " + shape_str(per));
  LifTrace tr{Tensor(currents.shape()), Tensor(currents.shape()), Tensor(per)};
  for (std::size_t t = 0; t < steps; ++t)
    for (std::size_t i = 0; i < block; ++i) {
      const std::size_t idx = t * block + i;
      const double up = cfg.tau_leak * u[i] + currents[idx];
      const double s = up >= cfg.v_th ? 1.0 : 0.0;
      tr.pre_reset_potentials[idx] = up;
      tr.spikes[idx] = s;
      u[i] = up - s * cfg.v_th;
    }
  tr.final_potential = Tensor(per, std::move(u.storage()));
  return tr;
}

}  // namespace detail

// input_currents[T, ...]; u0 defaults to the resting potential 0.
inline LifTrace lif_unroll(const Tensor& input_currents, const LifConfig& cfg,
                           const std::optional<Tensor>& u0 = std::nullopt) {
  if (input_currents.rank() == 0) throw ContractError("lif_unroll needs a time axis");
  return detail::run_lif(input_currents, input_currents.dim(0), cfg, u0 ? &*u0 : nullptr);
}

inline Tensor surrogate_backward(const Tensor& upstream, const Tensor& u_pre, const LifConfig& cfg) {
  upstream.require_same(u_pre, "surrogate_backward");
  Tensor out(upstream.shape());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = upstream[i] * surrogate_grad(u_pre[i] - cfg.v_th, cfg.surrogate_width);
  return out;
}

// Graph op: currents[T*B, ...] laid out time-major (block t holds step t for
// every sample). Returns the spike train; BPTT runs through both the spike
// path (surrogate) and the membrane recurrence.
inline Var lif(Var currents, std::size_t steps, const LifConfig& cfg, LifTrace* trace = nullptr) {
  LifTrace tr = detail::run_lif(currents.value(), steps, cfg, nullptr);
  Tensor spikes = tr.spikes;
  const std::size_t block = currents.value().size() / steps;
  Tensor u_pre = tr.pre_reset_potentials;
  if (trace) *trace = std::move(tr);
  return currents.tape().record(
      OpKind::Lif, {currents}, std::move(spikes),
      [u_pre = std::move(u_pre), steps, block, cfg](const Tensor& g, std::span<Tensor* const> pg) {
        std::vector<double> du_next(block, 0.0);
        for (std::size_t t = steps; t-- > 0;)
          for (std::size_t i = 0; i < block; ++i) {
            const std::size_t idx = t * block + i;
            const double sg = surrogate_grad(u_pre[idx] - cfg.v_th, cfg.surrogate_width);
            const double reset = cfg.detach_reset ? 1.0 : 1.0 - cfg.v_th * sg;
            const double dup = g[idx] * sg + du_next[i] * reset;
            (*pg[0])[idx] += dup;
            du_next[i] = cfg.tau_leak * dup;
          }
      });
}

}  // namespace spikelat
