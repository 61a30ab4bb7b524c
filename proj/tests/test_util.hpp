#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "rkm/tensor.hpp"

namespace testutil {

// Central-difference check of d(loss)/d(param) for every element of every
// param. loss_fn must be a pure function of the params' current data.
inline double max_fd_rel_error(std::vector<rkm::Tensor> params,
                               const std::function<rkm::Tensor()>& loss_fn,
                               double h = 1e-6) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    rkm::Tape tape;
    rkm::TapeScope scope(tape);
    rkm::Tensor loss = loss_fn();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (auto& p : params) {
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p.data()[i];
      p.data()[i] = saved + h;
      const double fp = loss_fn().item();
      p.data()[i] = saved - h;
      const double fm = loss_fn().item();
      p.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p.grad()[i];
      const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
      worst = std::max(worst, std::fabs(numeric - analytic) / denom);
    }
  }
  return worst;
}

// Same check on a random sample of parameter elements; for networks too large
// to difference exhaustively.
inline double sampled_fd_rel_error(std::vector<rkm::Tensor> params,
                                   const std::function<rkm::Tensor()>& loss_fn, rkm::Rng& rng,
                                   std::size_t n_samples, double h = 1e-6) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    rkm::Tape tape;
    rkm::TapeScope scope(tape);
    rkm::Tensor loss = loss_fn();
    tape.backward(loss);
  }
  double worst = 0.0;
  for (std::size_t s = 0; s < n_samples; ++s) {
    auto& p = params[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(params.size()) - 1))];
    const std::size_t i = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(p.size()) - 1));
    const double saved = p.data()[i];
    p.data()[i] = saved + h;
    const double fp = loss_fn().item();
    p.data()[i] = saved - h;
    const double fm = loss_fn().item();
    p.data()[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double analytic = p.grad()[i];
    const double denom = std::max({1.0, std::fabs(numeric), std::fabs(analytic)});
    worst = std::max(worst, std::fabs(numeric - analytic) / denom);
  }
  return worst;
}

}  // namespace testutil
