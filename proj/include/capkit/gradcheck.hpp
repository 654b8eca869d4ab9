#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "capkit/optim.hpp"
#include "capkit/tensor.hpp"

namespace capkit {

struct GradCheckOptions {
  double step = 1e-5;
  double floor = 1e-8;
};

inline double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max(floor, std::abs(analytic) + std::abs(numeric));
}

namespace detail {

inline double checked_eval(const std::function<Tensor()>& f) {
  const double v = f().item();
  if (!std::isfinite(v)) throw std::domain_error("gradient check: function value is not finite");
  return v;
}

}  // namespace detail

/// Max relative error between backward() and central differences over the
/// selected coordinates of `inputs`. `loss` must rebuild its graph from the
/// current tensor values on every call.
struct Coordinate {
  std::size_t tensor;
  std::size_t index;
};

inline double gradient_check(const std::function<Tensor()>& loss, std::vector<Tensor> inputs,
                             const std::vector<Coordinate>& coords, GradCheckOptions opt = {}) {
  for (auto& t : inputs) t.zero_grad();
  const Tensor out = loss();
  if (!std::isfinite(out.item())) throw std::domain_error("gradient check: function value is not finite");
  out.backward();
  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                       : std::vector<double>(t.size(), 0.0));
  }
  double worst = 0.0;
  NoGradGuard no_grad;
  for (const auto& c : coords) {
    auto data = inputs.at(c.tensor).mutable_data();
    const double orig = data[c.index];
    data[c.index] = orig + opt.step;
    const double fp = detail::checked_eval(loss);
    data[c.index] = orig - opt.step;
    const double fm = detail::checked_eval(loss);
    data[c.index] = orig;
    const double numeric = (fp - fm) / (2.0 * opt.step);
    worst = std::max(worst, relative_error(analytic[c.tensor][c.index], numeric, opt.floor));
  }
  return worst;
}

/// Every coordinate of a single input tensor.
inline double gradient_check(const std::function<Tensor(const Tensor&)>& f, Tensor x,
                             GradCheckOptions opt = {}) {
  if (x.is_leaf()) x.set_requires_grad(true);
  std::vector<Coordinate> coords;
  for (std::size_t i = 0; i < x.size(); ++i) coords.push_back({0, i});
  return gradient_check([&] { return f(x); }, {x}, coords, opt);
}

/// `samples` random coordinates drawn across all parameters, weighted by size.
inline double gradient_check_sampled(const std::function<Tensor()>& loss, const std::vector<Tensor>& params,
                                     std::size_t samples, Rng& rng, GradCheckOptions opt = {}) {
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  std::vector<Coordinate> coords;
  for (std::size_t s = 0; s < samples; ++s) {
    std::size_t flat = static_cast<std::size_t>(rng.below(total));
    std::size_t t = 0;
    while (flat >= params[t].size()) flat -= params[t++].size();
    coords.push_back({t, flat});
  }
  return gradient_check(loss, params, coords, opt);
}

}  // namespace capkit
