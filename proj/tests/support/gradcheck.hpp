#pragma once

// Central-difference gradient checking against the autograd tape.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "osuda/rng.hpp"
#include "osuda/tensor.hpp"

namespace osuda::testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a floor so that two tiny numbers that agree are not
// reported as mismatched.
inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// f rebuilds the scalar loss from the current leaf values. Every element of
// every leaf is checked unless `max_per_leaf` caps it (then a random subset).
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> leaves, double h = 1e-5,
                                 std::size_t max_per_leaf = 0, std::uint64_t seed = 0) {
  for (auto& l : leaves) l.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (const auto& l : leaves) {
    if (l.has_grad()) {
      analytic.emplace_back(l.grad().begin(), l.grad().end());
    } else {
      analytic.emplace_back(l.numel(), 0.0);
    }
  }
  GradCheck out;
  Rng rng(seed);
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    auto data = leaves[k].mutable_data();
    std::vector<std::size_t> idx(data.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (max_per_leaf > 0 && idx.size() > max_per_leaf) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_per_leaf);
    }
    for (std::size_t i : idx) {
      const double saved = data[i];
      double plus, minus;
      {
        NoGradGuard ng;
        data[i] = saved + h;
        plus = f().item();
        data[i] = saved - h;
        minus = f().item();
      }
      data[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      out.max_rel_error = std::max(out.max_rel_error, rel_error(analytic[k][i], numeric));
      ++out.checked;
    }
  }
  for (auto& l : leaves) l.zero_grad();
  return out;
}

inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = d(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for ops with a kink or pole there.
inline Tensor random_away_from_zero(Rng& rng, Shape shape, double lo, double hi, bool requires_grad = true) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = sign(rng) ? d(rng) : -d(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

// A fixed random projection turns any tensor into a scalar with a
// non-uniform upstream gradient.
inline Tensor project(const Tensor& t, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(t, random_tensor(rng, t.shape(), -1.0, 1.0, false)));
}

}  // namespace osuda::testing
