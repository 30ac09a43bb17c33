#pragma once

// Shared helpers for the test suite: random fixtures and a central-difference
// gradient checker over ParamStore<double>.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"
#include "emgait/nn.hpp"

namespace emgait::testing {

inline Mat<double> random_mat(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = nd(rng);
  return m;
}

struct GradReport {
  double max_rel = 0.0;
  std::string worst;
  long checked = 0;
};

// |a − n| / max(|a|, |n|, floor); the floor keeps entries whose true
// derivative is ~0 from dominating through rounding noise alone.
inline double relative_error(double a, double n, double floor) {
  return std::abs(a - n) / std::max({std::abs(a), std::abs(n), floor});
}

// Compares tape gradients of `loss` with central differences for up to
// `per_param` entries of every trainable parameter in `store`, plus any extra
// (matrix, grad-getter) inputs.
inline GradReport grad_check(ParamStore<double>& store, const std::function<Var(Tape<double>&)>& loss, double step = 1e-5,
                             std::size_t per_param = 24, double floor = 1e-4, std::uint64_t seed = 0) {
  store.zero_grad();
  {
    Tape<double> t;
    Var l = loss(t);
    t.backward(l);
  }
  auto eval = [&] {
    Tape<double> t;
    return t.value(loss(t))(0, 0);
  };
  GradReport rep;
  std::mt19937_64 rng(seed);
  for (auto& p : store.all()) {
    if (!p.trainable) continue;
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(p.value.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<Eigen::Index>(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > per_param) idx.resize(per_param);
    for (Eigen::Index i : idx) {
      double& w = p.value.data()[i];
      const double keep = w;
      w = keep + step;
      const double up = eval();
      w = keep - step;
      const double down = eval();
      w = keep;
      const double num = (up - down) / (2 * step);
      const double ana = p.grad.data()[i];
      const double e = relative_error(ana, num, floor);
      ++rep.checked;
      if (e > rep.max_rel) {
        rep.max_rel = e;
        rep.worst = p.name + "[" + std::to_string(i) + "] analytic=" + std::to_string(ana) + " numeric=" + std::to_string(num);
      }
    }
  }
  return rep;
}

// Random projection of an output matrix to a scalar, so every output entry
// contributes a distinct weight.
inline Var project(Tape<double>& t, Var out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const auto& v = t.value(out);
  return ops::weighted_sum(t, out, random_mat(v.rows(), v.cols(), rng));
}

}  // namespace emgait::testing
