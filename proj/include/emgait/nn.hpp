#pragma once

// Parameter ownership and the small layer vocabulary shared by every block.

#include <cmath>
#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "emgait/autograd.hpp"

namespace emgait {

inline constexpr double kLeakySlope = 0.1;

template <class T>
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;

  // Gaussian init with the given standard deviation (0 → zeros).
  Parameter<T>& add(const std::string& name, Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng,
                    bool trainable = true) {
    if (index_.count(name)) throw std::logic_error("duplicate parameter name: " + name);
    Parameter<T>& p = params_.emplace_back();
    p.name = name;
    p.trainable = trainable;
    p.value.resize(rows, cols);
    std::normal_distribution<double> nd(0.0, 1.0);
    for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = stddev == 0.0 ? T(0) : T(nd(rng) * stddev);
    p.zero_grad();
    index_[name] = params_.size() - 1;
    return p;
  }

  Parameter<T>& add_constant(const std::string& name, Eigen::Index rows, Eigen::Index cols, double value) {
    std::mt19937_64 unused;
    Parameter<T>& p = add(name, rows, cols, 0.0, unused);
    p.value.setConstant(T(value));
    return p;
  }

  Parameter<T>& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::deque<Parameter<T>>& all() { return params_; }
  const std::deque<Parameter<T>>& all() const { return params_; }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::size_t trainable_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      if (p.trainable) n += static_cast<std::size_t>(p.value.size());
    return n;
  }

 private:
  std::deque<Parameter<T>> params_;
  std::map<std::string, std::size_t> index_;
};

// Copies values between stores of possibly different scalar type, by name.
template <class To, class From>
void copy_parameters(ParamStore<To>& dst, const ParamStore<From>& src) {
  for (const auto& p : src.all()) dst.get(p.name).value = p.value.template cast<To>();
}

template <class T>
struct Linear {
  Parameter<T>* weight = nullptr;  // d_in × d_out
  Parameter<T>* bias = nullptr;    // 1 × d_out, absent for bias-free projections

  static Linear make(ParamStore<T>& store, const std::string& name, Eigen::Index din, Eigen::Index dout,
                     std::mt19937_64& rng, bool with_bias = true, double gain = 1.0, bool trainable = true) {
    Linear l;
    l.weight = &store.add(name + ".weight", din, dout, gain / std::sqrt(static_cast<double>(din)), rng, trainable);
    if (with_bias) l.bias = &store.add(name + ".bias", 1, dout, 0.0, rng, trainable);
    return l;
  }

  Var operator()(Tape<T>& t, Var x) const {
    Var y = ops::matmul(t, x, t.leaf(*weight));
    return bias ? ops::add_row(t, y, t.leaf(*bias)) : y;
  }
};

// Two affine layers with a LeakyReLU between them.
template <class T>
struct Mlp2 {
  Linear<T> first;
  Linear<T> second;

  static Mlp2 make(ParamStore<T>& store, const std::string& name, Eigen::Index din, Eigen::Index hidden,
                   Eigen::Index dout, std::mt19937_64& rng, double out_gain = 1.0) {
    return Mlp2{Linear<T>::make(store, name + ".0", din, hidden, rng, true, std::sqrt(2.0)),
                Linear<T>::make(store, name + ".1", hidden, dout, rng, true, out_gain)};
  }

  Var operator()(Tape<T>& t, Var x) const {
    return second(t, ops::leaky_relu(t, first(t, x), T(kLeakySlope)));
  }

  // Start as the identity map: lrelu(x) − lrelu(−x) = (1 + slope)·x, so hidden
  // units [x, −x] read back through ±1/(1 + slope) reproduce x. Extra hidden
  // units keep their random input weights and start with zero output weights.
  void init_identity() {
    const Eigen::Index d = first.weight->value.rows(), h = first.weight->value.cols();
    if (second.weight->value.cols() != d || h < 2 * d)
      throw Error(ErrorCode::config, "identity MLP init needs equal in/out widths and hidden >= 2 x width");
    auto& w1 = first.weight->value;
    auto& w2 = second.weight->value;
    w1.leftCols(2 * d).setZero();
    w1.leftCols(d).diagonal().setOnes();
    w1.middleCols(d, d).diagonal().setConstant(T(-1));
    w2.setZero();
    const T g = T(1.0 / (1.0 + kLeakySlope));
    w2.topRows(d).diagonal().setConstant(g);
    w2.middleRows(d, d).diagonal().setConstant(-g);
    if (first.bias) first.bias->value.setZero();
    if (second.bias) second.bias->value.setZero();
  }
};

template <class T>
struct LayerNormParams {
  Parameter<T>* gamma = nullptr;
  Parameter<T>* beta = nullptr;

  static LayerNormParams make(ParamStore<T>& store, const std::string& name, Eigen::Index width) {
    return LayerNormParams{&store.add_constant(name + ".gamma", 1, width, 1.0),
                           &store.add_constant(name + ".beta", 1, width, 0.0)};
  }

  Var operator()(Tape<T>& t, Var x) const { return ops::layer_norm(t, x, t.leaf(*gamma), t.leaf(*beta)); }
};

// Mixes an arbitrary list of integers into a 64-bit seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t p : parts) {
    h ^= p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    std::uint64_t z = h;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    h = z ^ (z >> 31);
  }
  return h;
}

}  // namespace emgait
