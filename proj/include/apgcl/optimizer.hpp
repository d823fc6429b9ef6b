#pragma once

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>

#include "apgcl/params.hpp"

namespace apgcl {

enum class OptimizerKind { adamw, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adamw;
  double lr = 5e-4;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// cosine decay over one task: step in [0, total)
inline double cosine_lr(double lr0, int step, int total_steps) {
  if (total_steps <= 1) return lr0;
  double frac = static_cast<double>(step) / static_cast<double>(total_steps - 1);
  return lr0 * 0.5 * (1.0 + std::cos(3.141592653589793238462643383279502884 * frac));
}

namespace detail {
// biases and layernorm scales are excluded from weight decay
inline bool decays(const std::string& name) {
  auto ends_with = [&](const char* suffix) {
    std::string s(suffix);
    return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
  };
  return !(ends_with(".bias") || ends_with(".gamma") || ends_with(".beta"));
}
}  // namespace detail

// Moments are kept per parameter name and grown in place when a parameter
// is extended (candidate list, classifier rows): the old moment values stay
// a bit-exact prefix and new slots start at zero, so earlier classes keep
// their adaptive state across extensions.
template <class T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig cfg) : cfg_(cfg) {}

  const OptimizerConfig& config() const { return cfg_; }

  void step(ParameterSet<T>& params, const std::map<std::string, Mat<T>>& grads, double lr) {
    ++t_;
    for (auto& [name, e] : params) {
      if (!e.trainable) continue;
      auto git = grads.find(name);
      if (git == grads.end())
        throw std::out_of_range("Optimizer: no gradient for trainable parameter '" + name + "'");
      const Mat<T>& g = git->second;
      if (!g.same_shape(e.value))
        throw std::invalid_argument("Optimizer: gradient shape mismatch for '" + name + "'");
      if (cfg_.kind == OptimizerKind::sgd) {
        for (std::size_t i = 0; i < e.value.v.size(); ++i)
          e.value.v[i] -= static_cast<T>(lr) * g.v[i];
        continue;
      }
      Mat<T>& m = fit(m_, name, e.value);
      Mat<T>& v = fit(v_, name, e.value);
      const double b1 = cfg_.beta1, b2 = cfg_.beta2;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(t_));
      const double bc2 = 1.0 - std::pow(b2, static_cast<double>(t_));
      const double wd = detail::decays(name) ? cfg_.weight_decay : 0.0;
      for (std::size_t i = 0; i < e.value.v.size(); ++i) {
        double gi = static_cast<double>(g.v[i]);
        double mi = b1 * static_cast<double>(m.v[i]) + (1.0 - b1) * gi;
        double vi = b2 * static_cast<double>(v.v[i]) + (1.0 - b2) * gi * gi;
        m.v[i] = static_cast<T>(mi);
        v.v[i] = static_cast<T>(vi);
        double update = (mi / bc1) / (std::sqrt(vi / bc2) + cfg_.eps);
        double w = static_cast<double>(e.value.v[i]);
        e.value.v[i] = static_cast<T>(w - lr * update - lr * wd * w);
      }
    }
  }

  std::int64_t step_count() const { return t_; }

 private:
  // returns the moment matrix, grown to match the parameter if it was
  // extended since the last step (flat prefix preserved)
  Mat<T>& fit(std::map<std::string, Mat<T>>& store, const std::string& name,
              const Mat<T>& param) {
    auto it = store.find(name);
    if (it == store.end()) it = store.emplace(name, Mat<T>(param.rows, param.cols)).first;
    Mat<T>& m = it->second;
    if (!m.same_shape(param)) {
      // row growth (weights, candidates) or single-row column growth (biases)
      bool rows_grew = m.cols == param.cols && m.rows <= param.rows;
      bool bias_grew = m.rows == 1 && param.rows == 1 && m.cols <= param.cols;
      if (!rows_grew && !bias_grew)
        throw std::invalid_argument("Optimizer: parameter '" + name +
                                    "' changed shape in an unsupported way: " + shape_str(m) +
                                    " -> " + shape_str(param));
      Mat<T> grown(param.rows, param.cols);
      for (std::size_t i = 0; i < m.v.size(); ++i) grown.v[i] = m.v[i];
      m = std::move(grown);
    }
    return m;
  }

  OptimizerConfig cfg_;
  std::map<std::string, Mat<T>> m_, v_;
  std::int64_t t_ = 0;
};

}  // namespace apgcl
