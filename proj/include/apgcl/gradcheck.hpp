#pragma once

#include <cmath>
#include <string>

#include "apgcl/params.hpp"
#include "apgcl/tape.hpp"

namespace apgcl {

template <class T>
struct GradCheckResult {
  T max_rel_err = T(0);
  std::string worst_param;
  int worst_index = -1;
};

template <class U, class T>
ParameterSet<U> cast_params(const ParameterSet<T>& params) {
  ParameterSet<U> out;
  for (const auto& [name, e] : params) {
    Mat<U> m(e.value.rows, e.value.cols);
    for (std::size_t i = 0; i < m.v.size(); ++i) m.v[i] = static_cast<U>(e.value.v[i]);
    out.add(name, std::move(m), e.trainable);
  }
  return out;
}

// Compares the analytic (tape) gradient at precision T against a central
// finite-difference oracle for every trainable parameter entry.
//
// The numeric oracle always runs at 64-bit: at float32 the difference
// f(w+eps)-f(w-eps) is quantized away for small gradients, so the probe
// side needs the headroom while the analytic side is exercised at the
// precision under test. `build` must therefore be a generic callable
// (Tape<U>&, const Bound<U>&) -> Var<U>; inputs that are not parameters
// belong in the ParameterSet as non-trainable entries.
template <class T, class Builder>
GradCheckResult<T> check_gradient(Builder&& build, const ParameterSet<T>& params, T eps) {
  // analytic pass at precision T
  Tape<T> tape;
  Bound<T> bound = bind_all(tape, params);
  Var<T> loss = build(tape, bound);
  if (!std::isfinite(static_cast<double>(loss.scalar())))
    throw std::runtime_error("check_gradient: non-finite loss");
  tape.backward(loss);
  auto grads = collect_grads(bound);

  // numeric probes at 64-bit
  ParameterSet<double> probe = cast_params<double>(params);
  auto eval = [&]() -> double {
    Tape<double> t;
    Bound<double> b = bind_all(t, probe);
    double v = build(t, b).scalar();
    if (!std::isfinite(v))
      throw std::runtime_error("check_gradient: non-finite loss at probe point");
    return v;
  };

  const double deps = static_cast<double>(eps);
  GradCheckResult<T> result;
  for (auto& [name, e] : probe) {
    if (!e.trainable) continue;
    Mat<double>& value = e.value;
    const Mat<T>& analytic = grads.at(name);
    for (std::size_t i = 0; i < value.v.size(); ++i) {
      double saved = value.v[i];
      value.v[i] = saved + deps;
      double fp = eval();
      value.v[i] = saved - deps;
      double fm = eval();
      value.v[i] = saved;
      double numeric = (fp - fm) / (2.0 * deps);
      double rel = std::abs(static_cast<double>(analytic.v[i]) - numeric) /
                   (std::abs(numeric) + 1e-8);
      if (rel > static_cast<double>(result.max_rel_err)) {
        result.max_rel_err = static_cast<T>(rel);
        result.worst_param = name;
        result.worst_index = static_cast<int>(i);
      }
    }
  }
  return result;
}

}  // namespace apgcl
