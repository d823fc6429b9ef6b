#pragma once

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "apgcl/matrix.hpp"
#include "apgcl/tape.hpp"

namespace apgcl {

// Named parameter store. Iteration order is the lexical name order
// (std::map), which keeps binding and updates deterministic.
template <class T>
class ParameterSet {
 public:
  struct Entry {
    Mat<T> value;
    bool trainable = true;
  };

  Mat<T>& add(const std::string& name, Mat<T> value, bool trainable = true) {
    auto [it, inserted] = entries_.emplace(name, Entry{std::move(value), trainable});
    if (!inserted) throw std::invalid_argument("ParameterSet: duplicate name '" + name + "'");
    return it->second.value;
  }

  bool has(const std::string& name) const { return entries_.count(name) != 0; }

  Mat<T>& at(const std::string& name) { return entry(name).value; }
  const Mat<T>& at(const std::string& name) const { return entry(name).value; }

  bool trainable(const std::string& name) const { return entry(name).trainable; }
  void set_trainable(const std::string& name, bool v) { entry(name).trainable = v; }

  // flips the flag on every parameter whose name starts with prefix
  void set_trainable_prefix(const std::string& prefix, bool v) {
    for (auto& [name, e] : entries_)
      if (name.rfind(prefix, 0) == 0) e.trainable = v;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, e] : entries_) out.push_back(name);
    return out;
  }

  std::size_t count() const { return entries_.size(); }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end())
      throw std::out_of_range("ParameterSet: no parameter '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    return const_cast<ParameterSet*>(this)->entry(name);
  }

  std::map<std::string, Entry> entries_;
};

// Per-step view: every parameter bound as a tape leaf.
template <class T>
struct Bound {
  Tape<T>* tape = nullptr;
  std::map<std::string, Var<T>> vars;

  Var<T> operator[](const std::string& name) const {
    auto it = vars.find(name);
    if (it == vars.end()) throw std::out_of_range("Bound: no parameter '" + name + "'");
    return it->second;
  }
};

template <class T>
Bound<T> bind_all(Tape<T>& tape, const ParameterSet<T>& params) {
  Bound<T> b;
  b.tape = &tape;
  for (const auto& [name, e] : params) b.vars.emplace(name, tape.leaf(e.value));
  return b;
}

// After backward(): gradient matrices for every bound parameter.
template <class T>
std::map<std::string, Mat<T>> collect_grads(const Bound<T>& bound) {
  std::map<std::string, Mat<T>> out;
  for (const auto& [name, var] : bound.vars) out.emplace(name, var.grad());
  return out;
}

}  // namespace apgcl
