// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "msdino/tensor.hpp"

namespace msdino {

/// Named parameter collection. Iteration is lexicographic by name.
/// Copies share tensors; clone() makes an independent deep copy.
template <typename T>
class ParamSet {
 public:
  using Map = std::map<std::string, Tensor<T>>;

  void add(const std::string& name, Tensor<T> t) {
    if (!entries_.emplace(name, std::move(t)).second)
      throw ContractError("duplicate parameter name: " + name);
  }
  void set(const std::string& name, Tensor<T> t) { entries_[name] = std::move(t); }

  const Tensor<T>& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("missing parameter: " + name);
    return it->second;
  }
  Tensor<T>& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("missing parameter: " + name);
    return it->second;
  }
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }

  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, t] : entries_) n += t.numel();
    return n;
  }

  ParamSet clone() const {
    ParamSet out;
    for (const auto& [name, t] : entries_) {
      auto c = t.clone();
      c.set_requires_grad(t.requires_grad());
      out.entries_.emplace(name, std::move(c));
    }
    return out;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, t] : entries_) out.add(name, t.template cast<U>());
    return out;
  }

  /// Entries whose name starts with `prefix` (shared, not copied).
  ParamSet with_prefix(std::string_view prefix) const {
    ParamSet out;
    for (const auto& [name, t] : entries_)
      if (std::string_view(name).substr(0, prefix.size()) == prefix) out.entries_.emplace(name, t);
    return out;
  }

  /// Union with `other`; names must not collide.
  void merge(const ParamSet& other) {
    for (const auto& [name, t] : other) add(name, t);
  }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : entries_) t.set_requires_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : entries_) t.zero_grad();
  }

  bool same_shapes(const ParamSet& other) const {
    if (size() != other.size()) return false;
    for (auto a = begin(), b = other.begin(); a != end(); ++a, ++b)
      if (a->first != b->first || a->second.dims() != b->second.dims()) return false;
    return true;
  }

  /// FNV-1a over names and raw value bytes.
  std::uint64_t hash() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
      const auto* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ull;
      }
    };
    for (const auto& [name, t] : entries_) {
      mix(name.data(), name.size());
      mix(t.data().data(), t.numel() * sizeof(T));
    }
    return h;
  }

  bool bit_equal(const ParamSet& other) const {
    if (!same_shapes(other)) return false;
    for (auto a = begin(), b = other.begin(); a != end(); ++a, ++b)
      if (std::memcmp(a->second.data().data(), b->second.data().data(), a->second.numel() * sizeof(T)) != 0)
        return false;
    return true;
  }

 private:
  Map entries_;
};

// ---------------------------------------------------------------------------
// AdamW

struct AdamWHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  /// When false, rank-1 tensors (biases, norms, tokens) are not decayed.
  bool decay_vectors = true;
};

template <typename T>
struct AdamState {
  std::map<std::string, std::vector<T>> m;
  std::map<std::string, std::vector<T>> v;
  long step = 0;
};

/// One decoupled-weight-decay Adam update using each parameter's grad slot.
/// With weight_decay = 0 this is plain Adam.
template <typename T>
void adamw_step(ParamSet<T>& params, AdamState<T>& state, const AdamWHyper& hyper) {
  for (const auto& [name, t] : params)
    if (!t.has_grad()) throw ContractError("adamw_step: no gradient for parameter " + name);
  ++state.step;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));
  for (auto& [name, t] : params) {
    auto& m = state.m[name];
    auto& v = state.v[name];
    if (m.size() != t.numel()) {
      m.assign(t.numel(), T{0});
      v.assign(t.numel(), T{0});
    }
    const bool decay = hyper.weight_decay != 0.0 && (hyper.decay_vectors || t.rank() > 1);
    const T shrink = static_cast<T>(1.0 - hyper.lr * hyper.weight_decay);
    auto p = t.data();
    auto g = t.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = static_cast<T>(hyper.beta1) * m[i] + static_cast<T>(1.0 - hyper.beta1) * g[i];
      v[i] = static_cast<T>(hyper.beta2) * v[i] + static_cast<T>(1.0 - hyper.beta2) * g[i] * g[i];
      if (decay) p[i] *= shrink;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= static_cast<T>(hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates = 0;
  std::vector<double> analytic_all;  // every coordinate, parameter-name order
  std::vector<double> numeric_all;

  /// Same statistic with a different absolute floor in the denominator.
  double max_rel_error_with_floor(double floor) const {
    double m = 0.0;
    for (std::size_t i = 0; i < analytic_all.size(); ++i)
      m = std::max(m, std::abs(analytic_all[i] - numeric_all[i]) / std::max(floor, std::abs(analytic_all[i])));
    return m;
  }

  double max_abs_error() const {
    double m = 0.0;
    for (std::size_t i = 0; i < analytic_all.size(); ++i) m = std::max(m, std::abs(analytic_all[i] - numeric_all[i]));
    return m;
  }
};

enum class Stencil {
  central,     // (f(x+h) - f(x-h)) / 2h
  five_point,  // fourth-order: (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h
};

/// Compares backward() against finite differences for every coordinate of
/// every parameter. Relative error is |analytic - numeric| / max(1e-8, |analytic|).
/// `f` must build a recorded scalar from `params` and be deterministic.
template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>(ParamSet<T>&)>& f, ParamSet<T>& params, T h,
                           Stencil stencil = Stencil::central) {
  params.set_requires_grad(true);
  for (auto& [_, t] : params) t.clear_grad();
  backward(f(params));

  GradCheckReport report;
  for (auto& [name, t] : params) {
    const std::vector<T> analytic(t.grad().begin(), t.grad().end());
    auto values = t.data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const T orig = values[i];
      auto at = [&](T offset) {
        values[i] = orig + offset;
        return static_cast<double>(f(params).item());
      };
      double numeric;
      {
        NoGradGuard guard;
        if (stencil == Stencil::central)
          numeric = (at(h) - at(-h)) / (2.0 * h);
        else
          numeric = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12.0 * h);
        values[i] = orig;
      }
      const double a = analytic[i];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a));
      ++report.coordinates;
      report.analytic_all.push_back(a);
      report.numeric_all.push_back(numeric);
      if (err > report.max_rel_error || !std::isfinite(err)) {
        report.max_rel_error = std::isfinite(err) ? err : INFINITY;
        report.worst_param = name;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace msdino
