// SPDX-License-Identifier: Apache-2.0
#pragma once

// Closed-form communication totals. Units are element counts unless the
// caller scales them to bytes (4 per f32 element).

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>

#include "msdino/error.hpp"

namespace msdino {

enum class CostUnit { elements, bytes };

inline CostUnit parse_cost_unit(const std::string& s) {
  if (s == "elements") return CostUnit::elements;
  if (s == "bytes") return CostUnit::bytes;
  throw ParameterError("unit must be elements or bytes, got '" + s + "'");
}

inline double unit_scale(CostUnit u) { return u == CostUnit::bytes ? 4.0 : 1.0; }

inline std::uint64_t aggregation_rounds(std::uint64_t rounds, std::uint64_t interval) {
  if (interval == 0) throw ParameterError("cost: aggregation interval r must be >= 1");
  return (rounds + interval - 1) / interval;
}

/// Student and teacher weights, both directions, once per aggregation.
inline double fl_cost(std::uint64_t rounds, std::uint64_t interval, double params) {
  if (params < 0) throw ParameterError("cost: P must be >= 0");
  return 4.0 * double(aggregation_rounds(rounds, interval)) * params;
}

/// One feature upload per data item plus one model download.
inline double msdino_cost(double data, double features, double params) {
  if (data < 0 || features < 0 || params < 0) throw ParameterError("cost: D, F and P must be >= 0");
  return data * features + params;
}

struct CostInputs {
  double D = 0;  // data items
  double F = 0;  // feature units per item
  double P = 0;  // model units in the MS-DINO download
  std::optional<double> P_fl;  // model units exchanged by FL; defaults to P
  std::uint64_t R = 0;
  std::uint64_t r = 1;
  CostUnit unit = CostUnit::elements;

  double fl_params() const { return P_fl.value_or(P); }
};

struct CostReport {
  double t_fl = 0;
  double t_msdino = 0;
  std::optional<double> ratio;                     // t_msdino / t_fl; unset when t_fl == 0
  std::optional<std::uint64_t> break_even_rounds;  // unset when the FL model is empty
};

inline CostReport cost_report(const CostInputs& in) {
  CostReport out;
  const double s = unit_scale(in.unit);
  out.t_fl = fl_cost(in.R, in.r, in.fl_params()) * s;
  out.t_msdino = msdino_cost(in.D, in.F, in.P) * s;
  if (out.t_fl > 0) out.ratio = out.t_msdino / out.t_fl;
  if (in.fl_params() > 0) {
    const double x = double(in.r) * msdino_cost(in.D, in.F, in.P) / (4.0 * in.fl_params());
    out.break_even_rounds = static_cast<std::uint64_t>(std::ceil(x));
  }
  return out;
}

}  // namespace msdino
