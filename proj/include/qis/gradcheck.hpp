#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "qis/nn.hpp"
#include "qis/tape.hpp"

namespace qis {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool pass = false;
};

// Builder constructs a scalar loss on the given tape, binding params it uses.
using LossBuilder = std::function<Var(Tape&, ParamStore&)>;

// Central differences (f(p+eps) - f(p-eps)) / (2 eps) per coordinate vs tape
// gradients. Relative error uses a small floor so near-zero gradients compare
// against finite-difference noise, not against zero.
inline GradCheckReport grad_check(ParamStore& params, const LossBuilder& build,
                                  double eps = 1e-5, double tol = 1e-4) {
  if (eps <= 0.0) throw std::invalid_argument("grad_check: eps must be positive");

  auto eval = [&](ParamStore& ps) {
    Tape t;
    Var loss = build(t, ps);
    if (t.val(loss).size() != 1)
      throw std::invalid_argument("grad_check: loss must be scalar-valued");
    return t.val(loss)[0];
  };

  // Analytic pass.
  Tape t;
  Var loss = build(t, params);
  if (t.val(loss).size() != 1)
    throw std::invalid_argument("grad_check: loss must be scalar-valued");
  t.backward(loss);
  std::map<std::string, Array> analytic;
  for (auto& [name, id] : t.params()) analytic[name] = t.grad(Var{id});

  GradCheckReport rep;
  for (auto& [name, g] : analytic) {
    Array& p = params.at(name);
    for (std::size_t i = 0; i < p.size(); ++i) {
      double saved = p[i];
      p[i] = saved + eps;
      double fp = eval(params);
      p[i] = saved - eps;
      double fm = eval(params);
      p[i] = saved;
      double num = (fp - fm) / (2.0 * eps);
      double ana = g[i];
      double denom = std::max({std::fabs(ana), std::fabs(num), 1e-4});
      double rel = std::fabs(ana - num) / denom;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_param = name;
        rep.worst_index = i;
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
  }
  rep.pass = rep.max_rel_error < tol;
  return rep;
}

}  // namespace qis
