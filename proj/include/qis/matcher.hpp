#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <utility>
#include <vector>

#include "qis/heads.hpp"
#include "qis/scene.hpp"
#include "qis/tape.hpp"

namespace qis {

struct CostWeights {
  double ce = 2.0;
  double bce = 5.0;
  double dice = 5.0;

  void validate() const {
    if (ce < 0.0 || bce < 0.0 || dice < 0.0)
      throw std::invalid_argument("cost weights must be nonnegative");
  }
};

struct CostMatrix {
  Array combined;  // K x K'
  Array ce, bce, dice;
  CostWeights weights;
};

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (query k, gt k')
  double total_cost = 0.0;

  // -1 when query k is unmatched
  std::vector<int> query_to_gt(std::size_t k) const {
    std::vector<int> m(k, -1);
    for (auto& [q, g] : pairs) m[q] = static_cast<int>(g);
    return m;
  }
};

inline double bce_cost(const double* m, const std::uint8_t* gt, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double p = Tape::clamp_prob(m[i]);
    s -= gt[i] ? std::log(p) : std::log(1.0 - p);
  }
  return s / static_cast<double>(n);
}

inline double dice_cost(const double* m, const std::uint8_t* gt, std::size_t n) {
  double inter = 0.0, sm = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    inter += m[i] * gt[i];
    sm += m[i];
    sg += gt[i];
  }
  return 1.0 - 2.0 * (inter + 1.0) / (sm + sg + 1.0);
}

// C = lambda_ce * (-p_k(c^gt)) + lambda_bce * BCE + lambda_dice * dice.
inline CostMatrix cost_matrix(const PredictionSet& pred, const GroundTruth& gt,
                              const CostWeights& w = {}) {
  w.validate();
  if (gt.count() < 1) throw std::invalid_argument("cost_matrix: K' must be >= 1");
  std::size_t k = pred.class_probs.rows();
  std::size_t kp = gt.count();
  std::size_t n = pred.soft_masks.cols();
  CostMatrix cm;
  cm.weights = w;
  cm.ce = Array({k, kp});
  cm.bce = Array({k, kp});
  cm.dice = Array({k, kp});
  cm.combined = Array({k, kp});
  for (std::size_t i = 0; i < k; ++i) {
    const double* mask = &pred.soft_masks.data[i * n];
    for (std::size_t j = 0; j < kp; ++j) {
      const GtInstance& inst = gt.instances[j];
      cm.ce(i, j) = -pred.class_probs(i, static_cast<std::size_t>(inst.class_id));
      cm.bce(i, j) = bce_cost(mask, inst.mask.data(), n);
      cm.dice(i, j) = dice_cost(mask, inst.mask.data(), n);
      cm.combined(i, j) = w.ce * cm.ce(i, j) + w.bce * cm.bce(i, j) + w.dice * cm.dice(i, j);
    }
  }
  return cm;
}

namespace detail {

// Jonker-Volgenant style shortest augmenting path; square matrix, O(n^3).
inline double solve_square_assignment(const std::vector<double>& cost, std::size_t n,
                                      std::vector<int>& rowsol) {
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  rowsol.assign(n, -1);
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j]) rowsol[p[j] - 1] = static_cast<int>(j - 1);
  for (std::size_t i = 0; i < n; ++i) total += cost[i * n + rowsol[i]];
  return total;
}

// Optimal total of C with rectangular padding; `forbid[i*kp+j]` masks entries.
inline double padded_optimum(const Array& c, const std::vector<char>* forbid,
                             std::vector<int>* rowsol_out) {
  std::size_t k = c.rows(), kp = c.cols(), n = std::max(k, kp);
  double mx = 0.0;
  for (double v : c.data) mx = std::max(mx, std::fabs(v));
  double pad = mx + 1.0;
  double big = 4.0 * n * (mx + 1.0) + 1.0;  // worse than any full real assignment
  std::vector<double> sq(n * n, pad);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < kp; ++j)
      sq[i * n + j] = (forbid && (*forbid)[i * kp + j]) ? big : c(i, j);
  std::vector<int> rowsol;
  double total = solve_square_assignment(sq, n, rowsol);
  if (rowsol_out) *rowsol_out = rowsol;
  // subtract the constant padding contribution
  return total - pad * static_cast<double>(n - std::min(k, kp));
}

}  // namespace detail

// Minimum-cost assignment of min(K, K') pairs. Among optima, returns the
// lexicographically smallest pair list (fixed row by row, lowest column first).
inline Assignment hungarian(const Array& c) {
  std::size_t k = c.rows(), kp = c.cols();
  if (k == 0 || kp == 0) throw std::invalid_argument("hungarian: empty cost matrix");
  for (double v : c.data)
    if (std::isnan(v)) throw std::invalid_argument("hungarian: NaN cost entry");

  double optimum = detail::padded_optimum(c, nullptr, nullptr);
  double tol = 1e-9 * std::max(1.0, std::fabs(optimum));

  std::vector<char> forbid(k * kp, 0);
  std::vector<char> col_taken(kp, 0);
  Assignment out;
  std::size_t matched = 0, want = std::min(k, kp);
  for (std::size_t i = 0; i < k && matched < want; ++i) {
    bool fixed = false;
    for (std::size_t j = 0; j < kp && !fixed; ++j) {
      if (col_taken[j]) continue;
      // force (i, j): forbid the rest of row i and column j
      std::vector<char> trial = forbid;
      for (std::size_t jj = 0; jj < kp; ++jj)
        if (jj != j) trial[i * kp + jj] = 1;
      for (std::size_t ii = 0; ii < k; ++ii)
        if (ii != i) trial[ii * kp + j] = 1;
      double t = detail::padded_optimum(c, &trial, nullptr);
      if (t <= optimum + tol) {
        forbid = std::move(trial);
        col_taken[j] = 1;
        out.pairs.emplace_back(i, j);
        out.total_cost += c(i, j);
        ++matched;
        fixed = true;
      }
    }
    if (!fixed) {
      // row i stays unmatched in every optimum extension; forbid it entirely
      for (std::size_t jj = 0; jj < kp; ++jj) forbid[i * kp + jj] = 1;
    }
  }
  return out;
}

struct LossBreakdown {
  double ce = 0.0, bce = 0.0, dice = 0.0, total = 0.0;
};

struct LossVars {
  Var ce, bce, dice, total;
};

// The combined set-prediction loss. Matched queries get CE toward their gt class plus mask
// terms; unmatched queries get CE toward "no object" at weight 0.1. CE is
// averaged over all K queries, mask terms over matched pairs. The assignment
// is a frozen forward-only decision.
inline LossVars set_prediction_loss(Tape& t, const PredictionVars& pred,
                                    const GroundTruth& gt, const Assignment& assign,
                                    const CostWeights& w = {},
                                    double no_object_weight = 0.1) {
  w.validate();
  const Array& probs = t.val(pred.class_probs);
  std::size_t k = probs.rows();
  std::size_t g = probs.cols() - 1;  // real classes
  std::size_t n = t.val(pred.soft_masks).cols();

  std::vector<std::size_t> targets(k, g);
  std::vector<double> weights(k, no_object_weight);
  std::vector<std::size_t> matched_queries;
  for (auto& [q, j] : assign.pairs) {
    if (q >= k || j >= gt.count())
      throw std::invalid_argument("loss: assignment out of range");
    targets[q] = static_cast<std::size_t>(gt.instances[j].class_id);
    weights[q] = 1.0;
    matched_queries.push_back(q);
  }

  LossVars out;
  out.ce = t.weighted_nll(pred.class_probs, targets, weights);
  if (matched_queries.empty()) {
    out.bce = t.constant(Array::scalar(0.0));
    out.dice = t.constant(Array::scalar(0.0));
  } else {
    Array gt_masks({matched_queries.size(), n});
    for (std::size_t r = 0; r < assign.pairs.size(); ++r) {
      const auto& inst = gt.instances[assign.pairs[r].second];
      for (std::size_t i = 0; i < n; ++i)
        gt_masks(r, i) = static_cast<double>(inst.mask[i]);
    }
    Var matched = t.gather_rows(pred.soft_masks, matched_queries);
    out.bce = t.bce_mean(matched, gt_masks);
    out.dice = t.scale(t.sum(t.dice_rows(matched, std::move(gt_masks))),
                       1.0 / static_cast<double>(matched_queries.size()));
  }
  out.total = t.add(t.add(t.scale(out.ce, w.ce), t.scale(out.bce, w.bce)),
                    t.scale(out.dice, w.dice));
  return out;
}

inline LossBreakdown breakdown(const Tape& t, const LossVars& l) {
  return {t.val(l.ce)[0], t.val(l.bce)[0], t.val(l.dice)[0], t.val(l.total)[0]};
}

}  // namespace qis
