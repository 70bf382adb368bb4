#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/heads.hpp"
#include "qis/scene.hpp"

namespace qis {

inline double mask_iou(const std::vector<std::uint8_t>& a,
                       const std::vector<std::uint8_t>& b) {
  if (a.size() != b.size()) throw std::invalid_argument("mask_iou: length mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a[i] && b[i];
    uni += a[i] || b[i];
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Rank-order greedy matching: each prediction takes the unmatched same-class
// gt with highest IoU if IoU >= threshold (TP), else FP; each gt matched once.
inline std::vector<int> match_greedy(const std::vector<InstanceResult>& preds,
                                     const GroundTruth& gt, double iou_threshold) {
  std::vector<char> taken(gt.count(), 0);
  std::vector<int> labels(preds.size(), 0);
  for (std::size_t p = 0; p < preds.size(); ++p) {
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < gt.count(); ++j) {
      if (taken[j] || gt.instances[j].class_id != preds[p].class_label) continue;
      double iou = mask_iou(preds[p].mask, gt.instances[j].mask);
      if (iou > best) {
        best = iou;
        best_j = j;
      }
    }
    if (best >= iou_threshold) {
      labels[p] = 1;
      taken[best_j] = 1;
    }
  }
  return labels;
}

// Area under the PR curve with the all-point (monotone envelope) interpolation.
// Inputs need not be sorted; ranking is by score descending, stable.
inline double average_precision(std::vector<int> labels, std::vector<double> scores,
                                std::size_t num_gt) {
  if (labels.size() != scores.size())
    throw std::invalid_argument("average_precision: labels/scores length mismatch");
  if (num_gt == 0) return labels.empty() ? 0.0 : 0.0;
  std::vector<std::size_t> order(labels.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < order.size(); ++r) {
    tp += labels[order[r]] ? 1 : 0;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  // precision envelope: monotonically non-increasing from the right
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < precision.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct EvalReport {
  std::map<int, double> ap_per_class;    // averaged over IoU 0.50:0.05:0.95
  std::map<int, double> ap50_per_class;  // at IoU 0.50
  double mean_ap = 0.0;
  double mean_ap50 = 0.0;
};

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.50 + 0.05 * i);
  return t;
}

inline GroundTruth filter_gt(const GroundTruth& gt, int cls) {
  GroundTruth out;
  for (const auto& inst : gt.instances)
    if (inst.class_id == cls) out.instances.push_back(inst);
  return out;
}

inline EvalReport evaluate(const std::vector<std::vector<InstanceResult>>& results,
                           const std::vector<GroundTruth>& gts,
                           const std::vector<double>& thresholds = default_iou_thresholds()) {
  if (results.size() != gts.size())
    throw std::invalid_argument("evaluate: scene list length mismatch");

  std::map<int, std::size_t> gt_count;
  for (const auto& gt : gts)
    for (const auto& inst : gt.instances) ++gt_count[inst.class_id];

  EvalReport rep;
  for (auto& [cls, num_gt] : gt_count) {
    double ap_sum = 0.0;
    for (double thr : thresholds) {
      std::vector<int> labels;
      std::vector<double> scores;
      for (std::size_t s = 0; s < results.size(); ++s) {
        std::vector<InstanceResult> preds;
        for (const auto& r : results[s])
          if (r.class_label == cls) preds.push_back(r);
        // per-scene matching consumes rank order; results come pre-sorted by
        // score from assemble(), keep that order within the scene
        std::vector<int> scene_labels = match_greedy(preds, filter_gt(gts[s], cls), thr);
        for (std::size_t p = 0; p < preds.size(); ++p) {
          labels.push_back(scene_labels[p]);
          scores.push_back(preds[p].score);
        }
      }
      double ap = average_precision(labels, scores, num_gt);
      ap_sum += ap;
      if (thr == thresholds.front()) rep.ap50_per_class[cls] = ap;
    }
    rep.ap_per_class[cls] = ap_sum / static_cast<double>(thresholds.size());
  }

  for (auto& [cls, ap] : rep.ap_per_class) rep.mean_ap += ap;
  for (auto& [cls, ap] : rep.ap50_per_class) rep.mean_ap50 += ap;
  if (!rep.ap_per_class.empty()) {
    rep.mean_ap /= static_cast<double>(rep.ap_per_class.size());
    rep.mean_ap50 /= static_cast<double>(rep.ap50_per_class.size());
  }
  return rep;
}

inline void write_report(const EvalReport& rep, std::ostream& os) {
  for (auto& [cls, ap] : rep.ap_per_class)
    os << "metric." << cls << ".AP = " << detail::format_double(ap) << "\n";
  for (auto& [cls, ap] : rep.ap50_per_class)
    os << "metric." << cls << ".AP50 = " << detail::format_double(ap) << "\n";
  os << "metric.mean.AP = " << detail::format_double(rep.mean_ap) << "\n";
  os << "metric.mean.AP50 = " << detail::format_double(rep.mean_ap50) << "\n";
}

inline void write_report(const EvalReport& rep, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_report(rep, f);
}

}  // namespace qis
