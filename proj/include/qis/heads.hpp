#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "qis/nn.hpp"
#include "qis/scene.hpp"
#include "qis/tape.hpp"

namespace qis {

struct PredictionVars {
  Var class_logits;     // K x (G+1), last column = "no object"
  Var class_probs;      // softmax of logits
  Var mask_embeddings;  // K x C
  Var soft_masks;       // K x N in (0,1)
};

struct PredictionSet {
  Array class_probs;
  Array soft_masks;
};

struct InstanceResult {
  int class_label = -1;            // argmax over the G real classes
  double confidence = 0.0;         // c_k
  std::vector<std::uint8_t> mask;  // b_k = m_k > tau
  double score = 0.0;              // s_k
  bool kept = false;
};

inline void init_heads(ParamStore& ps, std::size_t channels, std::size_t num_classes,
                       Rng& rng) {
  init_linear(ps, "heads.cls", channels, num_classes + 1, rng);
  init_mlp(ps, "heads.mask", {channels, channels, channels, channels}, rng);
}

inline PredictionVars predict(Tape& t, Var q_final, Var f, ParamStore& ps) {
  if (t.val(q_final).cols() != t.val(f).cols())
    throw std::invalid_argument("predict: query/embedding channel mismatch");
  PredictionVars out;
  out.class_logits = linear(t, q_final, ps, "heads.cls");
  out.class_probs = t.softmax_rows(out.class_logits);
  out.mask_embeddings = mlp_forward(t, q_final, ps, "heads.mask", 3);
  out.soft_masks = t.sigmoid(t.matmul_nt(out.mask_embeddings, f));  // K x N
  return out;
}

// s = c * (sum m.b) / (sum b); dropped when argmax is "no object" or the
// thresholded mask is empty.
inline InstanceResult score_instance(const double* probs, std::size_t num_classes,
                                     const double* soft_mask, std::size_t n, double tau) {
  if (tau <= 0.0 || tau >= 1.0) throw std::invalid_argument("score: tau must be in (0,1)");
  InstanceResult res;
  std::size_t argmax_all = 0;
  for (std::size_t g = 1; g <= num_classes; ++g)
    if (probs[g] > probs[argmax_all]) argmax_all = g;
  res.class_label = 0;
  for (std::size_t g = 1; g < num_classes; ++g)
    if (probs[g] > probs[res.class_label]) res.class_label = static_cast<int>(g);
  res.confidence = probs[res.class_label];

  res.mask.assign(n, 0);
  double kept_mass = 0.0;
  std::size_t kept_count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (soft_mask[i] > tau) {
      res.mask[i] = 1;
      kept_mass += soft_mask[i];
      ++kept_count;
    }
  }
  if (argmax_all == num_classes || kept_count == 0) {
    res.kept = false;
    res.score = 0.0;
    return res;
  }
  res.kept = true;
  res.score = res.confidence * kept_mass / static_cast<double>(kept_count);
  return res;
}

inline InstanceResult score_instance(const Array& probs_row, const Array& mask_row,
                                     double tau) {
  return score_instance(probs_row.data.data(), probs_row.size() - 1, mask_row.data.data(),
                        mask_row.size(), tau);
}

// Score every query, keep the survivors, sort by score descending. No NMS.
inline std::vector<InstanceResult> assemble(const PredictionSet& pred, double tau) {
  std::size_t k = pred.class_probs.rows();
  std::size_t n = pred.soft_masks.cols();
  std::size_t gp1 = pred.class_probs.cols();
  std::vector<InstanceResult> kept;
  for (std::size_t q = 0; q < k; ++q) {
    InstanceResult r = score_instance(&pred.class_probs.data[q * gp1], gp1 - 1,
                                      &pred.soft_masks.data[q * n], n, tau);
    if (r.kept) kept.push_back(std::move(r));
  }
  std::stable_sort(kept.begin(), kept.end(),
                   [](const InstanceResult& a, const InstanceResult& b) {
                     return a.score > b.score;
                   });
  return kept;
}

// ---- result dump ----
// `QISRES1 K=<kept> N=<int>`, then per instance `class=<int> score=<float>`
// followed by the binary mask as run-length `<start:len> ...` over indices.

inline void write_results(const std::vector<InstanceResult>& results, std::size_t n,
                          std::ostream& os) {
  os << "QISRES1 K=" << results.size() << " N=" << n << "\n";
  for (const auto& r : results) {
    os << "class=" << r.class_label << " score=" << detail::format_double(r.score)
       << "\n";
    bool first = true;
    for (std::size_t i = 0; i < r.mask.size();) {
      if (!r.mask[i]) {
        ++i;
        continue;
      }
      std::size_t start = i;
      while (i < r.mask.size() && r.mask[i]) ++i;
      if (!first) os << ' ';
      os << start << ':' << (i - start);
      first = false;
    }
    os << "\n";
  }
}

inline void write_results(const std::vector<InstanceResult>& results, std::size_t n,
                          const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path);
  write_results(results, n, f);
}

inline std::vector<InstanceResult> read_results(std::istream& is, std::size_t* n_out) {
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("empty results file");
  std::istringstream hs(line);
  std::string magic, ktok, ntok;
  hs >> magic >> ktok >> ntok;
  if (magic != "QISRES1" || ktok.rfind("K=", 0) != 0 || ntok.rfind("N=", 0) != 0)
    throw std::runtime_error("bad results header: '" + line + "'");
  std::size_t k = std::stoull(ktok.substr(2));
  std::size_t n = std::stoull(ntok.substr(2));
  if (n_out) *n_out = n;
  std::vector<InstanceResult> results;
  for (std::size_t i = 0; i < k; ++i) {
    if (!std::getline(is, line)) throw std::runtime_error("truncated results file");
    InstanceResult r;
    std::istringstream ls(line);
    std::string ctok, stok;
    ls >> ctok >> stok;
    if (ctok.rfind("class=", 0) != 0 || stok.rfind("score=", 0) != 0)
      throw std::runtime_error("bad instance line: '" + line + "'");
    r.class_label = std::stoi(ctok.substr(6));
    r.score = std::stod(stok.substr(6));
    r.kept = true;
    r.mask.assign(n, 0);
    if (!std::getline(is, line)) throw std::runtime_error("truncated results file");
    std::istringstream ms(line);
    std::string run;
    while (ms >> run) {
      auto colon = run.find(':');
      if (colon == std::string::npos)
        throw std::runtime_error("bad run-length token: '" + run + "'");
      std::size_t start = std::stoull(run.substr(0, colon));
      std::size_t len = std::stoull(run.substr(colon + 1));
      if (start + len > n) throw std::runtime_error("run exceeds N");
      for (std::size_t j = 0; j < len; ++j) r.mask[start + j] = 1;
    }
    results.push_back(std::move(r));
  }
  return results;
}

inline std::vector<InstanceResult> read_results(const std::string& path,
                                                std::size_t* n_out = nullptr) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open results file: " + path);
  return read_results(f, n_out);
}

}  // namespace qis
