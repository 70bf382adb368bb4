#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "qis/array.hpp"

namespace qis {

// Probabilities fed to log() are clamped to [kProbClamp, 1-kProbClamp].
inline constexpr double kProbClamp = 1e-7;
inline constexpr double kLayerNormEps = 1e-5;

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

// Reverse-mode tape over Arrays. One tape per training step; backward
// replays records in exact reverse order of the forward pass.
class Tape {
 public:
  Var constant(Array v) { return push(std::move(v), nullptr); }

  Var param(const std::string& name, const Array& v) {
    auto it = params_.find(name);
    if (it != params_.end()) return Var{it->second};  // shared use, one node
    Var x = push(v, nullptr);
    params_[name] = x.id;
    return x;
  }

  const Array& val(Var x) const { return nodes_[x.id].value; }
  const Array& grad(Var x) const { return nodes_[x.id].grad; }

  const Array* grad_of(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) return nullptr;
    return &nodes_[it->second].grad;
  }

  const std::map<std::string, std::size_t>& params() const { return params_; }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    require_shape(val(a), val(b), "add");
    Array out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += val(b)[i];
    return push(std::move(out), [this, a, b](const Array& g, Array& /*y*/) {
      acc(a, g);
      acc(b, g);
    });
  }

  Var sub(Var a, Var b) {
    require_shape(val(a), val(b), "sub");
    Array out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= val(b)[i];
    return push(std::move(out), [this, a, b](const Array& g, Array& /*y*/) {
      acc(a, g);
      for (std::size_t i = 0; i < g.size(); ++i) nodes_[b.id].grad[i] -= g[i];
    });
  }

  Var mul(Var a, Var b) {
    require_shape(val(a), val(b), "mul");
    Array out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= val(b)[i];
    return push(std::move(out), [this, a, b](const Array& g, Array& /*y*/) {
      const Array& av = val(a);
      const Array& bv = val(b);
      for (std::size_t i = 0; i < g.size(); ++i) {
        nodes_[a.id].grad[i] += g[i] * bv[i];
        nodes_[b.id].grad[i] += g[i] * av[i];
      }
    });
  }

  Var scale(Var a, double s) {
    Array out = val(a);
    for (double& v : out.data) v *= s;
    return push(std::move(out), [this, a, s](const Array& g, Array&) {
      for (std::size_t i = 0; i < g.size(); ++i) nodes_[a.id].grad[i] += g[i] * s;
    });
  }

  Var mul_const(Var a, Array w) {  // elementwise scale by a fixed array
    require_shape(val(a), w, "mul_const");
    Array out = val(a);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= w[i];
    auto wp = std::make_shared<Array>(std::move(w));
    return push(std::move(out), [this, a, wp](const Array& g, Array&) {
      for (std::size_t i = 0; i < g.size(); ++i) nodes_[a.id].grad[i] += g[i] * (*wp)[i];
    });
  }

  // Broadcast a 1xC row over every row of a RxC matrix.
  Var add_rowvec(Var a, Var v) {
    const Array& av = val(a);
    const Array& vv = val(v);
    if (vv.rows() != 1 || vv.cols() != av.cols())
      throw std::invalid_argument("add_rowvec: bias must be 1 x cols");
    Array out = av;
    std::size_t r = av.rows(), c = av.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) += vv(0, j);
    return push(std::move(out), [this, a, v, r, c](const Array& g, Array&) {
      acc(a, g);
      Array& gv = nodes_[v.id].grad;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gv(0, j) += g(i, j);
    });
  }

  Var mul_rowvec(Var a, Var v) {
    const Array& av = val(a);
    const Array& vv = val(v);
    if (vv.rows() != 1 || vv.cols() != av.cols())
      throw std::invalid_argument("mul_rowvec: gain must be 1 x cols");
    Array out = av;
    std::size_t r = av.rows(), c = av.cols();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) *= vv(0, j);
    return push(std::move(out), [this, a, v, r, c](const Array& g, Array&) {
      const Array& avv = val(a);
      const Array& vvv = val(v);
      Array& ga = nodes_[a.id].grad;
      Array& gv = nodes_[v.id].grad;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) {
          ga(i, j) += g(i, j) * vvv(0, j);
          gv(0, j) += g(i, j) * avv(i, j);
        }
    });
  }

  // ---- matrix products ----

  Var matmul(Var a, Var b) {
    const Array& av = val(a);
    const Array& bv = val(b);
    if (av.cols() != bv.rows())
      throw std::invalid_argument("matmul: inner dims " + av.shape_str() + " vs " +
                                  bv.shape_str());
    std::size_t r = av.rows(), s = av.cols(), t = bv.cols();
    Array out({r, t});
    matmul_acc(av.data.data(), bv.data.data(), out.data.data(), r, s, t);
    return push(std::move(out), [this, a, b, r, s, t](const Array& g, Array&) {
      // dA += G B^T, dB += A^T G
      matmul_nt_acc(g.data.data(), val(b).data.data(), nodes_[a.id].grad.data.data(), r,
                    t, s);
      matmul_tn_acc(val(a).data.data(), g.data.data(), nodes_[b.id].grad.data.data(), r,
                    s, t);
    });
  }

  // a[R x S] * b[T x S]^T
  Var matmul_nt(Var a, Var b) {
    const Array& av = val(a);
    const Array& bv = val(b);
    if (av.cols() != bv.cols())
      throw std::invalid_argument("matmul_nt: inner dims " + av.shape_str() + " vs " +
                                  bv.shape_str());
    std::size_t r = av.rows(), s = av.cols(), t = bv.rows();
    Array out({r, t});
    matmul_nt_acc(av.data.data(), bv.data.data(), out.data.data(), r, s, t);
    return push(std::move(out), [this, a, b, r, s, t](const Array& g, Array&) {
      // dA += G B, dB += G^T A
      matmul_acc(g.data.data(), val(b).data.data(), nodes_[a.id].grad.data.data(), r, t,
                 s);
      matmul_tn_acc(g.data.data(), val(a).data.data(), nodes_[b.id].grad.data.data(), r,
                    t, s);
    });
  }

  // a[R x S]^T * b[R x T]
  Var matmul_tn(Var a, Var b) {
    const Array& av = val(a);
    const Array& bv = val(b);
    if (av.rows() != bv.rows())
      throw std::invalid_argument("matmul_tn: inner dims " + av.shape_str() + " vs " +
                                  bv.shape_str());
    std::size_t r = av.rows(), s = av.cols(), t = bv.cols();
    Array out({s, t});
    matmul_tn_acc(av.data.data(), bv.data.data(), out.data.data(), r, s, t);
    return push(std::move(out), [this, a, b, r, s, t](const Array& g, Array&) {
      // dA += B G^T, dB += A G
      matmul_nt_acc(val(b).data.data(), g.data.data(), nodes_[a.id].grad.data.data(), r,
                    t, s);
      matmul_acc(val(a).data.data(), g.data.data(), nodes_[b.id].grad.data.data(), r, s,
                 t);
    });
  }

  // out(i, j) = a(i, j) / s(i, 0); s is R x 1.
  Var div_rowscalar(Var a, Var s) {
    const Array& av = val(a);
    const Array& sv = val(s);
    if (sv.rows() != av.rows() || sv.cols() != 1)
      throw std::invalid_argument("div_rowscalar: divisor must be R x 1");
    std::size_t r = av.rows(), c = av.cols();
    Array out({r, c});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) = av(i, j) / sv(i, 0);
    return push(std::move(out), [this, a, s, r, c](const Array& g, Array& y) {
      Array& ga = nodes_[a.id].grad;
      Array& gs = nodes_[s.id].grad;
      const Array& sv = val(s);
      for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
          ga(i, j) += g(i, j) / sv(i, 0);
          gs(i, 0) -= g(i, j) * y(i, j) / sv(i, 0);
        }
      }
    });
  }

  // ---- nonlinearities ----

  Var relu(Var a) {
    Array out = val(a);
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    return push(std::move(out), [this, a](const Array& g, Array& y) {
      for (std::size_t i = 0; i < g.size(); ++i)
        if (y[i] > 0.0) nodes_[a.id].grad[i] += g[i];
    });
  }

  Var sigmoid(Var a) {
    Array out = val(a);
    for (double& v : out.data) {
      v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }
    return push(std::move(out), [this, a](const Array& g, Array& y) {
      for (std::size_t i = 0; i < g.size(); ++i)
        nodes_[a.id].grad[i] += g[i] * y[i] * (1.0 - y[i]);
    });
  }

  Var softmax_rows(Var a) {
    const Array& av = val(a);
    std::size_t r = av.rows(), c = av.cols();
    Array out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      double mx = av(i, 0);
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, av(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        out(i, j) = std::exp(av(i, j) - mx);
        z += out(i, j);
      }
      for (std::size_t j = 0; j < c; ++j) out(i, j) /= z;
    }
    return push(std::move(out), [this, a, r, c](const Array& g, Array& y) {
      Array& ga = nodes_[a.id].grad;
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g(i, j) * y(i, j);
        for (std::size_t j = 0; j < c; ++j) ga(i, j) += y(i, j) * (g(i, j) - dot);
      }
    });
  }

  Var layernorm_rows(Var a) {
    const Array& av = val(a);
    std::size_t r = av.rows(), c = av.cols();
    Array out({r, c});
    auto inv_sd = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < c; ++j) mu += av(i, j);
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (av(i, j) - mu) * (av(i, j) - mu);
      var /= static_cast<double>(c);
      double isd = 1.0 / std::sqrt(var + kLayerNormEps);
      (*inv_sd)[i] = isd;
      for (std::size_t j = 0; j < c; ++j) out(i, j) = (av(i, j) - mu) * isd;
    }
    return push(std::move(out), [this, a, r, c, inv_sd](const Array& g, Array& y) {
      Array& ga = nodes_[a.id].grad;
      for (std::size_t i = 0; i < r; ++i) {
        double gm = 0.0, gym = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
          gm += g(i, j);
          gym += g(i, j) * y(i, j);
        }
        gm /= static_cast<double>(c);
        gym /= static_cast<double>(c);
        for (std::size_t j = 0; j < c; ++j)
          ga(i, j) += (*inv_sd)[i] * (g(i, j) - gm - y(i, j) * gym);
      }
    });
  }

  // ---- reductions / structure ----

  Var sum(Var a) {
    double s = 0.0;
    for (double v : val(a).data) s += v;
    return push(Array::scalar(s), [this, a](const Array& g, Array&) {
      for (double& gv : nodes_[a.id].grad.data) gv += g[0];
    });
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(val(a).size())); }

  Var gather_rows(Var a, std::vector<std::size_t> idx) {
    const Array& av = val(a);
    std::size_t c = av.cols();
    Array out({idx.size(), c});
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < c; ++j) out(i, j) = av(idx[i], j);
    auto ip = std::make_shared<std::vector<std::size_t>>(std::move(idx));
    return push(std::move(out), [this, a, ip, c](const Array& g, Array&) {
      Array& ga = nodes_[a.id].grad;
      for (std::size_t i = 0; i < ip->size(); ++i)
        for (std::size_t j = 0; j < c; ++j) ga((*ip)[i], j) += g(i, j);
    });
  }

  // Mean of rows sharing a segment id; every segment in [0, nseg) must be nonempty.
  Var segment_mean(Var a, std::vector<std::size_t> seg, std::size_t nseg) {
    const Array& av = val(a);
    if (seg.size() != av.rows())
      throw std::invalid_argument("segment_mean: one segment id per row");
    std::size_t c = av.cols();
    Array out({nseg, c});
    std::vector<double> cnt(nseg, 0.0);
    for (std::size_t i = 0; i < seg.size(); ++i) {
      cnt[seg[i]] += 1.0;
      for (std::size_t j = 0; j < c; ++j) out(seg[i], j) += av(i, j);
    }
    for (std::size_t s = 0; s < nseg; ++s) {
      if (cnt[s] == 0.0) throw std::invalid_argument("segment_mean: empty segment");
      for (std::size_t j = 0; j < c; ++j) out(s, j) /= cnt[s];
    }
    auto sp = std::make_shared<std::vector<std::size_t>>(std::move(seg));
    auto cp = std::make_shared<std::vector<double>>(std::move(cnt));
    return push(std::move(out), [this, a, sp, cp, c](const Array& g, Array&) {
      Array& ga = nodes_[a.id].grad;
      for (std::size_t i = 0; i < sp->size(); ++i) {
        std::size_t s = (*sp)[i];
        for (std::size_t j = 0; j < c; ++j) ga(i, j) += g(s, j) / (*cp)[s];
      }
    });
  }

  Var slice_cols(Var a, std::size_t start, std::size_t len) {
    const Array& av = val(a);
    if (start + len > av.cols()) throw std::invalid_argument("slice_cols: out of range");
    std::size_t r = av.rows();
    Array out({r, len});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < len; ++j) out(i, j) = av(i, start + j);
    return push(std::move(out), [this, a, start, len, r](const Array& g, Array&) {
      Array& ga = nodes_[a.id].grad;
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < len; ++j) ga(i, start + j) += g(i, j);
    });
  }

  Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    std::size_t r = val(parts[0]).rows(), c = 0;
    for (Var p : parts) {
      if (val(p).rows() != r) throw std::invalid_argument("concat_cols: row mismatch");
      c += val(p).cols();
    }
    Array out({r, c});
    std::size_t off = 0;
    for (Var p : parts) {
      const Array& pv = val(p);
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < pv.cols(); ++j) out(i, off + j) = pv(i, j);
      off += pv.cols();
    }
    auto ps = std::make_shared<std::vector<Var>>(parts);
    return push(std::move(out), [this, ps, r](const Array& g, Array&) {
      std::size_t off = 0;
      for (Var p : *ps) {
        Array& gp = nodes_[p.id].grad;
        std::size_t pc = gp.cols();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < pc; ++j) gp(i, j) += g(i, off + j);
        off += pc;
      }
    });
  }

  // ---- loss primitives ----

  // (1/R) * sum_i w_i * (-log p_i(t_i)), probabilities clamped.
  Var weighted_nll(Var probs, std::vector<std::size_t> targets,
                   std::vector<double> weights) {
    const Array& pv = val(probs);
    std::size_t r = pv.rows();
    if (targets.size() != r || weights.size() != r)
      throw std::invalid_argument("weighted_nll: one target/weight per row");
    double loss = 0.0;
    for (std::size_t i = 0; i < r; ++i)
      loss -= weights[i] * std::log(clamp_prob(pv(i, targets[i])));
    loss /= static_cast<double>(r);
    auto tp = std::make_shared<std::vector<std::size_t>>(std::move(targets));
    auto wp = std::make_shared<std::vector<double>>(std::move(weights));
    return push(Array::scalar(loss), [this, probs, tp, wp, r](const Array& g, Array&) {
      Array& gp = nodes_[probs.id].grad;
      const Array& pv = val(probs);
      for (std::size_t i = 0; i < r; ++i) {
        // divide by the raw probability (underflow-floored, not clamped): the
        // upstream softmax backward multiplies by the raw value again, so this
        // composes to the bounded p - onehot form even deep in saturation
        double p = std::max(pv(i, (*tp)[i]), 1e-300);
        gp(i, (*tp)[i]) -= g[0] * (*wp)[i] / (p * static_cast<double>(r));
      }
    });
  }

  // Mean over all entries of -(t log p + (1-t) log(1-p)), probabilities clamped.
  Var bce_mean(Var probs, Array target) {
    const Array& pv = val(probs);
    require_shape(pv, target, "bce_mean");
    double loss = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
      double p = clamp_prob(pv[i]);
      loss -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    loss /= static_cast<double>(pv.size());
    auto tp = std::make_shared<Array>(std::move(target));
    return push(Array::scalar(loss), [this, probs, tp](const Array& g, Array&) {
      Array& gp = nodes_[probs.id].grad;
      const Array& pv = val(probs);
      double n = static_cast<double>(pv.size());
      for (std::size_t i = 0; i < pv.size(); ++i) {
        // raw probability for the same reason as weighted_nll: the sigmoid
        // backward contributes p(1-p), collapsing this to (p - t) / n
        double p = pv[i];
        double d = std::max(p * (1.0 - p), 1e-300);
        gp[i] += g[0] * (p - (*tp)[i]) / (d * n);
      }
    });
  }

  // Per-row dice cost 1 - 2(m.g + 1)/(|m| + |g| + 1); output is R x 1.
  Var dice_rows(Var probs, Array target) {
    const Array& pv = val(probs);
    require_shape(pv, target, "dice_rows");
    std::size_t r = pv.rows(), c = pv.cols();
    Array out({r, 1});
    auto tp = std::make_shared<Array>(std::move(target));
    auto num = std::make_shared<std::vector<double>>(r);
    auto den = std::make_shared<std::vector<double>>(r);
    for (std::size_t i = 0; i < r; ++i) {
      double inter = 0.0, sm = 0.0, sg = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        inter += pv(i, j) * (*tp)(i, j);
        sm += pv(i, j);
        sg += (*tp)(i, j);
      }
      (*num)[i] = 2.0 * (inter + 1.0);
      (*den)[i] = sm + sg + 1.0;
      out(i, 0) = 1.0 - (*num)[i] / (*den)[i];
    }
    return push(std::move(out), [this, probs, tp, num, den, r, c](const Array& g, Array&) {
      Array& gp = nodes_[probs.id].grad;
      for (std::size_t i = 0; i < r; ++i) {
        double d = (*den)[i];
        for (std::size_t j = 0; j < c; ++j) {
          // d/dm_j of -(num/den) = -(2 g_j den - num) / den^2
          gp(i, j) += g(i, 0) * (-(2.0 * (*tp)(i, j) * d - (*num)[i]) / (d * d));
        }
      }
    });
  }

  // ---- driver ----

  void backward(Var loss) {
    if (val(loss).size() != 1)
      throw std::invalid_argument("backward: loss must be scalar");
    for (auto& n : nodes_)
      std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    nodes_[loss.id].grad[0] = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      if (nodes_[i].back) nodes_[i].back(nodes_[i].grad, nodes_[i].value);
    }
  }

  std::size_t num_nodes() const { return nodes_.size(); }

  static double clamp_prob(double p) {
    return std::min(1.0 - kProbClamp, std::max(kProbClamp, p));
  }

 private:
  struct Node {
    Array value;
    Array grad;
    std::function<void(const Array&, Array&)> back;
  };

  Var push(Array v, std::function<void(const Array&, Array&)> back) {
    Node n;
    n.grad = Array(v.shape);
    n.value = std::move(v);
    n.back = std::move(back);
    nodes_.push_back(std::move(n));
    return Var{nodes_.size() - 1};
  }

  void acc(Var x, const Array& g) {
    Array& gx = nodes_[x.id].grad;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
};

}  // namespace qis
