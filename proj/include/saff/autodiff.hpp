#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "saff/tensor.hpp"

namespace saff {

struct Var {
  int id = -1;
};

// Recording tape for reverse-mode differentiation. Nodes are stored in
// execution order; backward() walks them in reverse, accumulating
// gradients by summation. Single-owner, single-threaded per tape.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor v) { return push(std::move(v), false, {}, nullptr); }

  Var param(Tensor v) {
    Var r = push(std::move(v), true, {}, nullptr);
    params_.push_back(r.id);
    return r;
  }

  const Tensor& value(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }

  // gradient of the last backward() loss w.r.t. v; zeros if unreached
  Tensor grad(Var v) const {
    const auto& g = grads_[static_cast<std::size_t>(v.id)];
    if (g.size() == 0) return Tensor::zeros(value(v).shape);
    return g;
  }

  void backward(Var loss) {
    if (!value(loss).is_scalar() && value(loss).size() != 1)
      throw usage_error("backward: loss must be a scalar");
    grads_.assign(nodes_.size(), Tensor{});
    grads_[static_cast<std::size_t>(loss.id)] = Tensor::full(value(loss).shape, 1.0);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.requires_grad || !n.back) continue;
      const Tensor& g = grads_[static_cast<std::size_t>(i)];
      if (g.size() == 0) continue;
      n.back(*this, g);
    }
  }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (!va.same_shape(vb)) throw shape_error("add: shape mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += vb.data[i];
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [a, b](Tape& t, const Tensor& g) {
                  t.accumulate(a, g);
                  t.accumulate(b, g);
                });
  }

  Var sub(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (!va.same_shape(vb)) throw shape_error("sub: shape mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= vb.data[i];
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [a, b](Tape& t, const Tensor& g) {
                  t.accumulate(a, g);
                  Tensor gb = g;
                  for (double& v : gb.data) v = -v;
                  t.accumulate(b, std::move(gb));
                });
  }

  Var mul(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (!va.same_shape(vb)) throw shape_error("mul: shape mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= vb.data[i];
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [a, b](Tape& t, const Tensor& g) {
                  const Tensor &va = t.value(a), &vb = t.value(b);
                  Tensor ga = g, gb = g;
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    ga.data[i] *= vb.data[i];
                    gb.data[i] *= va.data[i];
                  }
                  t.accumulate(a, std::move(ga));
                  t.accumulate(b, std::move(gb));
                });
  }

  Var scale(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v *= c;
    return push(std::move(out), needs(a), {a.id},
                [a, c](Tape& t, const Tensor& g) {
                  Tensor ga = g;
                  for (double& v : ga.data) v *= c;
                  t.accumulate(a, std::move(ga));
                });
  }

  // out = a * s where s is a 1-element tensor (trainable scalar)
  Var scale_by(Var a, Var s) {
    if (value(s).size() != 1) throw shape_error("scale_by: scalar expected");
    const double sv = value(s).data[0];
    Tensor out = value(a);
    for (double& v : out.data) v *= sv;
    return push(std::move(out), needs(a, s), {a.id, s.id},
                [a, s](Tape& t, const Tensor& g) {
                  const double sv = t.value(s).data[0];
                  const Tensor& va = t.value(a);
                  Tensor ga = g;
                  double ds = 0.0;
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    ds += g.data[i] * va.data[i];
                    ga.data[i] *= sv;
                  }
                  t.accumulate(a, std::move(ga));
                  Tensor gs = t.value(s);
                  gs.data[0] = ds;
                  t.accumulate(s, std::move(gs));
                });
  }

  Var sigmoid(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
    Var r = push(std::move(out), needs(a), {a.id}, nullptr);
    set_back(r, [a, r](Tape& t, const Tensor& g) {
      const Tensor& y = t.value(r);
      Tensor ga = g;
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] *= y.data[i] * (1.0 - y.data[i]);
      t.accumulate(a, std::move(ga));
    });
    return r;
  }

  Var tanh_(Var a) {
    Tensor out = value(a);
    for (double& v : out.data) v = std::tanh(v);
    Var r = push(std::move(out), needs(a), {a.id}, nullptr);
    set_back(r, [a, r](Tape& t, const Tensor& g) {
      const Tensor& y = t.value(r);
      Tensor ga = g;
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] *= 1.0 - y.data[i] * y.data[i];
      t.accumulate(a, std::move(ga));
    });
    return r;
  }

  // ---- linear algebra ----

  Var matmul(Var a, Var b) {
    const Tensor &va = value(a), &vb = value(b);
    if (va.ndim() != 2 || vb.ndim() != 2 || va.cols() != vb.rows())
      throw shape_error("matmul: inner dimensions disagree");
    Tensor out = matmul_raw(va, vb);
    return push(std::move(out), needs(a, b), {a.id, b.id},
                [a, b](Tape& t, const Tensor& g) {
                  const Tensor &va = t.value(a), &vb = t.value(b);
                  t.accumulate(a, matmul_nt(g, vb));   // g . b^T
                  t.accumulate(b, matmul_tn(va, g));   // a^T . g
                });
  }

  Var transpose(Var a) {
    const Tensor& va = value(a);
    if (va.ndim() != 2) throw shape_error("transpose: matrix expected");
    Tensor out = transpose_raw(va);
    return push(std::move(out), needs(a), {a.id},
                [a](Tape& t, const Tensor& g) { t.accumulate(a, transpose_raw(g)); });
  }

  Var reshape(Var a, std::vector<std::size_t> s) {
    std::size_t n = 1;
    for (auto e : s) n *= e;
    if (n != value(a).size()) throw shape_error("reshape: element count mismatch");
    Tensor out(std::move(s), value(a).data);
    return push(std::move(out), needs(a), {a.id},
                [a](Tape& t, const Tensor& g) {
                  t.accumulate(a, Tensor(t.value(a).shape, g.data));
                });
  }

  // ---- reductions / broadcasts ----

  Var sum(Var a) {
    double s = 0.0;
    for (double v : value(a).data) s += v;
    return push(Tensor::scalar(s), needs(a), {a.id},
                [a](Tape& t, const Tensor& g) {
                  t.accumulate(a, Tensor::full(t.value(a).shape, g.data[0]));
                });
  }

  Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(value(a).size())); }

  // reduce a matrix along an axis: axis=0 sums rows away (-> cols), axis=1 -> rows
  Var reduce_sum(Var a, std::size_t axis) {
    const Tensor& va = value(a);
    if (va.ndim() != 2 || axis > 1) throw shape_error("reduce_sum: matrix + axis 0/1");
    const std::size_t r = va.rows(), c = va.cols();
    Tensor out = Tensor::zeros({axis == 0 ? c : r});
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out.data[axis == 0 ? j : i] += va.at(i, j);
    return push(std::move(out), needs(a), {a.id},
                [a, axis](Tape& t, const Tensor& g) {
                  const Tensor& va = t.value(a);
                  Tensor ga = Tensor::zeros(va.shape);
                  for (std::size_t i = 0; i < va.rows(); ++i)
                    for (std::size_t j = 0; j < va.cols(); ++j)
                      ga.at(i, j) = g.data[axis == 0 ? j : i];
                  t.accumulate(a, std::move(ga));
                });
  }

  // vector (len c) replicated into n rows
  Var broadcast_rows(Var v, std::size_t n) {
    const Tensor& vv = value(v);
    if (vv.ndim() != 1) throw shape_error("broadcast_rows: vector expected");
    const std::size_t c = vv.shape[0];
    Tensor out = Tensor::zeros({n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = vv.data[j];
    return push(std::move(out), needs(v), {v.id},
                [v](Tape& t, const Tensor& g) {
                  const std::size_t c = t.value(v).shape[0];
                  Tensor gv = Tensor::zeros({c});
                  for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) gv.data[j] += g.at(i, j);
                  t.accumulate(v, std::move(gv));
                });
  }

  // scale row i of a by r[i]
  Var mul_rows(Var a, Var r) {
    const Tensor &va = value(a), &vr = value(r);
    if (va.ndim() != 2 || vr.ndim() != 1 || vr.shape[0] != va.rows())
      throw shape_error("mul_rows: rows mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out.at(i, j) *= vr.data[i];
    return push(std::move(out), needs(a, r), {a.id, r.id},
                [a, r](Tape& t, const Tensor& g) {
                  const Tensor &va = t.value(a), &vr = t.value(r);
                  Tensor ga = g;
                  Tensor gr = Tensor::zeros(vr.shape);
                  for (std::size_t i = 0; i < va.rows(); ++i)
                    for (std::size_t j = 0; j < va.cols(); ++j) {
                      gr.data[i] += g.at(i, j) * va.at(i, j);
                      ga.at(i, j) *= vr.data[i];
                    }
                  t.accumulate(a, std::move(ga));
                  t.accumulate(r, std::move(gr));
                });
  }

  // divide row i of a by r[i]
  Var div_rows(Var a, Var r) {
    const Tensor &va = value(a), &vr = value(r);
    if (va.ndim() != 2 || vr.ndim() != 1 || vr.shape[0] != va.rows())
      throw shape_error("div_rows: rows mismatch");
    Tensor out = va;
    for (std::size_t i = 0; i < va.rows(); ++i)
      for (std::size_t j = 0; j < va.cols(); ++j) out.at(i, j) /= vr.data[i];
    return push(std::move(out), needs(a, r), {a.id, r.id},
                [a, r](Tape& t, const Tensor& g) {
                  const Tensor &va = t.value(a), &vr = t.value(r);
                  Tensor ga = g;
                  Tensor gr = Tensor::zeros(vr.shape);
                  for (std::size_t i = 0; i < va.rows(); ++i) {
                    const double inv = 1.0 / vr.data[i];
                    for (std::size_t j = 0; j < va.cols(); ++j) {
                      ga.at(i, j) *= inv;
                      gr.data[i] -= g.at(i, j) * va.at(i, j) * inv * inv;
                    }
                  }
                  t.accumulate(a, std::move(ga));
                  t.accumulate(r, std::move(gr));
                });
  }

  Var add_const(Var a, double c) {
    Tensor out = value(a);
    for (double& v : out.data) v += c;
    return push(std::move(out), needs(a), {a.id},
                [a](Tape& t, const Tensor& g) { t.accumulate(a, g); });
  }

  // ---- normalizations ----

  // numerically stable softmax along axis of a matrix (or a vector, axis 0)
  Var softmax(Var a, std::size_t axis) {
    const Tensor& va = value(a);
    Tensor out = softmax_raw(va, axis);
    return push(std::move(out), needs(a), {a.id}, nullptr, [this, a, axis](Var self) {
      set_back(self, [a, axis, self](Tape& t, const Tensor& g) {
        const Tensor& y = t.value(self);
        Tensor ga = g;
        if (y.ndim() <= 1) {
          double dot = 0.0;
          for (std::size_t i = 0; i < y.size(); ++i) dot += g.data[i] * y.data[i];
          for (std::size_t i = 0; i < y.size(); ++i)
            ga.data[i] = y.data[i] * (g.data[i] - dot);
        } else {
          const std::size_t r = y.rows(), c = y.cols();
          if (axis == 0) {
            for (std::size_t j = 0; j < c; ++j) {
              double dot = 0.0;
              for (std::size_t i = 0; i < r; ++i) dot += g.at(i, j) * y.at(i, j);
              for (std::size_t i = 0; i < r; ++i)
                ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
            }
          } else {
            for (std::size_t i = 0; i < r; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
              for (std::size_t j = 0; j < c; ++j)
                ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
            }
          }
        }
        t.accumulate(a, std::move(ga));
      });
    });
  }

  // slices along axis scaled to unit L2 norm; slices with norm < eps are
  // divided by eps instead (graceful degradation, eps treated as constant)
  Var l2_normalize(Var a, std::size_t axis, double eps = kL2Eps) {
    const Tensor& va = value(a);
    Tensor out = l2_normalize_raw(va, axis, eps);
    return push(std::move(out), needs(a), {a.id},
                [a, axis, eps](Tape& t, const Tensor& g) {
                  const Tensor& va = t.value(a);
                  Tensor ga = Tensor::zeros(va.shape);
                  for_each_slice(va, axis, [&](std::size_t base, std::size_t stride,
                                               std::size_t len) {
                    double nrm2 = 0.0;
                    for (std::size_t k = 0; k < len; ++k) {
                      const double v = va.data[base + k * stride];
                      nrm2 += v * v;
                    }
                    const double nrm = std::sqrt(nrm2);
                    if (nrm < eps) {
                      for (std::size_t k = 0; k < len; ++k)
                        ga.data[base + k * stride] = g.data[base + k * stride] / eps;
                    } else {
                      double dot = 0.0;
                      for (std::size_t k = 0; k < len; ++k)
                        dot += g.data[base + k * stride] * va.data[base + k * stride];
                      dot /= nrm2;
                      for (std::size_t k = 0; k < len; ++k)
                        ga.data[base + k * stride] =
                            (g.data[base + k * stride] -
                             va.data[base + k * stride] * dot) / nrm;
                    }
                  });
                  t.accumulate(a, std::move(ga));
                });
  }

  // standardize the last axis to mean 0 / variance 1, then gain*x + bias
  Var layer_norm(Var x, Var gain, Var bias, double eps = kLnEps) {
    const Tensor& vx = value(x);
    const std::size_t c = vx.ndim() == 1 ? vx.shape[0] : vx.cols();
    if (value(gain).size() != c || value(bias).size() != c)
      throw shape_error("layer_norm: gain/bias width mismatch");
    Tensor out = layer_norm_raw(vx, value(gain), value(bias), eps);
    return push(std::move(out), needs(x, gain) || needs(bias), {x.id, gain.id, bias.id},
                [x, gain, bias, eps](Tape& t, const Tensor& g) {
                  const Tensor& vx = t.value(x);
                  const Tensor& vg = t.value(gain);
                  const std::size_t c = vx.ndim() == 1 ? vx.shape[0] : vx.cols();
                  const std::size_t r = vx.size() / c;
                  Tensor gx = Tensor::zeros(vx.shape);
                  Tensor gg = Tensor::zeros({c});
                  Tensor gb = Tensor::zeros({c});
                  for (std::size_t i = 0; i < r; ++i) {
                    const double* xi = vx.data.data() + i * c;
                    const double* gi = g.data.data() + i * c;
                    double mu = 0.0;
                    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
                    mu /= static_cast<double>(c);
                    double var = 0.0;
                    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
                    var /= static_cast<double>(c);
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double m_dxh = 0.0, m_dxh_xh = 0.0;
                    std::vector<double> xh(c), dxh(c);
                    for (std::size_t j = 0; j < c; ++j) {
                      xh[j] = (xi[j] - mu) * inv;
                      dxh[j] = gi[j] * vg.data[j];
                      m_dxh += dxh[j];
                      m_dxh_xh += dxh[j] * xh[j];
                      gg.data[j] += gi[j] * xh[j];
                      gb.data[j] += gi[j];
                    }
                    m_dxh /= static_cast<double>(c);
                    m_dxh_xh /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j)
                      gx.data[i * c + j] = inv * (dxh[j] - m_dxh - xh[j] * m_dxh_xh);
                  }
                  t.accumulate(x, std::move(gx));
                  t.accumulate(gain, std::move(gg));
                  t.accumulate(bias, std::move(gb));
                });
  }

  // ---- assembly ----

  Var stack_scalars(const std::vector<Var>& xs) {
    Tensor out = Tensor::zeros({xs.size()});
    bool rg = false;
    std::vector<int> parents;
    parents.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      out.data[i] = value(xs[i]).item();
      rg = rg || node(xs[i]).requires_grad;
      parents.push_back(xs[i].id);
    }
    auto xs_copy = xs;
    return push(std::move(out), rg, std::move(parents),
                [xs_copy](Tape& t, const Tensor& g) {
                  for (std::size_t i = 0; i < xs_copy.size(); ++i)
                    t.accumulate(xs_copy[i], Tensor(t.value(xs_copy[i]).shape, {g.data[i]}));
                });
  }

  // stack 1-D vectors of equal length into a matrix, one per row
  Var concat_rows(const std::vector<Var>& rows) {
    if (rows.empty()) throw usage_error("concat_rows: empty");
    const std::size_t c = value(rows[0]).size();
    Tensor out = Tensor::zeros({rows.size(), c});
    bool rg = false;
    std::vector<int> parents;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const Tensor& v = value(rows[i]);
      if (v.size() != c) throw shape_error("concat_rows: ragged rows");
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + i * c);
      rg = rg || node(rows[i]).requires_grad;
      parents.push_back(rows[i].id);
    }
    auto rows_copy = rows;
    return push(std::move(out), rg, std::move(parents),
                [rows_copy, c](Tape& t, const Tensor& g) {
                  for (std::size_t i = 0; i < rows_copy.size(); ++i) {
                    Tensor gi(t.value(rows_copy[i]).shape,
                              std::vector<double>(g.data.begin() + i * c,
                                                  g.data.begin() + (i + 1) * c));
                    t.accumulate(rows_copy[i], std::move(gi));
                  }
                });
  }

  // group rows by class: out[n][q] = sum_k in[n*k_shot + k][q]
  Var aggregate_rows(Var a, std::size_t n_way, std::size_t k_shot) {
    const Tensor& va = value(a);
    if (va.ndim() != 2 || va.rows() != n_way * k_shot)
      throw shape_error("aggregate_rows: row count != n*k");
    const std::size_t q = va.cols();
    Tensor out = Tensor::zeros({n_way, q});
    for (std::size_t n = 0; n < n_way; ++n)
      for (std::size_t k = 0; k < k_shot; ++k)
        for (std::size_t j = 0; j < q; ++j) out.at(n, j) += va.at(n * k_shot + k, j);
    return push(std::move(out), needs(a), {a.id},
                [a, n_way, k_shot](Tape& t, const Tensor& g) {
                  const Tensor& va = t.value(a);
                  Tensor ga = Tensor::zeros(va.shape);
                  for (std::size_t n = 0; n < n_way; ++n)
                    for (std::size_t k = 0; k < k_shot; ++k)
                      for (std::size_t j = 0; j < va.cols(); ++j)
                        ga.at(n * k_shot + k, j) = g.at(n, j);
                  t.accumulate(a, std::move(ga));
                });
  }

  // mean over queries of -log p[label_q][q], log clamped at 1e-12
  Var cross_entropy(Var p, const std::vector<std::size_t>& labels) {
    const Tensor& vp = value(p);
    if (vp.ndim() != 2 || labels.size() != vp.cols())
      throw shape_error("cross_entropy: labels/columns mismatch");
    for (auto l : labels)
      if (l >= vp.rows()) throw usage_error("cross_entropy: label out of range");
    const double clamp = 1e-12;
    double loss = 0.0;
    for (std::size_t q = 0; q < labels.size(); ++q)
      loss -= std::log(std::max(vp.at(labels[q], q), clamp));
    loss /= static_cast<double>(labels.size());
    return push(Tensor::scalar(loss), needs(p), {p.id},
                [p, labels, clamp](Tape& t, const Tensor& g) {
                  const Tensor& vp = t.value(p);
                  Tensor gp = Tensor::zeros(vp.shape);
                  const double s = g.data[0] / static_cast<double>(labels.size());
                  for (std::size_t q = 0; q < labels.size(); ++q) {
                    const double v = vp.at(labels[q], q);
                    if (v > clamp) gp.at(labels[q], q) = -s / v;
                  }
                  t.accumulate(p, std::move(gp));
                });
  }

  // ---- raw (non-recorded) helpers, shared with oracles ----

  static Tensor matmul_raw(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t l = 0; l < k; ++l) {
        const double av = a.at(i, l);
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(l, j);
      }
    return out;
  }

  static Tensor transpose_raw(const Tensor& a) {
    Tensor out = Tensor::zeros({a.cols(), a.rows()});
    for (std::size_t i = 0; i < a.rows(); ++i)
      for (std::size_t j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    return out;
  }

  static Tensor softmax_raw(const Tensor& x, std::size_t axis) {
    Tensor out = x;
    if (x.ndim() <= 1) {
      softmax_span(out.data.data(), 1, x.size());
      return out;
    }
    if (axis > 1) throw shape_error("softmax: axis out of range");
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 1) {
      for (std::size_t i = 0; i < r; ++i) softmax_span(out.data.data() + i * c, 1, c);
    } else {
      for (std::size_t j = 0; j < c; ++j) softmax_span(out.data.data() + j, c, r);
    }
    return out;
  }

  static Tensor l2_normalize_raw(const Tensor& x, std::size_t axis, double eps = kL2Eps) {
    Tensor out = x;
    for_each_slice(x, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
      double nrm2 = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double v = x.data[base + k * stride];
        nrm2 += v * v;
      }
      const double d = std::max(std::sqrt(nrm2), eps);
      for (std::size_t k = 0; k < len; ++k) out.data[base + k * stride] /= d;
    });
    return out;
  }

  static Tensor layer_norm_raw(const Tensor& x, const Tensor& gain, const Tensor& bias,
                               double eps = kLnEps) {
    const std::size_t c = x.ndim() == 1 ? x.shape[0] : x.cols();
    const std::size_t r = x.size() / c;
    Tensor out = x;
    for (std::size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < c; ++j) mu += x.data[i * c + j];
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = x.data[i * c + j] - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps);
      for (std::size_t j = 0; j < c; ++j)
        out.data[i * c + j] = (x.data[i * c + j] - mu) * inv * gain.data[j] + bias.data[j];
    }
    return out;
  }

  static constexpr double kL2Eps = 1e-12;
  static constexpr double kLnEps = 1e-5;

  std::size_t node_count() const { return nodes_.size(); }

  void accumulate(Var v, Tensor g) {
    auto& slot = grads_[static_cast<std::size_t>(v.id)];
    if (slot.size() == 0) {
      slot = std::move(g);
    } else {
      for (std::size_t i = 0; i < slot.size(); ++i) slot.data[i] += g.data[i];
    }
  }

 private:
  struct Node {
    Tensor value;
    bool requires_grad = false;
    std::function<void(Tape&, const Tensor&)> back;
  };

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
  const Node& node(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

  bool needs(Var a) const { return node(a).requires_grad; }
  bool needs(Var a, Var b) const { return node(a).requires_grad || node(b).requires_grad; }

  Var push(Tensor v, bool rg, std::vector<int> /*parents*/,
           std::function<void(Tape&, const Tensor&)> back,
           std::function<void(Var)> post = nullptr) {
    if (!v.all_finite()) throw usage_error("tape: non-finite value produced");
    nodes_.push_back(Node{std::move(v), rg, std::move(back)});
    last_id_ = static_cast<int>(nodes_.size()) - 1;
    Var r{last_id_};
    if (post) post(r);
    return r;
  }

  void set_back(Var v, std::function<void(Tape&, const Tensor&)> back) {
    node(v).back = std::move(back);
  }

  static void softmax_span(double* p, std::size_t stride, std::size_t len) {
    double mx = p[0];
    for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, p[k * stride]);
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) {
      p[k * stride] = std::exp(p[k * stride] - mx);
      s += p[k * stride];
    }
    for (std::size_t k = 0; k < len; ++k) p[k * stride] /= s;
  }

  template <class F>
  static void for_each_slice(const Tensor& x, std::size_t axis, F&& f) {
    if (x.ndim() <= 1) {
      f(0, 1, x.size());
      return;
    }
    if (x.ndim() != 2 || axis > 1) throw shape_error("slice: matrix + axis 0/1");
    const std::size_t r = x.rows(), c = x.cols();
    if (axis == 1) {
      for (std::size_t i = 0; i < r; ++i) f(i * c, 1, c);
    } else {
      for (std::size_t j = 0; j < c; ++j) f(j, c, r);
    }
  }

  static Tensor matmul_nt(const Tensor& a, const Tensor& b) {  // a . b^T
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t l = 0; l < k; ++l) s += a.at(i, l) * b.at(j, l);
        out.at(i, j) = s;
      }
    return out;
  }

  static Tensor matmul_tn(const Tensor& a, const Tensor& b) {  // a^T . b
    const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t l = 0; l < k; ++l)
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a.at(l, i);
        if (av == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out.at(i, j) += av * b.at(l, j);
      }
    return out;
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<int> params_;
  int last_id_ = -1;

  friend struct TapeTestAccess;
};

// standard gated recurrent update applied row-wise:
// z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
// hc = tanh(x Wh + (r*h) Uh + bh), h' = (1-z)*h + z*hc
struct GruParams {
  Var wz, uz, bz, wr, ur, br, wh, uh, bh;
};

inline Var gru_cell(Tape& t, Var x, Var h, const GruParams& p) {
  const std::size_t n = t.value(x).rows();
  Var bz = t.broadcast_rows(p.bz, n);
  Var br = t.broadcast_rows(p.br, n);
  Var bh = t.broadcast_rows(p.bh, n);
  Var z = t.sigmoid(t.add(t.add(t.matmul(x, p.wz), t.matmul(h, p.uz)), bz));
  Var r = t.sigmoid(t.add(t.add(t.matmul(x, p.wr), t.matmul(h, p.ur)), br));
  Var hc = t.tanh_(t.add(t.add(t.matmul(x, p.wh), t.matmul(t.mul(r, h), p.uh)), bh));
  Var one_minus_z = t.add_const(t.scale(z, -1.0), 1.0);
  return t.add(t.mul(one_minus_z, h), t.mul(z, hc));
}

// central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5) {
  Tensor g = Tensor::zeros(x.shape);
  Tensor xp = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = xp.data[i];
    xp.data[i] = orig + h;
    const double fp = f(xp);
    xp.data[i] = orig - h;
    const double fm = f(xp);
    xp.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

}  // namespace saff
