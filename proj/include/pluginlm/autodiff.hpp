#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <vector>

#include "pluginlm/errors.hpp"
#include "pluginlm/tensor.hpp"

namespace pluginlm {

// Probabilities are floored at this value before any log, so the loss stays
// finite on sparse products.
inline constexpr double kProbFloor = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kMaskFill = -1e30;

// Reverse-mode tape over dense tensors. Nodes are recorded in construction
// order (already topological); backward walks them in exact reverse order.
// A tape is single-threaded; distinct tapes may run concurrently.
class Tape {
 public:
  using Id = int32_t;

  struct GradMap {
    // One entry per leaf on the tape; leaves unreachable from the loss hold
    // exact zeros.
    std::map<Id, Tensor> by_leaf;
    const Tensor& at(Id id) const { return by_leaf.at(id); }
    bool contains(Id id) const { return by_leaf.count(id) > 0; }
  };

  Id constant(Tensor v) { return push(std::move(v), false, {}, nullptr); }

  Id leaf(Tensor v) {
    Id id = push(std::move(v), true, {}, nullptr);
    leaves_.push_back(id);
    return id;
  }

  const Tensor& value(Id id) const { return nodes_[id].value; }
  size_t size() const { return nodes_.size(); }
  const std::vector<Id>& leaves() const { return leaves_; }

  // ---- elementwise ----

  Id add(Id a, Id b) {
    binary_shape_check("add", a, b);
    Tensor out = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b},
                [a, b](Tape& t, const Tensor& g, Id) {
                  t.accum(a, g);
                  t.accum(b, g);
                });
  }

  Id sub(Id a, Id b) {
    binary_shape_check("sub", a, b);
    Tensor out = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b},
                [a, b](Tape& t, const Tensor& g, Id) {
                  t.accum(a, g);
                  Tensor ng = g;
                  for (size_t i = 0; i < ng.numel(); ++i) ng[i] = -ng[i];
                  t.accum(b, ng);
                });
  }

  Id mul(Id a, Id b) {
    binary_shape_check("mul", a, b);
    Tensor out = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    return push(std::move(out), needs(a) || needs(b), {a, b},
                [a, b](Tape& t, const Tensor& g, Id) {
                  const Tensor& va = t.nodes_[a].value;
                  const Tensor& vb2 = t.nodes_[b].value;
                  Tensor ga = g, gb = g;
                  for (size_t i = 0; i < g.numel(); ++i) {
                    ga[i] *= vb2[i];
                    gb[i] *= va[i];
                  }
                  t.accum(a, ga);
                  t.accum(b, gb);
                });
  }

  Id scale(Id a, double c) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= c;
    return push(std::move(out), needs(a), {a},
                [a, c](Tape& t, const Tensor& g, Id) {
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i) ga[i] *= c;
                  t.accum(a, ga);
                });
  }

  // Multiply every element of `a` by a scalar node (used by the temperature
  // baseline, where the scalar is trainable).
  Id scale_by(Id a, Id s) {
    if (nodes_[s].value.numel() != 1)
      throw ShapeMismatch("scale_by", nodes_[a].value.shape_str(), nodes_[s].value.shape_str());
    const double sv = nodes_[s].value[0];
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] *= sv;
    return push(std::move(out), needs(a) || needs(s), {a, s},
                [a, s, sv](Tape& t, const Tensor& g, Id) {
                  const Tensor& va = t.nodes_[a].value;
                  Tensor ga = g;
                  double gs = 0.0;
                  for (size_t i = 0; i < g.numel(); ++i) {
                    ga[i] *= sv;
                    gs += g[i] * va[i];
                  }
                  t.accum(a, ga);
                  t.accum(s, Tensor(t.nodes_[s].value.shape(), {gs}));
                });
  }

  Id reciprocal(Id a) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / out[i];
    return push(std::move(out), needs(a), {a},
                [a](Tape& t, const Tensor& g, Id self) {
                  const Tensor& y = t.nodes_[self].value;
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i) ga[i] *= -y[i] * y[i];
                  t.accum(a, ga);
                });
  }

  Id exp(Id a) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::exp(out[i]);
    return push(std::move(out), needs(a), {a},
                [a](Tape& t, const Tensor& g, Id self) {
                  const Tensor& y = t.nodes_[self].value;
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i) ga[i] *= y[i];
                  t.accum(a, ga);
                });
  }

  // log(max(x, kProbFloor)); gradient is zero in the floored region.
  Id log(Id a) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::log(std::max(out[i], kProbFloor));
    return push(std::move(out), needs(a), {a},
                [a](Tape& t, const Tensor& g, Id) {
                  const Tensor& x = t.nodes_[a].value;
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i)
                    ga[i] = x[i] > kProbFloor ? ga[i] / x[i] : 0.0;
                  t.accum(a, ga);
                });
  }

  Id relu(Id a) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
    return push(std::move(out), needs(a), {a},
                [a](Tape& t, const Tensor& g, Id) {
                  const Tensor& x = t.nodes_[a].value;
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i)
                    if (x[i] <= 0.0) ga[i] = 0.0;
                  t.accum(a, ga);
                });
  }

  Id clamp_min(Id a, double floor) {
    Tensor out = nodes_[a].value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], floor);
    return push(std::move(out), needs(a), {a},
                [a, floor](Tape& t, const Tensor& g, Id) {
                  const Tensor& x = t.nodes_[a].value;
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i)
                    if (x[i] <= floor) ga[i] = 0.0;
                  t.accum(a, ga);
                });
  }

  // ---- linear algebra ----

  Id matmul(Id a, Id b) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vb = nodes_[b].value;
    if (va.rank() != 2 || vb.rank() != 2 || va.cols() != vb.rows())
      throw ShapeMismatch("matmul", va.shape_str(), vb.shape_str());
    const size_t m = va.rows(), k = va.cols(), n = vb.cols();
    Tensor out({m, n});
    matmul_accum(va.data(), vb.data(), out.data(), m, k, n);
    return push(std::move(out), needs(a) || needs(b), {a, b},
                [a, b, m, k, n](Tape& t, const Tensor& g, Id) {
                  const Tensor& va2 = t.nodes_[a].value;
                  const Tensor& vb2 = t.nodes_[b].value;
                  if (t.needs(a)) {
                    Tensor ga({m, k});
                    matmul_nt_accum(g.data(), vb2.data(), ga.data(), m, n, k);
                    t.accum(a, ga);
                  }
                  if (t.needs(b)) {
                    Tensor gb({k, n});
                    matmul_tn_accum(va2.data(), g.data(), gb.data(), k, m, n);
                    t.accum(b, gb);
                  }
                });
  }

  Id transpose(Id a) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2) throw ShapeMismatch("transpose", va.shape_str(), "rank-2");
    const size_t m = va.rows(), n = va.cols();
    Tensor out({n, m});
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) out.at(j, i) = va.at(i, j);
    return push(std::move(out), needs(a), {a},
                [a, m, n](Tape& t, const Tensor& g, Id) {
                  Tensor ga({m, n});
                  for (size_t i = 0; i < n; ++i)
                    for (size_t j = 0; j < m; ++j) ga.at(j, i) = g.at(i, j);
                  t.accum(a, ga);
                });
  }

  // (r x c) + (1 x c), row-broadcast spelled out as its own op.
  Id add_rowvec(Id a, Id v) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vv = nodes_[v].value;
    if (va.rank() != 2 || vv.numel() != va.cols())
      throw ShapeMismatch("add_rowvec", va.shape_str(), vv.shape_str());
    Tensor out = va;
    const size_t r = va.rows(), c = va.cols();
    for (size_t i = 0; i < r; ++i)
      for (size_t j = 0; j < c; ++j) out.at(i, j) += vv[j];
    return push(std::move(out), needs(a) || needs(v), {a, v},
                [a, v, r, c](Tape& t, const Tensor& g, Id) {
                  t.accum(a, g);
                  Tensor gv(t.nodes_[v].value.shape());
                  for (size_t i = 0; i < r; ++i)
                    for (size_t j = 0; j < c; ++j) gv[j] += g.at(i, j);
                  t.accum(v, gv);
                });
  }

  // ---- reshaping ----

  Id slice_rows(Id a, size_t r0, size_t count) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2 || r0 + count > va.rows())
      throw ShapeMismatch("slice_rows", va.shape_str(),
                          "[" + std::to_string(r0) + "," + std::to_string(r0 + count) + ")");
    const size_t c = va.cols();
    Tensor out({count, c});
    std::copy(va.data() + r0 * c, va.data() + (r0 + count) * c, out.data());
    return push(std::move(out), needs(a), {a},
                [a, r0, count, c](Tape& t, const Tensor& g, Id) {
                  Tensor ga(t.nodes_[a].value.shape());
                  std::copy(g.data(), g.data() + count * c, ga.data() + r0 * c);
                  t.accum(a, ga);
                });
  }

  Id slice_cols(Id a, size_t c0, size_t count) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2 || c0 + count > va.cols())
      throw ShapeMismatch("slice_cols", va.shape_str(),
                          "[" + std::to_string(c0) + "," + std::to_string(c0 + count) + ")");
    const size_t r = va.rows(), c = va.cols();
    Tensor out({r, count});
    for (size_t i = 0; i < r; ++i)
      std::copy(va.data() + i * c + c0, va.data() + i * c + c0 + count, out.data() + i * count);
    return push(std::move(out), needs(a), {a},
                [a, c0, count, r, c](Tape& t, const Tensor& g, Id) {
                  Tensor ga(t.nodes_[a].value.shape());
                  for (size_t i = 0; i < r; ++i)
                    std::copy(g.data() + i * count, g.data() + (i + 1) * count,
                              ga.data() + i * c + c0);
                  t.accum(a, ga);
                });
  }

  Id concat_rows(const std::vector<Id>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_rows: no parts");
    size_t c = nodes_[parts[0]].value.cols(), r = 0;
    bool any = false;
    for (Id p : parts) {
      const Tensor& v = nodes_[p].value;
      if (v.rank() != 2 || v.cols() != c)
        throw ShapeMismatch("concat_rows", nodes_[parts[0]].value.shape_str(), v.shape_str());
      r += v.rows();
      any = any || needs(p);
    }
    Tensor out({r, c});
    size_t off = 0;
    for (Id p : parts) {
      const Tensor& v = nodes_[p].value;
      std::copy(v.data(), v.data() + v.numel(), out.data() + off);
      off += v.numel();
    }
    auto parts_copy = parts;
    return push(std::move(out), any, parts,
                [parts_copy, c](Tape& t, const Tensor& g, Id) {
                  size_t off = 0;
                  for (Id p : parts_copy) {
                    const Tensor& v = t.nodes_[p].value;
                    Tensor gp(v.shape());
                    std::copy(g.data() + off, g.data() + off + v.numel(), gp.data());
                    off += v.numel();
                    t.accum(p, gp);
                  }
                });
  }

  Id concat_cols(const std::vector<Id>& parts) {
    if (parts.empty()) throw ShapeMismatch("concat_cols: no parts");
    size_t r = nodes_[parts[0]].value.rows(), c = 0;
    bool any = false;
    for (Id p : parts) {
      const Tensor& v = nodes_[p].value;
      if (v.rank() != 2 || v.rows() != r)
        throw ShapeMismatch("concat_cols", nodes_[parts[0]].value.shape_str(), v.shape_str());
      c += v.cols();
      any = any || needs(p);
    }
    Tensor out({r, c});
    size_t coff = 0;
    for (Id p : parts) {
      const Tensor& v = nodes_[p].value;
      for (size_t i = 0; i < r; ++i)
        std::copy(v.data() + i * v.cols(), v.data() + (i + 1) * v.cols(),
                  out.data() + i * c + coff);
      coff += v.cols();
    }
    auto parts_copy = parts;
    return push(std::move(out), any, parts,
                [parts_copy, r, c](Tape& t, const Tensor& g, Id) {
                  size_t coff = 0;
                  for (Id p : parts_copy) {
                    const Tensor& v = t.nodes_[p].value;
                    Tensor gp(v.shape());
                    for (size_t i = 0; i < r; ++i)
                      std::copy(g.data() + i * c + coff, g.data() + i * c + coff + v.cols(),
                                gp.data() + i * v.cols());
                    coff += v.cols();
                    t.accum(p, gp);
                  }
                });
  }

  // ---- reductions ----

  Id sum(Id a) {
    double s = 0.0;
    for (double x : nodes_[a].value.values()) s += x;
    return push(Tensor::scalar(s), needs(a), {a},
                [a](Tape& t, const Tensor& g, Id) {
                  Tensor ga = Tensor::full(t.nodes_[a].value.shape(), g[0]);
                  t.accum(a, ga);
                });
  }

  Id mean(Id a) {
    const size_t n = nodes_[a].value.numel();
    double s = 0.0;
    for (double x : nodes_[a].value.values()) s += x;
    return push(Tensor::scalar(s / static_cast<double>(n)), needs(a), {a},
                [a, n](Tape& t, const Tensor& g, Id) {
                  Tensor ga = Tensor::full(t.nodes_[a].value.shape(), g[0] / static_cast<double>(n));
                  t.accum(a, ga);
                });
  }

  // ---- rows as distributions ----

  // Numerically guarded row softmax (subtracts the row max).
  Id softmax(Id a) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2) throw ShapeMismatch("softmax", va.shape_str(), "rank-2");
    const size_t r = va.rows(), c = va.cols();
    Tensor out({r, c});
    for (size_t i = 0; i < r; ++i) {
      double mx = va.at(i, 0);
      for (size_t j = 1; j < c; ++j) mx = std::max(mx, va.at(i, j));
      double s = 0.0;
      for (size_t j = 0; j < c; ++j) {
        double e = std::exp(va.at(i, j) - mx);
        out.at(i, j) = e;
        s += e;
      }
      for (size_t j = 0; j < c; ++j) out.at(i, j) /= s;
    }
    return push(std::move(out), needs(a), {a},
                [a, r, c](Tape& t, const Tensor& g, Id self) {
                  const Tensor& y = t.nodes_[self].value;
                  Tensor ga({r, c});
                  for (size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
                    for (size_t j = 0; j < c; ++j)
                      ga.at(i, j) = y.at(i, j) * (g.at(i, j) - dot);
                  }
                  t.accum(a, ga);
                });
  }

  // y_ij = x_ij / sum_j x_ij. This is the normalization step of the combined
  // probability; inputs are expected positive (callers floor first).
  Id row_normalize(Id a) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2) throw ShapeMismatch("row_normalize", va.shape_str(), "rank-2");
    const size_t r = va.rows(), c = va.cols();
    Tensor out({r, c});
    std::vector<double> sums(r, 0.0);
    for (size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (size_t j = 0; j < c; ++j) s += va.at(i, j);
      sums[i] = s;
      for (size_t j = 0; j < c; ++j) out.at(i, j) = va.at(i, j) / s;
    }
    return push(std::move(out), needs(a), {a},
                [a, r, c, sums](Tape& t, const Tensor& g, Id self) {
                  const Tensor& y = t.nodes_[self].value;
                  Tensor ga({r, c});
                  for (size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (size_t j = 0; j < c; ++j) dot += g.at(i, j) * y.at(i, j);
                    for (size_t j = 0; j < c; ++j)
                      ga.at(i, j) = (g.at(i, j) - dot) / sums[i];
                  }
                  t.accum(a, ga);
                });
  }

  Id layer_norm(Id a, Id gain, Id bias) {
    const Tensor& va = nodes_[a].value;
    const Tensor& vg = nodes_[gain].value;
    const Tensor& vb = nodes_[bias].value;
    if (va.rank() != 2 || vg.numel() != va.cols() || vb.numel() != va.cols())
      throw ShapeMismatch("layer_norm", va.shape_str(), vg.shape_str());
    const size_t r = va.rows(), c = va.cols();
    Tensor out({r, c});
    Tensor xhat({r, c});
    std::vector<double> inv_std(r);
    for (size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (size_t j = 0; j < c; ++j) mu += va.at(i, j);
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (size_t j = 0; j < c; ++j) {
        double d = va.at(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      inv_std[i] = 1.0 / std::sqrt(var + kLayerNormEps);
      for (size_t j = 0; j < c; ++j) {
        double xh = (va.at(i, j) - mu) * inv_std[i];
        xhat.at(i, j) = xh;
        out.at(i, j) = vg[j] * xh + vb[j];
      }
    }
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    return push(std::move(out), needs(a) || needs(gain) || needs(bias), {a, gain, bias},
                [a, gain, bias, r, c, xh, inv_std](Tape& t, const Tensor& g, Id) {
                  const Tensor& vg2 = t.nodes_[gain].value;
                  Tensor ggain(vg2.shape());
                  Tensor gbias(t.nodes_[bias].value.shape());
                  Tensor ga({r, c});
                  for (size_t i = 0; i < r; ++i) {
                    double mean_h = 0.0, mean_hx = 0.0;
                    for (size_t j = 0; j < c; ++j) {
                      double h = vg2[j] * g.at(i, j);
                      mean_h += h;
                      mean_hx += h * xh->at(i, j);
                      ggain[j] += g.at(i, j) * xh->at(i, j);
                      gbias[j] += g.at(i, j);
                    }
                    mean_h /= static_cast<double>(c);
                    mean_hx /= static_cast<double>(c);
                    for (size_t j = 0; j < c; ++j) {
                      double h = vg2[j] * g.at(i, j);
                      ga.at(i, j) = (h - mean_h - xh->at(i, j) * mean_hx) * inv_std[i];
                    }
                  }
                  t.accum(a, ga);
                  t.accum(gain, ggain);
                  t.accum(bias, gbias);
                });
  }

  // mask entry 1 => replace by `fill`; gradient flows only through kept entries.
  Id masked_fill(Id a, std::shared_ptr<const std::vector<uint8_t>> mask, double fill) {
    const Tensor& va = nodes_[a].value;
    if (mask->size() != va.numel())
      throw ShapeMismatch("masked_fill", va.shape_str(), std::to_string(mask->size()) + " mask");
    Tensor out = va;
    for (size_t i = 0; i < out.numel(); ++i)
      if ((*mask)[i]) out[i] = fill;
    return push(std::move(out), needs(a), {a},
                [a, mask](Tape& t, const Tensor& g, Id) {
                  Tensor ga = g;
                  for (size_t i = 0; i < ga.numel(); ++i)
                    if ((*mask)[i]) ga[i] = 0.0;
                  t.accum(a, ga);
                });
  }

  // Row gather from an embedding table; repeated ids accumulate gradient.
  Id embedding_lookup(Id table, std::shared_ptr<const std::vector<int>> ids) {
    const Tensor& vt = nodes_[table].value;
    if (vt.rank() != 2) throw ShapeMismatch("embedding_lookup", vt.shape_str(), "rank-2");
    const size_t c = vt.cols();
    Tensor out({ids->size(), c});
    for (size_t i = 0; i < ids->size(); ++i) {
      int id = (*ids)[i];
      if (id < 0 || static_cast<size_t>(id) >= vt.rows())
        throw ShapeMismatch("embedding_lookup: id out of range", vt.shape_str(),
                            std::to_string(id));
      std::copy(vt.data() + id * c, vt.data() + (id + 1) * c, out.data() + i * c);
    }
    return push(std::move(out), needs(table), {table},
                [table, ids, c](Tape& t, const Tensor& g, Id) {
                  Tensor gt(t.nodes_[table].value.shape());
                  for (size_t i = 0; i < ids->size(); ++i) {
                    double* row = gt.data() + (*ids)[i] * c;
                    const double* grow = g.data() + i * c;
                    for (size_t j = 0; j < c; ++j) row[j] += grow[j];
                  }
                  t.accum(table, gt);
                });
  }

  // y_i = a(i, cols[i]); picks one entry per row (the target-token lookup).
  Id pick(Id a, std::shared_ptr<const std::vector<int>> cols) {
    const Tensor& va = nodes_[a].value;
    if (va.rank() != 2 || cols->size() != va.rows())
      throw ShapeMismatch("pick", va.shape_str(), std::to_string(cols->size()) + " indices");
    const size_t r = va.rows(), c = va.cols();
    Tensor out({r});
    for (size_t i = 0; i < r; ++i) {
      int j = (*cols)[i];
      if (j < 0 || static_cast<size_t>(j) >= c)
        throw ShapeMismatch("pick: index out of range", va.shape_str(), std::to_string(j));
      out[i] = va.at(i, static_cast<size_t>(j));
    }
    return push(std::move(out), needs(a), {a},
                [a, cols, r, c](Tape& t, const Tensor& g, Id) {
                  Tensor ga({r, c});
                  for (size_t i = 0; i < r; ++i) ga.at(i, (*cols)[i]) = g[i];
                  t.accum(a, ga);
                });
  }

  // ---- backward ----

  GradMap backward(Id loss) {
    if (nodes_[loss].value.numel() != 1)
      throw NonScalarLoss(nodes_[loss].value.shape_str());
    grads_.assign(nodes_.size(), Tensor());
    grads_[loss] = Tensor(nodes_[loss].value.shape(), {1.0});
    for (Id id = loss; id >= 0; --id) {
      Node& n = nodes_[id];
      if (!n.requires_grad || grads_[id].numel() == 0 || !n.back) continue;
      n.back(*this, grads_[id], id);
    }
    GradMap out;
    for (Id l : leaves_) {
      if (grads_[l].numel() == 0)
        out.by_leaf.emplace(l, Tensor(nodes_[l].value.shape()));
      else
        out.by_leaf.emplace(l, std::move(grads_[l]));
    }
    grads_.clear();
    return out;
  }

 private:
  using BackFn = std::function<void(Tape&, const Tensor& grad_out, Id self)>;

  struct Node {
    Tensor value;
    bool requires_grad = false;
    BackFn back;
  };

  bool needs(Id id) const { return nodes_[id].requires_grad; }

  void binary_shape_check(const char* op, Id a, Id b) const {
    if (!nodes_[a].value.same_shape(nodes_[b].value))
      throw ShapeMismatch(op, nodes_[a].value.shape_str(), nodes_[b].value.shape_str());
  }

  Id push(Tensor value, bool requires_grad, std::initializer_list<Id>, BackFn back) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(back)});
    return static_cast<Id>(nodes_.size() - 1);
  }
  Id push(Tensor value, bool requires_grad, const std::vector<Id>&, BackFn back) {
    nodes_.push_back(Node{std::move(value), requires_grad, std::move(back)});
    return static_cast<Id>(nodes_.size() - 1);
  }

  void accum(Id id, const Tensor& g) {
    if (!nodes_[id].requires_grad) return;
    if (grads_[id].numel() == 0) {
      grads_[id] = g;
    } else {
      for (size_t i = 0; i < g.numel(); ++i) grads_[id][i] += g[i];
    }
  }

  std::vector<Node> nodes_;
  std::vector<Id> leaves_;
  std::vector<Tensor> grads_;
};

// Central-difference verification of an arbitrary tape-built scalar.
// `build` receives a fresh tape plus one leaf per parameter and returns the
// loss node. Returns max_i |analytic_i - numeric_i| / max(1, |numeric_i|).
inline double check_gradients(
    const std::function<Tape::Id(Tape&, const std::vector<Tape::Id>&)>& build,
    const std::vector<Tensor>& params, double epsilon) {
  if (epsilon < 1e-8 || epsilon > 1e-3)
    throw BadConfig("check_gradients: epsilon must lie in [1e-8, 1e-3]");

  auto eval = [&](const std::vector<Tensor>& p) {
    Tape t;
    std::vector<Tape::Id> leaves;
    leaves.reserve(p.size());
    for (const Tensor& x : p) leaves.push_back(t.leaf(x));
    return t.value(build(t, leaves))[0];
  };

  Tape t;
  std::vector<Tape::Id> leaves;
  for (const Tensor& x : params) leaves.push_back(t.leaf(x));
  Tape::Id loss = build(t, leaves);
  Tape::GradMap grads = t.backward(loss);

  double worst = 0.0;
  std::vector<Tensor> work = params;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor& analytic = grads.at(leaves[pi]);
    for (size_t e = 0; e < params[pi].numel(); ++e) {
      const double orig = work[pi][e];
      work[pi][e] = orig + epsilon;
      const double fp = eval(work);
      work[pi][e] = orig - epsilon;
      const double fm = eval(work);
      work[pi][e] = orig;
      const double numeric = (fp - fm) / (2.0 * epsilon);
      const double err = std::abs(analytic[e] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace pluginlm
