#include "xt2c/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace xt2c {
namespace {

template <typename T>
void require_same_shape(Var<T> a, Var<T> b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
  }
}

template <typename T>
bool any_grad(std::initializer_list<Var<T>> vars) {
  for (const auto& v : vars) {
    if (v.valid() && v.graph->requires_grad(v)) return true;
  }
  return false;
}

}  // namespace

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                         std::to_string(b.rows()) + ")");
  }
  Graph<T>& g = *a.graph;
  Matrix<T> out = a.value() * b.value();
  return g.push(std::move(out), any_grad({a, b}), [a, b](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    if (g.requires_grad(a)) g.accumulate(a, go * g.value(b).transpose());
    if (g.requires_grad(b)) g.accumulate(b, g.value(a).transpose() * go);
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "add");
  Matrix<T> out = a.value() + b.value();
  return a.graph->push(std::move(out), any_grad({a, b}), [a, b](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, go);
    g.accumulate(b, go);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "sub");
  Matrix<T> out = a.value() - b.value();
  return a.graph->push(std::move(out), any_grad({a, b}), [a, b](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, go);
    if (g.requires_grad(b)) g.accumulate(b, -go);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a, b, "mul");
  Matrix<T> out = a.value().cwiseProduct(b.value());
  return a.graph->push(std::move(out), any_grad({a, b}), [a, b](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    if (g.requires_grad(a)) g.accumulate(a, go.cwiseProduct(g.value(b)));
    if (g.requires_grad(b)) g.accumulate(b, go.cwiseProduct(g.value(a)));
  });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Matrix<T> out = a.value() * factor;
  return a.graph->push(std::move(out), any_grad({a}), [a, factor](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, go * factor);
  });
}

template <typename T>
Var<T> add_row(Var<T> a, Var<T> row) {
  if (row.rows() != 1 || row.cols() != a.cols()) {
    throw DimensionError("add_row: bias must be 1x" + std::to_string(a.cols()));
  }
  Matrix<T> out = a.value().rowwise() + row.value().row(0);
  return a.graph->push(std::move(out), any_grad({a, row}), [a, row](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, go);
    if (g.requires_grad(row)) g.accumulate(row, go.colwise().sum());
  });
}

template <typename T>
Var<T> add_constant(Var<T> a, const Matrix<T>& c) {
  if (c.rows() != a.rows() || c.cols() != a.cols()) throw DimensionError("add_constant: shape mismatch");
  Matrix<T> out = a.value() + c;
  return a.graph->push(std::move(out), any_grad({a}), [a](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, go);
  });
}

template <typename T>
Var<T> scale_rows(Var<T> a, std::span<const T> factors) {
  if (static_cast<Eigen::Index>(factors.size()) != a.rows()) {
    throw DimensionError("scale_rows: one factor per row required");
  }
  auto f = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(factors.data(), factors.size()));
  Matrix<T> out = f->asDiagonal() * a.value();
  return a.graph->push(std::move(out), any_grad({a}), [a, f](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, f->asDiagonal() * go);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Matrix<T> out = a.value().cwiseMax(T(0));
  return a.graph->push(std::move(out), any_grad({a}), [a](Graph<T>& g, const Matrix<T>& out, const Matrix<T>& go) {
    g.accumulate(a, (out.array() > T(0)).select(go.array(), T(0)).matrix());
  });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  Matrix<T> out = (T(1) + (-a.value().array()).exp()).inverse().matrix();
  return a.graph->push(std::move(out), any_grad({a}), [a](Graph<T>& g, const Matrix<T>& out, const Matrix<T>& go) {
    g.accumulate(a, (go.array() * out.array() * (T(1) - out.array())).matrix());
  });
}

namespace {

template <typename T>
void softmax_inplace(Eigen::Ref<Matrix<T>> m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

}  // namespace

template <typename T>
Var<T> softmax_rows(Var<T> a) {
  Matrix<T> out = a.value();
  softmax_inplace<T>(out);
  return a.graph->push(std::move(out), any_grad({a}), [a](Graph<T>& g, const Matrix<T>& p, const Matrix<T>& go) {
    Eigen::Matrix<T, Eigen::Dynamic, 1> dot = go.cwiseProduct(p).rowwise().sum();
    Matrix<T> d = p.cwiseProduct(go.colwise() - dot);
    g.accumulate(a, d);
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  const Eigen::Index d = x.cols();
  if (d < 2) throw DimensionError("layer_norm: width must be at least 2");
  if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d) {
    throw DimensionError("layer_norm: gain/bias must be 1x" + std::to_string(d));
  }
  const Matrix<T>& xv = x.value();
  auto xhat = std::make_shared<Matrix<T>>(xv.rows(), d);
  auto inv_std = std::make_shared<Eigen::Matrix<T, Eigen::Dynamic, 1>>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const T mu = xv.row(r).mean();
    const T var = (xv.row(r).array() - mu).square().mean();
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    xhat->row(r) = (xv.row(r).array() - mu) * is;
  }
  Matrix<T> out = (xhat->array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  return x.graph->push(std::move(out), any_grad({x, gain, bias}),
                       [x, gain, bias, xhat, inv_std](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
                         if (g.requires_grad(gain)) g.accumulate(gain, go.cwiseProduct(*xhat).colwise().sum());
                         if (g.requires_grad(bias)) g.accumulate(bias, go.colwise().sum());
                         if (!g.requires_grad(x)) return;
                         Matrix<T> dxhat = go.array().rowwise() * g.value(gain).row(0).array();
                         Eigen::Matrix<T, Eigen::Dynamic, 1> m1 = dxhat.rowwise().mean();
                         Eigen::Matrix<T, Eigen::Dynamic, 1> m2 = dxhat.cwiseProduct(*xhat).rowwise().mean();
                         Matrix<T> dx = dxhat.colwise() - m1;
                         dx -= (xhat->array().colwise() * m2.array()).matrix();
                         g.accumulate(x, inv_std->asDiagonal() * dx);
                       });
}

template <typename T>
Var<T> concat_cols(std::span<const Var<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  bool need = false;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row counts differ");
    cols += p.cols();
    need = need || p.graph->requires_grad(p);
  }
  Matrix<T> out(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    out.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var<T>> keep(parts.begin(), parts.end());
  return parts[0].graph->push(std::move(out), need, [keep](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    Eigen::Index c = 0;
    for (const auto& p : keep) {
      const Eigen::Index w = p.cols();
      if (g.requires_grad(p)) g.accumulate(p, go.middleCols(c, w));
      c += w;
    }
  });
}

template <typename T>
Var<T> slice_rows(Var<T> a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count <= 0 || begin + count > a.rows()) throw DimensionError("slice_rows: range out of bounds");
  Matrix<T> out = a.value().middleRows(begin, count);
  return a.graph->push(std::move(out), any_grad({a}), [a, begin](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate_block(a, begin, 0, go);
  });
}

template <typename T>
Var<T> gather_rows(Var<T> table, std::span<const int> ids) {
  const Matrix<T>& tv = table.value();
  Matrix<T> out(static_cast<Eigen::Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) throw DimensionError("gather_rows: id out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(ids[i]);
  }
  auto idx = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  return table.graph->push(std::move(out), any_grad({table}), [table, idx](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    const Matrix<T>& tv = g.value(table);
    Matrix<T> d = Matrix<T>::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < idx->size(); ++i) d.row((*idx)[i]) += go.row(static_cast<Eigen::Index>(i));
    g.accumulate(table, d);
  });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.graph->constant(a.value());
}

template <typename T>
Var<T> sum(Var<T> a) {
  Matrix<T> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.graph->push(std::move(out), any_grad({a}), [a](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    g.accumulate(a, Matrix<T>::Constant(a.rows(), a.cols(), go(0, 0)));
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

template <typename T>
Var<T> segmented_attention(Var<T> queries, Var<T> keys, Var<T> values, Var<T> memory_keys, Var<T> memory_values,
                           std::span<const AttentionSegment> segments, int heads) {
  const Eigen::Index d = queries.cols();
  if (heads <= 0 || d % heads != 0) throw DimensionError("attention: head count must divide width");
  if (keys.cols() != d || values.cols() != d) throw DimensionError("attention: key/value width mismatch");
  if (keys.rows() != values.rows()) throw DimensionError("attention: key/value row counts differ");
  const bool has_mem = memory_keys.valid() && memory_values.valid();
  const Eigen::Index n_mem = has_mem ? memory_keys.rows() : 0;
  if (has_mem && (memory_keys.cols() != d || memory_values.cols() != d || memory_values.rows() != n_mem)) {
    throw DimensionError("attention: memory shape mismatch");
  }
  const Eigen::Index dh = d / heads;
  const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));

  const Matrix<T>& Q = queries.value();
  const Matrix<T>& K = keys.value();
  const Matrix<T>& V = values.value();
  Matrix<T> out = Matrix<T>::Zero(Q.rows(), d);

  auto segs = std::make_shared<std::vector<AttentionSegment>>(segments.begin(), segments.end());
  // Attention probabilities, one matrix per (segment, head).
  auto probs = std::make_shared<std::vector<Matrix<T>>>();
  probs->reserve(segments.size() * heads);

  for (const auto& s : *segs) {
    if (s.query_begin < 0 || s.query_begin + s.query_count > Q.rows() || s.key_begin < 0 ||
        s.key_begin + s.key_count > K.rows()) {
      throw DimensionError("attention: segment out of range");
    }
    if (s.causal && s.query_count != s.key_count) throw DimensionError("attention: causal segment must be square");
    const Eigen::Index nk = s.key_count + n_mem;
    for (int h = 0; h < heads; ++h) {
      const Eigen::Index c0 = h * dh;
      Matrix<T> kall(nk, dh);
      Matrix<T> vall(nk, dh);
      kall.topRows(s.key_count) = K.block(s.key_begin, c0, s.key_count, dh);
      vall.topRows(s.key_count) = V.block(s.key_begin, c0, s.key_count, dh);
      if (has_mem) {
        kall.bottomRows(n_mem) = memory_keys.value().middleCols(c0, dh);
        vall.bottomRows(n_mem) = memory_values.value().middleCols(c0, dh);
      }
      Matrix<T> p = (Q.block(s.query_begin, c0, s.query_count, dh) * kall.transpose()) * scale_factor;
      if (s.causal) {
        for (Eigen::Index i = 0; i < s.query_count; ++i) {
          for (Eigen::Index j = i + 1; j < s.key_count; ++j) p(i, j) = -std::numeric_limits<T>::infinity();
        }
      }
      softmax_inplace<T>(p);
      out.block(s.query_begin, c0, s.query_count, dh) = p * vall;
      probs->push_back(std::move(p));
    }
  }

  const bool need = any_grad({queries, keys, values, memory_keys, memory_values});
  return queries.graph->push(
      std::move(out), need,
      [=](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
        const Matrix<T>& Q = g.value(queries);
        const Matrix<T>& K = g.value(keys);
        const Matrix<T>& V = g.value(values);
        Matrix<T> dQ = Matrix<T>::Zero(Q.rows(), d);
        Matrix<T> dK = Matrix<T>::Zero(K.rows(), d);
        Matrix<T> dV = Matrix<T>::Zero(V.rows(), d);
        Matrix<T> dMk, dMv;
        if (has_mem) {
          dMk = Matrix<T>::Zero(n_mem, d);
          dMv = Matrix<T>::Zero(n_mem, d);
        }
        std::size_t pi = 0;
        for (const auto& s : *segs) {
          const Eigen::Index nk = s.key_count + n_mem;
          for (int h = 0; h < heads; ++h, ++pi) {
            const Eigen::Index c0 = h * dh;
            const Matrix<T>& p = (*probs)[pi];
            Matrix<T> kall(nk, dh);
            Matrix<T> vall(nk, dh);
            kall.topRows(s.key_count) = K.block(s.key_begin, c0, s.key_count, dh);
            vall.topRows(s.key_count) = V.block(s.key_begin, c0, s.key_count, dh);
            if (has_mem) {
              kall.bottomRows(n_mem) = g.value(memory_keys).middleCols(c0, dh);
              vall.bottomRows(n_mem) = g.value(memory_values).middleCols(c0, dh);
            }
            const auto go_blk = go.block(s.query_begin, c0, s.query_count, dh);
            Matrix<T> dvall = p.transpose() * go_blk;
            Matrix<T> dp = go_blk * vall.transpose();
            Eigen::Matrix<T, Eigen::Dynamic, 1> dot = dp.cwiseProduct(p).rowwise().sum();
            Matrix<T> ds = p.cwiseProduct(dp.colwise() - dot) * scale_factor;
            dQ.block(s.query_begin, c0, s.query_count, dh) += ds * kall;
            Matrix<T> dkall = ds.transpose() * Q.block(s.query_begin, c0, s.query_count, dh);
            dK.block(s.key_begin, c0, s.key_count, dh) += dkall.topRows(s.key_count);
            dV.block(s.key_begin, c0, s.key_count, dh) += dvall.topRows(s.key_count);
            if (has_mem) {
              dMk.middleCols(c0, dh) += dkall.bottomRows(n_mem);
              dMv.middleCols(c0, dh) += dvall.bottomRows(n_mem);
            }
          }
        }
        g.accumulate(queries, dQ);
        g.accumulate(keys, dK);
        g.accumulate(values, dV);
        if (has_mem) {
          g.accumulate(memory_keys, dMk);
          g.accumulate(memory_values, dMv);
        }
      });
}

template <typename T>
Var<T> weighted_nll(Var<T> logits, std::span<const int> targets, std::span<const T> weights) {
  const Matrix<T>& lv = logits.value();
  if (static_cast<Eigen::Index>(targets.size()) != lv.rows() || targets.size() != weights.size()) {
    throw DimensionError("weighted_nll: one target and weight per row required");
  }
  auto probs = std::make_shared<Matrix<T>>(Matrix<T>::Zero(lv.rows(), lv.cols()));
  auto tgt = std::make_shared<std::vector<int>>(targets.begin(), targets.end());
  auto w = std::make_shared<std::vector<T>>(weights.begin(), weights.end());
  T total = 0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    if ((*w)[r] == T(0)) continue;
    const int t = (*tgt)[r];
    if (t < 0 || t >= lv.cols()) throw DimensionError("weighted_nll: target id out of range");
    const T mx = lv.row(r).maxCoeff();
    auto e = (lv.row(r).array() - mx).exp();
    const T z = e.sum();
    probs->row(r) = e / z;
    total += (*w)[r] * (std::log(z) + mx - lv(r, t));
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total;
  return logits.graph->push(std::move(out), any_grad({logits}),
                            [logits, probs, tgt, w](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
                              Matrix<T> d = Matrix<T>::Zero(probs->rows(), probs->cols());
                              for (Eigen::Index r = 0; r < d.rows(); ++r) {
                                const T wr = (*w)[r];
                                if (wr == T(0)) continue;
                                d.row(r) = probs->row(r) * (wr * go(0, 0));
                                d(r, (*tgt)[r]) -= wr * go(0, 0);
                              }
                              g.accumulate(logits, d);
                            });
}

template <typename T>
Var<T> huber_mean(Var<T> a, Var<T> b, T delta) {
  require_same_shape(a, b, "huber_mean");
  auto diff = std::make_shared<Matrix<T>>(a.value() - b.value());
  const T n = static_cast<T>(diff->size());
  T total = 0;
  for (Eigen::Index i = 0; i < diff->size(); ++i) {
    const T x = std::abs(diff->data()[i]);
    total += x <= delta ? T(0.5) * x * x : delta * (x - T(0.5) * delta);
  }
  Matrix<T> out(1, 1);
  out(0, 0) = total / n;
  return a.graph->push(std::move(out), any_grad({a, b}), [a, b, diff, delta, n](Graph<T>& g, const Matrix<T>&, const Matrix<T>& go) {
    Matrix<T> d = diff->unaryExpr([delta](T x) { return std::clamp(x, -delta, delta); }) * (go(0, 0) / n);
    if (g.requires_grad(a)) g.accumulate(a, d);
    if (g.requires_grad(b)) g.accumulate(b, -d);
  });
}

#define XT2C_INSTANTIATE_OPS(T)                                                                              \
  template Var<T> matmul(Var<T>, Var<T>);                                                                    \
  template Var<T> add(Var<T>, Var<T>);                                                                       \
  template Var<T> sub(Var<T>, Var<T>);                                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                                       \
  template Var<T> scale(Var<T>, T);                                                                          \
  template Var<T> add_row(Var<T>, Var<T>);                                                                   \
  template Var<T> add_constant(Var<T>, const Matrix<T>&);                                                    \
  template Var<T> scale_rows(Var<T>, std::span<const T>);                                                    \
  template Var<T> relu(Var<T>);                                                                              \
  template Var<T> sigmoid(Var<T>);                                                                           \
  template Var<T> softmax_rows(Var<T>);                                                                      \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                                     \
  template Var<T> concat_cols(std::span<const Var<T>>);                                                      \
  template Var<T> slice_rows(Var<T>, Eigen::Index, Eigen::Index);                                            \
  template Var<T> gather_rows(Var<T>, std::span<const int>);                                                 \
  template Var<T> detach(Var<T>);                                                                            \
  template Var<T> sum(Var<T>);                                                                               \
  template Var<T> mean(Var<T>);                                                                              \
  template Var<T> segmented_attention(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, std::span<const AttentionSegment>, \
                                      int);                                                                  \
  template Var<T> weighted_nll(Var<T>, std::span<const int>, std::span<const T>);                            \
  template Var<T> huber_mean(Var<T>, Var<T>, T);

XT2C_INSTANTIATE_OPS(float)
XT2C_INSTANTIATE_OPS(double)

}  // namespace xt2c
