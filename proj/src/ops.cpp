#include "sbsg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "autograd.hpp"
#include "sbsg/errors.hpp"

namespace sbsg {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t normalize_axis(std::ptrdiff_t axis, std::size_t rank, const Shape& shape) {
  const auto r = static_cast<std::ptrdiff_t>(rank);
  const auto a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape));
  }
  return static_cast<std::size_t>(a);
}

// `small` (ignoring leading 1s) equals the trailing dims of `big`.
bool is_trailing_suffix(const Shape& small, const Shape& big) {
  std::size_t start = 0;
  while (start < small.size() && small[start] == 1) ++start;
  const std::size_t len = small.size() - start;
  if (len > big.size()) return false;
  return std::equal(small.begin() + static_cast<std::ptrdiff_t>(start), small.end(),
                    big.end() - static_cast<std::ptrdiff_t>(len));
}

// Index map of `in` (broadcast to `out`) for every flat position of `out`.
std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t in_axis = in.size() - 1 - k;
    const std::size_t out_axis = rank - 1 - k;
    stride[out_axis] = in[in_axis] == 1 ? 0 : s;
    s *= in[in_axis];
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> index(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < total; ++i) {
    index[i] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      offset += stride[ax];
      if (counter[ax] < out[ax]) break;
      offset -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  return index;
}

struct BroadcastPlan {
  enum class Kind { kSame, kBSuffix, kASuffix, kGeneral };
  Kind kind = Kind::kSame;
  Shape out;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;

  std::size_t a_at(std::size_t i) const {
    switch (kind) {
      case Kind::kSame:
      case Kind::kBSuffix: return i;
      case Kind::kASuffix: return i % na;
      default: return ia[i];
    }
  }
  std::size_t b_at(std::size_t i) const {
    switch (kind) {
      case Kind::kSame:
      case Kind::kASuffix: return i;
      case Kind::kBSuffix: return i % nb;
      default: return ib[i];
    }
  }
};

BroadcastPlan make_plan(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  plan.out = broadcast_shape(a, b);
  plan.na = shape_numel(a);
  plan.nb = shape_numel(b);
  if (a == b) {
    plan.kind = BroadcastPlan::Kind::kSame;
  } else if (plan.out == a && is_trailing_suffix(b, a)) {
    plan.kind = BroadcastPlan::Kind::kBSuffix;
  } else if (plan.out == b && is_trailing_suffix(a, b)) {
    plan.kind = BroadcastPlan::Kind::kASuffix;
  } else {
    plan.kind = BroadcastPlan::Kind::kGeneral;
    plan.ia = broadcast_index(a, plan.out);
    plan.ib = broadcast_index(b, plan.out);
  }
  return plan;
}

// Elementwise binary op with broadcasting. `fwd(x, y)` gives the value,
// `da(g, x, y)` / `db(g, x, y)` the contributions to each input's gradient.
template <typename Fwd, typename Da, typename Db>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  auto plan = std::make_shared<BroadcastPlan>(make_plan(a.shape(), b.shape()));
  const auto& av = a.data();
  const auto& bv = b.data();
  const std::size_t total = shape_numel(plan->out);
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = fwd(av[plan->a_at(i)], bv[plan->b_at(i)]);
  return detail::make_result(plan->out, std::move(out), {a.node(), b.node()}, [plan, da, db](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    const std::size_t n = self.grad.size();
    if (pa.requires_grad) {
      auto& g = pa.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ia = plan->a_at(i);
        g[ia] += da(self.grad[i], pa.data[ia], pb.data[plan->b_at(i)]);
      }
    }
    if (pb.requires_grad) {
      auto& g = pb.ensure_grad();
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t ib = plan->b_at(i);
        g[ib] += db(self.grad[i], pa.data[plan->a_at(i)], pb.data[ib]);
      }
    }
  });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t k = 0; k < rank; ++k) {
    const std::size_t da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const std::size_t db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    out[rank - 1 - k] = std::max(da, db);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& x, double factor) {
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * factor;
  return detail::make_result(x.shape(), std::move(out), {x.node()}, [factor](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
  });
}

Tensor relu(const Tensor& x) {
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return detail::make_result(x.shape(), std::move(out), {x.node()}, [](Node& self) {
    Node& p = *self.parents[0];
    auto& g = p.ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (p.data[i] > 0.0) g[i] += self.grad[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2 || sa[sa.size() - 1] != sb[sb.size() - 2]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2];
  const std::size_t k = sa[sa.size() - 1];
  const std::size_t n = sb[sb.size() - 1];
  const auto em = static_cast<Eigen::Index>(m);
  const auto ek = static_cast<Eigen::Index>(k);
  const auto en = static_cast<Eigen::Index>(n);

  if (sb.size() == 2) {
    // The batch dims of `a` fold into its row count: one GEMM.
    const std::size_t rows = a.numel() / k;
    const auto er = static_cast<Eigen::Index>(rows);
    Shape out_shape = sa;
    out_shape.back() = n;
    std::vector<double> out(rows * n);
    MapMat(out.data(), er, en).noalias() = ConstMapMat(a.data().data(), er, ek) * ConstMapMat(b.data().data(), ek, en);
    return detail::make_result(std::move(out_shape), std::move(out), {a.node(), b.node()},
                               [er, ek, en](Node& self) {
                                 Node& pa = *self.parents[0];
                                 Node& pb = *self.parents[1];
                                 ConstMapMat gc(self.grad.data(), er, en);
                                 if (pa.requires_grad) {
                                   MapMat(pa.ensure_grad().data(), er, ek).noalias() +=
                                       gc * ConstMapMat(pb.data.data(), ek, en).transpose();
                                 }
                                 if (pb.requires_grad) {
                                   MapMat(pb.ensure_grad().data(), ek, en).noalias() +=
                                       ConstMapMat(pa.data.data(), er, ek).transpose() * gc;
                                 }
                               });
  }

  const Shape batch_a(sa.begin(), sa.end() - 2);
  const Shape batch_b(sb.begin(), sb.end() - 2);
  Shape batch_out;
  try {
    batch_out = broadcast_shape(batch_a, batch_b);
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t batches = shape_numel(batch_out);
  auto ia = std::make_shared<std::vector<std::size_t>>(broadcast_index(batch_a, batch_out));
  auto ib = std::make_shared<std::vector<std::size_t>>(broadcast_index(batch_b, batch_out));
  Shape out_shape = batch_out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<double> out(batches * m * n);
  for (std::size_t i = 0; i < batches; ++i) {
    MapMat(out.data() + i * m * n, em, en).noalias() =
        ConstMapMat(a.data().data() + (*ia)[i] * m * k, em, ek) * ConstMapMat(b.data().data() + (*ib)[i] * k * n, ek, en);
  }
  return detail::make_result(std::move(out_shape), std::move(out), {a.node(), b.node()},
                             [ia, ib, batches, m, k, n, em, ek, en](Node& self) {
                               Node& pa = *self.parents[0];
                               Node& pb = *self.parents[1];
                               for (std::size_t i = 0; i < batches; ++i) {
                                 ConstMapMat gc(self.grad.data() + i * m * n, em, en);
                                 if (pa.requires_grad) {
                                   MapMat(pa.ensure_grad().data() + (*ia)[i] * m * k, em, ek).noalias() +=
                                       gc * ConstMapMat(pb.data.data() + (*ib)[i] * k * n, ek, en).transpose();
                                 }
                                 if (pb.requires_grad) {
                                   MapMat(pb.ensure_grad().data() + (*ib)[i] * k * n, ek, en).noalias() +=
                                       ConstMapMat(pa.data.data() + (*ia)[i] * m * k, em, ek).transpose() * gc;
                                 }
                               }
                             });
}

namespace {

struct AxisLayout {
  std::size_t outer, n, inner;
};

AxisLayout axis_layout(const Shape& shape, std::size_t axis) {
  AxisLayout l{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) l.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) l.inner *= shape[i];
  return l;
}

}  // namespace

Tensor softmax(const Tensor& x, std::ptrdiff_t axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), x.shape());
  const AxisLayout l = axis_layout(x.shape(), ax);
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xv[base + j * l.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) {
        const double e = std::exp(xv[base + j * l.inner] - mx);
        out[base + j * l.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < l.n; ++j) out[base + j * l.inner] /= total;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x.node()}, [l](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.n * l.inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < l.n; ++j) dot += self.grad[base + j * l.inner] * y[base + j * l.inner];
        for (std::size_t j = 0; j < l.n; ++j) {
          const std::size_t idx = base + j * l.inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_softmax(const Tensor& x, std::ptrdiff_t axis) {
  const std::size_t ax = normalize_axis(axis, x.rank(), x.shape());
  const AxisLayout l = axis_layout(x.shape(), ax);
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < l.outer; ++o) {
    for (std::size_t in = 0; in < l.inner; ++in) {
      const std::size_t base = o * l.n * l.inner + in;
      double mx = xv[base];
      for (std::size_t j = 1; j < l.n; ++j) mx = std::max(mx, xv[base + j * l.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < l.n; ++j) total += std::exp(xv[base + j * l.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < l.n; ++j) out[base + j * l.inner] = xv[base + j * l.inner] - lse;
    }
  }
  return detail::make_result(x.shape(), std::move(out), {x.node()}, [l](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    const auto& y = self.data;
    for (std::size_t o = 0; o < l.outer; ++o) {
      for (std::size_t in = 0; in < l.inner; ++in) {
        const std::size_t base = o * l.n * l.inner + in;
        double total = 0.0;
        for (std::size_t j = 0; j < l.n; ++j) total += self.grad[base + j * l.inner];
        for (std::size_t j = 0; j < l.n; ++j) {
          const std::size_t idx = base + j * l.inner;
          g[idx] += self.grad[idx] - std::exp(y[idx]) * total;
        }
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm: input " + shape_str(x.shape()) + " vs gain " + shape_str(gain.shape()) +
                         " / bias " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
      [d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        Node& px = *self.parents[0];
        Node& pg = *self.parents[1];
        Node& pb = *self.parents[2];
        const auto& dy = self.grad;
        if (pg.requires_grad) {
          auto& gg = pg.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += dy[r * d + j] * xhat[r * d + j];
        }
        if (pb.requires_grad) {
          auto& gb = pb.ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += dy[r * d + j];
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * pg.data[j];
              s1 += dh;
              s2 += dh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dh = dy[r * d + j] * pg.data[j];
              gx[r * d + j] += inv_std[r] * (dh - s1 * inv_d - xhat[r * d + j] * s2 * inv_d);
            }
          }
        }
      });
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return detail::make_result(shape, std::move(out), {x.node()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor permute(const Tensor& x, std::span<const std::size_t> order) {
  const Shape& in = x.shape();
  const std::size_t rank = in.size();
  if (order.size() != rank) {
    throw DimensionError("permute: order of length " + std::to_string(order.size()) + " for shape " + shape_str(in));
  }
  std::vector<bool> used(rank, false);
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (order[i] >= rank || used[order[i]]) throw DimensionError("permute: invalid axis order for " + shape_str(in));
    used[order[i]] = true;
    out_shape[i] = in[order[i]];
  }
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t ax = rank - 1; ax-- > 0;) in_stride[ax] = in_stride[ax + 1] * in[ax + 1];
  std::vector<std::size_t> stride(rank);
  for (std::size_t i = 0; i < rank; ++i) stride[i] = in_stride[order[i]];

  const std::size_t total = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < total; ++i) {
    (*src)[i] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      ++counter[ax];
      offset += stride[ax];
      if (counter[ax] < out_shape[ax]) break;
      offset -= stride[ax] * counter[ax];
      counter[ax] = 0;
    }
  }
  const auto& xv = x.data();
  std::vector<double> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = xv[(*src)[i]];
  return detail::make_result(std::move(out_shape), std::move(out), {x.node()}, [src](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[(*src)[i]] += self.grad[i];
  });
}

Tensor transpose_last(const Tensor& x) {
  const std::size_t rank = x.rank();
  if (rank < 2) throw DimensionError("transpose_last: needs rank >= 2, got " + shape_str(x.shape()));
  std::vector<std::size_t> order(rank);
  std::iota(order.begin(), order.end(), 0);
  std::swap(order[rank - 1], order[rank - 2]);
  return permute(x, order);
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return detail::make_result({1}, {total}, {x.node()}, [](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& gi : g) gi += self.grad[0];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids, const Shape& index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be 2-D, got " + shape_str(table.shape()));
  if (shape_numel(index_shape) != ids.size()) {
    throw DimensionError("embedding: " + std::to_string(ids.size()) + " ids for index shape " + shape_str(index_shape));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  const auto& tv = table.data();
  std::vector<double> out(ids.size() * d);
  auto rows = std::make_shared<std::vector<std::size_t>>(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw VocabError("token id " + std::to_string(ids[i]) + " outside vocabulary of size " + std::to_string(vocab));
    }
    (*rows)[i] = static_cast<std::size_t>(ids[i]);
    std::copy_n(tv.data() + (*rows)[i] * d, d, out.data() + i * d);
  }
  Shape out_shape = index_shape;
  out_shape.push_back(d);
  return detail::make_result(std::move(out_shape), std::move(out), {table.node()}, [rows, d](Node& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < rows->size(); ++i) {
      double* dst = g.data() + (*rows)[i] * d;
      const double* srcg = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += srcg[j];
    }
  });
}

Tensor dropout(const Tensor& x, const Dropout& drop) {
  if (!drop.active()) return x;
  if (drop.rate >= 1.0) throw ContractError("dropout rate must be < 1");
  const double keep_scale = 1.0 / (1.0 - drop.rate);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) {
    const double u = static_cast<double>((*drop.rng)() >> 11) * 0x1.0p-53;
    m = u >= drop.rate ? keep_scale : 0.0;
  }
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

}  // namespace sbsg
