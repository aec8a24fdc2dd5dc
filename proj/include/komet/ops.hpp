#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "komet/errors.hpp"
#include "komet/tensor.hpp"

// Differentiable primitives. Every function here builds a graph node when any
// input requires a gradient and grad mode is on; otherwise it is a plain
// evaluation. Reductions accumulate in double regardless of Scalar.

namespace komet {

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

inline int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return a;
}

inline Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": shapes " + to_string(a) + " and " + to_string(b) +
                           " are not broadcast-compatible");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// For every flat index of `out`, the flat index of the broadcast source `in`.
inline std::vector<Index> broadcast_map(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  std::vector<Index> in_stride(rank, 0);
  Index stride = 1;
  for (std::size_t i = rank; i-- > offset;) {
    const Index d = in[i - offset];
    in_stride[i] = d == 1 ? 0 : stride;
    stride *= d;
  }
  const Index total = numel(out);
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> counter(rank, 0);
  Index src = 0;
  for (Index flat = 0; flat < total; ++flat) {
    map[static_cast<std::size_t>(flat)] = src;
    for (std::size_t i = rank; i-- > 0;) {
      ++counter[i];
      src += in_stride[i];
      if (counter[i] < out[i]) break;
      src -= in_stride[i] * counter[i];
      counter[i] = 0;
    }
  }
  return map;
}

template <typename Scalar>
typename Tensor<Scalar>::Array gather(const typename Tensor<Scalar>::Array& src, const std::vector<Index>& map) {
  typename Tensor<Scalar>::Array out(static_cast<Index>(map.size()));
  for (std::size_t i = 0; i < map.size(); ++i) out[static_cast<Index>(i)] = src[map[i]];
  return out;
}

template <typename Scalar, typename Expr>
void scatter_add(typename Tensor<Scalar>::Array& dst, const std::vector<Index>& map, const Expr& src) {
  for (std::size_t i = 0; i < map.size(); ++i) dst[map[i]] += src[static_cast<Index>(i)];
}

// Splits a shape around `axis` into (outer, length, inner) extents.
struct AxisSplit {
  Index outer = 1;
  Index length = 1;
  Index inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.length = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename Scalar>
struct Broadcast {
  Shape out;
  std::vector<Index> map_a;
  std::vector<Index> map_b;
  bool a_direct;
  bool b_direct;
};

template <typename Scalar>
Broadcast<Scalar> plan_broadcast(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* op) {
  Broadcast<Scalar> plan;
  plan.out = broadcast_shapes(a.shape(), b.shape(), op);
  plan.a_direct = a.shape() == plan.out;
  plan.b_direct = b.shape() == plan.out;
  if (!plan.a_direct) plan.map_a = broadcast_map(a.shape(), plan.out);
  if (!plan.b_direct) plan.map_b = broadcast_map(b.shape(), plan.out);
  return plan;
}

template <typename Scalar, typename Expr>
void accumulate_broadcast(detail::Node<Scalar>& parent, bool direct, const std::vector<Index>& map,
                          const Expr& contribution) {
  auto& g = parent.grad_buffer();
  if (direct) {
    g += contribution;
  } else {
    scatter_add<Scalar>(g, map, contribution);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic with numpy-style broadcasting.

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Array = typename Tensor<Scalar>::Array;
  auto plan = detail::plan_broadcast(a, b, "add");
  Array value = plan.a_direct ? Array(a.values()) : detail::gather<Scalar>(a.values(), plan.map_a);
  if (plan.b_direct) {
    value += b.values();
  } else {
    value += detail::gather<Scalar>(b.values(), plan.map_b);
  }
  return detail::make_result<Scalar>("add", plan.out, std::move(value), {&a, &b}, [plan](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate_broadcast(pa, plan.a_direct, plan.map_a, self.grad);
    if (pb.requires_grad) detail::accumulate_broadcast(pb, plan.b_direct, plan.map_b, self.grad);
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Array = typename Tensor<Scalar>::Array;
  auto plan = detail::plan_broadcast(a, b, "sub");
  Array value = plan.a_direct ? Array(a.values()) : detail::gather<Scalar>(a.values(), plan.map_a);
  if (plan.b_direct) {
    value -= b.values();
  } else {
    value -= detail::gather<Scalar>(b.values(), plan.map_b);
  }
  return detail::make_result<Scalar>("sub", plan.out, std::move(value), {&a, &b}, [plan](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) detail::accumulate_broadcast(pa, plan.a_direct, plan.map_a, self.grad);
    if (pb.requires_grad) {
      Array neg = -self.grad;
      detail::accumulate_broadcast(pb, plan.b_direct, plan.map_b, neg);
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Array = typename Tensor<Scalar>::Array;
  auto plan = detail::plan_broadcast(a, b, "mul");
  Array av = plan.a_direct ? Array(a.values()) : detail::gather<Scalar>(a.values(), plan.map_a);
  Array bv = plan.b_direct ? Array(b.values()) : detail::gather<Scalar>(b.values(), plan.map_b);
  Array value = av * bv;
  return detail::make_result<Scalar>("mul", plan.out, std::move(value), {&a, &b},
                                     [plan, av = std::move(av), bv = std::move(bv)](detail::Node<Scalar>& self) {
                                       auto& pa = *self.parents[0];
                                       auto& pb = *self.parents[1];
                                       if (pa.requires_grad) {
                                         Array da = self.grad * bv;
                                         detail::accumulate_broadcast(pa, plan.a_direct, plan.map_a, da);
                                       }
                                       if (pb.requires_grad) {
                                         Array db = self.grad * av;
                                         detail::accumulate_broadcast(pb, plan.b_direct, plan.map_b, db);
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar factor) {
  typename Tensor<Scalar>::Array value = x.values() * factor;
  return detail::make_result<Scalar>("scale", x.shape(), std::move(value), {&x}, [factor](detail::Node<Scalar>& self) {
    self.parents[0]->grad_buffer() += self.grad * factor;
  });
}

// ---------------------------------------------------------------------------
// Matrix products.

// Batched product over the trailing two axes; leading axes broadcast.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  using Array = typename Tensor<Scalar>::Array;
  if (a.rank() < 2 || b.rank() < 2 || a.dim(-1) != b.dim(-2)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index m = a.dim(-2);
  const Index k = a.dim(-1);
  const Index n = b.dim(-1);
  Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch_out;
  try {
    batch_out = detail::broadcast_shapes(batch_a, batch_b, "matmul");
  } catch (const DimensionError&) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const Index batches = numel(batch_out);
  std::vector<Index> map_a = detail::broadcast_map(batch_a, batch_out);
  std::vector<Index> map_b = detail::broadcast_map(batch_b, batch_out);

  Shape out_shape = batch_out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Array value(batches * m * n);
  for (Index i = 0; i < batches; ++i) {
    detail::ConstMatrixMap<Scalar> A(a.values().data() + map_a[static_cast<std::size_t>(i)] * m * k, m, k);
    detail::ConstMatrixMap<Scalar> B(b.values().data() + map_b[static_cast<std::size_t>(i)] * k * n, k, n);
    detail::MatrixMap<Scalar>(value.data() + i * m * n, m, n).noalias() = A * B;
  }
  return detail::make_result<Scalar>(
      "matmul", std::move(out_shape), std::move(value), {&a, &b},
      [m, k, n, batches, map_a = std::move(map_a), map_b = std::move(map_b)](detail::Node<Scalar>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (Index i = 0; i < batches; ++i) {
          const Index ia = map_a[static_cast<std::size_t>(i)];
          const Index ib = map_b[static_cast<std::size_t>(i)];
          detail::ConstMatrixMap<Scalar> G(self.grad.data() + i * m * n, m, n);
          if (pa.requires_grad) {
            detail::ConstMatrixMap<Scalar> B(pb.value.data() + ib * k * n, k, n);
            detail::MatrixMap<Scalar>(pa.grad_buffer().data() + ia * m * k, m, k).noalias() += G * B.transpose();
          }
          if (pb.requires_grad) {
            detail::ConstMatrixMap<Scalar> A(pa.value.data() + ia * m * k, m, k);
            detail::MatrixMap<Scalar>(pb.grad_buffer().data() + ib * k * n, k, n).noalias() += A.transpose() * G;
          }
        }
      });
}

// Affine map over the last axis: x[..., in] · weight_t[in, out] + bias[out].
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight_t, const Tensor<Scalar>* bias = nullptr) {
  using Array = typename Tensor<Scalar>::Array;
  if (weight_t.rank() != 2 || x.dim(-1) != weight_t.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight_t.shape()));
  }
  const Index in = weight_t.dim(0);
  const Index out = weight_t.dim(1);
  if (bias != nullptr && (bias->size() != out)) {
    throw DimensionError("linear: bias " + to_string(bias->shape()) + " does not match output width " +
                         std::to_string(out));
  }
  const Index rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Array value(rows * out);
  detail::MatrixMap<Scalar> Y(value.data(), rows, out);
  Y.noalias() = detail::ConstMatrixMap<Scalar>(x.values().data(), rows, in) *
                detail::ConstMatrixMap<Scalar>(weight_t.values().data(), in, out);
  if (bias != nullptr) {
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias->values().data(), out);
  }
  auto backward = [rows, in, out](detail::Node<Scalar>& self) {
    auto& px = *self.parents[0];
    auto& pw = *self.parents[1];
    detail::ConstMatrixMap<Scalar> G(self.grad.data(), rows, out);
    if (px.requires_grad) {
      detail::MatrixMap<Scalar>(px.grad_buffer().data(), rows, in).noalias() +=
          G * detail::ConstMatrixMap<Scalar>(pw.value.data(), in, out).transpose();
    }
    if (pw.requires_grad) {
      detail::MatrixMap<Scalar>(pw.grad_buffer().data(), in, out).noalias() +=
          detail::ConstMatrixMap<Scalar>(px.value.data(), rows, in).transpose() * G;
    }
    if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
      Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(self.parents[2]->grad_buffer().data(), out) +=
          G.colwise().sum();
    }
  };
  if (bias != nullptr) {
    return detail::make_result<Scalar>("linear", std::move(out_shape), std::move(value), {&x, &weight_t, bias},
                                       backward);
  }
  return detail::make_result<Scalar>("linear", std::move(out_shape), std::move(value), {&x, &weight_t}, backward);
}

// ---------------------------------------------------------------------------
// Layout.

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  Index known = 1;
  int inferred = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (inferred >= 0) throw DimensionError("reshape: more than one inferred axis");
      inferred = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (inferred >= 0 && known > 0) shape[static_cast<std::size_t>(inferred)] = x.size() / known;
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_result<Scalar>("reshape", std::move(shape), typename Tensor<Scalar>::Array(x.values()), {&x},
                                     [](detail::Node<Scalar>& self) { self.parents[0]->grad_buffer() += self.grad; });
}

// [..., a, b] -> [..., a*b], row-major.
template <typename Scalar>
Tensor<Scalar> flatten_trailing(const Tensor<Scalar>& x) {
  if (x.rank() < 2) throw DimensionError("flatten_trailing: rank must be >= 2, got shape " + to_string(x.shape()));
  Shape shape(x.shape().begin(), x.shape().end() - 2);
  shape.push_back(x.dim(-2) * x.dim(-1));
  return reshape(x, std::move(shape));
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) throw DimensionError("permute: axis list does not match rank");
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int a = detail::normalize_axis(axes[static_cast<std::size_t>(i)], r, "permute");
    if (seen[static_cast<std::size_t>(a)]) throw DimensionError("permute: repeated axis");
    seen[static_cast<std::size_t>(a)] = true;
    out_shape[static_cast<std::size_t>(i)] = x.shape()[static_cast<std::size_t>(a)];
  }
  std::vector<Index> in_stride(static_cast<std::size_t>(r));
  Index stride = 1;
  for (int i = r; i-- > 0;) {
    in_stride[static_cast<std::size_t>(i)] = stride;
    stride *= x.shape()[static_cast<std::size_t>(i)];
  }
  std::vector<Index> step(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    step[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(detail::normalize_axis(axes[static_cast<std::size_t>(i)], r, "permute"))];
  }
  const Index total = x.size();
  std::vector<Index> map(static_cast<std::size_t>(total));
  std::vector<Index> counter(static_cast<std::size_t>(r), 0);
  Index src = 0;
  for (Index flat = 0; flat < total; ++flat) {
    map[static_cast<std::size_t>(flat)] = src;
    for (int i = r; i-- > 0;) {
      const auto ui = static_cast<std::size_t>(i);
      ++counter[ui];
      src += step[ui];
      if (counter[ui] < out_shape[ui]) break;
      src -= step[ui] * counter[ui];
      counter[ui] = 0;
    }
  }
  auto value = detail::gather<Scalar>(x.values(), map);
  return detail::make_result<Scalar>("permute", std::move(out_shape), std::move(value), {&x},
                                     [map = std::move(map)](detail::Node<Scalar>& self) {
                                       detail::scatter_add<Scalar>(self.parents[0]->grad_buffer(), map, self.grad);
                                     });
}

template <typename Scalar>
Tensor<Scalar> transpose_last2(const Tensor<Scalar>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  if (x.rank() < 2) throw DimensionError("transpose_last2: rank must be >= 2");
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

// Picks one index along `axis` and drops that axis.
template <typename Scalar>
Tensor<Scalar> select(const Tensor<Scalar>& x, int axis, Index index) {
  const int a = detail::normalize_axis(axis, x.rank(), "select");
  const auto s = detail::split_axis(x.shape(), a);
  if (index < 0 || index >= s.length) throw DimensionError("select: index out of range");
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != a) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  typename Tensor<Scalar>::Array value(s.outer * s.inner);
  for (Index o = 0; o < s.outer; ++o) {
    value.segment(o * s.inner, s.inner) = x.values().segment((o * s.length + index) * s.inner, s.inner);
  }
  return detail::make_result<Scalar>("select", std::move(out_shape), std::move(value), {&x},
                                     [s, index](detail::Node<Scalar>& self) {
                                       auto& g = self.parents[0]->grad_buffer();
                                       for (Index o = 0; o < s.outer; ++o) {
                                         g.segment((o * s.length + index) * s.inner, s.inner) +=
                                             self.grad.segment(o * s.inner, s.inner);
                                       }
                                     });
}

// Rows of table[V, H] for each id; result shape is ids_shape + [H].
template <typename Scalar>
Tensor<Scalar> embedding_lookup(const Tensor<Scalar>& table, std::span<const std::int32_t> ids, Shape ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding_lookup: table must be rank 2, got " + to_string(table.shape()));
  if (numel(ids_shape) != static_cast<Index>(ids.size())) {
    throw DimensionError("embedding_lookup: id shape " + to_string(ids_shape) + " does not match id count");
  }
  const Index vocab = table.dim(0);
  const Index width = table.dim(1);
  std::vector<std::int32_t> rows(ids.begin(), ids.end());
  for (std::int32_t id : rows) {
    if (id < 0 || id >= vocab) {
      throw InputError("embedding_lookup: id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab));
    }
  }
  typename Tensor<Scalar>::Array value(static_cast<Index>(rows.size()) * width);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    value.segment(static_cast<Index>(i) * width, width) = table.values().segment(rows[i] * width, width);
  }
  ids_shape.push_back(width);
  return detail::make_result<Scalar>("embedding", std::move(ids_shape), std::move(value), {&table},
                                     [rows = std::move(rows), width](detail::Node<Scalar>& self) {
                                       auto& g = self.parents[0]->grad_buffer();
                                       for (std::size_t i = 0; i < rows.size(); ++i) {
                                         g.segment(rows[i] * width, width) +=
                                             self.grad.segment(static_cast<Index>(i) * width, width);
                                       }
                                     });
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization.

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain, const Tensor<Scalar>& shift,
                          double eps = 1e-5) {
  using Array = typename Tensor<Scalar>::Array;
  const Index width = x.dim(-1);
  if (gain.size() != width || shift.size() != width) {
    throw DimensionError("layer_norm: gain/shift " + to_string(gain.shape()) + "/" + to_string(shift.shape()) +
                         " do not match last axis of " + to_string(x.shape()));
  }
  const Index rows = x.size() / width;
  Array normalized(x.size());
  Array inv_std(rows);
  Array value(x.size());
  for (Index r = 0; r < rows; ++r) {
    const auto row = x.values().segment(r * width, width);
    double mean = 0.0;
    for (Index j = 0; j < width; ++j) mean += static_cast<double>(row[j]);
    mean /= static_cast<double>(width);
    double var = 0.0;
    for (Index j = 0; j < width; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = static_cast<Scalar>(inv);
    for (Index j = 0; j < width; ++j) {
      const Scalar xh = static_cast<Scalar>((static_cast<double>(row[j]) - mean) * inv);
      normalized[r * width + j] = xh;
      value[r * width + j] = xh * gain.values()[j] + shift.values()[j];
    }
  }
  return detail::make_result<Scalar>(
      "layer_norm", x.shape(), std::move(value), {&x, &gain, &shift},
      [rows, width, normalized = std::move(normalized), inv_std = std::move(inv_std)](detail::Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        for (Index r = 0; r < rows; ++r) {
          const auto g = self.grad.segment(r * width, width);
          const auto xh = normalized.segment(r * width, width);
          if (pg.requires_grad) pg.grad_buffer() += g * xh;
          if (pb.requires_grad) pb.grad_buffer() += g;
          if (px.requires_grad) {
            Array dxh = g * pg.value;
            double mean_d = 0.0;
            double mean_dx = 0.0;
            for (Index j = 0; j < width; ++j) {
              mean_d += static_cast<double>(dxh[j]);
              mean_dx += static_cast<double>(dxh[j]) * static_cast<double>(xh[j]);
            }
            mean_d /= static_cast<double>(width);
            mean_dx /= static_cast<double>(width);
            auto dst = px.grad_buffer().segment(r * width, width);
            for (Index j = 0; j < width; ++j) {
              dst[j] += static_cast<Scalar>(static_cast<double>(inv_std[r]) *
                                            (static_cast<double>(dxh[j]) - mean_d - static_cast<double>(xh[j]) * mean_dx));
            }
          }
        }
      });
}

// Tanh approximation of GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  using Array = typename Tensor<Scalar>::Array;
  static constexpr Scalar kC = Scalar(0.7978845608028654);  // sqrt(2/pi)
  static constexpr Scalar kA = Scalar(0.044715);
  const Array& v = x.values();
  Array t = (kC * (v + kA * v.cube())).tanh();
  Array value = Scalar(0.5) * v * (Scalar(1) + t);
  return detail::make_result<Scalar>("gelu", x.shape(), std::move(value), {&x},
                                     [t = std::move(t)](detail::Node<Scalar>& self) {
                                       auto& px = *self.parents[0];
                                       const Array& v = px.value;
                                       Array d = Scalar(0.5) * (Scalar(1) + t) +
                                                 Scalar(0.5) * v * (Scalar(1) - t.square()) * kC *
                                                     (Scalar(1) + Scalar(3) * kA * v.square());
                                       px.grad_buffer() += self.grad * d;
                                     });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  typename Tensor<Scalar>::Array value = x.values().tanh();
  return detail::make_result<Scalar>("tanh", x.shape(), std::move(value), {&x}, [](detail::Node<Scalar>& self) {
    self.parents[0]->grad_buffer() += self.grad * (Scalar(1) - self.value.square());
  });
}

// Temperature softmax along `axis`, stabilized by subtracting the slice max.
template <typename Scalar>
Tensor<Scalar> softmax_t(const Tensor<Scalar>& x, int axis, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("softmax_t: temperature must be > 0, got " + std::to_string(temperature));
  const int a = detail::normalize_axis(axis, x.rank(), "softmax_t");
  const auto s = detail::split_axis(x.shape(), a);
  typename Tensor<Scalar>::Array value(x.size());
  const auto& v = x.values();
  std::vector<double> buf(static_cast<std::size_t>(s.length));
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.length * s.inner + i;
      double peak = -std::numeric_limits<double>::infinity();
      for (Index j = 0; j < s.length; ++j) peak = std::max(peak, static_cast<double>(v[base + j * s.inner]));
      double total = 0.0;
      for (Index j = 0; j < s.length; ++j) {
        const double e = std::exp((static_cast<double>(v[base + j * s.inner]) - peak) / temperature);
        buf[static_cast<std::size_t>(j)] = e;
        total += e;
      }
      for (Index j = 0; j < s.length; ++j) {
        value[base + j * s.inner] = static_cast<Scalar>(buf[static_cast<std::size_t>(j)] / total);
      }
    }
  }
  return detail::make_result<Scalar>("softmax", x.shape(), std::move(value), {&x},
                                     [s, temperature](detail::Node<Scalar>& self) {
                                       auto& g = self.parents[0]->grad_buffer();
                                       const auto& y = self.value;
                                       for (Index o = 0; o < s.outer; ++o) {
                                         for (Index i = 0; i < s.inner; ++i) {
                                           const Index base = o * s.length * s.inner + i;
                                           double dot = 0.0;
                                           for (Index j = 0; j < s.length; ++j) {
                                             const Index at = base + j * s.inner;
                                             dot += static_cast<double>(self.grad[at]) * static_cast<double>(y[at]);
                                           }
                                           for (Index j = 0; j < s.length; ++j) {
                                             const Index at = base + j * s.inner;
                                             g[at] += static_cast<Scalar>(static_cast<double>(y[at]) *
                                                                          (static_cast<double>(self.grad[at]) - dot) /
                                                                          temperature);
                                           }
                                         }
                                       }
                                     });
}

// ---------------------------------------------------------------------------
// Reductions.

template <typename Scalar>
Tensor<Scalar> mean_axis(const Tensor<Scalar>& x, int axis) {
  const int a = detail::normalize_axis(axis, x.rank(), "mean_axis");
  const auto s = detail::split_axis(x.shape(), a);
  Shape out_shape;
  for (int i = 0; i < x.rank(); ++i) {
    if (i != a) out_shape.push_back(x.shape()[static_cast<std::size_t>(i)]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  typename Tensor<Scalar>::Array value(s.outer * s.inner);
  const auto& v = x.values();
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      double total = 0.0;
      for (Index j = 0; j < s.length; ++j) total += static_cast<double>(v[(o * s.length + j) * s.inner + i]);
      value[o * s.inner + i] = static_cast<Scalar>(total / static_cast<double>(s.length));
    }
  }
  return detail::make_result<Scalar>("mean_axis", std::move(out_shape), std::move(value), {&x},
                                     [s](detail::Node<Scalar>& self) {
                                       auto& g = self.parents[0]->grad_buffer();
                                       const Scalar inv = Scalar(1) / static_cast<Scalar>(s.length);
                                       for (Index o = 0; o < s.outer; ++o) {
                                         for (Index j = 0; j < s.length; ++j) {
                                           g.segment((o * s.length + j) * s.inner, s.inner) +=
                                               self.grad.segment(o * s.inner, s.inner) * inv;
                                         }
                                       }
                                     });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  double total = 0.0;
  for (Index i = 0; i < x.size(); ++i) total += static_cast<double>(x.values()[i]);
  typename Tensor<Scalar>::Array value = Tensor<Scalar>::Array::Constant(1, static_cast<Scalar>(total));
  return detail::make_result<Scalar>("sum", Shape{1}, std::move(value), {&x}, [](detail::Node<Scalar>& self) {
    self.parents[0]->grad_buffer() += self.grad[0];
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.size()));
}

// ---------------------------------------------------------------------------
// Losses.

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
  double total = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.values()[i]) - static_cast<double>(b.values()[i]);
    total += d * d;
  }
  const double n = static_cast<double>(a.size());
  typename Tensor<Scalar>::Array value = Tensor<Scalar>::Array::Constant(1, static_cast<Scalar>(total / n));
  return detail::make_result<Scalar>("mse", Shape{1}, std::move(value), {&a, &b}, [n](detail::Node<Scalar>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const Scalar factor = static_cast<Scalar>(2.0 / n) * self.grad[0];
    if (pa.requires_grad) pa.grad_buffer() += factor * (pa.value - pb.value);
    if (pb.requires_grad) pb.grad_buffer() -= factor * (pa.value - pb.value);
  });
}

namespace detail {

template <typename Scalar>
void require_probability_rows(const Tensor<Scalar>& p, const char* what) {
  const Index classes = p.dim(-1);
  const Index rows = p.size() / classes;
  for (Index r = 0; r < rows; ++r) {
    double total = 0.0;
    for (Index j = 0; j < classes; ++j) total += static_cast<double>(p.values()[r * classes + j]);
    if (std::abs(total - 1.0) > 1e-5) {
      throw ValidationError(std::string("soft_cross_entropy: ") + what + " row " + std::to_string(r) +
                            " sums to " + std::to_string(total));
    }
  }
}

}  // namespace detail

// Mean over rows (all axes but the last) of -sum_i p_teacher[i] * log(p_student[i] + epsilon).
// p_teacher is treated as a constant target. Optional row_weights give a
// weighted mean instead of a plain one.
template <typename Scalar>
Tensor<Scalar> soft_cross_entropy(const Tensor<Scalar>& p_teacher, const Tensor<Scalar>& p_student, double epsilon,
                                  std::span<const Scalar> row_weights = {}) {
  if (epsilon < 0.0) throw ParameterError("soft_cross_entropy: epsilon must be >= 0");
  if (p_teacher.shape() != p_student.shape()) {
    throw DimensionError("soft_cross_entropy: shape mismatch " + to_string(p_teacher.shape()) + " vs " +
                         to_string(p_student.shape()));
  }
  detail::require_probability_rows(p_teacher, "teacher");
  detail::require_probability_rows(p_student, "student");
  const Index classes = p_student.dim(-1);
  const Index rows = p_student.size() / classes;
  if (!row_weights.empty() && static_cast<Index>(row_weights.size()) != rows) {
    throw DimensionError("soft_cross_entropy: " + std::to_string(row_weights.size()) + " row weights for " +
                         std::to_string(rows) + " rows");
  }
  std::vector<double> weights(static_cast<std::size_t>(rows), 1.0);
  if (!row_weights.empty()) {
    for (Index r = 0; r < rows; ++r) weights[static_cast<std::size_t>(r)] = static_cast<double>(row_weights[static_cast<std::size_t>(r)]);
  }
  const double weight_total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (!(weight_total > 0.0)) throw ParameterError("soft_cross_entropy: row weights sum to zero");
  const auto& pt = p_teacher.values();
  const auto& ps = p_student.values();
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    const double w = weights[static_cast<std::size_t>(r)];
    if (w == 0.0) continue;
    double row = 0.0;
    for (Index j = 0; j < classes; ++j) {
      const double t = static_cast<double>(pt[r * classes + j]);
      if (t != 0.0) row -= t * std::log(static_cast<double>(ps[r * classes + j]) + epsilon);
    }
    total += w * row;
  }
  typename Tensor<Scalar>::Array value = Tensor<Scalar>::Array::Constant(1, static_cast<Scalar>(total / weight_total));
  typename Tensor<Scalar>::Array target = pt;
  return detail::make_result<Scalar>(
      "soft_cross_entropy", Shape{1}, std::move(value), {&p_student},
      [target = std::move(target), weights = std::move(weights), weight_total, classes, rows,
       epsilon](detail::Node<Scalar>& self) {
        auto& px = *self.parents[0];
        auto& g = px.grad_buffer();
        const double upstream = static_cast<double>(self.grad[0]);
        for (Index r = 0; r < rows; ++r) {
          const double w = weights[static_cast<std::size_t>(r)] * upstream / weight_total;
          if (w == 0.0) continue;
          for (Index j = 0; j < classes; ++j) {
            const Index at = r * classes + j;
            g[at] -= static_cast<Scalar>(w * static_cast<double>(target[at]) /
                                         (static_cast<double>(px.value[at]) + epsilon));
          }
        }
      });
}

// Hard-label cross-entropy on raw logits [..., C]; label -1 marks a row to skip.
template <typename Scalar>
Tensor<Scalar> label_cross_entropy(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels) {
  const Index classes = logits.dim(-1);
  const Index rows = logits.size() / classes;
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("label_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(rows) + " rows");
  }
  using Array = typename Tensor<Scalar>::Array;
  Array probs(logits.size());
  double total = 0.0;
  Index counted = 0;
  const auto& v = logits.values();
  for (Index r = 0; r < rows; ++r) {
    const std::int32_t label = labels[static_cast<std::size_t>(r)];
    if (label < -1 || label >= classes) {
      throw DataError("label_cross_entropy: label " + std::to_string(label) + " outside [0, " +
                      std::to_string(classes) + ")");
    }
    double peak = -std::numeric_limits<double>::infinity();
    for (Index j = 0; j < classes; ++j) peak = std::max(peak, static_cast<double>(v[r * classes + j]));
    double z = 0.0;
    for (Index j = 0; j < classes; ++j) z += std::exp(static_cast<double>(v[r * classes + j]) - peak);
    for (Index j = 0; j < classes; ++j) {
      probs[r * classes + j] = static_cast<Scalar>(std::exp(static_cast<double>(v[r * classes + j]) - peak) / z);
    }
    if (label >= 0) {
      total -= static_cast<double>(v[r * classes + label]) - peak - std::log(z);
      ++counted;
    }
  }
  const double denom = counted > 0 ? static_cast<double>(counted) : 1.0;
  Array value = Array::Constant(1, static_cast<Scalar>(total / denom));
  std::vector<std::int32_t> kept(labels.begin(), labels.end());
  return detail::make_result<Scalar>("label_cross_entropy", Shape{1}, std::move(value), {&logits},
                                     [probs = std::move(probs), kept = std::move(kept), classes, rows,
                                      denom](detail::Node<Scalar>& self) {
                                       auto& g = self.parents[0]->grad_buffer();
                                       const Scalar factor = static_cast<Scalar>(static_cast<double>(self.grad[0]) / denom);
                                       for (Index r = 0; r < rows; ++r) {
                                         const std::int32_t label = kept[static_cast<std::size_t>(r)];
                                         if (label < 0) continue;
                                         g.segment(r * classes, classes) += factor * probs.segment(r * classes, classes);
                                         g[r * classes + label] -= factor;
                                       }
                                     });
}

}  // namespace komet

namespace komet {

// x[..., in] · weight[out, in]^T without materializing the transpose; used by
// the LM head, which reads the word-embedding table in place.
template <typename Scalar>
Tensor<Scalar> linear_nt(const Tensor<Scalar>& x, const Tensor<Scalar>& weight) {
  if (weight.rank() != 2 || x.dim(-1) != weight.dim(1)) {
    throw DimensionError("linear_nt: input " + to_string(x.shape()) + " incompatible with weight " +
                         to_string(weight.shape()));
  }
  const Index in = weight.dim(1);
  const Index out = weight.dim(0);
  const Index rows = x.size() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  typename Tensor<Scalar>::Array value(rows * out);
  detail::MatrixMap<Scalar>(value.data(), rows, out).noalias() =
      detail::ConstMatrixMap<Scalar>(x.values().data(), rows, in) *
      detail::ConstMatrixMap<Scalar>(weight.values().data(), out, in).transpose();
  return detail::make_result<Scalar>("linear_nt", std::move(out_shape), std::move(value), {&x, &weight},
                                     [rows, in, out](detail::Node<Scalar>& self) {
                                       auto& px = *self.parents[0];
                                       auto& pw = *self.parents[1];
                                       detail::ConstMatrixMap<Scalar> G(self.grad.data(), rows, out);
                                       if (px.requires_grad) {
                                         detail::MatrixMap<Scalar>(px.grad_buffer().data(), rows, in).noalias() +=
                                             G * detail::ConstMatrixMap<Scalar>(pw.value.data(), out, in);
                                       }
                                       if (pw.requires_grad) {
                                         detail::MatrixMap<Scalar>(pw.grad_buffer().data(), out, in).noalias() +=
                                             G.transpose() * detail::ConstMatrixMap<Scalar>(px.value.data(), rows, in);
                                       }
                                     });
}

}  // namespace komet
