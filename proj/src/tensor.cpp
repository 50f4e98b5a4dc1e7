#include "bdlab/tensor.hpp"

#include <Eigen/Core>
#include <malloc.h>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "bdlab/errors.hpp"

namespace bdlab {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

thread_local bool g_grad_enabled = true;

std::vector<double>* grad_sink(const std::shared_ptr<detail::Node>& parent) {
  if (!parent->requires_grad) return nullptr;
  return &parent->ensure_grad();
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const auto r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Flat index into `in` for every flat index of `out`, where `in` broadcasts to `out`.
std::vector<std::size_t> broadcast_index(const Shape& out, const Shape& in) {
  const std::size_t rank = out.size();
  const std::size_t offset = rank - in.size();
  const auto in_strides = strides_of(in);
  std::vector<std::size_t> eff(rank, 0);
  for (std::size_t i = offset; i < rank; ++i) {
    eff[i] = in[i - offset] == 1 ? 0 : in_strides[i - offset];
  }
  const std::size_t n = shape_numel(out);
  std::vector<std::size_t> map(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t pos = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    map[flat] = pos;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      pos += eff[d];
      if (counter[d] < out[d]) break;
      pos -= eff[d] * counter[d];
      counter[d] = 0;
    }
  }
  return map;
}

enum class BroadcastKind { kSame, kSuffix, kGeneral };

BroadcastKind classify(const Shape& out, const Shape& in) {
  if (in == out) return BroadcastKind::kSame;
  if (in.size() <= out.size() &&
      std::equal(in.begin(), in.end(), out.end() - static_cast<std::ptrdiff_t>(in.size()))) {
    return BroadcastKind::kSuffix;
  }
  return BroadcastKind::kGeneral;
}

// Resolves operand index for each output element.
struct OperandIndex {
  BroadcastKind kind;
  std::size_t period;
  std::vector<std::size_t> map;

  OperandIndex(const Shape& out, const Shape& in) : kind(classify(out, in)), period(shape_numel(in)) {
    if (kind == BroadcastKind::kGeneral) map = broadcast_index(out, in);
  }
  std::size_t operator()(std::size_t i) const {
    switch (kind) {
      case BroadcastKind::kSame:
        return i;
      case BroadcastKind::kSuffix:
        return i % period;
      default:
        return map[i];
    }
  }
};

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::dim(int axis) const { return node_->shape[normalize_axis(axis, rank())]; }

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + shape_str(shape()));
  const auto strides = strides_of(shape());
  std::size_t flat = 0;
  std::size_t d = 0;
  for (auto i : index) {
    if (i >= shape()[d]) throw DimensionError("index out of range for " + shape_str(shape()));
    flat += i * strides[d++];
  }
  return node_->data[flat];
}

Tensor Tensor::detach() const { return from(shape(), node_->data, false); }

Tensor Tensor::clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

Tensor Tensor::make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& p) { return p.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(parents.size());
      for (auto& p : parents) node->parents.push_back(p.node_);
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

void configure_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ContractError("backward() requires a scalar root, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) throw ContractError("backward() root is not on a recorded graph");

  // Iterative post-order DFS gives a topological order (inputs before outputs).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !parent->is_leaf() && seen.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* node : order) node->grad.assign(node->data.size(), 0.0);
  node_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2);
  const std::size_t p = a.dim(-1);
  const std::size_t q = b.dim(-1);
  if (b.dim(-2) != p) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  try {
    batch = broadcast_shapes(a_batch, b_batch);
  } catch (const DimensionError&) {
    throw DimensionError("matmul batch dimensions not broadcastable: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(q);

  // A shared right operand folds the whole left batch into one GEMM.
  if (b_batch.empty() || shape_numel(b_batch) == 1) {
    if (a_batch == batch) {
      const std::size_t rows = shape_numel(a_batch) * m;
      std::vector<double> out(rows * q);
      MutMap(out.data(), rows, q).noalias() = ConstMap(a.data().data(), rows, p) * ConstMap(b.data().data(), p, q);
      return Tensor::make_result(out_shape, std::move(out), {a, b}, [rows, p, q](detail::Node& self) {
        ConstMap g(self.grad.data(), rows, q);
        const auto& na = self.parents[0];
        const auto& nb = self.parents[1];
        if (auto* ga = grad_sink(na)) {
          MutMap(ga->data(), rows, p).noalias() += g * ConstMap(nb->data.data(), p, q).transpose();
        }
        if (auto* gb = grad_sink(nb)) {
          MutMap(gb->data(), p, q).noalias() += ConstMap(na->data.data(), rows, p).transpose() * g;
        }
      });
    }
  }

  const std::size_t nbatch = shape_numel(batch);
  const auto a_map = broadcast_index(batch, a_batch.empty() ? Shape{1} : a_batch);
  const auto b_map = broadcast_index(batch, b_batch.empty() ? Shape{1} : b_batch);
  std::vector<double> out(nbatch * m * q);
  for (std::size_t i = 0; i < nbatch; ++i) {
    MutMap(out.data() + i * m * q, m, q).noalias() =
        ConstMap(a.data().data() + a_map[i] * m * p, m, p) * ConstMap(b.data().data() + b_map[i] * p * q, p, q);
  }
  return Tensor::make_result(out_shape, std::move(out), {a, b},
                             [nbatch, m, p, q, a_map, b_map](detail::Node& self) {
                               const auto& na = self.parents[0];
                               const auto& nb = self.parents[1];
                               auto* ga = grad_sink(na);
                               auto* gb = grad_sink(nb);
                               for (std::size_t i = 0; i < nbatch; ++i) {
                                 ConstMap g(self.grad.data() + i * m * q, m, q);
                                 if (ga) {
                                   MutMap(ga->data() + a_map[i] * m * p, m, p).noalias() +=
                                       g * ConstMap(nb->data.data() + b_map[i] * p * q, p, q).transpose();
                                 }
                                 if (gb) {
                                   MutMap(gb->data() + b_map[i] * p * q, p, q).noalias() +=
                                       ConstMap(na->data.data() + a_map[i] * m * p, m, p).transpose() * g;
                                 }
                               }
                             });
}

namespace {

// Visits (out, a, b) flat index triples for a broadcast binary op, with
// direct loops for the common same-shape and trailing-suffix layouts.
template <typename Visit>
void for_each_broadcast(const OperandIndex& ia, const OperandIndex& ib, std::size_t n, Visit&& visit) {
  if (ia.kind == BroadcastKind::kSame && ib.kind == BroadcastKind::kSame) {
    for (std::size_t i = 0; i < n; ++i) visit(i, i, i);
  } else if (ia.kind == BroadcastKind::kSame && ib.kind == BroadcastKind::kSuffix) {
    const std::size_t period = ib.period;
    for (std::size_t o = 0; o < n; o += period) {
      for (std::size_t j = 0; j < period; ++j) visit(o + j, o + j, j);
    }
  } else if (ia.kind == BroadcastKind::kSuffix && ib.kind == BroadcastKind::kSame) {
    const std::size_t period = ia.period;
    for (std::size_t o = 0; o < n; o += period) {
      for (std::size_t j = 0; j < period; ++j) visit(o + j, j, o + j);
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) visit(i, ia(i), ib(i));
  }
}

template <typename Fwd, typename GradA, typename GradB>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  Shape out_shape = broadcast_shapes(a.shape(), b.shape());
  auto ia = std::make_shared<OperandIndex>(out_shape, a.shape());
  auto ib = std::make_shared<OperandIndex>(out_shape, b.shape());
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const double* da = a.data().data();
  const double* db = b.data().data();
  for_each_broadcast(*ia, *ib, n, [&](std::size_t i, std::size_t j, std::size_t k) { out[i] = fwd(da[j], db[k]); });
  return Tensor::make_result(std::move(out_shape), std::move(out), {a, b},
                             [ia, ib, n, grad_a, grad_b](detail::Node& self) {
                               const auto& na = self.parents[0];
                               const auto& nb = self.parents[1];
                               const double* g = self.grad.data();
                               const double* va = na->data.data();
                               const double* vb = nb->data.data();
                               if (auto* ga = grad_sink(na)) {
                                 double* out = ga->data();
                                 for_each_broadcast(*ia, *ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                                   out[j] += grad_a(g[i], va[j], vb[k]);
                                 });
                               }
                               if (auto* gb = grad_sink(nb)) {
                                 double* out = gb->data();
                                 for_each_broadcast(*ia, *ib, n, [&](std::size_t i, std::size_t j, std::size_t k) {
                                   out[k] += grad_b(g[i], va[j], vb[k]);
                                 });
                               }
                             });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x + y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x - y; }, [](double g, double, double) { return g; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, [](double x, double y) { return x * y; }, [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [factor](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += factor * self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::make_result({}, {total}, {x}, [](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (auto& v : *g) v += self.grad[0];
    }
  });
}

namespace {

// Swaps axes a < b of a tensor viewed as [outer, A, mid, B, inner].
struct SwapLayout {
  std::size_t outer = 1, len_a = 1, mid = 1, len_b = 1, inner = 1;

  template <typename Copy>
  void visit(Copy&& copy) const {
    // Output is [outer, B, mid, A, inner]; source offset for each output block.
    std::size_t dst = 0;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t jb = 0; jb < len_b; ++jb) {
        for (std::size_t m = 0; m < mid; ++m) {
          for (std::size_t ja = 0; ja < len_a; ++ja) {
            const std::size_t src = (((o * len_a + ja) * mid + m) * len_b + jb) * inner;
            copy(dst, src, inner);
            dst += inner;
          }
        }
      }
    }
  }
};

}  // namespace

Tensor transpose(const Tensor& x, int axis_a, int axis_b) {
  std::size_t ra = normalize_axis(axis_a, x.rank());
  std::size_t rb = normalize_axis(axis_b, x.rank());
  if (ra == rb) return reshape(x, x.shape());
  if (ra > rb) std::swap(ra, rb);
  const Shape& in = x.shape();
  SwapLayout layout;
  for (std::size_t d = 0; d < ra; ++d) layout.outer *= in[d];
  layout.len_a = in[ra];
  for (std::size_t d = ra + 1; d < rb; ++d) layout.mid *= in[d];
  layout.len_b = in[rb];
  for (std::size_t d = rb + 1; d < in.size(); ++d) layout.inner *= in[d];
  Shape out_shape = in;
  std::swap(out_shape[ra], out_shape[rb]);

  std::vector<double> out(x.numel());
  const double* src = x.data().data();
  if (layout.mid == 1 && layout.inner == 1) {
    // Plain matrix transpose per outer block.
    const auto a = static_cast<Eigen::Index>(layout.len_a);
    const auto b = static_cast<Eigen::Index>(layout.len_b);
    const std::size_t block = layout.len_a * layout.len_b;
    for (std::size_t o = 0; o < layout.outer; ++o) {
      MutMap(out.data() + o * block, b, a) = ConstMap(src + o * block, a, b).transpose();
    }
    return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [a, b, block, layout](detail::Node& self) {
      if (auto* g = grad_sink(self.parents[0])) {
        for (std::size_t o = 0; o < layout.outer; ++o) {
          MutMap(g->data() + o * block, a, b) += ConstMap(self.grad.data() + o * block, b, a).transpose();
        }
      }
    });
  }
  layout.visit([&](std::size_t d, std::size_t s, std::size_t len) { std::copy_n(src + s, len, out.data() + d); });
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [layout](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      const double* up = self.grad.data();
      double* dst = g->data();
      layout.visit([&](std::size_t d, std::size_t s, std::size_t len) {
        for (std::size_t i = 0; i < len; ++i) dst[s + i] += up[d + i];
      });
    }
  });
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) throw DimensionError("transpose_last2 needs rank >= 2, got " + shape_str(x.shape()));
  return transpose(x, -2, -1);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank());
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& t : parts) {
    if (t.rank() != parts[0].rank()) throw DimensionError("concat rank mismatch");
    for (std::size_t d = 0; d < t.rank(); ++d) {
      if (d != ax && t.shape()[d] != parts[0].shape()[d]) {
        throw DimensionError("concat shape mismatch: " + shape_str(parts[0].shape()) + " vs " +
                             shape_str(t.shape()));
      }
    }
    out_shape[ax] += t.shape()[ax];
  }
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= out_shape[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
  const std::size_t out_row = out_shape[ax] * inner;

  std::vector<std::size_t> widths;
  std::vector<double> out(shape_numel(out_shape));
  std::size_t col = 0;
  for (const auto& t : parts) {
    const std::size_t w = t.shape()[ax] * inner;
    widths.push_back(w);
    const auto src = t.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * out_row + col));
    }
    col += w;
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), parts,
                             [widths, outer, out_row](detail::Node& self) {
                               std::size_t c = 0;
                               for (std::size_t k = 0; k < widths.size(); ++k) {
                                 const std::size_t w = widths[k];
                                 if (auto* g = grad_sink(self.parents[k])) {
                                   for (std::size_t o = 0; o < outer; ++o) {
                                     for (std::size_t i = 0; i < w; ++i) (*g)[o * w + i] += self.grad[o * out_row + c + i];
                                   }
                                 }
                                 c += w;
                               }
                             });
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  if (begin >= end || end > x.shape()[ax]) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") invalid for axis " +
                         std::to_string(ax) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = end - begin;
  std::size_t outer = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= out_shape[d];
  std::size_t inner = 1;
  for (std::size_t d = ax + 1; d < out_shape.size(); ++d) inner *= out_shape[d];
  const std::size_t src_row = x.shape()[ax] * inner;
  const std::size_t w = (end - begin) * inner;
  const std::size_t off = begin * inner;
  std::vector<double> out(outer * w);
  const auto src = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(o * src_row + off), w,
                out.begin() + static_cast<std::ptrdiff_t>(o * w));
  }
  return Tensor::make_result(std::move(out_shape), std::move(out), {x},
                             [outer, w, src_row, off](detail::Node& self) {
                               if (auto* g = grad_sink(self.parents[0])) {
                                 for (std::size_t o = 0; o < outer; ++o) {
                                   for (std::size_t i = 0; i < w; ++i) (*g)[o * src_row + off + i] += self.grad[o * w + i];
                                 }
                               }
                             });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> ids, Shape index_shape) {
  if (table.rank() != 2) throw DimensionError("embedding table must be rank 2, got " + shape_str(table.shape()));
  if (shape_numel(index_shape) != ids.size()) {
    throw DimensionError("embedding index shape " + shape_str(index_shape) + " does not match " +
                         std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.dim(0);
  const std::size_t width = table.dim(1);
  auto idx = std::make_shared<std::vector<std::size_t>>(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw DimensionError("embedding id " + std::to_string(ids[i]) + " out of range [0," +
                           std::to_string(rows) + ")");
    }
    (*idx)[i] = static_cast<std::size_t>(ids[i]);
  }
  std::vector<double> out(ids.size() * width);
  const auto src = table.data();
  for (std::size_t i = 0; i < idx->size(); ++i) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((*idx)[i] * width), width,
                out.begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  Shape out_shape = std::move(index_shape);
  out_shape.push_back(width);
  return Tensor::make_result(std::move(out_shape), std::move(out), {table}, [idx, width](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t i = 0; i < idx->size(); ++i) {
        for (std::size_t j = 0; j < width; ++j) (*g)[(*idx)[i] * width + j] += self.grad[i * width + j];
      }
    }
  });
}

Tensor rms_normalize_lastdim(const Tensor& x, double eps) {
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.numel() / width;
  std::vector<double> out(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);
  const auto src = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t j = 0; j < width; ++j) ms += src[r * width + j] * src[r * width + j];
    const double s = 1.0 / std::sqrt(ms / static_cast<double>(width) + eps);
    (*inv)[r] = s;
    for (std::size_t j = 0; j < width; ++j) out[r * width + j] = src[r * width + j] * s;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [inv, rows, width](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gy = self.grad.data() + r * width;
        const double* y = self.data.data() + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
        dot /= static_cast<double>(width);
        const double s = (*inv)[r];
        for (std::size_t j = 0; j < width; ++j) (*g)[r * width + j] += s * (gy[j] - y[j] * dot);
      }
    }
  });
}

namespace {

// Vectorised exp evaluated into an aligned buffer. Eigen peels unaligned
// heads through the scalar path, which would make results depend on the
// buffer address; an aligned destination keeps them a function of n only.
void exp_inplace(double* data, std::size_t n) {
  Eigen::ArrayXd tmp = Eigen::Map<const Eigen::ArrayXd>(data, static_cast<Eigen::Index>(n)).exp();
  std::copy(tmp.data(), tmp.data() + n, data);
}

}  // namespace

Tensor gelu(const Tensor& x) {
  // tanh form: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi).
  static constexpr double kC = 0.7978845608028654;
  static constexpr double kCubic = 0.044715;
  const std::size_t n = x.numel();
  const Eigen::Map<const Eigen::ArrayXd> v(x.data().data(), static_cast<Eigen::Index>(n));
  auto th = std::make_shared<std::vector<double>>(n);
  Eigen::Map<Eigen::ArrayXd> t(th->data(), static_cast<Eigen::Index>(n));
  // tanh(u) = 1 - 2 / (exp(2u) + 1); saturates cleanly at both ends.
  t = 2.0 * kC * (v + kCubic * v.cube());
  exp_inplace(th->data(), n);
  t = 1.0 - 2.0 / (t + 1.0);
  std::vector<double> out(n);
  Eigen::Map<Eigen::ArrayXd>(out.data(), static_cast<Eigen::Index>(n)) = 0.5 * v * (1.0 + t);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [th](detail::Node& self) {
    const auto& nx = self.parents[0];
    if (auto* g = grad_sink(nx)) {
      const auto len = static_cast<Eigen::Index>(g->size());
      const Eigen::Map<const Eigen::ArrayXd> v(nx->data.data(), len);
      const Eigen::Map<const Eigen::ArrayXd> t(th->data(), len);
      const Eigen::Map<const Eigen::ArrayXd> up(self.grad.data(), len);
      Eigen::Map<Eigen::ArrayXd>(g->data(), len) +=
          up * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t.square()) * kC * (1.0 + 3.0 * kCubic * v.square()));
    }
  });
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t width = x.dim(-1);
  const std::size_t rows = x.numel() / width;
  const auto src = x.data();
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  std::vector<double> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * width;
    const double mx = *std::max_element(row, row + width);
    if (mx == kNegInf) {
      throw ContractError("softmax row " + std::to_string(r) + " is entirely -inf (fully masked query)");
    }
    double* o = out.data() + r * width;
    for (std::size_t j = 0; j < width; ++j) o[j] = row[j] - mx;
  }
  exp_inplace(out.data(), out.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = src.data() + r * width;
    double* o = out.data() + r * width;
    // exp of a clamped -inf is tiny but not zero; masked entries must be exactly 0.
    double total = 0.0;
    for (std::size_t j = 0; j < width; ++j) {
      o[j] = row[j] == kNegInf ? 0.0 : o[j];
      total += o[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < width; ++j) o[j] *= inv;
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [rows, width](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gy = self.grad.data() + r * width;
        const double* y = self.data.data() + r * width;
        double* gx = g->data() + r * width;
        double dot = 0.0;
        for (std::size_t j = 0; j < width; ++j) dot += gy[j] * y[j];
        for (std::size_t j = 0; j < width; ++j) gx[j] += y[j] * (gy[j] - dot);
      }
    }
  });
}

Tensor dropout(const Tensor& x, double p, DropoutKey key, bool train) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0,1), got " + std::to_string(p));
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  const std::uint64_t base = splitmix64(key.seed ^ splitmix64(key.stream + 0x632be59bd9b4e019ULL));
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  std::vector<double> out(x.numel());
  const auto src = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(splitmix64(base + i) >> 11) * 0x1.0p-53;
    (*mask)[i] = u < p ? 0.0 : keep_scale;
    out[i] = src[i] * (*mask)[i];
  }
  return Tensor::make_result(x.shape(), std::move(out), {x}, [mask](detail::Node& self) {
    if (auto* g = grad_sink(self.parents[0])) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*mask)[i];
    }
  });
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets, const std::vector<bool>& active,
                         double denominator) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy needs logits of rank >= 1");
  const std::size_t classes = logits.dim(-1);
  const std::size_t rows = logits.numel() / classes;
  if (targets.size() != rows || active.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(rows) + " logit rows but " +
                         std::to_string(targets.size()) + " targets and " + std::to_string(active.size()) +
                         " mask entries");
  }
  if (std::none_of(active.begin(), active.end(), [](bool a) { return a; })) {
    throw EmptyLossError("cross_entropy has no active positions");
  }
  if (!(denominator > 0.0)) throw ContractError("cross_entropy denominator must be positive");
  const auto src = logits.data();
  auto probs = std::make_shared<std::vector<double>>(logits.numel(), 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!active[r]) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw ContractError("cross_entropy target " + std::to_string(targets[r]) + " out of range at row " +
                          std::to_string(r));
    }
    const double* row = src.data() + r * classes;
    const double mx = *std::max_element(row, row + classes);
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - row[targets[r]];
    for (std::size_t j = 0; j < classes; ++j) (*probs)[r * classes + j] = std::exp(row[j] - lse);
  }
  std::vector<int> tgt(targets.begin(), targets.end());
  return Tensor::make_result(
      {}, {total / denominator}, {logits},
      [probs, tgt = std::move(tgt), active, rows, classes, denominator](detail::Node& self) {
        if (auto* g = grad_sink(self.parents[0])) {
          const double up = self.grad[0] / denominator;
          for (std::size_t r = 0; r < rows; ++r) {
            if (!active[r]) continue;
            for (std::size_t j = 0; j < classes; ++j) {
              const double onehot = static_cast<int>(j) == tgt[r] ? 1.0 : 0.0;
              (*g)[r * classes + j] += up * ((*probs)[r * classes + j] - onehot);
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, const std::vector<bool>& active) {
  const auto count = static_cast<double>(std::count(active.begin(), active.end(), true));
  if (count == 0.0) throw EmptyLossError("cross_entropy has no active positions");
  return cross_entropy_sum(logits, targets, active, count);
}

double fd_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("fd_check step must be positive");
  Tensor leaf = x.clone(true);
  std::vector<double> autodiff(x.numel(), 0.0);
  {
    Tensor y = f(leaf);
    if (y.numel() != 1) throw DimensionError("fd_check function must return a scalar");
    if (y.requires_grad()) {
      y.backward();
      if (leaf.has_grad()) autodiff.assign(leaf.grad().begin(), leaf.grad().end());
    }
  }
  NoGradGuard no_grad;
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    Tensor plus = x.clone();
    Tensor minus = x.clone();
    plus.mutable_data()[i] += h;
    minus.mutable_data()[i] -= h;
    const double central = (f(plus).item() - f(minus).item()) / (2.0 * h);
    worst = std::max(worst, std::abs(autodiff[i] - central) / (std::abs(central) + 1e-8));
  }
  return worst;
}

}  // namespace bdlab
