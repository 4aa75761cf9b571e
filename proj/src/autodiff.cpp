#include "spiboter/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace spiboter::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("array data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
}

double Array::item() const {
  if (data_.size() != 1) throw ShapeError("item() on array of shape " + shape_str(shape_));
  return data_[0];
}

bool Array::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Array::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Array& Node::grad_slot() {
  if (grad.shape() != value.shape() || grad.size() != value.size()) grad = Array(value.shape());
  return grad;
}

void Value::set_trainable(bool on) {
  if (!node_->parents.empty()) throw std::logic_error("set_trainable on a non-leaf node");
  node_->trainable = on;
  node_->requires_grad = on;
}

Array Value::grad() const {
  if (node_->grad.shape() == node_->value.shape() && node_->grad.size() == node_->value.size())
    return node_->grad;
  return Array(node_->value.shape());
}

void Value::zero_grad() { node_->grad.fill(0.0); }

namespace {

using Parents = std::vector<std::shared_ptr<Node>>;

Value make_node(std::string op, Array value, Parents parents, std::function<void(Node&)> backward_fn) {
  if (!value.all_finite()) throw NonFiniteError("non-finite value produced by " + op);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->op = std::move(op);
  node->requires_grad =
      std::any_of(parents.begin(), parents.end(), [](const auto& p) { return p->requires_grad; });
  node->parents = std::move(parents);
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return Value(std::move(node));
}

Value make_leaf(Array a, bool trainable) {
  if (!a.all_finite()) throw NonFiniteError("non-finite leaf value of shape " + shape_str(a.shape()));
  auto node = std::make_shared<Node>();
  node->value = std::move(a);
  node->op = trainable ? "parameter" : "constant";
  node->trainable = trainable;
  node->requires_grad = trainable;
  return Value(std::move(node));
}

// Index mapping from an output position to each operand of a broadcast op.
struct Broadcast {
  enum class Kind { Same, Scalar, Suffix, General };
  Shape out;
  Kind ka = Kind::Same, kb = Kind::Same;
  std::size_t na = 0, nb = 0;
  std::vector<std::size_t> ia, ib;

  std::size_t a(std::size_t i) const { return map(ka, na, ia, i); }
  std::size_t b(std::size_t i) const { return map(kb, nb, ib, i); }

  static std::size_t map(Kind k, std::size_t n, const std::vector<std::size_t>& idx, std::size_t i) {
    switch (k) {
      case Kind::Same: return i;
      case Kind::Scalar: return 0;
      case Kind::Suffix: return i % n;
      case Kind::General: return idx[i];
    }
    return 0;
  }
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

std::vector<std::size_t> general_index(const Shape& in, const Shape& out) {
  const std::size_t rank = out.size();
  Shape padded(rank - in.size(), 1);
  padded.insert(padded.end(), in.begin(), in.end());
  std::vector<std::size_t> stride(rank, 0);
  std::size_t s = 1;
  for (std::size_t d = rank; d-- > 0;) {
    stride[d] = padded[d] == 1 ? 0 : s;
    s *= padded[d];
  }
  const std::size_t total = shape_size(out);
  std::vector<std::size_t> idx(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < total; ++i) {
    idx[i] = offset;
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      offset += stride[d];
      if (counter[d] < out[d]) break;
      offset -= stride[d] * counter[d];
      counter[d] = 0;
    }
  }
  return idx;
}

Broadcast plan_broadcast(const Shape& sa, const Shape& sb, const char* op) {
  Broadcast p;
  const std::size_t rank = std::max(sa.size(), sb.size());
  p.out.assign(rank, 1);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - sa.size() ? 1 : sa[i - (rank - sa.size())];
    const std::size_t db = i < rank - sb.size() ? 1 : sb[i - (rank - sb.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
    }
    p.out[i] = std::max(da, db);
  }
  p.na = shape_size(sa);
  p.nb = shape_size(sb);
  auto classify = [&](const Shape& s, std::size_t n, Broadcast::Kind& k, std::vector<std::size_t>& idx) {
    if (s == p.out) {
      k = Broadcast::Kind::Same;
    } else if (n == 1) {
      k = Broadcast::Kind::Scalar;
    } else if (is_suffix(s, p.out)) {
      k = Broadcast::Kind::Suffix;
    } else {
      k = Broadcast::Kind::General;
      idx = general_index(s, p.out);
    }
  };
  classify(sa, p.na, p.ka, p.ia);
  classify(sb, p.nb, p.kb, p.ib);
  return p;
}

template <typename Fwd, typename DA, typename DB>
Value binary(const char* op, const Value& a, const Value& b, Fwd fwd, DA dfa, DB dfb) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape(), op));
  Array out(plan->out);
  const auto& va = a.value();
  const auto& vb = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[plan->a(i)], vb[plan->b(i)]);
  return make_node(op, std::move(out), {a.shared(), b.shared()}, [plan, dfa, dfb](Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    const auto& g = self.grad;
    if (pa.requires_grad) {
      auto& ga = pa.grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = plan->a(i), ib = plan->b(i);
        ga[ia] += g[i] * dfa(pa.value[ia], pb.value[ib], self.value[i]);
      }
    }
    if (pb.requires_grad) {
      auto& gb = pb.grad_slot();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const std::size_t ia = plan->a(i), ib = plan->b(i);
        gb[ib] += g[i] * dfb(pa.value[ia], pb.value[ib], self.value[i]);
      }
    }
  });
}

template <typename Fwd, typename Df>
Value unary(const char* op, const Value& a, Fwd fwd, Df df) {
  Array out(a.shape());
  const auto& va = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(va[i]);
  return make_node(op, std::move(out), {a.shared()}, [df](Node& self) {
    auto& pa = *self.parents[0];
    auto& ga = pa.grad_slot();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * df(pa.value[i], self.value[i]);
  });
}

// Splits a shape around `axis` into outer * dim * inner.
struct AxisSplit {
  std::size_t outer = 1, dim = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.dim = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape r = s;
  r.erase(r.begin() + static_cast<std::ptrdiff_t>(axis));
  return r;
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

ConstMapMat cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapMat mmap(double* p, std::size_t r, std::size_t c) {
  return MapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace

Value constant(Array a) { return make_leaf(std::move(a), false); }
Value constant(double v) { return make_leaf(Array::scalar(v), false); }
Value parameter(Array a) { return make_leaf(std::move(a), true); }

Value add(const Value& a, const Value& b) {
  return binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Value sub(const Value& a, const Value& b) {
  return binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Value mul(const Value& a, const Value& b) {
  return binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Value div(const Value& a, const Value& b) {
  return binary(
      "div", a, b, [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Value operator+(const Value& a, const Value& b) { return add(a, b); }
Value operator-(const Value& a, const Value& b) { return sub(a, b); }
Value operator*(const Value& a, const Value& b) { return mul(a, b); }
Value operator/(const Value& a, const Value& b) { return div(a, b); }

Value scale(const Value& a, double s) {
  return unary("scale", a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Value add_scalar(const Value& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Value matmul(const Value& a, const Value& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(sa) + " and " + shape_str(sb));
  }
  const std::size_t m = sa[sa.size() - 2], k = sa.back();
  const std::size_t kb = sb[sb.size() - 2], n = sb.back();
  if (k != kb) throw ShapeError("matmul: inner dimensions differ in " + shape_str(sa) + " x " + shape_str(sb));
  const Shape lead_a(sa.begin(), sa.end() - 2);
  const Shape lead_b(sb.begin(), sb.end() - 2);
  const bool shared = lead_b.empty();
  if (!shared && lead_a != lead_b) {
    throw ShapeError("matmul: batch dimensions differ in " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = shape_size(lead_a);
  Shape out_shape = lead_a;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Array out(out_shape);
  const double* pa = a.value().data().data();
  const double* pb = b.value().data().data();
  double* po = out.data().data();
  if (shared) {
    mmap(po, batch * m, n).noalias() = cmap(pa, batch * m, k) * cmap(pb, k, n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      mmap(po + i * m * n, m, n).noalias() = cmap(pa + i * m * k, m, k) * cmap(pb + i * k * n, k, n);
    }
  }
  return make_node("matmul", std::move(out), {a.shared(), b.shared()}, [=](Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const double* g = self.grad.data().data();
    const double* va = na.value.data().data();
    const double* vb = nb.value.data().data();
    if (na.requires_grad) {
      double* ga = na.grad_slot().data().data();
      if (shared) {
        mmap(ga, batch * m, k).noalias() += cmap(g, batch * m, n) * cmap(vb, k, n).transpose();
      } else {
        for (std::size_t i = 0; i < batch; ++i) {
          mmap(ga + i * m * k, m, k).noalias() += cmap(g + i * m * n, m, n) * cmap(vb + i * k * n, k, n).transpose();
        }
      }
    }
    if (nb.requires_grad) {
      double* gb = nb.grad_slot().data().data();
      if (shared) {
        mmap(gb, k, n).noalias() += cmap(va, batch * m, k).transpose() * cmap(g, batch * m, n);
      } else {
        for (std::size_t i = 0; i < batch; ++i) {
          mmap(gb + i * k * n, k, n).noalias() += cmap(va + i * m * k, m, k).transpose() * cmap(g + i * m * n, m, n);
        }
      }
    }
  });
}

Value permute(const Value& a, const std::vector<std::size_t>& axes) {
  const Shape& s = a.shape();
  const std::size_t rank = s.size();
  if (axes.size() != rank) throw ShapeError("permute: axes length does not match rank of " + shape_str(s));
  std::vector<bool> seen(rank, false);
  for (auto ax : axes) {
    if (ax >= rank || seen[ax]) throw ShapeError("permute: invalid axes for shape " + shape_str(s));
    seen[ax] = true;
  }
  Shape out_shape(rank);
  for (std::size_t i = 0; i < rank; ++i) out_shape[i] = s[axes[i]];
  std::vector<std::size_t> in_stride(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_stride[d - 1] = in_stride[d] * s[d];
  // Source offset for each output position.
  auto src = std::make_shared<std::vector<std::size_t>>(a.size());
  {
    std::vector<std::size_t> counter(rank, 0);
    std::size_t offset = 0;
    for (std::size_t i = 0; i < src->size(); ++i) {
      (*src)[i] = offset;
      for (std::size_t d = rank; d-- > 0;) {
        ++counter[d];
        offset += in_stride[axes[d]];
        if (counter[d] < out_shape[d]) break;
        offset -= in_stride[axes[d]] * counter[d];
        counter[d] = 0;
      }
    }
  }
  Array out(out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[(*src)[i]];
  return make_node("permute", std::move(out), {a.shared()}, [src](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < src->size(); ++i) ga[(*src)[i]] += self.grad[i];
  });
}

Value transpose(const Value& a) {
  const std::size_t rank = a.shape().size();
  if (rank < 2) throw ShapeError("transpose: rank < 2 for shape " + shape_str(a.shape()));
  std::vector<std::size_t> axes(rank);
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[rank - 1], axes[rank - 2]);
  return permute(a, axes);
}

Value reshape(const Value& a, Shape shape) {
  if (shape_size(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  Array out(std::move(shape), std::vector<double>(a.value().data().begin(), a.value().data().end()));
  return make_node("reshape", std::move(out), {a.shared()}, [](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Value concat(const std::vector<Value>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Shape& first = parts.front().shape();
  const AxisSplit base = split_axis(first, axis, "concat");
  std::vector<std::size_t> dims;
  std::size_t total_dim = 0;
  Parents parents;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != first.size()) throw ShapeError("concat: rank mismatch " + shape_str(probe) + " vs " + shape_str(first));
    for (std::size_t i = 0; i < probe.size(); ++i) {
      if (i != axis && probe[i] != first[i]) {
        throw ShapeError("concat: shapes " + shape_str(probe) + " and " + shape_str(first) + " differ off-axis");
      }
    }
    dims.push_back(probe[axis]);
    total_dim += probe[axis];
    parents.push_back(p.shared());
  }
  Shape out_shape = first;
  out_shape[axis] = total_dim;
  Array out(out_shape);
  const std::size_t outer = base.outer, inner = base.inner;
  std::size_t at = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto& v = parts[p].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().begin() + static_cast<std::ptrdiff_t>(o * dims[p] * inner), dims[p] * inner,
                  out.data().begin() + static_cast<std::ptrdiff_t>((o * total_dim + at) * inner));
    }
    at += dims[p];
  }
  return make_node("concat", std::move(out), std::move(parents), [dims, outer, inner, total_dim](Node& self) {
    std::size_t at = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      auto& parent = *self.parents[p];
      if (parent.requires_grad) {
        auto& gp = parent.grad_slot();
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t j = 0; j < dims[p] * inner; ++j) {
            gp[o * dims[p] * inner + j] += self.grad[(o * total_dim + at) * inner + j];
          }
        }
      }
      at += dims[p];
    }
  });
}

Value relu(const Value& a) {
  return unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Value exp(const Value& a) {
  return unary("exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Value log(const Value& a) {
  return unary("log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Value sqrt(const Value& a) {
  return unary("sqrt", a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Value sin(const Value& a) {
  return unary("sin", a, [](double x) { return std::sin(x); }, [](double x, double) { return std::cos(x); });
}

Value cos(const Value& a) {
  return unary("cos", a, [](double x) { return std::cos(x); }, [](double x, double) { return -std::sin(x); });
}

Value sum(const Value& a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return make_node("sum", Array::scalar(s), {a.shared()}, [](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g;
  });
}

Value sum(const Value& a, std::size_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis, "sum");
  Array out(drop_axis(a.shape(), axis));
  const auto& v = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t d = 0; d < sp.dim; ++d)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += v[(o * sp.dim + d) * sp.inner + i];
  return make_node("sum_axis", std::move(out), {a.shared()}, [sp](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t d = 0; d < sp.dim; ++d)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.dim + d) * sp.inner + i] += self.grad[o * sp.inner + i];
  });
}

Value mean(const Value& a) {
  if (a.size() == 0) throw ShapeError("mean of empty array");
  return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

Value mean(const Value& a, std::size_t axis) {
  const std::size_t n = split_axis(a.shape(), axis, "mean").dim;
  if (n == 0) throw ShapeError("mean over empty axis");
  return scale(sum(a, axis), 1.0 / static_cast<double>(n));
}

Value max(const Value& a) {
  if (a.size() == 0) throw ShapeError("max of empty array");
  const auto& v = a.value();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[arg]) arg = i;
  return make_node("max", Array::scalar(v[arg]), {a.shared()},
                   [arg](Node& self) { self.parents[0]->grad_slot()[arg] += self.grad[0]; });
}

Value max(const Value& a, std::size_t axis) {
  const AxisSplit sp = split_axis(a.shape(), axis, "max");
  if (sp.dim == 0) throw ShapeError("max over empty axis");
  Array out(drop_axis(a.shape(), axis));
  auto args = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& v = a.value();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = o * sp.dim * sp.inner + i;
      for (std::size_t d = 1; d < sp.dim; ++d) {
        const std::size_t at = (o * sp.dim + d) * sp.inner + i;
        if (v[at] > v[best]) best = at;
      }
      (*args)[o * sp.inner + i] = best;
      out[o * sp.inner + i] = v[best];
    }
  }
  return make_node("max_axis", std::move(out), {a.shared()}, [args](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    for (std::size_t i = 0; i < args->size(); ++i) ga[(*args)[i]] += self.grad[i];
  });
}

Value sq_norm(const Value& a) {
  if (a.shape().empty()) throw ShapeError("sq_norm: scalar operand");
  const std::size_t n = a.shape().back();
  const std::size_t rows = n == 0 ? 0 : a.size() / n;
  Array out(Shape(a.shape().begin(), a.shape().end() - 1));
  const auto& v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += v[r * n + j] * v[r * n + j];
    out[r] = s;
  }
  return make_node("sq_norm", std::move(out), {a.shared()}, [n, rows](Node& self) {
    auto& pa = *self.parents[0];
    auto& ga = pa.grad_slot();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += 2.0 * pa.value[r * n + j] * self.grad[r];
  });
}

Value softmax_masked(const Value& scores, const Array& mask, double sentinel) {
  const Shape& s = scores.shape();
  if (s.empty()) throw ShapeError("softmax_masked: scalar scores");
  if (!is_suffix(mask.shape(), s) || mask.size() == 0) {
    throw ShapeError("softmax_masked: mask " + shape_str(mask.shape()) + " does not match scores " + shape_str(s));
  }
  const std::size_t n = s.back();
  const std::size_t rows = scores.size() / n;
  const std::size_t mask_rows = mask.size() / n;
  for (std::size_t r = 0; r < mask_rows; ++r) {
    bool any_visible = false;
    for (std::size_t j = 0; j < n; ++j) any_visible |= mask[r * n + j] == 0.0;
    if (!any_visible) throw ShapeError("softmax_masked: mask row " + std::to_string(r) + " blocks every key");
  }
  Array out(s);
  const auto& v = scores.value();
  std::vector<double> shifted(n);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t mr = (r % mask_rows) * n;
    double top = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      shifted[j] = v[r * n + j] + (mask[mr + j] != 0.0 ? sentinel : 0.0);
      top = std::max(top, shifted[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      shifted[j] = std::exp(shifted[j] - top);
      z += shifted[j];
    }
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = mask[mr + j] != 0.0 ? 0.0 : shifted[j] / z;
  }
  return make_node("softmax_masked", std::move(out), {scores.shared()}, [n, rows](Node& self) {
    auto& ga = self.parents[0]->grad_slot();
    const auto& y = self.value;
    const auto& g = self.grad;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += y[r * n + j] * g[r * n + j];
      for (std::size_t j = 0; j < n; ++j) ga[r * n + j] += y[r * n + j] * (g[r * n + j] - dot);
    }
  });
}

Value layer_norm(const Value& x, double eps) {
  const Shape& s = x.shape();
  if (s.empty() || s.back() == 0) throw ShapeError("layer_norm: needs a non-empty last axis, got " + shape_str(s));
  if (eps < 0.0) throw std::invalid_argument("layer_norm: eps must be non-negative");
  const std::size_t n = s.back();
  const std::size_t rows = x.size() / n;
  Array out(s);
  auto inv_sigma = std::make_shared<std::vector<double>>(rows);
  const auto& v = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += v[r * n + j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (v[r * n + j] - mu) * (v[r * n + j] - mu);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[r] = is;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = (v[r * n + j] - mu) * is;
  }
  return make_node("layer_norm", std::move(out), {x.shared()}, [n, rows, inv_sigma](Node& self) {
    auto& gx = self.parents[0]->grad_slot();
    const auto& y = self.value;
    const auto& g = self.grad;
    const double inv_n = 1.0 / static_cast<double>(n);
    for (std::size_t r = 0; r < rows; ++r) {
      double mg = 0.0, mgy = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        mg += g[r * n + j];
        mgy += g[r * n + j] * y[r * n + j];
      }
      mg *= inv_n;
      mgy *= inv_n;
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += (*inv_sigma)[r] * (g[r * n + j] - mg - y[r * n + j] * mgy);
      }
    }
  });
}

Value pairwise_sq_dist(const Value& points) {
  const Shape& s = points.shape();
  if (s.size() != 2 || s[1] != 3) throw ShapeError("pairwise_sq_dist: expected N x 3 points, got " + shape_str(s));
  const std::size_t n = s[0];
  Array out({n, n});
  const auto& p = points.value();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        const double diff = p[i * 3 + c] - p[j * 3 + c];
        d += diff * diff;
      }
      out.at(i, j) = d;
    }
  }
  return make_node("pairwise_sq_dist", std::move(out), {points.shared()}, [n](Node& self) {
    auto& parent = *self.parents[0];
    auto& gp = parent.grad_slot();
    const auto& p = parent.value;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double g = self.grad[i * n + j];
        if (g == 0.0) continue;
        for (std::size_t c = 0; c < 3; ++c) {
          const double diff = p[i * 3 + c] - p[j * 3 + c];
          gp[i * 3 + c] += 2.0 * g * diff;
          gp[j * 3 + c] -= 2.0 * g * diff;
        }
      }
    }
  });
}

void backward(const Value& root) {
  if (!root) throw std::invalid_argument("backward: empty root");
  if (root.size() != 1) throw ShapeError("backward: root must be scalar, got shape " + shape_str(root.shape()));

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  if (root.requires_grad()) stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next == 0 && !visited.insert(node).second) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && !visited.count(parent)) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) n->grad_slot().fill(0.0);
  if (order.empty()) return;
  root.node()->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

double grad_check(const GraphBuilder& build, const std::vector<Array>& leaves, double eps, double floor) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");
  std::vector<Value> params;
  params.reserve(leaves.size());
  for (const auto& l : leaves) params.push_back(parameter(l));
  const Value root = build(params);
  backward(root);

  auto evaluate = [&](std::size_t leaf, std::size_t entry, double delta) {
    std::vector<Value> probe;
    probe.reserve(leaves.size());
    for (std::size_t i = 0; i < leaves.size(); ++i) {
      Array a = leaves[i];
      if (i == leaf) a[entry] += delta;
      probe.push_back(constant(std::move(a)));
    }
    return build(probe).item();
  };

  double worst = 0.0;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    const Array analytic = params[l].grad();
    for (std::size_t e = 0; e < leaves[l].size(); ++e) {
      // Fourth-order central stencil.
      const double numeric = (8.0 * (evaluate(l, e, eps) - evaluate(l, e, -eps)) -
                              (evaluate(l, e, 2.0 * eps) - evaluate(l, e, -2.0 * eps))) /
                             (12.0 * eps);
      const double scale_ = std::abs(analytic[e]) + std::abs(numeric);
      if (scale_ < floor) continue;
      const double rel = std::abs(analytic[e] - numeric) / std::max(std::abs(analytic[e]), std::abs(numeric));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace spiboter::ad
