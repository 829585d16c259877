#pragma once

// Dense row-major double tensors with reverse-mode automatic differentiation
// over a fixed op set: the networks here need nothing more general. Tensors
// are immutable once they participate in a graph; optimizer steps mutate
// parameter storage in place between graphs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "maskplan/rng.hpp"

namespace maskplan {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized during backward
  bool requires_grad = false;
  std::string name;  // parameters only
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;  // accumulates into parents' grad

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }
};

inline void ensure_grad(Node& n) {
  if (n.grad.size() != n.value.size()) n.grad.assign(n.value.size(), 0.0);
}

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return make(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    return make(std::move(shape), v, requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    Tensor t = make({1}, v, requires_grad);
    return t;
  }

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
      throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                  " does not match data length " +
                                  std::to_string(data.size()));
    }
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0,
                      bool requires_grad = false) {
    std::vector<double> data(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& v : data) v = stddev * rng.gaussian();
    return from(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  // Mutation is reserved for initialization and optimizer steps.
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }

  const std::string& name() const { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }

  double item() const {
    if (numel() != 1) {
      throw std::invalid_argument("Tensor::item: tensor is not scalar, shape " +
                                  shape_str(shape()));
    }
    return node_->value[0];
  }

  // Value copy severed from the graph; gradients never flow through it.
  Tensor detach() const {
    return Tensor::from(node_->shape, node_->value, false);
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  static Tensor make(Shape shape, double fill, bool requires_grad) {
    Tensor t;
    t.node_ = std::make_shared<detail::Node>();
    t.node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    t.node_->shape = std::move(shape);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_op(Shape shape, std::vector<double> value,
                      std::vector<Tensor> inputs,
                      std::function<void(Node&)> backprop) {
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  Tensor out = Tensor::from(std::move(shape), std::move(value), rg);
  auto node = out.node();
  node->parents.reserve(inputs.size());
  for (const auto& in : inputs) node->parents.push_back(in.node());
  if (rg) node->backprop = std::move(backprop);
  return out;
}

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] + pb[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    for (int which = 0; which < 2; ++which) {
      auto& p = *self.parents[static_cast<std::size_t>(which)];
      if (!p.requires_grad) continue;
      detail::ensure_grad(p);
      for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] - pb[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& pa2 = *self.parents[0];
    if (pa2.requires_grad) {
      detail::ensure_grad(pa2);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa2.grad[i] += self.grad[i];
    }
    auto& pb2 = *self.parents[1];
    if (pb2.requires_grad) {
      detail::ensure_grad(pb2);
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb2.grad[i] -= self.grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] * pb[i];
  return detail::make_op(a.shape(), std::move(v), {a, b}, [](detail::Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    if (na.requires_grad) {
      detail::ensure_grad(na);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        na.grad[i] += self.grad[i] * nb.value[i];
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        nb.grad[i] += self.grad[i] * na.value[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double s) {
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] * s;
  return detail::make_op(a.shape(), std::move(v), {a}, [s](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += s * self.grad[i];
  });
}

inline Tensor relu(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i) v[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  return detail::make_op(a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
  });
}

inline Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  const auto n = static_cast<std::size_t>(a.numel());
  std::vector<double> v(n);
  const double* pa = a.data().data();
  for (std::size_t i = 0; i < n; ++i)
    v[i] = 0.5 * pa[i] * (1.0 + std::erf(pa[i] * kInvSqrt2));
  return detail::make_op(a.shape(), std::move(v), {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = p.value[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      p.grad[i] += self.grad[i] * (cdf + x * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// linear algebra

// (m,k) x (k,n) -> (m,n)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> v(static_cast<std::size_t>(m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t l = 0; l < k; ++l) {
      const double av = pa[i * k + l];
      for (std::int64_t j = 0; j < n; ++j) v[static_cast<std::size_t>(i * n + j)] += av * pb[l * n + j];
    }
  return detail::make_op({m, n}, std::move(v), {a, b},
                         [m, k, n](detail::Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const double* g = self.grad.data();
    if (na.requires_grad) {
      detail::ensure_grad(na);
      // dA = dY B^T
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) {
          const double gv = g[i * n + j];
          for (std::int64_t l = 0; l < k; ++l)
            na.grad[static_cast<std::size_t>(i * k + l)] += gv * nb.value[static_cast<std::size_t>(l * n + j)];
        }
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      // dB = A^T dY
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t l = 0; l < k; ++l) {
          const double av = na.value[static_cast<std::size_t>(i * k + l)];
          for (std::int64_t j = 0; j < n; ++j)
            nb.grad[static_cast<std::size_t>(l * n + j)] += av * g[i * n + j];
        }
    }
  });
}

// (B,m,k) x (B,k,n) -> (B,m,n)
inline Tensor bmm(const Tensor& a, const Tensor& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) ||
      a.dim(2) != b.dim(1)) {
    throw std::invalid_argument("bmm: incompatible shapes " +
                                shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const auto bb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<double> v(static_cast<std::size_t>(bb * m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (std::int64_t t = 0; t < bb; ++t)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t l = 0; l < k; ++l) {
        const double av = pa[(t * m + i) * k + l];
        for (std::int64_t j = 0; j < n; ++j)
          v[static_cast<std::size_t>((t * m + i) * n + j)] += av * pb[(t * k + l) * n + j];
      }
  return detail::make_op({bb, m, n}, std::move(v), {a, b},
                         [bb, m, k, n](detail::Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const double* g = self.grad.data();
    if (na.requires_grad) {
      detail::ensure_grad(na);
      for (std::int64_t t = 0; t < bb; ++t)
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < n; ++j) {
            const double gv = g[(t * m + i) * n + j];
            for (std::int64_t l = 0; l < k; ++l)
              na.grad[static_cast<std::size_t>((t * m + i) * k + l)] +=
                  gv * nb.value[static_cast<std::size_t>((t * k + l) * n + j)];
          }
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::int64_t t = 0; t < bb; ++t)
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t l = 0; l < k; ++l) {
            const double av = na.value[static_cast<std::size_t>((t * m + i) * k + l)];
            for (std::int64_t j = 0; j < n; ++j)
              nb.grad[static_cast<std::size_t>((t * k + l) * n + j)] +=
                  av * g[(t * m + i) * n + j];
          }
    }
  });
}

// x (..., in), w (out, in), b (out) -> (..., out)
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2 || b.rank() != 1 || w.dim(0) != b.dim(0) ||
      x.dim(x.rank() - 1) != w.dim(1)) {
    throw std::invalid_argument("linear: incompatible shapes x" +
                                shape_str(x.shape()) + " w" +
                                shape_str(w.shape()) + " b" +
                                shape_str(b.shape()));
  }
  const auto in = w.dim(1), out = w.dim(0);
  const auto rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out;
  std::vector<double> v(static_cast<std::size_t>(rows * out));
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t o = 0; o < out; ++o) {
      double acc = pb[o];
      const double* xr = px + r * in;
      const double* wr = pw + o * in;
      for (std::int64_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      v[static_cast<std::size_t>(r * out + o)] = acc;
    }
  return detail::make_op(std::move(out_shape), std::move(v), {x, w, b},
                         [rows, in, out](detail::Node& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    auto& nb = *self.parents[2];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      detail::ensure_grad(nx);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t o = 0; o < out; ++o) {
          const double gv = g[r * out + o];
          const double* wr = nw.value.data() + o * in;
          double* gx = nx.grad.data() + r * in;
          for (std::int64_t i = 0; i < in; ++i) gx[i] += gv * wr[i];
        }
    }
    if (nw.requires_grad) {
      detail::ensure_grad(nw);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t o = 0; o < out; ++o) {
          const double gv = g[r * out + o];
          const double* xr = nx.value.data() + r * in;
          double* gw = nw.grad.data() + o * in;
          for (std::int64_t i = 0; i < in; ++i) gw[i] += gv * xr[i];
        }
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t o = 0; o < out; ++o) nb.grad[static_cast<std::size_t>(o)] += g[r * out + o];
    }
  });
}

// ---------------------------------------------------------------------------
// 1D convolutions over the trailing axis; x is (B, C_in, L)

// w (C_out, C_in, K), b (C_out) -> (B, C_out, L-K+1)
inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(1) ||
      w.dim(0) != b.dim(0) || x.dim(2) < w.dim(2)) {
    throw std::invalid_argument("conv1d: incompatible shapes x" +
                                shape_str(x.shape()) + " w" +
                                shape_str(w.shape()));
  }
  const auto B = x.dim(0), ci = x.dim(1), L = x.dim(2);
  const auto co = w.dim(0), K = w.dim(2);
  const auto Lo = L - K + 1;
  std::vector<double> v(static_cast<std::size_t>(B * co * Lo));
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  for (std::int64_t bi = 0; bi < B; ++bi)
    for (std::int64_t o = 0; o < co; ++o) {
      double* yr = v.data() + (bi * co + o) * Lo;
      for (std::int64_t t = 0; t < Lo; ++t) yr[t] = pb[o];
      for (std::int64_t c = 0; c < ci; ++c) {
        const double* xr = px + (bi * ci + c) * L;
        const double* wr = pw + (o * ci + c) * K;
        for (std::int64_t k = 0; k < K; ++k) {
          const double wv = wr[k];
          for (std::int64_t t = 0; t < Lo; ++t) yr[t] += wv * xr[t + k];
        }
      }
    }
  return detail::make_op({B, co, Lo}, std::move(v), {x, w, b},
                         [B, ci, L, co, K, Lo](detail::Node& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    auto& nb = *self.parents[2];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      detail::ensure_grad(nx);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < co; ++o) {
          const double* gr = g + (bi * co + o) * Lo;
          for (std::int64_t c = 0; c < ci; ++c) {
            double* gx = nx.grad.data() + (bi * ci + c) * L;
            const double* wr = nw.value.data() + (o * ci + c) * K;
            for (std::int64_t k = 0; k < K; ++k) {
              const double wv = wr[k];
              for (std::int64_t t = 0; t < Lo; ++t) gx[t + k] += wv * gr[t];
            }
          }
        }
    }
    if (nw.requires_grad) {
      detail::ensure_grad(nw);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < co; ++o) {
          const double* gr = g + (bi * co + o) * Lo;
          for (std::int64_t c = 0; c < ci; ++c) {
            const double* xr = nx.value.data() + (bi * ci + c) * L;
            double* gw = nw.grad.data() + (o * ci + c) * K;
            for (std::int64_t k = 0; k < K; ++k) {
              double acc = 0.0;
              for (std::int64_t t = 0; t < Lo; ++t) acc += gr[t] * xr[t + k];
              gw[k] += acc;
            }
          }
        }
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < co; ++o) {
          const double* gr = g + (bi * co + o) * Lo;
          double acc = 0.0;
          for (std::int64_t t = 0; t < Lo; ++t) acc += gr[t];
          nb.grad[static_cast<std::size_t>(o)] += acc;
        }
    }
  });
}

// w (C_in, C_out, K), b (C_out) -> (B, C_out, L+K-1)
inline Tensor conv1d_transpose(const Tensor& x, const Tensor& w,
                               const Tensor& b) {
  if (x.rank() != 3 || w.rank() != 3 || x.dim(1) != w.dim(0) ||
      w.dim(1) != b.dim(0)) {
    throw std::invalid_argument("conv1d_transpose: incompatible shapes x" +
                                shape_str(x.shape()) + " w" +
                                shape_str(w.shape()));
  }
  const auto B = x.dim(0), ci = x.dim(1), L = x.dim(2);
  const auto co = w.dim(1), K = w.dim(2);
  const auto Lo = L + K - 1;
  std::vector<double> v(static_cast<std::size_t>(B * co * Lo));
  const double* px = x.data().data();
  const double* pw = w.data().data();
  const double* pb = b.data().data();
  for (std::int64_t bi = 0; bi < B; ++bi)
    for (std::int64_t o = 0; o < co; ++o) {
      double* yr = v.data() + (bi * co + o) * Lo;
      for (std::int64_t t = 0; t < Lo; ++t) yr[t] = pb[o];
      for (std::int64_t c = 0; c < ci; ++c) {
        const double* xr = px + (bi * ci + c) * L;
        const double* wr = pw + (c * co + o) * K;
        for (std::int64_t k = 0; k < K; ++k) {
          const double wv = wr[k];
          for (std::int64_t s = 0; s < L; ++s) yr[s + k] += wv * xr[s];
        }
      }
    }
  return detail::make_op({B, co, Lo}, std::move(v), {x, w, b},
                         [B, ci, L, co, K, Lo](detail::Node& self) {
    auto& nx = *self.parents[0];
    auto& nw = *self.parents[1];
    auto& nb = *self.parents[2];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      detail::ensure_grad(nx);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < co; ++o) {
          const double* gr = g + (bi * co + o) * Lo;
          for (std::int64_t c = 0; c < ci; ++c) {
            double* gx = nx.grad.data() + (bi * ci + c) * L;
            const double* wr = nw.value.data() + (c * co + o) * K;
            for (std::int64_t k = 0; k < K; ++k) {
              const double wv = wr[k];
              for (std::int64_t s = 0; s < L; ++s) gx[s] += wv * gr[s + k];
            }
          }
        }
    }
    if (nw.requires_grad) {
      detail::ensure_grad(nw);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t c = 0; c < ci; ++c) {
          const double* xr = nx.value.data() + (bi * ci + c) * L;
          for (std::int64_t o = 0; o < co; ++o) {
            const double* gr = g + (bi * co + o) * Lo;
            double* gw = nw.grad.data() + (c * co + o) * K;
            for (std::int64_t k = 0; k < K; ++k) {
              double acc = 0.0;
              for (std::int64_t s = 0; s < L; ++s) acc += xr[s] * gr[s + k];
              gw[k] += acc;
            }
          }
        }
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::int64_t bi = 0; bi < B; ++bi)
        for (std::int64_t o = 0; o < co; ++o) {
          const double* gr = g + (bi * co + o) * Lo;
          double acc = 0.0;
          for (std::int64_t t = 0; t < Lo; ++t) acc += gr[t];
          nb.grad[static_cast<std::size_t>(o)] += acc;
        }
    }
  });
}

// x (B,C,L) + bias (B,C) broadcast over L
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 2 || x.dim(0) != bias.dim(0) ||
      x.dim(1) != bias.dim(1)) {
    throw std::invalid_argument("add_channel_bias: incompatible shapes x" +
                                shape_str(x.shape()) + " bias" +
                                shape_str(bias.shape()));
  }
  const auto B = x.dim(0), C = x.dim(1), L = x.dim(2);
  std::vector<double> v(static_cast<std::size_t>(B * C * L));
  const double* px = x.data().data();
  const double* pb = bias.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t c = 0; c < C; ++c) {
      const double bv = pb[b * C + c];
      const double* xr = px + (b * C + c) * L;
      double* yr = v.data() + (b * C + c) * L;
      for (std::int64_t t = 0; t < L; ++t) yr[t] = xr[t] + bv;
    }
  return detail::make_op(x.shape(), std::move(v), {x, bias},
                         [B, C, L](detail::Node& self) {
    auto& nx = *self.parents[0];
    auto& nb = *self.parents[1];
    const double* g = self.grad.data();
    if (nx.requires_grad) {
      detail::ensure_grad(nx);
      for (std::size_t i = 0; i < self.grad.size(); ++i) nx.grad[i] += g[i];
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t c = 0; c < C; ++c) {
          const double* gr = g + (b * C + c) * L;
          double acc = 0.0;
          for (std::int64_t t = 0; t < L; ++t) acc += gr[t];
          nb.grad[static_cast<std::size_t>(b * C + c)] += acc;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// normalization / softmax / losses

// Normalizes to zero mean, unit variance along `axis` (no learned affine).
inline Tensor normalize(const Tensor& x, int axis, double eps = 1e-5) {
  if (axis < 0 || axis >= x.rank()) {
    throw std::invalid_argument("normalize: axis out of range");
  }
  const auto& sh = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t m = sh[static_cast<std::size_t>(axis)];
  std::vector<double> v(static_cast<std::size_t>(x.numel()));
  const double* px = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t i = 0; i < inner; ++i) {
      double mean = 0.0;
      for (std::int64_t j = 0; j < m; ++j) mean += px[(o * m + j) * inner + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t j = 0; j < m; ++j) {
        const double d = px[(o * m + j) * inner + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double s = 1.0 / std::sqrt(var + eps);
      for (std::int64_t j = 0; j < m; ++j) {
        const auto idx = static_cast<std::size_t>((o * m + j) * inner + i);
        v[idx] = (px[idx] - mean) * s;
      }
    }
  std::vector<double> y_copy = v;
  return detail::make_op(x.shape(), std::move(v), {x},
                         [outer, inner, m, eps,
                          y = std::move(y_copy)](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double* g = self.grad.data();
    const double* px = p.value.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < inner; ++i) {
        double mean = 0.0;
        for (std::int64_t j = 0; j < m; ++j) mean += px[(o * m + j) * inner + i];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
          const double d = px[(o * m + j) * inner + i] - mean;
          var += d * d;
        }
        var /= static_cast<double>(m);
        const double s = 1.0 / std::sqrt(var + eps);
        double gmean = 0.0, gymean = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
          const auto idx = static_cast<std::size_t>((o * m + j) * inner + i);
          gmean += g[idx];
          gymean += g[idx] * y[idx];
        }
        gmean /= static_cast<double>(m);
        gymean /= static_cast<double>(m);
        for (std::int64_t j = 0; j < m; ++j) {
          const auto idx = static_cast<std::size_t>((o * m + j) * inner + i);
          p.grad[idx] += s * (g[idx] - gmean - y[idx] * gymean);
        }
      }
  });
}

// Softmax along the last axis.
inline Tensor softmax(const Tensor& x) {
  const auto m = x.dim(x.rank() - 1);
  const auto rows = x.numel() / m;
  std::vector<double> v(static_cast<std::size_t>(x.numel()));
  const double* px = x.data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * m;
    double* yr = v.data() + r * m;
    double mx = xr[0];
    for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (std::int64_t j = 0; j < m; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (std::int64_t j = 0; j < m; ++j) yr[j] /= z;
  }
  std::vector<double> y_copy = v;
  return detail::make_op(x.shape(), std::move(v), {x},
                         [rows, m, y = std::move(y_copy)](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double* g = self.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* yr = y.data() + r * m;
      const double* gr = g + r * m;
      double dot = 0.0;
      for (std::int64_t j = 0; j < m; ++j) dot += gr[j] * yr[j];
      double* gx = p.grad.data() + r * m;
      for (std::int64_t j = 0; j < m; ++j) gx[j] += yr[j] * (gr[j] - dot);
    }
  });
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mse");
  const auto n = static_cast<std::size_t>(a.numel());
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = pa[i] - pb[i];
    acc += d * d;
  }
  acc /= static_cast<double>(n);
  return detail::make_op({1}, {acc}, {a, b}, [n](detail::Node& self) {
    auto& na = *self.parents[0];
    auto& nb = *self.parents[1];
    const double g = self.grad[0] * 2.0 / static_cast<double>(n);
    if (na.requires_grad) {
      detail::ensure_grad(na);
      for (std::size_t i = 0; i < n; ++i)
        na.grad[i] += g * (na.value[i] - nb.value[i]);
    }
    if (nb.requires_grad) {
      detail::ensure_grad(nb);
      for (std::size_t i = 0; i < n; ++i)
        nb.grad[i] -= g * (na.value[i] - nb.value[i]);
    }
  });
}

inline Tensor sum(const Tensor& a) {
  const auto n = static_cast<std::size_t>(a.numel());
  const double* pa = a.data().data();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += pa[i];
  return detail::make_op({1}, {acc}, {a}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (auto& gv : p.grad) gv += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Mean cross entropy of row-wise softmax(logits) against integer labels.
inline Tensor cross_entropy(const Tensor& logits,
                            const std::vector<std::int64_t>& labels) {
  if (logits.rank() != 2 ||
      logits.dim(0) != static_cast<std::int64_t>(labels.size())) {
    throw std::invalid_argument("cross_entropy: logits " +
                                shape_str(logits.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const auto B = logits.dim(0), C = logits.dim(1);
  const double* pl = logits.data().data();
  std::vector<double> probs(static_cast<std::size_t>(B * C));
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* lr = pl + b * C;
    double* pr = probs.data() + b * C;
    double mx = lr[0];
    for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, lr[c]);
    double z = 0.0;
    for (std::int64_t c = 0; c < C; ++c) {
      pr[c] = std::exp(lr[c] - mx);
      z += pr[c];
    }
    for (std::int64_t c = 0; c < C; ++c) pr[c] /= z;
    const auto y = labels[static_cast<std::size_t>(b)];
    if (y < 0 || y >= C) throw std::invalid_argument("cross_entropy: label out of range");
    loss -= std::log(std::max(pr[y], 1e-300));
  }
  loss /= static_cast<double>(B);
  return detail::make_op({1}, {loss}, {logits},
                         [B, C, probs = std::move(probs),
                          labels](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double g = self.grad[0] / static_cast<double>(B);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t c = 0; c < C; ++c) {
        const double ind = (labels[static_cast<std::size_t>(b)] == c) ? 1.0 : 0.0;
        p.grad[static_cast<std::size_t>(b * C + c)] +=
            g * (probs[static_cast<std::size_t>(b * C + c)] - ind);
      }
  });
}

// ---------------------------------------------------------------------------
// shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: numel mismatch " +
                                shape_str(x.shape()) + " -> " +
                                shape_str(shape));
  }
  std::vector<double> v(x.data().begin(), x.data().end());
  return detail::make_op(std::move(shape), std::move(v), {x},
                         [](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += self.grad[i];
  });
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start,
                    std::int64_t len) {
  if (axis < 0 || axis >= x.rank() || start < 0 || len <= 0 ||
      start + len > x.dim(axis)) {
    throw std::invalid_argument("slice: bad range axis=" + std::to_string(axis) +
                                " start=" + std::to_string(start) +
                                " len=" + std::to_string(len) + " on " +
                                shape_str(x.shape()));
  }
  const auto& sh = x.shape();
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= sh[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < x.rank(); ++i) inner *= sh[static_cast<std::size_t>(i)];
  const std::int64_t m = sh[static_cast<std::size_t>(axis)];
  Shape out_shape = sh;
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::vector<double> v(static_cast<std::size_t>(outer * len * inner));
  const double* px = x.data().data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < len; ++j)
      std::copy_n(px + (o * m + start + j) * inner, inner,
                  v.data() + (o * len + j) * inner);
  return detail::make_op(std::move(out_shape), std::move(v), {x},
                         [outer, inner, m, start, len](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double* g = self.grad.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < len; ++j) {
        double* gp = p.grad.data() + (o * m + start + j) * inner;
        const double* gs = g + (o * len + j) * inner;
        for (std::int64_t i = 0; i < inner; ++i) gp[i] += gs[i];
      }
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const auto& first = parts.front();
  if (axis < 0 || axis >= first.rank()) {
    throw std::invalid_argument("concat: axis out of range");
  }
  Shape out_shape = first.shape();
  std::int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.rank()) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < first.rank(); ++i) {
      if (i != axis && p.dim(i) != first.dim(i)) {
        throw std::invalid_argument("concat: shape mismatch " +
                                    shape_str(p.shape()) + " vs " +
                                    shape_str(first.shape()));
      }
    }
    total += p.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= first.dim(i);
  for (int i = axis + 1; i < first.rank(); ++i) inner *= first.dim(i);
  std::vector<double> v(static_cast<std::size_t>(outer * total * inner));
  std::vector<std::int64_t> sizes;
  sizes.reserve(parts.size());
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t m = p.dim(axis);
    sizes.push_back(m);
    const double* px = p.data().data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(px + o * m * inner, m * inner,
                  v.data() + (o * total + offset) * inner);
    offset += m;
  }
  return detail::make_op(std::move(out_shape), std::move(v), parts,
                         [outer, inner, total,
                          sizes = std::move(sizes)](detail::Node& self) {
    const double* g = self.grad.data();
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
      auto& p = *self.parents[pi];
      const std::int64_t m = sizes[pi];
      if (p.requires_grad) {
        detail::ensure_grad(p);
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* gs = g + (o * total + off) * inner;
          double* gp = p.grad.data() + o * m * inner;
          for (std::int64_t i = 0; i < m * inner; ++i) gp[i] += gs[i];
        }
      }
      off += m;
    }
  });
}

// (B, m, n) -> (B, n, m)
inline Tensor transpose12(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("transpose12: tensor must be 3D");
  const auto B = x.dim(0), m = x.dim(1), n = x.dim(2);
  std::vector<double> v(static_cast<std::size_t>(x.numel()));
  const double* px = x.data().data();
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j)
        v[static_cast<std::size_t>((b * n + j) * m + i)] = px[(b * m + i) * n + j];
  return detail::make_op({B, n, m}, std::move(v), {x},
                         [B, m, n](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double* g = self.grad.data();
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          p.grad[static_cast<std::size_t>((b * m + i) * n + j)] +=
              g[(b * n + j) * m + i];
  });
}

// table (V, d), ids (n) -> (n, d)
inline Tensor embedding(const Tensor& table,
                        const std::vector<std::int64_t>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be 2D");
  const auto V = table.dim(0), d = table.dim(1);
  const auto n = static_cast<std::int64_t>(ids.size());
  std::vector<double> v(static_cast<std::size_t>(n * d));
  const double* pt = table.data().data();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= V) throw std::invalid_argument("embedding: id out of range");
    std::copy_n(pt + id * d, d, v.data() + i * d);
  }
  return detail::make_op({n, d}, std::move(v), {table},
                         [n, d, ids](detail::Node& self) {
    auto& p = *self.parents[0];
    if (!p.requires_grad) return;
    detail::ensure_grad(p);
    const double* g = self.grad.data();
    for (std::int64_t i = 0; i < n; ++i) {
      double* gp = p.grad.data() + ids[static_cast<std::size_t>(i)] * d;
      const double* gs = g + i * d;
      for (std::int64_t j = 0; j < d; ++j) gp[j] += gs[j];
    }
  });
}

// ---------------------------------------------------------------------------
// backward

// Computes gradients of a scalar loss with respect to every reachable tensor
// that requires grad. Rejects non-scalar losses and graphs with cycles.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  }
  auto root = loss.node();
  if (!root->requires_grad) {
    throw std::invalid_argument("backward: loss does not require grad");
  }

  // Iterative DFS topological sort over the grad-requiring subgraph.
  enum : std::uint8_t { kOpen = 1, kDone = 2 };
  std::unordered_map<detail::Node*, std::uint8_t> state;
  std::vector<detail::Node*> order;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  state[root.get()] = kOpen;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (!parent->requires_grad) continue;
      auto it = state.find(parent);
      if (it == state.end()) {
        state[parent] = kOpen;
        stack.emplace_back(parent, 0);
      } else if (it->second == kOpen) {
        throw std::runtime_error("backward: cycle detected in op graph");
      }
    } else {
      state[node] = kDone;
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) n->grad.assign(n->value.size(), 0.0);
  root->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

}  // namespace maskplan
