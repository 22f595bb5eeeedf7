#pragma once

// Dense float32 tensors with reverse-mode differentiation.
//
// Ops run eagerly; when a GradientTape is active and an input requires
// gradients, the op appends a backward closure to the tape. backward()
// replays the tape in reverse execution order, which visits every
// recorded node exactly once and makes gradients bit-reproducible.
// Reductions and gradient accumulation run in 64-bit even though storage
// is 32-bit.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "ptal/rng.hpp"

namespace ptal {

struct TensorImpl {
  std::vector<int> shape;
  std::vector<float> data;
  std::vector<double> grad;  // sized lazily by backward()
  bool requires_grad = false;
  // 64-bit value carried alongside scalar results so that reductions and
  // the loss values finite-difference checks consume keep full precision.
  double scalar64 = std::numeric_limits<double>::quiet_NaN();
};

inline std::size_t shape_numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(std::vector<int> shape, std::vector<float> data, bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }

  static Tensor full(std::vector<int> shape, float value, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<float>(n, value), requires_grad);
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  static Tensor randn(std::vector<int> shape, Rng& rng, float stddev = 1.0f,
                      bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    std::vector<float> d(n);
    for (auto& v : d) v = static_cast<float>(rng.normal() * stddev);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }
  int rows() const { return impl_->shape.at(0); }
  int cols() const { return impl_->shape.at(1); }
  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool b) { impl_->requires_grad = b; }

  std::vector<float>& vals() { return impl_->data; }
  const std::vector<float>& vals() const { return impl_->data; }
  float& at(int i) { return impl_->data[static_cast<std::size_t>(i)]; }
  float at(int i) const { return impl_->data[static_cast<std::size_t>(i)]; }
  float& at(int r, int c) {
    return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                       static_cast<std::size_t>(c)];
  }
  float at(int r, int c) const {
    return impl_->data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) +
                       static_cast<std::size_t>(c)];
  }

  float item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
    return impl_->data[0];
  }

  // Scalar value at the precision it was accumulated at.
  double item64() const {
    if (numel() != 1) throw std::invalid_argument("item64: tensor is not scalar");
    if (std::isfinite(impl_->scalar64)) return impl_->scalar64;
    return static_cast<double>(impl_->data[0]);
  }

  // Deep copy of shape+data; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const {
    return from(impl_->shape, impl_->data, requires_grad);
  }

  // Gradient accumulated by the last backward() pass, as a float tensor.
  Tensor grad() const {
    std::vector<float> g(numel(), 0.0f);
    if (impl_->grad.size() == numel())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<float>(impl_->grad[i]);
    return from(impl_->shape, std::move(g));
  }
  const std::vector<double>& grad_raw() const { return impl_->grad; }

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;

  friend class GradientTape;
};

// Gradients of the leaves that participated in a backward pass. Leaves the
// loss does not depend on report zero.
class GradMap {
 public:
  Tensor grad_for(const Tensor& leaf) const {
    auto it = map_.find(leaf.impl().get());
    if (it == map_.end()) return Tensor::zeros(leaf.shape());
    return it->second;
  }
  std::size_t size() const { return map_.size(); }

 private:
  std::unordered_map<const TensorImpl*, Tensor> map_;
  friend class GradientTape;
};

class GradientTape {
 public:
  GradientTape() {
    prev_ = active_;
    active_ = this;
  }
  ~GradientTape() { active_ = prev_; }
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active() { return active_; }

  void record(std::vector<std::shared_ptr<TensorImpl>> inputs, std::shared_ptr<TensorImpl> output,
              std::function<void()> backward) {
    entries_.push_back(Entry{std::move(inputs), std::move(output), std::move(backward)});
  }

  bool empty() const { return entries_.empty(); }
  std::size_t size() const { return entries_.size(); }

  // Reverse pass. Seeds d(loss)/d(loss)=1 and replays the recorded ops in
  // reverse execution order; leaf gradients accumulate additively.
  GradMap backward(const Tensor& loss) {
    if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    if (entries_.empty()) throw std::runtime_error("backward: tape is empty");

    for (const auto& e : entries_) {
      e.output->grad.assign(e.output->data.size(), 0.0);
      for (const auto& in : e.inputs) in->grad.assign(in->data.size(), 0.0);
    }
    loss.impl()->grad.assign(1, 1.0);

    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward();

    GradMap grads;
    std::unordered_map<const TensorImpl*, bool> produced;
    for (const auto& e : entries_) produced[e.output.get()] = true;
    for (const auto& e : entries_) {
      for (const auto& in : e.inputs) {
        if (!in->requires_grad || produced.count(in.get())) continue;
        Tensor t = Tensor::from(in->shape, std::vector<float>(in->data.size(), 0.0f));
        for (std::size_t i = 0; i < in->data.size(); ++i)
          t.vals()[i] = static_cast<float>(in->grad[i]);
        grads.map_[in.get()] = t;
      }
    }
    return grads;
  }

 private:
  struct Entry {
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    std::function<void()> backward;
  };
  std::vector<Entry> entries_;
  GradientTape* prev_ = nullptr;
  static thread_local GradientTape* active_;
};

inline thread_local GradientTape* GradientTape::active_ = nullptr;

namespace detail {

inline void check_finite(const Tensor& t, const char* op) {
  for (float v : t.vals())
    if (!std::isfinite(v))
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
}

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  for (const Tensor* t : ts)
    if (t->requires_grad()) return true;
  return false;
}

// Finalizes an op: finiteness check, grad propagation, tape recording.
inline Tensor make_op(const char* name, std::vector<Tensor> inputs, Tensor out,
                      std::function<void()> backward) {
  check_finite(out, name);
  bool rg = false;
  for (const auto& in : inputs) rg = rg || in.requires_grad();
  out.set_requires_grad(rg);
  if (rg && GradientTape::active()) {
    std::vector<std::shared_ptr<TensorImpl>> ins;
    ins.reserve(inputs.size());
    for (const auto& in : inputs) ins.push_back(in.impl());
    GradientTape::active()->record(std::move(ins), out.impl(), std::move(backward));
  }
  return out;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

inline double get64(const Tensor& t) { return t.item64(); }

inline void set64(Tensor& t, double v) {
  if (t.numel() == 1) t.impl()->scalar64 = v;
}

// Propagates 64-bit precision through a scalar-to-scalar op.
template <typename Fn>
inline void carry64(const Tensor& in, Tensor& out, Fn&& fn) {
  if (in.numel() == 1 && out.numel() == 1) out.impl()->scalar64 = fn(get64(in));
}

template <typename Fn>
inline void carry64(const Tensor& a, const Tensor& b, Tensor& out, Fn&& fn) {
  if (a.numel() == 1 && b.numel() == 1 && out.numel() == 1)
    out.impl()->scalar64 = fn(get64(a), get64(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.vals()[i] = a.vals()[i] + b.vals()[i];
  detail::carry64(a, b, out, [](double x, double y) { return x + y; });
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("add", {a, b}, out, [ai, bi, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      ai->grad[i] += oi->grad[i];
      bi->grad[i] += oi->grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.vals()[i] = a.vals()[i] - b.vals()[i];
  detail::carry64(a, b, out, [](double x, double y) { return x - y; });
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("sub", {a, b}, out, [ai, bi, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      ai->grad[i] += oi->grad[i];
      bi->grad[i] -= oi->grad[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.vals()[i] = a.vals()[i] * b.vals()[i];
  detail::carry64(a, b, out, [](double x, double y) { return x * y; });
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("mul", {a, b}, out, [ai, bi, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      ai->grad[i] += oi->grad[i] * static_cast<double>(bi->data[i]);
      bi->grad[i] += oi->grad[i] * static_cast<double>(ai->data[i]);
    }
  });
}

inline Tensor divide(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "divide");
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.vals()[i] = a.vals()[i] / b.vals()[i];
  detail::carry64(a, b, out, [](double x, double y) { return x / y; });
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("divide", {a, b}, out, [ai, bi, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      const double bv = bi->data[i];
      ai->grad[i] += oi->grad[i] / bv;
      bi->grad[i] -= oi->grad[i] * static_cast<double>(oi->data[i]) / bv;
    }
  });
}

// ---------------------------------------------------------------------------
// Scalar and unary ops

inline Tensor add_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(a.vals()[i] + c);
  detail::carry64(a, out, [c](double x) { return x + c; });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("add_scalar", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i];
  });
}

inline Tensor mul_scalar(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(a.vals()[i] * c);
  detail::carry64(a, out, [c](double x) { return x * c; });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("mul_scalar", {a}, out, [ai, oi, c] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) ai->grad[i] += oi->grad[i] * c;
  });
}

inline Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

inline Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out.vals()[i] = std::max(a.vals()[i], 0.0f);
  detail::carry64(a, out, [](double x) { return std::max(x, 0.0); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("relu", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      if (ai->data[i] > 0.0f) ai->grad[i] += oi->grad[i];
  });
}

inline Tensor sigmoid(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(a.vals()[i]))));
  detail::carry64(a, out, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("sigmoid", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      const double s = oi->data[i];
      ai->grad[i] += oi->grad[i] * s * (1.0 - s);
    }
  });
}

inline Tensor exp(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(std::exp(static_cast<double>(a.vals()[i])));
  detail::carry64(a, out, [](double x) { return std::exp(x); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("exp", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      ai->grad[i] += oi->grad[i] * static_cast<double>(oi->data[i]);
  });
}

inline Tensor log(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(std::log(static_cast<double>(a.vals()[i])));
  detail::carry64(a, out, [](double x) { return std::log(x); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("log", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      ai->grad[i] += oi->grad[i] / static_cast<double>(ai->data[i]);
  });
}

inline Tensor sqrt(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = static_cast<float>(std::sqrt(static_cast<double>(a.vals()[i])));
  detail::carry64(a, out, [](double x) { return std::sqrt(x); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("sqrt", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      ai->grad[i] += oi->grad[i] * 0.5 / static_cast<double>(oi->data[i]);
  });
}

inline Tensor square(const Tensor& a) { return mul(a, a); }

inline Tensor clamp_min(const Tensor& a, double floor) {
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i)
    out.vals()[i] = std::max(a.vals()[i], static_cast<float>(floor));
  detail::carry64(a, out, [floor](double x) { return std::max(x, floor); });
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("clamp_min", {a}, out, [ai, oi, floor] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      if (static_cast<double>(ai->data[i]) > floor) ai->grad[i] += oi->grad[i];
  });
}

// Copies data into a gradient-free leaf; use to treat a value as constant.
inline Tensor detach(const Tensor& a) { return a.clone(false); }

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
    throw std::invalid_argument("matmul: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(p, j));
      out.at(i, j) = static_cast<float>(acc);
    }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("matmul", {a, b}, out, [ai, bi, oi, m, k, n] {
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j)
          acc += oi->grad[static_cast<std::size_t>(i) * n + j] *
                 static_cast<double>(bi->data[static_cast<std::size_t>(p) * n + j]);
        ai->grad[static_cast<std::size_t>(i) * k + p] += acc;
      }
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i)
          acc += static_cast<double>(ai->data[static_cast<std::size_t>(i) * k + p]) *
                 oi->grad[static_cast<std::size_t>(i) * n + j];
        bi->grad[static_cast<std::size_t>(p) * n + j] += acc;
      }
  });
}

// a (M x K) times b^T where b is (N x K); result M x N.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("matmul_nt: shape mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  const int m = a.rows(), k = a.cols(), n = b.rows();
  Tensor out = Tensor::zeros({m, n});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int p = 0; p < k; ++p)
        acc += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(j, p));
      out.at(i, j) = static_cast<float>(acc);
    }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("matmul_nt", {a, b}, out, [ai, bi, oi, m, k, n] {
    for (int i = 0; i < m; ++i)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        for (int j = 0; j < n; ++j)
          acc += oi->grad[static_cast<std::size_t>(i) * n + j] *
                 static_cast<double>(bi->data[static_cast<std::size_t>(j) * k + p]);
        ai->grad[static_cast<std::size_t>(i) * k + p] += acc;
      }
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) {
        double acc = 0.0;
        for (int i = 0; i < m; ++i)
          acc += oi->grad[static_cast<std::size_t>(i) * n + j] *
                 static_cast<double>(ai->data[static_cast<std::size_t>(i) * k + p]);
        bi->grad[static_cast<std::size_t>(j) * k + p] += acc;
      }
  });
}

// ---------------------------------------------------------------------------
// Temporal convolution. x is T x Cin, w is {Cout, Cin, k} with odd k, bias
// {Cout} optional. Zero padding keeps the output length equal to T.

inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor()) {
  if (x.ndim() != 2 || w.ndim() != 3)
    throw std::invalid_argument("conv1d: expects x [T,Cin], w [Cout,Cin,k]");
  const int t_len = x.rows(), cin = x.cols();
  const int cout = w.dim(0), wcin = w.dim(1), k = w.dim(2);
  if (wcin != cin) throw std::invalid_argument("conv1d: channel mismatch");
  if (k % 2 == 0) throw std::invalid_argument("conv1d: kernel must be odd");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout))
    throw std::invalid_argument("conv1d: bias shape mismatch");
  const int r = k / 2;

  Tensor out = Tensor::zeros({t_len, cout});
  for (int t = 0; t < t_len; ++t)
    for (int o = 0; o < cout; ++o) {
      double acc = bias.defined() ? static_cast<double>(bias.at(o)) : 0.0;
      for (int j = 0; j < k; ++j) {
        const int s = t + j - r;
        if (s < 0 || s >= t_len) continue;
        const std::size_t wbase = (static_cast<std::size_t>(o) * cin) * k;
        for (int i = 0; i < cin; ++i)
          acc += static_cast<double>(x.at(s, i)) *
                 static_cast<double>(w.vals()[wbase + static_cast<std::size_t>(i) * k + j]);
      }
      out.at(t, o) = static_cast<float>(acc);
    }

  std::vector<Tensor> inputs = {x, w};
  if (bias.defined()) inputs.push_back(bias);
  auto xi = x.impl(), wi = w.impl(), oi = out.impl();
  auto bi = bias.defined() ? bias.impl() : nullptr;
  return detail::make_op("conv1d", std::move(inputs), out, [xi, wi, bi, oi, t_len, cin, cout, k, r] {
    for (int t = 0; t < t_len; ++t)
      for (int o = 0; o < cout; ++o) {
        const double g = oi->grad[static_cast<std::size_t>(t) * cout + o];
        if (bi) bi->grad[static_cast<std::size_t>(o)] += g;
        for (int j = 0; j < k; ++j) {
          const int s = t + j - r;
          if (s < 0 || s >= t_len) continue;
          const std::size_t wbase = (static_cast<std::size_t>(o) * cin) * k;
          for (int i = 0; i < cin; ++i) {
            const std::size_t wio = wbase + static_cast<std::size_t>(i) * k + j;
            xi->grad[static_cast<std::size_t>(s) * cin + i] +=
                g * static_cast<double>(wi->data[wio]);
            wi->grad[wio] += g * static_cast<double>(xi->data[static_cast<std::size_t>(s) * cin + i]);
          }
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Softmax family. axis=1 normalizes each row; 1-D tensors are one row.

namespace detail {
inline void softmax_dims(const Tensor& x, int axis, int& groups, int& width, int& gstride,
                         int& estride) {
  if (x.ndim() == 1) {
    groups = 1;
    width = x.dim(0);
    gstride = 0;
    estride = 1;
  } else if (x.ndim() == 2 && axis == 1) {
    groups = x.rows();
    width = x.cols();
    gstride = x.cols();
    estride = 1;
  } else if (x.ndim() == 2 && axis == 0) {
    groups = x.cols();
    width = x.rows();
    gstride = 1;
    estride = x.cols();
  } else {
    throw std::invalid_argument("softmax: unsupported shape/axis");
  }
}
}  // namespace detail

inline Tensor softmax(const Tensor& x, int axis = 1) {
  int groups, width, gs, es;
  detail::softmax_dims(x, axis, groups, width, gs, es);
  Tensor out = Tensor::zeros(x.shape());
  for (int g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int e = 0; e < width; ++e) mx = std::max(mx, static_cast<double>(x.vals()[g * gs + e * es]));
    double denom = 0.0;
    for (int e = 0; e < width; ++e)
      denom += std::exp(static_cast<double>(x.vals()[g * gs + e * es]) - mx);
    for (int e = 0; e < width; ++e)
      out.vals()[g * gs + e * es] =
          static_cast<float>(std::exp(static_cast<double>(x.vals()[g * gs + e * es]) - mx) / denom);
  }
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("softmax", {x}, out, [xi, oi, groups, width, gs, es] {
    for (int g = 0; g < groups; ++g) {
      double dot = 0.0;
      for (int e = 0; e < width; ++e)
        dot += oi->grad[g * gs + e * es] * static_cast<double>(oi->data[g * gs + e * es]);
      for (int e = 0; e < width; ++e) {
        const std::size_t idx = static_cast<std::size_t>(g * gs + e * es);
        xi->grad[idx] += static_cast<double>(oi->data[idx]) * (oi->grad[idx] - dot);
      }
    }
  });
}

inline Tensor log_softmax(const Tensor& x, int axis = 1) {
  int groups, width, gs, es;
  detail::softmax_dims(x, axis, groups, width, gs, es);
  Tensor out = Tensor::zeros(x.shape());
  for (int g = 0; g < groups; ++g) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int e = 0; e < width; ++e) mx = std::max(mx, static_cast<double>(x.vals()[g * gs + e * es]));
    double denom = 0.0;
    for (int e = 0; e < width; ++e)
      denom += std::exp(static_cast<double>(x.vals()[g * gs + e * es]) - mx);
    const double lse = mx + std::log(denom);
    for (int e = 0; e < width; ++e)
      out.vals()[g * gs + e * es] =
          static_cast<float>(static_cast<double>(x.vals()[g * gs + e * es]) - lse);
  }
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("log_softmax", {x}, out, [xi, oi, groups, width, gs, es] {
    for (int g = 0; g < groups; ++g) {
      double gsum = 0.0;
      for (int e = 0; e < width; ++e) gsum += oi->grad[g * gs + e * es];
      for (int e = 0; e < width; ++e) {
        const std::size_t idx = static_cast<std::size_t>(g * gs + e * es);
        xi->grad[idx] += oi->grad[idx] - std::exp(static_cast<double>(oi->data[idx])) * gsum;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions (64-bit accumulation)

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.vals()) acc += static_cast<double>(v);
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  out.impl()->scalar64 = acc;
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("sum", {a}, out, [ai, oi] {
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw std::invalid_argument("mean: empty tensor");
  double acc = 0.0;
  for (float v : a.vals()) acc += static_cast<double>(v);
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = Tensor::scalar(static_cast<float>(acc * inv));
  out.impl()->scalar64 = acc * inv;
  auto ai = a.impl(), oi = out.impl();
  return detail::make_op("mean", {a}, out, [ai, oi, inv] {
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[0] * inv;
  });
}

// Per-column mean of the k largest entries along the temporal (row) axis.
// Ties break toward the earlier row so the selection is deterministic.
inline Tensor topk_mean_cols(const Tensor& s, int k) {
  if (s.ndim() != 2) throw std::invalid_argument("topk_mean_cols: expects 2-D input");
  const int t_len = s.rows(), c_len = s.cols();
  if (k < 1) throw std::invalid_argument("topk_mean_cols: k must be >= 1");
  k = std::min(k, t_len);
  Tensor out = Tensor::zeros({c_len});
  auto picked = std::make_shared<std::vector<int>>(static_cast<std::size_t>(c_len) * k);
  std::vector<int> idx(static_cast<std::size_t>(t_len));
  for (int c = 0; c < c_len; ++c) {
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int x, int y) {
      if (s.at(x, c) != s.at(y, c)) return s.at(x, c) > s.at(y, c);
      return x < y;
    });
    double acc = 0.0;
    for (int j = 0; j < k; ++j) {
      acc += static_cast<double>(s.at(idx[j], c));
      (*picked)[static_cast<std::size_t>(c) * k + j] = idx[j];
    }
    out.at(c) = static_cast<float>(acc / k);
  }
  auto si = s.impl(), oi = out.impl();
  return detail::make_op("topk_mean_cols", {s}, out, [si, oi, picked, c_len, k] {
    for (int c = 0; c < c_len; ++c) {
      const double g = oi->grad[static_cast<std::size_t>(c)] / k;
      for (int j = 0; j < k; ++j) {
        const int t = (*picked)[static_cast<std::size_t>(c) * k + j];
        si->grad[static_cast<std::size_t>(t) * c_len + c] += g;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.rows() != b.rows())
    throw std::invalid_argument("concat_cols: row mismatch");
  const int t_len = a.rows(), ca = a.cols(), cb = b.cols();
  Tensor out = Tensor::zeros({t_len, ca + cb});
  for (int t = 0; t < t_len; ++t) {
    for (int i = 0; i < ca; ++i) out.at(t, i) = a.at(t, i);
    for (int i = 0; i < cb; ++i) out.at(t, ca + i) = b.at(t, i);
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("concat_cols", {a, b}, out, [ai, bi, oi, t_len, ca, cb] {
    for (int t = 0; t < t_len; ++t) {
      for (int i = 0; i < ca; ++i)
        ai->grad[static_cast<std::size_t>(t) * ca + i] +=
            oi->grad[static_cast<std::size_t>(t) * (ca + cb) + i];
      for (int i = 0; i < cb; ++i)
        bi->grad[static_cast<std::size_t>(t) * cb + i] +=
            oi->grad[static_cast<std::size_t>(t) * (ca + cb) + ca + i];
    }
  });
}

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("concat_rows: column mismatch");
  const int ra = a.rows(), rb = b.rows(), c = a.cols();
  Tensor out = Tensor::zeros({ra + rb, c});
  std::copy(a.vals().begin(), a.vals().end(), out.vals().begin());
  std::copy(b.vals().begin(), b.vals().end(), out.vals().begin() + a.numel());
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("concat_rows", {a, b}, out, [ai, bi, oi] {
    for (std::size_t i = 0; i < ai->grad.size(); ++i) ai->grad[i] += oi->grad[i];
    for (std::size_t i = 0; i < bi->grad.size(); ++i)
      bi->grad[i] += oi->grad[ai->grad.size() + i];
  });
}

inline Tensor slice_cols(const Tensor& x, int c0, int c1) {
  if (x.ndim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range");
  const int t_len = x.rows(), w = c1 - c0, cx = x.cols();
  Tensor out = Tensor::zeros({t_len, w});
  for (int t = 0; t < t_len; ++t)
    for (int i = 0; i < w; ++i) out.at(t, i) = x.at(t, c0 + i);
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("slice_cols", {x}, out, [xi, oi, t_len, w, cx, c0] {
    for (int t = 0; t < t_len; ++t)
      for (int i = 0; i < w; ++i)
        xi->grad[static_cast<std::size_t>(t) * cx + c0 + i] +=
            oi->grad[static_cast<std::size_t>(t) * w + i];
  });
}

inline Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (shape_numel(shape) != x.numel()) throw std::invalid_argument("reshape: numel mismatch");
  Tensor out = Tensor::from(std::move(shape), x.vals());
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("reshape", {x}, out, [xi, oi] {
    for (std::size_t i = 0; i < xi->grad.size(); ++i) xi->grad[i] += oi->grad[i];
  });
}

inline Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.ndim() != 2) throw std::invalid_argument("gather_rows: expects 2-D input");
  const int c = x.cols();
  Tensor out = Tensor::zeros({static_cast<int>(indices.size()), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const int r = indices[i];
    if (r < 0 || r >= x.rows()) throw std::invalid_argument("gather_rows: index out of range");
    for (int j = 0; j < c; ++j) out.at(static_cast<int>(i), j) = x.at(r, j);
  }
  auto xi = x.impl(), oi = out.impl();
  auto idx = std::make_shared<std::vector<int>>(indices);
  return detail::make_op("gather_rows", {x}, out, [xi, oi, idx, c] {
    for (std::size_t i = 0; i < idx->size(); ++i)
      for (int j = 0; j < c; ++j)
        xi->grad[static_cast<std::size_t>((*idx)[i]) * c + j] +=
            oi->grad[i * static_cast<std::size_t>(c) + j];
  });
}

// Each row of x repeated k consecutive times: (T x D) -> (T*k x D).
inline Tensor repeat_rows(const Tensor& x, int k) {
  if (x.ndim() != 2 || k < 1) throw std::invalid_argument("repeat_rows: bad arguments");
  const int t_len = x.rows(), d = x.cols();
  Tensor out = Tensor::zeros({t_len * k, d});
  for (int t = 0; t < t_len; ++t)
    for (int r = 0; r < k; ++r)
      for (int j = 0; j < d; ++j) out.at(t * k + r, j) = x.at(t, j);
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("repeat_rows", {x}, out, [xi, oi, t_len, d, k] {
    for (int t = 0; t < t_len; ++t)
      for (int r = 0; r < k; ++r)
        for (int j = 0; j < d; ++j)
          xi->grad[static_cast<std::size_t>(t) * d + j] +=
              oi->grad[static_cast<std::size_t>(t * k + r) * d + j];
  });
}

// Mean over groups of k consecutive rows: (T*k x D) -> (T x D).
inline Tensor group_mean_rows(const Tensor& x, int k) {
  if (x.ndim() != 2 || k < 1 || x.rows() % k != 0)
    throw std::invalid_argument("group_mean_rows: rows not divisible by k");
  const int t_len = x.rows() / k, d = x.cols();
  Tensor out = Tensor::zeros({t_len, d});
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < d; ++j) {
      double acc = 0.0;
      for (int r = 0; r < k; ++r) acc += static_cast<double>(x.at(t * k + r, j));
      out.at(t, j) = static_cast<float>(acc / k);
    }
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("group_mean_rows", {x}, out, [xi, oi, t_len, d, k] {
    for (int t = 0; t < t_len; ++t)
      for (int j = 0; j < d; ++j) {
        const double g = oi->grad[static_cast<std::size_t>(t) * d + j] / k;
        for (int r = 0; r < k; ++r) xi->grad[static_cast<std::size_t>(t * k + r) * d + j] += g;
      }
  });
}

// ---------------------------------------------------------------------------
// Broadcast helpers

// Scales row t of x by a[t]. a is {T} or {T,1}.
inline Tensor scale_rows(const Tensor& x, const Tensor& a) {
  if (x.ndim() != 2 || static_cast<int>(a.numel()) != x.rows())
    throw std::invalid_argument("scale_rows: shape mismatch");
  const int t_len = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < c; ++j) out.at(t, j) = x.at(t, j) * a.vals()[static_cast<std::size_t>(t)];
  auto xi = x.impl(), ai = a.impl(), oi = out.impl();
  return detail::make_op("scale_rows", {x, a}, out, [xi, ai, oi, t_len, c] {
    for (int t = 0; t < t_len; ++t) {
      double arow = 0.0;
      for (int j = 0; j < c; ++j) {
        const std::size_t idx = static_cast<std::size_t>(t) * c + j;
        xi->grad[idx] += oi->grad[idx] * static_cast<double>(ai->data[static_cast<std::size_t>(t)]);
        arow += oi->grad[idx] * static_cast<double>(xi->data[idx]);
      }
      ai->grad[static_cast<std::size_t>(t)] += arow;
    }
  });
}

// Adds v[c] to every row of x. v is {C}.
inline Tensor add_rowvec(const Tensor& x, const Tensor& v) {
  if (x.ndim() != 2 || v.ndim() != 1 || v.dim(0) != x.cols())
    throw std::invalid_argument("add_rowvec: shape mismatch");
  const int t_len = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < c; ++j) out.at(t, j) = x.at(t, j) + v.at(j);
  auto xi = x.impl(), vi = v.impl(), oi = out.impl();
  return detail::make_op("add_rowvec", {x, v}, out, [xi, vi, oi, t_len, c] {
    for (int t = 0; t < t_len; ++t)
      for (int j = 0; j < c; ++j) {
        const std::size_t idx = static_cast<std::size_t>(t) * c + j;
        xi->grad[idx] += oi->grad[idx];
        vi->grad[static_cast<std::size_t>(j)] += oi->grad[idx];
      }
  });
}

// x / s with a scalar tensor s (shape {1}).
inline Tensor divide_by_scalar(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw std::invalid_argument("divide_by_scalar: divisor must be scalar");
  const double sv = s.item();
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i)
    out.vals()[i] = static_cast<float>(static_cast<double>(x.vals()[i]) / sv);
  auto xi = x.impl(), si = s.impl(), oi = out.impl();
  return detail::make_op("divide_by_scalar", {x, s}, out, [xi, si, oi] {
    const double sv2 = si->data[0];
    double sacc = 0.0;
    for (std::size_t i = 0; i < oi->grad.size(); ++i) {
      xi->grad[i] += oi->grad[i] / sv2;
      sacc += oi->grad[i] * static_cast<double>(oi->data[i]);
    }
    si->grad[0] -= sacc / sv2;
  });
}

// ---------------------------------------------------------------------------
// Cosine similarity (norms clamped at eps_norm to avoid division by zero)

namespace detail {
inline double row_norm(const std::vector<float>& d, std::size_t base, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc += static_cast<double>(d[base + static_cast<std::size_t>(i)]) *
           static_cast<double>(d[base + static_cast<std::size_t>(i)]);
  return std::sqrt(acc);
}
}  // namespace detail

// Row-paired cosine similarity: a, b are N x D, output {N}.
inline Tensor cosine_pairs(const Tensor& a, const Tensor& b, double eps_norm = 1e-8) {
  detail::require_same_shape(a, b, "cosine_pairs");
  if (a.ndim() != 2) throw std::invalid_argument("cosine_pairs: expects 2-D inputs");
  const int n = a.rows(), d = a.cols();
  Tensor out = Tensor::zeros({n});
  for (int i = 0; i < n; ++i) {
    const std::size_t base = static_cast<std::size_t>(i) * d;
    const double na = std::max(detail::row_norm(a.vals(), base, d), eps_norm);
    const double nb = std::max(detail::row_norm(b.vals(), base, d), eps_norm);
    double dot = 0.0;
    for (int j = 0; j < d; ++j)
      dot += static_cast<double>(a.vals()[base + j]) * static_cast<double>(b.vals()[base + j]);
    out.at(i) = static_cast<float>(dot / (na * nb));
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("cosine_pairs", {a, b}, out, [ai, bi, oi, n, d, eps_norm] {
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * d;
      const double ra = detail::row_norm(ai->data, base, d);
      const double rb = detail::row_norm(bi->data, base, d);
      const double na = std::max(ra, eps_norm), nb = std::max(rb, eps_norm);
      const double u = oi->data[static_cast<std::size_t>(i)];
      const double g = oi->grad[static_cast<std::size_t>(i)];
      for (int j = 0; j < d; ++j) {
        const double av = ai->data[base + j], bv = bi->data[base + j];
        double da = bv / (na * nb);
        double db = av / (na * nb);
        if (ra > eps_norm) da -= u * av / (na * na);
        if (rb > eps_norm) db -= u * bv / (nb * nb);
        ai->grad[base + j] += g * da;
        bi->grad[base + j] += g * db;
      }
    }
  });
}

// All-pairs cosine similarity: a is N x D, b is M x D, output N x M.
inline Tensor cosine_matrix(const Tensor& a, const Tensor& b, double eps_norm = 1e-8) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.cols())
    throw std::invalid_argument("cosine_matrix: shape mismatch");
  const int n = a.rows(), m = b.rows(), d = a.cols();
  std::vector<double> na(static_cast<std::size_t>(n)), nb(static_cast<std::size_t>(m));
  for (int i = 0; i < n; ++i)
    na[i] = std::max(detail::row_norm(a.vals(), static_cast<std::size_t>(i) * d, d), eps_norm);
  for (int j = 0; j < m; ++j)
    nb[j] = std::max(detail::row_norm(b.vals(), static_cast<std::size_t>(j) * d, d), eps_norm);
  Tensor out = Tensor::zeros({n, m});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      double dot = 0.0;
      for (int p = 0; p < d; ++p)
        dot += static_cast<double>(a.at(i, p)) * static_cast<double>(b.at(j, p));
      out.at(i, j) = static_cast<float>(dot / (na[i] * nb[j]));
    }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  return detail::make_op("cosine_matrix", {a, b}, out, [ai, bi, oi, n, m, d, eps_norm] {
    for (int i = 0; i < n; ++i) {
      const std::size_t abase = static_cast<std::size_t>(i) * d;
      const double ra = detail::row_norm(ai->data, abase, d);
      const double nai = std::max(ra, eps_norm);
      for (int j = 0; j < m; ++j) {
        const std::size_t bbase = static_cast<std::size_t>(j) * d;
        const double rb = detail::row_norm(bi->data, bbase, d);
        const double nbj = std::max(rb, eps_norm);
        const double u = oi->data[static_cast<std::size_t>(i) * m + j];
        const double g = oi->grad[static_cast<std::size_t>(i) * m + j];
        if (g == 0.0) continue;
        for (int p = 0; p < d; ++p) {
          const double av = ai->data[abase + p], bv = bi->data[bbase + p];
          double da = bv / (nai * nbj);
          double db = av / (nai * nbj);
          if (ra > eps_norm) da -= u * av / (nai * nai);
          if (rb > eps_norm) db -= u * bv / (nbj * nbj);
          ai->grad[abase + p] += g * da;
          bi->grad[bbase + p] += g * db;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling). The mask is drawn from rng and treated as a
// constant on the tape.

inline Tensor dropout(const Tensor& x, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw std::invalid_argument("dropout: rate must be in [0,1)");
  if (rate == 0.0) return mul_scalar(x, 1.0);
  const double keep = 1.0 - rate;
  auto mask = std::make_shared<std::vector<float>>(x.numel());
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    (*mask)[i] = rng.uniform() < rate ? 0.0f : static_cast<float>(1.0 / keep);
    out.vals()[i] = x.vals()[i] * (*mask)[i];
  }
  auto xi = x.impl(), oi = out.impl();
  return detail::make_op("dropout", {x}, out, [xi, oi, mask] {
    for (std::size_t i = 0; i < oi->grad.size(); ++i)
      xi->grad[i] += oi->grad[i] * static_cast<double>((*mask)[i]);
  });
}

// ---------------------------------------------------------------------------
// Cross entropy against a constant target distribution, via log-softmax of
// the logits. Both are 1-D of equal length.

inline Tensor cross_entropy(const std::vector<float>& target, const Tensor& logits) {
  if (logits.ndim() != 1 || target.size() != logits.numel())
    throw std::invalid_argument("cross_entropy: target/logits length mismatch");
  Tensor y = Tensor::from({static_cast<int>(target.size())}, target);
  return neg(sum(mul(y, log_softmax(logits))));
}

}  // namespace ptal
