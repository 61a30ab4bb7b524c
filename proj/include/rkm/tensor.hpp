#pragma once

// Dense 64-bit tensors with a dynamic reverse-mode tape. Records on forward
// while a TapeScope is active; Tape::backward replays nodes in reverse append
// order, so operands always see their consumers' gradients first.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "rkm/common.hpp"

namespace rkm {

using Shape = std::vector<std::size_t>;

namespace detail {

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), 0.0, requires_grad);
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    return Tensor(std::move(shape), value, requires_grad);
  }

  static Tensor scalar(double value) { return Tensor(Shape{1}, value, false); }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    Tensor t;
    t.st_ = std::make_shared<detail::Storage>();
    if (detail::numel(shape) != data.size())
      throw std::invalid_argument("Tensor::from_data: shape " + detail::shape_str(shape) +
                                  " does not match " + std::to_string(data.size()) + " values");
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(data);
    t.st_->requires_grad = requires_grad;
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (auto& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
  }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return st_->shape; }
  std::size_t rank() const { return st_->shape.size(); }
  std::size_t size() const { return st_->data.size(); }
  std::size_t dim(std::size_t i) const { return st_->shape.at(i); }

  std::vector<double>& data() { return st_->data; }
  const std::vector<double>& data() const { return st_->data; }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool rg) {
    st_->requires_grad = rg;
    if (rg) st_->ensure_grad();
    return *this;
  }

  std::vector<double>& grad() {
    st_->ensure_grad();
    return st_->grad;
  }
  const std::vector<double>& grad() const {
    st_->ensure_grad();
    return st_->grad;
  }

  void zero_grad() {
    if (!st_->grad.empty()) std::fill(st_->grad.begin(), st_->grad.end(), 0.0);
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: size != 1");
    return st_->data[0];
  }

  double& at(std::initializer_list<std::size_t> idx) {
    return st_->data[flat_index(idx)];
  }
  double at(std::initializer_list<std::size_t> idx) const {
    return st_->data[flat_index(idx)];
  }

  std::shared_ptr<detail::Storage> storage() const { return st_; }

 private:
  Tensor(Shape shape, double fill, bool requires_grad) {
    st_ = std::make_shared<detail::Storage>();
    st_->shape = std::move(shape);
    st_->data.assign(detail::numel(st_->shape), fill);
    st_->requires_grad = requires_grad;
  }

  std::size_t flat_index(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw std::invalid_argument("Tensor::at: rank mismatch");
    std::size_t flat = 0;
    std::size_t d = 0;
    for (auto i : idx) {
      if (i >= st_->shape[d]) throw std::out_of_range("Tensor::at: index out of range");
      flat = flat * st_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  std::shared_ptr<detail::Storage> st_;
};

// ---------------------------------------------------------------------------
// Tape

class Tape;

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* tape = nullptr;
  return tape;
}
}  // namespace detail

class Tape {
 public:
  // Seeds d(loss)/d(loss) = 1, then replays all recorded nodes in reverse.
  // Node outputs get fresh grad buffers per call; leaf grads accumulate, so
  // repeated calls without zero_grad add up.
  void backward(const Tensor& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
    for (auto& st : outputs_) {
      st->ensure_grad();
      std::fill(st->grad.begin(), st->grad.end(), 0.0);
    }
    if (loss.requires_grad()) {
      auto st = loss.storage();
      st->ensure_grad();
      st->grad[0] = 1.0;
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  std::size_t node_count() const { return nodes_.size(); }
  void clear() {
    nodes_.clear();
    outputs_.clear();
  }

  void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  void note_output(std::shared_ptr<detail::Storage> st) { outputs_.push_back(std::move(st)); }

 private:
  std::vector<std::function<void()>> nodes_;
  std::vector<std::shared_ptr<detail::Storage>> outputs_;
};

class TapeScope {
 public:
  explicit TapeScope(Tape& tape) : prev_(detail::active_tape()) {
    detail::active_tape() = &tape;
  }
  ~TapeScope() { detail::active_tape() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

namespace detail {

inline bool tracking(std::initializer_list<const Tensor*> inputs) {
  if (!active_tape()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

// Marks `out` as requiring grad and appends the backward closure.
template <class F>
void record(Tensor& out, F&& backward_fn) {
  out.set_requires_grad(true);
  active_tape()->note_output(out.storage());
  active_tape()->push(std::forward<F>(backward_fn));
}

// Right-aligned numpy broadcast of two shapes.
inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw std::invalid_argument("broadcast: incompatible shapes " + shape_str(a) + " vs " +
                                  shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Walks the broadcast output linearly, producing flat offsets into both
// operands. f(out_index, a_index, b_index).
template <class F>
void broadcast_loop(const Shape& os, const Shape& as, const Shape& bs, F&& f) {
  const std::size_t rank = os.size();
  const std::size_t n = numel(os);
  if (as == bs) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  std::vector<std::size_t> sa(rank, 0), sb(rank, 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = as.size(); i-- > 0;) {
      const std::size_t d = i + (rank - as.size());
      sa[d] = as[i] == 1 ? 0 : stride;
      stride *= as[i];
    }
    stride = 1;
    for (std::size_t i = bs.size(); i-- > 0;) {
      const std::size_t d = i + (rank - bs.size());
      sb[d] = bs[i] == 1 ? 0 : stride;
      stride *= bs[i];
    }
  }
  std::vector<std::size_t> counter(rank, 0);
  std::size_t ai = 0, bi = 0;
  for (std::size_t oi = 0; oi < n; ++oi) {
    f(oi, ai, bi);
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      ai += sa[d];
      bi += sb[d];
      if (counter[d] < os[d]) break;
      counter[d] = 0;
      ai -= sa[d] * os[d];
      bi -= sb[d] * os[d];
    }
  }
}

using ERowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<ERowMat>;
using ECMap = Eigen::Map<const ERowMat>;

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise with broadcast

enum class EwOp { add, sub, mul, div };

inline Tensor elementwise(const Tensor& a, const Tensor& b, EwOp op) {
  const Shape os = detail::broadcast_shape(a.shape(), b.shape());
  Tensor out = Tensor::zeros(os);
  auto& od = out.data();
  const auto& ad = a.data();
  const auto& bd = b.data();
  switch (op) {
    case EwOp::add:
      detail::broadcast_loop(os, a.shape(), b.shape(),
                             [&](std::size_t o, std::size_t i, std::size_t j) { od[o] = ad[i] + bd[j]; });
      break;
    case EwOp::sub:
      detail::broadcast_loop(os, a.shape(), b.shape(),
                             [&](std::size_t o, std::size_t i, std::size_t j) { od[o] = ad[i] - bd[j]; });
      break;
    case EwOp::mul:
      detail::broadcast_loop(os, a.shape(), b.shape(),
                             [&](std::size_t o, std::size_t i, std::size_t j) { od[o] = ad[i] * bd[j]; });
      break;
    case EwOp::div:
      detail::broadcast_loop(os, a.shape(), b.shape(),
                             [&](std::size_t o, std::size_t i, std::size_t j) { od[o] = ad[i] / bd[j]; });
      break;
  }
  if (detail::tracking({&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    auto ot = out.storage();
    Shape oshape = os;
    detail::record(out, [as, bs, ot, oshape, op]() {
      const auto& g = ot->grad;
      const bool ga = as->requires_grad;
      const bool gb = bs->requires_grad;
      if (ga) as->ensure_grad();
      if (gb) bs->ensure_grad();
      detail::broadcast_loop(oshape, as->shape, bs->shape,
                             [&](std::size_t o, std::size_t i, std::size_t j) {
        switch (op) {
          case EwOp::add:
            if (ga) as->grad[i] += g[o];
            if (gb) bs->grad[j] += g[o];
            break;
          case EwOp::sub:
            if (ga) as->grad[i] += g[o];
            if (gb) bs->grad[j] -= g[o];
            break;
          case EwOp::mul:
            if (ga) as->grad[i] += g[o] * bs->data[j];
            if (gb) bs->grad[j] += g[o] * as->data[i];
            break;
          case EwOp::div:
            if (ga) as->grad[i] += g[o] / bs->data[j];
            if (gb) bs->grad[j] -= g[o] * as->data[i] / (bs->data[j] * bs->data[j]);
            break;
        }
      });
    });
  }
  return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::add); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::sub); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::mul); }
inline Tensor divide(const Tensor& a, const Tensor& b) { return elementwise(a, b, EwOp::div); }

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }

// ---------------------------------------------------------------------------
// matmul

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 operands, got " +
                                detail::shape_str(a.shape()) + " and " +
                                detail::shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree: " +
                                detail::shape_str(a.shape()) + " x " +
                                detail::shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  {
    detail::ECMap A(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    detail::ECMap B(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    detail::EMap C(out.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    C.noalias() = A * B;
  }
  if (detail::tracking({&a, &b})) {
    auto as = a.storage();
    auto bs = b.storage();
    auto ot = out.storage();
    detail::record(out, [as, bs, ot, m, k, n]() {
      detail::ECMap G(ot->grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
      if (as->requires_grad) {
        as->ensure_grad();
        detail::ECMap B(bs->data.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        detail::EMap dA(as->grad.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        dA.noalias() += G * B.transpose();
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        detail::ECMap A(as->data.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
        detail::EMap dB(bs->grad.data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Activations

enum class Activation { relu, silu, sigmoid };

inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  const std::size_t n = x.size();
  switch (kind) {
    case Activation::relu:
      for (std::size_t i = 0; i < n; ++i) od[i] = xd[i] > 0.0 ? xd[i] : 0.0;
      break;
    case Activation::silu:
      for (std::size_t i = 0; i < n; ++i) od[i] = xd[i] / (1.0 + std::exp(-xd[i]));
      break;
    case Activation::sigmoid:
      for (std::size_t i = 0; i < n; ++i) od[i] = 1.0 / (1.0 + std::exp(-xd[i]));
      break;
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, kind, n]() {
      xs->ensure_grad();
      const auto& g = ot->grad;
      for (std::size_t i = 0; i < n; ++i) {
        double d = 0.0;
        const double v = xs->data[i];
        switch (kind) {
          case Activation::relu:
            d = v > 0.0 ? 1.0 : 0.0;
            break;
          case Activation::silu: {
            const double s = 1.0 / (1.0 + std::exp(-v));
            d = s * (1.0 + v * (1.0 - s));
            break;
          }
          case Activation::sigmoid: {
            const double s = ot->data[i];
            d = s * (1.0 - s);
            break;
          }
        }
        xs->grad[i] += g[i] * d;
      }
    });
  }
  return out;
}

inline Tensor relu(const Tensor& x) { return activation(x, Activation::relu); }
inline Tensor silu(const Tensor& x) { return activation(x, Activation::silu); }
inline Tensor sigmoid(const Tensor& x) { return activation(x, Activation::sigmoid); }

inline double silu_scalar(double x) { return x / (1.0 + std::exp(-x)); }

// ---------------------------------------------------------------------------
// softmax over the last dimension, max-subtracted

inline Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() == 0 || x.shape().back() == 0)
    throw std::invalid_argument("softmax_lastdim: empty last dimension");
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * cols;
    double* orow = od.data() + r * cols;
    double mx = row[0];
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      orow[c] = std::exp(row[c] - mx);
      sum += orow[c];
    }
    for (std::size_t c = 0; c < cols; ++c) orow[c] /= sum;
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, rows, cols]() {
      xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = ot->data.data() + r * cols;
        const double* g = ot->grad.data() + r * cols;
        double dot = 0.0;
        for (std::size_t c = 0; c < cols; ++c) dot += p[c] * g[c];
        double* dx = xs->grad.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) dx[c] += p[c] * (g[c] - dot);
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// layer norm over the last dimension

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  const std::size_t cols = x.shape().back();
  if (gain.size() != cols || bias.size() != cols)
    throw std::invalid_argument("layer_norm: gain/bias must match the last dimension");
  const std::size_t rows = x.size() / cols;
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_std(rows);
  const auto& xd = x.data();
  const auto& gd = gain.data();
  const auto& bd = bias.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += row[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double d = row[c] - mean;
      var += d * d;
    }
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double xh = (row[c] - mean) * is;
      xhat[r * cols + c] = xh;
      od[r * cols + c] = xh * gd[c] + bd[c];
    }
  }
  if (detail::tracking({&x, &gain, &bias})) {
    auto xs = x.storage();
    auto gs = gain.storage();
    auto bs = bias.storage();
    auto ot = out.storage();
    detail::record(out, [xs, gs, bs, ot, rows, cols,
                         xhat = std::move(xhat), inv_std = std::move(inv_std)]() {
      const auto& g = ot->grad;
      if (gs->requires_grad) gs->ensure_grad();
      if (bs->requires_grad) bs->ensure_grad();
      if (xs->requires_grad) xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const double* gy = g.data() + r * cols;
        const double* xh = xhat.data() + r * cols;
        if (gs->requires_grad || bs->requires_grad) {
          for (std::size_t c = 0; c < cols; ++c) {
            if (gs->requires_grad) gs->grad[c] += gy[c] * xh[c];
            if (bs->requires_grad) bs->grad[c] += gy[c];
          }
        }
        if (xs->requires_grad) {
          double m1 = 0.0, m2 = 0.0;  // mean(dy*g), mean(dy*g*xhat)
          for (std::size_t c = 0; c < cols; ++c) {
            const double dyg = gy[c] * gs->data[c];
            m1 += dyg;
            m2 += dyg * xh[c];
          }
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          for (std::size_t c = 0; c < cols; ++c) {
            const double dyg = gy[c] * gs->data[c];
            xs->grad[r * cols + c] += inv_std[r] * (dyg - m1 - xh[c] * m2);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (detail::numel(shape) != x.size())
    throw std::invalid_argument("reshape: element count mismatch " +
                                detail::shape_str(x.shape()) + " -> " + detail::shape_str(shape));
  Tensor out = Tensor::from_data(std::move(shape), x.data());
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot]() {
      xs->ensure_grad();
      for (std::size_t i = 0; i < xs->grad.size(); ++i) xs->grad[i] += ot->grad[i];
    });
  }
  return out;
}

inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t rank = x.rank();
  if (axes.size() != rank) throw std::invalid_argument("permute: axes rank mismatch");
  Shape oshape(rank);
  for (std::size_t i = 0; i < rank; ++i) oshape[i] = x.dim(axes[i]);
  // strides of input, then reordered into output-axis order
  std::vector<std::size_t> istrides(rank, 1);
  for (std::size_t i = rank - 1; i-- > 0;) istrides[i] = istrides[i + 1] * x.dim(i + 1);
  std::vector<std::size_t> ostrides_in(rank);
  for (std::size_t i = 0; i < rank; ++i) ostrides_in[i] = istrides[axes[i]];

  Tensor out = Tensor::zeros(oshape);
  auto& od = out.data();
  const auto& xd = x.data();
  std::vector<std::size_t> counter(rank, 0);
  std::size_t xi = 0;
  const std::size_t n = x.size();
  for (std::size_t oi = 0; oi < n; ++oi) {
    od[oi] = xd[xi];
    for (std::size_t d = rank; d-- > 0;) {
      ++counter[d];
      xi += ostrides_in[d];
      if (counter[d] < oshape[d]) break;
      counter[d] = 0;
      xi -= ostrides_in[d] * oshape[d];
    }
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, oshape, ostrides_in, rank, n]() {
      xs->ensure_grad();
      std::vector<std::size_t> c(rank, 0);
      std::size_t xi2 = 0;
      for (std::size_t oi = 0; oi < n; ++oi) {
        xs->grad[xi2] += ot->grad[oi];
        for (std::size_t d = rank; d-- > 0;) {
          ++c[d];
          xi2 += ostrides_in[d];
          if (c[d] < oshape[d]) break;
          c[d] = 0;
          xi2 -= ostrides_in[d] * oshape[d];
        }
      }
    });
  }
  return out;
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw std::invalid_argument("transpose2d: expects rank 2");
  return permute(x, {1, 0});
}

inline Tensor slice_cols(const Tensor& x, std::size_t c0, std::size_t len) {
  if (x.rank() != 2) throw std::invalid_argument("slice_cols: expects rank 2");
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (c0 + len > cols) throw std::out_of_range("slice_cols: range out of bounds");
  Tensor out = Tensor::zeros({rows, len});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < len; ++c) od[r * len + c] = xd[r * cols + c0 + c];
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, rows, cols, c0, len]() {
      xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < len; ++c)
          xs->grad[r * cols + c0 + c] += ot->grad[r * len + c];
    });
  }
  return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].dim(0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != rows)
      throw std::invalid_argument("concat_cols: row mismatch");
    total += p.dim(1);
  }
  Tensor out = Tensor::zeros({rows, total});
  auto& od = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.dim(1);
    const auto& pd = p.data();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) od[r * total + off + c] = pd[r * w + c];
    off += w;
  }
  bool track = false;
  if (detail::active_tape())
    for (const auto& p : parts)
      if (p.requires_grad()) track = true;
  if (track) {
    std::vector<std::shared_ptr<detail::Storage>> srcs;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
      srcs.push_back(p.storage());
      widths.push_back(p.dim(1));
    }
    auto ot = out.storage();
    detail::record(out, [srcs, widths, ot, rows, total]() {
      std::size_t off2 = 0;
      for (std::size_t k = 0; k < srcs.size(); ++k) {
        const std::size_t w = widths[k];
        if (srcs[k]->requires_grad) {
          srcs[k]->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < w; ++c)
              srcs[k]->grad[r * w + c] += ot->grad[r * total + off2 + c];
        }
        off2 += w;
      }
    });
  }
  return out;
}

// Concatenates along axis 0; trailing dimensions must agree.
inline Tensor concat_axis0(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_axis0: no inputs");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t dim0 = 0;
  for (const auto& p : parts) {
    Shape t(p.shape().begin() + 1, p.shape().end());
    if (t != tail) throw std::invalid_argument("concat_axis0: trailing shape mismatch");
    dim0 += p.dim(0);
  }
  Shape oshape;
  oshape.push_back(dim0);
  oshape.insert(oshape.end(), tail.begin(), tail.end());
  Tensor out = Tensor::zeros(oshape);
  auto& od = out.data();
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), od.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.size();
  }
  bool track = false;
  if (detail::active_tape())
    for (const auto& p : parts)
      if (p.requires_grad()) track = true;
  if (track) {
    std::vector<std::shared_ptr<detail::Storage>> srcs;
    for (const auto& p : parts) srcs.push_back(p.storage());
    auto ot = out.storage();
    detail::record(out, [srcs, ot]() {
      std::size_t off2 = 0;
      for (auto& s : srcs) {
        if (s->requires_grad) {
          s->ensure_grad();
          for (std::size_t i = 0; i < s->data.size(); ++i) s->grad[i] += ot->grad[off2 + i];
        }
        off2 += s->data.size();
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Row / element gather-scatter (MoE dispatch)

inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& idx) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: expects rank 2");
  const std::size_t cols = x.dim(1);
  Tensor out = Tensor::zeros({idx.size(), cols});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= x.dim(0)) throw std::out_of_range("gather_rows: row index out of range");
    std::copy_n(xd.data() + idx[r] * cols, cols, od.data() + r * cols);
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, idx, cols]() {
      xs->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c)
          xs->grad[idx[r] * cols + c] += ot->grad[r * cols + c];
    });
  }
  return out;
}

// Rows of x summed into an n-row output at positions idx (duplicates accumulate).
inline Tensor scatter_rows_sum(const Tensor& x, const std::vector<std::size_t>& idx,
                               std::size_t n_rows) {
  if (x.rank() != 2 || x.dim(0) != idx.size())
    throw std::invalid_argument("scatter_rows_sum: shape/index mismatch");
  const std::size_t cols = x.dim(1);
  Tensor out = Tensor::zeros({n_rows, cols});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= n_rows) throw std::out_of_range("scatter_rows_sum: row index out of range");
    for (std::size_t c = 0; c < cols; ++c) od[idx[r] * cols + c] += xd[r * cols + c];
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, idx, cols]() {
      xs->ensure_grad();
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < cols; ++c)
          xs->grad[r * cols + c] += ot->grad[idx[r] * cols + c];
    });
  }
  return out;
}

inline Tensor gather_elems(const Tensor& x, const std::vector<std::size_t>& flat_idx) {
  Tensor out = Tensor::zeros({flat_idx.size()});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < flat_idx.size(); ++i) {
    if (flat_idx[i] >= x.size()) throw std::out_of_range("gather_elems: index out of range");
    od[i] = xd[flat_idx[i]];
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, flat_idx]() {
      xs->ensure_grad();
      for (std::size_t i = 0; i < flat_idx.size(); ++i)
        xs->grad[flat_idx[i]] += ot->grad[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution via im2col + matmul

inline std::size_t conv_out_size(std::size_t in, std::size_t k, std::size_t stride,
                                 std::size_t pad) {
  const std::ptrdiff_t v =
      (static_cast<std::ptrdiff_t>(in) + 2 * static_cast<std::ptrdiff_t>(pad) -
       static_cast<std::ptrdiff_t>(k)) /
          static_cast<std::ptrdiff_t>(stride) +
      1;
  if (v <= 0) throw std::invalid_argument("conv2d: non-positive output size");
  return static_cast<std::size_t>(v);
}

// x: [C,H,W] -> [C*k*k, Ho*Wo]; zero padding outside the input.
inline Tensor im2col(const Tensor& x, std::size_t k, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3) throw std::invalid_argument("im2col: expects [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = conv_out_size(H, k, stride, pad);
  const std::size_t Wo = conv_out_size(W, k, stride, pad);
  const std::size_t L = Ho * Wo;
  Tensor out = Tensor::zeros({C * k * k, L});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const std::size_t row = (c * k + ky) * k + kx;
        for (std::size_t oy = 0; oy < Ho; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                    static_cast<std::ptrdiff_t>(pad);
          for (std::size_t ox = 0; ox < Wo; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                      static_cast<std::ptrdiff_t>(pad);
            double v = 0.0;
            if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(H) && ix >= 0 &&
                ix < static_cast<std::ptrdiff_t>(W))
              v = xd[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
            od[row * L + oy * Wo + ox] = v;
          }
        }
      }
    }
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, C, H, W, Ho, Wo, L, k, stride, pad]() {
      xs->ensure_grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < k; ++ky)
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::size_t row = (c * k + ky) * k + kx;
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                          static_cast<std::ptrdiff_t>(pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(W)) continue;
                xs->grad[(c * H + static_cast<std::size_t>(iy)) * W +
                         static_cast<std::size_t>(ix)] += ot->grad[row * L + oy * Wo + ox];
              }
            }
          }
    });
  }
  return out;
}

// x: [C,H,W], w: [O,C,k,k] -> [O,Ho,Wo]. Backward is inherited from the
// im2col scatter and the matmul rules.
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  if (x.rank() != 3 || w.rank() != 4)
    throw std::invalid_argument("conv2d: expects x=[C,H,W], w=[O,C,k,k]");
  const std::size_t C = x.dim(0);
  const std::size_t O = w.dim(0), Cw = w.dim(1), k = w.dim(2);
  if (w.dim(3) != k) throw std::invalid_argument("conv2d: kernel must be square");
  if (Cw != C) throw std::invalid_argument("conv2d: channel mismatch");
  const std::size_t Ho = conv_out_size(x.dim(1), k, stride, pad);
  const std::size_t Wo = conv_out_size(x.dim(2), k, stride, pad);
  Tensor cols = im2col(x, k, stride, pad);
  Tensor wmat = reshape(w, {O, C * k * k});
  Tensor out2d = matmul(wmat, cols);
  return reshape(out2d, {O, Ho, Wo});
}

// ---------------------------------------------------------------------------
// Nearest-neighbour 2x upsample

inline Tensor upsample_nearest2x(const Tensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("upsample_nearest2x: expects [C,H,W]");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out = Tensor::zeros({C, 2 * H, 2 * W});
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x0 = 0; x0 < W; ++x0) {
        const double v = xd[(c * H + y) * W + x0];
        const std::size_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * x0;
        od[base] = v;
        od[base + 1] = v;
        od[base + 2 * W] = v;
        od[base + 2 * W + 1] = v;
      }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, C, H, W]() {
      xs->ensure_grad();
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t y = 0; y < H; ++y)
          for (std::size_t x0 = 0; x0 < W; ++x0) {
            const std::size_t base = (c * 2 * H + 2 * y) * 2 * W + 2 * x0;
            xs->grad[(c * H + y) * W + x0] += ot->grad[base] + ot->grad[base + 1] +
                                              ot->grad[base + 2 * W] + ot->grad[base + 2 * W + 1];
          }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// clamp and reductions

// Subgradient convention: gradient passes where lo <= x <= hi.
inline Tensor clamp(const Tensor& x, double lo, double hi) {
  Tensor out = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t i = 0; i < x.size(); ++i) od[i] = std::min(hi, std::max(lo, xd[i]));
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, lo, hi]() {
      xs->ensure_grad();
      for (std::size_t i = 0; i < xs->data.size(); ++i)
        if (xs->data[i] >= lo && xs->data[i] <= hi) xs->grad[i] += ot->grad[i];
    });
  }
  return out;
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot]() {
      xs->ensure_grad();
      const double g = ot->grad[0];
      for (auto& v : xs->grad) v += g;
    });
  }
  return out;
}

inline Tensor mean_all(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s * inv);
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, inv]() {
      xs->ensure_grad();
      const double g = ot->grad[0] * inv;
      for (auto& v : xs->grad) v += g;
    });
  }
  return out;
}

// [..., n] -> [..., 1]
inline Tensor sum_lastdim(const Tensor& x) {
  const std::size_t cols = x.shape().back();
  const std::size_t rows = x.size() / cols;
  Shape oshape = x.shape();
  oshape.back() = 1;
  Tensor out = Tensor::zeros(oshape);
  const auto& xd = x.data();
  auto& od = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < cols; ++c) s += xd[r * cols + c];
    od[r] = s;
  }
  if (detail::tracking({&x})) {
    auto xs = x.storage();
    auto ot = out.storage();
    detail::record(out, [xs, ot, rows, cols]() {
      xs->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) xs->grad[r * cols + c] += ot->grad[r];
    });
  }
  return out;
}

inline void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

inline bool all_finite(const Tensor& t) {
  for (double v : t.data())
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, AdamConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].size(), 0.0);
      v_[i].assign(params_[i].size(), 0.0);
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].data();
      const auto& g = params_[i].grad();
      if (g.size() != p.size()) throw std::runtime_error("Adam::step: gradient shape mismatch");
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        p[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t step_count() const { return t_; }
  double learning_rate() const { return cfg_.lr; }
  void set_learning_rate(double lr) { cfg_.lr = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  AdamConfig cfg_;
  std::int64_t t_ = 0;
};

}  // namespace rkm
