// Copyright 2026 The edlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "edlab/numerics.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>

namespace edlab {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

std::atomic<std::uint64_t> next_node_id{1};
thread_local Tape* current_tape = nullptr;

ConstMap as_matrix(const Array& a) {
  return ConstMap(a.data(), static_cast<Eigen::Index>(a.rows()),
                  static_cast<Eigen::Index>(a.cols()));
}

MutMap as_matrix(Array& a) {
  return MutMap(a.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(a.cols()));
}

void require_same_shape(const char* op, const Array& a, const Array& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

void require_rank2(const char* op, const Array& a) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_string(a.shape()));
  }
}

detail::Node& input(detail::Node& out, std::size_t i) { return *out.inputs[i]; }

template <typename F, typename DF>
Tensor unary(const Tensor& a, F f, DF df) {
  const Array& x = a.value();
  Array y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  return Tensor::make(std::move(y), {a}, [df](detail::Node& out) {
    auto& in = input(out, 0);
    if (!in.requires_grad) return;
    Array g(in.value.shape());
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] = out.grad[i] * df(in.value[i], out.value[i]);
    }
    in.accumulate(g);
  });
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---- Array -----------------------------------------------------------------

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw DimensionError("Array: shape " + shape_string(shape_) + " does not match buffer of " +
                         std::to_string(data_.size()));
  }
}

Array Array::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Array({n}, std::move(values));
}

Array Array::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Array({rows, cols}, std::move(values));
}

std::size_t Array::bad_rank(const char* what) const {
  throw DimensionError(std::string(what) + "() on rank-" + std::to_string(shape_.size()) + " array");
}

Array Array::row(std::size_t r) const {
  const std::size_t c = cols();
  Array out({1, c});
  std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(r * c), c, out.data_.begin());
  return out;
}

Array Array::gather_rows(std::span<const std::size_t> indices) const {
  const std::size_t c = cols();
  Array out({indices.size(), c});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows()) throw IndexError("gather_rows: row index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * c), c,
                out.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
  }
  return out;
}

Array Array::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw DimensionError("reshape: " + shape_string(shape_) + " -> " + shape_string(shape));
  }
  return Array(std::move(shape), data_);
}

void Array::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

Array& Array::operator+=(const Array& other) {
  require_same_shape("Array::operator+=", *this, other);
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Array Array::scaled(double factor) const {
  Array out = *this;
  for (double& v : out.data_) v *= factor;
  return out;
}

// ---- graph -----------------------------------------------------------------

namespace detail {

Array& Node::grad_buffer() {
  if (grad.empty() && !value.empty()) grad = Array(value.shape());
  if (grad.shape() != value.shape()) grad = Array(value.shape());
  return grad;
}

void Node::accumulate(const Array& g) {
  require_same_shape("gradient accumulation", value, g);
  if (grad.empty()) {
    grad = g;
  } else {
    grad += g;
  }
}

}  // namespace detail

Tensor::Tensor() : Tensor(Array::scalar(0.0), false) {}

Tensor::Tensor(Array value, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = next_node_id.fetch_add(1, std::memory_order_relaxed);
}

Array Tensor::grad() const {
  if (node_->grad.empty()) return Array(node_->value.shape());
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad = Array(); }

void Tensor::assign(Array value) {
  if (node_->tape != nullptr) throw ContractViolation("assign() on a tensor recorded on a live tape");
  require_same_shape("Tensor::assign", node_->value, value);
  node_->value = std::move(value);
}

double Tensor::item() const {
  if (node_->value.size() != 1) {
    throw ContractViolation("item() on non-scalar tensor " + shape_string(shape()));
  }
  return node_->value[0];
}

Tensor Tensor::make(Array value, std::vector<Tensor> inputs,
                    std::function<void(detail::Node&)> backward) {
  Tensor out(std::move(value), false);
  Tape* tape = current_tape;
  if (tape == nullptr) return out;
  const bool needs_grad =
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!needs_grad) return out;
  auto& node = *out.node_;
  node.requires_grad = true;
  node.inputs.reserve(inputs.size());
  for (auto& t : inputs) node.inputs.push_back(t.node_);
  node.backward = std::move(backward);
  tape->record(out.node_);
  return out;
}

Tape::~Tape() { clear(); }

void Tape::record(const std::shared_ptr<detail::Node>& node) {
  node->tape = this;
  records_.push_back(node);
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  const auto& root = loss.node();
  if (root->tape != this) throw ContractViolation("backward(): loss is not recorded on this tape");
  root->accumulate(Array(root->value.shape(), 1.0));
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    detail::Node& node = **it;
    if (node.grad.empty() || !node.backward) continue;
    node.backward(node);
  }
  clear();
}

void Tape::clear() {
  for (auto& node : records_) {
    node->backward = nullptr;
    node->inputs.clear();
    node->tape = nullptr;
  }
  records_.clear();
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

Tape* active_tape() { return current_tape; }

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractViolation("backward() needs a scalar loss, got " + shape_string(loss.shape()));
  }
  Tape* tape = loss.node()->tape;
  if (tape == nullptr || tape != current_tape) {
    throw ContractViolation("backward(): loss is not recorded on the active tape");
  }
  tape->backward(loss);
}

// ---- linear algebra --------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Array& x = a.value();
  const Array& y = b.value();
  require_rank2("matmul", x);
  require_rank2("matmul", y);
  if (x.cols() != y.rows()) {
    throw DimensionError("matmul: inner dimensions differ " + shape_string(x.shape()) + " * " +
                         shape_string(y.shape()));
  }
  Array out({x.rows(), y.cols()});
  as_matrix(out).noalias() = as_matrix(x) * as_matrix(y);
  return Tensor::make(std::move(out), {a, b}, [](detail::Node& o) {
    auto& in_a = input(o, 0);
    auto& in_b = input(o, 1);
    if (in_a.requires_grad) {
      Array g(in_a.value.shape());
      as_matrix(g).noalias() = as_matrix(o.grad) * as_matrix(in_b.value).transpose();
      in_a.accumulate(g);
    }
    if (in_b.requires_grad) {
      Array g(in_b.value.shape());
      as_matrix(g).noalias() = as_matrix(in_a.value).transpose() * as_matrix(o.grad);
      in_b.accumulate(g);
    }
  });
}

Tensor transpose(const Tensor& a) {
  const Array& x = a.value();
  require_rank2("transpose", x);
  Array out({x.cols(), x.rows()});
  as_matrix(out) = as_matrix(x).transpose();
  return Tensor::make(std::move(out), {a}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    Array g(in.value.shape());
    as_matrix(g) = as_matrix(o.grad).transpose();
    in.accumulate(g);
  });
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a.value(), b.value());
  Array out = a.value();
  out += b.value();
  return Tensor::make(std::move(out), {a, b}, [](detail::Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (input(o, k).requires_grad) input(o, k).accumulate(o.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a.value(), b.value());
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return Tensor::make(std::move(out), {a, b}, [](detail::Node& o) {
    if (input(o, 0).requires_grad) input(o, 0).accumulate(o.grad);
    if (input(o, 1).requires_grad) input(o, 1).accumulate(o.grad.scaled(-1.0));
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a.value(), b.value());
  Array out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return Tensor::make(std::move(out), {a, b}, [](detail::Node& o) {
    auto& x = input(o, 0);
    auto& y = input(o, 1);
    if (x.requires_grad) {
      Array g = o.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= y.value[i];
      x.accumulate(g);
    }
    if (y.requires_grad) {
      Array g = o.grad;
      for (std::size_t i = 0; i < g.size(); ++i) g[i] *= x.value[i];
      y.accumulate(g);
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  return Tensor::make(a.value().scaled(factor), {a}, [factor](detail::Node& o) {
    if (input(o, 0).requires_grad) input(o, 0).accumulate(o.grad.scaled(factor));
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("scale_by: factor must be scalar, got " + shape_string(s.shape()));
  const double factor = s.value()[0];
  return Tensor::make(a.value().scaled(factor), {a, s}, [](detail::Node& o) {
    auto& x = input(o, 0);
    auto& f = input(o, 1);
    if (x.requires_grad) x.accumulate(o.grad.scaled(f.value[0]));
    if (f.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc += o.grad[i] * x.value[i];
      f.accumulate(Array(f.value.shape(), acc));
    }
  });
}

namespace {

void require_row_broadcast(const char* op, const Array& a, const Array& v) {
  require_rank2(op, a);
  if (v.size() != a.cols()) {
    throw DimensionError(std::string(op) + ": " + shape_string(v.shape()) + " does not broadcast over rows of " +
                         shape_string(a.shape()));
  }
}

}  // namespace

Tensor add_row(const Tensor& a, const Tensor& v) {
  require_row_broadcast("add_row", a.value(), v.value());
  Array out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) += v.value()[j];
  return Tensor::make(std::move(out), {a, v}, [](detail::Node& o) {
    if (input(o, 0).requires_grad) input(o, 0).accumulate(o.grad);
    auto& b = input(o, 1);
    if (b.requires_grad) {
      Array g(b.value.shape());
      const std::size_t rows = o.grad.rows(), cols = o.grad.cols();
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[j] += o.grad.at(i, j);
      b.accumulate(g);
    }
  });
}

Tensor mul_row(const Tensor& a, const Tensor& v) {
  require_row_broadcast("mul_row", a.value(), v.value());
  Array out = a.value();
  const std::size_t n = out.rows(), m = out.cols();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) out.at(i, j) *= v.value()[j];
  return Tensor::make(std::move(out), {a, v}, [](detail::Node& o) {
    auto& x = input(o, 0);
    auto& w = input(o, 1);
    const std::size_t rows = o.grad.rows(), cols = o.grad.cols();
    if (x.requires_grad) {
      Array g = o.grad;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g.at(i, j) *= w.value[j];
      x.accumulate(g);
    }
    if (w.requires_grad) {
      Array g(w.value.shape());
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[j] += o.grad.at(i, j) * x.value.at(i, j);
      w.accumulate(g);
    }
  });
}

Tensor mul_col(const Tensor& a, const Tensor& c) {
  const Array& x = a.value();
  require_rank2("mul_col", x);
  if (c.size() != x.rows()) {
    throw DimensionError("mul_col: " + shape_string(c.shape()) + " does not broadcast over columns of " +
                         shape_string(x.shape()));
  }
  Array out = x;
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) out.at(i, j) *= c.value()[i];
  return Tensor::make(std::move(out), {a, c}, [](detail::Node& o) {
    auto& in = input(o, 0);
    auto& w = input(o, 1);
    const std::size_t rows = o.grad.rows(), cols = o.grad.cols();
    if (in.requires_grad) {
      Array g = o.grad;
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g.at(i, j) *= w.value[i];
      in.accumulate(g);
    }
    if (w.requires_grad) {
      Array g(w.value.shape());
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) g[i] += o.grad.at(i, j) * in.value.at(i, j);
      w.accumulate(g);
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor relu(const Tensor& a) {
  return unary(a, [](double x) { return x > 0 ? x : 0.0; }, [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [](double x, double) { return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-0.5 * x * x); });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary(a, [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor reciprocal(const Tensor& a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double, double y) { return -y * y; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

// ---- reductions ------------------------------------------------------------

Tensor sum(const Tensor& a) {
  const auto& v = a.value().values();
  const double total = std::accumulate(v.begin(), v.end(), 0.0);
  return Tensor::make(Array::scalar(total), {a}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (in.requires_grad) in.accumulate(Array(in.value.shape(), o.grad[0]));
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  return scale(sum(a), 1.0 / n);
}

Tensor row_rms(const Tensor& a, double eps) {
  const Array& x = a.value();
  require_rank2("row_rms", x);
  const std::size_t n = x.rows(), m = x.cols();
  Array out({n});
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += x.at(i, j) * x.at(i, j);
    out[i] = std::sqrt(acc / static_cast<double>(m) + eps);
  }
  return Tensor::make(std::move(out), {a}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    const std::size_t rows = in.value.rows(), cols = in.value.cols();
    Array g(in.value.shape());
    for (std::size_t i = 0; i < rows; ++i) {
      const double f = o.grad[i] / (static_cast<double>(cols) * o.value[i]);
      for (std::size_t j = 0; j < cols; ++j) g.at(i, j) = f * in.value.at(i, j);
    }
    in.accumulate(g);
  });
}

// ---- layers ----------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Array& v = x.value();
  require_row_broadcast("layer_norm", v, gamma.value());
  require_row_broadcast("layer_norm", v, beta.value());
  const std::size_t n = v.rows(), m = v.cols();
  Array xhat(v.shape());
  Array inv_std({n});
  Array out(v.shape());
  for (std::size_t i = 0; i < n; ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < m; ++j) mu += v.at(i, j);
    mu /= static_cast<double>(m);
    double var = 0.0;
    for (std::size_t j = 0; j < m; ++j) var += (v.at(i, j) - mu) * (v.at(i, j) - mu);
    var /= static_cast<double>(m);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < m; ++j) {
      xhat.at(i, j) = (v.at(i, j) - mu) * inv_std[i];
      out.at(i, j) = xhat.at(i, j) * gamma.value()[j] + beta.value()[j];
    }
  }
  return Tensor::make(std::move(out), {x, gamma, beta},
                      [xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& o) {
                        auto& in = input(o, 0);
                        auto& g = input(o, 1);
                        auto& b = input(o, 2);
                        const std::size_t rows = o.grad.rows(), cols = o.grad.cols();
                        if (g.requires_grad || b.requires_grad) {
                          Array dg(g.value.shape()), db(b.value.shape());
                          for (std::size_t i = 0; i < rows; ++i)
                            for (std::size_t j = 0; j < cols; ++j) {
                              dg[j] += o.grad.at(i, j) * xhat.at(i, j);
                              db[j] += o.grad.at(i, j);
                            }
                          if (g.requires_grad) g.accumulate(dg);
                          if (b.requires_grad) b.accumulate(db);
                        }
                        if (!in.requires_grad) return;
                        Array dx(in.value.shape());
                        const double inv_m = 1.0 / static_cast<double>(cols);
                        for (std::size_t i = 0; i < rows; ++i) {
                          double mean_d = 0.0, mean_dx = 0.0;
                          for (std::size_t j = 0; j < cols; ++j) {
                            const double d = o.grad.at(i, j) * g.value[j];
                            mean_d += d;
                            mean_dx += d * xhat.at(i, j);
                          }
                          mean_d *= inv_m;
                          mean_dx *= inv_m;
                          for (std::size_t j = 0; j < cols; ++j) {
                            const double d = o.grad.at(i, j) * g.value[j];
                            dx.at(i, j) = inv_std[i] * (d - mean_d - xhat.at(i, j) * mean_dx);
                          }
                        }
                        in.accumulate(dx);
                      });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  const Array& t = table.value();
  require_rank2("embedding", t);
  const std::size_t vocab = t.rows(), h = t.cols();
  Array out({ids.size(), h});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("embedding: token id " + std::to_string(ids[i]) + " outside vocab of " +
                       std::to_string(vocab));
    }
    std::copy_n(t.data() + static_cast<std::size_t>(ids[i]) * h, h, out.data() + i * h);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return Tensor::make(std::move(out), {table}, [saved = std::move(saved)](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    Array g(in.value.shape());
    const std::size_t cols = in.value.cols();
    for (std::size_t i = 0; i < saved.size(); ++i) {
      double* dst = g.data() + static_cast<std::size_t>(saved[i]) * cols;
      const double* src = o.grad.data() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) dst[j] += src[j];
    }
    in.accumulate(g);
  });
}

namespace {

Array softmax_rows(const Array& x) {
  Array y(x.shape());
  const std::size_t n = x.rows(), m = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      y.at(i, j) = std::exp(x.at(i, j) - mx);
      z += y.at(i, j);
    }
    for (std::size_t j = 0; j < m; ++j) y.at(i, j) /= z;
  }
  return y;
}

Array log_softmax_rows(const Array& x) {
  Array y(x.shape());
  const std::size_t n = x.rows(), m = x.cols();
  for (std::size_t i = 0; i < n; ++i) {
    double mx = -INFINITY;
    for (std::size_t j = 0; j < m; ++j) mx = std::max(mx, x.at(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(x.at(i, j) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < m; ++j) y.at(i, j) = x.at(i, j) - lse;
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& logits) {
  require_rank2("softmax", logits.value());
  Array y = softmax_rows(logits.value());
  return Tensor::make(std::move(y), {logits}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    const std::size_t n = o.value.rows(), m = o.value.cols();
    Array g(in.value.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < m; ++j) dot += o.grad.at(i, j) * o.value.at(i, j);
      for (std::size_t j = 0; j < m; ++j) g.at(i, j) = o.value.at(i, j) * (o.grad.at(i, j) - dot);
    }
    in.accumulate(g);
  });
}

Tensor log_softmax(const Tensor& logits) {
  require_rank2("log_softmax", logits.value());
  Array y = log_softmax_rows(logits.value());
  return Tensor::make(std::move(y), {logits}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    const std::size_t n = o.value.rows(), m = o.value.cols();
    Array g(in.value.shape());
    for (std::size_t i = 0; i < n; ++i) {
      double total = 0.0;
      for (std::size_t j = 0; j < m; ++j) total += o.grad.at(i, j);
      for (std::size_t j = 0; j < m; ++j) g.at(i, j) = o.grad.at(i, j) - std::exp(o.value.at(i, j)) * total;
    }
    in.accumulate(g);
  });
}

std::vector<int> argmax(const Array& logits) {
  const std::size_t n = logits.rows(), m = logits.cols();
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < m; ++j)
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

// ---- structural ------------------------------------------------------------

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t n = parts.front().value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p.value());
    if (p.value().rows() != n) throw DimensionError("concat_cols: row counts differ");
    total += p.value().cols();
  }
  Array out({n, total});
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t c = p.value().cols();
    for (std::size_t i = 0; i < n; ++i)
      std::copy_n(p.value().data() + i * c, c, out.data() + i * total + off);
    off += c;
  }
  return Tensor::make(std::move(out), parts, [offsets = std::move(offsets)](detail::Node& o) {
    const std::size_t rows = o.value.rows(), width = o.value.cols();
    for (std::size_t k = 0; k < o.inputs.size(); ++k) {
      auto& in = input(o, k);
      if (!in.requires_grad) continue;
      const std::size_t c = in.value.cols();
      Array g(in.value.shape());
      for (std::size_t i = 0; i < rows; ++i)
        std::copy_n(o.grad.data() + i * width + offsets[k], c, g.data() + i * c);
      in.accumulate(g);
    }
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t m = parts.front().value().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require_rank2("concat_rows", p.value());
    if (p.value().cols() != m) throw DimensionError("concat_rows: column counts differ");
    total += p.value().rows();
  }
  Array out({total, m});
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy_n(p.value().data(), p.value().size(), out.data() + off * m);
    off += p.value().rows();
  }
  return Tensor::make(std::move(out), parts, [](detail::Node& o) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < o.inputs.size(); ++k) {
      auto& in = input(o, k);
      if (in.requires_grad) {
        Array g(in.value.shape());
        std::copy_n(o.grad.data() + offset, g.size(), g.data());
        in.accumulate(g);
      }
      offset += in.value.size();
    }
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const Array& x = a.value();
  require_rank2("slice_cols", x);
  if (begin > end || end > x.cols()) throw DimensionError("slice_cols: range out of bounds");
  const std::size_t n = x.rows(), w = end - begin, m = x.cols();
  Array out({n, w});
  for (std::size_t i = 0; i < n; ++i) std::copy_n(x.data() + i * m + begin, w, out.data() + i * w);
  return Tensor::make(std::move(out), {a}, [begin](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    const std::size_t rows = o.value.rows(), width = o.value.cols(), cols = in.value.cols();
    Array g(in.value.shape());
    for (std::size_t i = 0; i < rows; ++i)
      std::copy_n(o.grad.data() + i * width, width, g.data() + i * cols + begin);
    in.accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  const Array& x = a.value();
  require_rank2("slice_rows", x);
  if (begin > end || end > x.rows()) throw DimensionError("slice_rows: range out of bounds");
  const std::size_t m = x.cols();
  Array out({end - begin, m});
  std::copy_n(x.data() + begin * m, out.size(), out.data());
  return Tensor::make(std::move(out), {a}, [begin](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    Array g(in.value.shape());
    std::copy_n(o.grad.data(), o.grad.size(), g.data() + begin * in.value.cols());
    in.accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  Array out = a.value().reshaped(std::move(shape));
  return Tensor::make(std::move(out), {a}, [](detail::Node& o) {
    auto& in = input(o, 0);
    if (in.requires_grad) in.accumulate(o.grad.reshaped(in.value.shape()));
  });
}

Tensor mean_pool(const Tensor& x, std::size_t seq_len) {
  const Array& v = x.value();
  require_rank2("mean_pool", v);
  if (seq_len == 0 || v.rows() % seq_len != 0) {
    throw DimensionError("mean_pool: " + std::to_string(v.rows()) + " rows are not a multiple of " +
                         std::to_string(seq_len));
  }
  const std::size_t b = v.rows() / seq_len, h = v.cols();
  const double inv = 1.0 / static_cast<double>(seq_len);
  Array out({b, h});
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t t = 0; t < seq_len; ++t)
      for (std::size_t j = 0; j < h; ++j) out.at(i, j) += v.at(i * seq_len + t, j) * inv;
  return Tensor::make(std::move(out), {x}, [seq_len, inv](detail::Node& o) {
    auto& in = input(o, 0);
    if (!in.requires_grad) return;
    const std::size_t rows = o.value.rows(), cols = o.value.cols();
    Array g(in.value.shape());
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t t = 0; t < seq_len; ++t)
        for (std::size_t j = 0; j < cols; ++j) g.at(i * seq_len + t, j) = o.grad.at(i, j) * inv;
    in.accumulate(g);
  });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t num_heads) {
  const Array& Q = q.value();
  const Array& K = k.value();
  const Array& V = v.value();
  require_same_shape("attention", Q, K);
  require_same_shape("attention", Q, V);
  require_rank2("attention", Q);
  const std::size_t rows = Q.rows(), h = Q.cols();
  if (seq_len == 0 || rows % seq_len != 0) throw DimensionError("attention: rows not a multiple of seq_len");
  if (num_heads == 0 || h % num_heads != 0) throw DimensionError("attention: width not divisible by heads");
  const std::size_t batch = rows / seq_len, d = h / num_heads, T = seq_len;
  const double sc = 1.0 / std::sqrt(static_cast<double>(d));

  // probs laid out [batch][head][T][T]
  std::vector<double> probs(batch * num_heads * T * T);
  Array out(Q.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t hd = 0; hd < num_heads; ++hd) {
      double* P = probs.data() + (b * num_heads + hd) * T * T;
      const std::size_t c0 = hd * d;
      for (std::size_t i = 0; i < T; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t c = 0; c < d; ++c) s += Q.at(b * T + i, c0 + c) * K.at(b * T + j, c0 + c);
          P[i * T + j] = s * sc;
          mx = std::max(mx, P[i * T + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < T; ++j) {
          P[i * T + j] = std::exp(P[i * T + j] - mx);
          z += P[i * T + j];
        }
        for (std::size_t j = 0; j < T; ++j) P[i * T + j] /= z;
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t c = 0; c < d; ++c) out.at(b * T + i, c0 + c) += P[i * T + j] * V.at(b * T + j, c0 + c);
      }
    }
  }
  return Tensor::make(
      std::move(out), {q, k, v},
      [probs = std::move(probs), batch, num_heads, d, T, sc](detail::Node& o) {
        auto& nq = input(o, 0);
        auto& nk = input(o, 1);
        auto& nv = input(o, 2);
        const Array& Qv = nq.value;
        const Array& Kv = nk.value;
        const Array& Vv = nv.value;
        Array dQ(Qv.shape()), dK(Kv.shape()), dV(Vv.shape());
        std::vector<double> dP(T * T), dS(T * T);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t hd = 0; hd < num_heads; ++hd) {
            const double* P = probs.data() + (b * num_heads + hd) * T * T;
            const std::size_t c0 = hd * d;
            for (std::size_t i = 0; i < T; ++i)
              for (std::size_t j = 0; j < T; ++j) {
                double s = 0.0;
                for (std::size_t c = 0; c < d; ++c) s += o.grad.at(b * T + i, c0 + c) * Vv.at(b * T + j, c0 + c);
                dP[i * T + j] = s;
                for (std::size_t c = 0; c < d; ++c)
                  dV.at(b * T + j, c0 + c) += P[i * T + j] * o.grad.at(b * T + i, c0 + c);
              }
            for (std::size_t i = 0; i < T; ++i) {
              double dot = 0.0;
              for (std::size_t j = 0; j < T; ++j) dot += dP[i * T + j] * P[i * T + j];
              for (std::size_t j = 0; j < T; ++j) dS[i * T + j] = P[i * T + j] * (dP[i * T + j] - dot) * sc;
            }
            for (std::size_t i = 0; i < T; ++i)
              for (std::size_t j = 0; j < T; ++j) {
                const double s = dS[i * T + j];
                for (std::size_t c = 0; c < d; ++c) {
                  dQ.at(b * T + i, c0 + c) += s * Kv.at(b * T + j, c0 + c);
                  dK.at(b * T + j, c0 + c) += s * Qv.at(b * T + i, c0 + c);
                }
              }
          }
        }
        if (nq.requires_grad) nq.accumulate(dQ);
        if (nk.requires_grad) nk.accumulate(dK);
        if (nv.requires_grad) nv.accumulate(dV);
      });
}

// ---- losses ----------------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
  const Array& x = logits.value();
  require_rank2("softmax_cross_entropy", x);
  const std::size_t n = x.rows(), c = x.cols();
  if (targets.size() != n) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(n) + " rows");
  }
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= c) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(c) + ")");
    }
  }
  Array lsm = log_softmax_rows(x);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) loss -= lsm.at(i, static_cast<std::size_t>(targets[i]));
  loss /= static_cast<double>(n);
  std::vector<int> saved(targets.begin(), targets.end());
  return Tensor::make(Array::scalar(loss), {logits},
                      [lsm = std::move(lsm), saved = std::move(saved)](detail::Node& o) {
                        auto& in = input(o, 0);
                        if (!in.requires_grad) return;
                        const std::size_t rows = lsm.rows(), cols = lsm.cols();
                        const double f = o.grad[0] / static_cast<double>(rows);
                        Array g(in.value.shape());
                        for (std::size_t i = 0; i < rows; ++i) {
                          for (std::size_t j = 0; j < cols; ++j) g.at(i, j) = std::exp(lsm.at(i, j)) * f;
                          g.at(i, static_cast<std::size_t>(saved[i])) -= f;
                        }
                        in.accumulate(g);
                      });
}

Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits) {
  require_same_shape("kl_divergence", p_logits.value(), q_logits.value());
  require_rank2("kl_divergence", p_logits.value());
  Array lp = log_softmax_rows(p_logits.value());
  const Array lq = log_softmax_rows(q_logits.value());
  const std::size_t n = lp.rows(), c = lp.cols();
  Array diff(lp.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      diff.at(i, j) = lp.at(i, j) - lq.at(i, j);
      total += std::exp(lp.at(i, j)) * diff.at(i, j);
    }
  total /= static_cast<double>(n);
  return Tensor::make(Array::scalar(total), {p_logits},
                      [lp = std::move(lp), diff = std::move(diff)](detail::Node& o) {
                        auto& in = input(o, 0);
                        if (!in.requires_grad) return;
                        const std::size_t rows = lp.rows(), cols = lp.cols();
                        const double f = o.grad[0] / static_cast<double>(rows);
                        Array g(in.value.shape());
                        for (std::size_t i = 0; i < rows; ++i) {
                          double row_kl = 0.0;
                          for (std::size_t j = 0; j < cols; ++j) row_kl += std::exp(lp.at(i, j)) * diff.at(i, j);
                          for (std::size_t j = 0; j < cols; ++j)
                            g.at(i, j) = f * std::exp(lp.at(i, j)) * (diff.at(i, j) - row_kl);
                        }
                        in.accumulate(g);
                      });
}

// ---- checking --------------------------------------------------------------

Array finite_difference_gradient(const std::function<double(const Array&)>& f, const Array& at, double eps) {
  if (!(eps > 0.0)) throw ContractViolation("finite_difference_gradient: eps must be positive");
  Array x = at;
  Array g(at.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = f(x);
    x[i] = orig - eps;
    const double down = f(x);
    x[i] = orig;
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

double relative_error(const Array& a, const Array& b) {
  require_same_shape("relative_error", a, b);
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(std::max(na, nb));
  if (denom == 0.0) return 0.0;
  return std::sqrt(diff) / denom;
}

double max_abs_diff(const Array& a, const Array& b) {
  require_same_shape("max_abs_diff", a, b);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace edlab
