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

// Dense float64 tensors with a define-by-run reverse-mode tape.
//
// `Array` is a plain value buffer. `Tensor` is a shared handle to a graph
// node holding an `Array` value, an optional gradient buffer and, while a
// `Tape` is active on the current thread, the record needed to propagate
// gradients back to its inputs. Outside of a `TapeScope` every op produces
// constants, which is how inference code runs.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "edlab/errors.hpp"

namespace edlab {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> data);

  static Array scalar(double value) { return Array({}, {value}); }
  static Array vector(std::vector<double> values);
  static Array matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-2 accessors; a rank-1 array is treated as a single row.
  std::size_t rows() const {
    if (shape_.size() == 2) return shape_[0];
    return shape_.size() <= 1 ? 1 : bad_rank("rows");
  }
  std::size_t cols() const {
    if (shape_.size() == 2) return shape_[1];
    if (shape_.size() == 1) return shape_[0];
    return shape_.empty() ? 1 : bad_rank("cols");
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& buffer() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Copy of row `r` as a rank-2 [1 x cols] array.
  Array row(std::size_t r) const;
  // Rows selected by index, stacked in the given order.
  Array gather_rows(std::span<const std::size_t> indices) const;

  Array reshaped(Shape shape) const;
  void fill(double value);
  Array& operator+=(const Array& other);
  Array scaled(double factor) const;

  friend bool operator==(const Array& a, const Array& b) = default;

 private:
  [[noreturn]] std::size_t bad_rank(const char* what) const;

  Shape shape_;
  std::vector<double> data_;
};

class Tape;

namespace detail {

struct Node {
  Array value;
  Array grad;
  bool requires_grad = false;
  Tape* tape = nullptr;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Array& g);
  // Gradient buffer, allocated as zeros on first use.
  Array& grad_buffer();
};

}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Array value, bool requires_grad = false);

  static Tensor parameter(Array value) { return Tensor(std::move(value), true); }
  static Tensor constant(Array value) { return Tensor(std::move(value), false); }

  const Array& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool recorded() const { return node_->tape != nullptr; }
  std::uint64_t node_id() const { return node_->id; }

  bool has_grad() const { return !node_->grad.empty(); }
  // Gradient buffer; zeros of the value's shape when nothing was accumulated.
  Array grad() const;
  void zero_grad();

  // Overwrite the value in place. Only valid on leaves that are not recorded
  // on a live tape (optimizer updates, finite-difference probes).
  void assign(Array value);

  // Constant sharing a copy of this value.
  Tensor detach() const { return Tensor::constant(node_->value); }
  double item() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  // Internal: builds an op result and records it when a tape is active and
  // any input requires a gradient.
  static Tensor make(Array value, std::vector<Tensor> inputs,
                     std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  ~Tape();

  std::size_t size() const { return records_.size(); }
  void record(const std::shared_ptr<detail::Node>& node);

  // Reverse sweep over every record, then releases the records.
  void backward(const Tensor& loss);
  void clear();

 private:
  std::vector<std::shared_ptr<detail::Node>> records_;
};

// Makes `tape` the active tape of this thread for the scope's lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
  ~TapeScope();

 private:
  Tape* previous_;
};

Tape* active_tape();

// Accumulates d(loss)/d(leaf) into every requires_grad ancestor of `loss`.
// The loss must be a scalar recorded on the active tape; the tape is freed
// afterwards.
void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
// a * s for a scalar tensor s.
Tensor scale_by(const Tensor& a, const Tensor& s);
// Row broadcast: a [n x m] (+|*) v [m].
Tensor add_row(const Tensor& a, const Tensor& v);
Tensor mul_row(const Tensor& a, const Tensor& v);
// Column broadcast: row i of a [n x m] times c[i], c [n].
Tensor mul_col(const Tensor& a, const Tensor& c);

Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor reciprocal(const Tensor& a);
Tensor clamp(const Tensor& a, double lo, double hi);
Tensor add_scalar(const Tensor& a, double c);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
// Root mean square of each row, eps added under the root: [n x m] -> [n].
Tensor row_rms(const Tensor& a, double eps);

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor softmax(const Tensor& logits);
Tensor log_softmax(const Tensor& logits);
std::vector<int> argmax(const Array& logits);

Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor reshape(const Tensor& a, Shape shape);

// Mean over consecutive groups of `seq_len` rows: [B*T x h] -> [B x h].
Tensor mean_pool(const Tensor& x, std::size_t seq_len);

// Bidirectional multi-head scaled dot-product attention over sequences laid
// out as consecutive row blocks of length seq_len. q, k, v: [B*T x h].
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t seq_len,
                 std::size_t num_heads);

// Mean over rows of -log softmax(logits)[target].
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets);

// Mean over rows of KL(softmax(p) || softmax(q)); q is treated as constant.
Tensor kl_divergence(const Tensor& p_logits, const Tensor& q_logits);

// ---- checking --------------------------------------------------------------

// Central differences of a scalar function, one coordinate at a time.
Array finite_difference_gradient(const std::function<double(const Array&)>& f, const Array& at,
                                 double eps = 1e-5);

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double relative_error(const Array& a, const Array& b);
double max_abs_diff(const Array& a, const Array& b);

}  // namespace edlab
