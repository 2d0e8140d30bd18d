// Copyright 2026 The tdast Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//   http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tdast/rng.h"

namespace tdast {

// Numeric mode. kStandard keeps every stored value representable as a
// 32-bit float (training mode); kWide keeps full 64-bit precision and is
// what gradient-check tests run under, since central finite differences
// drown in 32-bit rounding noise.
enum class Precision { kStandard, kWide };

Precision default_precision();
void set_default_precision(Precision p);

// RAII precision switch for tests.
class ScopedPrecision {
 public:
  explicit ScopedPrecision(Precision p) : saved_(default_precision()) {
    set_default_precision(p);
  }
  ~ScopedPrecision() { set_default_precision(saved_); }

 private:
  Precision saved_;
};

struct TensorData {
  std::vector<int64_t> shape;
  std::vector<double> values;
  std::vector<double> grad;     // allocated lazily during backward
  bool requires_grad = false;   // leaf parameter flag
  bool grad_path = false;       // true if gradient flows through this tensor
};

// Value-semantic handle to an immutable dense array. All ops return fresh
// tensors; nothing mutates a grad-enabled tensor in place.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value);
  static Tensor from(std::vector<int64_t> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value);
  // I.i.d. normal(0, stddev) entries drawn from rng.
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const std::vector<int64_t>& shape() const { return data_->shape; }
  int64_t numel() const { return static_cast<int64_t>(data_->values.size()); }
  int rank() const { return static_cast<int>(data_->shape.size()); }
  int64_t extent(int axis) const;

  std::span<const double> values() const { return data_->values; }
  double value_at(int64_t flat_index) const { return data_->values[flat_index]; }
  double scalar_value() const;

  bool requires_grad() const { return data_->requires_grad; }
  bool grad_path() const { return data_->grad_path; }
  bool has_grad() const { return !data_->grad.empty(); }
  std::span<const double> grad() const;
  void zero_grad();

  bool all_finite() const;

  // Overwrites stored values (optimizer use only; rejects tensors that sit
  // on a gradient path so tape integrity cannot be broken mid-step).
  void assign_values(std::span<const double> v);

  const std::shared_ptr<TensorData>& data() const { return data_; }
  explicit Tensor(std::shared_ptr<TensorData> d) : data_(std::move(d)) {}

 private:
  std::shared_ptr<TensorData> data_;
};

// Reverse-mode tape. Construction activates it for the current thread; ops
// record themselves while any input carries a gradient path. One tape per
// training step; backward() may be called exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Populates grads of every grad-enabled tensor reachable from loss.
  // loss must be a scalar recorded on this tape.
  void backward(const Tensor& loss);

  size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();
  void record(std::shared_ptr<TensorData> out, std::function<void()> fn);

 private:
  struct Node {
    std::shared_ptr<TensorData> out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// ---- elementwise ops (shapes equal, or b a scalar, or b's shape a suffix
// ---- of a's shape, broadcast across the leading axes) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);  // requires strictly positive inputs
Tensor relu(const Tensor& a);
Tensor scale(const Tensor& a, double c);

// Matrix product for rank 2 or 3 (leading batch axis; a rank-2 b is shared
// across the batch). transpose_b treats b as transposed in its last two axes.
Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false);

// Numerically-stable log-softmax along `axis` (negative axes count from the
// back). exp of the result sums to 1 along that axis.
Tensor log_softmax(const Tensor& a, int axis);

// Last-axis layer normalization with epsilon inside the sqrt; gain and bias
// match the last extent.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon);

Tensor sum(const Tensor& a);            // -> scalar
Tensor sum_last_axis(const Tensor& a);  // drops the last axis

// Embedding-style row lookup: table [V, d], ids in [0, V) -> [n, d].
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Per-position pick along the last axis: a [.., V], one id per leading
// position -> [..] with the last axis dropped.
Tensor gather_index_last(const Tensor& a, const std::vector<int>& ids);

// Half-open row slice along axis 0.
Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end);

// [T, H*dk] -> [H, T, dk] and back.
Tensor split_heads(const Tensor& a, int heads);
Tensor merge_heads(const Tensor& a);

// 1-D convolution over time: x [T, Cin], w [K, Cin, Cout], b [Cout].
// Output length floor((T + 2*pad - K)/stride) + 1.
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);

int64_t conv1d_out_len(int64_t in_len, int kernel, int stride, int pad);

}  // namespace tdast
