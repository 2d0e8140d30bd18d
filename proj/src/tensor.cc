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

#include "tdast/tensor.h"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "tdast/errors.h"

namespace tdast {

namespace {

thread_local Precision g_precision = Precision::kStandard;
thread_local Tape* g_active_tape = nullptr;

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapD = Eigen::Map<const MatD>;
using MapDMut = Eigen::Map<MatD>;

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const std::vector<int64_t>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

// In standard mode every stored value is kept f32-representable.
void finalize_values(std::vector<double>& v) {
  if (g_precision == Precision::kStandard) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

void ensure_grad(TensorData& d) {
  if (d.grad.empty()) d.grad.assign(d.values.size(), 0.0);
}

std::shared_ptr<TensorData> make_data(std::vector<int64_t> shape,
                                      std::vector<double> values) {
  auto d = std::make_shared<TensorData>();
  d->shape = std::move(shape);
  d->values = std::move(values);
  return d;
}

// Records the op on the active tape if any input carries a gradient path.
template <typename Fn>
void maybe_record(const Tensor& out, std::initializer_list<const Tensor*> ins,
                  Fn&& fn) {
  Tape* t = Tape::active();
  if (t == nullptr) return;
  bool any = false;
  for (const Tensor* in : ins) any = any || (*in)->grad_path();
  if (!any) return;
  out.data()->grad_path = true;
  t->record(out.data(), std::forward<Fn>(fn));
}

// b broadcasts onto a if its shape is a suffix of a's (or it is a scalar).
bool suffix_broadcasts(const std::vector<int64_t>& big,
                       const std::vector<int64_t>& small) {
  if (shape_numel(small) == 1) return true;
  if (small.size() > big.size()) return false;
  size_t off = big.size() - small.size();
  for (size_t i = 0; i < small.size(); ++i)
    if (big[off + i] != small[i]) return false;
  return true;
}

// Raw GEMM, C (+)= op(A)·op(B). Standard mode computes in f32 so training
// arithmetic is 32-bit equivalent; wide mode stays in f64.
void gemm(const double* a, int64_t am, int64_t an, bool ta, const double* b,
          int64_t bm, int64_t bn, bool tb, double* c, bool accumulate) {
  MapD A(a, am, an);
  MapD B(b, bm, bn);
  int64_t m = ta ? an : am;
  int64_t n = tb ? bm : bn;
  if (g_precision == Precision::kWide) {
    MapDMut C(c, m, n);
    if (!accumulate) C.setZero();
    if (!ta && !tb)
      C.noalias() += A * B;
    else if (!ta && tb)
      C.noalias() += A * B.transpose();
    else if (ta && !tb)
      C.noalias() += A.transpose() * B;
    else
      C.noalias() += A.transpose() * B.transpose();
  } else {
    MatF Af = A.cast<float>();
    MatF Bf = B.cast<float>();
    MatF Cf(m, n);
    if (!ta && !tb)
      Cf.noalias() = Af * Bf;
    else if (!ta && tb)
      Cf.noalias() = Af * Bf.transpose();
    else if (ta && !tb)
      Cf.noalias() = Af.transpose() * Bf;
    else
      Cf.noalias() = Af.transpose() * Bf.transpose();
    MapDMut C(c, m, n);
    if (!accumulate)
      C = Cf.cast<double>();
    else
      C += Cf.cast<double>();
  }
}

}  // namespace

Precision default_precision() { return g_precision; }
void set_default_precision(Precision p) { g_precision = p; }

// ---------------------------------------------------------------- Tensor

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  int64_t n = shape_numel(shape);
  auto d = make_data(std::move(shape), std::vector<double>(n, 0.0));
  d->requires_grad = requires_grad;
  d->grad_path = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value) {
  int64_t n = shape_numel(shape);
  std::vector<double> v(n, value);
  finalize_values(v);
  return Tensor(make_data(std::move(shape), std::move(v)));
}

Tensor Tensor::from(std::vector<int64_t> shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ConfigError("tensor shape " + shape_str(shape) +
                      " does not match value count " +
                      std::to_string(values.size()));
  finalize_values(values);
  auto d = make_data(std::move(shape), std::move(values));
  d->requires_grad = requires_grad;
  d->grad_path = requires_grad;
  return Tensor(std::move(d));
}

Tensor Tensor::scalar(double value) { return full({1}, value); }

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, double stddev,
                     bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal() * stddev;
  finalize_values(v);
  auto d = make_data(std::move(shape), std::move(v));
  d->requires_grad = requires_grad;
  d->grad_path = requires_grad;
  return Tensor(std::move(d));
}

int64_t Tensor::extent(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw ConfigError("axis out of range");
  return data_->shape[axis];
}

double Tensor::scalar_value() const {
  if (numel() != 1) throw ConfigError("scalar_value on non-scalar tensor");
  return data_->values[0];
}

std::span<const double> Tensor::grad() const {
  if (data_->grad.empty())
    throw ConfigError("gradient not present; run backward first");
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.clear(); }

bool Tensor::all_finite() const {
  for (double v : data_->values)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::assign_values(std::span<const double> v) {
  if (Tape::active() != nullptr)
    throw ConfigError("in-place tensor update while a tape is recording");
  if (static_cast<int64_t>(v.size()) != numel())
    throw ConfigError("assign_values size mismatch");
  std::copy(v.begin(), v.end(), data_->values.begin());
  finalize_values(data_->values);
}

// ------------------------------------------------------------------ Tape

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

void Tape::record(std::shared_ptr<TensorData> out, std::function<void()> fn) {
  nodes_.push_back(Node{std::move(out), std::move(fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw ConfigError("backward already run on this tape");
  if (nodes_.empty())
    throw ConfigError("backward called before any forward op was recorded");
  if (loss.numel() != 1) throw ConfigError("backward requires a scalar loss");
  if (!loss.grad_path())
    throw ConfigError("loss does not depend on any grad-enabled tensor");
  consumed_ = true;
  ensure_grad(*loss.data());
  loss.data()->grad[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->out->grad.empty()) it->backward();
  }
}

// ------------------------------------------------------ elementwise ops

namespace {

// Generic binary op with suffix broadcasting on the smaller operand.
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name,
                 double (*fwd)(double, double),
                 void (*bwd)(double ga, double av, double bv, double& da,
                             double& db)) {
  const Tensor* big = &a;
  const Tensor* small = &b;
  bool b_is_small = true;
  if (a.numel() < b.numel()) {
    big = &b;
    small = &a;
    b_is_small = false;
  }
  if (!suffix_broadcasts(big->shape(), small->shape()))
    throw ConfigError(std::string(name) + ": shapes " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()) + " do not broadcast");
  int64_t n = big->numel();
  int64_t sn = small->numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  int64_t an = a.numel(), bn = b.numel();
  for (int64_t i = 0; i < n; ++i)
    out[i] = fwd(av[b_is_small || an == n ? i % an : i % an],
                 bv[i % bn]);  // suffix broadcast == modular indexing
  finalize_values(out);
  Tensor result(make_data(big->shape(), std::move(out)));
  Tensor ac = a, bc = b;
  maybe_record(result, {&a, &b}, [ac, bc, result, bwd, n]() {
    const auto& g = result.data()->grad;
    bool need_a = ac.data()->grad_path;
    bool need_b = bc.data()->grad_path;
    if (need_a) ensure_grad(*ac.data());
    if (need_b) ensure_grad(*bc.data());
    int64_t an = ac.numel(), bn = bc.numel();
    for (int64_t i = 0; i < n; ++i) {
      double da = 0, db = 0;
      bwd(g[i], ac.data()->values[i % an], bc.data()->values[i % bn], da, db);
      if (need_a) ac.data()->grad[i % an] += da;
      if (need_b) bc.data()->grad[i % bn] += db;
    }
  });
  return result;
}

// Unary op helper.
template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& a, FwdFn fwd, BwdFn bwd) {
  int64_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (int64_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  finalize_values(out);
  Tensor result(make_data(a.shape(), std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, bwd, n]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    for (int64_t i = 0; i < n; ++i)
      ac.data()->grad[i] +=
          bwd(g[i], ac.data()->values[i], result.data()->values[i]);
  });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double av, double bv, double& da, double& db) {
        da = g * bv;
        db = g * av;
      });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      a, [](double x) { return -x; },
      [](double g, double, double) { return -g; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double g, double, double out) { return g * out; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values())
    if (!(v > 0.0)) throw ConfigError("log of non-positive value");
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double g, double in, double) { return g / in; });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double in, double) { return in > 0.0 ? g : 0.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; },
      [c](double g, double, double) { return c * g; });
}

// ---------------------------------------------------------------- matmul

Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b) {
  int ar = a.rank(), br = b.rank();
  if (ar < 2 || ar > 3 || br < 2 || br > 3 || br > ar)
    throw ConfigError("matmul supports rank 2-3 with optional shared rank-2 b");
  int64_t batch = ar == 3 ? a.extent(0) : 1;
  if (br == 3 && b.extent(0) != batch)
    throw ConfigError("matmul batch extents disagree");
  int64_t m = a.extent(ar - 2), k = a.extent(ar - 1);
  int64_t bk = transpose_b ? b.extent(br - 1) : b.extent(br - 2);
  int64_t n = transpose_b ? b.extent(br - 2) : b.extent(br - 1);
  if (bk != k)
    throw ConfigError("matmul inner extents disagree: " +
                      shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<int64_t> out_shape =
      ar == 3 ? std::vector<int64_t>{batch, m, n} : std::vector<int64_t>{m, n};
  std::vector<double> out(batch * m * n);
  int64_t a_stride = m * k;
  int64_t b_stride = br == 3 ? b.numel() / batch : 0;
  int64_t o_stride = m * n;
  int64_t brows = transpose_b ? n : k;
  int64_t bcols = transpose_b ? k : n;
  for (int64_t bi = 0; bi < batch; ++bi)
    gemm(a.values().data() + bi * a_stride, m, k, false,
         b.values().data() + bi * b_stride, brows, bcols, transpose_b,
         out.data() + bi * o_stride, false);
  Tensor result(make_data(std::move(out_shape), std::move(out)));
  Tensor ac = a, bc = b;
  maybe_record(result, {&a, &b},
               [ac, bc, result, transpose_b, batch, m, n, k, a_stride, b_stride,
                o_stride, brows, bcols]() {
    const double* g = result.data()->grad.data();
    bool need_a = ac.data()->grad_path;
    bool need_b = bc.data()->grad_path;
    if (need_a) ensure_grad(*ac.data());
    if (need_b) ensure_grad(*bc.data());
    for (int64_t bi = 0; bi < batch; ++bi) {
      const double* gb = g + bi * o_stride;
      const double* av = ac.data()->values.data() + bi * a_stride;
      const double* bv = bc.data()->values.data() + bi * b_stride;
      if (need_a) {
        // dA = G·Bᵀ (plain) or G·B (transpose_b)
        gemm(gb, m, n, false, bv, brows, bcols, !transpose_b,
             ac.data()->grad.data() + bi * a_stride, true);
      }
      if (need_b) {
        if (!transpose_b)  // dB = Aᵀ·G
          gemm(av, m, k, true, gb, m, n, false,
               bc.data()->grad.data() + bi * b_stride, true);
        else  // dB = Gᵀ·A
          gemm(gb, m, n, true, av, m, k, false,
               bc.data()->grad.data() + bi * b_stride, true);
      }
    }
  });
  return result;
}

// ----------------------------------------------------------- log_softmax

Tensor log_softmax(const Tensor& a, int axis) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ConfigError("log_softmax: axis out of range");
  for (double v : a.values())
    if (!std::isfinite(v)) throw ConfigError("log_softmax: non-finite input");
  int64_t n = a.extent(axis);
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= a.extent(i);
  int64_t outer = a.numel() / (n * inner);
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (int64_t o = 0; o < outer; ++o) {
    for (int64_t in = 0; in < inner; ++in) {
      int64_t base = o * n * inner + in;
      double mx = av[base];
      for (int64_t i = 1; i < n; ++i) mx = std::max(mx, av[base + i * inner]);
      double se = 0.0;
      for (int64_t i = 0; i < n; ++i) se += std::exp(av[base + i * inner] - mx);
      double lse = mx + std::log(se);
      for (int64_t i = 0; i < n; ++i)
        out[base + i * inner] = av[base + i * inner] - lse;
    }
  }
  finalize_values(out);
  Tensor result(make_data(a.shape(), std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, outer, n, inner]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    const auto& y = result.data()->values;
    auto& da = ac.data()->grad;
    for (int64_t o = 0; o < outer; ++o) {
      for (int64_t in = 0; in < inner; ++in) {
        int64_t base = o * n * inner + in;
        double gsum = 0.0;
        for (int64_t i = 0; i < n; ++i) gsum += g[base + i * inner];
        for (int64_t i = 0; i < n; ++i) {
          int64_t idx = base + i * inner;
          da[idx] += g[idx] - std::exp(y[idx]) * gsum;
        }
      }
    }
  });
  return result;
}

// ------------------------------------------------------------ layer_norm

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon) {
  int64_t n = x.extent(-1);
  if (gain.numel() != n || bias.numel() != n)
    throw ConfigError("layer_norm: gain/bias must match the last extent");
  int64_t rows = x.numel() / n;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(rows), xhat(x.numel());
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    double mu = 0.0;
    for (int64_t i = 0; i < n; ++i) mu += row[i];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t i = 0; i < n; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<double>(n);
    double s = 1.0 / std::sqrt(var + epsilon);
    inv_std[r] = s;
    for (int64_t i = 0; i < n; ++i) {
      double xh = (row[i] - mu) * s;
      xhat[r * n + i] = xh;
      out[r * n + i] = xh * gv[i] + bv[i];
    }
  }
  finalize_values(out);
  Tensor result(make_data(x.shape(), std::move(out)));
  Tensor xc = x, gc = gain, bc = bias;
  auto xhat_p = std::make_shared<std::vector<double>>(std::move(xhat));
  auto istd_p = std::make_shared<std::vector<double>>(std::move(inv_std));
  maybe_record(result, {&x, &gain, &bias},
               [xc, gc, bc, result, xhat_p, istd_p, rows, n]() {
    const auto& g = result.data()->grad;
    bool need_x = xc.data()->grad_path;
    bool need_g = gc.data()->grad_path;
    bool need_b = bc.data()->grad_path;
    if (need_x) ensure_grad(*xc.data());
    if (need_g) ensure_grad(*gc.data());
    if (need_b) ensure_grad(*bc.data());
    const auto& gv = gc.data()->values;
    for (int64_t r = 0; r < rows; ++r) {
      const double* gr = g.data() + r * n;
      const double* xh = xhat_p->data() + r * n;
      if (need_g || need_b) {
        for (int64_t i = 0; i < n; ++i) {
          if (need_g) gc.data()->grad[i] += gr[i] * xh[i];
          if (need_b) bc.data()->grad[i] += gr[i];
        }
      }
      if (need_x) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          double gy = gr[i] * gv[i];
          m1 += gy;
          m2 += gy * xh[i];
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        double s = (*istd_p)[r];
        for (int64_t i = 0; i < n; ++i) {
          double gy = gr[i] * gv[i];
          xc.data()->grad[r * n + i] += (gy - m1 - xh[i] * m2) * s;
        }
      }
    }
  });
  return result;
}

// ------------------------------------------------------------ reductions

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  std::vector<double> out{s};
  finalize_values(out);
  Tensor result(make_data({1}, std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result]() {
    ensure_grad(*ac.data());
    double g = result.data()->grad[0];
    for (auto& d : ac.data()->grad) d += g;
  });
  return result;
}

Tensor sum_last_axis(const Tensor& a) {
  if (a.rank() < 1) throw ConfigError("sum_last_axis needs rank >= 1");
  int64_t n = a.extent(-1);
  int64_t rows = a.numel() / n;
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows, 0.0);
  const auto& av = a.values();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < n; ++i) out[r] += av[r * n + i];
  finalize_values(out);
  Tensor result(make_data(std::move(out_shape), std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, rows, n]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t i = 0; i < n; ++i) ac.data()->grad[r * n + i] += g[r];
  });
  return result;
}

// --------------------------------------------------------------- gathers

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ConfigError("gather_rows: table must be rank 2");
  int64_t v = table.extent(0), d = table.extent(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ConfigError("gather_rows: id " + std::to_string(id) +
                        " outside table of " + std::to_string(v) + " rows");
  int64_t n = static_cast<int64_t>(ids.size());
  std::vector<double> out(n * d);
  const auto& tv = table.values();
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(tv.data() + static_cast<int64_t>(ids[i]) * d, d,
                out.data() + i * d);
  Tensor result(make_data({n, d}, std::move(out)));
  Tensor tc = table;
  maybe_record(result, {&table}, [tc, result, ids, n, d]() {
    ensure_grad(*tc.data());
    const auto& g = result.data()->grad;
    for (int64_t i = 0; i < n; ++i) {
      double* dst = tc.data()->grad.data() + static_cast<int64_t>(ids[i]) * d;
      const double* src = g.data() + i * d;
      for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  });
  return result;
}

Tensor gather_index_last(const Tensor& a, const std::vector<int>& ids) {
  int64_t v = a.extent(-1);
  int64_t rows = a.numel() / v;
  if (static_cast<int64_t>(ids.size()) != rows)
    throw ConfigError("gather_index_last: need one id per leading position");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ConfigError("gather_index_last: id " + std::to_string(id) +
                        " out of range " + std::to_string(v));
  std::vector<int64_t> out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  std::vector<double> out(rows);
  const auto& av = a.values();
  for (int64_t r = 0; r < rows; ++r) out[r] = av[r * v + ids[r]];
  Tensor result(make_data(std::move(out_shape), std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, ids, rows, v]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    for (int64_t r = 0; r < rows; ++r)
      ac.data()->grad[r * v + ids[r]] += g[r];
  });
  return result;
}

Tensor slice_rows(const Tensor& a, int64_t begin, int64_t end) {
  int64_t rows = a.extent(0);
  if (begin < 0 || end > rows || begin > end)
    throw ConfigError("slice_rows: bad range [" + std::to_string(begin) + "," +
                      std::to_string(end) + ") of " + std::to_string(rows));
  int64_t rowsize = a.numel() / rows;
  std::vector<int64_t> out_shape = a.shape();
  out_shape[0] = end - begin;
  std::vector<double> out(
      a.values().begin() + begin * rowsize,
      a.values().begin() + end * rowsize);
  Tensor result(make_data(std::move(out_shape), std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, begin, end, rowsize]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    double* dst = ac.data()->grad.data() + begin * rowsize;
    for (int64_t i = 0; i < (end - begin) * rowsize; ++i) dst[i] += g[i];
  });
  return result;
}

// ---------------------------------------------------------- head reshape

Tensor split_heads(const Tensor& a, int heads) {
  if (a.rank() != 2) throw ConfigError("split_heads: input must be rank 2");
  int64_t t = a.extent(0), d = a.extent(1);
  if (d % heads != 0) throw ConfigError("split_heads: width not divisible");
  int64_t dk = d / heads;
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < dk; ++j)
        out[(h * t + i) * dk + j] = av[i * d + h * dk + j];
  Tensor result(make_data({heads, t, dk}, std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, heads, t, d, dk]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < dk; ++j)
          ac.data()->grad[i * d + h * dk + j] += g[(h * t + i) * dk + j];
  });
  return result;
}

Tensor merge_heads(const Tensor& a) {
  if (a.rank() != 3) throw ConfigError("merge_heads: input must be rank 3");
  int64_t heads = a.extent(0), t = a.extent(1), dk = a.extent(2);
  int64_t d = heads * dk;
  std::vector<double> out(a.numel());
  const auto& av = a.values();
  for (int64_t h = 0; h < heads; ++h)
    for (int64_t i = 0; i < t; ++i)
      for (int64_t j = 0; j < dk; ++j)
        out[i * d + h * dk + j] = av[(h * t + i) * dk + j];
  Tensor result(make_data({t, d}, std::move(out)));
  Tensor ac = a;
  maybe_record(result, {&a}, [ac, result, heads, t, d, dk]() {
    ensure_grad(*ac.data());
    const auto& g = result.data()->grad;
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < dk; ++j)
          ac.data()->grad[(h * t + i) * dk + j] += g[i * d + h * dk + j];
  });
  return result;
}

// ----------------------------------------------------------------- conv1d

int64_t conv1d_out_len(int64_t in_len, int kernel, int stride, int pad) {
  return (in_len + 2 * pad - kernel) / stride + 1;
}

Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad) {
  if (x.rank() != 2 || w.rank() != 3)
    throw ConfigError("conv1d: x must be [T,Cin], w must be [K,Cin,Cout]");
  int64_t t_in = x.extent(0), cin = x.extent(1);
  int64_t k = w.extent(0), cout = w.extent(2);
  if (w.extent(1) != cin) throw ConfigError("conv1d: channel mismatch");
  if (b.numel() != cout) throw ConfigError("conv1d: bias size mismatch");
  if (t_in < k) throw ConfigError("conv1d: input shorter than kernel");
  int64_t t_out = conv1d_out_len(t_in, static_cast<int>(k), stride, pad);
  std::vector<double> out(t_out * cout);
  const auto& xv = x.values();
  const auto& wv = w.values();
  const auto& bv = b.values();
  for (int64_t t = 0; t < t_out; ++t) {
    for (int64_t co = 0; co < cout; ++co) out[t * cout + co] = bv[co];
    for (int64_t j = 0; j < k; ++j) {
      int64_t u = t * stride + j - pad;
      if (u < 0 || u >= t_in) continue;
      const double* xr = xv.data() + u * cin;
      const double* wr = wv.data() + j * cin * cout;
      for (int64_t ci = 0; ci < cin; ++ci) {
        double xc = xr[ci];
        const double* wc = wr + ci * cout;
        for (int64_t co = 0; co < cout; ++co)
          out[t * cout + co] += xc * wc[co];
      }
    }
  }
  finalize_values(out);
  Tensor result(make_data({t_out, cout}, std::move(out)));
  Tensor xc = x, wc = w, bc = b;
  maybe_record(result, {&x, &w, &b},
               [xc, wc, bc, result, t_in, t_out, cin, cout, k, stride, pad]() {
    const auto& g = result.data()->grad;
    bool need_x = xc.data()->grad_path;
    bool need_w = wc.data()->grad_path;
    bool need_b = bc.data()->grad_path;
    if (need_x) ensure_grad(*xc.data());
    if (need_w) ensure_grad(*wc.data());
    if (need_b) ensure_grad(*bc.data());
    for (int64_t t = 0; t < t_out; ++t) {
      const double* gr = g.data() + t * cout;
      if (need_b)
        for (int64_t co = 0; co < cout; ++co) bc.data()->grad[co] += gr[co];
      for (int64_t j = 0; j < k; ++j) {
        int64_t u = t * stride + j - pad;
        if (u < 0 || u >= t_in) continue;
        for (int64_t ci = 0; ci < cin; ++ci) {
          double xval = xc.data()->values[u * cin + ci];
          const double* wrow = wc.data()->values.data() + (j * cin + ci) * cout;
          double dx = 0.0;
          for (int64_t co = 0; co < cout; ++co) {
            if (need_w) wc.data()->grad[(j * cin + ci) * cout + co] += xval * gr[co];
            dx += wrow[co] * gr[co];
          }
          if (need_x) xc.data()->grad[u * cin + ci] += dx;
        }
      }
    }
  });
  return result;
}

}  // namespace tdast
