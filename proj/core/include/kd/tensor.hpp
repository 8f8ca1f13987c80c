#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kd {

using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

class Tape;

namespace detail {
struct TensorData {
  Shape shape;
  std::vector<double> v;
  std::vector<double> g;  // empty until backward reaches this tensor
  bool param = false;
};
void ensure_grad(TensorData& d);
}  // namespace detail

/// Dense row-major tensor. Copies are shallow (shared storage); a tensor
/// produced by an op on a taped input is itself taped so gradients flow
/// back through it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, Tape* tape = nullptr);

  static Tensor zeros(Shape shape, Tape* tape = nullptr);
  static Tensor full(Shape shape, double value, Tape* tape = nullptr);
  static Tensor scalar(double value, Tape* tape = nullptr);

  const Shape& shape() const { return d_->shape; }
  int64_t numel() const { return static_cast<int64_t>(d_->v.size()); }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }

  std::vector<double>& values() { return d_->v; }
  const std::vector<double>& values() const { return d_->v; }

  /// Gradient accumulated by the last backward pass; allocated (zeroed)
  /// on first access.
  std::vector<double>& grad();
  bool has_grad() const { return d_ && !d_->g.empty(); }
  void zero_grad();

  bool defined() const { return static_cast<bool>(d_); }
  bool is_param() const { return d_->param; }
  void mark_param() { d_->param = true; }

  Tape* tape() const { return tape_; }
  bool tracked() const { return tape_ != nullptr; }
  /// Same underlying storage (aliasing identity, not value equality).
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

  double item() const;
  double at(int i, int j) const;  // rank-2 convenience

  bool all_finite() const;

  /// Deep copy with no tape attachment (a frozen constant).
  Tensor detached_copy() const;

  std::shared_ptr<detail::TensorData> data() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
  Tape* tape_ = nullptr;
};

/// Records backward closures in execution order; backward() replays them
/// in reverse. One tape per training context, never shared.
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }
  /// Seeds d(loss)/d(loss) = 1 and propagates to every reachable tensor.
  void backward(const Tensor& loss);
  void clear() { ops_.clear(); }
  size_t size() const { return ops_.size(); }

 private:
  std::vector<std::function<void()>> ops_;
};

/// Creates a parameter tensor attached to a tape.
Tensor make_param(Shape shape, std::vector<double> values, Tape& tape);

enum class Activation { relu, gelu };

// ---- differentiable primitives -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Elementwise m*x + c.
Tensor affine(const Tensor& a, double m, double c);
inline Tensor scale(const Tensor& a, double m) { return affine(a, m, 0.0); }
/// Adds a length-d row vector to every row of an [m x d] matrix.
Tensor add_row_broadcast(const Tensor& m, const Tensor& row);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& a, int start, int count);
Tensor slice_rows(const Tensor& a, int start, int count);
Tensor reshape(const Tensor& a, Shape shape);
/// Row lookup with scatter-add backward into the table.
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);
Tensor reduce_sum(const Tensor& a);
Tensor reduce_mean(const Tensor& a);
/// Per-row sum of an [m x n] matrix, result [m x 1].
Tensor row_sums(const Tensor& a);
/// Multiplies row i of [m x n] by col[i] ([m x 1]).
Tensor mul_rows(const Tensor& a, const Tensor& col);
/// Natural log with inputs clamped at eps.
Tensor log_clamped(const Tensor& a, double eps = 1e-12);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor reciprocal(const Tensor& a);
/// Softmax over the trailing dimension with temperature divisor,
/// stabilized by per-row max subtraction.
Tensor softmax_rows(const Tensor& a, double temperature = 1.0);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor activation(const Tensor& a, Activation kind);

// ---- non-differentiable helpers ------------------------------------------

namespace detail {
// C[m x n] = A[m x k] * B[k x n], raw row-major buffers.
void matmul_raw(const double* a, const double* b, double* c, int m, int k,
                int n);
// C[m x n] += A[m x k] * B[n x k]^T
void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k,
                   int n);
// C[k x n] += A[m x k]^T * B[m x n]
void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k,
                   int n);
}  // namespace detail

}  // namespace kd
