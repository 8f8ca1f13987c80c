#include "kd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kd {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << 'x';
    os << s[i];
  }
  os << ']';
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

namespace detail {
void ensure_grad(TensorData& d) {
  if (d.g.empty()) d.g.assign(d.v.size(), 0.0);
}
}  // namespace detail

Tensor::Tensor(Shape shape, std::vector<double> values, Tape* tape)
    : d_(std::make_shared<detail::TensorData>()), tape_(tape) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  d_->shape = std::move(shape);
  d_->v = std::move(values);
}

Tensor Tensor::zeros(Shape shape, Tape* tape) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), 0.0);
  return Tensor(std::move(shape), std::move(v), tape);
}

Tensor Tensor::full(Shape shape, double value, Tape* tape) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)), value);
  return Tensor(std::move(shape), std::move(v), tape);
}

Tensor Tensor::scalar(double value, Tape* tape) {
  return Tensor(Shape{1}, std::vector<double>{value}, tape);
}

std::vector<double>& Tensor::grad() {
  detail::ensure_grad(*d_);
  return d_->g;
}

void Tensor::zero_grad() {
  if (d_ && !d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item() on non-scalar tensor of shape " + shape_str(shape()));
  return d_->v[0];
}

double Tensor::at(int i, int j) const {
  return d_->v[static_cast<size_t>(i) * static_cast<size_t>(dim(1)) +
               static_cast<size_t>(j)];
}

bool Tensor::all_finite() const {
  for (double x : d_->v)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor Tensor::detached_copy() const {
  return Tensor(d_->shape, d_->v, nullptr);
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw ValueError("backward requires a scalar loss, got shape " +
                     shape_str(loss.shape()));
  if (loss.tape() != this)
    throw ValueError("loss tensor is not recorded on this tape");
  auto d = loss.data();
  detail::ensure_grad(*d);
  d->g[0] += 1.0;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

Tensor make_param(Shape shape, std::vector<double> values, Tape& tape) {
  Tensor t(std::move(shape), std::move(values), &tape);
  t.mark_param();
  return t;
}

namespace detail {

void matmul_raw(const double* a, const double* b, double* c, int m, int k,
                int n) {
  std::fill(c, c + static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void matmul_nt_acc(const double* a, const double* b, double* c, int m, int k,
                   int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    double* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<size_t>(j) * k;
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

void matmul_tn_acc(const double* a, const double* b, double* c, int m, int k,
                   int n) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<size_t>(i) * k;
    const double* bi = b + static_cast<size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double av = ai[p];
      double* cp = c + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) cp[j] += av * bi[j];
    }
  }
}

namespace {

Tape* join_tapes(const Tensor& a, const Tensor& b) {
  Tape* ta = a.tape();
  Tape* tb = b.tape();
  if (ta && tb && ta != tb)
    throw ValueError("operands belong to different tapes");
  return ta ? ta : tb;
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2)
    throw ShapeError(std::string(op) + " requires a rank-2 tensor, got " +
                     shape_str(a.shape()));
}

}  // namespace
}  // namespace detail

using detail::ensure_grad;
using detail::join_tapes;
using detail::require_rank2;

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul dimension mismatch: " + shape_str(a.shape()) +
                     " * " + shape_str(b.shape()));
  Tape* tape = join_tapes(a, b);
  Tensor out = Tensor::zeros({m, n}, tape);
  detail::matmul_raw(a.values().data(), b.values().data(), out.values().data(),
                     m, k, n);
  if (tape) {
    tape->record([ad = a.data(), bd = b.data(), od = out.data(), m, k, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      ensure_grad(*bd);
      // dA += G * B^T ; dB += A^T * G
      detail::matmul_nt_acc(od->g.data(), bd->v.data(), ad->g.data(), m, n, k);
      detail::matmul_tn_acc(ad->v.data(), od->g.data(), bd->g.data(), m, k, n);
    });
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m}, a.tape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.values()[static_cast<size_t>(j) * m + i] = a.at(i, j);
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), m, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ad->g[static_cast<size_t>(i) * n + j] +=
              od->g[static_cast<size_t>(j) * m + i];
    });
  }
  return out;
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw kd::ShapeError(std::string(op) + " shape mismatch: " +
                         kd::shape_str(a.shape()) + " vs " +
                         kd::shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tape* tape = join_tapes(a, b);
  Tensor out = Tensor::zeros(a.shape(), tape);
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] + b.values()[i];
  if (tape) {
    tape->record([ad = a.data(), bd = b.data(), od = out.data(), n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      ensure_grad(*bd);
      for (size_t i = 0; i < n; ++i) {
        ad->g[i] += od->g[i];
        bd->g[i] += od->g[i];
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tape* tape = join_tapes(a, b);
  Tensor out = Tensor::zeros(a.shape(), tape);
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = a.values()[i] * b.values()[i];
  if (tape) {
    tape->record([ad = a.data(), bd = b.data(), od = out.data(), n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      ensure_grad(*bd);
      for (size_t i = 0; i < n; ++i) {
        ad->g[i] += od->g[i] * bd->v[i];
        bd->g[i] += od->g[i] * ad->v[i];
      }
    });
  }
  return out;
}

Tensor affine(const Tensor& a, double m, double c) {
  Tensor out = Tensor::zeros(a.shape(), a.tape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = m * a.values()[i] + c;
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), m, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (size_t i = 0; i < n; ++i) ad->g[i] += m * od->g[i];
    });
  }
  return out;
}

Tensor add_row_broadcast(const Tensor& m, const Tensor& row) {
  require_rank2(m, "add_row_broadcast");
  const int rows = m.dim(0), d = m.dim(1);
  if (row.numel() != d)
    throw ShapeError("bias length " + std::to_string(row.numel()) +
                     " does not match row width " + std::to_string(d));
  Tape* tape = join_tapes(m, row);
  Tensor out = Tensor::zeros(m.shape(), tape);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < d; ++j)
      out.values()[static_cast<size_t>(i) * d + j] =
          m.values()[static_cast<size_t>(i) * d + j] + row.values()[static_cast<size_t>(j)];
  if (tape) {
    tape->record([md = m.data(), rd = row.data(), od = out.data(), rows, d] {
      if (od->g.empty()) return;
      ensure_grad(*md);
      ensure_grad(*rd);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < d; ++j) {
          const double g = od->g[static_cast<size_t>(i) * d + j];
          md->g[static_cast<size_t>(i) * d + j] += g;
          rd->g[static_cast<size_t>(j)] += g;
        }
    });
  }
  return out;
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols of zero tensors");
  const int rows = parts[0].dim(0);
  int total = 0;
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.dim(0) != rows)
      throw ShapeError("concat_cols row mismatch: " + shape_str(p.shape()));
    total += p.dim(1);
    if (p.tape()) {
      if (tape && tape != p.tape())
        throw ValueError("operands belong to different tapes");
      tape = p.tape();
    }
  }
  Tensor out = Tensor::zeros({rows, total}, tape);
  int off = 0;
  for (const Tensor& p : parts) {
    const int w = p.dim(1);
    for (int i = 0; i < rows; ++i)
      for (int j = 0; j < w; ++j)
        out.values()[static_cast<size_t>(i) * total + off + j] = p.at(i, j);
    off += w;
  }
  if (tape) {
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    std::vector<int> widths;
    for (const Tensor& p : parts) {
      pds.push_back(p.data());
      widths.push_back(p.dim(1));
    }
    tape->record([pds, widths, od = out.data(), rows, total] {
      if (od->g.empty()) return;
      int off = 0;
      for (size_t k = 0; k < pds.size(); ++k) {
        ensure_grad(*pds[k]);
        const int w = widths[k];
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < w; ++j)
            pds[k]->g[static_cast<size_t>(i) * w + j] +=
                od->g[static_cast<size_t>(i) * total + off + j];
        off += w;
      }
    });
  }
  return out;
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows of zero tensors");
  const int w = parts[0].dim(1);
  int total = 0;
  Tape* tape = nullptr;
  for (const Tensor& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.dim(1) != w)
      throw ShapeError("concat_rows column mismatch: " + shape_str(p.shape()));
    total += p.dim(0);
    if (p.tape()) {
      if (tape && tape != p.tape())
        throw ValueError("operands belong to different tapes");
      tape = p.tape();
    }
  }
  Tensor out = Tensor::zeros({total, w}, tape);
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.values().begin(), p.values().end(), out.values().begin() + off);
    off += p.values().size();
  }
  if (tape) {
    std::vector<std::shared_ptr<detail::TensorData>> pds;
    for (const Tensor& p : parts) pds.push_back(p.data());
    tape->record([pds, od = out.data()] {
      if (od->g.empty()) return;
      size_t off = 0;
      for (const auto& pd : pds) {
        ensure_grad(*pd);
        for (size_t i = 0; i < pd->g.size(); ++i) pd->g[i] += od->g[off + i];
        off += pd->g.size();
      }
    });
  }
  return out;
}

Tensor slice_cols(const Tensor& a, int start, int count) {
  require_rank2(a, "slice_cols");
  const int rows = a.dim(0), w = a.dim(1);
  if (start < 0 || count <= 0 || start + count > w)
    throw ShapeError("slice_cols [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_str(a.shape()));
  Tensor out = Tensor::zeros({rows, count}, a.tape());
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < count; ++j)
      out.values()[static_cast<size_t>(i) * count + j] = a.at(i, start + j);
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), rows, w, start, count] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < count; ++j)
          ad->g[static_cast<size_t>(i) * w + start + j] +=
              od->g[static_cast<size_t>(i) * count + j];
    });
  }
  return out;
}

Tensor slice_rows(const Tensor& a, int start, int count) {
  require_rank2(a, "slice_rows");
  const int rows = a.dim(0), w = a.dim(1);
  if (start < 0 || count <= 0 || start + count > rows)
    throw ShapeError("slice_rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") out of range for " +
                     shape_str(a.shape()));
  Tensor out = Tensor::zeros({count, w}, a.tape());
  std::copy_n(a.values().begin() + static_cast<size_t>(start) * w,
              static_cast<size_t>(count) * w, out.values().begin());
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), w, start, count] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (size_t i = 0; i < static_cast<size_t>(count) * w; ++i)
        ad->g[static_cast<size_t>(start) * w + i] += od->g[i];
    });
  }
  return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  Tensor out = Tensor(std::move(shape), a.values(), a.tape());
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data()] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (size_t i = 0; i < od->g.size(); ++i) ad->g[i] += od->g[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& table, const std::vector<int>& ids) {
  require_rank2(table, "gather_rows");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ValueError("row id " + std::to_string(id) +
                       " out of range for table " + shape_str(table.shape()));
  const int n = static_cast<int>(ids.size());
  Tensor out = Tensor::zeros({n, d}, table.tape());
  for (int i = 0; i < n; ++i)
    std::copy_n(table.values().begin() + static_cast<size_t>(ids[static_cast<size_t>(i)]) * d, d,
                out.values().begin() + static_cast<size_t>(i) * d);
  if (table.tape()) {
    table.tape()->record([td = table.data(), od = out.data(), ids, d] {
      if (od->g.empty()) return;
      ensure_grad(*td);
      for (size_t i = 0; i < ids.size(); ++i)
        for (int j = 0; j < d; ++j)
          td->g[static_cast<size_t>(ids[i]) * d + j] += od->g[i * d + j];
    });
  }
  return out;
}

Tensor reduce_sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.values()) s += x;
  Tensor out = Tensor::scalar(s, a.tape());
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data()] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (double& g : ad->g) g += od->g[0];
    });
  }
  return out;
}

Tensor reduce_mean(const Tensor& a) {
  return scale(reduce_sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor row_sums(const Tensor& a) {
  require_rank2(a, "row_sums");
  const int m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({m, 1}, a.tape());
  for (int i = 0; i < m; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += a.at(i, j);
    out.values()[static_cast<size_t>(i)] = s;
  }
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), m, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          ad->g[static_cast<size_t>(i) * n + j] += od->g[static_cast<size_t>(i)];
    });
  }
  return out;
}

Tensor mul_rows(const Tensor& a, const Tensor& col) {
  require_rank2(a, "mul_rows");
  const int m = a.dim(0), n = a.dim(1);
  if (col.numel() != m)
    throw ShapeError("mul_rows column length " + std::to_string(col.numel()) +
                     " does not match " + std::to_string(m) + " rows");
  Tape* tape = join_tapes(a, col);
  Tensor out = Tensor::zeros(a.shape(), tape);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out.values()[static_cast<size_t>(i) * n + j] =
          a.at(i, j) * col.values()[static_cast<size_t>(i)];
  if (tape) {
    tape->record([ad = a.data(), cd = col.data(), od = out.data(), m, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      ensure_grad(*cd);
      for (int i = 0; i < m; ++i) {
        double cs = 0.0;
        for (int j = 0; j < n; ++j) {
          const size_t idx = static_cast<size_t>(i) * n + j;
          ad->g[idx] += od->g[idx] * cd->v[static_cast<size_t>(i)];
          cs += od->g[idx] * ad->v[idx];
        }
        cd->g[static_cast<size_t>(i)] += cs;
      }
    });
  }
  return out;
}

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dydx) {
  Tensor out = Tensor::zeros(a.shape(), a.tape());
  const size_t n = a.values().size();
  for (size_t i = 0; i < n; ++i) out.values()[i] = fwd(a.values()[i]);
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), dydx, n] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (size_t i = 0; i < n; ++i)
        ad->g[i] += od->g[i] * dydx(ad->v[i], od->v[i]);
    });
  }
  return out;
}

}  // namespace

Tensor log_clamped(const Tensor& a, double eps) {
  return unary_op(
      a, [eps](double x) { return std::log(std::max(x, eps)); },
      [eps](double x, double) { return x > eps ? 1.0 / x : 0.0; });
}

Tensor exp(const Tensor& a) {
  Tensor out = unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
  if (!out.all_finite())
    throw ValueError("exp overflowed to a non-finite value");
  return out;
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor reciprocal(const Tensor& a) {
  return unary_op(
      a, [](double x) { return 1.0 / x; },
      [](double, double y) { return -y * y; });
}

Tensor softmax_rows(const Tensor& a, double temperature) {
  if (!(temperature > 0.0))
    throw ValueError("softmax temperature must be positive, got " +
                     std::to_string(temperature));
  if (a.rank() < 1) throw ShapeError("softmax_rows on rank-0 tensor");
  const int n = a.shape().back();
  const int rows = static_cast<int>(a.numel() / n);
  Tensor out = Tensor::zeros(a.shape(), a.tape());
  for (int r = 0; r < rows; ++r) {
    const double* x = a.values().data() + static_cast<size_t>(r) * n;
    double* y = out.values().data() + static_cast<size_t>(r) * n;
    double mx = x[0];
    for (int j = 1; j < n; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) {
      y[j] = std::exp((x[j] - mx) / temperature);
      z += y[j];
    }
    for (int j = 0; j < n; ++j) y[j] /= z;
  }
  if (a.tape()) {
    a.tape()->record([ad = a.data(), od = out.data(), rows, n, temperature] {
      if (od->g.empty()) return;
      ensure_grad(*ad);
      for (int r = 0; r < rows; ++r) {
        const double* y = od->v.data() + static_cast<size_t>(r) * n;
        const double* g = od->g.data() + static_cast<size_t>(r) * n;
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += g[j] * y[j];
        double* dx = ad->g.data() + static_cast<size_t>(r) * n;
        for (int j = 0; j < n; ++j)
          dx[j] += y[j] * (g[j] - dot) / temperature;
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  if (x.rank() < 1) throw ShapeError("layer_norm on rank-0 tensor");
  const int d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm affine params must have length " +
                     std::to_string(d));
  const int rows = static_cast<int>(x.numel() / d);
  Tape* tape = join_tapes(x, gamma);
  if (beta.tape()) {
    if (tape && tape != beta.tape())
      throw ValueError("operands belong to different tapes");
    if (!tape) tape = beta.tape();
  }
  Tensor out = Tensor::zeros(x.shape(), tape);
  std::vector<double> inv_sigma(static_cast<size_t>(rows));
  std::vector<double> xhat(x.values().size());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + static_cast<size_t>(r) * d;
    double mean = 0.0;
    for (int j = 0; j < d; ++j) mean += xr[j];
    mean /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    inv_sigma[static_cast<size_t>(r)] = is;
    double* yr = out.values().data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) {
      const double xh = (xr[j] - mean) * is;
      xhat[static_cast<size_t>(r) * d + j] = xh;
      yr[j] = gamma.values()[static_cast<size_t>(j)] * xh +
              beta.values()[static_cast<size_t>(j)];
    }
  }
  if (tape) {
    tape->record([xd = x.data(), gd = gamma.data(), bd = beta.data(),
                  od = out.data(), rows, d, inv_sigma = std::move(inv_sigma),
                  xhat = std::move(xhat)] {
      if (od->g.empty()) return;
      ensure_grad(*xd);
      ensure_grad(*gd);
      ensure_grad(*bd);
      for (int r = 0; r < rows; ++r) {
        const double* g = od->g.data() + static_cast<size_t>(r) * d;
        const double* xh = xhat.data() + static_cast<size_t>(r) * d;
        const double is = inv_sigma[static_cast<size_t>(r)];
        double sum_gg = 0.0, sum_ggx = 0.0;
        for (int j = 0; j < d; ++j) {
          const double gg = g[j] * gd->v[static_cast<size_t>(j)];
          sum_gg += gg;
          sum_ggx += gg * xh[j];
        }
        for (int j = 0; j < d; ++j) {
          const double gg = g[j] * gd->v[static_cast<size_t>(j)];
          xd->g[static_cast<size_t>(r) * d + j] +=
              is * (gg - sum_gg / d - xh[j] * sum_ggx / d);
          gd->g[static_cast<size_t>(j)] += g[j] * xh[j];
          bd->g[static_cast<size_t>(j)] += g[j];
        }
      }
    });
  }
  return out;
}

Tensor activation(const Tensor& a, Activation kind) {
  switch (kind) {
    case Activation::relu:
      return unary_op(
          a, [](double x) { return x > 0.0 ? x : 0.0; },
          [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
    case Activation::gelu: {
      constexpr double inv_sqrt2 = 0.7071067811865475244;
      constexpr double inv_sqrt2pi = 0.3989422804014326779;
      return unary_op(
          a,
          [=](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
          [=](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
          });
    }
  }
  throw ValueError("unknown activation kind");
}

}  // namespace kd
