#include "hnf/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace hnf {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<const std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), 0.0));
}

Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double v) {
  auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(static_cast<size_t>(n), v));
}

Tensor Tensor::row(std::vector<double> values) {
  auto n = static_cast<int64_t>(values.size());
  return Tensor({1, n}, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
  auto n = static_cast<int64_t>(values.size());
  return Tensor({n, 1}, std::move(values));
}

Tensor Tensor::matrix(int64_t rows, int64_t cols, std::vector<double> values) {
  return Tensor({rows, cols}, std::move(values));
}

int64_t Tensor::size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }

int64_t Tensor::rows() const {
  if (ndim() != 2) throw std::invalid_argument("rows(): tensor is not 2-D, shape " + shape_str(shape_));
  return shape_[0];
}

int64_t Tensor::cols() const {
  if (ndim() != 2) throw std::invalid_argument("cols(): tensor is not 2-D, shape " + shape_str(shape_));
  return shape_[1];
}

double Tensor::item() const {
  if (size() != 1) throw std::invalid_argument("item(): tensor is not a scalar, shape " + shape_str(shape_));
  return (*data_)[0];
}

double Tensor::at(int64_t r, int64_t c) const {
  if (ndim() != 2) throw std::invalid_argument("at(): tensor is not 2-D, shape " + shape_str(shape_));
  return (*data_)[static_cast<size_t>(r * shape_[1] + c)];
}

Tensor Tensor::detach() const {
  Tensor t;
  t.shape_ = shape_;
  t.data_ = data_;
  return t;
}

Tensor stop_gradient(const Tensor& x) { return x.detach(); }

// ---- Tape ----

int Tape::emplace_node(int64_t size, PullFn pull) {
  nodes_.push_back(Node{size, std::move(pull)});
  return static_cast<int>(nodes_.size()) - 1;
}

Tensor Tape::attach(Tensor t, Tape* tape, int node) {
  t.tape_ = tape;
  t.node_ = node;
  return t;
}

Tensor Tape::leaf(const Tensor& value) {
  if (!value.defined()) throw std::invalid_argument("leaf: undefined tensor");
  int node = emplace_node(value.size(), PullFn{});
  return attach(value.detach(), this, node);
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) {
    throw std::invalid_argument("backward: loss was not produced on this tape");
  }
  if (!loss.is_scalar()) {
    throw std::invalid_argument("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  grads_.assign(nodes_.size(), {});
  grads_[static_cast<size_t>(loss.node())] = {1.0};
  for (int i = loss.node(); i >= 0; --i) {
    auto& g = grads_[static_cast<size_t>(i)];
    if (g.empty()) continue;
    auto& pull = nodes_[static_cast<size_t>(i)].pull;
    if (pull) pull(g, *this);
  }
  ran_backward_ = true;
}

void Tape::accumulate(int node, const std::vector<double>& g) {
  if (node < 0) return;
  auto& buf = grads_[static_cast<size_t>(node)];
  if (buf.empty()) {
    buf = g;
    return;
  }
  for (size_t i = 0; i < g.size(); ++i) buf[i] += g[i];
}

void Tape::accumulate_at(int node, int64_t index, double g) {
  if (node < 0) return;
  auto& buf = grads_[static_cast<size_t>(node)];
  if (buf.empty()) buf.assign(static_cast<size_t>(nodes_[static_cast<size_t>(node)].size), 0.0);
  buf[static_cast<size_t>(index)] += g;
}

Tensor Tape::grad(const Tensor& t) const {
  if (t.tape() != this) throw std::invalid_argument("grad: tensor is not on this tape");
  if (!ran_backward_) throw std::logic_error("grad: backward() has not run on this tape");
  const auto& buf = grads_[static_cast<size_t>(t.node())];
  if (buf.empty()) return Tensor::zeros(t.shape());
  return Tensor(t.shape(), buf);
}

// ---- op helpers ----

namespace {

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected a 2-D tensor, got shape " + shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

Tape* result_tape(std::initializer_list<const Tensor*> inputs) {
  Tape* tape = nullptr;
  for (const Tensor* x : inputs) {
    if (x->tape() == nullptr) continue;
    if (tape == nullptr) {
      tape = x->tape();
    } else if (tape != x->tape()) {
      throw std::invalid_argument("op mixes tensors from two different tapes");
    }
  }
  return tape;
}

Tensor finish(Shape shape, std::vector<double> data, Tape* tape, Tape::PullFn pull) {
  Tensor out(std::move(shape), std::move(data));
  if (tape != nullptr) {
    int node = tape->emplace_node(out.size(), std::move(pull));
    out = Tape::attach(std::move(out), tape, node);
  }
  return out;
}

using DataPtr = std::shared_ptr<const std::vector<double>>;

// Elementwise unary: y_i = f(x_i), dx_i = gy_i * dfac(x_i, y_i).
template <class F, class DF>
Tensor unary_op(const Tensor& a, F f, DF dfac) {
  const auto& x = a.values();
  std::vector<double> y(x.size());
  for (size_t i = 0; i < x.size(); ++i) y[i] = f(x[i]);
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    DataPtr xd = a.shared_values();
    DataPtr yd = std::make_shared<const std::vector<double>>(y);
    pull = [an, xd, yd, dfac](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size());
      for (size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * dfac((*xd)[i], (*yd)[i]);
      t.accumulate(an, g);
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

// Elementwise binary on equal shapes: dL/da_i = gy_i*fa(a_i,b_i), same for b.
template <class F, class FA, class FB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, FA fa, FB fb) {
  require_same_shape(a, b, name);
  const auto& xa = a.values();
  const auto& xb = b.values();
  std::vector<double> y(xa.size());
  for (size_t i = 0; i < xa.size(); ++i) y[i] = f(xa[i], xb[i]);
  Tape* tape = result_tape({&a, &b});
  Tape::PullFn pull;
  if (tape) {
    int an = a.requires_grad() ? a.node() : -1;
    int bn = b.requires_grad() ? b.node() : -1;
    DataPtr ad = a.shared_values();
    DataPtr bd = b.shared_values();
    pull = [an, bn, ad, bd, fa, fb](const std::vector<double>& gy, Tape& t) {
      if (an >= 0) {
        std::vector<double> g(gy.size());
        for (size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * fa((*ad)[i], (*bd)[i]);
        t.accumulate(an, g);
      }
      if (bn >= 0) {
        std::vector<double> g(gy.size());
        for (size_t i = 0; i < gy.size(); ++i) g[i] = gy[i] * fb((*ad)[i], (*bd)[i]);
        t.accumulate(bn, g);
      }
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

}  // namespace

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions do not match: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<double> out(static_cast<size_t>(m * n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      const double aip = A[static_cast<size_t>(i * k + p)];
      for (int64_t j = 0; j < n; ++j) {
        out[static_cast<size_t>(i * n + j)] += aip * B[static_cast<size_t>(p * n + j)];
      }
    }
  }
  Tape* tape = result_tape({&a, &b});
  Tape::PullFn pull;
  if (tape) {
    int an = a.requires_grad() ? a.node() : -1;
    int bn = b.requires_grad() ? b.node() : -1;
    DataPtr ad = a.shared_values();
    DataPtr bd = b.shared_values();
    pull = [an, bn, ad, bd, m, k, n](const std::vector<double>& gy, Tape& t) {
      if (an >= 0) {  // dA = gy . B^T
        std::vector<double> ga(static_cast<size_t>(m * k), 0.0);
        for (int64_t i = 0; i < m; ++i) {
          for (int64_t j = 0; j < n; ++j) {
            const double g = gy[static_cast<size_t>(i * n + j)];
            for (int64_t p = 0; p < k; ++p) {
              ga[static_cast<size_t>(i * k + p)] += g * (*bd)[static_cast<size_t>(p * n + j)];
            }
          }
        }
        t.accumulate(an, ga);
      }
      if (bn >= 0) {  // dB = A^T . gy
        std::vector<double> gb(static_cast<size_t>(k * n), 0.0);
        for (int64_t p = 0; p < k; ++p) {
          for (int64_t i = 0; i < m; ++i) {
            const double aip = (*ad)[static_cast<size_t>(i * k + p)];
            for (int64_t j = 0; j < n; ++j) {
              gb[static_cast<size_t>(p * n + j)] += aip * gy[static_cast<size_t>(i * n + j)];
            }
          }
        }
        t.accumulate(bn, gb);
      }
    };
  }
  return finish({m, n}, std::move(out), tape, std::move(pull));
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double s) {
  return unary_op(
      a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor add_rowvec(const Tensor& a, const Tensor& b) {
  require_2d(a, "add_rowvec");
  require_2d(b, "add_rowvec");
  if (b.rows() != 1 || b.cols() != a.cols()) {
    throw std::invalid_argument("add_rowvec: expected row vector [1, " + std::to_string(a.cols()) +
                                "], got shape " + shape_str(b.shape()));
  }
  const int64_t r = a.rows(), c = a.cols();
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<double> y(A.size());
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) {
      y[static_cast<size_t>(i * c + j)] = A[static_cast<size_t>(i * c + j)] + B[static_cast<size_t>(j)];
    }
  }
  Tape* tape = result_tape({&a, &b});
  Tape::PullFn pull;
  if (tape) {
    int an = a.requires_grad() ? a.node() : -1;
    int bn = b.requires_grad() ? b.node() : -1;
    pull = [an, bn, r, c](const std::vector<double>& gy, Tape& t) {
      if (an >= 0) t.accumulate(an, gy);
      if (bn >= 0) {
        std::vector<double> gb(static_cast<size_t>(c), 0.0);
        for (int64_t i = 0; i < r; ++i) {
          for (int64_t j = 0; j < c; ++j) gb[static_cast<size_t>(j)] += gy[static_cast<size_t>(i * c + j)];
        }
        t.accumulate(bn, gb);
      }
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  for (double v : a.values()) {
    if (!(v > 0.0)) throw std::domain_error("log: input must be strictly positive, got " + std::to_string(v));
  }
  return unary_op(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      a, [lo](double x) { return x > lo ? x : lo; }, [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  const auto& x = a.values();
  double s = 0.0;
  for (double v : x) s += v;
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    size_t n = x.size();
    pull = [an, n](const std::vector<double>& gy, Tape& t) {
      t.accumulate(an, std::vector<double>(n, gy[0]));
    };
  }
  return finish({1}, {s}, tape, std::move(pull));
}

Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw std::invalid_argument("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.size());
  return mul_scalar(sum(a), inv);
}

Tensor sum(const Tensor& a, int axis) {
  require_2d(a, "sum");
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum: axis must be 0 or 1");
  const int64_t r = a.rows(), c = a.cols();
  const auto& x = a.values();
  std::vector<double> y;
  Shape out_shape;
  if (axis == 0) {
    out_shape = {1, c};
    y.assign(static_cast<size_t>(c), 0.0);
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j) y[static_cast<size_t>(j)] += x[static_cast<size_t>(i * c + j)];
    }
  } else {
    out_shape = {r, 1};
    y.assign(static_cast<size_t>(r), 0.0);
    for (int64_t i = 0; i < r; ++i) {
      for (int64_t j = 0; j < c; ++j) y[static_cast<size_t>(i)] += x[static_cast<size_t>(i * c + j)];
    }
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    pull = [an, r, c, axis](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(static_cast<size_t>(r * c));
      for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) {
          g[static_cast<size_t>(i * c + j)] = axis == 0 ? gy[static_cast<size_t>(j)] : gy[static_cast<size_t>(i)];
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish(std::move(out_shape), std::move(y), tape, std::move(pull));
}

Tensor mean(const Tensor& a, int axis) {
  require_2d(a, "mean");
  const double inv = 1.0 / static_cast<double>(axis == 0 ? a.rows() : a.cols());
  return mul_scalar(sum(a, axis), inv);
}

namespace {

// Shared softmax core over rows of a logical view: the caller passes the
// number of groups and a stride description via lane extraction lambdas.
// Implemented directly for both axes to keep index math simple.
std::vector<double> softmax_forward(const std::vector<double>& x, int64_t r, int64_t c, int axis) {
  std::vector<double> y(x.size());
  if (axis == 1) {
    for (int64_t i = 0; i < r; ++i) {
      double mx = x[static_cast<size_t>(i * c)];
      for (int64_t j = 1; j < c; ++j) mx = std::max(mx, x[static_cast<size_t>(i * c + j)]);
      double z = 0.0;
      for (int64_t j = 0; j < c; ++j) z += std::exp(x[static_cast<size_t>(i * c + j)] - mx);
      for (int64_t j = 0; j < c; ++j) y[static_cast<size_t>(i * c + j)] = std::exp(x[static_cast<size_t>(i * c + j)] - mx) / z;
    }
  } else {
    for (int64_t j = 0; j < c; ++j) {
      double mx = x[static_cast<size_t>(j)];
      for (int64_t i = 1; i < r; ++i) mx = std::max(mx, x[static_cast<size_t>(i * c + j)]);
      double z = 0.0;
      for (int64_t i = 0; i < r; ++i) z += std::exp(x[static_cast<size_t>(i * c + j)] - mx);
      for (int64_t i = 0; i < r; ++i) y[static_cast<size_t>(i * c + j)] = std::exp(x[static_cast<size_t>(i * c + j)] - mx) / z;
    }
  }
  return y;
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  require_2d(a, "softmax");
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  const int64_t r = a.rows(), c = a.cols();
  if ((axis == 1 && c == 0) || (axis == 0 && r == 0)) throw std::invalid_argument("softmax: empty axis");
  for (double v : a.values()) {
    if (!std::isfinite(v)) throw std::domain_error("softmax: non-finite input");
  }
  std::vector<double> y = softmax_forward(a.values(), r, c, axis);
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    DataPtr yd = std::make_shared<const std::vector<double>>(y);
    pull = [an, yd, r, c, axis](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size());
      if (axis == 1) {
        for (int64_t i = 0; i < r; ++i) {
          double dot = 0.0;
          for (int64_t j = 0; j < c; ++j) dot += gy[static_cast<size_t>(i * c + j)] * (*yd)[static_cast<size_t>(i * c + j)];
          for (int64_t j = 0; j < c; ++j) {
            const size_t k = static_cast<size_t>(i * c + j);
            g[k] = (*yd)[k] * (gy[k] - dot);
          }
        }
      } else {
        for (int64_t j = 0; j < c; ++j) {
          double dot = 0.0;
          for (int64_t i = 0; i < r; ++i) dot += gy[static_cast<size_t>(i * c + j)] * (*yd)[static_cast<size_t>(i * c + j)];
          for (int64_t i = 0; i < r; ++i) {
            const size_t k = static_cast<size_t>(i * c + j);
            g[k] = (*yd)[k] * (gy[k] - dot);
          }
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& valid) {
  require_2d(a, "masked_softmax");
  if (a.rows() != 1) throw std::invalid_argument("masked_softmax: expected a 1 x M row, got " + shape_str(a.shape()));
  const int64_t m = a.cols();
  if (static_cast<int64_t>(valid.size()) != m) {
    throw std::invalid_argument("masked_softmax: mask length " + std::to_string(valid.size()) +
                                " does not match width " + std::to_string(m));
  }
  int64_t n_valid = 0;
  for (auto v : valid) n_valid += v ? 1 : 0;
  if (n_valid == 0) throw std::invalid_argument("masked_softmax: all positions are masked out");
  const auto& x = a.values();
  double mx = -std::numeric_limits<double>::infinity();
  for (int64_t j = 0; j < m; ++j) {
    if (valid[static_cast<size_t>(j)]) mx = std::max(mx, x[static_cast<size_t>(j)]);
  }
  double z = 0.0;
  std::vector<double> y(static_cast<size_t>(m), 0.0);
  for (int64_t j = 0; j < m; ++j) {
    if (valid[static_cast<size_t>(j)]) z += std::exp(x[static_cast<size_t>(j)] - mx);
  }
  for (int64_t j = 0; j < m; ++j) {
    if (valid[static_cast<size_t>(j)]) y[static_cast<size_t>(j)] = std::exp(x[static_cast<size_t>(j)] - mx) / z;
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    DataPtr yd = std::make_shared<const std::vector<double>>(y);
    auto mask = valid;
    pull = [an, yd, mask, m](const std::vector<double>& gy, Tape& t) {
      double dot = 0.0;
      for (int64_t j = 0; j < m; ++j) {
        if (mask[static_cast<size_t>(j)]) dot += gy[static_cast<size_t>(j)] * (*yd)[static_cast<size_t>(j)];
      }
      std::vector<double> g(static_cast<size_t>(m), 0.0);
      for (int64_t j = 0; j < m; ++j) {
        if (mask[static_cast<size_t>(j)]) {
          g[static_cast<size_t>(j)] = (*yd)[static_cast<size_t>(j)] * (gy[static_cast<size_t>(j)] - dot);
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish({1, m}, std::move(y), tape, std::move(pull));
}

Tensor logsumexp(const Tensor& a, int axis) {
  require_2d(a, "logsumexp");
  if (axis != 0 && axis != 1) throw std::invalid_argument("logsumexp: axis must be 0 or 1");
  const int64_t r = a.rows(), c = a.cols();
  const auto& x = a.values();
  const int64_t groups = axis == 1 ? r : c;
  const int64_t lane = axis == 1 ? c : r;
  auto idx = [axis, c](int64_t g, int64_t l) {
    return static_cast<size_t>(axis == 1 ? g * c + l : l * c + g);
  };
  std::vector<double> y(static_cast<size_t>(groups));
  for (int64_t g = 0; g < groups; ++g) {
    double mx = x[idx(g, 0)];
    for (int64_t l = 1; l < lane; ++l) mx = std::max(mx, x[idx(g, l)]);
    double z = 0.0;
    for (int64_t l = 0; l < lane; ++l) z += std::exp(x[idx(g, l)] - mx);
    y[static_cast<size_t>(g)] = mx + std::log(z);
  }
  Shape out_shape = axis == 1 ? Shape{r, 1} : Shape{1, c};
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    DataPtr xd = a.shared_values();
    DataPtr yd = std::make_shared<const std::vector<double>>(y);
    pull = [an, xd, yd, groups, lane, idx](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(xd->size());
      for (int64_t gr = 0; gr < groups; ++gr) {
        for (int64_t l = 0; l < lane; ++l) {
          g[idx(gr, l)] = gy[static_cast<size_t>(gr)] * std::exp((*xd)[idx(gr, l)] - (*yd)[static_cast<size_t>(gr)]);
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish(std::move(out_shape), std::move(y), tape, std::move(pull));
}

Tensor diagonal(const Tensor& a) {
  require_2d(a, "diagonal");
  if (a.rows() != a.cols()) throw std::invalid_argument("diagonal: matrix is not square, shape " + shape_str(a.shape()));
  const int64_t n = a.rows();
  const auto& x = a.values();
  std::vector<double> y(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) y[static_cast<size_t>(i)] = x[static_cast<size_t>(i * n + i)];
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    pull = [an, n](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(static_cast<size_t>(n * n), 0.0);
      for (int64_t i = 0; i < n; ++i) g[static_cast<size_t>(i * n + i)] = gy[static_cast<size_t>(i)];
      t.accumulate(an, g);
    };
  }
  return finish({1, n}, std::move(y), tape, std::move(pull));
}

Tensor transpose(const Tensor& a) {
  require_2d(a, "transpose");
  const int64_t r = a.rows(), c = a.cols();
  const auto& x = a.values();
  std::vector<double> y(x.size());
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) y[static_cast<size_t>(j * r + i)] = x[static_cast<size_t>(i * c + j)];
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    pull = [an, r, c](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size());
      for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < c; ++j) g[static_cast<size_t>(i * c + j)] = gy[static_cast<size_t>(j * r + i)];
      }
      t.accumulate(an, g);
    };
  }
  return finish({c, r}, std::move(y), tape, std::move(pull));
}

namespace {

Tensor normalize_rows_impl(const Tensor& a, const std::vector<std::uint8_t>* valid) {
  require_2d(a, "l2_normalize_rows");
  const int64_t r = a.rows(), c = a.cols();
  if (valid && static_cast<int64_t>(valid->size()) != r) {
    throw std::invalid_argument("l2_normalize_rows: mask length does not match row count");
  }
  const auto& x = a.values();
  std::vector<double> y(x.size(), 0.0);
  std::vector<double> norms(static_cast<size_t>(r), 0.0);
  for (int64_t i = 0; i < r; ++i) {
    if (valid && !(*valid)[static_cast<size_t>(i)]) continue;
    double s = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      const double v = x[static_cast<size_t>(i * c + j)];
      s += v * v;
    }
    const double n = std::sqrt(s);
    if (n == 0.0) {
      throw std::domain_error("l2_normalize_rows: row " + std::to_string(i) + " has zero norm");
    }
    norms[static_cast<size_t>(i)] = n;
    for (int64_t j = 0; j < c; ++j) {
      y[static_cast<size_t>(i * c + j)] = x[static_cast<size_t>(i * c + j)] / n;
    }
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    DataPtr yd = std::make_shared<const std::vector<double>>(y);
    auto nm = std::make_shared<const std::vector<double>>(std::move(norms));
    std::shared_ptr<const std::vector<std::uint8_t>> vm;
    if (valid) vm = std::make_shared<const std::vector<std::uint8_t>>(*valid);
    pull = [an, yd, nm, vm, r, c](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size(), 0.0);
      for (int64_t i = 0; i < r; ++i) {
        if (vm && !(*vm)[static_cast<size_t>(i)]) continue;
        double dot = 0.0;
        for (int64_t j = 0; j < c; ++j) {
          const size_t k = static_cast<size_t>(i * c + j);
          dot += gy[k] * (*yd)[k];
        }
        const double inv = 1.0 / (*nm)[static_cast<size_t>(i)];
        for (int64_t j = 0; j < c; ++j) {
          const size_t k = static_cast<size_t>(i * c + j);
          g[k] = (gy[k] - (*yd)[k] * dot) * inv;
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

}  // namespace

Tensor l2_normalize_rows(const Tensor& a) { return normalize_rows_impl(a, nullptr); }

Tensor l2_normalize_rows(const Tensor& a, const std::vector<std::uint8_t>& valid) {
  return normalize_rows_impl(a, &valid);
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
  require_2d(a, "concat_cols");
  require_2d(b, "concat_cols");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("concat_cols: row counts differ: " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
  const int64_t r = a.rows(), ca = a.cols(), cb = b.cols();
  const auto& A = a.values();
  const auto& B = b.values();
  std::vector<double> y(static_cast<size_t>(r * (ca + cb)));
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < ca; ++j) y[static_cast<size_t>(i * (ca + cb) + j)] = A[static_cast<size_t>(i * ca + j)];
    for (int64_t j = 0; j < cb; ++j) y[static_cast<size_t>(i * (ca + cb) + ca + j)] = B[static_cast<size_t>(i * cb + j)];
  }
  Tape* tape = result_tape({&a, &b});
  Tape::PullFn pull;
  if (tape) {
    int an = a.requires_grad() ? a.node() : -1;
    int bn = b.requires_grad() ? b.node() : -1;
    pull = [an, bn, r, ca, cb](const std::vector<double>& gy, Tape& t) {
      if (an >= 0) {
        std::vector<double> g(static_cast<size_t>(r * ca));
        for (int64_t i = 0; i < r; ++i) {
          for (int64_t j = 0; j < ca; ++j) g[static_cast<size_t>(i * ca + j)] = gy[static_cast<size_t>(i * (ca + cb) + j)];
        }
        t.accumulate(an, g);
      }
      if (bn >= 0) {
        std::vector<double> g(static_cast<size_t>(r * cb));
        for (int64_t i = 0; i < r; ++i) {
          for (int64_t j = 0; j < cb; ++j) g[static_cast<size_t>(i * cb + j)] = gy[static_cast<size_t>(i * (ca + cb) + ca + j)];
        }
        t.accumulate(bn, g);
      }
    };
  }
  return finish({r, ca + cb}, std::move(y), tape, std::move(pull));
}

Tensor slice(const Tensor& a, int64_t r0, int64_t r1, int64_t c0, int64_t c1) {
  require_2d(a, "slice");
  const int64_t r = a.rows(), c = a.cols();
  if (r0 < 0 || c0 < 0 || r1 > r || c1 > c || r0 >= r1 || c0 >= c1) {
    throw std::invalid_argument("slice: block [" + std::to_string(r0) + ":" + std::to_string(r1) + ", " +
                                std::to_string(c0) + ":" + std::to_string(c1) + "] out of range for shape " +
                                shape_str(a.shape()));
  }
  const int64_t or_ = r1 - r0, oc = c1 - c0;
  const auto& x = a.values();
  std::vector<double> y(static_cast<size_t>(or_ * oc));
  for (int64_t i = 0; i < or_; ++i) {
    for (int64_t j = 0; j < oc; ++j) {
      y[static_cast<size_t>(i * oc + j)] = x[static_cast<size_t>((i + r0) * c + (j + c0))];
    }
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    pull = [an, r, c, r0, c0, or_, oc](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(static_cast<size_t>(r * c), 0.0);
      for (int64_t i = 0; i < or_; ++i) {
        for (int64_t j = 0; j < oc; ++j) {
          g[static_cast<size_t>((i + r0) * c + (j + c0))] = gy[static_cast<size_t>(i * oc + j)];
        }
      }
      t.accumulate(an, g);
    };
  }
  return finish({or_, oc}, std::move(y), tape, std::move(pull));
}

Tensor zero_rows(const Tensor& a, const std::vector<std::uint8_t>& keep) {
  require_2d(a, "zero_rows");
  const int64_t r = a.rows(), c = a.cols();
  if (static_cast<int64_t>(keep.size()) != r) {
    throw std::invalid_argument("zero_rows: mask length " + std::to_string(keep.size()) +
                                " does not match row count " + std::to_string(r));
  }
  const auto& x = a.values();
  std::vector<double> y(x.size(), 0.0);
  for (int64_t i = 0; i < r; ++i) {
    if (!keep[static_cast<size_t>(i)]) continue;
    for (int64_t j = 0; j < c; ++j) y[static_cast<size_t>(i * c + j)] = x[static_cast<size_t>(i * c + j)];
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    auto mask = keep;
    pull = [an, mask, r, c](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size(), 0.0);
      for (int64_t i = 0; i < r; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        for (int64_t j = 0; j < c; ++j) g[static_cast<size_t>(i * c + j)] = gy[static_cast<size_t>(i * c + j)];
      }
      t.accumulate(an, g);
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

Tensor topk_per_column(const Tensor& a, int64_t k) {
  require_2d(a, "topk_per_column");
  if (k < 1) throw std::invalid_argument("topk_per_column: k must be >= 1");
  const int64_t r = a.rows(), c = a.cols();
  const auto& x = a.values();
  const int64_t kk = std::min(k, r);
  std::vector<std::uint8_t> keep(x.size(), 0);
  std::vector<int64_t> order(static_cast<size_t>(r));
  for (int64_t j = 0; j < c; ++j) {
    std::iota(order.begin(), order.end(), 0);
    // ties broken by lower row index
    std::stable_sort(order.begin(), order.end(), [&](int64_t p, int64_t q) {
      return x[static_cast<size_t>(p * c + j)] > x[static_cast<size_t>(q * c + j)];
    });
    for (int64_t t = 0; t < kk; ++t) keep[static_cast<size_t>(order[static_cast<size_t>(t)] * c + j)] = 1;
  }
  std::vector<double> y(x.size(), 0.0);
  for (size_t i = 0; i < x.size(); ++i) {
    if (keep[i]) y[i] = x[i];
  }
  Tape* tape = result_tape({&a});
  Tape::PullFn pull;
  if (tape && a.requires_grad()) {
    int an = a.node();
    auto mask = std::make_shared<const std::vector<std::uint8_t>>(std::move(keep));
    pull = [an, mask](const std::vector<double>& gy, Tape& t) {
      std::vector<double> g(gy.size(), 0.0);
      for (size_t i = 0; i < gy.size(); ++i) {
        if ((*mask)[i]) g[i] = gy[i];
      }
      t.accumulate(an, g);
    };
  }
  return finish(a.shape(), std::move(y), tape, std::move(pull));
}

Tensor stack_scalars(int64_t rows, int64_t cols, const std::vector<Tensor>& cells) {
  if (static_cast<int64_t>(cells.size()) != rows * cols) {
    throw std::invalid_argument("stack_scalars: expected " + std::to_string(rows * cols) + " cells, got " +
                                std::to_string(cells.size()));
  }
  std::vector<double> y(cells.size());
  Tape* tape = nullptr;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (!cells[i].is_scalar()) {
      throw std::invalid_argument("stack_scalars: cell " + std::to_string(i) + " is not a scalar, shape " +
                                  shape_str(cells[i].shape()));
    }
    y[i] = cells[i].item();
    if (cells[i].tape() != nullptr) {
      if (tape == nullptr) {
        tape = cells[i].tape();
      } else if (tape != cells[i].tape()) {
        throw std::invalid_argument("stack_scalars: cells come from two different tapes");
      }
    }
  }
  Tape::PullFn pull;
  if (tape) {
    std::vector<int> parents(cells.size(), -1);
    for (size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].requires_grad()) parents[i] = cells[i].node();
    }
    pull = [parents](const std::vector<double>& gy, Tape& t) {
      for (size_t i = 0; i < parents.size(); ++i) {
        if (parents[i] >= 0) t.accumulate_at(parents[i], 0, gy[i]);
      }
    };
  }
  return finish({rows, cols}, std::move(y), tape, std::move(pull));
}

}  // namespace hnf
