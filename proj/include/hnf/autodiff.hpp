#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace hnf {

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

class Tape;

// Dense row-major f64 tensor. Values are immutable once constructed; every op
// returns a fresh tensor. A tensor participates in gradient flow iff it is
// attached to a tape (node() >= 0), either as a registered leaf or as the
// result of an op on attached inputs. Detached tensors are plain values and
// safe to share across threads for read-only evaluation.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor ones(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor row(std::vector<double> values);     // 1 x n
  static Tensor column(std::vector<double> values);  // n x 1
  static Tensor matrix(int64_t rows, int64_t cols, std::vector<double> values);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int64_t ndim() const { return static_cast<int64_t>(shape_.size()); }
  int64_t size() const;
  int64_t rows() const;
  int64_t cols() const;
  bool is_scalar() const { return size() == 1; }
  double item() const;
  double flat(int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
  double at(int64_t r, int64_t c) const;
  const std::vector<double>& values() const { return *data_; }
  std::shared_ptr<const std::vector<double>> shared_values() const { return data_; }

  bool requires_grad() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }

  // Same values, no tape attachment.
  Tensor detach() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

Tensor stop_gradient(const Tensor& x);

// Reverse-mode tape. Nodes are recorded in creation order (which is a
// topological order of the expression DAG); backward() walks them exactly
// once in reverse, accumulating adjoints additively across uses. The tape is
// single-threaded during construction and backward.
class Tape {
 public:
  // Registers a differentiable leaf sharing the value's storage.
  Tensor leaf(const Tensor& value);

  // Seeds d(loss)/d(loss) = 1 and pulls adjoints back through every node.
  // loss must be a scalar produced on this tape.
  void backward(const Tensor& loss);

  // Gradient of the last backward()'s loss with respect to t. Zero tensor if
  // the loss did not depend on t.
  Tensor grad(const Tensor& t) const;

  int64_t node_count() const { return static_cast<int64_t>(nodes_.size()); }

  // Op plumbing below; not intended for direct use outside op definitions.
  using PullFn = std::function<void(const std::vector<double>& gy, Tape& tape)>;
  int emplace_node(int64_t size, PullFn pull);
  void accumulate(int node, const std::vector<double>& g);
  void accumulate_at(int node, int64_t index, double g);
  static Tensor attach(Tensor t, Tape* tape, int node);

 private:
  struct Node {
    int64_t size;
    PullFn pull;  // empty for leaves
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  bool ran_backward_ = false;
};

// ---- differentiable ops (2-D unless noted; scalars are shape {1}) ----

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor add_rowvec(const Tensor& a, const Tensor& b);  // a: R x C, b: 1 x C
Tensor relu(const Tensor& a);  // max(0, x); subgradient at exactly 0 is 0
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);  // gradient 0 where x <= lo
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum(const Tensor& a, int axis);   // axis 0 -> 1 x C, axis 1 -> R x 1
Tensor mean(const Tensor& a, int axis);
// Numerically stabilized by max subtraction; exact along the reduced axis.
Tensor softmax(const Tensor& a, int axis);
// Softmax over the valid positions of a 1 x M row; invalid positions get 0.
Tensor masked_softmax(const Tensor& a, const std::vector<std::uint8_t>& valid);
Tensor logsumexp(const Tensor& a, int axis);
Tensor diagonal(const Tensor& a);  // square -> 1 x B
Tensor transpose(const Tensor& a);
// Rows scaled to unit L2 norm. The strict overload rejects zero-norm rows;
// the masked overload zeroes invalid rows and only normalizes valid ones.
Tensor l2_normalize_rows(const Tensor& a);
Tensor l2_normalize_rows(const Tensor& a, const std::vector<std::uint8_t>& valid);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& a, int64_t r0, int64_t r1, int64_t c0, int64_t c1);
// Multiplies row r by keep[r] (0 or 1). Gradient is masked the same way.
Tensor zero_rows(const Tensor& a, const std::vector<std::uint8_t>& keep);
// Keeps the k largest entries of each column (ties broken by lower row
// index), erases the rest to 0. The selection pattern is non-differentiable;
// gradients flow only through retained entries.
Tensor topk_per_column(const Tensor& a, int64_t k);
// Assembles a rows x cols matrix from scalar cells in row-major order.
Tensor stack_scalars(int64_t rows, int64_t cols, const std::vector<Tensor>& cells);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(const Tensor& a, double s) { return add_scalar(a, -s); }
inline Tensor operator*(const Tensor& a, double s) { return mul_scalar(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return mul_scalar(a, s); }

}  // namespace hnf
