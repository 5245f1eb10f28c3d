// Dense tensors and a define-by-run reverse-mode autodiff tape.
//
// A Graph records every operation applied to its Vars in execution order, so
// the recording order is already a topological order and backward() is a
// single reverse sweep. Graphs are rebuilt for every forward pass.

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace iclb {

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition is violated (e.g. backward on a non-scalar).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

using Shape = std::vector<std::size_t>;

/// 64-byte aligned storage. Vectorized kernels peel differently depending on
/// the start address, so fixed alignment keeps results bit-reproducible.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct Tensor {
  Shape shape;
  Buffer<T> data;

  Tensor() = default;
  explicit Tensor(Shape s, T fill = T(0));
  Tensor(Shape s, std::vector<T> values);
  Tensor(Shape s, Buffer<T> values);

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  /// Leading dimension; 1 for scalars.
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  /// Product of all trailing dimensions.
  std::size_t cols() const { return rows() == 0 ? 0 : numel() / rows(); }

  T& operator[](std::size_t i) { return data[i]; }
  const T& operator[](std::size_t i) const { return data[i]; }
  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }

  void fill(T v);
  Tensor reshaped(Shape s) const;
};

/// A trainable tensor and its accumulated gradient.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v);
  void zero_grad();
};

template <typename T>
class Graph;

/// Handle to a node recorded on a Graph.
template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  int id = -1;

  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  const Tensor<T>& grad() const;
};

template <typename T>
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Input that never receives a gradient.
  Var<T> constant(Tensor<T> value);
  /// Leaf whose gradient is kept on the node (inspect with Var::grad()).
  Var<T> variable(Tensor<T> value);
  /// Leaf bound to a Parameter; backward() accumulates into p.grad.
  Var<T> parameter(Parameter<T>& p);

  /// Records an op result. `fn` runs during backward and must push the node's
  /// gradient into its inputs via grad().
  Var<T> record(Tensor<T> value, std::vector<int> inputs, BackwardFn fn);

  const Tensor<T>& value(int id) const { return nodes_[id].value; }
  /// Gradient buffer for a node, allocated (zeroed) on first access.
  Tensor<T>& grad(int id);
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Node gradients are reset each call;
  /// parameter gradients accumulate across calls.
  void backward(Var<T> loss);

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    std::vector<int> inputs;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    bool visited = false;
  };
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must live on the same Graph.

/// [M×K]·[K×N] → [M×N].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);

/// Elementwise product.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);

template <typename T>
Var<T> scale(Var<T> x, T factor);

/// x[N×C] + bias[C] broadcast across rows.
template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias);

/// x[(B·L)×C] + table[L×C], the table repeated for each of the B row blocks.
template <typename T>
Var<T> add_tiled(Var<T> x, Var<T> table);

template <typename T>
Var<T> sum(Var<T> x);

/// Softmax along `axis`, max-subtracted.
template <typename T>
Var<T> softmax(Var<T> x, int axis = -1);

/// Normalizes each vector along the last axis then applies gain and bias.
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5));

/// tanh-approximation GELU.
template <typename T>
Var<T> gelu(Var<T> x);

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi);

/// Selects rows of a 2-D tensor.
template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows);

/// Rows flagged in `replace` are swapped for the single-row `token`.
template <typename T>
Var<T> replace_rows(Var<T> x, Var<T> token, std::span<const std::uint8_t> replace);

/// Multi-head self-attention core. `qkv` is [(B·L)×3D] with Q, K, V blocks
/// side by side; returns softmax(QKᵀ/√d)V per head, shape [(B·L)×D].
template <typename T>
Var<T> attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t heads);

/// Huber loss averaged over entries with weight != 0. Returns a scalar; zero
/// when no entry is weighted.
template <typename T>
Var<T> masked_smooth_l1(Var<T> pred, const Tensor<T>& target, std::span<const std::uint8_t> weight,
                        T delta = T(1));

/// Mean softmax cross-entropy of logits [N×K] against integer labels.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels);

// Scalar reference used by gelu and its tests.
template <typename T>
T gelu_scalar(T x);

}  // namespace iclb
