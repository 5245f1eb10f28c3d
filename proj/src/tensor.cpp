#include "iclb/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

namespace iclb {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;
// Strided view of a column block inside a wider row-major matrix.
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
CMapMat<T> as_matrix(const Tensor<T>& t) {
  return CMapMat<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                    static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
MapMat<T> as_matrix(Tensor<T>& t) {
  return MapMat<T>(t.data.data(), static_cast<Eigen::Index>(t.rows()),
                   static_cast<Eigen::Index>(t.cols()));
}

template <typename T>
void check_same_graph(Var<T> a, Var<T> b) {
  if (a.graph == nullptr || a.graph != b.graph) {
    throw ContractError("operands recorded on different graphs");
  }
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected a 2-D tensor, got " + shape_str(s));
  }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor / Parameter

template <typename T>
Tensor<T>::Tensor(Shape s, T fill) : shape(std::move(s)), data(shape_numel(shape), fill) {
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_str(shape));
  }
}

template <typename T>
Tensor<T>::Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(values.begin(), values.end()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

template <typename T>
Tensor<T>::Tensor(Shape s, Buffer<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data.begin(), data.end(), v);
}

template <typename T>
Tensor<T> Tensor<T>::reshaped(Shape s) const {
  return Tensor<T>(std::move(s), data);
}

template <typename T>
Parameter<T>::Parameter(std::string n, Tensor<T> v)
    : name(std::move(n)), value(std::move(v)), grad(value.shape, T(0)) {}

template <typename T>
void Parameter<T>::zero_grad() {
  grad.shape = value.shape;
  grad.data.assign(value.data.size(), T(0));
}

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return graph->value(id);
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return graph->grad(id);
}

// ---------------------------------------------------------------------------
// Graph

template <typename T>
Var<T> Graph<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::parameter(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Var<T> Graph<T>::record(Tensor<T> value, std::vector<int> inputs, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = std::any_of(inputs.begin(), inputs.end(),
                             [this](int i) { return nodes_[i].needs_grad; });
  n.inputs = std::move(inputs);
  if (n.needs_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
Tensor<T>& Graph<T>::grad(int id) {
  Node& n = nodes_[id];
  if (n.grad.data.size() != n.value.data.size()) {
    n.grad.shape = n.value.shape;
    n.grad.data.assign(n.value.data.size(), T(0));
  }
  return n.grad;
}

template <typename T>
void Graph<T>::backward(Var<T> loss) {
  if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
  if (value(loss.id).numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(value(loss.id).shape));
  }
  for (auto& n : nodes_) {
    n.grad.data.clear();
    n.visited = false;
  }
  grad(loss.id).data[0] = T(1);
  // Mark nodes reachable from the loss so unrelated branches are skipped.
  nodes_[loss.id].visited = true;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (!n.visited || !n.needs_grad) continue;
    for (int in : n.inputs) nodes_[in].visited = true;
    if (n.grad.data.empty()) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param != nullptr) {
      auto& pg = n.param->grad;
      if (pg.data.size() != n.grad.data.size()) n.param->zero_grad();
      for (std::size_t k = 0; k < pg.data.size(); ++k) pg.data[k] += n.grad.data[k];
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  check_same_graph(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  require_rank2(av.shape, "matmul");
  require_rank2(bv.shape, "matmul");
  if (av.shape[1] != bv.shape[0]) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(av.shape) + " vs " +
                         shape_str(bv.shape));
  }
  Tensor<T> out({av.shape[0], bv.shape[1]});
  as_matrix(out).noalias() = as_matrix(av) * as_matrix(bv);
  const int ia = a.id;
  const int ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, int self) {
    auto dout = as_matrix(static_cast<const Tensor<T>&>(g.grad(self)));
    if (g.needs_grad(ia)) as_matrix(g.grad(ia)).noalias() += dout * as_matrix(g.value(ib)).transpose();
    if (g.needs_grad(ib)) as_matrix(g.grad(ib)).noalias() += as_matrix(g.value(ia)).transpose() * dout;
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += bv[i];
  const int ia = a.id;
  const int ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    for (int in : {ia, ib}) {
      if (!g.needs_grad(in)) continue;
      auto& gi = g.grad(in).data;
      for (std::size_t i = 0; i < d.size(); ++i) gi[i] += d[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_graph(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  Tensor<T> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= bv[i];
  const int ia = a.id;
  const int ib = b.id;
  return a.graph->record(std::move(out), {ia, ib}, [ia, ib](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    const auto& av = g.value(ia).data;
    const auto& bv = g.value(ib).data;
    if (g.needs_grad(ia)) {
      auto& ga = g.grad(ia).data;
      for (std::size_t i = 0; i < d.size(); ++i) ga[i] += d[i] * bv[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad(ib).data;
      for (std::size_t i = 0; i < d.size(); ++i) gb[i] += d[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, T factor) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v *= factor;
  const int ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, factor](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(ix).data;
    for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i] * factor;
  });
}

template <typename T>
Var<T> add_row_bias(Var<T> x, Var<T> bias) {
  check_same_graph(x, bias);
  const auto& xv = x.value();
  const auto& bv = bias.value();
  const std::size_t cols = xv.shape.back();
  if (bv.numel() != cols) {
    throw DimensionError("add_row_bias: bias " + shape_str(bv.shape) + " vs input " +
                         shape_str(xv.shape));
  }
  Tensor<T> out = xv;
  const std::size_t rows = out.numel() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = out.data.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] += bv.data[c];
  }
  const int ix = x.id;
  const int ib = bias.id;
  return x.graph->record(std::move(out), {ix, ib}, [ix, ib, rows, cols](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    if (g.needs_grad(ix)) {
      auto& gx = g.grad(ix).data;
      for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i];
    }
    if (g.needs_grad(ib)) {
      auto& gb = g.grad(ib).data;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* row = d.data() + r * cols;
        for (std::size_t c = 0; c < cols; ++c) gb[c] += row[c];
      }
    }
  });
}

template <typename T>
Var<T> add_tiled(Var<T> x, Var<T> table) {
  check_same_graph(x, table);
  const auto& xv = x.value();
  const auto& tv = table.value();
  require_rank2(xv.shape, "add_tiled");
  require_rank2(tv.shape, "add_tiled");
  if (xv.shape[1] != tv.shape[1] || xv.shape[0] % tv.shape[0] != 0) {
    throw DimensionError("add_tiled: cannot tile " + shape_str(tv.shape) + " over " +
                         shape_str(xv.shape));
  }
  Tensor<T> out = xv;
  const std::size_t n = tv.numel();
  for (std::size_t base = 0; base < out.data.size(); base += n) {
    for (std::size_t i = 0; i < n; ++i) out.data[base + i] += tv.data[i];
  }
  const int ix = x.id;
  const int it = table.id;
  return x.graph->record(std::move(out), {ix, it}, [ix, it, n](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    if (g.needs_grad(ix)) {
      auto& gx = g.grad(ix).data;
      for (std::size_t i = 0; i < d.size(); ++i) gx[i] += d[i];
    }
    if (g.needs_grad(it)) {
      auto& gt = g.grad(it).data;
      for (std::size_t base = 0; base < d.size(); base += n) {
        for (std::size_t i = 0; i < n; ++i) gt[i] += d[base + i];
      }
    }
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto& xv = x.value().data;
  T total = T(0);
  for (T v : xv) total += v;
  const int ix = x.id;
  return x.graph->record(Tensor<T>({1}, total), {ix}, [ix](Graph<T>& g, int self) {
    const T d = g.grad(self).data[0];
    for (auto& v : g.grad(ix).data) v += d;
  });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
  const auto& xv = x.value();
  const int rank = static_cast<int>(xv.rank());
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw DimensionError("softmax: axis out of range for shape " + shape_str(xv.shape));
  }
  std::size_t outer = 1;
  std::size_t inner = 1;
  for (int i = 0; i < axis; ++i) outer *= xv.shape[i];
  for (int i = axis + 1; i < rank; ++i) inner *= xv.shape[i];
  const std::size_t len = xv.shape[axis];

  Tensor<T> out(xv.shape);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv.data[base];
      for (std::size_t k = 1; k < len; ++k) mx = std::max(mx, xv.data[base + k * inner]);
      T z = T(0);
      for (std::size_t k = 0; k < len; ++k) {
        const T e = std::exp(xv.data[base + k * inner] - mx);
        out.data[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out.data[base + k * inner] /= z;
    }
  }
  const int ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, outer, inner, len](Graph<T>& g, int self) {
    const auto& y = g.value(self).data;
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(ix).data;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < len; ++k) dot += d[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (d[i] - dot);
        }
      }
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> bias, T eps) {
  check_same_graph(x, gain);
  check_same_graph(x, bias);
  const auto& xv = x.value();
  const std::size_t cols = xv.shape.back();
  if (gain.value().numel() != cols || bias.value().numel() != cols) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(cols) + " entries");
  }
  const std::size_t rows = xv.numel() / cols;
  const auto R = static_cast<Eigen::Index>(rows);
  const auto C = static_cast<Eigen::Index>(cols);
  using Arr = Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Array<T, 1, Eigen::Dynamic>;
  Eigen::Map<const Arr> in(xv.data.data(), R, C);
  Eigen::Map<const Vec> gv(gain.value().data.data(), C);
  Eigen::Map<const Vec> bv(bias.value().data.data(), C);

  // Normalized values and inverse std, kept for backward.
  auto xhat = std::make_shared<Arr>(R, C);
  auto inv_std = std::make_shared<Eigen::Array<T, Eigen::Dynamic, 1>>(R);
  const Eigen::Array<T, Eigen::Dynamic, 1> mean = in.rowwise().mean();
  *xhat = in.colwise() - mean;
  *inv_std = ((*xhat).square().rowwise().mean() + eps).rsqrt();
  xhat->colwise() *= *inv_std;

  Tensor<T> out(xv.shape);
  Eigen::Map<Arr> o(out.data.data(), R, C);
  o = (xhat->rowwise() * gv).rowwise() + bv;

  const int ix = x.id;
  const int ig = gain.id;
  const int ib = bias.id;
  return x.graph->record(std::move(out), {ix, ig, ib}, [=](Graph<T>& g, int self) {
    Eigen::Map<const Arr> d(g.grad(self).data.data(), R, C);
    if (g.needs_grad(ig)) {
      Eigen::Map<Vec> gg(g.grad(ig).data.data(), C);
      gg += (d * *xhat).colwise().sum();
    }
    if (g.needs_grad(ib)) {
      Eigen::Map<Vec> gb(g.grad(ib).data.data(), C);
      gb += d.colwise().sum();
    }
    if (!g.needs_grad(ix)) return;
    Eigen::Map<const Vec> gv2(g.value(ig).data.data(), C);
    Eigen::Map<Arr> gx(g.grad(ix).data.data(), R, C);
    const Arr dh = d.rowwise() * gv2;
    const Eigen::Array<T, Eigen::Dynamic, 1> mean_dh = dh.rowwise().mean();
    const Eigen::Array<T, Eigen::Dynamic, 1> mean_dh_h = (dh * *xhat).rowwise().mean();
    gx += ((dh.colwise() - mean_dh) - xhat->colwise() * mean_dh_h).colwise() * *inv_std;
  });
}

template <typename T>
T gelu_scalar(T x) {
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  return T(0.5) * x * (T(1) + std::tanh(k * (x + T(0.044715) * x * x * x)));
}

template <typename T>
Var<T> gelu(Var<T> x) {
  using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto& xv = x.value();
  const auto N = static_cast<Eigen::Index>(xv.numel());
  Eigen::Map<const Arr> in(xv.data.data(), N);
  const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
  // tanh term, kept for backward.
  auto th = std::make_shared<Arr>((k * (in + T(0.044715) * in.cube())).tanh());
  Tensor<T> out(xv.shape);
  Eigen::Map<Arr>(out.data.data(), N) = T(0.5) * in * (T(1) + *th);
  const int ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, th, N, k](Graph<T>& g, int self) {
    Eigen::Map<const Arr> v(g.value(ix).data.data(), N);
    Eigen::Map<const Arr> d(g.grad(self).data.data(), N);
    Eigen::Map<Arr> gx(g.grad(ix).data.data(), N);
    const auto du = k * (T(1) + T(3 * 0.044715) * v.square());
    gx += d * (T(0.5) * (T(1) + *th) + T(0.5) * v * (T(1) - th->square()) * du);
  });
}

template <typename T>
Var<T> clamp(Var<T> x, T lo, T hi) {
  Tensor<T> out = x.value();
  for (auto& v : out.data) v = std::clamp(v, lo, hi);
  const int ix = x.id;
  return x.graph->record(std::move(out), {ix}, [ix, lo, hi](Graph<T>& g, int self) {
    const auto& xv = g.value(ix).data;
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(ix).data;
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (xv[i] > lo && xv[i] < hi) gx[i] += d[i];
    }
  });
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::span<const std::size_t> rows) {
  const auto& xv = x.value();
  const std::size_t cols = xv.cols();
  Tensor<T> out({rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(rows[r]) + " outside " +
                           shape_str(xv.shape));
    }
    std::copy_n(xv.data.data() + rows[r] * cols, cols, out.data.data() + r * cols);
  }
  const int ix = x.id;
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return x.graph->record(std::move(out), {ix}, [ix, idx = std::move(idx), cols](Graph<T>& g, int self) {
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(ix).data;
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (std::size_t c = 0; c < cols; ++c) gx[idx[r] * cols + c] += d[r * cols + c];
    }
  });
}

template <typename T>
Var<T> replace_rows(Var<T> x, Var<T> token, std::span<const std::uint8_t> replace) {
  check_same_graph(x, token);
  const auto& xv = x.value();
  const std::size_t cols = xv.cols();
  if (token.value().numel() != cols || replace.size() != xv.rows()) {
    throw DimensionError("replace_rows: token " + shape_str(token.value().shape) + " / flags " +
                         std::to_string(replace.size()) + " vs input " + shape_str(xv.shape));
  }
  Tensor<T> out = xv;
  for (std::size_t r = 0; r < replace.size(); ++r) {
    if (replace[r]) std::copy_n(token.value().data.data(), cols, out.data.data() + r * cols);
  }
  const int ix = x.id;
  const int it = token.id;
  std::vector<std::uint8_t> flags(replace.begin(), replace.end());
  return x.graph->record(
      std::move(out), {ix, it}, [ix, it, cols, flags = std::move(flags)](Graph<T>& g, int self) {
        const auto& d = g.grad(self).data;
        const bool gx_needed = g.needs_grad(ix);
        const bool gt_needed = g.needs_grad(it);
        for (std::size_t r = 0; r < flags.size(); ++r) {
          const T* drow = d.data() + r * cols;
          if (flags[r]) {
            if (!gt_needed) continue;
            auto& gt = g.grad(it).data;
            for (std::size_t c = 0; c < cols; ++c) gt[c] += drow[c];
          } else if (gx_needed) {
            auto& gx = g.grad(ix).data;
            for (std::size_t c = 0; c < cols; ++c) gx[r * cols + c] += drow[c];
          }
        }
      });
}

template <typename T>
Var<T> attention(Var<T> qkv, std::size_t batch, std::size_t seq, std::size_t heads) {
  const auto& xv = qkv.value();
  require_rank2(xv.shape, "attention");
  if (xv.shape[0] != batch * seq || xv.shape[1] % (3 * heads) != 0) {
    throw DimensionError("attention: qkv " + shape_str(xv.shape) + " incompatible with batch " +
                         std::to_string(batch) + ", seq " + std::to_string(seq) + ", heads " +
                         std::to_string(heads));
  }
  const std::size_t dim = xv.shape[1] / 3;
  const std::size_t hd = dim / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const auto L = static_cast<Eigen::Index>(seq);
  const auto H = static_cast<Eigen::Index>(hd);
  const Eigen::OuterStride<> in_stride(static_cast<Eigen::Index>(3 * dim));
  const Eigen::OuterStride<> out_stride(static_cast<Eigen::Index>(dim));

  Tensor<T> out({batch * seq, dim});
  auto probs = std::make_shared<Buffer<T>>(batch * heads * seq * seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const T* base = xv.data.data() + b * seq * 3 * dim + h * hd;
      CStridedMap<T> q(base, L, H, in_stride);
      CStridedMap<T> k(base + dim, L, H, in_stride);
      CStridedMap<T> v(base + 2 * dim, L, H, in_stride);
      MapMat<T> p(probs->data() + (b * heads + h) * seq * seq, L, L);
      p.noalias() = (q * k.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < L; ++r) {
        const T mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
      }
      StridedMap<T> o(out.data.data() + b * seq * dim + h * hd, L, H, out_stride);
      o.noalias() = p * v;
    }
  }
  const int ix = qkv.id;
  return qkv.graph->record(std::move(out), {ix}, [=](Graph<T>& g, int self) {
    const auto& x = g.value(ix).data;
    const auto& d = g.grad(self).data;
    auto& gx = g.grad(ix).data;
    RowMat<T> dp(L, L);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = b * seq * 3 * dim + h * hd;
        CStridedMap<T> q(x.data() + off, L, H, in_stride);
        CStridedMap<T> k(x.data() + off + dim, L, H, in_stride);
        CStridedMap<T> v(x.data() + off + 2 * dim, L, H, in_stride);
        StridedMap<T> dq(gx.data() + off, L, H, in_stride);
        StridedMap<T> dk(gx.data() + off + dim, L, H, in_stride);
        StridedMap<T> dv(gx.data() + off + 2 * dim, L, H, in_stride);
        CMapMat<T> p(probs->data() + (b * heads + h) * seq * seq, L, L);
        CStridedMap<T> dout(d.data() + b * seq * dim + h * hd, L, H, out_stride);
        dv.noalias() += p.transpose() * dout;
        dp.noalias() = dout * v.transpose();
        // Softmax backward, row-wise: dS = P ⊙ (dP − rowsum(dP ⊙ P)).
        for (Eigen::Index r = 0; r < L; ++r) {
          const T dot = dp.row(r).dot(p.row(r));
          dp.row(r) = p.row(r).array() * (dp.row(r).array() - dot) * inv_sqrt;
        }
        dq.noalias() += dp * k;
        dk.noalias() += dp.transpose() * q;
      }
    }
  });
}

template <typename T>
Var<T> masked_smooth_l1(Var<T> pred, const Tensor<T>& target, std::span<const std::uint8_t> weight,
                        T delta) {
  const auto& pv = pred.value();
  if (pv.shape != target.shape || weight.size() != pv.numel()) {
    throw DimensionError("masked_smooth_l1: prediction " + shape_str(pv.shape) + ", target " +
                         shape_str(target.shape) + ", weights " + std::to_string(weight.size()));
  }
  std::size_t count = 0;
  T total = T(0);
  for (std::size_t i = 0; i < pv.numel(); ++i) {
    if (!weight[i]) continue;
    ++count;
    const T diff = std::abs(pv.data[i] - target.data[i]);
    total += diff < delta ? T(0.5) * diff * diff / delta : diff - T(0.5) * delta;
  }
  const T loss = count ? total / static_cast<T>(count) : T(0);
  const int ip = pred.id;
  auto tgt = std::make_shared<Buffer<T>>(target.data);
  std::vector<std::uint8_t> w(weight.begin(), weight.end());
  return pred.graph->record(
      Tensor<T>({1}, loss), {ip}, [ip, tgt, w = std::move(w), count, delta](Graph<T>& g, int self) {
        if (count == 0) return;
        const T scale_ = g.grad(self).data[0] / static_cast<T>(count);
        const auto& pv2 = g.value(ip).data;
        auto& gp = g.grad(ip).data;
        for (std::size_t i = 0; i < pv2.size(); ++i) {
          if (!w[i]) continue;
          const T diff = pv2[i] - (*tgt)[i];
          const T dl = std::abs(diff) < delta ? diff / delta : (diff > 0 ? T(1) : T(-1));
          gp[i] += scale_ * dl;
        }
      });
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> labels) {
  const auto& lv = logits.value();
  require_rank2(lv.shape, "cross_entropy");
  const std::size_t n = lv.shape[0];
  const std::size_t k = lv.shape[1];
  if (labels.size() != n) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         shape_str(lv.shape));
  }
  auto probs = std::make_shared<Buffer<T>>(n * k);
  T total = T(0);
  for (std::size_t r = 0; r < n; ++r) {
    const T* row = lv.data.data() + r * k;
    const T mx = *std::max_element(row, row + k);
    T z = T(0);
    for (std::size_t c = 0; c < k; ++c) z += std::exp(row[c] - mx);
    for (std::size_t c = 0; c < k; ++c) (*probs)[r * k + c] = std::exp(row[c] - mx) / z;
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) {
      throw DimensionError("cross_entropy: label out of range");
    }
    total -= row[labels[r]] - mx - std::log(z);
  }
  const int il = logits.id;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.graph->record(
      Tensor<T>({1}, total / static_cast<T>(n)), {il},
      [il, probs, lab = std::move(lab), n, k](Graph<T>& g, int self) {
        const T s = g.grad(self).data[0] / static_cast<T>(n);
        auto& gl = g.grad(il).data;
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < k; ++c) {
            const T onehot = static_cast<int>(c) == lab[r] ? T(1) : T(0);
            gl[r * k + c] += s * ((*probs)[r * k + c] - onehot);
          }
        }
      });
}

// ---------------------------------------------------------------------------

#define ICLB_INSTANTIATE(T)                                                                       \
  template struct Tensor<T>;                                                                      \
  template struct Parameter<T>;                                                                   \
  template struct Var<T>;                                                                         \
  template class Graph<T>;                                                                        \
  template Var<T> matmul(Var<T>, Var<T>);                                                         \
  template Var<T> add(Var<T>, Var<T>);                                                            \
  template Var<T> mul(Var<T>, Var<T>);                                                            \
  template Var<T> scale(Var<T>, T);                                                               \
  template Var<T> add_row_bias(Var<T>, Var<T>);                                                   \
  template Var<T> add_tiled(Var<T>, Var<T>);                                                      \
  template Var<T> sum(Var<T>);                                                                    \
  template Var<T> softmax(Var<T>, int);                                                           \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                          \
  template Var<T> gelu(Var<T>);                                                                   \
  template Var<T> clamp(Var<T>, T, T);                                                            \
  template Var<T> gather_rows(Var<T>, std::span<const std::size_t>);                              \
  template Var<T> replace_rows(Var<T>, Var<T>, std::span<const std::uint8_t>);                    \
  template Var<T> attention(Var<T>, std::size_t, std::size_t, std::size_t);                       \
  template Var<T> masked_smooth_l1(Var<T>, const Tensor<T>&, std::span<const std::uint8_t>, T);   \
  template Var<T> cross_entropy(Var<T>, std::span<const int>);                                    \
  template T gelu_scalar(T);

ICLB_INSTANTIATE(float)
ICLB_INSTANTIATE(double)

#undef ICLB_INSTANTIATE

}  // namespace iclb
