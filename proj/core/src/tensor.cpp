#include "star4d/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace star4d {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

void require(bool condition, const std::string& message) {
  if (!condition) throw std::invalid_argument(message);
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// Accumulate `g` into a parent's gradient if it wants one.
void accumulate(detail::Node& parent, std::span<const float> g) {
  if (!parent.requires_grad) return;
  float* dst = parent.grad_buffer();
  for (size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

float* detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad.data();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0f, requires_grad);
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->value.assign(static_cast<size_t>(shape_numel(shape)), value);
  node->shape = std::move(shape);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw std::invalid_argument("Tensor::from: " + shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(float value) { return from({}, {value}); }

const Shape& Tensor::shape() const { return node_->shape; }

int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  const int64_t r = static_cast<int64_t>(s.size());
  const int64_t a = axis < 0 ? r + axis : axis;
  require(a >= 0 && a < r, "Tensor::dim: axis out of range for " + shape_str(s));
  return s[static_cast<size_t>(a)];
}

int64_t Tensor::numel() const { return static_cast<int64_t>(node_->value.size()); }

int64_t Tensor::cols() const { return shape().empty() ? 1 : shape().back(); }

int64_t Tensor::rows() const {
  const int64_t c = cols();
  return c == 0 ? 0 : numel() / c;
}

std::span<const float> Tensor::data() const { return node_->value; }
std::span<float> Tensor::mutable_data() { return node_->value; }
std::vector<float> Tensor::to_vector() const { return node_->value; }

float Tensor::item() const {
  require(numel() == 1, "Tensor::item on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

float Tensor::at(int64_t flat_index) const { return node_->value.at(static_cast<size_t>(flat_index)); }

bool Tensor::requires_grad() const { return node_->requires_grad; }
void Tensor::set_requires_grad(bool flag) { node_->requires_grad = flag; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const float> Tensor::grad() const { return node_->grad; }

std::span<float> Tensor::mutable_grad() {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

void Tensor::backward() const {
  require(numel() == 1, "backward() needs a scalar, got " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> visited;
  std::vector<std::pair<detail::Node*, size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }
Tensor Tensor::clone() const { return from(shape(), node_->value, node_->requires_grad); }

Tensor Tensor::make_result(Shape shape, std::vector<float> value, std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (g_grad_enabled) {
    const bool any = std::any_of(parents.begin(), parents.end(),
                                 [](const Tensor& t) { return t.defined() && t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      for (auto& p : parents) {
        if (p.defined()) node->parents.push_back(p.node_ptr());
      }
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

namespace ops {

namespace {

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& a, Fwd fwd, Deriv deriv) {
  std::vector<float> out(a.data().size());
  const auto in = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(in[i]);
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [pa, deriv](detail::Node& self) {
    if (!pa->requires_grad) return;
    float* g = pa->grad_buffer();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * deriv(pa->value[i], self.value[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    accumulate(*pa, self.grad);
    accumulate(*pb, self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    accumulate(*pa, self.grad);
    if (pb->requires_grad) {
      float* g = pb->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      float* g = pa->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      float* g = pb->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb](detail::Node& self) {
    if (pa->requires_grad) {
      float* g = pa->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / pb->value[i];
    }
    if (pb->requires_grad) {
      float* g = pb->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i] * self.value[i] / pb->value[i];
    }
  });
}

Tensor scale(const Tensor& a, float factor) {
  return unary(
      a, [factor](float x) { return x * factor; }, [factor](float, float) { return factor; });
}

Tensor add_scalar(const Tensor& a, float value) {
  return unary(
      a, [value](float x) { return x + value; }, [](float, float) { return 1.0f; });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
  const int64_t c = a.cols();
  require(b.numel() == c, "add_row: bias of " + shape_str(b.shape()) + " vs " + shape_str(a.shape()));
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bv[i % static_cast<size_t>(c)];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb, c](detail::Node& self) {
    accumulate(*pa, self.grad);
    if (pb->requires_grad) {
      float* g = pb->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i % static_cast<size_t>(c)] += self.grad[i];
    }
  });
}

Tensor mul_row(const Tensor& a, const Tensor& b) {
  const int64_t c = a.cols();
  require(b.numel() == c, "mul_row: " + shape_str(b.shape()) + " vs " + shape_str(a.shape()));
  std::vector<float> out(a.data().begin(), a.data().end());
  const auto bv = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bv[i % static_cast<size_t>(c)];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [pa, pb, c](detail::Node& self) {
    const size_t cc = static_cast<size_t>(c);
    if (pa->requires_grad) {
      float* g = pa->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb->value[i % cc];
    }
    if (pb->requires_grad) {
      float* g = pb->grad_buffer();
      for (size_t i = 0; i < self.grad.size(); ++i) g[i % cc] += self.grad[i] * pa->value[i];
    }
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(b.rank() == 2, "matmul: rhs must be 2-D, got " + shape_str(b.shape()));
  const int64_t k = a.cols(), m = a.rows(), n = b.dim(1);
  require(b.dim(0) == k, "matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(m * n));
  MatMap(out.data(), m, n).noalias() =
      ConstMatMap(a.data().data(), m, k) * ConstMatMap(b.data().data(), k, n);
  Shape shape = a.shape();
  shape.back() = n;
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result(std::move(shape), std::move(out), {a, b},
                             [pa, pb, m, k, n](detail::Node& self) {
                               ConstMatMap go(self.grad.data(), m, n);
                               if (pa->requires_grad) {
                                 MatMap(pa->grad_buffer(), m, k).noalias() +=
                                     go * ConstMatMap(pb->value.data(), k, n).transpose();
                               }
                               if (pb->requires_grad) {
                                 MatMap(pb->grad_buffer(), k, n).noalias() +=
                                     ConstMatMap(pa->value.data(), m, k).transpose() * go;
                               }
                             });
}

Tensor relu(const Tensor& a) {
  return unary(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x, float) { return x > 0.0f ? 1.0f : 0.0f; });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation
  constexpr float k0 = 0.7978845608028654f, k1 = 0.044715f;
  return unary(
      a,
      [](float x) { return 0.5f * x * (1.0f + std::tanh(k0 * (x + k1 * x * x * x))); },
      [](float x, float) {
        const float u = k0 * (x + k1 * x * x * x);
        const float t = std::tanh(u);
        const float du = k0 * (1.0f + 3.0f * k1 * x * x);
        return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * du;
      });
}

Tensor silu(const Tensor& a) {
  return unary(
      a, [](float x) { return x / (1.0f + std::exp(-x)); },
      [](float x, float) {
        const float s = 1.0f / (1.0f + std::exp(-x));
        return s * (1.0f + x * (1.0f - s));
      });
}

Tensor sigmoid(const Tensor& a) {
  return unary(
      a, [](float x) { return 1.0f / (1.0f + std::exp(-x)); },
      [](float, float y) { return y * (1.0f - y); });
}

Tensor tanh(const Tensor& a) {
  return unary(
      a, [](float x) { return std::tanh(x); }, [](float, float y) { return 1.0f - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary(
      a, [](float x) { return std::exp(x); }, [](float, float y) { return y; });
}

Tensor softplus(const Tensor& a) {
  return unary(
      a,
      [](float x) { return x > 20.0f ? x : std::log1p(std::exp(x)); },
      [](float x, float) { return 1.0f / (1.0f + std::exp(-x)); });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](float x) { return x * x; }, [](float x, float) { return 2.0f * x; });
}

Tensor clamp(const Tensor& a, float lo, float hi) {
  return unary(
      a, [lo, hi](float x) { return std::clamp(x, lo, hi); },
      [lo, hi](float x, float) { return (x >= lo && x <= hi) ? 1.0f : 0.0f; });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(shape_numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto pa = a.node_ptr();
  return Tensor::make_result(std::move(shape), a.to_vector(), {a},
                             [pa](detail::Node& self) { accumulate(*pa, self.grad); });
}

Tensor transpose(const Tensor& a) {
  require(a.rank() == 2, "transpose: needs 2-D, got " + shape_str(a.shape()));
  const int64_t r = a.dim(0), c = a.dim(1);
  std::vector<float> out(static_cast<size_t>(r * c));
  MatMap(out.data(), c, r) = ConstMatMap(a.data().data(), r, c).transpose();
  auto pa = a.node_ptr();
  return Tensor::make_result({c, r}, std::move(out), {a}, [pa, r, c](detail::Node& self) {
    if (!pa->requires_grad) return;
    MatMap(pa->grad_buffer(), r, c) += ConstMatMap(self.grad.data(), c, r).transpose();
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_rows: no inputs");
  const int64_t c = parts.front().cols();
  int64_t total_rows = 0;
  for (const auto& p : parts) {
    require(p.cols() == c, "concat_rows: column mismatch " + shape_str(p.shape()));
    total_rows += p.rows();
  }
  std::vector<float> out;
  out.reserve(static_cast<size_t>(total_rows * c));
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    nodes.push_back(p.node_ptr());
  }
  return Tensor::make_result({total_rows, c}, std::move(out), parts, [nodes](detail::Node& self) {
    size_t offset = 0;
    for (const auto& n : nodes) {
      const size_t len = n->value.size();
      accumulate(*n, std::span<const float>(self.grad).subspan(offset, len));
      offset += len;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  const int64_t r = parts.front().rows();
  int64_t total_cols = 0;
  std::vector<int64_t> widths;
  std::vector<std::shared_ptr<detail::Node>> nodes;
  for (const auto& p : parts) {
    require(p.rows() == r, "concat_cols: row mismatch " + shape_str(p.shape()));
    widths.push_back(p.cols());
    total_cols += p.cols();
    nodes.push_back(p.node_ptr());
  }
  std::vector<float> out(static_cast<size_t>(r * total_cols));
  int64_t col = 0;
  for (size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    for (int64_t i = 0; i < r; ++i) {
      std::copy_n(src.begin() + i * widths[k], widths[k], out.begin() + i * total_cols + col);
    }
    col += widths[k];
  }
  Shape shape = parts.front().shape();
  shape.back() = total_cols;
  return Tensor::make_result(std::move(shape), std::move(out), parts,
                             [nodes, widths, r, total_cols](detail::Node& self) {
                               int64_t col0 = 0;
                               for (size_t k = 0; k < nodes.size(); ++k) {
                                 if (nodes[k]->requires_grad) {
                                   float* g = nodes[k]->grad_buffer();
                                   for (int64_t i = 0; i < r; ++i) {
                                     for (int64_t j = 0; j < widths[k]; ++j) {
                                       g[i * widths[k] + j] += self.grad[i * total_cols + col0 + j];
                                     }
                                   }
                                 }
                                 col0 += widths[k];
                               }
                             });
}

Tensor slice_rows(const Tensor& a, int64_t start, int64_t count) {
  const int64_t c = a.cols();
  require(start >= 0 && count >= 0 && start + count <= a.rows(),
          "slice_rows: range out of bounds for " + shape_str(a.shape()));
  std::vector<float> out(a.data().begin() + start * c, a.data().begin() + (start + count) * c);
  auto pa = a.node_ptr();
  return Tensor::make_result({count, c}, std::move(out), {a}, [pa, start, c](detail::Node& self) {
    if (!pa->requires_grad) return;
    float* g = pa->grad_buffer() + start * c;
    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int64_t start, int64_t count) {
  const int64_t c = a.cols(), r = a.rows();
  require(start >= 0 && count >= 0 && start + count <= c,
          "slice_cols: range out of bounds for " + shape_str(a.shape()));
  std::vector<float> out(static_cast<size_t>(r * count));
  const auto src = a.data();
  for (int64_t i = 0; i < r; ++i) {
    std::copy_n(src.begin() + i * c + start, count, out.begin() + i * count);
  }
  Shape shape = a.shape();
  shape.back() = count;
  auto pa = a.node_ptr();
  return Tensor::make_result(std::move(shape), std::move(out), {a},
                             [pa, start, count, r, c](detail::Node& self) {
                               if (!pa->requires_grad) return;
                               float* g = pa->grad_buffer();
                               for (int64_t i = 0; i < r; ++i) {
                                 for (int64_t j = 0; j < count; ++j) {
                                   g[i * c + start + j] += self.grad[i * count + j];
                                 }
                               }
                             });
}

Tensor gather_rows(const Tensor& table, std::span<const int32_t> indices) {
  const int64_t v = table.rows(), e = table.cols();
  std::vector<int32_t> idx(indices.begin(), indices.end());
  std::vector<float> out(idx.size() * static_cast<size_t>(e));
  const auto src = table.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < v, "gather_rows: index " + std::to_string(idx[i]) +
                                           " outside [0, " + std::to_string(v) + ")");
    std::copy_n(src.begin() + idx[i] * e, e, out.begin() + static_cast<int64_t>(i) * e);
  }
  auto pt = table.node_ptr();
  const auto count = static_cast<int64_t>(idx.size());
  return Tensor::make_result({count, e}, std::move(out), {table},
                             [pt, idx = std::move(idx), e](detail::Node& self) {
                               if (!pt->requires_grad) return;
                               float* g = pt->grad_buffer();
                               for (size_t i = 0; i < idx.size(); ++i) {
                                 for (int64_t j = 0; j < e; ++j) {
                                   g[idx[i] * e + j] += self.grad[i * static_cast<size_t>(e) + j];
                                 }
                               }
                             });
}

Tensor sparse_rows(const Tensor& input, std::span<const SparseEntry> entries, int64_t rows) {
  const int64_t r = input.rows(), c = input.cols();
  std::vector<SparseEntry> list(entries.begin(), entries.end());
  std::vector<float> out(static_cast<size_t>(rows * c), 0.0f);
  const auto src = input.data();
  for (const auto& e : list) {
    require(e.row >= 0 && e.row < rows && e.source >= 0 && e.source < r, "sparse_rows: entry out of range");
    for (int64_t j = 0; j < c; ++j) out[e.row * c + j] += e.weight * src[e.source * c + j];
  }
  auto pi = input.node_ptr();
  return Tensor::make_result({rows, c}, std::move(out), {input}, [pi, list = std::move(list), c](detail::Node& self) {
    if (!pi->requires_grad) return;
    float* g = pi->grad_buffer();
    for (const auto& e : list) {
      for (int64_t j = 0; j < c; ++j) g[e.source * c + j] += e.weight * self.grad[e.row * c + j];
    }
  });
}

Tensor mean_row_groups(const Tensor& a, int64_t group_size) {
  const int64_t r = a.rows(), c = a.cols();
  require(group_size > 0 && r % group_size == 0, "mean_row_groups: bad group size");
  const int64_t groups = r / group_size;
  std::vector<float> out(static_cast<size_t>(groups * c), 0.0f);
  const auto src = a.data();
  const float inv = 1.0f / static_cast<float>(group_size);
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < c; ++j) out[(i / group_size) * c + j] += src[i * c + j] * inv;
  }
  auto pa = a.node_ptr();
  return Tensor::make_result({groups, c}, std::move(out), {a},
                             [pa, r, c, group_size, inv](detail::Node& self) {
                               if (!pa->requires_grad) return;
                               float* g = pa->grad_buffer();
                               for (int64_t i = 0; i < r; ++i) {
                                 for (int64_t j = 0; j < c; ++j) {
                                   g[i * c + j] += self.grad[(i / group_size) * c + j] * inv;
                                 }
                               }
                             });
}

Tensor sum(const Tensor& a) {
  double total = 0.0;
  for (float x : a.data()) total += x;
  auto pa = a.node_ptr();
  return Tensor::make_result({}, {static_cast<float>(total)}, {a}, [pa](detail::Node& self) {
    if (!pa->requires_grad) return;
    float* g = pa->grad_buffer();
    for (size_t i = 0; i < pa->value.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  require(a.numel() > 0, "mean of empty tensor");
  return scale(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  const auto av = a.data(), bv = b.data();
  double total = 0.0;
  for (size_t i = 0; i < av.size(); ++i) {
    const double d = static_cast<double>(av[i]) - bv[i];
    total += d * d;
  }
  const float n = static_cast<float>(av.size());
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor::make_result({}, {static_cast<float>(total / n)}, {a, b},
                             [pa, pb, n](detail::Node& self) {
                               const float s = 2.0f * self.grad[0] / n;
                               if (pa->requires_grad) {
                                 float* g = pa->grad_buffer();
                                 for (size_t i = 0; i < pa->value.size(); ++i) {
                                   g[i] += s * (pa->value[i] - pb->value[i]);
                                 }
                               }
                               if (pb->requires_grad) {
                                 float* g = pb->grad_buffer();
                                 for (size_t i = 0; i < pb->value.size(); ++i) {
                                   g[i] -= s * (pa->value[i] - pb->value[i]);
                                 }
                               }
                             });
}

Tensor softmax_rows(const Tensor& a) {
  const int64_t r = a.rows(), c = a.cols();
  std::vector<float> out(a.data().begin(), a.data().end());
  for (int64_t i = 0; i < r; ++i) {
    float* row = out.data() + i * c;
    const float mx = *std::max_element(row, row + c);
    float total = 0.0f;
    for (int64_t j = 0; j < c; ++j) total += (row[j] = std::exp(row[j] - mx));
    for (int64_t j = 0; j < c; ++j) row[j] /= total;
  }
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a}, [pa, r, c](detail::Node& self) {
    if (!pa->requires_grad) return;
    float* g = pa->grad_buffer();
    for (int64_t i = 0; i < r; ++i) {
      const float* y = self.value.data() + i * c;
      const float* gy = self.grad.data() + i * c;
      float dot = 0.0f;
      for (int64_t j = 0; j < c; ++j) dot += y[j] * gy[j];
      for (int64_t j = 0; j < c; ++j) g[i * c + j] += y[j] * (gy[j] - dot);
    }
  });
}

Tensor nll_rows(const Tensor& logits, std::span<const int32_t> targets) {
  const int64_t r = logits.rows(), c = logits.cols();
  require(static_cast<int64_t>(targets.size()) == r,
          "nll_rows: " + std::to_string(targets.size()) + " targets for " + std::to_string(r) + " rows");
  std::vector<float> probs(logits.data().begin(), logits.data().end());
  std::vector<float> out(static_cast<size_t>(r));
  std::vector<int32_t> tgt(targets.begin(), targets.end());
  for (int64_t i = 0; i < r; ++i) {
    require(tgt[i] >= 0 && tgt[i] < c, "nll_rows: target out of vocabulary");
    float* row = probs.data() + i * c;
    const float mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (int64_t j = 0; j < c; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    const double log_z = mx + std::log(total);
    out[i] = static_cast<float>(log_z - row[tgt[i]]);
    for (int64_t j = 0; j < c; ++j) row[j] = static_cast<float>(std::exp(row[j] - log_z));
  }
  auto pl = logits.node_ptr();
  return Tensor::make_result({r}, std::move(out), {logits},
                             [pl, probs = std::move(probs), tgt = std::move(tgt), c](detail::Node& self) {
                               if (!pl->requires_grad) return;
                               float* g = pl->grad_buffer();
                               for (size_t i = 0; i < tgt.size(); ++i) {
                                 const float gi = self.grad[i];
                                 if (gi == 0.0f) continue;
                                 const size_t base = i * static_cast<size_t>(c);
                                 for (int64_t j = 0; j < c; ++j) g[base + j] += gi * probs[base + j];
                                 g[base + tgt[i]] -= gi;
                               }
                             });
}

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps) {
  const int64_t r = x.rows(), c = x.cols();
  require(weight.numel() == c, "rms_norm: weight size mismatch");
  std::vector<float> out(static_cast<size_t>(r * c));
  std::vector<float> inv_rms(static_cast<size_t>(r));
  const auto xv = x.data(), wv = weight.data();
  for (int64_t i = 0; i < r; ++i) {
    float ms = 0.0f;
    for (int64_t j = 0; j < c; ++j) ms += xv[i * c + j] * xv[i * c + j];
    const float inv = 1.0f / std::sqrt(ms / static_cast<float>(c) + eps);
    inv_rms[i] = inv;
    for (int64_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] * inv * wv[j];
  }
  auto px = x.node_ptr(), pw = weight.node_ptr();
  return Tensor::make_result(x.shape(), std::move(out), {x, weight},
                             [px, pw, inv_rms = std::move(inv_rms), r, c](detail::Node& self) {
                               for (int64_t i = 0; i < r; ++i) {
                                 const float* xi = px->value.data() + i * c;
                                 const float* gy = self.grad.data() + i * c;
                                 const float inv = inv_rms[i];
                                 if (pw->requires_grad) {
                                   float* gw = pw->grad_buffer();
                                   for (int64_t j = 0; j < c; ++j) gw[j] += gy[j] * xi[j] * inv;
                                 }
                                 if (px->requires_grad) {
                                   float dot = 0.0f;
                                   for (int64_t j = 0; j < c; ++j) dot += gy[j] * pw->value[j] * xi[j];
                                   const float k = inv * inv * inv * dot / static_cast<float>(c);
                                   float* gx = px->grad_buffer() + i * c;
                                   for (int64_t j = 0; j < c; ++j) {
                                     gx[j] += gy[j] * pw->value[j] * inv - xi[j] * k;
                                   }
                                 }
                               }
                             });
}

Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, float eps) {
  const int64_t r = x.rows(), c = x.cols();
  require(weight.numel() == c && bias.numel() == c, "layer_norm: parameter size mismatch");
  std::vector<float> out(static_cast<size_t>(r * c));
  std::vector<float> xhat(static_cast<size_t>(r * c));
  std::vector<float> inv_std(static_cast<size_t>(r));
  const auto xv = x.data(), wv = weight.data(), bv = bias.data();
  for (int64_t i = 0; i < r; ++i) {
    float mu = 0.0f;
    for (int64_t j = 0; j < c; ++j) mu += xv[i * c + j];
    mu /= static_cast<float>(c);
    float var = 0.0f;
    for (int64_t j = 0; j < c; ++j) var += (xv[i * c + j] - mu) * (xv[i * c + j] - mu);
    var /= static_cast<float>(c);
    const float inv = 1.0f / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int64_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (xv[i * c + j] - mu) * inv;
      out[i * c + j] = xhat[i * c + j] * wv[j] + bv[j];
    }
  }
  auto px = x.node_ptr(), pw = weight.node_ptr(), pb = bias.node_ptr();
  return Tensor::make_result(
      x.shape(), std::move(out), {x, weight, bias},
      [px, pw, pb, xhat = std::move(xhat), inv_std = std::move(inv_std), r, c](detail::Node& self) {
        const float fc = static_cast<float>(c);
        for (int64_t i = 0; i < r; ++i) {
          const float* gy = self.grad.data() + i * c;
          const float* xh = xhat.data() + i * c;
          if (pw->requires_grad) {
            float* gw = pw->grad_buffer();
            for (int64_t j = 0; j < c; ++j) gw[j] += gy[j] * xh[j];
          }
          if (pb->requires_grad) {
            float* gb = pb->grad_buffer();
            for (int64_t j = 0; j < c; ++j) gb[j] += gy[j];
          }
          if (px->requires_grad) {
            float s1 = 0.0f, s2 = 0.0f;
            for (int64_t j = 0; j < c; ++j) {
              const float gh = gy[j] * pw->value[j];
              s1 += gh;
              s2 += gh * xh[j];
            }
            float* gx = px->grad_buffer() + i * c;
            for (int64_t j = 0; j < c; ++j) {
              const float gh = gy[j] * pw->value[j];
              gx[j] += inv_std[i] * (gh - s1 / fc - xh[j] * s2 / fc);
            }
          }
        }
      });
}

Tensor normalize_rows(const Tensor& a, float eps) {
  const int64_t r = a.rows(), c = a.cols();
  std::vector<float> out(a.data().begin(), a.data().end());
  std::vector<float> norms(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    float ss = 0.0f;
    for (int64_t j = 0; j < c; ++j) ss += out[i * c + j] * out[i * c + j];
    const float n = std::max(std::sqrt(ss), eps);
    norms[i] = n;
    for (int64_t j = 0; j < c; ++j) out[i * c + j] /= n;
  }
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [pa, norms = std::move(norms), r, c](detail::Node& self) {
                               if (!pa->requires_grad) return;
                               float* g = pa->grad_buffer();
                               for (int64_t i = 0; i < r; ++i) {
                                 const float* y = self.value.data() + i * c;
                                 const float* gy = self.grad.data() + i * c;
                                 float dot = 0.0f;
                                 for (int64_t j = 0; j < c; ++j) dot += y[j] * gy[j];
                                 for (int64_t j = 0; j < c; ++j) {
                                   g[i * c + j] += (gy[j] - y[j] * dot) / norms[i];
                                 }
                               }
                             });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::span<const uint8_t> mask) {
  require(q.rank() == 3 && k.rank() == 3 && v.rank() == 3, "attention: inputs must be [B, L, D]");
  const int64_t b = q.dim(0), lq = q.dim(1), d = q.dim(2), lk = k.dim(1);
  require(k.dim(0) == b && v.dim(0) == b && k.dim(2) == d && v.dim(2) == d && v.dim(1) == lk,
          "attention: inconsistent shapes " + shape_str(q.shape()) + " " + shape_str(k.shape()) +
              " " + shape_str(v.shape()));
  require(heads > 0 && d % heads == 0, "attention: dim not divisible by heads");
  require(mask.empty() || static_cast<int64_t>(mask.size()) == lq * lk, "attention: mask size");
  const int64_t dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<uint8_t> mask_copy(mask.begin(), mask.end());

  std::vector<float> out(static_cast<size_t>(b * lq * d), 0.0f);
  std::vector<float> probs(static_cast<size_t>(b * heads * lq * lk), 0.0f);
  for (int64_t bi = 0; bi < b; ++bi) {
    for (int64_t h = 0; h < heads; ++h) {
      ConstStridedMap qh(q.data().data() + bi * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      ConstStridedMap kh(k.data().data() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      ConstStridedMap vh(v.data().data() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
      MatMap p(probs.data() + (bi * heads + h) * lq * lk, lq, lk);
      p.noalias() = (qh * kh.transpose()) * scale;
      for (int64_t i = 0; i < lq; ++i) {
        float mx = -std::numeric_limits<float>::infinity();
        for (int64_t j = 0; j < lk; ++j) {
          if (!mask_copy.empty() && !mask_copy[i * lk + j]) continue;
          mx = std::max(mx, p(i, j));
        }
        if (mx == -std::numeric_limits<float>::infinity()) {
          p.row(i).setZero();
          continue;
        }
        float total = 0.0f;
        for (int64_t j = 0; j < lk; ++j) {
          if (!mask_copy.empty() && !mask_copy[i * lk + j]) {
            p(i, j) = 0.0f;
          } else {
            total += (p(i, j) = std::exp(p(i, j) - mx));
          }
        }
        p.row(i) /= total;
      }
      StridedMap oh(out.data() + bi * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
      oh.noalias() = p * vh;
    }
  }

  auto pq = q.node_ptr(), pk = k.node_ptr(), pv = v.node_ptr();
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v},
      [pq, pk, pv, probs = std::move(probs), b, lq, lk, d, dh, heads, scale](detail::Node& self) {
        RowMat dp(lq, lk);
        for (int64_t bi = 0; bi < b; ++bi) {
          for (int64_t h = 0; h < heads; ++h) {
            ConstMatMap p(probs.data() + (bi * heads + h) * lq * lk, lq, lk);
            ConstStridedMap go(self.grad.data() + bi * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap qh(pq->value.data() + bi * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap kh(pk->value.data() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
            ConstStridedMap vh(pv->value.data() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
            if (pv->requires_grad) {
              StridedMap gv(pv->grad_buffer() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
              gv.noalias() += p.transpose() * go;
            }
            if (!pq->requires_grad && !pk->requires_grad) continue;
            dp.noalias() = go * vh.transpose();
            for (int64_t i = 0; i < lq; ++i) {
              const float dot = p.row(i).dot(dp.row(i));
              dp.row(i) = p.row(i).cwiseProduct((dp.row(i).array() - dot).matrix());
            }
            if (pq->requires_grad) {
              StridedMap gq(pq->grad_buffer() + bi * lq * d + h * dh, lq, dh, Eigen::OuterStride<>(d));
              gq.noalias() += (dp * kh) * scale;
            }
            if (pk->requires_grad) {
              StridedMap gk(pk->grad_buffer() + bi * lk * d + h * dh, lk, dh, Eigen::OuterStride<>(d));
              gk.noalias() += (dp.transpose() * qh) * scale;
            }
          }
        }
      });
}

Tensor straight_through(const Tensor& a, const Tensor& replacement) {
  require_same_shape(a, replacement, "straight_through");
  auto pa = a.node_ptr();
  return Tensor::make_result(a.shape(), replacement.to_vector(), {a},
                             [pa](detail::Node& self) { accumulate(*pa, self.grad); });
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv3dGeometry geo) {
  require(x.rank() == 5 && w.rank() == 5, "conv3d: x must be [N,D,H,W,C] and w [kd,kh,kw,Ci,Co]");
  const int64_t n = x.dim(0), id = x.dim(1), ih = x.dim(2), iw = x.dim(3), ci = x.dim(4);
  const int64_t kd = w.dim(0), kh = w.dim(1), kw = w.dim(2), co = w.dim(4);
  require(w.dim(3) == ci, "conv3d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  require(bias.numel() == co, "conv3d: bias size mismatch");
  const int64_t od = (id + 2 * geo.pad_d - kd) / geo.stride_d + 1;
  const int64_t oh = (ih + 2 * geo.pad_h - kh) / geo.stride_h + 1;
  const int64_t ow = (iw + 2 * geo.pad_w - kw) / geo.stride_w + 1;
  require(od > 0 && oh > 0 && ow > 0, "conv3d: empty output");
  const int64_t rows = n * od * oh * ow, kdim = kd * kh * kw * ci;

  // im2col: each output voxel gets one row of kd*kh*kw*ci taps (zero padded).
  std::vector<float> cols(static_cast<size_t>(rows * kdim), 0.0f);
  std::vector<int64_t> src_index(static_cast<size_t>(rows * kd * kh * kw), -1);
  const auto xv = x.data();
  int64_t row = 0;
  for (int64_t b = 0; b < n; ++b) {
    for (int64_t z = 0; z < od; ++z) {
      for (int64_t y = 0; y < oh; ++y) {
        for (int64_t xx = 0; xx < ow; ++xx, ++row) {
          int64_t tap = 0;
          for (int64_t dz = 0; dz < kd; ++dz) {
            const int64_t sz = z * geo.stride_d - geo.pad_d + dz;
            for (int64_t dy = 0; dy < kh; ++dy) {
              const int64_t sy = y * geo.stride_h - geo.pad_h + dy;
              for (int64_t dx = 0; dx < kw; ++dx, ++tap) {
                const int64_t sx = xx * geo.stride_w - geo.pad_w + dx;
                if (sz < 0 || sz >= id || sy < 0 || sy >= ih || sx < 0 || sx >= iw) continue;
                const int64_t base = (((b * id + sz) * ih + sy) * iw + sx) * ci;
                src_index[row * kd * kh * kw + tap] = base;
                std::copy_n(xv.begin() + base, ci, cols.begin() + row * kdim + tap * ci);
              }
            }
          }
        }
      }
    }
  }
  std::vector<float> out(static_cast<size_t>(rows * co));
  MatMap om(out.data(), rows, co);
  om.noalias() = ConstMatMap(cols.data(), rows, kdim) * ConstMatMap(w.data().data(), kdim, co);
  om.rowwise() += Eigen::Map<const Eigen::RowVectorXf>(bias.data().data(), co);

  auto px = x.node_ptr(), pw = w.node_ptr(), pb = bias.node_ptr();
  const int64_t taps = kd * kh * kw;
  return Tensor::make_result(
      {n, od, oh, ow, co}, std::move(out), {x, w, bias},
      [px, pw, pb, cols = std::move(cols), src_index = std::move(src_index), rows, kdim, co, ci,
       taps](detail::Node& self) {
        ConstMatMap go(self.grad.data(), rows, co);
        if (pb->requires_grad) {
          Eigen::Map<Eigen::RowVectorXf>(pb->grad_buffer(), co) += go.colwise().sum();
        }
        if (pw->requires_grad) {
          MatMap(pw->grad_buffer(), kdim, co).noalias() +=
              ConstMatMap(cols.data(), rows, kdim).transpose() * go;
        }
        if (px->requires_grad) {
          RowMat gcols = go * ConstMatMap(pw->value.data(), kdim, co).transpose();
          float* gx = px->grad_buffer();
          for (int64_t r = 0; r < rows; ++r) {
            for (int64_t t = 0; t < taps; ++t) {
              const int64_t base = src_index[r * taps + t];
              if (base < 0) continue;
              const float* src = gcols.data() + r * kdim + t * ci;
              for (int64_t c = 0; c < ci; ++c) gx[base + c] += src[c];
            }
          }
        }
      });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d: x must be [N,H,W,C] and w [kh,kw,Ci,Co]");
  const Tensor x5 = reshape(x, {x.dim(0), 1, x.dim(1), x.dim(2), x.dim(3)});
  const Tensor w5 = reshape(w, {1, w.dim(0), w.dim(1), w.dim(2), w.dim(3)});
  const Tensor y = conv3d(x5, w5, bias, {1, stride, stride, 0, pad, pad});
  return reshape(y, {y.dim(0), y.dim(2), y.dim(3), y.dim(4)});
}

Tensor upsample3d_nearest2x(const Tensor& x) {
  require(x.rank() == 5, "upsample3d_nearest2x: x must be [N,D,H,W,C]");
  const int64_t n = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
  const int64_t d2 = 2 * d, h2 = 2 * h, w2 = 2 * w;
  std::vector<float> out(static_cast<size_t>(n * d2 * h2 * w2 * c));
  const auto xv = x.data();
  auto src_of = [=](int64_t b, int64_t z, int64_t y, int64_t xx) {
    return (((b * d + z / 2) * h + y / 2) * w + xx / 2) * c;
  };
  for (int64_t b = 0; b < n; ++b)
    for (int64_t z = 0; z < d2; ++z)
      for (int64_t y = 0; y < h2; ++y)
        for (int64_t xx = 0; xx < w2; ++xx)
          std::copy_n(xv.begin() + src_of(b, z, y, xx), c,
                      out.begin() + (((b * d2 + z) * h2 + y) * w2 + xx) * c);
  auto px = x.node_ptr();
  return Tensor::make_result({n, d2, h2, w2, c}, std::move(out), {x},
                             [px, src_of, n, d2, h2, w2, c](detail::Node& self) {
                               if (!px->requires_grad) return;
                               float* g = px->grad_buffer();
                               for (int64_t b = 0; b < n; ++b)
                                 for (int64_t z = 0; z < d2; ++z)
                                   for (int64_t y = 0; y < h2; ++y)
                                     for (int64_t xx = 0; xx < w2; ++xx) {
                                       const float* src =
                                           self.grad.data() + (((b * d2 + z) * h2 + y) * w2 + xx) * c;
                                       float* dst = g + src_of(b, z, y, xx);
                                       for (int64_t k = 0; k < c; ++k) dst[k] += src[k];
                                     }
                             });
}

}  // namespace ops

}  // namespace star4d
