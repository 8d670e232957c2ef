#pragma once

// Minimal reverse-mode automatic differentiation over dense float tensors.
//
// Tensors are reference-counted handles to graph nodes. Every operation that
// receives at least one input requiring gradients records a backward closure;
// Tensor::backward() runs those closures in reverse topological order.
// Storage is row-major. Most operations treat the last dimension as the
// feature axis and everything before it as rows.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace star4d {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  float* grad_buffer();
};

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t dim(int axis) const;
  int64_t rank() const { return static_cast<int64_t>(shape().size()); }
  int64_t numel() const;
  // Product of all dimensions but the last.
  int64_t rows() const;
  int64_t cols() const;

  std::span<const float> data() const;
  // Direct write access; only for leaves (parameters, optimizers, loaders).
  std::span<float> mutable_data();
  std::vector<float> to_vector() const;
  float item() const;
  float at(int64_t flat_index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  std::span<const float> grad() const;
  std::span<float> mutable_grad();
  void zero_grad();

  // Accumulates d(this)/d(leaf) into every reachable leaf; this must be scalar.
  void backward() const;
  Tensor detach() const;
  Tensor clone() const;

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Builds an op output. `parents` are recorded only if grad mode is on and at
  // least one of them requires gradients; `backward` is dropped otherwise.
  static Tensor make_result(Shape shape, std::vector<float> value,
                            std::vector<Tensor> parents,
                            std::function<void(detail::Node&)> backward);

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;
};

namespace ops {

// Elementwise, equal shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);

// a: [..., C], b: [C]; broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& b);
Tensor mul_row(const Tensor& a, const Tensor& b);

// a: [..., K], b: [K, N] -> [..., N].
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor square(const Tensor& a);
// Gradient passes only where lo <= a <= hi.
Tensor clamp(const Tensor& a, float lo, float hi);

Tensor reshape(const Tensor& a, Shape shape);
// a: [R, C] -> [C, R].
Tensor transpose(const Tensor& a);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row range over the flattened leading dimensions.
Tensor slice_rows(const Tensor& a, int64_t start, int64_t count);
Tensor slice_cols(const Tensor& a, int64_t start, int64_t count);
// out[i] = table[indices[i]]; table: [V, E] -> [len, E].
Tensor gather_rows(const Tensor& table, std::span<const int32_t> indices);
// Sparse linear row mixing: out[row] += weight * input[source] for every entry.
// input: [R, C] -> [rows, C].
struct SparseEntry {
  int32_t row = 0;
  int32_t source = 0;
  float weight = 0.0f;
};
Tensor sparse_rows(const Tensor& input, std::span<const SparseEntry> entries, int64_t rows);
// Mean over groups of consecutive rows: [G*k, C] -> [G, C].
Tensor mean_row_groups(const Tensor& a, int64_t group_size);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor mse(const Tensor& a, const Tensor& b);

Tensor softmax_rows(const Tensor& a);
// Row-wise negative log-likelihood of `targets` under softmax(logits): [R, K] -> [R].
Tensor nll_rows(const Tensor& logits, std::span<const int32_t> targets);

Tensor rms_norm(const Tensor& x, const Tensor& weight, float eps = 1e-5f);
Tensor layer_norm(const Tensor& x, const Tensor& weight, const Tensor& bias, float eps = 1e-5f);
Tensor normalize_rows(const Tensor& a, float eps = 1e-12f);

// Scaled dot-product multi-head attention.
// q: [B, Lq, D], k and v: [B, Lk, D], D divisible by heads.
// mask (optional) is Lq*Lk bytes shared over the batch, nonzero = may attend.
// A query row with no allowed key produces zeros.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 std::span<const uint8_t> mask = {});

// Forward value `replacement`, gradient passed straight through to `a`.
Tensor straight_through(const Tensor& a, const Tensor& replacement);

// Channels-last convolution. x: [N, D, H, W, Ci], w: [kd, kh, kw, Ci, Co], bias: [Co].
struct Conv3dGeometry {
  int stride_d = 1, stride_h = 1, stride_w = 1;
  int pad_d = 0, pad_h = 0, pad_w = 0;
};
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias, Conv3dGeometry geometry);
// x: [N, H, W, Ci], w: [kh, kw, Ci, Co].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
// Nearest-neighbour 2x upsampling of [N, D, H, W, C].
Tensor upsample3d_nearest2x(const Tensor& x);

}  // namespace ops

}  // namespace star4d
