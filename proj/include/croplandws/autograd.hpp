#pragma once

// Minimal reverse-mode automatic differentiation over croplandws::Tensor.
//
// A graph is rebuilt on every forward pass. Leaves created with parameter()
// persist across passes and accumulate gradients until zero_grad().

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "croplandws/tensor.hpp"

namespace croplandws::ag {

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  void zero_grad();
  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

Var constant(Tensor value);
Var parameter(Tensor value);
// A copy of v's value cut off from the graph.
Var detach(const Var& v);

// Runs backpropagation from a scalar root, seeding d(root)/d(root) = 1.
void backward(const Var& root);

// ---- elementwise & reductions ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
// Adds a constant [N, C] table broadcast over the spatial dims of an NCHW tensor.
Var add_channel_constant(const Var& x, const Tensor& table);

// ---- convolution family (NCHW) ----
// weight [Co, Ci, k, k]; bias [Co] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
// weight [Ci, Co, k, k]; bias [Co] or undefined.
Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);

// ---- normalization ----
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
// Normalizes each (n, h, w) vector over the channel axis.
Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);

// ---- shape ----
Var concat_channels(const std::vector<Var>& parts);
// Bilinear resize with half-pixel centers (align_corners = false).
Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w);
Var softmax_channels(const Var& x);

// ---- temporal attention ----
// keys [T, heads*dk, h, w]; query [heads, dk]; mask [T, 1, h, w] of 0/1.
// Returns the head-averaged masked softmax over T, shape [T, 1, h, w].
// Pixels with no valid frame get uniform weights; their count is added to
// *fallback_pixels when the pointer is non-null.
Var temporal_attention(const Var& keys, const Var& query, const Tensor& mask, int heads,
                       int64_t* fallback_pixels = nullptr);
// Multiplies attention by validity and renormalizes over T. Pixels whose
// masked mass is zero fall back to uniform weights over valid frames (or all
// frames if none are valid).
Var mask_renormalize(const Var& attention, const Tensor& mask);
// sum_t a[t] * e[t] with a [T,1,h,w] broadcast over channels of e [T,C,h,w].
Var temporal_weighted_sum(const Var& features, const Var& attention);

// ---- losses ----
inline constexpr uint8_t kIgnoreLabel = 255;
// Mean cross-entropy of softmax(logits) over pixels with mask == 1 and a label
// other than kIgnoreLabel. logits [1, K, H, W]; labels, mask of size H*W.
// Returns 0 when no pixel contributes.
Var masked_cross_entropy(const Var& logits, const std::vector<uint8_t>& labels,
                         const std::vector<uint8_t>& mask, int64_t* contributing = nullptr);
// Mean of -log(max(P[label], eps)) over the same pixel set as
// masked_cross_entropy, for inputs that are already probabilities.
Var masked_nll(const Var& probs, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
               int64_t* contributing = nullptr, double eps = 1e-12);
// KL(z[a] || z[b]) for every (a, b) linear-pixel pair of a per-pixel
// distribution map z [1, D, H, W]; values clamped below at eps before logs.
// Returns a vector [P].
Var kl_pairs(const Var& z, const std::vector<std::pair<int64_t, int64_t>>& pairs, double eps = 1e-8);

}  // namespace croplandws::ag
