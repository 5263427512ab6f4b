#include "croplandws/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>

namespace croplandws::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

std::shared_ptr<Node> make_node(Tensor value, std::vector<std::shared_ptr<Node>> inputs) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (const auto& in : inputs)
    if (in && in->requires_grad) node->requires_grad = true;
  node->inputs = std::move(inputs);
  return node;
}

bool wants_grad(const std::shared_ptr<Node>& n) { return n && n->requires_grad; }

void require_rank4(const Tensor& t, const char* what) {
  if (t.rank() != 4) throw std::invalid_argument(std::string(what) + ": expected NCHW tensor, got " + shape_str(t.shape()));
}

// Unfolds a [C, H, W] image into a [C*k*k, Ho*Wo] patch matrix.
// Patch-matrix buffer; every caller overwrites it fully, so skip zeroing.
inline std::unique_ptr<double[]> scratch(int64_t n) {
  return std::unique_ptr<double[]>(new double[static_cast<size_t>(n)]);
}

// Output columns [lo, hi) whose input column ow*s - p + kj lies inside [0, W).
inline void valid_cols(int64_t W, int s, int p, int kj, int64_t Wo, int64_t& lo, int64_t& hi) {
  const int64_t first = p - kj, last = W - 1 + p - kj;
  lo = first <= 0 ? 0 : std::min<int64_t>(Wo, (first + s - 1) / s);
  hi = last < 0 ? 0 : std::min<int64_t>(Wo, last / s + 1);
  hi = std::max(lo, hi);
}

void im2col(const double* x, int64_t C, int64_t H, int64_t W, int k, int s, int p, int64_t Ho, int64_t Wo,
            double* col) {
  for (int64_t c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        int64_t lo, hi;
        valid_cols(W, s, p, kj, Wo, lo, hi);
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * s - p + ki;
          double* out = row + oh * Wo;
          if (ih < 0 || ih >= H) {
            std::fill_n(out, Wo, 0.0);
            continue;
          }
          const double* src = x + (c * H + ih) * W;
          const int64_t off = kj - p;
          std::fill_n(out, lo, 0.0);
          if (s == 1 && hi > lo) std::copy(src + lo + off, src + hi + off, out + lo);
          else
            for (int64_t ow = lo; ow < hi; ++ow) out[ow] = src[ow * s + off];
          std::fill(out + hi, out + Wo, 0.0);
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates a patch matrix back into a [C, H, W] image.
void col2im(const double* col, int64_t C, int64_t H, int64_t W, int k, int s, int p, int64_t Ho, int64_t Wo,
            double* x) {
  for (int64_t c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * Ho * Wo;
        int64_t lo, hi;
        valid_cols(W, s, p, kj, Wo, lo, hi);
        for (int64_t oh = 0; oh < Ho; ++oh) {
          const int64_t ih = oh * s - p + ki;
          if (ih < 0 || ih >= H) continue;
          double* dst = x + (c * H + ih) * W;
          const double* in = row + oh * Wo;
          for (int64_t ow = lo; ow < hi; ++ow) dst[ow * s + kj - p] += in[ow];
        }
      }
    }
  }
}

struct BilinearAxis {
  std::vector<int64_t> lo, hi;
  std::vector<double> w_hi;
};

BilinearAxis bilinear_axis(int64_t in, int64_t out) {
  BilinearAxis ax;
  ax.lo.resize(static_cast<size_t>(out));
  ax.hi.resize(static_cast<size_t>(out));
  ax.w_hi.resize(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int64_t lo = static_cast<int64_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const int64_t hi = std::min(lo + 1, in - 1);
    ax.lo[static_cast<size_t>(o)] = lo;
    ax.hi[static_cast<size_t>(o)] = hi;
    ax.w_hi[static_cast<size_t>(o)] = src - static_cast<double>(lo);
  }
  return ax;
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.numel() != value.numel() || grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

double Var::item() const {
  if (node_->value.numel() != 1) throw std::invalid_argument("item() on non-scalar " + shape_str(shape()));
  return node_->value[0];
}

void Var::zero_grad() {
  if (node_ && node_->grad.numel() > 0) node_->grad.fill(0.0);
}

Var constant(Tensor value) { return Var(make_node(std::move(value), {})); }

Var parameter(Tensor value) {
  auto node = make_node(std::move(value), {});
  node->requires_grad = true;
  return Var(node);
}

Var detach(const Var& v) { return constant(v.value()); }

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward() on undefined Var");
  if (root.value().numel() != 1) throw std::invalid_argument("backward() needs a scalar root");
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->grad.numel() > 0) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// elementwise & reductions

Var add(const Var& a, const Var& b) {
  if (a.value().numel() != b.value().numel()) throw std::invalid_argument("add: size mismatch");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] += b.value()[i];
  auto node = make_node(std::move(out), {a.node(), b.node()});
  node->backward_fn = [](Node& self) {
    for (auto& in : self.inputs) {
      if (!wants_grad(in)) continue;
      Tensor& g = in->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    }
  };
  return Var(node);
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  if (a.value().numel() != b.value().numel()) throw std::invalid_argument("mul: size mismatch");
  Tensor out = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
  auto node = make_node(std::move(out), {a.node(), b.node()});
  node->backward_fn = [](Node& self) {
    auto& x = self.inputs[0];
    auto& y = self.inputs[1];
    if (wants_grad(x)) {
      Tensor& g = x->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * y->value[i];
    }
    if (wants_grad(y)) {
      Tensor& g = y->ensure_grad();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * x->value[i];
    }
  };
  return Var(node);
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v *= s;
  auto node = make_node(std::move(out), {a.node()});
  node->backward_fn = [s](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
  };
  return Var(node);
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (auto& v : out.values()) v += s;
  auto node = make_node(std::move(out), {a.node()});
  node->backward_fn = [](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  };
  return Var(node);
}

Var relu(const Var& a) {
  Tensor out = a.value();
  for (auto& v : out.values()) v = v > 0.0 ? v : 0.0;
  auto node = make_node(std::move(out), {a.node()});
  node->backward_fn = [](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i)
      if (self.value[i] > 0.0) g[i] += self.grad[i];
  };
  return Var(node);
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  auto node = make_node(Tensor(Shape{}, s), {a.node()});
  node->backward_fn = [](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    const double d = self.grad[0];
    for (auto& v : g.values()) v += d;
  };
  return Var(node);
}

Var mean(const Var& a) {
  const auto n = a.value().numel();
  if (n == 0) throw std::invalid_argument("mean of empty tensor");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var add_channel_constant(const Var& x, const Tensor& table) {
  const Tensor& xv = x.value();
  require_rank4(xv, "add_channel_constant");
  const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  if (table.numel() != N * C) throw std::invalid_argument("add_channel_constant: table must be [N, C]");
  Tensor out = xv;
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      double* p = out.data() + (n * C + c) * P;
      const double v = table[n * C + c];
      for (int64_t i = 0; i < P; ++i) p[i] += v;
    }
  auto node = make_node(std::move(out), {x.node()});
  node->backward_fn = [](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// convolution

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank4(xv, "conv2d input");
  require_rank4(wv, "conv2d weight");
  const int64_t N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int64_t Co = wv.dim(0);
  const int k = static_cast<int>(wv.dim(2));
  if (wv.dim(1) != Ci || wv.dim(3) != k)
    throw std::invalid_argument("conv2d: weight " + shape_str(wv.shape()) + " incompatible with input " +
                                shape_str(xv.shape()));
  if (bias.defined() && bias.value().numel() != Co) throw std::invalid_argument("conv2d: bias size mismatch");
  const int64_t Ho = (H + 2 * pad - k) / stride + 1;
  const int64_t Wo = (W + 2 * pad - k) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");
  const int64_t CKK = Ci * k * k, P = Ho * Wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor out({N, Co, Ho, Wo});
  auto col = scratch(pointwise ? 0 : CKK * P);
  CMapMat wm(wv.data(), Co, CKK);
  for (int64_t n = 0; n < N; ++n) {
    const double* xn = xv.data() + n * Ci * H * W;
    if (!pointwise) im2col(xn, Ci, H, W, k, stride, pad, Ho, Wo, col.get());
    CMapMat cm(pointwise ? xn : col.get(), CKK, P);
    MapMat om(out.data() + n * Co * P, Co, P);
    om.noalias() = wm * cm;
    if (bias.defined())
      for (int64_t c = 0; c < Co; ++c) om.row(c).array() += bias.value()[c];
  }

  std::vector<std::shared_ptr<Node>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  auto node = make_node(std::move(out), std::move(inputs));
  node->backward_fn = [=](Node& self) {
    auto& xin = self.inputs[0];
    auto& win = self.inputs[1];
    const bool gx = wants_grad(xin), gw = wants_grad(win);
    const bool gb = self.inputs.size() > 2 && wants_grad(self.inputs[2]);
    const Tensor& xv2 = xin->value;
    CMapMat wm2(win->value.data(), Co, CKK);
    auto colb = scratch(pointwise ? 0 : CKK * P);
    for (int64_t n = 0; n < N; ++n) {
      CMapMat dy(self.grad.data() + n * Co * P, Co, P);
      const double* xn = xv2.data() + n * Ci * H * W;
      if (gw) {
        if (!pointwise) im2col(xn, Ci, H, W, k, stride, pad, Ho, Wo, colb.get());
        CMapMat cm(pointwise ? xn : colb.get(), CKK, P);
        MapMat dw(win->ensure_grad().data(), Co, CKK);
        dw.noalias() += dy * cm.transpose();
      }
      if (gx) {
        double* dxn = xin->ensure_grad().data() + n * Ci * H * W;
        if (pointwise) {
          MapMat dx(dxn, Ci, P);
          dx.noalias() += wm2.transpose() * dy;
        } else {
          MapMat dc(colb.get(), CKK, P);
          dc.noalias() = wm2.transpose() * dy;
          col2im(colb.get(), Ci, H, W, k, stride, pad, Ho, Wo, dxn);
        }
      }
      if (gb) {
        Tensor& db = self.inputs[2]->ensure_grad();
        // plain loop: Eigen's vectorized sum depends on buffer alignment
        for (int64_t c = 0; c < Co; ++c) {
          const double* row = self.grad.data() + (n * Co + c) * P;
          double s = 0.0;
          for (int64_t i = 0; i < P; ++i) s += row[i];
          db[c] += s;
        }
      }
    }
  };
  return Var(node);
}

Var conv_transpose2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  require_rank4(xv, "conv_transpose2d input");
  require_rank4(wv, "conv_transpose2d weight");
  const int64_t N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int64_t Co = wv.dim(1);
  const int k = static_cast<int>(wv.dim(2));
  if (wv.dim(0) != Ci || wv.dim(3) != k) throw std::invalid_argument("conv_transpose2d: weight/input mismatch");
  if (bias.defined() && bias.value().numel() != Co) throw std::invalid_argument("conv_transpose2d: bias size mismatch");
  const int64_t Ho = (H - 1) * stride - 2 * pad + k;
  const int64_t Wo = (W - 1) * stride - 2 * pad + k;
  if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv_transpose2d: empty output");
  const int64_t CoKK = Co * k * k, P = H * W;

  Tensor out({N, Co, Ho, Wo});
  auto col = scratch(CoKK * P);
  CMapMat wm(wv.data(), Ci, CoKK);
  for (int64_t n = 0; n < N; ++n) {
    CMapMat xm(xv.data() + n * Ci * P, Ci, P);
    MapMat cm(col.get(), CoKK, P);
    cm.noalias() = wm.transpose() * xm;
    double* yn = out.data() + n * Co * Ho * Wo;
    col2im(col.get(), Co, Ho, Wo, k, stride, pad, H, W, yn);
    if (bias.defined())
      for (int64_t c = 0; c < Co; ++c) {
        double* plane = yn + c * Ho * Wo;
        for (int64_t i = 0; i < Ho * Wo; ++i) plane[i] += bias.value()[c];
      }
  }

  std::vector<std::shared_ptr<Node>> inputs{x.node(), weight.node()};
  if (bias.defined()) inputs.push_back(bias.node());
  auto node = make_node(std::move(out), std::move(inputs));
  node->backward_fn = [=](Node& self) {
    auto& xin = self.inputs[0];
    auto& win = self.inputs[1];
    const bool gx = wants_grad(xin), gw = wants_grad(win);
    const bool gb = self.inputs.size() > 2 && wants_grad(self.inputs[2]);
    CMapMat wm2(win->value.data(), Ci, CoKK);
    auto colb = scratch(CoKK * P);
    for (int64_t n = 0; n < N; ++n) {
      const double* dyn = self.grad.data() + n * Co * Ho * Wo;
      if (gx || gw) {
        im2col(dyn, Co, Ho, Wo, k, stride, pad, H, W, colb.get());
        CMapMat cm(colb.get(), CoKK, P);
        if (gx) {
          MapMat dx(xin->ensure_grad().data() + n * Ci * P, Ci, P);
          dx.noalias() += wm2 * cm;
        }
        if (gw) {
          CMapMat xm(xin->value.data() + n * Ci * P, Ci, P);
          MapMat dw(win->ensure_grad().data(), Ci, CoKK);
          dw.noalias() += xm * cm.transpose();
        }
      }
      if (gb) {
        Tensor& db = self.inputs[2]->ensure_grad();
        for (int64_t c = 0; c < Co; ++c) {
          const double* plane = dyn + c * Ho * Wo;
          double s = 0.0;
          for (int64_t i = 0; i < Ho * Wo; ++i) s += plane[i];
          db[c] += s;
        }
      }
    }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// normalization

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
  const Tensor& xv = x.value();
  require_rank4(xv, "group_norm");
  const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  if (groups <= 0 || C % groups != 0) throw std::invalid_argument("group_norm: channels not divisible by groups");
  if (gamma.value().numel() != C || beta.value().numel() != C) throw std::invalid_argument("group_norm: affine size");
  const int64_t cpg = C / groups, m = cpg * P;

  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<size_t>(N * groups));
  Tensor out(xv.shape());
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t g = 0; g < groups; ++g) {
      const int64_t base = (n * C + g * cpg) * P;
      double mu = 0.0;
      for (int64_t i = 0; i < m; ++i) mu += xv[base + i];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        const double d = xv[base + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(n * groups + g)] = is;
      for (int64_t cc = 0; cc < cpg; ++cc) {
        const int64_t c = g * cpg + cc;
        const double ga = gamma.value()[c], be = beta.value()[c];
        for (int64_t i = 0; i < P; ++i) {
          const int64_t idx = base + cc * P + i;
          xhat[idx] = (xv[idx] - mu) * is;
          out[idx] = ga * xhat[idx] + be;
        }
      }
    }
  }
  auto node = make_node(std::move(out), {x.node(), gamma.node(), beta.node()});
  node->backward_fn = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto& xin = self.inputs[0];
    auto& gin = self.inputs[1];
    auto& bin = self.inputs[2];
    const Tensor& dy = self.grad;
    if (wants_grad(gin) || wants_grad(bin)) {
      for (int64_t n = 0; n < N; ++n)
        for (int64_t c = 0; c < C; ++c) {
          double sg = 0.0, sb = 0.0;
          const int64_t base = (n * C + c) * P;
          for (int64_t i = 0; i < P; ++i) {
            sg += dy[base + i] * xhat[base + i];
            sb += dy[base + i];
          }
          if (wants_grad(gin)) gin->ensure_grad()[c] += sg;
          if (wants_grad(bin)) bin->ensure_grad()[c] += sb;
        }
    }
    if (!wants_grad(xin)) return;
    Tensor& dx = xin->ensure_grad();
    const Tensor& ga = gin->value;
    for (int64_t n = 0; n < N; ++n)
      for (int64_t g = 0; g < groups; ++g) {
        const int64_t base = (n * C + g * cpg) * P;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t cc = 0; cc < cpg; ++cc) {
          const double gc = ga[g * cpg + cc];
          for (int64_t i = 0; i < P; ++i) {
            const int64_t idx = base + cc * P + i;
            const double dxh = dy[idx] * gc;
            s1 += dxh;
            s2 += dxh * xhat[idx];
          }
        }
        const double is = inv_std[static_cast<size_t>(n * groups + g)];
        const double md = static_cast<double>(m);
        for (int64_t cc = 0; cc < cpg; ++cc) {
          const double gc = ga[g * cpg + cc];
          for (int64_t i = 0; i < P; ++i) {
            const int64_t idx = base + cc * P + i;
            const double dxh = dy[idx] * gc;
            dx[idx] += is / md * (md * dxh - s1 - xhat[idx] * s2);
          }
        }
      }
  };
  return Var(node);
}

Var layer_norm_channels(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x.value();
  require_rank4(xv, "layer_norm_channels");
  const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  if (gamma.value().numel() != C || beta.value().numel() != C) throw std::invalid_argument("layer_norm: affine size");
  Tensor xhat(xv.shape());
  std::vector<double> inv_std(static_cast<size_t>(N * P));
  Tensor out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < P; ++p) {
      const int64_t base = n * C * P + p;
      double mu = 0.0;
      for (int64_t c = 0; c < C; ++c) mu += xv[base + c * P];
      mu /= static_cast<double>(C);
      double var = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        const double d = xv[base + c * P] - mu;
        var += d * d;
      }
      var /= static_cast<double>(C);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_std[static_cast<size_t>(n * P + p)] = is;
      for (int64_t c = 0; c < C; ++c) {
        const int64_t idx = base + c * P;
        xhat[idx] = (xv[idx] - mu) * is;
        out[idx] = gamma.value()[c] * xhat[idx] + beta.value()[c];
      }
    }
  auto node = make_node(std::move(out), {x.node(), gamma.node(), beta.node()});
  node->backward_fn = [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
    auto& xin = self.inputs[0];
    auto& gin = self.inputs[1];
    auto& bin = self.inputs[2];
    const Tensor& dy = self.grad;
    const double cd = static_cast<double>(C);
    for (int64_t n = 0; n < N; ++n)
      for (int64_t p = 0; p < P; ++p) {
        const int64_t base = n * C * P + p;
        double s1 = 0.0, s2 = 0.0;
        for (int64_t c = 0; c < C; ++c) {
          const int64_t idx = base + c * P;
          if (wants_grad(gin)) gin->ensure_grad()[c] += dy[idx] * xhat[idx];
          if (wants_grad(bin)) bin->ensure_grad()[c] += dy[idx];
          const double dxh = dy[idx] * gin->value[c];
          s1 += dxh;
          s2 += dxh * xhat[idx];
        }
        if (!wants_grad(xin)) continue;
        Tensor& dx = xin->ensure_grad();
        const double is = inv_std[static_cast<size_t>(n * P + p)];
        for (int64_t c = 0; c < C; ++c) {
          const int64_t idx = base + c * P;
          const double dxh = dy[idx] * gin->value[c];
          dx[idx] += is / cd * (cd * dxh - s1 - xhat[idx] * s2);
        }
      }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// shape

Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channels: no inputs");
  const Tensor& first = parts[0].value();
  require_rank4(first, "concat_channels");
  const int64_t N = first.dim(0), H = first.dim(2), W = first.dim(3), P = H * W;
  int64_t C = 0;
  std::vector<int64_t> widths;
  for (const auto& p : parts) {
    const Tensor& v = p.value();
    require_rank4(v, "concat_channels");
    if (v.dim(0) != N || v.dim(2) != H || v.dim(3) != W) throw std::invalid_argument("concat_channels: shape mismatch");
    widths.push_back(v.dim(1));
    C += v.dim(1);
  }
  Tensor out({N, C, H, W});
  for (int64_t n = 0; n < N; ++n) {
    int64_t off = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
      const double* src = parts[i].value().data() + n * widths[i] * P;
      std::copy_n(src, widths[i] * P, out.data() + (n * C + off) * P);
      off += widths[i];
    }
  }
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) inputs.push_back(p.node());
  auto node = make_node(std::move(out), std::move(inputs));
  node->backward_fn = [=](Node& self) {
    for (int64_t n = 0; n < N; ++n) {
      int64_t off = 0;
      for (size_t i = 0; i < self.inputs.size(); ++i) {
        if (wants_grad(self.inputs[i])) {
          double* dst = self.inputs[i]->ensure_grad().data() + n * widths[i] * P;
          const double* src = self.grad.data() + (n * C + off) * P;
          for (int64_t j = 0; j < widths[i] * P; ++j) dst[j] += src[j];
        }
        off += widths[i];
      }
    }
  };
  return Var(node);
}

Var upsample_bilinear(const Var& x, int64_t out_h, int64_t out_w) {
  const Tensor& xv = x.value();
  require_rank4(xv, "upsample_bilinear");
  const int64_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("upsample_bilinear: bad output size");
  auto ay = bilinear_axis(H, out_h);
  auto ax = bilinear_axis(W, out_w);
  Tensor out({N, C, out_h, out_w});
  for (int64_t plane = 0; plane < N * C; ++plane) {
    const double* src = xv.data() + plane * H * W;
    double* dst = out.data() + plane * out_h * out_w;
    for (int64_t oy = 0; oy < out_h; ++oy) {
      const double wy = ay.w_hi[static_cast<size_t>(oy)];
      const double* r0 = src + ay.lo[static_cast<size_t>(oy)] * W;
      const double* r1 = src + ay.hi[static_cast<size_t>(oy)] * W;
      for (int64_t ox = 0; ox < out_w; ++ox) {
        const double wx = ax.w_hi[static_cast<size_t>(ox)];
        const int64_t x0 = ax.lo[static_cast<size_t>(ox)], x1 = ax.hi[static_cast<size_t>(ox)];
        const double top = r0[x0] + wx * (r0[x1] - r0[x0]);
        const double bot = r1[x0] + wx * (r1[x1] - r1[x0]);
        dst[oy * out_w + ox] = top + wy * (bot - top);
      }
    }
  }
  auto node = make_node(std::move(out), {x.node()});
  node->backward_fn = [=](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t plane = 0; plane < N * C; ++plane) {
      double* dst = g.data() + plane * H * W;
      const double* src = self.grad.data() + plane * out_h * out_w;
      for (int64_t oy = 0; oy < out_h; ++oy) {
        const double wy = ay.w_hi[static_cast<size_t>(oy)];
        const int64_t y0 = ay.lo[static_cast<size_t>(oy)], y1 = ay.hi[static_cast<size_t>(oy)];
        for (int64_t ox = 0; ox < out_w; ++ox) {
          const double wx = ax.w_hi[static_cast<size_t>(ox)];
          const int64_t x0 = ax.lo[static_cast<size_t>(ox)], x1 = ax.hi[static_cast<size_t>(ox)];
          const double d = src[oy * out_w + ox];
          dst[y0 * W + x0] += d * (1 - wy) * (1 - wx);
          dst[y0 * W + x1] += d * (1 - wy) * wx;
          dst[y1 * W + x0] += d * wy * (1 - wx);
          dst[y1 * W + x1] += d * wy * wx;
        }
      }
    }
  };
  return Var(node);
}

Var softmax_channels(const Var& x) {
  const Tensor& xv = x.value();
  require_rank4(xv, "softmax_channels");
  const int64_t N = xv.dim(0), C = xv.dim(1), P = xv.dim(2) * xv.dim(3);
  Tensor out(xv.shape());
  for (int64_t n = 0; n < N; ++n)
    for (int64_t p = 0; p < P; ++p) {
      const int64_t base = n * C * P + p;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t c = 0; c < C; ++c) mx = std::max(mx, xv[base + c * P]);
      double s = 0.0;
      for (int64_t c = 0; c < C; ++c) {
        const double e = std::exp(xv[base + c * P] - mx);
        out[base + c * P] = e;
        s += e;
      }
      for (int64_t c = 0; c < C; ++c) out[base + c * P] /= s;
    }
  auto node = make_node(std::move(out), {x.node()});
  node->backward_fn = [=](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t n = 0; n < N; ++n)
      for (int64_t p = 0; p < P; ++p) {
        const int64_t base = n * C * P + p;
        double dot = 0.0;
        for (int64_t c = 0; c < C; ++c) dot += self.value[base + c * P] * self.grad[base + c * P];
        for (int64_t c = 0; c < C; ++c) {
          const int64_t idx = base + c * P;
          g[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// temporal attention

Var temporal_attention(const Var& keys, const Var& query, const Tensor& mask, int heads, int64_t* fallback_pixels) {
  const Tensor& kv = keys.value();
  require_rank4(kv, "temporal_attention keys");
  const int64_t T = kv.dim(0), HD = kv.dim(1), P = kv.dim(2) * kv.dim(3);
  if (heads <= 0 || HD % heads != 0) throw std::invalid_argument("temporal_attention: key width not divisible by heads");
  const int64_t dk = HD / heads;
  if (query.value().numel() != HD) throw std::invalid_argument("temporal_attention: query must be [heads, dk]");
  if (mask.numel() != T * P) throw std::invalid_argument("temporal_attention: mask must be [T, 1, h, w]");
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  // att[(hd * T + t) * P + p]
  std::vector<double> att(static_cast<size_t>(heads * T * P), 0.0);
  std::vector<uint8_t> fallback(static_cast<size_t>(P), 0);
  Tensor out({T, 1, kv.dim(2), kv.dim(3)});
  std::vector<double> score(static_cast<size_t>(T));
  int64_t n_fallback = 0;
  for (int64_t p = 0; p < P; ++p) {
    bool any = false;
    for (int64_t t = 0; t < T; ++t) any = any || mask[t * P + p] > 0.5;
    if (!any) {
      fallback[static_cast<size_t>(p)] = 1;
      ++n_fallback;
      for (int64_t t = 0; t < T; ++t) out[t * P + p] = 1.0 / static_cast<double>(T);
      continue;
    }
    for (int hd = 0; hd < heads; ++hd) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t t = 0; t < T; ++t) {
        if (mask[t * P + p] <= 0.5) continue;
        double s = 0.0;
        for (int64_t k = 0; k < dk; ++k) s += query.value()[hd * dk + k] * kv[(t * HD + hd * dk + k) * P + p];
        score[static_cast<size_t>(t)] = s * inv_sqrt;
        mx = std::max(mx, score[static_cast<size_t>(t)]);
      }
      double z = 0.0;
      for (int64_t t = 0; t < T; ++t) {
        if (mask[t * P + p] <= 0.5) continue;
        const double e = std::exp(score[static_cast<size_t>(t)] - mx);
        att[static_cast<size_t>((hd * T + t) * P + p)] = e;
        z += e;
      }
      for (int64_t t = 0; t < T; ++t) {
        double& a = att[static_cast<size_t>((hd * T + t) * P + p)];
        a /= z;
        out[t * P + p] += a / static_cast<double>(heads);
      }
    }
  }
  if (fallback_pixels) *fallback_pixels += n_fallback;

  auto node = make_node(std::move(out), {keys.node(), query.node()});
  node->backward_fn = [=, att = std::move(att), fallback = std::move(fallback)](Node& self) {
    auto& kin = self.inputs[0];
    auto& qin = self.inputs[1];
    const bool gk = wants_grad(kin), gq = wants_grad(qin);
    if (!gk && !gq) return;
    const Tensor& kv2 = kin->value;
    const Tensor& qv = qin->value;
    std::vector<double> ds(static_cast<size_t>(T));
    for (int64_t p = 0; p < P; ++p) {
      if (fallback[static_cast<size_t>(p)]) continue;
      for (int hd = 0; hd < heads; ++hd) {
        double dot = 0.0;
        for (int64_t t = 0; t < T; ++t)
          dot += att[static_cast<size_t>((hd * T + t) * P + p)] * self.grad[t * P + p];
        for (int64_t t = 0; t < T; ++t) {
          const double a = att[static_cast<size_t>((hd * T + t) * P + p)];
          ds[static_cast<size_t>(t)] = a * (self.grad[t * P + p] - dot) / static_cast<double>(heads) * inv_sqrt;
        }
        for (int64_t t = 0; t < T; ++t) {
          const double d = ds[static_cast<size_t>(t)];
          if (d == 0.0) continue;
          for (int64_t k = 0; k < dk; ++k) {
            const int64_t kidx = (t * HD + hd * dk + k) * P + p;
            if (gk) kin->ensure_grad()[kidx] += d * qv[hd * dk + k];
            if (gq) qin->ensure_grad()[hd * dk + k] += d * kv2[kidx];
          }
        }
      }
    }
  };
  return Var(node);
}

Var mask_renormalize(const Var& attention, const Tensor& mask) {
  const Tensor& av = attention.value();
  require_rank4(av, "mask_renormalize");
  const int64_t T = av.dim(0), P = av.dim(2) * av.dim(3);
  if (av.dim(1) != 1 || mask.numel() != T * P) throw std::invalid_argument("mask_renormalize: shape mismatch");
  Tensor out(av.shape());
  std::vector<double> mass(static_cast<size_t>(P), 0.0);
  for (int64_t p = 0; p < P; ++p) {
    double s = 0.0;
    int64_t valid = 0;
    for (int64_t t = 0; t < T; ++t) {
      const double m = mask[t * P + p] > 0.5 ? 1.0 : 0.0;
      s += av[t * P + p] * m;
      valid += m > 0.0;
    }
    mass[static_cast<size_t>(p)] = s;
    if (s > 0.0) {
      for (int64_t t = 0; t < T; ++t) out[t * P + p] = mask[t * P + p] > 0.5 ? av[t * P + p] / s : 0.0;
    } else {
      for (int64_t t = 0; t < T; ++t) {
        if (valid == 0)
          out[t * P + p] = 1.0 / static_cast<double>(T);
        else
          out[t * P + p] = mask[t * P + p] > 0.5 ? 1.0 / static_cast<double>(valid) : 0.0;
      }
    }
  }
  auto node = make_node(std::move(out), {attention.node()});
  node->backward_fn = [=, mass = std::move(mass)](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    for (int64_t p = 0; p < P; ++p) {
      const double s = mass[static_cast<size_t>(p)];
      if (!(s > 0.0)) continue;
      double dot = 0.0;
      for (int64_t t = 0; t < T; ++t) dot += self.value[t * P + p] * self.grad[t * P + p];
      for (int64_t t = 0; t < T; ++t)
        if (mask[t * P + p] > 0.5) g[t * P + p] += (self.grad[t * P + p] - dot) / s;
    }
  };
  return Var(node);
}

Var temporal_weighted_sum(const Var& features, const Var& attention) {
  const Tensor& ev = features.value();
  const Tensor& av = attention.value();
  require_rank4(ev, "temporal_weighted_sum features");
  require_rank4(av, "temporal_weighted_sum attention");
  const int64_t T = ev.dim(0), C = ev.dim(1), H = ev.dim(2), W = ev.dim(3), P = H * W;
  if (av.dim(0) != T || av.dim(1) != 1 || av.dim(2) != H || av.dim(3) != W)
    throw std::invalid_argument("temporal_weighted_sum: attention " + shape_str(av.shape()) +
                                " does not match features " + shape_str(ev.shape()));
  Tensor out({1, C, H, W});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t c = 0; c < C; ++c) {
      const double* e = ev.data() + (t * C + c) * P;
      const double* a = av.data() + t * P;
      double* o = out.data() + c * P;
      for (int64_t p = 0; p < P; ++p) o[p] += a[p] * e[p];
    }
  auto node = make_node(std::move(out), {features.node(), attention.node()});
  node->backward_fn = [=](Node& self) {
    auto& ein = self.inputs[0];
    auto& ain = self.inputs[1];
    const bool ge = wants_grad(ein), ga = wants_grad(ain);
    for (int64_t t = 0; t < T; ++t)
      for (int64_t c = 0; c < C; ++c) {
        const double* dy = self.grad.data() + c * P;
        if (ge) {
          double* de = ein->ensure_grad().data() + (t * C + c) * P;
          const double* a = ain->value.data() + t * P;
          for (int64_t p = 0; p < P; ++p) de[p] += a[p] * dy[p];
        }
        if (ga) {
          double* da = ain->ensure_grad().data() + t * P;
          const double* e = ein->value.data() + (t * C + c) * P;
          for (int64_t p = 0; p < P; ++p) da[p] += e[p] * dy[p];
        }
      }
  };
  return Var(node);
}

// ---------------------------------------------------------------------------
// losses

Var masked_cross_entropy(const Var& logits, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
                         int64_t* contributing) {
  const Tensor& lv = logits.value();
  require_rank4(lv, "masked_cross_entropy");
  if (lv.dim(0) != 1) throw std::invalid_argument("masked_cross_entropy: batch dimension must be 1");
  const int64_t K = lv.dim(1), P = lv.dim(2) * lv.dim(3);
  if (static_cast<int64_t>(labels.size()) != P || static_cast<int64_t>(mask.size()) != P)
    throw std::invalid_argument("masked_cross_entropy: label/mask size mismatch");
  std::vector<int64_t> used;
  double total = 0.0;
  for (int64_t p = 0; p < P; ++p) {
    if (mask[static_cast<size_t>(p)] != 1 || labels[static_cast<size_t>(p)] == kIgnoreLabel) continue;
    const int64_t y = labels[static_cast<size_t>(p)];
    if (y >= K) throw std::invalid_argument("masked_cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t k = 0; k < K; ++k) mx = std::max(mx, lv[k * P + p]);
    double s = 0.0;
    for (int64_t k = 0; k < K; ++k) s += std::exp(lv[k * P + p] - mx);
    total += (mx + std::log(s)) - lv[y * P + p];
    used.push_back(p);
  }
  if (contributing) *contributing = static_cast<int64_t>(used.size());
  const double n = static_cast<double>(used.size());
  auto node = make_node(Tensor(Shape{}, used.empty() ? 0.0 : total / n), {logits.node()});
  node->backward_fn = [=, used = std::move(used)](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in) || used.empty()) return;
    Tensor& g = in->ensure_grad();
    const Tensor& l = in->value;
    const double d = self.grad[0] / n;
    for (int64_t p : used) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < K; ++k) mx = std::max(mx, l[k * P + p]);
      double s = 0.0;
      for (int64_t k = 0; k < K; ++k) s += std::exp(l[k * P + p] - mx);
      const int64_t y = labels[static_cast<size_t>(p)];
      for (int64_t k = 0; k < K; ++k) {
        const double prob = std::exp(l[k * P + p] - mx) / s;
        g[k * P + p] += d * (prob - (k == y ? 1.0 : 0.0));
      }
    }
  };
  return Var(node);
}

Var masked_nll(const Var& probs, const std::vector<uint8_t>& labels, const std::vector<uint8_t>& mask,
               int64_t* contributing, double eps) {
  const Tensor& pv = probs.value();
  require_rank4(pv, "masked_nll");
  if (pv.dim(0) != 1) throw std::invalid_argument("masked_nll: batch dimension must be 1");
  const int64_t K = pv.dim(1), P = pv.dim(2) * pv.dim(3);
  if (static_cast<int64_t>(labels.size()) != P || static_cast<int64_t>(mask.size()) != P)
    throw std::invalid_argument("masked_nll: label/mask size mismatch");
  std::vector<int64_t> used;
  double total = 0.0;
  for (int64_t p = 0; p < P; ++p) {
    if (mask[static_cast<size_t>(p)] != 1 || labels[static_cast<size_t>(p)] == kIgnoreLabel) continue;
    const int64_t y = labels[static_cast<size_t>(p)];
    if (y >= K) throw std::invalid_argument("masked_nll: label out of range");
    total -= std::log(std::max(pv[y * P + p], eps));
    used.push_back(p);
  }
  if (contributing) *contributing = static_cast<int64_t>(used.size());
  const double n = static_cast<double>(used.size());
  auto node = make_node(Tensor(Shape{}, used.empty() ? 0.0 : total / n), {probs.node()});
  node->backward_fn = [=, used = std::move(used)](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in) || used.empty()) return;
    Tensor& g = in->ensure_grad();
    const double d = self.grad[0] / n;
    for (int64_t p : used) {
      const int64_t idx = labels[static_cast<size_t>(p)] * P + p;
      const double v = in->value[idx];
      if (v > eps) g[idx] -= d / v;  // clamped region is flat
    }
  };
  return Var(node);
}

Var kl_pairs(const Var& z, const std::vector<std::pair<int64_t, int64_t>>& pairs, double eps) {
  const Tensor& zv = z.value();
  require_rank4(zv, "kl_pairs");
  if (zv.dim(0) != 1) throw std::invalid_argument("kl_pairs: batch dimension must be 1");
  const int64_t D = zv.dim(1), P = zv.dim(2) * zv.dim(3);
  for (const auto& [a, b] : pairs)
    if (a < 0 || a >= P || b < 0 || b >= P) throw std::out_of_range("kl_pairs: pixel index out of range");
  Tensor out({static_cast<int64_t>(pairs.size())});
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto [a, b] = pairs[i];
    double kl = 0.0;
    for (int64_t c = 0; c < D; ++c) {
      const double pa = zv[c * P + a], pb = zv[c * P + b];
      kl += pa * (std::log(std::max(pa, eps)) - std::log(std::max(pb, eps)));
    }
    out[static_cast<int64_t>(i)] = kl;
  }
  auto node = make_node(std::move(out), {z.node()});
  node->backward_fn = [=](Node& self) {
    auto& in = self.inputs[0];
    if (!wants_grad(in)) return;
    Tensor& g = in->ensure_grad();
    const Tensor& zz = in->value;
    for (size_t i = 0; i < pairs.size(); ++i) {
      const double d = self.grad[static_cast<int64_t>(i)];
      if (d == 0.0) continue;
      const auto [a, b] = pairs[i];
      for (int64_t c = 0; c < D; ++c) {
        const double pa = zz[c * P + a], pb = zz[c * P + b];
        const double ga = std::log(std::max(pa, eps)) - std::log(std::max(pb, eps)) + (pa > eps ? 1.0 : 0.0);
        const double gb = pb > eps ? -pa / pb : 0.0;
        g[c * P + a] += d * ga;
        g[c * P + b] += d * gb;
      }
    }
  };
  return Var(node);
}

}  // namespace croplandws::ag
