#include "bronchosynth/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "bronchosynth/errors.hpp"

namespace bsynth::ag {
namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

thread_local bool grad_enabled = true;

bool any_grad(const Var& a) { return a && a->requires_grad; }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = grad_enabled && std::any_of(inputs.begin(), inputs.end(), any_grad);
  if (node->requires_grad) {
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return node;
}

void im2col(const float* x, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* col) {
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * wo, row + (oy + 1) * wo, 0.0f);
            continue;
          }
          const float* src = x + (static_cast<std::size_t>(ic) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int c, int h, int w, int k, int stride, int pad, int ho, int wo, float* x) {
  for (int ic = 0; ic < c; ++ic) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + ((static_cast<std::size_t>(ic) * k + ky) * k + kx) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          float* dst = x + (static_cast<std::size_t>(ic) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
          }
        }
      }
    }
  }
}

template <typename Fwd, typename Bwd>
Var elementwise(const Var& x, Fwd fwd, Bwd bwd) {
  Tensor out = x->value;
  for (float& v : out.data) v = fwd(v);
  return make_result(std::move(out), {x}, [x, bwd](Node& self) {
    Tensor& gx = x->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx.data[i] += self.grad.data[i] * bwd(x->value.data[i], self.value.data[i]);
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(grad_enabled) { grad_enabled = false; }
NoGradGuard::~NoGradGuard() { grad_enabled = previous_; }

Tensor& Node::grad_buffer() {
  if (grad.size() != value.size()) grad = Tensor(value.n, value.c, value.h, value.w);
  return grad;
}

Var constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return node;
}

Var parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return node;
}

void backward(const std::vector<std::pair<Var, Tensor>>& seeds) {
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  // Iterative post-order DFS.
  std::vector<std::pair<Node*, std::size_t>> stack;
  for (const auto& [var, seed] : seeds) {
    if (!var || !var->requires_grad) continue;
    if (seed.size() != var->value.size()) throw InputError("gradient seed shape mismatch");
    Tensor& g = var->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += seed.data[i];
    if (visited.insert(var.get()).second) stack.emplace_back(var.get(), 0);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        Node* child = node->inputs[next++].get();
        if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->grad.size() == node->value.size()) node->backward_fn(*node);
  }
}

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  const Tensor& in = x->value;
  const Tensor& wt = weight->value;
  const int k = wt.h;
  if (wt.c != in.c) throw InputError("conv2d: input has " + std::to_string(in.c) + " channels, weight expects " + std::to_string(wt.c));
  const int ho = (in.h + 2 * pad - k) / stride + 1;
  const int wo = (in.w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw InputError("conv2d: input too small for kernel");
  const int rows = in.c * k * k;
  const int cols = ho * wo;

  Tensor out(in.n, wt.n, ho, wo);
  FloatBuffer col(static_cast<std::size_t>(rows) * cols);
  ConstMatMap wm(wt.data.data(), wt.n, rows);
  for (int b = 0; b < in.n; ++b) {
    im2col(in.data.data() + static_cast<std::size_t>(b) * in.c * in.plane(), in.c, in.h, in.w, k, stride, pad, ho, wo,
           col.data());
    MatMap om(out.data.data() + static_cast<std::size_t>(b) * wt.n * cols, wt.n, cols);
    om.noalias() = wm * ConstMatMap(col.data(), rows, cols);
    if (bias) {
      for (int o = 0; o < wt.n; ++o) om.row(o).array() += bias->value.data[o];
    }
  }

  return make_result(std::move(out), {x, weight, bias}, [x, weight, bias, stride, pad, k, ho, wo, rows, cols](Node& self) {
    const Tensor& in = x->value;
    const Tensor& wt = weight->value;
    FloatBuffer col(static_cast<std::size_t>(rows) * cols);
    ConstMatMap wm(wt.data.data(), wt.n, rows);
    for (int b = 0; b < in.n; ++b) {
      ConstMatMap gm(self.grad.data.data() + static_cast<std::size_t>(b) * wt.n * cols, wt.n, cols);
      if (weight->requires_grad) {
        im2col(in.data.data() + static_cast<std::size_t>(b) * in.c * in.plane(), in.c, in.h, in.w, k, stride, pad, ho,
               wo, col.data());
        MatMap gw(weight->grad_buffer().data.data(), wt.n, rows);
        gw.noalias() += gm * ConstMatMap(col.data(), rows, cols).transpose();
      }
      if (bias && bias->requires_grad) {
        Tensor& gb = bias->grad_buffer();
        for (int o = 0; o < wt.n; ++o) gb.data[o] += gm.row(o).sum();
      }
      if (x->requires_grad) {
        MatMap cm(col.data(), rows, cols);
        cm.noalias() = wm.transpose() * gm;
        col2im(col.data(), in.c, in.h, in.w, k, stride, pad, ho, wo,
               x->grad_buffer().data.data() + static_cast<std::size_t>(b) * in.c * in.plane());
      }
    }
  });
}

Var instance_norm(const Var& x, float eps) {
  const Tensor& in = x->value;
  Tensor out(in.n, in.c, in.h, in.w);
  const std::size_t plane = in.plane();
  std::vector<float> inv_std(static_cast<std::size_t>(in.n) * in.c);
  for (std::size_t p = 0; p < inv_std.size(); ++p) {
    const float* src = in.data.data() + p * plane;
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += src[i];
    mean /= static_cast<double>(plane);
    double var = 0.0;
    for (std::size_t i = 0; i < plane; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(plane);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[p] = static_cast<float>(s);
    float* dst = out.data.data() + p * plane;
    for (std::size_t i = 0; i < plane; ++i) dst[i] = static_cast<float>((src[i] - mean) * s);
  }
  return make_result(std::move(out), {x}, [x, inv_std = std::move(inv_std), plane](Node& self) {
    Tensor& gx = x->grad_buffer();
    for (std::size_t p = 0; p < inv_std.size(); ++p) {
      const float* gy = self.grad.data.data() + p * plane;
      const float* y = self.value.data.data() + p * plane;
      double mean_g = 0.0, mean_gy = 0.0;
      for (std::size_t i = 0; i < plane; ++i) {
        mean_g += gy[i];
        mean_gy += static_cast<double>(gy[i]) * y[i];
      }
      mean_g /= static_cast<double>(plane);
      mean_gy /= static_cast<double>(plane);
      float* dst = gx.data.data() + p * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        dst[i] += static_cast<float>(inv_std[p] * (gy[i] - mean_g - y[i] * mean_gy));
      }
    }
  });
}

Var relu(const Var& x) {
  return elementwise(x, [](float v) { return v > 0.0f ? v : 0.0f; }, [](float in, float) { return in > 0.0f ? 1.0f : 0.0f; });
}

Var leaky_relu(const Var& x, float slope) {
  return elementwise(
      x, [slope](float v) { return v > 0.0f ? v : slope * v; },
      [slope](float in, float) { return in > 0.0f ? 1.0f : slope; });
}

Var tanh(const Var& x) {
  return elementwise(x, [](float v) { return std::tanh(v); }, [](float, float out) { return 1.0f - out * out; });
}

Var sigmoid(const Var& x) {
  return elementwise(
      x, [](float v) { return 1.0f / (1.0f + std::exp(-v)); }, [](float, float out) { return out * (1.0f - out); });
}

Var affine(const Var& x, float scale, float shift) {
  return elementwise(x, [scale, shift](float v) { return scale * v + shift; }, [scale](float, float) { return scale; });
}

Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw InputError("add: shape mismatch");
  Tensor out = a->value;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b->value.data[i];
  return make_result(std::move(out), {a, b}, [a, b](Node& self) {
    for (const Var& v : {a, b}) {
      if (!v->requires_grad) continue;
      Tensor& g = v->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
    }
  });
}

Var avg_pool2(const Var& x) {
  const Tensor& in = x->value;
  const int ho = in.h / 2, wo = in.w / 2;
  Tensor out(in.n, in.c, ho, wo);
  for (int p = 0; p < in.n * in.c; ++p) {
    const float* src = in.data.data() + static_cast<std::size_t>(p) * in.plane();
    float* dst = out.data.data() + static_cast<std::size_t>(p) * out.plane();
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const float* s = src + (2 * y) * in.w + 2 * xx;
        dst[y * wo + xx] = 0.25f * (s[0] + s[1] + s[in.w] + s[in.w + 1]);
      }
    }
  }
  return make_result(std::move(out), {x}, [x, ho, wo](Node& self) {
    Tensor& gx = x->grad_buffer();
    for (int p = 0; p < gx.n * gx.c; ++p) {
      float* dst = gx.data.data() + static_cast<std::size_t>(p) * gx.plane();
      const float* g = self.grad.data.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) {
          const float v = 0.25f * g[y * wo + xx];
          float* d = dst + (2 * y) * gx.w + 2 * xx;
          d[0] += v;
          d[1] += v;
          d[gx.w] += v;
          d[gx.w + 1] += v;
        }
      }
    }
  });
}

Var upsample2(const Var& x) {
  const Tensor& in = x->value;
  Tensor out(in.n, in.c, in.h * 2, in.w * 2);
  for (int p = 0; p < in.n * in.c; ++p) {
    const float* src = in.data.data() + static_cast<std::size_t>(p) * in.plane();
    float* dst = out.data.data() + static_cast<std::size_t>(p) * out.plane();
    for (int y = 0; y < out.h; ++y) {
      for (int xx = 0; xx < out.w; ++xx) dst[y * out.w + xx] = src[(y / 2) * in.w + xx / 2];
    }
  }
  return make_result(std::move(out), {x}, [x](Node& self) {
    Tensor& gx = x->grad_buffer();
    const int ho = self.value.h, wo = self.value.w;
    for (int p = 0; p < gx.n * gx.c; ++p) {
      float* dst = gx.data.data() + static_cast<std::size_t>(p) * gx.plane();
      const float* g = self.grad.data.data() + static_cast<std::size_t>(p) * ho * wo;
      for (int y = 0; y < ho; ++y) {
        for (int xx = 0; xx < wo; ++xx) dst[(y / 2) * gx.w + xx / 2] += g[y * wo + xx];
      }
    }
  });
}

Var concat_channels(const Var& a, const Var& b) {
  const Tensor& ta = a->value;
  const Tensor& tb = b->value;
  if (ta.n != tb.n || ta.h != tb.h || ta.w != tb.w) throw InputError("concat: spatial or batch mismatch");
  Tensor out(ta.n, ta.c + tb.c, ta.h, ta.w);
  const std::size_t pa = ta.c * ta.plane(), pb = tb.c * tb.plane();
  for (int i = 0; i < ta.n; ++i) {
    std::copy_n(ta.data.begin() + i * pa, pa, out.data.begin() + i * (pa + pb));
    std::copy_n(tb.data.begin() + i * pb, pb, out.data.begin() + i * (pa + pb) + pa);
  }
  return make_result(std::move(out), {a, b}, [a, b, pa, pb](Node& self) {
    for (int i = 0; i < self.value.n; ++i) {
      const float* g = self.grad.data.data() + i * (pa + pb);
      if (a->requires_grad) {
        float* d = a->grad_buffer().data.data() + i * pa;
        for (std::size_t j = 0; j < pa; ++j) d[j] += g[j];
      }
      if (b->requires_grad) {
        float* d = b->grad_buffer().data.data() + i * pb;
        for (std::size_t j = 0; j < pb; ++j) d[j] += g[pa + j];
      }
    }
  });
}

}  // namespace bsynth::ag
