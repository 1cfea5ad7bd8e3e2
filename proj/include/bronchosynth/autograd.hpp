#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <utility>
#include <vector>

namespace bsynth::ag {

// malloc only promises 16 bytes. Eigen picks its vectorized GEMM path from
// the pointer alignment, so unaligned buffers make results depend on where
// the allocator happened to put them.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  bool operator==(const AlignedAllocator&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

// NCHW float tensor.
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  FloatBuffer data;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_, float fill = 0.0f)
      : n(n_), c(c_), h(h_), w(w_), data(static_cast<std::size_t>(n_) * c_ * h_ * w_, fill) {}

  std::size_t size() const { return data.size(); }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
  bool same_shape(const Tensor& o) const { return n == o.n && c == o.c && h == o.h && w == o.w; }
  float& at(int in, int ic, int ih, int iw) { return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw]; }
  float at(int in, int ic, int ih, int iw) const { return data[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw]; }
};

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer();
};

using Var = std::shared_ptr<Node>;

// While alive, new operations record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Var constant(Tensor value);
Var parameter(Tensor value);

// Reverse pass seeded with dL/d(var) for each pair. Gradients accumulate into
// every reachable node that requires them, including parameters.
void backward(const std::vector<std::pair<Var, Tensor>>& seeds);

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var instance_norm(const Var& x, float eps = 1e-5f);
Var relu(const Var& x);
Var leaky_relu(const Var& x, float slope);
Var tanh(const Var& x);
Var sigmoid(const Var& x);
Var add(const Var& a, const Var& b);
Var avg_pool2(const Var& x);
Var upsample2(const Var& x);
Var concat_channels(const Var& a, const Var& b);
// y = scale * x + shift
Var affine(const Var& x, float scale, float shift);

}  // namespace bsynth::ag
