#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gcalab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first accumulation
  bool requires_grad = false;
  // Graph edge: inputs this value was computed from and how to push the
  // output gradient back into them. Both empty for leaves.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  /// Gradient buffer, allocated (zeroed) on first use. Null when the
  /// tensor does not take gradients.
  double* grad_buffer();
};

}  // namespace detail

/// Dense row-major float64 tensor with optional reverse-mode gradient.
///
/// Copies are shallow: two `Tensor` handles may refer to the same storage,
/// which is how parameters are shared between a model and its optimizer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension `axis`; negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();
  bool is_leaf() const;

  /// Copy of the values with no graph attached.
  Tensor detach() const;

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires
  /// gradients. Intermediate gradients are recomputed from scratch on each
  /// call; leaf gradients accumulate until `zero_grad`.
  void backward() const;

  const std::shared_ptr<detail::TensorImpl>& impl() const noexcept { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Integer tensor for item ids and positions. Never differentiable.
struct IndexTensor {
  Shape shape;
  std::vector<std::int64_t> values;

  IndexTensor() = default;
  IndexTensor(Shape s, std::vector<std::int64_t> v);
  std::size_t numel() const { return values.size(); }
  std::int64_t at(std::size_t i, std::size_t j) const { return values[i * shape[1] + j]; }
};

/// Boolean tensor; true marks a real (unmasked) entry.
struct Mask {
  Shape shape;
  std::vector<std::uint8_t> values;

  Mask() = default;
  Mask(Shape s, std::vector<std::uint8_t> v);
  static Mask ones(Shape s);
  std::size_t numel() const { return values.size(); }
  bool at(std::size_t i, std::size_t j) const { return values[i * shape[1] + j] != 0; }
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled() noexcept;

namespace detail {

/// Builds an op result. When gradients are enabled and any parent takes
/// gradients, the result is attached to the graph with `backward`.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> parents,
                   std::function<void(TensorImpl&)> backward);

}  // namespace detail

}  // namespace gcalab
