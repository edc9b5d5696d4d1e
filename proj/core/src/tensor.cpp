#include "gcalab/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "gcalab/error.hpp"

namespace gcalab {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

double* detail::TensorImpl::grad_buffer() {
  if (!requires_grad) return nullptr;
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch for " + shape_str(s));
  std::size_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i >= s[k]) throw IndexError("index out of range for " + shape_str(s));
    flat = flat * s[k] + i;
    ++k;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (!on) impl_->grad.clear();
}
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }
void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}
bool Tensor::is_leaf() const { return !impl_->backward_fn; }

Tensor Tensor::detach() const { return from(shape(), impl_->data, false); }

void Tensor::backward() const {
  if (numel() != 1) throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> seen;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{impl_.get(), 0}};
  seen.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      auto* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Leaves collect this pass in a fresh buffer and add the previous value
  // last, so a repeated pass accumulates exactly (g + g, not a running sum).
  std::vector<std::pair<detail::TensorImpl*, std::vector<double>>> previous;
  for (auto* node : order) {
    if (!node->backward_fn && !node->grad.empty()) previous.emplace_back(node, std::move(node->grad));
    node->grad.assign(node->data.size(), 0.0);
  }
  impl_->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
  for (auto& [node, old] : previous)
    for (std::size_t i = 0; i < old.size(); ++i) node->grad[i] += old[i];
}

IndexTensor::IndexTensor(Shape s, std::vector<std::int64_t> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size()) throw DimensionError("index tensor shape " + shape_str(shape) + " mismatch");
}

Mask::Mask(Shape s, std::vector<std::uint8_t> v) : shape(std::move(s)), values(std::move(v)) {
  if (shape_numel(shape) != values.size()) throw DimensionError("mask shape " + shape_str(shape) + " mismatch");
}

Mask Mask::ones(Shape s) {
  auto n = shape_numel(s);
  return Mask(std::move(s), std::vector<std::uint8_t>(n, 1));
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() noexcept { return g_grad_enabled; }

Tensor detail::make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> parents,
                           std::function<void(TensorImpl&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data), false);
  if (!g_grad_enabled) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& impl = *out.impl();
  impl.requires_grad = true;
  for (const auto& p : parents) impl.parents.push_back(p.impl());
  impl.backward_fn = std::move(backward);
  return out;
}

}  // namespace gcalab
