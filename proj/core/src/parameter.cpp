#include "gcalab/parameter.hpp"

#include <algorithm>
#include <cmath>

#include "gcalab/error.hpp"

namespace gcalab {

Tensor ParameterStore::add(const std::string& name, Tensor value, bool frozen) {
  if (contains(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  value.set_requires_grad(!frozen);
  params_.push_back({name, value, frozen});
  return value;
}

Tensor ParameterStore::zeros(const std::string& name, Shape shape) { return add(name, Tensor::zeros(std::move(shape))); }

Tensor ParameterStore::ones(const std::string& name, Shape shape) { return add(name, Tensor::full(std::move(shape), 1.0)); }

Tensor ParameterStore::uniform(const std::string& name, Shape shape, double bound, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

Tensor ParameterStore::normal(const std::string& name, Shape shape, double stddev, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return add(name, Tensor::from(std::move(shape), std::move(v)));
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
  if (it == params_.end()) throw ContractError("no parameter named '" + name + "'");
  return *it;
}

bool ParameterStore::contains(const std::string& name) const {
  return std::any_of(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterStore::count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::vector<std::vector<double>> ParameterStore::snapshot() const {
  std::vector<std::vector<double>> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void ParameterStore::restore(const std::vector<std::vector<double>>& values) {
  if (values.size() != params_.size()) throw ContractError("snapshot does not match parameter set");
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto dst = params_[i].tensor.mutable_data();
    if (dst.size() != values[i].size()) throw DimensionError("snapshot size mismatch for " + params_[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

Adam::Adam(ParameterStore& store, AdamOptions options) : store_(&store), options_(options) {
  for (const auto& p : store.all()) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

void Adam::step() {
  auto& params = store_->all();
  if (params.size() != m_.size()) throw ContractError("optimizer state does not match parameter set");
  for (const auto& p : params) {
    if (p.frozen || !p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient in parameter '" + p.name + "'");
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.frozen || !p.tensor.has_grad()) continue;
    auto w = p.tensor.mutable_data();
    auto g = p.tensor.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      m[j] = options_.beta1 * m[j] + (1.0 - options_.beta1) * g[j];
      v[j] = options_.beta2 * v[j] + (1.0 - options_.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      w[j] -= options_.lr * mhat / (std::sqrt(vhat) + options_.eps);
    }
  }
}

void Adam::zero_grad() { store_->zero_grad(); }

}  // namespace gcalab
