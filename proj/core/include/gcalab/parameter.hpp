#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "gcalab/rng.hpp"
#include "gcalab/tensor.hpp"

namespace gcalab {

struct Parameter {
  std::string name;  // dotted path, e.g. "gca.0.A.gate.w1"
  Tensor tensor;
  bool frozen = false;

  std::size_t numel() const { return tensor.numel(); }
};

/// Ordered, name-unique collection of a model's parameters.
class ParameterStore {
 public:
  /// Registers a new trainable (or frozen) parameter and returns its handle.
  Tensor add(const std::string& name, Tensor value, bool frozen = false);

  Tensor zeros(const std::string& name, Shape shape);
  Tensor ones(const std::string& name, Shape shape);
  /// Uniform in [-bound, bound].
  Tensor uniform(const std::string& name, Shape shape, double bound, Rng& rng);
  Tensor normal(const std::string& name, Shape shape, double stddev, Rng& rng);

  const std::vector<Parameter>& all() const noexcept { return params_; }
  std::vector<Parameter>& all() noexcept { return params_; }
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  /// Sum of element counts over every parameter, frozen ones included.
  std::size_t count() const;
  void zero_grad();

  /// Deep copy of the current values, in registration order.
  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

 private:
  std::vector<Parameter> params_;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction over the non-frozen parameters of a store.
class Adam {
 public:
  Adam(ParameterStore& store, AdamOptions options = {});

  /// Applies one update from the gradients currently held by the
  /// parameters. Throws NumericalError naming the parameter if any
  /// gradient is not finite; in that case nothing is updated.
  void step();
  void zero_grad();

  long long steps() const noexcept { return t_; }
  const AdamOptions& options() const noexcept { return options_; }

 private:
  ParameterStore* store_;
  AdamOptions options_;
  long long t_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace gcalab
