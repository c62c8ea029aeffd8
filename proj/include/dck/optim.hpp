#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "dck/tensor.hpp"

namespace dck {

struct AdamHyper {
  double learning_rate = 0.00025;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  void validate() const;
};

// Named trainable parameters plus per-parameter Adam state. Names are unique;
// iteration order is the name order, which keeps updates deterministic.
class ParameterStore {
 public:
  // Registers a new parameter; throws if the name exists.
  Tensor create(const std::string& name, const Shape& shape, std::vector<double> init);
  Tensor create_uniform(const std::string& name, const Shape& shape, double lo, double hi, Rng& rng);

  bool has(const std::string& name) const { return params_.count(name) > 0; }
  Tensor get(const std::string& name) const;
  const std::map<std::string, Tensor>& all() const { return params_; }
  size_t count() const { return params_.size(); }
  int64_t total_elements() const;

  // Bias-corrected Adam over every parameter. `grads` must contain an entry
  // for every parameter name.
  void adam_step(const std::map<std::string, std::vector<double>>& grads, const AdamHyper& hyper);

  int64_t step_count(const std::string& name) const;

  // Translates a node-keyed GradMap into a name-keyed map with zero-filled
  // entries for parameters the graph never touched.
  std::map<std::string, std::vector<double>> named_grads(const GradMap& g) const;

 private:
  struct AdamState {
    std::vector<double> m, v;
    int64_t step = 0;
  };
  std::map<std::string, Tensor> params_;
  std::map<std::string, AdamState> state_;
};

// Max over all parameters and elements of
// |analytic - central difference| / max(|analytic|, |central|, 1e-8).
// `f` must be a deterministic scalar function of the store's current values.
double gradient_check(const std::function<Tensor()>& f, ParameterStore& store, double eps = 2e-5);

}  // namespace dck
