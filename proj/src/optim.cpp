#include "dck/optim.hpp"

#include <cmath>

namespace dck {

void AdamHyper::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorCode::bad_config, "adam: learning_rate must be > 0");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
    throw Error(ErrorCode::bad_config, "adam: betas must lie in (0,1)");
}

Tensor ParameterStore::create(const std::string& name, const Shape& shape, std::vector<double> init) {
  if (params_.count(name)) throw Error(ErrorCode::bad_config, "parameter already registered: " + name);
  Tensor t = Tensor::param(shape, std::move(init));
  params_.emplace(name, t);
  auto& st = state_[name];
  st.m.assign(t.data().size(), 0.0);
  st.v.assign(t.data().size(), 0.0);
  return t;
}

Tensor ParameterStore::create_uniform(const std::string& name, const Shape& shape, double lo,
                                      double hi, Rng& rng) {
  std::vector<double> init(static_cast<size_t>(shape_size(shape)));
  for (auto& v : init) v = rng.uniform(lo, hi);
  return create(name, shape, std::move(init));
}

Tensor ParameterStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error(ErrorCode::bad_config, "no such parameter: " + name);
  return it->second;
}

int64_t ParameterStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [k, t] : params_) n += t.size();
  return n;
}

void ParameterStore::adam_step(const std::map<std::string, std::vector<double>>& grads,
                               const AdamHyper& hyper) {
  hyper.validate();
  for (auto& [name, t] : params_) {
    auto git = grads.find(name);
    if (git == grads.end()) throw Error(ErrorCode::missing_gradient, "adam: missing gradient for " + name);
    const auto& g = git->second;
    if (g.size() != t.data().size())
      throw Error(ErrorCode::shape_mismatch, "adam: gradient size mismatch for " + name);
    auto& st = state_[name];
    st.step += 1;
    const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(st.step));
    auto& w = t.mutable_data();
    for (size_t i = 0; i < w.size(); ++i) {
      st.m[i] = hyper.beta1 * st.m[i] + (1.0 - hyper.beta1) * g[i];
      st.v[i] = hyper.beta2 * st.v[i] + (1.0 - hyper.beta2) * g[i] * g[i];
      const double mhat = st.m[i] / bc1;
      const double vhat = st.v[i] / bc2;
      w[i] -= hyper.learning_rate * mhat / (std::sqrt(vhat) + hyper.epsilon);
    }
  }
}

int64_t ParameterStore::step_count(const std::string& name) const {
  auto it = state_.find(name);
  if (it == state_.end()) throw Error(ErrorCode::bad_config, "no such parameter: " + name);
  return it->second.step;
}

std::map<std::string, std::vector<double>> ParameterStore::named_grads(const GradMap& g) const {
  std::map<std::string, std::vector<double>> out;
  for (const auto& [name, t] : params_) {
    auto it = g.find(t.node());
    if (it != g.end())
      out[name] = it->second;
    else
      out[name] = std::vector<double>(t.data().size(), 0.0);
  }
  return out;
}

double gradient_check(const std::function<Tensor()>& f, ParameterStore& store, double eps) {
  Tensor loss = f();
  if (!all_finite(loss)) throw Error(ErrorCode::non_finite, "gradient_check: non-finite loss");
  GradMap analytic = backward(loss);

  // A single step size cannot serve every element: large-curvature parameters
  // need a small eps (truncation falls as eps^2) while near-zero gradients
  // need a large one (roundoff grows as 1/eps). Each element therefore gets a
  // short ladder of central differences and keeps its best-conditioned rung;
  // a wrong analytic gradient disagrees at every rung.
  double worst = 0.0;
  for (const auto& [name, param] : store.all()) {
    Tensor t = param;  // non-const handle to the same node
    auto it = analytic.find(t.node());
    const std::vector<double>* ga = it != analytic.end() ? &it->second : nullptr;
    auto& w = t.mutable_data();
    for (size_t i = 0; i < w.size(); ++i) {
      const double keep = w[i];
      const double a = ga ? (*ga)[i] : 0.0;
      double best = HUGE_VAL;
      for (double h : {5.0 * eps, eps, eps / 5.0, eps / 25.0}) {
        w[i] = keep + h;
        Tensor up;
        {
          NoGradGuard ng;
          up = f();
        }
        w[i] = keep - h;
        Tensor dn;
        {
          NoGradGuard ng;
          dn = f();
        }
        w[i] = keep;
        if (!all_finite(up) || !all_finite(dn))
          throw Error(ErrorCode::non_finite, "gradient_check: non-finite perturbation at " + name);
        const double numeric = (up.at(0) - dn.at(0)) / (2.0 * h);
        const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
        best = std::min(best, std::fabs(a - numeric) / denom);
        if (best < 1e-4) break;
      }
      worst = std::max(worst, best);
    }
  }
  return worst;
}

}  // namespace dck
