#include "testdg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace testdg {

Var ParamSet::add(const std::string& name, RealArray init) {
  return add(name, parameter(std::move(init)));
}

Var ParamSet::add(const std::string& name, const Var& param) {
  if (find(name)) throw std::invalid_argument("ParamSet: duplicate parameter " + name);
  if (!param) throw std::invalid_argument("ParamSet: null parameter " + name);
  Entry e;
  e.name = name;
  e.param = param;
  entries_.push_back(std::move(e));
  return entries_.back().param;
}

Var ParamSet::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return e.param;
  }
  return nullptr;
}

void ParamSet::zero_grad() {
  for (auto& e : entries_) e.param->grad.fill(0.0);
}

void ParamSet::set_requires_grad(bool enabled) {
  for (auto& e : entries_) e.param->requires_grad = enabled;
}

void ParamSet::step(double lr, OptMode mode) {
  if (!(lr > 0.0)) throw std::invalid_argument("optimizer step: lr must be > 0");
  if (mode == OptMode::adaptive_moment) ++step_count_;
  const double t = static_cast<double>(step_count_);

  for (auto& e : entries_) {
    RealArray& p = e.param->value;
    const RealArray& g = e.param->grad;
    if (g.numel() != p.numel()) {
      throw std::invalid_argument("optimizer step: gradients not populated for " + e.name);
    }
    if (mode == OptMode::sgd) {
      for (std::size_t i = 0; i < p.numel(); ++i) p[i] -= lr * g[i];
    } else {
      if (e.m.numel() != p.numel()) {
        e.m = RealArray(p.shape());
        e.v = RealArray(p.shape());
      }
      const double bc1 = 1.0 - std::pow(kBeta1, t);
      const double bc2 = 1.0 - std::pow(kBeta2, t);
      for (std::size_t i = 0; i < p.numel(); ++i) {
        e.m[i] = kBeta1 * e.m[i] + (1.0 - kBeta1) * g[i];
        e.v[i] = kBeta2 * e.v[i] + (1.0 - kBeta2) * g[i] * g[i];
        double m_hat = e.m[i] / bc1;
        double v_hat = e.v[i] / bc2;
        p[i] -= lr * m_hat / (std::sqrt(v_hat) + kEps);
      }
    }
    ensure_finite(p, "optimizer step");
  }
}

std::vector<RealArray> ParamSet::snapshot_values() const {
  std::vector<RealArray> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.param->value);
  return out;
}

void ParamSet::restore_values(const std::vector<RealArray>& values) {
  if (values.size() != entries_.size()) {
    throw std::invalid_argument("ParamSet::restore_values: count mismatch");
  }
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!values[i].same_shape(entries_[i].param->value)) {
      throw std::invalid_argument("ParamSet::restore_values: shape mismatch at " +
                                  entries_[i].name);
    }
    entries_[i].param->value = values[i];
  }
}

bool ParamSet::bit_equal_values(const std::vector<RealArray>& values) const {
  if (values.size() != entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (!entries_[i].param->value.bit_equal(values[i])) return false;
  }
  return true;
}

void optimizer_step(ParamSet& params, double lr, OptMode mode) {
  params.step(lr, mode);
}

}  // namespace testdg
